"""CSV and JSON serialization.

Schemas:

* sampled functions: ``t,x1,...,xd``
* rate samples: ``t,mu``
* generator samples: ``t,a11,a12,...,add``
* subspace bases: one column per basis vector, ``b1,...,bk``

Floats are written with ``repr`` so files round-trip bitwise.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .dichotomy import DichotomyCertificate, ProjectionPath, _orth
from .funcspaces import SampledFunction, SubspaceZ

__all__ = [
    "fmt",
    "write_csv",
    "read_csv",
    "write_sampled",
    "read_sampled",
    "read_rate_samples",
    "read_generator_samples",
    "write_basis",
    "read_basis",
    "certificate_to_dict",
    "save_certificate",
    "load_certificate",
]


def fmt(v) -> str:
    """Shortest round-trip text for a number."""
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, header, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])
    return path


def read_csv(path, required=None):
    """Header and float matrix of a CSV file; checks ``required`` leading columns."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty CSV")
    header = [h.strip() for h in rows[0]]
    if required is not None and header[: len(required)] != list(required):
        raise ValueError(f"{path}: expected columns starting with {','.join(required)}, got {','.join(header)}")
    try:
        data = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=float)
    except ValueError as exc:
        raise ValueError(f"{path}: non-numeric entry ({exc})") from None
    if data.ndim != 2 or len(data) == 0:
        raise ValueError(f"{path}: no data rows")
    return header, data


def write_sampled(path, f: SampledFunction) -> Path:
    header = ["t"] + [f"x{i + 1}" for i in range(f.dim)]
    return write_csv(path, header, (np.concatenate([[t], v]) for t, v in zip(f.grid, f.values)))


def read_sampled(path, extension: str = "zero") -> SampledFunction:
    header, data = read_csv(path, required=["t"])
    if len(header) < 2:
        raise ValueError(f"{path}: need at least one x column")
    return SampledFunction(data[:, 0], data[:, 1:], extension=extension, label=Path(path).stem)


def read_rate_samples(path):
    """``(t, mu)`` arrays from a ``t,mu`` CSV."""
    _, data = read_csv(path, required=["t", "mu"])
    return data[:, 0], data[:, 1]


def read_generator_samples(path):
    """``(t, entries)`` from a ``t,a11,...`` CSV; entries have shape (n, d, d)."""
    header, data = read_csv(path, required=["t"])
    k = len(header) - 1
    d = int(round(np.sqrt(k)))
    if d * d != k or d == 0:
        raise ValueError(f"{path}: {k} matrix columns is not a square count")
    expected = [f"a{i + 1}{j + 1}" for i in range(d) for j in range(d)]
    if d < 10 and header[1:] != expected:
        raise ValueError(f"{path}: expected columns {','.join(expected)}")
    return data[:, 0], data[:, 1:].reshape(-1, d, d)


def write_basis(path, basis) -> Path:
    basis = np.asarray(basis, dtype=float)
    return write_csv(path, [f"b{j + 1}" for j in range(basis.shape[1])], basis)


def read_basis(path) -> SubspaceZ:
    _, data = read_csv(path)
    return SubspaceZ.span(data)


def certificate_to_dict(cert: DichotomyCertificate) -> dict:
    proj = cert.proj
    return {
        "D": float(cert.D),
        "lambda": float(cert.lam),
        "M": float(cert.M),
        "rate": cert.rate.describe() if cert.rate is not None else None,
        "family": getattr(cert.family, "name", None),
        "grid": [float(t) for t in proj.grid],
        "P": proj.P.tolist(),
        "stable_dim": int(proj.S[0].shape[1]) if proj.S else None,
        "diagnostics": {k: (float(v) if isinstance(v, (float, np.floating)) else v)
                        for k, v in cert.diagnostics.items()},
    }


def save_certificate(cert: DichotomyCertificate, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(certificate_to_dict(cert), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_certificate(path, family=None, rate=None) -> DichotomyCertificate:
    """Certificate from JSON; the projection path uses the stored nodes only."""
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    grid = np.array(data["grid"], dtype=float)
    P = np.array(data["P"], dtype=float)
    d = P.shape[1]
    S = [_orth(p) for p in P]
    U = [_orth(np.eye(d) - p) for p in P]
    proj = ProjectionPath(grid=grid, P=P, S=S, U=U)
    return DichotomyCertificate(proj=proj, D=data["D"], lam=data["lambda"], M=data["M"], rate=rate,
                                family=family, diagnostics=data.get("diagnostics", {}))
