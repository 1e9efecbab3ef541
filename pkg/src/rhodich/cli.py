"""Command-line interface.

Exit status: 0 on success, 1 when a requested assertion fails, 2 for
pre-flight errors (bad config, unknown fixture or stage, knob out of range).
Reports go under ``$RHODICH_OUTPUT_ROOT`` (default ``./rhodich-output``).
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from .errors import ConfigError
from .fixtures import FIXTURE_NAMES, builtin_fixture
from .scenario import STAGES, build_scenario, load_scenario, run_scenario

OUTPUT_ENV = "RHODICH_OUTPUT_ROOT"


def output_root(arg=None) -> Path:
    if arg:
        return Path(arg)
    return Path(os.environ.get(OUTPUT_ENV, "rhodich-output"))


def _finish(result) -> int:
    print((result.scenario.output / "summary.txt").read_text(encoding="utf-8"), end="")
    return 0 if result.passed else 1


def _fixture_config(args, pipeline, name_suffix):
    flat = {
        "scenario.name": f"{args.fixture}_{name_suffix}",
        "scenario.fixture": args.fixture,
        "scenario.pipeline": ",".join(pipeline),
        "scenario.seed": str(args.seed),
    }
    for opt, key in (("t_max", "grid.t_max"), ("step", "grid.step"), ("cert_step", "grid.cert_step"),
                     ("horizon_rho", "detect.horizon_rho"), ("gap", "detect.gap")):
        value = getattr(args, opt, None)
        if value is not None:
            flat[key] = str(value)
    return flat


def cmd_run(args) -> int:
    sc = load_scenario(args.config, output_root=output_root(args.output_root))
    return _finish(run_scenario(sc))


def cmd_fixtures(args) -> int:
    for name in FIXTURE_NAMES:
        fx = builtin_fixture(name)
        print(f"{name}: dim={fx.family.dim} rate={fx.rate.kind} Z_dim={fx.Z.k}"
              + (" discontinuous" if fx.family.discontinuous else ""))
        if args.verbose:
            for key, (value, tag) in fx.annotations.items():
                print(f"  {key} = {value} [{tag}]")
            for key, value in fx.knobs.items():
                print(f"  knob {key} = {value}")
    return 0


def cmd_detect(args) -> int:
    pipeline = ["validate", "detect"] + (["adapt"] if args.adapt else [])
    sc = build_scenario(_fixture_config(args, pipeline, "detect"), output_root=output_root(args.output_root))
    return _finish(run_scenario(sc))


def cmd_probe(args) -> int:
    pairs = {"Y1": ["probe_y1"], "YinfPrime": ["probe_yinf"], "both": ["probe_y1", "probe_yinf"]}[args.pair]
    sc = build_scenario(_fixture_config(args, pairs, "probe"), output_root=output_root(args.output_root))
    return _finish(run_scenario(sc))


def cmd_perturb(args) -> int:
    flat = _fixture_config(args, ["perturb"], "perturb")
    flat.update({"perturb.kind": args.kind, "perturb.delta": str(args.delta), "perturb.a": str(args.a),
                 "perturb.eps": str(args.eps)})
    if args.matrix:
        flat["perturb.matrix"] = args.matrix
    if args.sweep:
        flat["perturb.sweep"] = args.sweep
    sc = build_scenario(flat, output_root=output_root(args.output_root))
    return _finish(run_scenario(sc))


def cmd_report(args) -> int:
    path = Path(args.directory)
    if not path.is_dir():
        path = output_root(args.output_root) / args.directory
    summary = path / "summary.txt"
    if not summary.is_file():
        raise ConfigError(f"no summary.txt under {path}")
    text = summary.read_text(encoding="utf-8")
    print(text, end="")
    if args.all:
        for f in sorted(path.glob("*.txt")):
            if f.name != "summary.txt":
                print(f"--- {f.name}")
                print(f.read_text(encoding="utf-8"), end="")
    return 0 if "result=PASS" in text else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rhodich", description=__doc__.splitlines()[0])
    parser.add_argument("--output-root", help=f"report root (default ${OUTPUT_ENV} or ./rhodich-output)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a scenario file")
    p.add_argument("config", type=Path)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("fixtures", help="list builtin fixtures")
    p.add_argument("-v", "--verbose", action="store_true", help="show annotations and knobs")
    p.set_defaults(func=cmd_fixtures)

    def fixture_args(p):
        p.add_argument("--fixture", required=True, help=f"one of {', '.join(FIXTURE_NAMES)}")
        p.add_argument("--t-max", dest="t_max", type=float)
        p.add_argument("--step", type=float)
        p.add_argument("--cert-step", dest="cert_step", type=float)
        p.add_argument("--horizon-rho", dest="horizon_rho", type=float)
        p.add_argument("--gap", type=float)
        p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("detect", help="validate a fixture and fit a dichotomy certificate")
    fixture_args(p)
    p.add_argument("--adapt", action="store_true", help="also build and check adapted norms")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("probe", help="admissibility probes on a fixture")
    fixture_args(p)
    p.add_argument("--pair", choices=("Y1", "YinfPrime", "both"), default="both")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("perturb", help="robustness experiment on a fixture")
    fixture_args(p)
    p.add_argument("--kind", default="rate_decay", choices=("rate_decay", "constant", "zero"))
    p.add_argument("--delta", type=float, required=True)
    p.add_argument("--a", type=float, default=1.0)
    p.add_argument("--eps", type=float, default=0.0)
    p.add_argument("--matrix", help="perturbation shape, rows separated by ';'")
    p.add_argument("--sweep", help="comma-separated deltas for a sweep")
    p.set_defaults(func=cmd_perturb)

    p = sub.add_parser("report", help="print the summary of an output directory")
    p.add_argument("directory")
    p.add_argument("--all", action="store_true", help="print every stage report")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
