"""Command-line entry point: ``sage-ada {gen-data,run,compare,bounds,emit-plotdata}``.

Every ``ExperimentConfig`` field is also a flag (``n_pre`` -> ``--n-pre``);
flags override values read from ``--config``. On failure the last stderr
line is a JSON object ``{"error": <type>, "message": <text>}`` and the exit
code is nonzero.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from .config import ExperimentConfig, load_config, parse_config
from .data import SyntheticSpec, generate_dataset, read_dataset, write_dataset
from .experiment import PRESETS, emit_plotdata, expand_preset, run_experiment


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="key = value config file")
    p.add_argument("--data-dir", type=Path, help="read dataset CSVs instead of generating them")
    for fld in fields(ExperimentConfig):
        p.add_argument("--" + fld.name.replace("_", "-"), dest=fld.name, default=None, metavar="VALUE")


def _config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    overrides = {f.name: getattr(args, f.name) for f in fields(ExperimentConfig)}
    if args.config is not None:
        return load_config(args.config, **overrides)
    return parse_config("", **overrides)


def _load_data(args: argparse.Namespace, cfg: ExperimentConfig):
    if args.data_dir is None:
        return None
    return read_dataset(args.data_dir, n_classes=cfg.data_n_classes)


def cmd_gen_data(args: argparse.Namespace) -> int:
    spec = SyntheticSpec(
        family=args.family,
        n_source=args.n_source,
        n_target=args.n_target,
        rotation=args.rotation,
        translation=tuple(args.translation),
        noise=args.noise,
        n_classes=args.n_classes,
        seed=args.seed,
    )
    paths = write_dataset(generate_dataset(spec), args.out)
    for name, path in paths.items():
        print(f"{name}\t{path}")
    return 0


def _report(out) -> int:
    print(f"wrote {len(out.rows)} metric rows to {out.directory}")
    for k, seed, err in out.failures:
        print(f"failed cell config={k} seed={seed}: {err}", file=sys.stderr)
    return 0 if not out.failures else 2


def cmd_run(args: argparse.Namespace) -> int:
    cfg = _config_from_args(args)
    out = run_experiment(cfg, data=_load_data(args, cfg), save_checkpoints=True)
    return _report(out)


def cmd_compare(args: argparse.Namespace) -> int:
    cfg = _config_from_args(args)
    if args.preset:
        variations = PRESETS[args.preset]
    else:
        strategies = args.strategies.split(",") if args.strategies else [cfg.strategy]
        variants = args.variants.split(",") if args.variants else [cfg.variant]
        variations = [{"strategy": s, "variant": v} for s in strategies for v in variants]
    configs = expand_preset(cfg, variations)
    out = run_experiment(configs, data=_load_data(args, cfg))
    plot = emit_plotdata(out.directory / "metrics.csv", out.directory / "plotdata.csv")
    for p in sorted(plot, key=lambda p: (p.strategy, p.variant, p.round)):
        print(f"{p.strategy:>15} {p.variant:>9} round {p.round:>2}  acc {p.mean_acc:.4f} +- {p.std_acc:.4f}")
    return _report(out)


def cmd_bounds(args: argparse.Namespace) -> int:
    cfg = _config_from_args(args).replace(diagnostics="rounds")
    out = run_experiment(cfg, data=_load_data(args, cfg))
    for b in out.bounds:
        print(
            f"{b['run_id']} round {b['round']}: override identity {'holds' if b['holds_eq4'] else 'FAILS'}; "
            f"bound rhs {float(b['rhs_eq5']):.4g} vs eps_T(h_A) {float(b['eps_t_ha_l2']):.4g} "
            f"(slack {float(b['slack_eq5']):.4g}, tau_hat {float(b['tau_hat']):.4g}, eta_hat {float(b['eta_hat']):.4g})"
        )
    return _report(out)


def cmd_emit_plotdata(args: argparse.Namespace) -> int:
    out = args.out or Path(args.metrics).with_name("plotdata.csv")
    plot = emit_plotdata(args.metrics, out)
    print(f"wrote {len(plot)} rows to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sage-ada", description="Active domain adaptation with SAGE.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write source/target-train/target-test CSVs")
    g.add_argument("--family", default="two_moons_shift")
    g.add_argument("--n-source", type=int, default=1000)
    g.add_argument("--n-target", type=int, default=1000)
    g.add_argument("--rotation", type=float, default=0.6)
    g.add_argument("--translation", type=float, nargs=2, default=(0.0, 0.0))
    g.add_argument("--noise", type=float, default=0.1)
    g.add_argument("--n-classes", type=int, default=2)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", type=Path, required=True)
    g.set_defaults(func=cmd_gen_data)

    r = sub.add_parser("run", help="one strategy over the configured seeds")
    _add_config_flags(r)
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("compare", help="several strategies/variants on shared seeds")
    _add_config_flags(c)
    c.add_argument("--preset", choices=sorted(PRESETS))
    c.add_argument("--strategies", help="comma-separated strategy tags")
    c.add_argument("--variants", help="comma-separated active-classifier variants")
    c.set_defaults(func=cmd_compare)

    b = sub.add_parser("bounds", help="run with per-round bound diagnostics")
    _add_config_flags(b)
    b.set_defaults(func=cmd_bounds)

    e = sub.add_parser("emit-plotdata", help="aggregate a metrics CSV into mean/std curves")
    e.add_argument("metrics", type=Path)
    e.add_argument("--out", type=Path)
    e.set_defaults(func=cmd_emit_plotdata)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except Exception as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
