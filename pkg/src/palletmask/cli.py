"""Command line entry point: ``palletmask {train,eval,annotate,replay,report}``.

Exit codes: 0 success, 2 configuration error, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .baselines import PlannerKind

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


class _ArgumentError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _ArgumentError(message)


def _load_config(args):
    from .harness import PRESETS, ConfigError, ExperimentConfig

    if args.config:
        cfg = ExperimentConfig.load(args.config)
    else:
        cfg = PRESETS[args.preset]()
    changes = {}
    if getattr(args, "planner", None):
        changes["planner"] = PlannerKind(args.planner)
    if getattr(args, "seeds", None):
        changes["seeds"] = tuple(args.seeds)
    if getattr(args, "out", None):
        changes["output_dir"] = str(args.out)
    if getattr(args, "episodes", None):
        changes["eval_episodes"] = args.episodes
    if getattr(args, "timesteps", None):
        try:
            changes["ppo"] = cfg.ppo.__class__.from_dict({**cfg.ppo.to_dict(), "total_timesteps": args.timesteps})
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    return cfg.replace(**changes) if changes else cfg


def _cmd_train(args) -> int:
    from .harness import run_experiment

    cfg = _load_config(args).replace(train=True)

    def progress(seed, row):
        logging.info("seed %d t=%d iou=%.3f util=%.3f", seed, row["timestep"], row["val_iou"], row["utilization"])

    report = run_experiment(cfg, progress=progress)
    print(report.table())
    return EXIT_OK


def _cmd_eval(args) -> int:
    from .harness import run_experiment

    cfg = _load_config(args).replace(train=False, oracle_mask=args.oracle_mask)
    report = run_experiment(cfg, checkpoint_dir=args.checkpoints)
    print(report.table())
    return EXIT_OK


def _parse_dims(text: str) -> tuple[int, int, int]:
    try:
        dims = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise _ArgumentError(f"box dims must look like 3,3,2 (got {text!r})") from None
    if len(dims) != 3:
        raise _ArgumentError("box dims need three integers")
    return dims


def _cmd_annotate(args) -> int:
    from .geometry import BoxSpec, GridConfig, PalletState
    from .oracle import OracleConfig, annotate_feasibility

    if args.pallet:
        pallet = PalletState.from_json(Path(args.pallet).read_text())
    else:
        pallet = PalletState(GridConfig(*args.grid))
    box_id = max((p.box.id for p in pallet.placed), default=-1) + 1
    box = BoxSpec(box_id, _parse_dims(args.box), args.density, args.rigidity)
    cfg = OracleConfig(
        noise_sigma_xy=args.sigma_xy, noise_sigma_rot_deg=args.sigma_rot, noise_samples=args.noise_samples
    )
    fmap = annotate_feasibility(pallet, box, args.orientation, cfg, args.seed)
    if args.out:
        out = Path(args.out)
        out.write_bytes(fmap.to_pgm() if out.suffix == ".pgm" else fmap.to_bytes())
    for row in fmap.bits:
        print("".join("#" if b else "." for b in row))
    return EXIT_OK


def _cmd_replay(args) -> int:
    from .harness import ExperimentConfig, replay

    cfg = ExperimentConfig.load(args.config) if args.config else None
    print(json.dumps(replay(args.log, cfg), indent=2, sort_keys=True))
    return EXIT_OK


def _cmd_report(args) -> int:
    from .harness import REPORT_FIELDS, ConfigError, MetricsReport

    reports = []
    for d in args.runs:
        path = Path(d) / "report.json" if Path(d).is_dir() else Path(d)
        try:
            reports.append(MetricsReport.from_dict(json.loads(path.read_text())))
        except (OSError, ValueError, KeyError) as exc:
            raise ConfigError(f"cannot read report {path}: {exc}") from exc
    if args.json:
        print(json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True))
        return EXIT_OK
    width = max(len(k) for k in REPORT_FIELDS)
    print(" " * width + "".join(f"  {r.planner:>20}" for r in reports))
    for k in REPORT_FIELDS:
        cells = "".join(f"  {r.mean[k]:>11.4f} ± {r.std[k]:<6.4f}" for r in reports)
        print(f"{k:<{width}}{cells}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="palletmask", description="Palletization planner with an online-learned action mask.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    planners = [k.value for k in PlannerKind]

    def experiment_args(sp):
        src = sp.add_mutually_exclusive_group()
        src.add_argument("--config", help="experiment config (JSON)")
        src.add_argument("--preset", choices=["desk", "paper"], default="desk")
        sp.add_argument("--planner", choices=planners)
        sp.add_argument("--seeds", type=int, nargs="+")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--episodes", type=int, help="evaluation episodes per seed")

    sp = sub.add_parser("train", help="train and evaluate one planner")
    experiment_args(sp)
    sp.add_argument("--timesteps", type=int)
    sp.set_defaults(func=_cmd_train)

    sp = sub.add_parser("eval", help="evaluate saved checkpoints (or a random policy)")
    experiment_args(sp)
    sp.add_argument("--checkpoints", help="directory written by train")
    sp.add_argument("--oracle-mask", action="store_true", help="use the stability oracle as the mask")
    sp.set_defaults(func=_cmd_eval)

    sp = sub.add_parser("annotate", help="print the oracle feasibility map for one box")
    sp.add_argument("--pallet", help="pallet JSON; empty pallet when omitted")
    sp.add_argument("--grid", type=int, nargs=3, default=[10, 10, 10], metavar=("L", "W", "H"))
    sp.add_argument("--box", required=True, help="box dims as L,W,H cells")
    sp.add_argument("--density", type=float, default=500.0)
    sp.add_argument("--rigidity", type=float, default=0.5)
    sp.add_argument("--orientation", type=int, default=0)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--noise-samples", type=int, default=5)
    sp.add_argument("--sigma-xy", type=float, default=0.05)
    sp.add_argument("--sigma-rot", type=float, default=5.0)
    sp.add_argument("--out", help="write the map (.pgm image or binary)")
    sp.set_defaults(func=_cmd_annotate)

    sp = sub.add_parser("replay", help="re-execute a replay log and print its metrics")
    sp.add_argument("log")
    sp.add_argument("--config", help="require the log to match this config")
    sp.set_defaults(func=_cmd_replay)

    sp = sub.add_parser("report", help="tabulate report.json files side by side")
    sp.add_argument("runs", nargs="+", help="run directories or report files")
    sp.add_argument("--json", action="store_true")
    sp.set_defaults(func=_cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    from .geometry import GeometryError
    from .harness import ConfigError, ReplayError

    try:
        args = build_parser().parse_args(argv)
    except _ArgumentError as exc:
        print(f"palletmask: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, _ArgumentError) as exc:
        print(f"palletmask: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ReplayError, GeometryError, OSError, ValueError, RuntimeError) as exc:
        print(f"palletmask: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
