"""Command-line entry point.

    mjkd-adapt run --config cfg.ini --out runs/
    mjkd-adapt sweep --config cfg.ini --proportions 1/2,1/4,1/20
    mjkd-adapt generate|pretrain|select|adapt|evaluate|theory-check --seed 3

Exit codes: 0 success, 2 configuration/usage error, 3 training failure,
4 some seeds failed.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import pipeline
from .config import ConfigError, PipelineConfig, dump_config, load_config, parse_number
from .diagnostics import empirical_theory_check
from .network import load_checkpoint
from .selection import apply_selection, load_report

EXIT_OK, EXIT_CONFIG, EXIT_TRAINING, EXIT_PARTIAL = 0, 2, 3, 4
SWEEP_PROPORTIONS = (1 / 2, 1 / 3, 1 / 4, 1 / 5, 1 / 6, 1 / 20)

log = logging.getLogger("mjkd_adapt")


def _parse_proportions(text: str) -> list[float]:
    try:
        vals = [parse_number(t) for t in text.split(",") if t.strip()]
    except (ValueError, ZeroDivisionError):
        raise argparse.ArgumentTypeError(f"bad proportion list {text!r}") from None
    if not vals or any(not 0 < v <= 1 for v in vals):
        raise argparse.ArgumentTypeError("proportions must lie in (0, 1]")
    return vals


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="pipeline config file (defaults if omitted)")
    common.add_argument("--seed", type=int, help="run this seed instead of the config's list")
    common.add_argument("--out", type=Path, help="output directory (overrides the config)")
    common.add_argument("--force", action="store_true", help="write into an existing output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="mjkd-adapt", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="full pipeline for every seed")
    sw = sub.add_parser("sweep", parents=[common], help="selection-proportion sensitivity sweep")
    sw.add_argument("--proportions", type=_parse_proportions, default=list(SWEEP_PROPORTIONS))
    for name, text in (
        ("generate", "write synthetic source/target data"),
        ("pretrain", "train the source-only model M0"),
        ("select", "rank targets by MJKD and write the selection report"),
        ("adapt", "adversarial training on the updated split"),
        ("evaluate", "score the adapted model and write metrics"),
        ("theory-check", "binned optimal-discriminator / JSD report"),
    ):
        p = sub.add_parser(name, parents=[common], help=text)
        if name == "theory-check":
            p.add_argument("--bins", type=int, default=6)
            p.add_argument("--original-domains", action="store_true",
                           help="compare source vs all targets instead of the adversarial sides")
    sub.add_parser("show-config", parents=[common], help="print the normalized config")
    return parser


def _resolve(args) -> tuple[PipelineConfig, Path, list[int]]:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    out = args.out if args.out is not None else Path(cfg.pipeline.output_dir)
    seeds = [args.seed] if args.seed is not None else list(cfg.pipeline.seeds)
    return cfg, out, seeds


def _refuse_existing(out: Path, force: bool) -> bool:
    if out.exists() and any(out.iterdir()) and not force:
        print(f"error: output directory {out} exists and is not empty (use --force)", file=sys.stderr)
        return True
    return False


def _exit_for(results) -> int:
    failed = [r for r in results if r.get("status") != "ok"]
    if not failed:
        return EXIT_OK
    return EXIT_TRAINING if len(failed) == len(results) else EXIT_PARTIAL


def _cmd_run(cfg, out, seeds, args) -> int:
    if _refuse_existing(out, args.force):
        return EXIT_CONFIG
    results = pipeline.run_all(cfg, out, seeds)
    for r in results:
        if r["status"] == "ok":
            print(f"seed={r['seed']} source_only={r['source_only_target_acc']:.4f} "
                  f"target_acc={r['target_acc']:.4f} precision={r['selection_precision']:.4f}")
        else:
            print(f"seed={r['seed']} {r['status']}")
    print(f"summary: {out / pipeline.SUMMARY_FILE}")
    return _exit_for(results)


def _cmd_sweep(cfg, out, seeds, args) -> int:
    if _refuse_existing(out, args.force):
        return EXIT_CONFIG
    rows = pipeline.sweep_proportion(cfg, out, args.proportions, seeds)
    print("proportion,target_acc,selection_precision,seeds")
    for t in pipeline.sweep_table(args.proportions, rows):
        print(f"{t['proportion']!r},{t['target_acc']!r},{t['selection_precision']!r},{t['seeds']}")
    return _exit_for(rows)


def _theory(cfg, paths: pipeline.RunPaths, args):
    source, target = pipeline._load_data(paths)
    model, _ = load_checkpoint(paths.run_dir / pipeline.FINAL_CKPT)
    split = apply_selection(source, target, load_report(paths.run_dir / pipeline.REPORT_FILE))
    kwargs = {}
    if args.original_domains:
        kwargs = {"source_x": source.features, "target_x": target.features}
    report = empirical_theory_check(model, split, bins_per_axis=args.bins, seed=cfg.adapt.seed, **kwargs)
    (paths.run_dir / "theory.txt").write_text("\n".join(report.lines()) + "\n")
    return report


def _cmd_stage(cfg, out, seeds, args) -> int:
    if args.command == "generate" and _refuse_existing(out, args.force):
        return EXIT_CONFIG
    stage = {
        "generate": pipeline.stage_generate,
        "pretrain": pipeline.stage_pretrain,
        "select": pipeline.stage_select,
        "adapt": pipeline.stage_adapt,
        "evaluate": pipeline.stage_evaluate,
        "theory-check": lambda c, p: _theory(c, p, args),
    }[args.command]
    pipeline.write_config_echo(out, cfg)
    results = []
    for seed in seeds:
        paths = pipeline.RunPaths.single(pipeline.seed_dir(out, seed))
        try:
            value = stage(cfg.for_seed(seed), paths)
        except (OSError, ValueError, RuntimeError, FloatingPointError) as err:
            log.error("seed %s: %s failed: %s", seed, args.command, err)
            results.append({"seed": seed, "status": "failed"})
            continue
        if args.command == "evaluate":
            results.append({**value, "status": "ok"})
            print(" ".join(f"{k}={v!r}" for k, v in value.items()))
        else:
            results.append({"seed": seed, "status": "ok"})
            if args.command == "theory-check":
                print(f"seed={seed} " + " ".join(value.lines()))
    if args.command == "evaluate" and any(r["status"] == "ok" for r in results):
        pipeline.write_summary(out / pipeline.SUMMARY_FILE, results)
    return _exit_for(results)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg, out, seeds = _resolve(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    if args.command == "show-config":
        sys.stdout.write(dump_config(cfg))
        return EXIT_OK
    if args.command == "run":
        return _cmd_run(cfg, out, seeds, args)
    if args.command == "sweep":
        return _cmd_sweep(cfg, out, seeds, args)
    return _cmd_stage(cfg, out, seeds, args)


if __name__ == "__main__":
    sys.exit(main())
