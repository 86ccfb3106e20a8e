"""Select-and-adapt pipeline stages, each reading and writing a run directory.

Stage order per seed: generate -> pretrain -> select -> adapt -> evaluate.
Every stage derives its randomness from the seed alone and exchanges state
only through files with exact round-trips, so running stages one by one
gives the same numbers as :func:`run_seed`.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import PipelineConfig, dump_config
from .data_synth import LabeledDataset, generate_pair, load_dataset, save_dataset
from .kernel_metric import build_bank, relative_distances
from .network import (
    bottleneck,
    forward_features,
    init_discriminator,
    load_checkpoint,
    save_checkpoint,
)
from .selection import (
    SelectionReport,
    apply_selection,
    load_report,
    pseudo_label,
    save_report,
    select_balanced,
    update_split,
)
from .trainer import (
    Metrics,
    adversarial_train,
    discriminator_accuracy,
    evaluate,
    pretrain,
    side_accuracy,
)

log = logging.getLogger(__name__)

SOURCE_FILE = "source.csv"
TARGET_FILE = "target.csv"
PRETRAIN_CKPT = "model_pretrain.ckpt"
FINAL_CKPT = "model_final.ckpt"
REPORT_FILE = "selection.csv"
METRICS_FILE = "metrics.txt"
SUMMARY_FILE = "summary.csv"
CONFIG_ECHO = "config.ini"


@dataclass
class RunPaths:
    """``data_dir`` holds generated data and the pretrained model; ``run_dir``
    holds selection, adaptation and evaluation outputs. They coincide for a
    plain run and differ in proportion sweeps, where one pretraining is shared.
    """

    data_dir: Path
    run_dir: Path

    @classmethod
    def single(cls, run_dir) -> "RunPaths":
        return cls(Path(run_dir), Path(run_dir))


def seed_dir(out_dir, seed: int) -> Path:
    return Path(out_dir) / f"seed_{seed}"


class _MetricsLog:
    def __init__(self, path: Path):
        self.fh = open(path, "w")

    def __call__(self, m: Metrics):
        self.fh.write(m.line() + "\n")

    def close(self):
        self.fh.close()


def stage_generate(cfg: PipelineConfig, paths: RunPaths) -> None:
    paths.data_dir.mkdir(parents=True, exist_ok=True)
    source, target = generate_pair(cfg.shift)
    save_dataset(source, paths.data_dir / SOURCE_FILE)
    save_dataset(target, paths.data_dir / TARGET_FILE)


def _load_data(paths: RunPaths) -> tuple[LabeledDataset, LabeledDataset]:
    return load_dataset(paths.data_dir / SOURCE_FILE), load_dataset(paths.data_dir / TARGET_FILE)


def _target_eval(target: LabeledDataset):
    return (target.features, target.ground_truth) if target.ground_truth is not None else None


def stage_pretrain(cfg: PipelineConfig, paths: RunPaths) -> list[Metrics]:
    source, target = _load_data(paths)
    mlog = _MetricsLog(paths.data_dir / "pretrain.log")
    try:
        model, trace = pretrain(
            source, cfg.pretrain, hidden=cfg.network.hidden,
            bottleneck_width=cfg.network.bottleneck, target_eval=_target_eval(target),
            on_metrics=mlog,
        )
    finally:
        mlog.close()
    model.feature_range = tuple(cfg.network.feature_range)
    save_checkpoint(paths.data_dir / PRETRAIN_CKPT, model)
    return trace


def rank_targets(cfg: PipelineConfig, model, source: LabeledDataset, target_x: np.ndarray):
    """Pseudo-labels, probabilities and relative distances for ``target_x``."""
    pred, probs = pseudo_label(model, target_x)
    src_feats = forward_features(model, source.features)
    tgt_feats = forward_features(model, target_x)
    bank = build_bank(src_feats, source.labels, source.class_count, tgt_feats, cfg.kernel)
    r = relative_distances(bank.distances(tgt_feats), pred, cfg.kernel.epsilon)
    return pred, probs, r


def select_from(cfg, model, source, target, proportion: float,
                ranking=None) -> SelectionReport:
    pred, _, r = ranking if ranking is not None else rank_targets(cfg, model, source, target.features)
    return select_balanced(pred, r, proportion, source.class_count)


def stage_select(cfg: PipelineConfig, paths: RunPaths, ranking=None) -> SelectionReport:
    source, target = _load_data(paths)
    model, _ = load_checkpoint(paths.data_dir / PRETRAIN_CKPT)
    report = select_from(cfg, model, source, target, cfg.selection.proportion, ranking)
    paths.run_dir.mkdir(parents=True, exist_ok=True)
    save_report(report, paths.run_dir / REPORT_FILE)
    return report


def _disc_rng(seed: int):
    return np.random.default_rng(np.random.SeedSequence([seed, 3]))


def stage_adapt(cfg: PipelineConfig, paths: RunPaths) -> list[Metrics]:
    source, target = _load_data(paths)
    model, _ = load_checkpoint(paths.data_dir / PRETRAIN_CKPT)
    report = load_report(paths.run_dir / REPORT_FILE)
    split = apply_selection(source, target, report)
    disc = init_discriminator(
        model.bottleneck_dim, model.class_count, cfg.network.disc_hidden,
        cfg.network.disc_dropout, cfg.network.condition, rng=_disc_rng(cfg.adapt.seed),
    )
    mlog = _MetricsLog(paths.run_dir / "adapt.log")
    trace = []
    try:
        for rnd in range(cfg.selection.rounds):
            if rnd > 0:
                # further rounds re-rank the remaining pool with the adapted model
                rest = split.unlabeled_index
                if rest.size == 0:
                    break
                pred, _, r = rank_targets(cfg, model, source, split.unlabeled_x)
                extra = select_balanced(pred, r, cfg.selection.proportion, source.class_count)
                extra.promoted_indices = rest[extra.promoted_indices]
                split = update_split(split, extra)
            model, disc, t = adversarial_train(
                model, disc, split, cfg.adapt,
                source_eval=(source.features, source.labels),
                target_eval=_target_eval(target), on_metrics=mlog,
            )
            trace.extend(t)
    finally:
        mlog.close()
    save_checkpoint(paths.run_dir / FINAL_CKPT, model, disc)
    _dump_embeddings(paths.run_dir / "embeddings.csv", model, source, target, report)
    return trace


def _dump_embeddings(path, model, source, target, report):
    """Bottleneck coordinates with labels and domain tags for external plotting."""
    promoted = np.zeros(target.n, dtype=bool)
    promoted[report.promoted_indices] = True
    b = model.bottleneck_dim
    lines = ["domain,label,predicted,promoted," + ",".join(f"b_{j}" for j in range(b))]
    for ds, labels, flags in (
        (source, source.labels, np.zeros(source.n, dtype=bool)),
        (target, target.ground_truth if target.ground_truth is not None
         else np.full(target.n, -1), promoted),
    ):
        f = bottleneck(model, ds.features)
        pred, _ = pseudo_label(model, ds.features)
        for dom, lab, pr, fl, row in zip(ds.domain.tolist(), labels.tolist(), pred.tolist(),
                                        flags.tolist(), f.tolist()):
            lines.append(f"{dom},{lab},{pr},{int(fl)}," + ",".join(repr(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def stage_evaluate(cfg: PipelineConfig, paths: RunPaths) -> dict:
    source, target = _load_data(paths)
    if target.ground_truth is None:
        raise ValueError("evaluation needs target ground truth (target.truth.csv)")
    m0, _ = load_checkpoint(paths.data_dir / PRETRAIN_CKPT)
    model, disc = load_checkpoint(paths.run_dir / FINAL_CKPT)
    report = load_report(paths.run_dir / REPORT_FILE)
    split = apply_selection(source, target, report)
    truth = target.ground_truth
    final = evaluate(model, target.features, truth)
    baseline = evaluate(m0, target.features, truth)
    out = {
        "seed": cfg.adapt.seed,
        "proportion": cfg.selection.proportion,
        "source_only_target_acc": baseline.accuracy,
        "source_only_source_acc": evaluate(m0, source.features, source.labels).accuracy,
        "target_acc": final.accuracy,
        "source_acc": evaluate(model, source.features, source.labels).accuracy,
        "pseudo_label_acc": baseline.accuracy,
        "selection_precision": report.precision(truth),
        "selected": int(report.promoted_indices.size),
        "disc_acc": discriminator_accuracy(model, disc, split) if disc is not None else math.nan,
        "disc_domain_acc": side_accuracy(model, disc, source.features, target.features)
        if disc is not None else math.nan,
    }
    lines = [f"{k}={v!r}" for k, v in out.items()]
    lines += [f"target_acc_class_{m}={v!r}" for m, v in enumerate(final.per_class.tolist())]
    (paths.run_dir / METRICS_FILE).write_text("\n".join(lines) + "\n")
    return out


def read_metrics(path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        k, v = line.split("=", 1)
        out[k] = int(v) if k in ("seed", "selected") else float(v)
    return out


def run_seed(cfg: PipelineConfig, seed: int, paths: RunPaths, skip_shared: bool = False) -> dict:
    """Algorithm steps for one seed. ``skip_shared`` reuses existing data and M0."""
    cfg = cfg.for_seed(seed)
    if not skip_shared:
        stage_generate(cfg, paths)
        stage_pretrain(cfg, paths)
    stage_select(cfg, paths)
    stage_adapt(cfg, paths)
    return stage_evaluate(cfg, paths)


SUMMARY_COLUMNS = ("seed", "status", "source_only_source_acc", "source_only_target_acc", "target_acc",
                   "selection_precision", "disc_acc", "disc_domain_acc")


def write_summary(path, results: Sequence[dict]) -> dict:
    """Per-seed rows plus ``mean`` and ``std`` rows over successful seeds."""
    ok = [r for r in results if r.get("status") == "ok"]
    lines = [",".join(SUMMARY_COLUMNS)]
    for r in results:
        lines.append(",".join(
            str(r.get(c, "")) if c in ("seed", "status") else repr(float(r.get(c, math.nan)))
            for c in SUMMARY_COLUMNS
        ))
    agg = {}
    for stat, fn in (("mean", np.mean), ("std", np.std)):
        vals = {c: float(fn([r[c] for r in ok])) if ok else math.nan for c in SUMMARY_COLUMNS[2:]}
        agg[stat] = vals
        lines.append(f"{stat},{len(ok)}," + ",".join(repr(vals[c]) for c in SUMMARY_COLUMNS[2:]))
    Path(path).write_text("\n".join(lines) + "\n")
    return agg


def read_summary(path) -> dict:
    lines = Path(path).read_text().splitlines()
    cols = lines[0].split(",")
    rows = {}
    for line in lines[1:]:
        toks = line.split(",")
        rows[toks[0]] = dict(zip(cols, toks))
    return rows


def write_config_echo(out_dir, cfg: PipelineConfig) -> None:
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    (Path(out_dir) / CONFIG_ECHO).write_text(dump_config(cfg))


def run_all(cfg: PipelineConfig, out_dir, seeds: Optional[Sequence[int]] = None) -> list[dict]:
    """Run every seed into ``out_dir/seed_<n>`` and write the summary table.

    A failing seed is logged and recorded with ``status`` set to the error;
    remaining seeds still run.
    """
    out_dir = Path(out_dir)
    write_config_echo(out_dir, cfg)
    results = []
    for seed in seeds if seeds is not None else cfg.pipeline.seeds:
        try:
            r = run_seed(cfg, seed, RunPaths.single(seed_dir(out_dir, seed)))
            r["status"] = "ok"
        except Exception as err:  # noqa: BLE001 - a failed seed must not stop the rest
            log.error("seed %s failed: %s", seed, err)
            r = {"seed": seed, "status": f"failed:{type(err).__name__}"}
        results.append(r)
    write_summary(out_dir / SUMMARY_FILE, results)
    return results


def sweep_proportion(cfg: PipelineConfig, out_dir, proportions: Sequence[float],
                     seeds: Optional[Sequence[int]] = None) -> list[dict]:
    """Full pipeline per (proportion, seed), sharing data and M0 per seed.

    Writes ``sweep.csv`` with per-cell rows and a seed-averaged row per
    proportion.
    """
    for p in proportions:
        if not 0 < p <= 1:
            raise ValueError(f"proportion {p} outside (0, 1]")
    out_dir = Path(out_dir)
    write_config_echo(out_dir, cfg)
    rows = []
    for seed in seeds if seeds is not None else cfg.pipeline.seeds:
        scfg = cfg.for_seed(seed)
        shared = seed_dir(out_dir / "shared", seed)
        base = RunPaths.single(shared)
        try:
            stage_generate(scfg, base)
            stage_pretrain(scfg, base)
            source, target = _load_data(base)
            m0, _ = load_checkpoint(shared / PRETRAIN_CKPT)
            ranking = rank_targets(scfg, m0, source, target.features)
        except Exception as err:  # noqa: BLE001
            log.error("seed %s failed before selection: %s", seed, err)
            rows.extend({"proportion": p, "seed": seed, "status": "failed"} for p in proportions)
            continue
        for i, p in enumerate(proportions):
            pcfg = replace(scfg, selection=replace(scfg.selection, proportion=p))
            paths = RunPaths(shared, seed_dir(out_dir / f"prop_{i}", seed))
            try:
                stage_select(pcfg, paths, ranking)
                stage_adapt(pcfg, paths)
                r = stage_evaluate(pcfg, paths)
                r["status"] = "ok"
            except Exception as err:  # noqa: BLE001
                log.error("proportion %s seed %s failed: %s", p, seed, err)
                r = {"seed": seed, "status": "failed"}
            r["proportion"] = p
            rows.append(r)
    _write_sweep(out_dir / "sweep.csv", proportions, rows)
    return rows


def sweep_table(proportions, rows) -> list[dict]:
    """Seed-averaged ``(proportion, target_acc, selection_precision)`` per proportion."""
    table = []
    for p in proportions:
        ok = [r for r in rows if r["proportion"] == p and r.get("status") == "ok"]
        table.append({
            "proportion": p,
            "target_acc": float(np.mean([r["target_acc"] for r in ok])) if ok else math.nan,
            "selection_precision": float(np.nanmean([r["selection_precision"] for r in ok]))
            if ok else math.nan,
            "seeds": len(ok),
        })
    return table


def _write_sweep(path, proportions, rows):
    lines = ["proportion,seed,target_acc,selection_precision,selected"]
    for r in rows:
        if r.get("status") != "ok":
            lines.append(f"{r['proportion']!r},{r['seed']},nan,nan,0")
            continue
        lines.append(f"{r['proportion']!r},{r['seed']},{r['target_acc']!r},"
                     f"{r['selection_precision']!r},{r['selected']}")
    for t in sweep_table(proportions, rows):
        lines.append(f"{t['proportion']!r},mean,{t['target_acc']!r},{t['selection_precision']!r},")
    Path(path).write_text("\n".join(lines) + "\n")
