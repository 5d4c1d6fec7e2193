"""Stage commands on top of :class:`RunConfig`: data, checkpoints, reports.

Artifacts of stage ``s`` land in the output directory as ``s[-tag].ckpt``,
``.csv``, ``.json`` and ``.png``, where the tag names the ablation switches
that affect that stage. Each stage loads its prerequisite checkpoint from
disk and checks the embedded config digest, so a command sequence behaves
the same whether run in one process or one command at a time.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import pipeline, plotting, reports
from .config import ConfigError, RunConfig
from .data import Dataset, apply_split, read_idx, reveal_labels, synth_shapes
from .evaluation import clustering_acc, incremental_report, kmeans_baseline, unlabelled_acc
from .evaluation.metrics import classification_acc
from .evaluation.sweep import sweep_k
from .model import Model, decode_checkpoint, encode_checkpoint, load_checkpoint

log = logging.getLogger(__name__)

PREREQUISITE = {"supervised": "selfsup", "joint": "supervised", "incremental": "supervised"}
COMMAND_OF = {"selfsup": "pretrain", "supervised": "finetune", "joint": "discover",
              "incremental": "incremental"}


class DependencyError(RuntimeError):
    """A prerequisite artifact is missing."""


@dataclass
class Datasets:
    d_l: Dataset
    d_u: Dataset
    test_l: Dataset
    test_u: Dataset


def _first_per_class(ds: Dataset, n):
    if n is None:
        return ds
    truth = reveal_labels(ds)
    keep = np.concatenate([np.flatnonzero(truth == c)[:n] for c in np.unique(truth)])
    return ds.subset(np.sort(keep))


def build_datasets(cfg: RunConfig) -> Datasets:
    if cfg.source == "synthetic":
        s = cfg.synthetic
        data_seed = cfg.seed if s.seed is None else s.seed
        test_seed = cfg.seed + 1000 if s.test_seed is None else s.test_seed
        train = synth_shapes(s.n_per_class, s.classes, seed=data_seed, size=s.size, jitter=s.jitter)
        test = synth_shapes(s.test_per_class, s.classes, seed=test_seed, size=s.size, jitter=s.jitter)
    else:
        i = cfg.idx
        train = _first_per_class(read_idx(i.train_images, i.train_labels, "train"), i.per_class)
        test = _first_per_class(read_idx(i.test_images, i.test_labels, "test"), i.test_per_class)
    if train.image_shape != cfg.backbone.input_dims:
        raise ConfigError([f"backbone.input_dims: {cfg.backbone.input_dims} does not match "
                           f"the data's image shape {train.image_shape}"])
    d_l, d_u = apply_split(train, cfg.split)
    test_l, test_u = apply_split(test, cfg.split)
    return Datasets(d_l, d_u, test_l, test_u)


def artifact(cfg: RunConfig, stage: str, ext: str) -> Path:
    tag = cfg.stage_tag(stage)
    return Path(cfg.output_dir) / f"{stage}{'-' + tag if tag else ''}.{ext}"


def load_prior(cfg: RunConfig, stage: str) -> Model:
    prior = PREREQUISITE[stage]
    path = artifact(cfg, prior, "ckpt")
    if not path.exists():
        raise DependencyError(
            f"{stage} needs the {prior} checkpoint {path}; run `rankdisc {COMMAND_OF[prior]}` first"
        )
    return load_checkpoint(path, expected_digest=cfg.stage_digest(prior))


def _finish(cfg: RunConfig, stage: str, model: Model, report, extra=None):
    digest = cfg.stage_digest(stage)
    model.meta["config_digest"] = digest
    model.meta["stage"] = stage
    model.meta["seed"] = cfg.seed
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = artifact(cfg, stage, "ckpt")
    report.config_digest = digest
    report.checkpoint_path = ckpt.name
    ckpt.write_bytes(encode_checkpoint(model))
    reports.write_epoch_csv(artifact(cfg, stage, "csv"), report)
    reports.write_json(artifact(cfg, stage, "json"), reports.run_summary(report, extra))
    if report.epochs:
        plotting.plot_training(report, artifact(cfg, stage, "png"))
    return report


def pretrain(cfg: RunConfig, data: Datasets | None = None):
    """Stage 1. Returns None when self-supervision is ablated away."""
    if cfg.ablation.no_selfsup:
        log.info("pretrain skipped: self-supervision is disabled")
        return None
    data = data or build_datasets(cfg)
    model = Model.create(cfg.backbone, cfg.seed)
    report = pipeline.stage1_selfsup(model, [data.d_l, data.d_u], cfg.stage("selfsup"), cfg.seed)
    extra = {"final_rotation_acc": report.extra["rotation_acc"][-1] if report.epochs else None}
    return _finish(cfg, "selfsup", model, report, extra)


def finetune(cfg: RunConfig, data: Datasets | None = None):
    """Stage 2; trains from scratch initialisation when self-supervision is off."""
    data = data or build_datasets(cfg)
    if cfg.ablation.no_selfsup:
        model = Model.create(cfg.backbone, cfg.seed)
    else:
        model = load_prior(cfg, "supervised")
    report = pipeline.stage2_supervised(model, data.d_l, cfg.stage("supervised"), cfg.seed,
                                        cfg.augment)
    extra = {"test_labelled_acc": classification_acc(model, data.test_l)}
    return _finish(cfg, "supervised", model, report, extra)


def _kmeans_reference(model: Model, data: Datasets, seed: int) -> float:
    n_new = len(np.unique(reveal_labels(data.d_u)))
    pred = kmeans_baseline(model.features(data.d_u.images), n_new, seed)
    return clustering_acc(pred, reveal_labels(data.d_u), n_new).acc


def discover(cfg: RunConfig, data: Datasets | None = None):
    """Stage 3 from the stage-2 checkpoint."""
    data = data or build_datasets(cfg)
    model = load_prior(cfg, "joint")
    n_new = cfg.split.n_unlabelled
    kmeans_acc = _kmeans_reference(model, data, cfg.seed)
    report = pipeline.stage3_joint(model, data.d_l, data.d_u, cfg.stage("joint"), cfg.seed,
                                   cfg.ablation, cfg.augment, n_new=n_new)
    extra = {"final_unlabelled_acc": report.final_acc,
             "kmeans_baseline_acc": kmeans_acc,
             "test_unlabelled_acc": unlabelled_acc(model, data.test_u, n_new)}
    return _finish(cfg, "joint", model, report, extra)


def incremental(cfg: RunConfig, data: Datasets | None = None):
    """Incremental variant of stage 3 from the stage-2 checkpoint."""
    data = data or build_datasets(cfg)
    model = load_prior(cfg, "incremental")
    base_old_acc = classification_acc(model, data.test_l)
    report = pipeline.run_incremental(model, data.d_l, data.d_u, cfg.stage("incremental"), cfg.seed,
                                      n_new=cfg.split.n_unlabelled, ablation=cfg.ablation,
                                      augment_spec=cfg.augment)
    inc = incremental_report(model, data.test_l, data.test_u)
    extra = {"final_unlabelled_acc": report.final_acc, "supervised_test_acc": base_old_acc,
             "old_acc": inc.old_acc, "new_acc": inc.new_acc, "all_acc": inc.all_acc}
    _finish(cfg, "incremental", model, report, extra)
    reports.write_incremental_csv(artifact(cfg, "incremental", "report.csv"), inc,
                                  report.config_digest)
    return report


def evaluate(cfg: RunConfig, checkpoint=None, data: Datasets | None = None) -> dict:
    """Metrics of a saved model, with assignments computed on clean images.

    Without ``checkpoint`` the most advanced stage present is evaluated.
    """
    if checkpoint is None:
        for stage in ("incremental", "joint", "supervised", "selfsup"):
            if artifact(cfg, stage, "ckpt").exists():
                checkpoint = artifact(cfg, stage, "ckpt")
                break
        else:
            raise DependencyError(f"no checkpoint found in {cfg.output_dir}; run a stage first")
    raw = Path(checkpoint).read_bytes()
    stage = decode_checkpoint(raw).meta.get("stage")
    if stage not in PREREQUISITE and stage != "selfsup":
        raise DependencyError(f"{checkpoint} does not record which stage produced it")
    model = decode_checkpoint(raw, expected_digest=cfg.stage_digest(stage))
    data = data or build_datasets(cfg)
    out = {"checkpoint": Path(checkpoint).name, "stage": stage, "seed": cfg.seed,
           "config_digest": model.meta["config_digest"]}
    n_new = cfg.split.n_unlabelled
    if "labelled" in model.heads:
        out["test_labelled_acc"] = classification_acc(model, data.test_l)
    if "unlabelled" in model.heads:
        out["train_unlabelled_acc"] = unlabelled_acc(model, data.d_u, n_new)
        out["test_unlabelled_acc"] = unlabelled_acc(model, data.test_u, n_new)
    if "incremental" in model.heads:
        inc = incremental_report(model, data.test_l, data.test_u)
        out.update(old_acc=inc.old_acc, new_acc=inc.new_acc, all_acc=inc.all_acc)
    Path(cfg.output_dir).mkdir(parents=True, exist_ok=True)
    reports.write_json(Path(cfg.output_dir) / f"evaluate-{Path(checkpoint).stem}.json", out)
    return out


def sweep(cfg: RunConfig, k_values, data: Datasets | None = None):
    """k-sweep of stage 3 from the shared stage-2 checkpoint."""
    dim = cfg.backbone.feature_dim
    bad = [k for k in k_values if not 1 <= k <= dim]
    if bad:
        raise ValueError(f"k values {bad} outside [1, {dim}] (feature dim)")
    data = data or build_datasets(cfg)
    base = load_prior(cfg, "joint")
    rows = sweep_k(encode_checkpoint(base), data.d_l, data.d_u, cfg.stage("joint"), cfg.seed,
                   k_values, cfg.split.n_unlabelled, cfg.ablation, cfg.augment)
    digest = cfg.stage_digest("supervised")
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    tag = cfg.stage_tag("joint")
    stem = f"sweep_k{'-' + tag if tag else ''}"
    reports.write_sweep_csv(out / f"{stem}.csv", rows, digest)
    plotting.plot_sweep(rows, out / f"{stem}.png")
    return rows


def run_all(cfg: RunConfig, data: Datasets | None = None, with_incremental: bool = False):
    """pretrain, finetune, discover (and optionally incremental) in sequence."""
    data = data or build_datasets(cfg)
    pretrain(cfg, data)
    finetune(cfg, data)
    out = {"joint": discover(cfg, data)}
    if with_incremental:
        out["incremental"] = incremental(cfg, data)
    return out


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
