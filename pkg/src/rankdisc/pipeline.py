"""Three-stage discovery training and the incremental variant.

Stage 1 trains the backbone on 4-way rotation prediction over all images.
Stage 2 fine-tunes the last macro-block and a labelled head with
cross-entropy. Stage 3 trains jointly: cross-entropy on labelled data,
pairwise BCE against rank-statistics pair labels on unlabelled data, and a
ramped consistency term on both heads.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import losses
from .data import AugmentSpec, CyclingBatches, Dataset, augment_batch, concat, make_batches, rotate_batch
from .evaluation.metrics import unlabelled_acc
from .model import Head, Model, extend_head
from .ndcore import Linear, Parameter, sgd_step, softmax, softmax_backward
from .rankstats import RankStatConfig, pair_labels

log = logging.getLogger(__name__)

STAGE_IDS = {"selfsup": 1, "supervised": 2, "joint": 3, "incremental": 4}


class StageOrderError(RuntimeError):
    """A stage was asked to run on a model lacking its prerequisite stage."""


@dataclass(frozen=True)
class StageConfig:
    epochs: int = 20
    lr: float = 0.1
    # fractions of ``epochs`` at which the learning rate is multiplied by lr_decay
    lr_milestones: tuple = (0.7,)
    lr_decay: float = 0.1
    momentum: float = 0.9
    batch_size: int = 128
    frozen_blocks: tuple | None = None  # None: every block but the last
    augment: bool = False
    ramp_lambda: float = 5.0
    ramp_length: int = 10
    k: int = 5
    incremental_ce_coefficient: float = 0.05
    include_diagonal: bool = True

    def problems(self, prefix=""):
        out = []
        if self.epochs < 0:
            out.append(f"{prefix}epochs must be >= 0")
        if self.lr <= 0:
            out.append(f"{prefix}lr must be > 0")
        if not 0.0 <= self.momentum < 1.0:
            out.append(f"{prefix}momentum must be in [0, 1)")
        if self.batch_size < 2:
            out.append(f"{prefix}batch_size must be >= 2")
        if any(not 0.0 <= m <= 1.0 for m in self.lr_milestones):
            out.append(f"{prefix}lr_milestones are fractions in [0, 1]")
        if self.ramp_lambda < 0 or self.ramp_length < 1:
            out.append(f"{prefix}ramp_lambda must be >= 0 and ramp_length >= 1")
        if self.k < 1:
            out.append(f"{prefix}k must be >= 1")
        if self.incremental_ce_coefficient < 0:
            out.append(f"{prefix}incremental_ce_coefficient must be >= 0")
        return out

    @property
    def ramp(self) -> losses.RampUpSchedule:
        return losses.RampUpSchedule(self.ramp_lambda, self.ramp_length)

    def lr_at(self, epoch: int) -> float:
        passed = sum(epoch >= round(m * self.epochs) for m in self.lr_milestones)
        return self.lr * self.lr_decay ** passed

    def frozen_set(self, n_blocks: int):
        if self.frozen_blocks is None:
            return tuple(range(n_blocks - 1))
        return tuple(self.frozen_blocks)


@dataclass(frozen=True)
class Ablation:
    no_ce: bool = False
    no_bce: bool = False
    no_consistency: bool = False
    no_selfsup: bool = False

    def tag(self) -> str:
        return "-".join(k for k, v in asdict(self).items() if v)


# Desk schedule for the small MLP on 16x16 glyphs. The field defaults above
# follow the ResNet recipe; at this scale lr 0.1 makes stage 3 collapse, and
# with d=64 a smaller k keeps the pair labels from being almost all negative.
DEFAULT_STAGES = {
    "selfsup": StageConfig(epochs=30, lr=0.01, frozen_blocks=()),
    "supervised": StageConfig(epochs=20, lr=0.01, augment=True),
    "joint": StageConfig(epochs=40, lr=0.01, augment=True, ramp_lambda=0.3, k=3,
                         incremental_ce_coefficient=0.2),
}


@dataclass
class EpochRecord:
    epoch: int
    ce: float
    bce: float
    mse: float
    omega: float
    total: float
    unlabelled_acc: float


@dataclass
class RunReport:
    stage: str
    seed: int
    config_digest: str = ""
    epochs: list = field(default_factory=list)
    checkpoint_path: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def final_acc(self) -> float:
        return self.epochs[-1].unlabelled_acc if self.epochs else float("nan")


def stage_rng(seed: int, stage: str, stream: str) -> np.random.Generator:
    """Independent generator per (seed, stage, stream); stable across runs."""
    tag = int.from_bytes(hashlib.sha256(f"{stage}/{stream}".encode()).digest()[:8], "little")
    return np.random.default_rng([seed, STAGE_IDS[stage], tag])


def digest_of(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def _trainable(model: Model, head_kinds):
    params = model.backbone.parameters()
    for kind in head_kinds:
        params += model.heads[kind].parameters()
    return params


def _reset_optimizer(params):
    for p in params:
        p.velocity = np.zeros_like(p.value)
        p.zero_grad()


def _flat(images):
    return images.reshape(images.shape[0], -1)


# --------------------------------------------------------------------------
# Stage 1: rotation pretext
# --------------------------------------------------------------------------


def stage1_selfsup(model: Model, datasets, cfg: StageConfig, seed: int) -> RunReport:
    """Rotation-prediction pretraining on the union of ``datasets``.

    Labels are never read: every dataset is handled through its hidden view.
    """
    union = concat([d.as_hidden() for d in datasets], hidden=True)
    images = union.images
    model.backbone.freeze_blocks(cfg.frozen_set(model.config.n_blocks))
    head = model.heads.get("rotation") or model.add_head("rotation", 4)
    params = _trainable(model, ["rotation"])
    _reset_optimizer(params)
    rng_batch = stage_rng(seed, "selfsup", "batches")
    rng_rot = stage_rng(seed, "selfsup", "rotations")
    report = RunReport("selfsup", seed)
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        total, correct, seen = 0.0, 0, 0
        for idx in make_batches(len(images), cfg.batch_size, rng_batch):
            x, turns = rotate_batch(images[idx], rng_rot)
            z = model.backbone.forward(_flat(x))
            probs = head.forward(z, cache=True)
            total += losses.cross_entropy(probs, turns) * len(idx)
            correct += int((probs.argmax(1) == turns).sum())
            seen += len(idx)
            grad_z = head.backward(losses.cross_entropy_grad_logits(probs, turns))
            model.backbone.backward(grad_z)
            sgd_step(params, lr, cfg.momentum)
        ce = total / seen
        report.epochs.append(EpochRecord(epoch, ce, 0.0, 0.0, 0.0, ce, float("nan")))
        report.extra.setdefault("rotation_acc", []).append(correct / seen)
        log.info("selfsup epoch %d loss %.4f rot-acc %.3f", epoch, ce, correct / seen)
    model.mark_stage("selfsup")
    return report


def rotation_loss(model: Model, dataset: Dataset, seed: int = 0) -> float:
    """Rotation cross-entropy of the current model on one randomly rotated pass."""
    rng = np.random.default_rng(seed)
    x, turns = rotate_batch(dataset.images, rng)
    return losses.cross_entropy(model.heads["rotation"].forward(model.features(x)), turns)


# --------------------------------------------------------------------------
# Stage 2: supervised fine-tuning
# --------------------------------------------------------------------------


def stage2_supervised(model: Model, d_l: Dataset, cfg: StageConfig, seed: int,
                      augment_spec: AugmentSpec = AugmentSpec()) -> RunReport:
    """Cross-entropy on labelled data with the early macro-blocks frozen."""
    model.backbone.freeze_blocks(cfg.frozen_set(model.config.n_blocks))
    n_classes = int(d_l.labels.max()) + 1
    head = model.heads.get("labelled") or model.add_head("labelled", n_classes)
    params = _trainable(model, ["labelled"])
    _reset_optimizer(params)
    spec = augment_spec if cfg.augment else AugmentSpec.disabled()
    rng_batch = stage_rng(seed, "supervised", "batches")
    rng_aug = stage_rng(seed, "supervised", "augment")
    labels = d_l.labels
    report = RunReport("supervised", seed)
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        total, seen = 0.0, 0
        for idx in make_batches(len(d_l), cfg.batch_size, rng_batch):
            x = augment_batch(d_l.images[idx], spec, rng_aug)
            z = model.backbone.forward(_flat(x))
            probs = head.forward(z, cache=True)
            total += losses.cross_entropy(probs, labels[idx]) * len(idx)
            seen += len(idx)
            grad_z = head.backward(losses.cross_entropy_grad_logits(probs, labels[idx]))
            model.backbone.backward(grad_z)
            sgd_step(params, lr, cfg.momentum)
        ce = total / seen
        report.epochs.append(EpochRecord(epoch, ce, 0.0, 0.0, 0.0, ce, float("nan")))
        log.info("supervised epoch %d loss %.4f", epoch, ce)
    report.extra["train_acc"] = labelled_accuracy(model, d_l)
    model.mark_stage("supervised")
    return report


def labelled_accuracy(model: Model, d_l: Dataset, head_kind: str = "labelled") -> float:
    probs = model.heads[head_kind].forward(model.features(d_l.images))
    return float((probs.argmax(1) == d_l.labels).mean())


# --------------------------------------------------------------------------
# Stage 3: joint discovery training
# --------------------------------------------------------------------------


@dataclass
class BatchAudit:
    """Captured per-batch tensors, for tests that recompute pair labels."""

    records: list = field(default_factory=list)
    limit: int = 8

    def add(self, features, s):
        if len(self.records) < self.limit:
            self.records.append((features.copy(), s.copy()))


def _joint_step(model, head_l, head_u, x_l, y_l, x_u, spec, rng_aug, cfg, ablation,
                omega, new_part, extra_ce_weight, audit):
    """One optimisation step of the joint objective; returns loss components."""
    b_l, b_u = len(x_l), len(x_u)
    xa_l = augment_batch(x_l, spec, rng_aug)
    xa_u = augment_batch(x_u, spec, rng_aug)
    z = model.backbone.forward(_flat(np.concatenate([x_l, x_u, xa_l, xa_u])))
    z_l, z_u = z[:b_l], z[b_l:b_l + b_u]
    za_l, za_u = z[b_l + b_u:2 * b_l + b_u], z[2 * b_l + b_u:]

    logits_l = head_l.logits(np.concatenate([z_l, za_l]), cache=True)
    logits_u = head_u.logits(np.concatenate([z_u, za_u]), cache=True)
    probs_l, probs_u = softmax(logits_l), softmax(logits_u)
    p_l, pa_l = probs_l[:b_l], probs_l[b_l:]
    p_u, pa_u = probs_u[:b_u], probs_u[b_u:]

    g_logits_l = np.zeros_like(logits_l)
    g_probs_u = np.zeros_like(probs_u)
    g_probs_l = np.zeros_like(probs_l)

    ce = 0.0
    if not ablation.no_ce:
        ce = losses.cross_entropy(p_l, y_l)
        g_logits_l[:b_l] += losses.cross_entropy_grad_logits(p_l, y_l)

    bce = 0.0
    if not ablation.no_bce:
        s = pair_labels(z_u, RankStatConfig(cfg.k))
        if audit is not None:
            audit.add(z_u, s)
        bce = losses.pairwise_bce(p_u, s, cfg.include_diagonal)
        g_probs_u[:b_u] += losses.pairwise_bce_grad(p_u, s, cfg.include_diagonal)

    mse = losses.consistency_mse(p_l, pa_l) + losses.consistency_mse(p_u, pa_u)
    if omega > 0.0:
        g1, g2 = losses.consistency_mse_grad(p_l, pa_l)
        g_probs_l[:b_l] += omega * g1
        g_probs_l[b_l:] += omega * g2
        g1, g2 = losses.consistency_mse_grad(p_u, pa_u)
        g_probs_u[:b_u] += omega * g1
        g_probs_u[b_u:] += omega * g2

    extra_grad_z = None
    if new_part is not None:
        # incremental: cross-entropy of the extended head [head_l | new_part]
        # over labelled samples (true labels) and unlabelled samples
        # (pseudo-labels from the clustering head, shifted past the old classes)
        n_old = head_l.out
        z_lu = np.concatenate([z_l, z_u])
        targets = np.concatenate([y_l, n_old + p_u.argmax(1)])
        logits_inc = np.concatenate([head_l.logits(z_lu), new_part.forward(z_lu, cache=False)], axis=1)
        p_inc = softmax(logits_inc)
        ce += extra_ce_weight * losses.cross_entropy(p_inc, targets)
        if extra_ce_weight > 0.0:
            g = extra_ce_weight * losses.cross_entropy_grad_logits(p_inc, targets)
            g_old, g_new = g[:, :n_old], g[:, n_old:]
            head_l.weight.grad += z_lu.T @ g_old
            head_l.bias.grad += g_old.sum(0)
            new_part.weight.grad += z_lu.T @ g_new
            new_part.bias.grad += g_new.sum(0)
            extra_grad_z = g_old @ head_l.weight.value.T + g_new @ new_part.weight.value.T

    g_logits_l += softmax_backward(probs_l, g_probs_l)
    g_logits_u = softmax_backward(probs_u, g_probs_u)
    gz_l = head_l.backward(g_logits_l)
    gz_u = head_u.backward(g_logits_u)
    grad_z = np.zeros_like(z)
    grad_z[:b_l] = gz_l[:b_l]
    grad_z[b_l + b_u:2 * b_l + b_u] = gz_l[b_l:]
    grad_z[b_l:b_l + b_u] = gz_u[:b_u]
    grad_z[2 * b_l + b_u:] = gz_u[b_u:]
    if extra_grad_z is not None:
        grad_z[:b_l + b_u] += extra_grad_z
    model.backbone.backward(grad_z)
    return ce, bce, mse


def _run_joint(model: Model, d_l: Dataset, d_u: Dataset, cfg: StageConfig, seed: int,
               ablation: Ablation, augment_spec: AugmentSpec, stage: str,
               new_part=None, audit=None) -> RunReport:
    model.backbone.freeze_blocks(cfg.frozen_set(model.config.n_blocks))
    head_l = model.heads["labelled"]
    head_u = model.heads["unlabelled"]
    n_new = head_u.out
    params = _trainable(model, ["labelled", "unlabelled"])
    if new_part is not None:
        params += new_part.parameters()
    _reset_optimizer(params)
    spec = augment_spec if cfg.augment else AugmentSpec.disabled()
    half = max(1, cfg.batch_size // 2)
    # the incremental variant draws the same batches and augmentations as a
    # plain joint run, so the two differ only in the head they train
    rng_batch = stage_rng(seed, "joint", "batches")
    rng_aug = stage_rng(seed, "joint", "augment")
    labelled_stream = CyclingBatches(len(d_l), half, stage_rng(seed, "joint", "labelled"))
    y_all = d_l.labels
    sched = cfg.ramp
    report = RunReport(stage, seed)
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        omega = 0.0 if ablation.no_consistency else losses.ramp_up(sched, epoch)
        extra_w = cfg.incremental_ce_coefficient * sched.shape(epoch)
        sums = np.zeros(3)
        n_batches = 0
        for idx_u in make_batches(len(d_u), half, rng_batch):
            idx_l = labelled_stream.next()
            comps = _joint_step(
                model, head_l, model.heads["unlabelled"], d_l.images[idx_l], y_all[idx_l],
                d_u.images[idx_u], spec, rng_aug, cfg, ablation, omega, new_part, extra_w, audit,
            )
            sgd_step(params, lr, cfg.momentum)
            sums += comps
            n_batches += 1
        ce, bce, mse = (float(v) for v in sums / max(n_batches, 1))
        rep = losses.total_loss(ce, bce, mse, omega)
        acc = unlabelled_acc(model, d_u, n_new)
        report.epochs.append(EpochRecord(epoch, rep.ce, rep.bce, rep.mse, rep.omega, rep.total, acc))
        log.info("%s epoch %d ce %.4f bce %.4f mse %.4f omega %.3f acc %.3f",
                 stage, epoch, ce, bce, mse, omega, acc)
    if new_part is not None:
        model.heads["incremental"] = _join_heads(head_l, new_part)
    model.mark_stage(stage)
    return report


def stage3_joint(model: Model, d_l: Dataset, d_u: Dataset, cfg: StageConfig, seed: int,
                 ablation: Ablation = Ablation(), augment_spec: AugmentSpec = AugmentSpec(),
                 n_new: int | None = None, audit: BatchAudit | None = None) -> RunReport:
    """Joint CE + rank-statistics BCE + ramped consistency training.

    ``d_u`` should be the hidden view; its labels are only read through the
    evaluation metrics for per-epoch ACC.
    """
    if not model.has_stage("supervised"):
        raise StageOrderError("joint training needs a model that completed supervised fine-tuning")
    RankStatConfig(cfg.k).validate(model.config.feature_dim)
    if "unlabelled" not in model.heads:
        if n_new is None:
            raise ValueError("n_new is required to create the unlabelled head")
        model.add_head("unlabelled", n_new)
    return _run_joint(model, d_l, d_u, cfg, seed, ablation, augment_spec, "joint", audit=audit)


def _join_heads(head_l: Head, new_part: Linear) -> Head:
    weight = np.concatenate([head_l.weight.value, new_part.weight.value], axis=1)
    bias = np.concatenate([head_l.bias.value, new_part.bias.value])
    return Head("incremental", Linear(Parameter(weight), Parameter(bias)))


def run_incremental(model: Model, d_l: Dataset, d_u: Dataset, cfg: StageConfig, seed: int,
                    n_new: int, ablation: Ablation = Ablation(),
                    augment_spec: AugmentSpec = AugmentSpec(),
                    audit: BatchAudit | None = None) -> RunReport:
    """Joint training plus a labelled head extended to the new classes.

    The extended head shares its first ``C^l`` columns with the labelled
    head, which is trained exactly as in :func:`stage3_joint`. On top of the
    stage-3 terms the extended head gets a cross-entropy over the labelled
    samples (true labels) and the unlabelled samples (pseudo-labels
    ``C^l + argmax`` of the unlabelled head), weighted by
    ``incremental_ce_coefficient`` times the ramp-up profile. This is the
    only term that reaches the new columns, so with a zero coefficient the
    run reproduces :func:`stage3_joint`. The extra term is folded into the
    reported ``ce`` column.
    """
    if not model.has_stage("supervised"):
        raise StageOrderError("incremental training needs a model that completed supervised fine-tuning")
    RankStatConfig(cfg.k).validate(model.config.feature_dim)
    n_old = model.heads["labelled"].out
    # unlabelled head first so its init matches a plain joint run from the same model
    if "unlabelled" not in model.heads:
        model.add_head("unlabelled", n_new)
    if "incremental" not in model.heads:
        model.heads["incremental"] = extend_head(model.heads["labelled"], n_new, model.rng)
    inc = model.heads["incremental"]
    new_part = Linear(Parameter(inc.weight.value[:, n_old:].copy()),
                      Parameter(inc.bias.value[n_old:].copy()))
    model.meta["n_old"] = n_old
    return _run_joint(model, d_l, d_u, cfg, seed, ablation, augment_spec, "incremental",
                      new_part=new_part, audit=audit)
