"""Sensitivity of discovery to the rank-statistics ``k``."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace

from ..data import AugmentSpec, Dataset
from ..model import decode_checkpoint
from ..pipeline import Ablation, StageConfig, stage3_joint


@dataclass(frozen=True)
class SweepRow:
    k: int
    unlabelled_acc: float
    base_checkpoint: str  # digest of the shared stage-2 checkpoint bytes


def sweep_k(base_checkpoint: bytes, d_l: Dataset, d_u: Dataset, cfg: StageConfig, seed: int,
            k_values, n_new: int, ablation: Ablation = Ablation(),
            augment_spec: AugmentSpec = AugmentSpec()):
    """Run stage 3 once per ``k`` from one shared stage-2 checkpoint.

    Every run decodes a fresh model from the same bytes, so stages 1 and 2
    are never repeated and each row records the digest of what it started
    from. All ``k`` are checked against the feature dimension up front.
    """
    k_values = [int(k) for k in k_values]
    if not k_values:
        raise ValueError("k_values must be nonempty")
    dim = decode_checkpoint(base_checkpoint).config.feature_dim
    bad = [k for k in k_values if not 1 <= k <= dim]
    if bad:
        raise ValueError(f"k values {bad} outside [1, {dim}] (feature dim)")
    base = hashlib.sha256(base_checkpoint).hexdigest()[:16]
    rows = []
    for k in k_values:
        model = decode_checkpoint(base_checkpoint)
        report = stage3_joint(model, d_l, d_u, replace(cfg, k=k), seed, ablation, augment_spec,
                              n_new=n_new)
        rows.append(SweepRow(k, report.final_acc, base))
    return rows
