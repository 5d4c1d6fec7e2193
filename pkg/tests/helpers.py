"""Shared test utilities: finite differences and a tiny run config."""

from dataclasses import replace

import numpy as np

from rankdisc.config import RunConfig, SyntheticSource
from rankdisc.data import SplitSpec
from rankdisc.model import BackboneConfig
from rankdisc.pipeline import DEFAULT_STAGES

H = 1e-5
REL_TOL = 1e-4


def numeric_grad(f, x, h=H):
    """Central differences of scalar ``f`` w.r.t. every entry of ``x`` (in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a, b):
    a, b = np.asarray(a), np.asarray(b)
    denom = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def tiny_config(out_dir, seed=0, **stage_overrides) -> RunConfig:
    """A config that runs the whole pipeline in about a second."""
    stages = {
        "selfsup": replace(DEFAULT_STAGES["selfsup"], epochs=2, batch_size=32),
        "supervised": replace(DEFAULT_STAGES["supervised"], epochs=2, batch_size=32),
        "joint": replace(DEFAULT_STAGES["joint"], epochs=3, batch_size=32, ramp_length=2),
    }
    for name, values in stage_overrides.items():
        stages[name] = replace(stages[name], **values)
    return RunConfig(
        seed=seed,
        output_dir=str(out_dir),
        synthetic=SyntheticSource(n_per_class=20, classes=4, test_per_class=10),
        split=SplitSpec((0, 1), (2, 3)),
        backbone=BackboneConfig(layer_widths=(48, 32, 24), macro_blocks=(1, 1, 1)),
        stages=stages,
    )
