"""Acceptance criteria, one test each, with a PASS/FAIL line per criterion.

The end-to-end criteria (5, 7, 8, 10) are judged on the mean over a fixed
panel of seeds, because a single desk-scale run is noisy; per-seed values are
printed alongside. Criterion 6 needs MNIST IDX files in ``RANKDISC_MNIST_DIR``.
"""

import itertools
import json
import math
import os
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from helpers import H, REL_TOL, numeric_grad, rel_error, tiny_config
from rankdisc import runner
from rankdisc.config import IdxSource, RunConfig
from rankdisc.data import SplitSpec
from rankdisc.evaluation import hungarian
from rankdisc.evaluation.metrics import classification_acc
from rankdisc.losses import (
    RampUpSchedule, consistency_mse, consistency_mse_grad, cross_entropy,
    cross_entropy_grad_logits, pairwise_bce, pairwise_bce_grad, ramp_up, total_loss,
)
from rankdisc.model import BackboneConfig, Model
from rankdisc.ndcore import Linear, matmul, matmul_backward, relu, relu_backward, softmax, softmax_backward
from rankdisc.rankstats import RankStatConfig, pair_labels
from rankdisc.reports import read_epoch_csv

PANEL = (0, 1, 2, 3, 4)
N_GRAD = 50


@pytest.fixture
def verdict(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\n[criterion {n}] {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, detail
    return emit


# ------------------------------------------------------------------ 1-4


def _grad_cases(rng):
    """(name, loss, analytic grad, variable) factories, each fresh per instance."""

    def matmul_case():
        a, b, w = rng.normal(size=(4, 5)), rng.normal(size=(5, 3)), rng.normal(size=(4, 3))
        ga, _ = matmul_backward(a, b, w)
        return lambda: float((matmul(a, b) * w).sum()), ga, a

    def softmax_case():
        x, w = rng.normal(size=(3, 6)) * 2, rng.normal(size=(3, 6))
        return lambda: float((softmax(x) * w).sum()), softmax_backward(softmax(x), w), x

    def relu_case():
        x = rng.normal(size=(4, 6))
        x[np.abs(x) < 10 * H] += 0.1  # kink exclusion: keep every entry away from 0
        w = rng.normal(size=x.shape)
        return lambda: float((relu(x) * w).sum()), relu_backward(x, w), x

    def linear_case():
        lin = Linear.init(rng, 5, 3)
        x, w = rng.normal(size=(4, 5)), rng.normal(size=(4, 3))
        lin.forward(x)
        lin.backward(w)
        return lambda: float((lin.forward(x, cache=False) * w).sum()), lin.weight.grad, lin.weight.value

    def ce_case():
        logits, y = rng.normal(size=(5, 4)), rng.integers(0, 4, size=5)
        return (lambda: cross_entropy(softmax(logits), y),
                cross_entropy_grad_logits(softmax(logits), y), logits)

    def bce_case():
        p = softmax(rng.normal(size=(6, 3)))
        s = rng.integers(0, 2, size=(6, 6))
        s = np.triu(s) + np.triu(s, 1).T
        return lambda: pairwise_bce(p, s), pairwise_bce_grad(p, s), p

    def mse_case():
        a, b = rng.random((4, 3)), rng.random((4, 3))
        return lambda: consistency_mse(a, b), consistency_mse_grad(a, b)[0], a

    return {"matmul": matmul_case, "softmax": softmax_case, "relu": relu_case,
            "linear": linear_case, "cross_entropy": ce_case, "pairwise_bce": bce_case,
            "consistency_mse": mse_case}


def test_criterion_1_gradients(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = {}
    for name, make in _grad_cases(rng).items():
        errs = []
        for _ in range(N_GRAD):
            f, analytic, var = make()
            errs.append(rel_error(analytic, numeric_grad(f, var)))
        worst[name] = max(errs)
    # end to end through backbone and head, skipping instances near a ReLU kink
    checked, errs = 0, []
    for trial in range(200):
        if checked == N_GRAD:
            break
        m = Model.create(BackboneConfig((1, 4, 4), (12, 8), (1, 1)), trial)
        head = m.add_head("labelled", 3)
        x, y = rng.random((4, 16)), rng.integers(0, 3, size=4)
        probs = head.forward(m.backbone.forward(x), cache=True)
        m.backbone.backward(head.backward(cross_entropy_grad_logits(probs, y)))
        if min(np.abs(a).min() for a in m.backbone._pre) < 1e-4:
            continue
        w = m.backbone.layers[0].weight
        errs.append(rel_error(w.grad, numeric_grad(
            lambda: cross_entropy(head.forward(m.backbone.forward(x, cache=False)), y), w.value)))
        checked += 1
    worst["backbone+head"] = max(errs)
    elapsed = time.perf_counter() - start
    ok = all(v < REL_TOL for v in worst.values()) and checked == N_GRAD and elapsed < 60
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    verdict(1, ok, f"max rel err ({N_GRAD} instances each): {detail}; {elapsed:.1f}s")


def _brute_force_cost(cost):
    n = cost.shape[0]
    return min(cost[np.arange(n), list(p)].sum() for p in itertools.permutations(range(n)))


def test_criterion_2_assignment_oracle(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(7)
    mismatches = 0
    for i in range(200):
        n = 1 + i % 7
        # integer costs make the optimum exactly representable, ties included
        cost = rng.integers(0, 20, size=(n, n)).astype(float) if i % 2 else rng.random((n, n))
        perm = hungarian(cost)
        assert sorted(perm.tolist()) == list(range(n))
        if cost[np.arange(n), perm].sum() != _brute_force_cost(cost):
            mismatches += 1
    elapsed = time.perf_counter() - start
    verdict(2, mismatches == 0 and elapsed < 60,
            f"200 matrices, L<=7, {mismatches} cost mismatches vs brute force; {elapsed:.1f}s")


def _oracle_pairs(z, k):
    tops = [set(np.argsort(-row, kind="stable")[:k].tolist()) for row in z]
    b = len(z)
    return np.array([[int(tops[i] == tops[j]) for j in range(b)] for i in range(b)])


def test_criterion_3_rank_statistics_oracle(verdict):
    rng = np.random.default_rng(11)
    failures = []
    for i in range(100):
        b, d = int(rng.integers(2, 33)), int(rng.integers(1, 65))
        # continuous features: ties have probability zero
        z = rng.normal(size=(b, d))
        for k in sorted({1, min(5, d), d}):
            s = pair_labels(z, RankStatConfig(k))
            checks = {
                "oracle": np.array_equal(s, _oracle_pairs(z, k)),
                "scale": np.array_equal(s, pair_labels(z * 3.7, RankStatConfig(k))),
                "monotone": np.array_equal(s, pair_labels(np.exp(z) + 2.0, RankStatConfig(k))),
            }
            failures += [(i, k, name) for name, ok in checks.items() if not ok]
    verdict(3, not failures, f"100 batches (B<=32, d<=64, k in {{1,5,d}}); failures: {failures[:5]}")


def test_criterion_4_loss_analytics(verdict, tmp_path):
    errs = {}
    errs["ce_uniform"] = max(abs(cross_entropy(np.full((4, c), 1 / c), np.arange(4) % c) - math.log(c))
                             for c in (2, 3, 6, 10, 100))
    sched = RampUpSchedule(lam=5.0, length=10)
    end_exact = ramp_up(sched, 10) == 5.0
    errs["omega_0"] = abs(ramp_up(sched, 0) - 5.0 * math.exp(-5.0))
    p = softmax(np.random.default_rng(0).normal(size=(8, 4)))
    mse_zero = consistency_mse(p, p) == 0.0
    # LossReport identity on every logged epoch of a short real stage 3
    cfg = tiny_config(tmp_path)
    runner.run_all(cfg)
    rows = read_epoch_csv(tmp_path / "joint.csv")
    identity = all(r["total"] == total_loss(r["ce"], r["bce"], r["mse"], r["omega"]).total for r in rows)
    ok = errs["ce_uniform"] <= 1e-12 and errs["omega_0"] <= 1e-12 and end_exact and mse_zero and identity
    verdict(4, ok, f"|CE-ln C| {errs['ce_uniform']:.1e}, |w(0)-le^-5| {errs['omega_0']:.1e}, "
                   f"w(T)=l {end_exact}, mse(a,a)=0 {mse_zero}, identity on {len(rows)} epochs {identity}")


# ------------------------------------------------------------------ end to end


def _summary(out, name):
    return json.loads((Path(out) / f"{name}.json").read_text())["metrics"]


@pytest.fixture(scope="module")
def panel(tmp_path_factory):
    """Every end-to-end number for each seed of the panel, on the default desk setup."""
    rows = {}
    for seed in PANEL:
        out = tmp_path_factory.mktemp(f"seed{seed}")
        cfg = replace(RunConfig(seed=seed), output_dir=str(out))
        data = runner.build_datasets(cfg)
        t0 = time.perf_counter()
        runner.pretrain(cfg, data)
        runner.finetune(cfg, data)
        full = runner.discover(cfg, data)
        elapsed = time.perf_counter() - t0
        m = _summary(out, "joint")
        row = {"full": full.final_acc, "kmeans": m["kmeans_baseline_acc"],
               "full_test": m["test_unlabelled_acc"], "seconds": elapsed}
        for flag in ("no_bce", "no_ce", "no_consistency"):
            row[flag] = runner.discover(cfg.with_ablation(**{flag: True}), data).final_acc
        dim = cfg.backbone.feature_dim
        sweep = {r.k: r.unlabelled_acc for r in runner.sweep(cfg, [1, 3, 5, 10, dim], data)}
        row["sweep"] = sweep
        runner.incremental(cfg, data)
        inc = _summary(out, "incremental")
        row.update(supervised_old=inc["supervised_test_acc"], inc_old=inc["old_acc"],
                   inc_new=inc["new_acc"])
        rows[seed] = row
    return rows


def _mean(panel, key):
    return float(np.mean([r[key] for r in panel.values()]))


def _per_seed(panel, key):
    return " ".join(f"{r[key]:.3f}" for r in panel.values())


@pytest.mark.slow
def test_criterion_5_end_to_end_synthetic(panel, verdict):
    full, km = _mean(panel, "full"), _mean(panel, "kmeans")
    slowest = max(r["seconds"] for r in panel.values())
    ok = full >= 0.80 and full - km >= 0.05 and slowest < 300
    verdict(5, ok, f"mean ACC {full:.3f} (seeds: {_per_seed(panel, 'full')}), k-means baseline "
                   f"{km:.3f} (seeds: {_per_seed(panel, 'kmeans')}), margin {full - km:+.3f}; "
                   f"slowest run {slowest:.0f}s")


def _idx_files(root):
    found = {}
    for key, stem in (("train_images", "train-images"), ("train_labels", "train-labels"),
                      ("test_images", "t10k-images"), ("test_labels", "t10k-labels")):
        hits = sorted(Path(root).glob(f"{stem}*"))
        if not hits:
            return None
        found[key] = str(hits[0])
    return found


@pytest.mark.slow
@pytest.mark.skipif(not os.environ.get("RANKDISC_MNIST_DIR"), reason="set RANKDISC_MNIST_DIR to MNIST IDX files")
def test_criterion_6_end_to_end_idx(verdict, tmp_path):
    files = _idx_files(os.environ["RANKDISC_MNIST_DIR"])
    if files is None:
        pytest.skip("RANKDISC_MNIST_DIR has no train-/t10k- IDX files")
    cfg = RunConfig(seed=0, output_dir=str(tmp_path), source="idx",
                    idx=IdxSource(**files, per_class=1000, test_per_class=500),
                    split=SplitSpec((0, 1, 2, 3, 4), (5, 6, 7, 8, 9)),
                    backbone=BackboneConfig((1, 28, 28), (256, 128, 96, 64), (1, 1, 1, 1)))
    t0 = time.perf_counter()
    acc = runner.run_all(cfg)["joint"].final_acc
    elapsed = time.perf_counter() - t0
    verdict(6, acc >= 0.5 and elapsed < 1800, f"MNIST 5/5 unlabelled ACC {acc:.3f}; {elapsed:.0f}s")


@pytest.mark.slow
def test_criterion_7_ablation_direction(panel, verdict):
    full = _mean(panel, "full")
    means = {f: _mean(panel, f) for f in ("no_bce", "no_ce", "no_consistency")}
    ok = (means["no_bce"] <= full - 0.15 and means["no_ce"] < full
          and means["no_consistency"] < full)
    detail = "; ".join(f"{f} {v:.3f} (seeds: {_per_seed(panel, f)})" for f, v in means.items())
    verdict(7, ok, f"full {full:.3f}; {detail}")


@pytest.mark.slow
def test_criterion_8_incremental(panel, verdict):
    old_gap = _mean(panel, "supervised_old") - _mean(panel, "inc_old")
    new_gap = _mean(panel, "full_test") - _mean(panel, "inc_new")
    ok = abs(old_gap) <= 0.05 and abs(new_gap) <= 0.05
    verdict(8, ok, f"old acc {_mean(panel, 'inc_old'):.3f} vs stage-2 {_mean(panel, 'supervised_old'):.3f}"
                   f" (gap {old_gap:+.3f}); new ACC {_mean(panel, 'inc_new'):.3f} vs stage-3 "
                   f"{_mean(panel, 'full_test'):.3f} (gap {new_gap:+.3f}); seeds old "
                   f"{_per_seed(panel, 'inc_old')}, new {_per_seed(panel, 'inc_new')}")


@pytest.mark.slow
def test_criterion_9_determinism(verdict, tmp_path):
    outs = []
    for run in ("a", "b"):
        cfg = replace(RunConfig(seed=0), output_dir=str(tmp_path / run))
        runner.run_all(cfg, with_incremental=True)
        outs.append(tmp_path / run)
    names = sorted(p.name for p in outs[0].iterdir() if p.suffix in (".ckpt", ".csv"))
    differ = [n for n in names if (outs[0] / n).read_bytes() != (outs[1] / n).read_bytes()]
    verdict(9, bool(names) and not differ, f"{len(names)} checkpoints/CSVs compared, differing: {differ}")


@pytest.mark.slow
def test_criterion_10_k_sweep(panel, verdict):
    ks = sorted(next(iter(panel.values()))["sweep"])
    means = {k: float(np.mean([r["sweep"][k] for r in panel.values()])) for k in ks}
    d = ks[-1]
    ok = means[5] >= means[1] and means[d] < max(means.values())
    verdict(10, ok, "mean ACC by k: " + ", ".join(f"k={k} {v:.3f}" for k, v in means.items()))
