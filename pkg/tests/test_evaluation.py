import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rankdisc.evaluation import clustering_acc, hungarian, incremental_report, kmeans, kmeans_baseline
from rankdisc.evaluation.assignment import contingency
from rankdisc.evaluation.metrics import incremental_scores


def brute_force(cost):
    """Lexicographically first permutation of minimum cost (exhaustive)."""
    n = cost.shape[0]
    best, best_perm = None, None
    for perm in itertools.permutations(range(n)):
        total = sum(cost[i, perm[i]] for i in range(n))
        if best is None or total < best:
            best, best_perm = total, perm
    return best, list(best_perm)


def cost_of(cost, perm):
    return sum(cost[i, perm[i]] for i in range(len(perm)))


def test_hungarian_matches_brute_force_on_random_floats():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(1, 8))
        cost = rng.normal(size=(n, n)) * 10
        best, _ = brute_force(cost)
        assert cost_of(cost, hungarian(cost)) == best


def test_hungarian_picks_lexicographically_smallest_among_ties():
    rng = np.random.default_rng(1)
    for _ in range(100):
        n = int(rng.integers(1, 7))
        cost = rng.integers(0, 3, size=(n, n)).astype(float)
        best, perm = brute_force(cost)
        got = hungarian(cost)
        assert cost_of(cost, got) == best
        assert got.tolist() == perm


def test_hungarian_trivial_cases():
    assert hungarian(np.ones((3, 3)) - np.eye(3)).tolist() == [0, 1, 2]
    assert hungarian([[4.2]]).tolist() == [0]
    assert hungarian(np.zeros((3, 3))).tolist() == [0, 1, 2]
    assert hungarian(np.zeros((0, 0))).tolist() == []


def test_hungarian_rejects_bad_input():
    with pytest.raises(ValueError):
        hungarian(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        hungarian([[0.0, np.inf], [1.0, 0.0]])


def test_acc_hand_cases():
    assert clustering_acc([0, 0, 1, 1], [1, 1, 0, 0], 2).acc == 1.0
    assert clustering_acc([0, 1, 0, 1], [1, 1, 0, 0], 2).acc == 0.5
    assert clustering_acc([2, 0, 1], [2, 0, 1], 3).acc == 1.0
    res = clustering_acc([0, 0, 0], [0, 1, 2], 3)
    assert res.matched_count == 1 and res.total == 3


def test_acc_rejects_out_of_range_and_length_mismatch():
    with pytest.raises(ValueError):
        clustering_acc([0, 3], [0, 1], 3)
    with pytest.raises(ValueError):
        clustering_acc([0, 1], [0, -1], 3)
    with pytest.raises(ValueError):
        clustering_acc([0, 1], [0, 1, 1], 3)


@st.composite
def labelings(draw):
    n = draw(st.integers(1, 6))
    m = draw(st.integers(1, 60))
    pred = draw(st.lists(st.integers(0, n - 1), min_size=m, max_size=m))
    truth = draw(st.lists(st.integers(0, n - 1), min_size=m, max_size=m))
    perm = draw(st.permutations(range(n)))
    return np.array(pred), np.array(truth), n, np.array(perm)


@given(labelings())
@settings(max_examples=100, deadline=None)
def test_acc_invariant_under_relabelings(case):
    pred, truth, n, perm = case
    acc = clustering_acc(pred, truth, n).acc
    assert clustering_acc(perm[pred], truth, n).acc == acc
    assert clustering_acc(pred, perm[truth], n).acc == acc
    assert clustering_acc(perm[truth], truth, n).acc == 1.0


@given(labelings())
@settings(max_examples=100, deadline=None)
def test_acc_is_symmetric(case):
    pred, truth, n, _ = case
    assert clustering_acc(pred, truth, n).acc == clustering_acc(truth, pred, n).acc


@given(labelings())
@settings(max_examples=50, deadline=None)
def test_contingency_assignment_equals_best_permutation_score(case):
    pred, truth, n, _ = case
    best = max((np.asarray(p)[pred] == truth).sum() for p in itertools.permutations(range(n)))
    assert clustering_acc(pred, truth, n).matched_count == best
    assert contingency(pred, truth, n).sum() == len(pred)

# ---------------------------------------------------------------- k-means


def _blobs(seed=0):
    rng = np.random.default_rng(seed)
    centers = np.array([[0.0, 0.0], [10.0, 10.0], [-10.0, 10.0]])
    truth = np.repeat(np.arange(3), 30)
    return centers[truth] + rng.normal(scale=0.5, size=(90, 2)), truth


def test_kmeans_recovers_separated_blobs():
    x, truth = _blobs()
    for seed in range(5):
        assert clustering_acc(kmeans_baseline(x, 3, seed), truth, 3).acc == 1.0


def test_kmeans_objective_never_increases():
    rng = np.random.default_rng(3)
    for seed in range(10):
        x = rng.normal(size=(80, 4))
        hist = kmeans(x, 5, seed).inertia_history
        assert all(b <= a + 1e-9 for a, b in zip(hist, hist[1:]))


def test_kmeans_identical_points_leave_one_occupied_cluster():
    res = kmeans(np.ones((10, 3)), 3, seed=0)
    assert len(np.unique(res.labels)) == 1
    assert res.inertia_history[-1] == 0.0


def test_kmeans_is_seeded_and_bounded():
    x, _ = _blobs(1)
    assert kmeans(x, 3, 7).labels.tolist() == kmeans(x, 3, 7).labels.tolist()
    assert kmeans(x, 3, 0, max_iter=1).n_iter == 1
    with pytest.raises(ValueError):
        kmeans(np.zeros((2, 2)), 3)

# ---------------------------------------------------------------- incremental scoring


def test_incremental_scores_hand_case():
    # two old samples, two new ones; the second new sample lands in old slot 1
    rep = incremental_scores([0, 1], [0, 1], [2, 1], [0, 1], n_old=2, n_new=2)
    assert (rep.old_acc, rep.new_acc, rep.all_acc) == (1.0, 0.5, 0.75)


def test_incremental_scores_wider_case():
    rep = incremental_scores([0, 3], [0, 1], [3, 3, 2, 1], [0, 0, 1, 1], n_old=2, n_new=2)
    assert rep.old_acc == 0.5 and rep.new_acc == 0.75 and rep.all_acc == pytest.approx(4 / 6)


def test_incremental_scores_perfect_and_old_only():
    perfect = incremental_scores([0, 1], [0, 1], [3, 2], [1, 0], 2, 2)
    assert (perfect.old_acc, perfect.new_acc, perfect.all_acc) == (1.0, 1.0, 1.0)
    old_only = incremental_scores([0, 1], [0, 1], [0, 1, 0], [0, 1, 1], 2, 2)
    assert old_only.new_acc == 0.0


def test_incremental_report_requires_incremental_head():
    from rankdisc.model import BackboneConfig, Model
    m = Model.create(BackboneConfig(input_dims=(1, 2, 2), layer_widths=(4,), macro_blocks=(1,)), 0)
    with pytest.raises(RuntimeError, match="incremental"):
        incremental_report(m, None, None)
