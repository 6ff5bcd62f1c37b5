import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import entropy as scipy_entropy

from puidrec.data import Dataset
from puidrec.entropy import (Partition, binary_entropy, compute_gamma, conditional_entropy,
                             constant_field, estimate_sensitivity, local_information_gains,
                             marginal_entropy, partition_features, write_partition_summary)


def _dataset(observed, uf, itf):
    observed = np.asarray(observed, dtype=bool)
    return Dataset(np.where(observed, 3.0, np.nan), observed,
                   user_features=np.asarray(uf, float).reshape(observed.shape[0], -1),
                   item_features=np.asarray(itf, float).reshape(observed.shape[1], -1))


def _h(p):
    return float(scipy_entropy([p, 1 - p], base=2)) if 0 < p < 1 else 0.0


# -- marginal / conditional --------------------------------------------------


def test_marginal_examples():
    assert marginal_entropy(np.ones(10)) == 0.0
    assert marginal_entropy([0, 1] * 5) == 1.0
    assert marginal_entropy([1, 0, 0, 0]) == pytest.approx(0.8112781244591328, abs=1e-12)
    with pytest.raises(ValueError):
        marginal_entropy([])


def test_single_cell_equals_marginal(rng):
    o = rng.random(500) < 0.3
    assert conditional_entropy(o, np.zeros(500, dtype=int)) == marginal_entropy(o)


def test_perfectly_informative_cells():
    o = np.array([1] * 50 + [0] * 50)
    cells = np.array([0] * 50 + [1] * 50)
    assert conditional_entropy(o, cells) == 0.0
    assert marginal_entropy(o) == 1.0


def test_independent_grouping_monte_carlo():
    rng = np.random.default_rng(0)
    o = rng.random(10_000) < 0.3
    cells = rng.integers(0, 4, 10_000)
    assert abs(conditional_entropy(o, cells) - marginal_entropy(o)) < 0.02


def test_hand_tables_match_closed_form():
    # 20 contingency tables: (cell sizes, ones per cell)
    rng = np.random.default_rng(1)
    for _ in range(20):
        k = rng.integers(1, 6)
        sizes = rng.integers(1, 30, k)
        ones = np.array([rng.integers(0, s + 1) for s in sizes])
        o = np.concatenate([[1] * a + [0] * (s - a) for s, a in zip(sizes, ones)])
        cells = np.repeat(np.arange(k), sizes)
        N = sizes.sum()
        marg = _h(ones.sum() / N)
        cond = sum(s / N * _h(a / s) for s, a in zip(sizes, ones))
        assert abs(marginal_entropy(o) - marg) <= 1e-12
        assert abs(conditional_entropy(o, cells) - cond) <= 1e-12


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), k=st.integers(1, 8), size=st.integers(2, 200))
def test_conditional_never_exceeds_marginal(seed, k, size):
    rng = np.random.default_rng(seed)
    o = rng.random(size) < rng.random()
    cells = rng.integers(0, k, size)
    c, mg = conditional_entropy(o, cells), marginal_entropy(o)
    assert -1e-12 <= c <= mg + 1e-12 and mg <= 1.0


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_refinement_never_increases(seed):
    rng = np.random.default_rng(seed)
    o = rng.random(300) < 0.4
    fine = rng.integers(0, 12, 300)
    coarse = fine // 3
    assert conditional_entropy(o, fine) <= conditional_entropy(o, coarse) + 1e-12


def test_relabeling_invariance(rng):
    o = rng.random(400) < 0.2
    cells = rng.integers(0, 5, 400)
    perm = rng.permutation(5)
    assert conditional_entropy(o, perm[cells]) == pytest.approx(conditional_entropy(o, cells), abs=1e-12)


def test_binary_entropy_range():
    p = np.linspace(0, 1, 101)
    h = binary_entropy(p)
    assert h[0] == 0 and h[-1] == 0 and h[50] == 1.0
    assert (h >= 0).all() and (h <= 1).all()


# -- partitions ---------------------------------------------------------------


def test_quantile_bins_equal_sizes():
    ds = _dataset(np.ones((100, 2)), np.random.default_rng(0).permutation(100), [[0], [1]])
    part = partition_features(ds, groups_user=4, groups_item=1, min_cell_count=1)
    assert sorted(np.bincount(part.user_group).tolist()) == [25, 25, 25, 25]


def test_identical_features_single_group():
    ds = _dataset(np.ones((30, 3)), np.ones((30, 2)), np.ones((3, 2)))
    part = partition_features(ds, 8, 8, min_cell_count=1)
    assert part.n_user_groups == 1 and part.n_item_groups == 1
    tu, tp = local_information_gains(ds, part)
    assert (tu == 0).all() and (tp == 0).all()


def test_categorical_levels():
    uf = np.array([[0, 1], [1, 0], [0, 1], [2, 2]] * 5, dtype=float)
    ds = _dataset(np.ones((20, 2)), uf, np.zeros((2, 1)))
    part = partition_features(ds, 8, 1, min_cell_count=1)
    assert part.n_user_groups == 3
    assert len(set(part.user_group[[0, 2, 4]])) == 1


def test_kmeans_recovers_planted_clusters():
    rng = np.random.default_rng(2)
    centers = np.array([[0, 0], [6, 0], [0, 6]])
    labels = np.repeat(np.arange(3), 60)
    x = centers[labels] + rng.normal(size=(180, 2))
    ds = _dataset(np.ones((180, 1)), x, [[0.0]])
    part = partition_features(ds, groups_user=3, groups_item=1, min_cell_count=1, seed=0)
    agree = 0
    for g in range(3):
        agree += np.bincount(labels[part.user_group == g]).max()
    assert agree / 180 >= 0.95


def test_small_groups_merge_into_nearest():
    uf = np.array([0.0] * 10 + [1.0] * 10 + [10.0])
    ds = _dataset(np.ones((21, 5)), uf, np.zeros(5))
    part = partition_features(ds, groups_user=3, groups_item=1, min_cell_count=20)
    # the single user at 10 (5 pairs) is merged into the group at 1
    assert part.n_user_groups == 2
    assert part.user_group[20] == part.user_group[10]
    assert part.merges == [("user", 2, 1)]
    sizes = np.bincount(part.user_group) * ds.n
    assert (sizes >= 20).all()


def test_partition_deterministic(small_synth):
    ds, _ = small_synth
    a = partition_features(ds, 4, 4, 20, seed=3)
    b = partition_features(ds, 4, 4, 20, seed=3)
    assert np.array_equal(a.user_group, b.user_group) and np.array_equal(a.item_group, b.item_group)


def test_partition_summary(tmp_path, small_synth):
    ds, _ = small_synth
    part = partition_features(ds, 4, 4, 20)
    f = tmp_path / "part.json"
    write_partition_summary(part, f)
    data = json.loads(f.read_text())
    assert sum(data["user_group_sizes"]) == ds.m and sum(data["item_group_sizes"]) == ds.n


# -- local gains ---------------------------------------------------------------


def _planted_2x2(rates, size=40):
    """Two user groups x two item groups, each block size x size with a given exposure rate."""
    m = n = 2 * size
    obs = np.zeros((m, n), dtype=bool)
    for a in range(2):
        for b in range(2):
            k = int(round(rates[a][b] * size * size))
            block = np.zeros(size * size, dtype=bool)
            block[:k] = True
            obs[a * size:(a + 1) * size, b * size:(b + 1) * size] = block.reshape(size, size)
    uf = np.repeat([0.0, 1.0], size)
    return _dataset(obs, uf, uf)


def test_planted_table_terms():
    rates = [[0.5, 0.25], [0.125, 0.75]]
    ds = _planted_2x2(rates)
    part = partition_features(ds, 2, 2, min_cell_count=1)
    tu, tp = local_information_gains(ds, part)
    h0 = _h(np.mean(rates))
    for u, i in [(0, 0), (0, 79), (79, 0), (79, 79)]:
        a, b = u // 40, i // 40
        hu = _h(np.mean(rates[a]))
        assert abs(tu[u, i] - max(0.0, h0 - hu)) <= 1e-12
        assert abs(tp[u, i] - max(0.0, hu - _h(rates[a][b]))) <= 1e-12


def test_small_joint_cell_falls_back():
    ds = _planted_2x2([[0.5, 0.1], [0.2, 0.9]], size=5)
    part = partition_features(ds, 2, 2, min_cell_count=26)
    if part.n_user_groups == 2 and part.n_item_groups == 2:
        _, tp = local_information_gains(ds, part)
        assert (tp == 0).all()


def test_all_observed_group_term_user_equals_marginal():
    ds = _planted_2x2([[1.0, 1.0], [0.2, 0.3]])
    part = partition_features(ds, 2, 1, min_cell_count=1)
    tu, _ = local_information_gains(ds, part)
    assert tu[0, 0] == pytest.approx(marginal_entropy(ds.observed), abs=1e-12)


def test_permuted_exposure_gives_small_terms():
    rng = np.random.default_rng(5)
    m, n = 200, 100
    uf = rng.normal(size=(m, 2))
    itf = rng.normal(size=(n, 2))
    logits = uf[:, :1] + itf[:, 0][None, :]
    o = rng.random((m, n)) < 1 / (1 + np.exp(-logits))
    shuffled = rng.permutation(o.ravel()).reshape(m, n)
    ds = _dataset(shuffled, uf, itf)
    part = partition_features(ds, 8, 8, 50, seed=0)
    tu, tp = local_information_gains(ds, part)
    assert tu.mean() < 0.05 and tp.mean() < 0.05
    informative = _dataset(o, uf, itf)
    tu2, tp2 = local_information_gains(informative, partition_features(informative, 8, 8, 50))
    assert tu2.mean() + tp2.mean() > tu.mean() + tp.mean()


# -- gamma -------------------------------------------------------------------


def test_gamma_max_one_is_identity(rng):
    f = compute_gamma(rng.random((4, 5)), rng.random((4, 5)), gamma_max=1.0)
    assert (f.gamma == 1.0).all()


def test_uniform_score_gives_gamma_max():
    f = compute_gamma(np.full((3, 3), 0.2), np.zeros((3, 3)), gamma_max=2.5)
    assert (f.gamma == 2.5).all()


def test_affine_map_example():
    f = compute_gamma(np.array([0.0, 0.5, 1.0]), np.zeros(3), gamma_max=3.0)
    assert np.array_equal(f.gamma, [1.0, 2.0, 3.0])


def test_negative_weights_rejected():
    with pytest.raises(ValueError):
        compute_gamma(np.zeros(2), np.zeros(2), alpha=-1)
    with pytest.raises(ValueError):
        compute_gamma(np.zeros(2), np.zeros(2), gamma_max=0.5)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), a=st.floats(0, 3), b=st.floats(0, 3), g=st.floats(1, 10))
def test_gamma_range_and_monotone(seed, a, b, g):
    rng = np.random.default_rng(seed)
    tu, tp = rng.random(50) * 0.3, rng.random(50) * 0.2
    f = compute_gamma(tu, tp, a, b, g)
    assert (f.gamma >= 1).all() and (f.gamma <= g).all()
    order = np.argsort(f.raw_score, kind="stable")
    assert (np.diff(f.gamma[order]) >= -1e-12).all()


def test_constant_field():
    f = constant_field((2, 3), 1.7)
    assert f.gamma.shape == (2, 3) and (f.gamma == 1.7).all()


def test_estimate_sensitivity_on_synthetic(tmp_path, small_synth):
    ds, _ = small_synth
    field, part = estimate_sensitivity(ds, 4, 4, 20, gamma_max=2.0)
    assert isinstance(part, Partition)
    assert field.gamma.shape == ds.observed.shape
    assert field.gamma.min() >= 1.0 and field.gamma.max() <= 2.0
    assert (field.term_user >= 0).all() and (field.term_pair >= 0).all()
    out = tmp_path / "s.csv"
    field.to_csv(out)
    lines = out.read_text().splitlines()
    assert lines[0] == "u,i,term_user,term_pair,s,gamma" and len(lines) == ds.n_pairs + 1
    assert math.isclose(float(lines[1].split(",")[-1]), field.gamma[0, 0])
