import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moerl import tensor as T
from moerl.analysis import (DiagnosticsConfig, dormant_fraction, dormant_scores, effective_rank,
                            entk_effective_rank, feature_norm, iqm, mean_with_nan,
                            per_sample_gradients, probe, stratified_bootstrap_ci)
from moerl.networks import NetworkConfig, SoftMoE, Top1MoE, build_network, q_forward
from moerl.replay import Batch


def test_dormant_scores_scalar_oracle():
    rng = np.random.default_rng(0)
    a = np.abs(rng.normal(size=(7, 5)))
    a[:, 2] *= 0.001
    got = dormant_scores(a)
    per = [sum(abs(a[i, j]) for i in range(7)) / 7 for j in range(5)]
    layer = sum(per) / 5
    np.testing.assert_allclose(got, [p / layer for p in per], rtol=1e-13)
    assert dormant_fraction(a, 0.025) == 0.2


def test_dormant_threshold_inclusive_and_zero_tau():
    a = np.array([[0.0, 1.0, 1.0, 1.0]])
    assert dormant_fraction(a, 0.0) == 0.25
    assert dormant_fraction(np.zeros((3, 4)), 0.025) == 1.0


def test_effective_rank_constructed_spectrum():
    rng = np.random.default_rng(1)
    sv = np.array([10.0, 1.0, 0.001, 0.0005])
    U, _ = np.linalg.qr(rng.normal(size=(4, 4)))
    gram = U @ np.diag(sv) @ U.T
    direct = np.sort(np.abs(np.linalg.eigvalsh(gram)))[::-1]
    cum = np.cumsum(direct) / direct.sum()
    want = int(np.argmax(cum >= 0.99) + 1)
    assert effective_rank(np.linalg.svd(gram, compute_uv=False), 0.01) == want == 2
    assert effective_rank(np.zeros(3)) == 0


def test_entk_rank_duplicated_and_orthogonal():
    g = np.random.default_rng(2).normal(size=50)
    assert entk_effective_rank(np.tile(g, (8, 1))) == 1
    assert entk_effective_rank(np.eye(8, 20) * 3.0) == 8


def test_feature_norm_scalar_oracle():
    f = np.array([[3.0, 4.0], [0.0, 1.0]])
    assert feature_norm(f) == 3.0


def test_iqm_values():
    assert iqm([1, 2, 3, 4]) == 2.5
    assert iqm([5]) == 5.0
    with pytest.raises(ValueError):
        iqm([])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-100, 100, allow_nan=False), min_size=1, max_size=30))
def test_iqm_matches_sort_trim_mean(xs):
    s = sorted(xs)
    k = len(s) // 4
    mid = s[k:len(s) - k]
    assert iqm(xs) == pytest.approx(sum(mid) / len(mid), abs=1e-9)


def test_iqm_n10_brute_force():
    x = np.random.default_rng(3).normal(size=10)
    s = sorted(x)
    assert iqm(x) == pytest.approx(np.mean(s[2:8]), abs=1e-15)


def _exact_bootstrap_quantiles(M, level=0.95):
    """Enumerate every within-task resample; return inverse-CDF quantiles."""
    runs, tasks = M.shape
    per_task = [list(itertools.product(M[:, t], repeat=runs)) for t in range(tasks)]
    vals = []
    for combo in itertools.product(*per_task):
        vals.append(iqm(np.concatenate(combo)))
    vals = np.sort(vals)
    cdf = np.arange(1, len(vals) + 1) / len(vals)
    tail = (1 - level) / 2
    return vals[np.searchsorted(cdf, tail)], vals[np.searchsorted(cdf, 1 - tail)]


def _reference_bootstrap(M, iters, seed):
    rng = np.random.default_rng(seed)
    runs, tasks = M.shape
    out = []
    for _ in range(iters // 100_000):
        idx = rng.integers(0, runs, size=(100_000, runs, tasks))
        samp = np.concatenate([M[idx[:, :, t], t] for t in range(tasks)], axis=1)
        srt = np.sort(samp, axis=1)
        k = samp.shape[1] // 4
        out.append(srt[:, k:samp.shape[1] - k].mean(axis=1))
    return np.percentile(np.concatenate(out), [2.5, 97.5])


def test_bootstrap_matches_high_iteration_reference():
    M = np.array([[1.0, 2.0], [2.0, 3.0], [4.0, 6.0]])
    ref = _reference_bootstrap(M, 10**6, seed=123)
    got = stratified_bootstrap_ci(M, iters=10**6, seed=0)
    assert abs(got[0] - ref[0]) <= 0.02 and abs(got[1] - ref[1]) <= 0.02
    exact = _exact_bootstrap_quantiles(M)
    assert abs(got[0] - exact[0]) <= 0.02 and abs(got[1] - exact[1]) <= 0.02


def test_bootstrap_constant_scores_collapse():
    lo, hi = stratified_bootstrap_ci(np.full((5, 3), 0.7))
    assert lo == hi == pytest.approx(0.7)
    with pytest.raises(ValueError):
        stratified_bootstrap_ci(np.ones((1, 3)))


def test_bootstrap_deterministic_and_ordered():
    M = np.random.default_rng(4).normal(size=(5, 2))
    a, b = stratified_bootstrap_ci(M, seed=3), stratified_bootstrap_ci(M, seed=3)
    assert a == b and a[0] <= iqm(M) + 1e-9 and a[0] <= a[1]


def test_mean_with_nan():
    assert mean_with_nan([1.0, float("nan"), None, 3.0]) == 2.0
    assert np.isnan(mean_with_nan([float("nan")]))


def test_diagnostics_config_validation():
    with pytest.raises(ValueError):
        DiagnosticsConfig(dormant_tau=-1)
    with pytest.raises(ValueError):
        DiagnosticsConfig(srank_delta=1.0)


def _batch(rng, n=6):
    obs = rng.uniform(size=(n, 10, 10, 1))
    return Batch(obs, rng.integers(0, 3, size=n), np.zeros(n), obs, np.zeros(n))


def test_per_sample_gradients_match_scalar_recomputation():
    rng = np.random.default_rng(5)
    net = build_network(NetworkConfig(variant=SoftMoE(2)), 0)
    b = _batch(rng, 3)
    J = per_sample_gradients(net, b.obs, b.actions)
    assert J.shape == (3, sum(net.params[k].size for k in net.trainable_names()))
    for i in range(3):
        leaves = net.leaves()
        q, _ = q_forward(net, b.obs[i:i + 1], leaves)
        g = T.grad(q[0, int(b.actions[i])], [leaves[k] for k in net.trainable_names()])
        np.testing.assert_allclose(J[i], np.concatenate([x.ravel() for x in g]), atol=1e-12)


@pytest.mark.parametrize("variant", [None, SoftMoE(4), Top1MoE(4)])
def test_probe_is_read_only(variant):
    cfg = NetworkConfig() if variant is None else NetworkConfig(variant=variant)
    net = build_network(cfg, 1)
    before = {k: v.copy() for k, v in net.params.items()}
    rec = probe(net, _batch(np.random.default_rng(6), 8), DiagnosticsConfig(), step=7)
    assert rec.step == 7 and 1 <= rec.entk_effective_rank <= 8
    assert 0.0 <= rec.dormant_fraction["penultimate"] <= 1.0 and rec.feature_norm > 0
    assert all(np.array_equal(before[k], net.params[k]) for k in before)


def test_hand_zeroed_penultimate_neurons():
    net = build_network(NetworkConfig(), 0)
    H = net.params["pen.b"].size
    k = 11
    net.params["pen.w"][:, :k] = 0.0
    net.params["pen.b"][:k] = 0.0
    net.params["pen.b"][k:] = 1.0
    rec = probe(net, _batch(np.random.default_rng(7), 32), DiagnosticsConfig())
    assert rec.dormant_fraction["penultimate"] == k / H
