"""Network-health diagnostics and aggregate statistics over runs."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .networks import QNetworkParams, q_forward
from .replay import Batch


@dataclass(frozen=True)
class DiagnosticsConfig:
    probe_batch_size: int = 32
    dormant_tau: float = 0.025
    srank_delta: float = 0.01
    probe_interval: int = 1000  # gradient updates

    def __post_init__(self):
        if self.dormant_tau < 0:
            raise ValueError("dormant_tau must be >= 0")
        if not 0.0 < self.srank_delta < 1.0:
            raise ValueError("srank_delta must lie in (0, 1)")


@dataclass(frozen=True)
class HealthRecord:
    step: int
    dormant_fraction: dict[str, float]
    entk_effective_rank: int
    feature_norm: float


def dormant_scores(activations: np.ndarray) -> np.ndarray:
    a = np.abs(np.asarray(activations, dtype=np.float64))
    per_neuron = a.reshape(-1, a.shape[-1]).mean(axis=0)
    layer = per_neuron.mean()
    if layer == 0.0:
        return np.zeros_like(per_neuron)
    return per_neuron / layer


def dormant_fraction(activations: np.ndarray, tau: float = 0.025) -> float:
    """Fraction of neurons whose mean |activation|, normalised by the layer
    average, is at most ``tau``. A silent layer is entirely dormant."""
    scores = dormant_scores(activations)
    return float(np.count_nonzero(scores <= tau)) / scores.size


def effective_rank(singular_values: np.ndarray, delta: float = 0.01) -> int:
    s = np.sort(np.asarray(singular_values, dtype=np.float64))[::-1]
    total = s.sum()
    if total <= 0.0:
        return 0
    cum = np.cumsum(s) / total
    return int(np.searchsorted(cum, 1.0 - delta, side="left") + 1)


def entk_effective_rank(per_sample_gradients: np.ndarray, delta: float = 0.01) -> int:
    """Effective rank of the Gram matrix of per-sample gradient rows."""
    J = np.asarray(per_sample_gradients, dtype=np.float64)
    gram = J @ J.T
    return effective_rank(np.linalg.svd(gram, compute_uv=False), delta)


def feature_norm(features: np.ndarray) -> float:
    f = np.asarray(features, dtype=np.float64)
    return float(np.linalg.norm(f.reshape(f.shape[0], -1), axis=1).mean())


def per_sample_gradients(net: QNetworkParams, obs: np.ndarray, actions: np.ndarray) -> np.ndarray:
    """Row ``i`` is the flattened gradient of Q(x_i, a_i) over all trainable
    parameters, in ``net.trainable_names()`` order."""
    leaves = net.leaves()
    q, _ = q_forward(net, obs, leaves)
    names = net.trainable_names()
    wrt = [leaves[k] for k in names]
    rows = []
    for i, a in enumerate(actions):
        gs = T.grad(q[i, int(a)], wrt)
        rows.append(np.concatenate([g.reshape(-1) for g in gs]))
    return np.stack(rows)


def probe(net: QNetworkParams, batch: Batch, cfg: DiagnosticsConfig, step: int = 0) -> HealthRecord:
    """Diagnostics on a held-out batch. Never writes to ``net``."""
    with T.no_grad():
        _, taps = q_forward(net, batch.obs)
    J = per_sample_gradients(net, batch.obs, batch.actions)
    return HealthRecord(
        step=step,
        dormant_fraction={"penultimate": dormant_fraction(taps.penultimate, cfg.dormant_tau)},
        entk_effective_rank=entk_effective_rank(J, cfg.srank_delta),
        feature_norm=feature_norm(taps.features.data),
    )


# ---------------------------------------------------------------- statistics


def iqm(scores) -> float:
    """Mean after dropping floor(n/4) values from each end of the sorted list."""
    x = np.sort(np.asarray(scores, dtype=np.float64).reshape(-1))
    n = x.size
    if n == 0:
        raise ValueError("iqm of an empty list")
    k = n // 4
    return float(x[k:n - k].mean())


def _iqm_rows(samples: np.ndarray) -> np.ndarray:
    s = np.sort(samples, axis=1)
    n = s.shape[1]
    k = n // 4
    return s[:, k:n - k].mean(axis=1)


def stratified_bootstrap_ci(score_matrix, iters: int = 2000, level: float = 0.95,
                            seed: int = 0) -> tuple[float, float]:
    """Percentile interval of the IQM when runs are resampled within each task.

    ``score_matrix`` is ``runs × tasks``.
    """
    M = np.asarray(score_matrix, dtype=np.float64)
    if M.ndim == 1:
        M = M[:, None]
    runs, tasks = M.shape
    if runs < 2:
        raise ValueError("stratified bootstrap needs at least two runs per task")
    rng = np.random.default_rng(seed)
    out = np.empty(iters)
    chunk = max(1, 200_000 // (runs * tasks))
    cols = np.arange(tasks)
    for start in range(0, iters, chunk):
        stop = min(iters, start + chunk)
        idx = rng.integers(0, runs, size=(stop - start, runs, tasks))
        out[start:stop] = _iqm_rows(M[idx, cols].reshape(stop - start, runs * tasks))
    tail = (1.0 - level) / 2.0 * 100.0
    lo, hi = np.percentile(out, [tail, 100.0 - tail])
    return float(lo), float(hi)


def mean_with_nan(values) -> float:
    v = [x for x in values if x is not None and not math.isnan(x)]
    return float(np.mean(v)) if v else float("nan")
