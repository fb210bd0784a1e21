"""Self-checks behind ``moerl verify``: layer gradients against central
differences plus the routing and accounting invariants."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import moe
from . import tensor as T
from .agent import UpdateSchedule, cql_regularizer
from .gradcheck import finite_diff_check
from .networks import (Baseline, EncoderConfig, ExpertVariant, NetworkConfig, SoftMoE, Top1MoE,
                       build_network, q_forward)
from .tensor import Tensor

GRAD_TOL = 1e-5
GRAD_EPS = 1e-6


@dataclass(frozen=True)
class CheckResult:
    name: str
    value: float
    tol: float
    ok: bool
    seconds: float = 0.0

    def line(self) -> str:
        return f"{'PASS' if self.ok else 'FAIL'}  {self.name}: {self.value:.3g} (tol {self.tol:g}, {self.seconds:.2f}s)"


def _param(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(rng.normal(size=shape) * scale, requires_grad=True)


# Each case returns (closure, params) for one seed. The readout weights make
# the scalar depend on every output coordinate differently.

def dense_case(seed: int):
    rng = np.random.default_rng(seed)
    x, w, b = _param(rng, 4, 5), _param(rng, 5, 3, scale=0.5), _param(rng, 3)
    r = rng.normal(size=(4, 3))
    return (lambda: T.sum_(T.relu(x @ w + b) * r)), [x, w, b]


def conv_case(seed: int):
    rng = np.random.default_rng(seed)
    stride = 1 + seed % 2
    x, k = _param(rng, 2, 7, 7, 2), _param(rng, 3, 3, 2, 4, scale=0.5)
    out = T.conv_output_size(7, 3, stride)
    r = rng.normal(size=(2, out, out, 4))
    return (lambda: T.sum_(T.relu(T.conv2d(x, k, stride)) * r)), [x, k]


def _softmoe_params(rng, d, n, p, h, l2):
    cfg = moe.SoftMoEConfig(n_experts=n, token_dim=d, expert_hidden=h, slots_per_expert=p,
                            l2_normalize=l2)
    P = moe.init_softmoe(cfg, rng)
    for t in P.named().values():
        t.data = t.data * 2.0
    if P.scale is not None:
        P.scale.data = np.asarray(rng.uniform(0.5, 2.0), dtype=np.float64)
    return P


def softmoe_case(seed: int, l2: bool = False):
    rng = np.random.default_rng(seed)
    m, d, n, p, h = 5, 4, 3, 2, 6
    x = _param(rng, m, d)
    P = _softmoe_params(rng, d, n, p, h, l2)
    r = rng.normal(size=(m, d))
    return (lambda: T.sum_(moe.softmoe_forward(x, P) * r)), [x, *P.named().values()]


def top1_case(seed: int):
    rng = np.random.default_rng(seed)
    m, d, n, h = 6, 4, 3, 5
    x = _param(rng, m, d)
    P = moe.init_top1(n, d, h, rng)
    P.router.data = P.router.data * 3.0
    with T.no_grad():
        _, stats = moe.top1_forward(x, P)
    fixed = stats.assignment.copy()
    r = rng.normal(size=(m, d))

    def f():
        y, st = moe.top1_forward(x, P, assignment=fixed)
        return T.sum_(y * r) + moe.load_balancing_loss(st)

    return f, [x, *P.named().values()]


LAYER_CASES: dict[str, Callable[[int], tuple]] = {
    "dense": dense_case,
    "conv2d": conv_case,
    "softmoe": softmoe_case,
    "softmoe-l2": lambda s: softmoe_case(s, l2=True),
    "top1-frozen-argmax": top1_case,
}


def tiny_network_configs() -> dict[str, NetworkConfig]:
    enc = EncoderConfig(((2, 3, 1),))
    base = dict(obs_shape=(5, 5, 1), n_actions=3, encoder=enc, base_width=3)
    return {
        "baseline": NetworkConfig(variant=Baseline(2), **base),
        "softmoe": NetworkConfig(variant=SoftMoE(2, slots_per_expert=2), **base),
        "softmoe-l2": NetworkConfig(variant=SoftMoE(2, l2_normalize=True), **base),
        "top1": NetworkConfig(variant=Top1MoE(2, load_balance_coef=0.01), **base),
        "big": NetworkConfig(variant=SoftMoE(2, tokenization="PerSamp"),
                             expert_variant=ExpertVariant("Big"), **base),
        "all": NetworkConfig(variant=SoftMoE(2, tokenization="PerSamp"),
                             expert_variant=ExpertVariant("All", normalize=True), **base),
    }


def network_case(cfg: NetworkConfig, seed: int):
    net = build_network(cfg, seed)
    rng = np.random.default_rng(seed + 1000)
    obs = rng.uniform(size=(2, *cfg.obs_shape))
    leaves = net.leaves()
    r = rng.normal(size=(2, cfg.n_actions))

    def f():
        q, _ = q_forward(net, obs, leaves)
        return T.sum_(q * r)

    # Top-1 routing is piecewise constant in the parameters; generic seeds keep
    # every token away from a routing boundary at this perturbation size.
    params = [leaves[k] for k in net.trainable_names()]
    return f, params


def check_layer_gradients(seeds=range(10)) -> list[CheckResult]:
    out = []
    for name, case in LAYER_CASES.items():
        t0 = time.perf_counter()
        worst = 0.0
        for s in seeds:
            f, params = case(s)
            worst = max(worst, finite_diff_check(f, params, eps=GRAD_EPS))
        out.append(CheckResult(f"grad/{name}", worst, GRAD_TOL, worst <= GRAD_TOL,
                               time.perf_counter() - t0))
    return out


def check_network_gradients(seed: int = 0) -> list[CheckResult]:
    out = []
    for name, cfg in tiny_network_configs().items():
        t0 = time.perf_counter()
        f, params = network_case(cfg, seed)
        err = finite_diff_check(f, params, eps=GRAD_EPS)
        out.append(CheckResult(f"grad/network-{name}", err, GRAD_TOL, err <= GRAD_TOL,
                               time.perf_counter() - t0))
    return out


def check_invariants(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    out = []
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(200):
        m, s = rng.integers(1, 9, size=2)
        L = Tensor(rng.normal(scale=5.0, size=(m, s)))
        D, C = moe.dispatch_weights(L).data, moe.combine_weights(L).data
        worst = max(worst, np.abs(D.sum(axis=0) - 1).max(), np.abs(C.sum(axis=1) - 1).max())
    out.append(CheckResult("stochastic-D-C", worst, 1e-12, worst <= 1e-12, time.perf_counter() - t0))

    t0 = time.perf_counter()
    worst = 0.0
    P = _softmoe_params(rng, 4, 3, 2, 5, False)
    x = rng.normal(size=(7, 4))
    with T.no_grad():
        y = moe.softmoe_forward(Tensor(x), P).data
        for _ in range(20):
            perm = rng.permutation(7)
            yp = moe.softmoe_forward(Tensor(x[perm]), P).data
            worst = max(worst, np.abs(yp - y[perm]).max())
    out.append(CheckResult("permutation-equivariance", worst, 1e-10, worst < 1e-10,
                           time.perf_counter() - t0))

    t0 = time.perf_counter()
    mismatch = 0
    for rr in (0.25, 0.5, 1, 2, 4):
        sched, total = UpdateSchedule(rr, 100), 0
        for step in range(1, 1001):
            total += sched.on_env_step()
            mismatch += total != math.floor(max(0, step - 100) * rr)
    out.append(CheckResult("replay-ratio-accounting", mismatch, 0, mismatch == 0,
                           time.perf_counter() - t0))

    reg = cql_regularizer(Tensor(np.full((3, 4), 0.7)), np.array([0, 1, 3])).item()
    err = abs(reg - math.log(4))
    out.append(CheckResult("cql-uniform-ln4", err, 1e-12, err <= 1e-12))
    return out


def run_all() -> list[CheckResult]:
    return check_layer_gradients() + check_network_gradients() + check_invariants()
