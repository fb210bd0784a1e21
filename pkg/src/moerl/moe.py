"""Soft MoE and Top-1 MoE layers operating on token matrices.

Shapes use ``m`` tokens of width ``d``, ``n`` experts with ``p`` slots each
(``S = n*p`` slots in total) and expert hidden width ``h``. Every function
accepts arbitrary leading batch axes.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Tokenization(str, enum.Enum):
    PER_CONV = "PerConv"
    PER_FEAT = "PerFeat"
    PER_SAMP = "PerSamp"


@dataclass(frozen=True)
class TokenMatrix:
    tokens: Tensor
    scheme: Tokenization
    grid: tuple[int, int, int]  # (h, w, d) of the encoder output it came from

    @property
    def m(self) -> int:
        return self.tokens.shape[-2]

    @property
    def d(self) -> int:
        return self.tokens.shape[-1]


def token_shape(grid: tuple[int, int, int], scheme: Tokenization) -> tuple[int, int]:
    """(m, d) produced by ``scheme`` on an ``h×w×c`` encoder output."""
    h, w, c = grid
    scheme = Tokenization(scheme)
    if scheme is Tokenization.PER_CONV:
        return h * w, c
    if scheme is Tokenization.PER_FEAT:
        return c, h * w
    return 1, h * w * c


def tokenize(encoder_output: Tensor, scheme: Tokenization | str) -> TokenMatrix:
    scheme = Tokenization(scheme)
    x = T.as_tensor(encoder_output)
    if x.ndim < 3:
        raise ValueError(f"encoder output must be h×w×c (optionally batched), got {x.shape}")
    lead = x.shape[:-3]
    h, w, c = x.shape[-3:]
    m, d = token_shape((h, w, c), scheme)
    if scheme is Tokenization.PER_FEAT:
        nd = x.ndim
        perm = list(range(nd - 3)) + [nd - 1, nd - 3, nd - 2]
        x = T.transpose(x, perm)
    return TokenMatrix(T.reshape(x, lead + (m, d)), scheme, (h, w, c))


def detokenize(tm: TokenMatrix) -> Tensor:
    h, w, c = tm.grid
    x = tm.tokens
    lead = x.shape[:-2]
    if tm.scheme is Tokenization.PER_FEAT:
        x = T.reshape(x, lead + (c, h, w))
        nd = x.ndim
        perm = list(range(nd - 3)) + [nd - 2, nd - 1, nd - 3]
        return T.transpose(x, perm)
    return T.reshape(x, lead + (h, w, c))


# ---------------------------------------------------------------- Soft MoE


@dataclass(frozen=True)
class SoftMoEConfig:
    n_experts: int
    token_dim: int
    expert_hidden: int
    slots_per_expert: int = 1
    l2_normalize: bool = False
    frozen_random_phi: bool = False

    def __post_init__(self):
        if min(self.n_experts, self.slots_per_expert, self.token_dim, self.expert_hidden) < 1:
            raise ValueError(f"invalid Soft MoE sizes: {self}")

    @property
    def n_slots(self) -> int:
        return self.n_experts * self.slots_per_expert


@dataclass
class SoftMoEParams:
    phi: Tensor          # d × (n·p)
    w_in: Tensor         # n × d × h
    b_in: Tensor         # n × 1 × h
    w_out: Tensor        # n × h × d   (per-expert projection back to d)
    b_out: Tensor        # n × 1 × d
    scale: Tensor | None = None  # scalar, only with l2 normalisation

    def named(self) -> dict[str, Tensor]:
        out = {"phi": self.phi, "w_in": self.w_in, "b_in": self.b_in,
               "w_out": self.w_out, "b_out": self.b_out}
        if self.scale is not None:
            out["scale"] = self.scale
        return out


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_phi(rng: np.random.Generator, d: int, n_slots: int) -> np.ndarray:
    return _uniform(rng, (d, n_slots), d)


def init_expert_stack(rng, n: int, d_in: int, h: int, d_out: int) -> dict[str, np.ndarray]:
    return {
        "w_in": _uniform(rng, (n, d_in, h), d_in),
        "b_in": _uniform(rng, (n, 1, h), d_in),
        "w_out": _uniform(rng, (n, h, d_out), h),
        "b_out": _uniform(rng, (n, 1, d_out), h),
    }


def init_softmoe(cfg: SoftMoEConfig, rng: np.random.Generator) -> SoftMoEParams:
    d, n, h = cfg.token_dim, cfg.n_experts, cfg.expert_hidden
    phi = Tensor(init_phi(rng, d, cfg.n_slots), requires_grad=not cfg.frozen_random_phi)
    ex = {k: Tensor(v, requires_grad=True) for k, v in init_expert_stack(rng, n, d, h, d).items()}
    scale = Tensor(1.0, requires_grad=True) if cfg.l2_normalize else None
    return SoftMoEParams(phi=phi, scale=scale, **ex)


def _unit(x: Tensor, axis: int, eps: float = 1e-12) -> Tensor:
    return x / T.sqrt(T.sum_(T.square(x), axis, keepdims=True) + eps)


def softmoe_logits(x, phi: Tensor, scale: Tensor | None = None) -> Tensor:
    """``X @ Φ``; with ``scale`` given, rows of X and columns of Φ are
    unit-normalised first and the product is multiplied by ``scale``."""
    x = _tokens(x)
    if x.shape[-1] != phi.shape[0]:
        raise ValueError(f"token dim {x.shape[-1]} does not match Φ rows {phi.shape[0]}")
    if scale is None:
        return x @ phi
    return (_unit(x, -1) @ _unit(phi, 0)) * scale


def dispatch_weights(logits: Tensor) -> Tensor:
    """Softmax over tokens: every slot column sums to one."""
    return T.softmax(logits, axis=-2)


def combine_weights(logits: Tensor) -> Tensor:
    """Softmax over slots: every token row sums to one."""
    return T.softmax(logits, axis=-1)


def expert_mlp(slots: Tensor, w_in: Tensor, b_in: Tensor, w_out: Tensor, b_out: Tensor) -> Tensor:
    """Apply expert ``e`` to ``slots[..., e, :, :]`` for all experts at once."""
    return T.relu(slots @ w_in + b_in) @ w_out + b_out


def soft_moe(x: Tensor, logits: Tensor, n_experts: int,
             expert_fn: Callable[[Tensor], Tensor]) -> Tensor:
    """Generic Soft MoE mixing given precomputed logits.

    ``expert_fn`` maps slot inputs ``(..., n, p, d)`` to outputs
    ``(..., n, p, d_out)``; the result has shape ``(..., m, d_out)``.
    """
    D = dispatch_weights(logits)
    C = combine_weights(logits)
    lead = x.shape[:-2]
    n_slots = logits.shape[-1]
    p = n_slots // n_experts
    slots_in = T.swapaxes(D, -1, -2) @ x                             # (..., S, d)
    slots_in = T.reshape(slots_in, lead + (n_experts, p, x.shape[-1]))
    slots_out = expert_fn(slots_in)                                  # (..., n, p, d_out)
    slots_out = T.reshape(slots_out, lead + (n_slots, slots_out.shape[-1]))
    return C @ slots_out


def softmoe_forward(x, params: SoftMoEParams):
    """Soft MoE layer. Accepts a Tensor ``(..., m, d)`` or a TokenMatrix and
    returns the same kind, with the token width preserved."""
    tokens = _tokens(x)
    logits = softmoe_logits(tokens, params.phi, params.scale)
    n = params.w_in.shape[0]
    y = soft_moe(tokens, logits, n,
                 lambda s: expert_mlp(s, params.w_in, params.b_in, params.w_out, params.b_out))
    return _like(x, y)


# ---------------------------------------------------------------- Top-1


@dataclass
class Top1MoEParams:
    router: Tensor       # d × n
    w_in: Tensor
    b_in: Tensor
    w_out: Tensor
    b_out: Tensor

    def named(self) -> dict[str, Tensor]:
        return {"router": self.router, "w_in": self.w_in, "b_in": self.b_in,
                "w_out": self.w_out, "b_out": self.b_out}


@dataclass
class RoutingStats:
    counts: np.ndarray   # tokens assigned to each expert
    gate_sums: Tensor    # per-expert gate probability summed over tokens
    n_tokens: int
    assignment: np.ndarray  # chosen expert per token, shape (..., m)

    @property
    def mean_gates(self) -> np.ndarray:
        return self.gate_sums.data / max(self.n_tokens, 1)


def init_top1(n_experts: int, token_dim: int, expert_hidden: int,
              rng: np.random.Generator) -> Top1MoEParams:
    router = Tensor(_uniform(rng, (token_dim, n_experts), token_dim), requires_grad=True)
    ex = init_expert_stack(rng, n_experts, token_dim, expert_hidden, token_dim)
    return Top1MoEParams(router=router, **{k: Tensor(v, requires_grad=True) for k, v in ex.items()})


def top1_forward(x, params: Top1MoEParams, assignment: np.ndarray | None = None,
                 hidden: list | None = None):
    """Hard top-1 routing; the chosen expert's output is scaled by its gate.

    Every expert is evaluated on every token and the result is masked,
    which is cheap at these sizes and keeps the mask a constant. Passing
    ``assignment`` pins the routing (used to hold argmax fixed in checks);
    ``hidden`` collects the expert hidden activations ``(..., n, m, h)``.
    """
    tokens = _tokens(x)
    n = params.router.shape[1]
    gates = T.softmax(tokens @ params.router, axis=-1)              # (..., m, n)
    if assignment is None:
        assignment = np.argmax(gates.data, axis=-1)                  # ties -> lowest index
    mask = np.eye(n)[assignment]                                     # (..., m, n)
    weight = gates * mask
    expanded = T.reshape(tokens, tokens.shape[:-2] + (1,) + tokens.shape[-2:])
    hid = T.relu(expanded @ params.w_in + params.b_in)               # (..., n, m, h)
    if hidden is not None:
        hidden.append(hid.data)
    outs = hid @ params.w_out + params.b_out                         # (..., n, m, d)
    w = T.swapaxes(weight, -1, -2)
    w = T.reshape(w, w.shape + (1,))
    y = T.sum_(outs * w, axis=-3)
    flat_gates = T.reshape(gates, (-1, n))
    stats = RoutingStats(
        counts=np.bincount(assignment.reshape(-1), minlength=n).astype(np.float64),
        gate_sums=T.sum_(flat_gates, axis=0),
        n_tokens=int(flat_gates.shape[0]),
        assignment=assignment,
    )
    return _like(x, y), stats


def _cv2(x: Tensor) -> Tensor:
    mu = T.mean(x)
    var = T.mean(T.square(x - mu))
    return var / T.square(mu)


def load_balancing_loss(stats: RoutingStats) -> Tensor:
    """Half the sum of the importance and load squared coefficients of variation.

    Importance uses summed gate probabilities and carries gradient to the
    router; load uses hard assignment counts and is a constant.
    """
    if stats.n_tokens < 1:
        raise ValueError("load balancing loss needs at least one routed token")
    importance = _cv2(stats.gate_sums)
    load = _cv2(Tensor(stats.counts))
    return (importance + load) * 0.5


# ---------------------------------------------------------------- helpers


def _tokens(x) -> Tensor:
    return x.tokens if isinstance(x, TokenMatrix) else T.as_tensor(x)


def _like(x, y: Tensor):
    return replace(x, tokens=y) if isinstance(x, TokenMatrix) else y
