"""Q-network family: conv encoder, a swappable penultimate block, linear head.

Parameters live in a flat insertion-ordered ``dict[str, np.ndarray]``; that
order is the traversal order used by checkpoints and the optimizer.
"""

from __future__ import annotations

import dataclasses
import enum
import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

from . import moe
from . import tensor as T
from .moe import Tokenization
from .tensor import Tensor, check_finite

# ---------------------------------------------------------------- configs


@dataclass(frozen=True)
class EncoderConfig:
    layers: tuple[tuple[int, int, int], ...] = ((8, 3, 1), (16, 3, 1))  # (out_channels, kernel, stride)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(tuple(int(v) for v in l) for l in self.layers))
        if not self.layers:
            raise ValueError("encoder needs at least one conv layer")

    def output_shape(self, obs_shape) -> tuple[int, int, int]:
        h, w, c = obs_shape
        for o, k, s in self.layers:
            if k > h or k > w:
                raise ValueError(f"encoder collapses spatial dims: kernel {k} on {h}x{w}")
            h, w, c = T.conv_output_size(h, k, s), T.conv_output_size(w, k, s), o
        return h, w, c


PAPER_ENCODER = EncoderConfig(((32, 8, 4), (64, 4, 2), (64, 3, 1)))
DESK_ENCODER = EncoderConfig()


@dataclass(frozen=True)
class Baseline:
    width_multiplier: int = 1

    def __post_init__(self):
        if self.width_multiplier < 1:
            raise ValueError("width_multiplier must be >= 1")


@dataclass(frozen=True)
class SoftMoE:
    n_experts: int = 1
    slots_per_expert: int = 1
    tokenization: Tokenization = Tokenization.PER_CONV
    l2_normalize: bool = False
    frozen_random_phi: bool = False
    divide_expert_dim: bool = False

    def __post_init__(self):
        object.__setattr__(self, "tokenization", Tokenization(self.tokenization))


@dataclass(frozen=True)
class Top1MoE:
    n_experts: int = 1
    tokenization: Tokenization = Tokenization.PER_CONV
    divide_expert_dim: bool = False
    load_balance_coef: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "tokenization", Tokenization(self.tokenization))


PenultimateVariant = Union[Baseline, SoftMoE, Top1MoE]


class ExpertKind(str, enum.Enum):
    REGULAR = "Regular"
    BIG = "Big"
    ALL = "All"


@dataclass(frozen=True)
class ExpertVariant:
    kind: ExpertKind = ExpertKind.REGULAR
    normalize: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kind", ExpertKind(self.kind))


@dataclass(frozen=True)
class NetworkConfig:
    obs_shape: tuple[int, int, int] = (10, 10, 1)
    n_actions: int = 3
    encoder: EncoderConfig = DESK_ENCODER
    variant: PenultimateVariant = field(default_factory=Baseline)
    expert_variant: ExpertVariant = field(default_factory=ExpertVariant)
    base_width: int = 64

    def __post_init__(self):
        object.__setattr__(self, "obs_shape", tuple(int(v) for v in self.obs_shape))
        self.encoder.output_shape(self.obs_shape)
        kind = self.expert_variant.kind
        if kind is not ExpertKind.REGULAR:
            if not isinstance(self.variant, SoftMoE):
                raise ValueError(f"{kind.value} expert variant requires a Soft MoE penultimate")
            if self.variant.tokenization is not Tokenization.PER_SAMP:
                raise ValueError(f"{kind.value} expert variant requires PerSamp tokenization")

    @property
    def l2_normalize(self) -> bool:
        return bool(getattr(self.variant, "l2_normalize", False) or self.expert_variant.normalize)

    def expert_hidden(self) -> int:
        v = self.variant
        if isinstance(v, Baseline):
            return self.base_width * v.width_multiplier
        if v.divide_expert_dim:
            return max(1, self.base_width // v.n_experts)
        return self.base_width

    def to_dict(self) -> dict:
        v = self.variant
        return {
            "obs_shape": list(self.obs_shape),
            "n_actions": self.n_actions,
            "encoder": [list(l) for l in self.encoder.layers],
            "variant": {"type": type(v).__name__, **_plain(dataclasses.asdict(v))},
            "expert_variant": _plain(dataclasses.asdict(self.expert_variant)),
            "base_width": self.base_width,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        vd = dict(d.get("variant", {"type": "Baseline"}))
        kind = vd.pop("type")
        variants = {"Baseline": Baseline, "SoftMoE": SoftMoE, "Top1MoE": Top1MoE}
        if kind not in variants:
            raise ValueError(f"unknown penultimate variant {kind!r}")
        return cls(
            obs_shape=tuple(d.get("obs_shape", (10, 10, 1))),
            n_actions=int(d.get("n_actions", 3)),
            encoder=EncoderConfig(tuple(tuple(l) for l in d.get("encoder", DESK_ENCODER.layers))),
            variant=variants[kind](**vd),
            expert_variant=ExpertVariant(**d.get("expert_variant", {})),
            base_width=int(d.get("base_width", 64)),
        )

    def config_hash(self) -> str:
        return canonical_hash(self.to_dict())


def _plain(d: dict) -> dict:
    return {k: (v.value if isinstance(v, enum.Enum) else v) for k, v in d.items()}


def canonical_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


# ---------------------------------------------------------------- params


@dataclass
class QNetworkParams:
    config: NetworkConfig
    params: dict[str, np.ndarray]
    frozen: frozenset[str] = frozenset()
    seed: int = 0

    def trainable_names(self) -> list[str]:
        return [k for k in self.params if k not in self.frozen]

    def copy(self) -> "QNetworkParams":
        return QNetworkParams(self.config, {k: v.copy() for k, v in self.params.items()},
                              self.frozen, self.seed)

    def leaves(self, requires_grad: bool = True) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad and k not in self.frozen)
                for k, v in self.params.items()}


def _uniform(rng, shape, fan_in):
    b = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-b, b, size=shape)


def _dense(rng, out: dict, name: str, d_in: int, d_out: int):
    out[f"{name}.w"] = _uniform(rng, (d_in, d_out), d_in)
    out[f"{name}.b"] = _uniform(rng, (d_out,), d_in)


def _encoder(rng, out: dict, prefix: str, obs_shape, enc: EncoderConfig):
    c = obs_shape[2]
    for i, (o, k, _) in enumerate(enc.layers):
        fan = k * k * c
        out[f"{prefix}enc.{i}.w"] = _uniform(rng, (k, k, c, o), fan)
        out[f"{prefix}enc.{i}.b"] = _uniform(rng, (o,), fan)
        c = o


def _softmoe_block(rng, out: dict, prefix: str, d: int, n: int, p: int, h: int,
                   l2: bool, frozen: set, frozen_phi: bool):
    out[f"{prefix}.phi"] = moe.init_phi(rng, d, n * p)
    if frozen_phi:
        frozen.add(f"{prefix}.phi")
    for k, v in moe.init_expert_stack(rng, n, d, h, d).items():
        out[f"{prefix}.{k}"] = v
    if l2:
        out[f"{prefix}.scale"] = np.ones(())


def build_network(config: NetworkConfig, seed: int) -> QNetworkParams:
    """Deterministically initialise every parameter of ``config`` from ``seed``."""
    rng = np.random.default_rng(np.random.SeedSequence(int(seed) & (2**64 - 1)))
    cfg = config
    out: dict[str, np.ndarray] = {}
    frozen: set[str] = set()
    v = cfg.variant
    kind = cfg.expert_variant.kind
    A = cfg.n_actions
    h_exp = cfg.expert_hidden()

    if kind is ExpertKind.BIG:
        d = int(np.prod(cfg.obs_shape))
        out["moe.phi"] = moe.init_phi(rng, d, v.n_experts * v.slots_per_expert)
        if v.frozen_random_phi:
            frozen.add("moe.phi")
        if cfg.l2_normalize:
            out["moe.scale"] = np.ones(())
        hh, ww, cc = cfg.encoder.output_shape(cfg.obs_shape)
        for e in range(v.n_experts):
            _encoder(rng, out, f"big.{e}.", cfg.obs_shape, cfg.encoder)
            _dense(rng, out, f"big.{e}.pen", hh * ww * cc, h_exp)
            _dense(rng, out, f"big.{e}.head", h_exp, A)
        return QNetworkParams(cfg, out, frozenset(frozen), int(seed))

    if kind is ExpertKind.ALL:
        h, w, c = cfg.obs_shape
        cin = c
        for i, (o, k, s) in enumerate(cfg.encoder.layers):
            fan = k * k * cin
            out[f"enc.{i}.w"] = _uniform(rng, (k, k, cin, o), fan)
            out[f"enc.{i}.b"] = _uniform(rng, (o,), fan)
            h, w, cin = T.conv_output_size(h, k, s), T.conv_output_size(w, k, s), o
            _softmoe_block(rng, out, f"moe_enc.{i}", h * w * o, v.n_experts, v.slots_per_expert,
                           h_exp, cfg.l2_normalize, frozen, v.frozen_random_phi)
        _dense(rng, out, "pen", h * w * cin, cfg.base_width)
        _softmoe_block(rng, out, "moe_pen", cfg.base_width, v.n_experts, v.slots_per_expert,
                       h_exp, cfg.l2_normalize, frozen, v.frozen_random_phi)
        _dense(rng, out, "head", cfg.base_width, A)
        return QNetworkParams(cfg, out, frozenset(frozen), int(seed))

    _encoder(rng, out, "", cfg.obs_shape, cfg.encoder)
    grid = cfg.encoder.output_shape(cfg.obs_shape)
    flat = int(np.prod(grid))
    if isinstance(v, Baseline):
        _dense(rng, out, "pen", flat, h_exp)
        _dense(rng, out, "head", h_exp, A)
    else:
        m, d = moe.token_shape(grid, v.tokenization)
        if isinstance(v, SoftMoE):
            _softmoe_block(rng, out, "moe", d, v.n_experts, v.slots_per_expert, h_exp,
                           cfg.l2_normalize, frozen, v.frozen_random_phi)
        else:
            out["moe.router"] = _uniform(rng, (d, v.n_experts), d)
            for k, a in moe.init_expert_stack(rng, v.n_experts, d, h_exp, d).items():
                out[f"moe.{k}"] = a
        _dense(rng, out, "head", m * d, A)
    return QNetworkParams(cfg, out, frozenset(frozen), int(seed))


def param_count(config: NetworkConfig) -> int:
    """Trainable scalar count derived in closed form from the config."""
    cfg = config
    v = cfg.variant
    A = cfg.n_actions
    kind = cfg.expert_variant.kind
    h_exp = cfg.expert_hidden()

    def enc_count(c):
        total = 0
        for o, k, _ in cfg.encoder.layers:
            total += k * k * c * o + o
            c = o
        return total

    def softmoe_count(d, n, p, h):
        phi = 0 if v.frozen_random_phi else d * n * p
        return n * (d * h + h) + n * (h * d + d) + phi + (1 if cfg.l2_normalize else 0)

    hh, ww, cc = cfg.encoder.output_shape(cfg.obs_shape)
    flat = hh * ww * cc
    if kind is ExpertKind.BIG:
        d = int(np.prod(cfg.obs_shape))
        per_expert = enc_count(cfg.obs_shape[2]) + flat * h_exp + h_exp + h_exp * A + A
        phi = 0 if v.frozen_random_phi else d * v.n_experts * v.slots_per_expert
        return v.n_experts * per_expert + phi + (1 if cfg.l2_normalize else 0)
    if kind is ExpertKind.ALL:
        total = enc_count(cfg.obs_shape[2])
        h, w = cfg.obs_shape[:2]
        for o, k, s in cfg.encoder.layers:
            h, w = T.conv_output_size(h, k, s), T.conv_output_size(w, k, s)
            total += softmoe_count(h * w * o, v.n_experts, v.slots_per_expert, h_exp)
        W = cfg.base_width
        total += flat * W + W
        total += softmoe_count(W, v.n_experts, v.slots_per_expert, h_exp)
        return total + W * A + A

    total = enc_count(cfg.obs_shape[2])
    if isinstance(v, Baseline):
        return total + flat * h_exp + h_exp + h_exp * A + A
    m, d = moe.token_shape((hh, ww, cc), v.tokenization)
    n = v.n_experts
    if isinstance(v, SoftMoE):
        total += softmoe_count(d, n, v.slots_per_expert, h_exp)
    else:
        total += d * n + n * (d * h_exp + h_exp) + n * (h_exp * d + d)
    return total + m * d * A + A


# ---------------------------------------------------------------- forward


@dataclass
class FeatureTaps:
    encoder: np.ndarray          # (B, h, w, c) encoder output
    _penultimate: object         # array, or zero-arg callable producing it on first access
    features: Tensor             # (B, F) input of the final linear layer
    routing: moe.RoutingStats | None = None

    @property
    def penultimate(self) -> np.ndarray:
        """Post-ReLU penultimate activations, ``(samples, neurons)``."""
        if callable(self._penultimate):
            self._penultimate = self._penultimate()
        return self._penultimate


def _conv_stack(x: Tensor, L: dict[str, Tensor], prefix: str, enc: EncoderConfig,
                after=None) -> Tensor:
    for i, (_, _, s) in enumerate(enc.layers):
        x = T.relu(T.conv2d(x, L[f"{prefix}enc.{i}.w"], s) + L[f"{prefix}enc.{i}.b"])
        check_finite(x, f"{prefix}enc.{i}")
        if after is not None:
            x = after(i, x)
    return x


def _softmoe_params(L: dict[str, Tensor], prefix: str) -> moe.SoftMoEParams:
    return moe.SoftMoEParams(
        phi=L[f"{prefix}.phi"], w_in=L[f"{prefix}.w_in"], b_in=L[f"{prefix}.b_in"],
        w_out=L[f"{prefix}.w_out"], b_out=L[f"{prefix}.b_out"], scale=L.get(f"{prefix}.scale"))


def _softmoe_with_hidden(tokens: Tensor, P: moe.SoftMoEParams):
    hidden = []

    def experts(s):
        hdn = T.relu(s @ P.w_in + P.b_in)
        hidden.append(hdn.data)
        return hdn @ P.w_out + P.b_out

    logits = moe.softmoe_logits(tokens, P.phi, P.scale)
    y = moe.soft_moe(tokens, logits, P.w_in.shape[0], experts)
    hd = hidden[0]                           # (B, n, p, h)

    def acts():
        B, n, p, h = hd.shape
        return hd.transpose(0, 2, 1, 3).reshape(B * p, n * h)

    return y, acts


def q_forward(net: QNetworkParams, observations, leaves: dict[str, Tensor] | None = None
              ) -> tuple[Tensor, FeatureTaps]:
    """Q-values ``(B, |A|)`` for a batch of ``h×w×c`` observations.

    Supply ``leaves`` (from :meth:`QNetworkParams.leaves`) to differentiate
    with respect to the parameters; otherwise constants are used.
    """
    cfg = net.config
    L = leaves if leaves is not None else net.leaves(requires_grad=False)
    x = T.as_tensor(observations)
    if x.ndim == 3:
        x = T.reshape(x, (1,) + x.shape)
    if tuple(x.shape[1:]) != cfg.obs_shape:
        raise ValueError(f"observation shape {x.shape[1:]} != configured {cfg.obs_shape}")
    B = x.shape[0]
    kind = cfg.expert_variant.kind
    v = cfg.variant

    if kind is ExpertKind.BIG:
        return _big_forward(net, x, L)

    if kind is ExpertKind.ALL:
        def mix(i, h):
            tm = moe.tokenize(h, Tokenization.PER_SAMP)
            y = moe.softmoe_forward(tm, _softmoe_params(L, f"moe_enc.{i}"))
            return check_finite(moe.detokenize(y), f"moe_enc.{i}")
        enc = _conv_stack(x, L, "", cfg.encoder, after=mix)
        pen = T.relu(T.reshape(enc, (B, -1)) @ L["pen.w"] + L["pen.b"])
        check_finite(pen, "pen")
        tok = T.reshape(pen, (B, 1, pen.shape[-1]))
        y, acts = _softmoe_with_hidden(tok, _softmoe_params(L, "moe_pen"))
        feats = T.reshape(y, (B, -1))
        check_finite(feats, "moe_pen")
        q = check_finite(feats @ L["head.w"] + L["head.b"], "head")
        return q, FeatureTaps(enc.data, acts, feats)

    enc = _conv_stack(x, L, "", cfg.encoder)
    routing = None
    if isinstance(v, Baseline):
        pen = check_finite(T.relu(T.reshape(enc, (B, -1)) @ L["pen.w"] + L["pen.b"]), "pen")
        feats, acts = pen, pen.data
    else:
        tm = moe.tokenize(enc, v.tokenization)
        if isinstance(v, SoftMoE):
            y, acts = _softmoe_with_hidden(tm.tokens, _softmoe_params(L, "moe"))
        else:
            P = moe.Top1MoEParams(router=L["moe.router"], w_in=L["moe.w_in"], b_in=L["moe.b_in"],
                                  w_out=L["moe.w_out"], b_out=L["moe.b_out"])
            hidden: list = []
            y, routing = moe.top1_forward(tm.tokens, P, hidden=hidden)
            acts = lambda: _top1_hidden(hidden[0], routing.assignment)
        feats = check_finite(T.reshape(y, (B, -1)), "moe")
    q = check_finite(feats @ L["head.w"] + L["head.b"], "head")
    return q, FeatureTaps(enc.data, acts, feats, routing)


def _top1_hidden(hid: np.ndarray, assignment: np.ndarray) -> np.ndarray:
    # hidden units of experts that did not receive a token count as silent
    B, n, m, h = hid.shape
    mask = np.eye(n)[assignment]                                                 # (B, m, n)
    hid = hid * np.swapaxes(mask, -1, -2)[..., None]
    return hid.transpose(0, 2, 1, 3).reshape(B * m, n * h)


def _big_forward(net: QNetworkParams, x: Tensor, L: dict[str, Tensor]):
    cfg = net.config
    v = cfg.variant
    B = x.shape[0]
    d = int(np.prod(cfg.obs_shape))
    tokens = T.reshape(x, (B, 1, d))
    logits = moe.softmoe_logits(tokens, L["moe.phi"], L.get("moe.scale"))
    hidden, feats = [], []

    def experts(slots):                      # (B, n, p, d) -> (B, n, p, |A|)
        _, n, p, _ = slots.shape
        outs = []
        for e in range(n):
            xe = T.reshape(slots[:, e], (B * p,) + cfg.obs_shape)
            he = _conv_stack(xe, L, f"big.{e}.", cfg.encoder)
            pe = T.relu(T.reshape(he, (B * p, -1)) @ L[f"big.{e}.pen.w"] + L[f"big.{e}.pen.b"])
            hidden.append(pe.data)
            feats.append(pe)
            qe = pe @ L[f"big.{e}.head.w"] + L[f"big.{e}.head.b"]
            outs.append(T.reshape(qe, (B, 1, p, cfg.n_actions)))
        return T.concat(outs, axis=1)

    y = moe.soft_moe(tokens, logits, v.n_experts, experts)          # (B, 1, |A|)
    q = check_finite(T.reshape(y, (B, cfg.n_actions)), "big.combine")
    f = T.concat(feats, axis=1)
    return q, FeatureTaps(x.data, lambda: np.concatenate(hidden, axis=1), f)


# ---------------------------------------------------------------- checkpoints

_MAGIC = b"MOERLCK1"


def save_checkpoint(net: QNetworkParams, path) -> None:
    """Write ``MAGIC | u64 header_len | JSON header | float64 LE payload``.

    The payload is every array of ``net.params`` flattened row-major and
    concatenated in the header's ``arrays`` order.
    """
    header = {
        "config": net.config.to_dict(),
        "config_hash": net.config.config_hash(),
        "seed": net.seed,
        "frozen": sorted(net.frozen),
        "arrays": [[k, list(v.shape)] for k, v in net.params.items()],
    }
    hb = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_name(f"{path.name}.{os.getpid()}.tmp")
    with open(tmp, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(hb)))
        fh.write(hb)
        for v in net.params.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())
    tmp.replace(path)


def load_checkpoint(path) -> QNetworkParams:
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise ValueError("not a checkpoint file")
    (hl,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hl])
    cfg = NetworkConfig.from_dict(header["config"])
    if cfg.config_hash() != header["config_hash"]:
        raise ValueError("checkpoint config hash mismatch")
    off = 16 + hl
    params = {}
    for name, shape in header["arrays"]:
        count = int(np.prod(shape))
        params[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=off).astype(np.float64).reshape(shape)
        off += 8 * count
    if off != len(raw):
        raise ValueError("checkpoint payload size mismatch")
    return QNetworkParams(cfg, params, frozenset(header["frozen"]), int(header["seed"]))
