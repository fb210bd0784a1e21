"""Logged transition datasets for offline training.

File layout (all little-endian)::

    b"MOERLDS1"                 8-byte magic
    u64                         header length N
    N bytes                     UTF-8 JSON header (env id, policy spec, seed,
                                count, obs_shape, keep_fraction, source_count)
    count records, each:
        f32[h*w*c]  obs         row-major h×w×c
        i32         action
        f64         reward
        f32[h*w*c]  next_obs
        u8          done
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..replay import Batch
from .base import PixelEnv

_MAGIC = b"MOERLDS1"
KEEP_FRACTIONS = (0.05, 0.10, 0.50, 1.0)


@dataclass(frozen=True)
class OfflineDataset:
    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_obs: np.ndarray
    dones: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.actions) == 0:
            raise ValueError("offline dataset must be non-empty")
        for a in (self.obs, self.actions, self.rewards, self.next_obs, self.dones):
            a.setflags(write=False)

    def __len__(self) -> int:
        return len(self.actions)

    @property
    def obs_shape(self) -> tuple[int, ...]:
        return tuple(self.obs.shape[1:])

    def batch(self, idx: np.ndarray) -> Batch:
        return Batch(self.obs[idx].astype(np.float64), self.actions[idx].astype(np.int64),
                     self.rewards[idx].astype(np.float64), self.next_obs[idx].astype(np.float64),
                     self.dones[idx].astype(np.float64))

    def subsample(self, keep_fraction: float, seed: int) -> "OfflineDataset":
        """Uniformly keep ``round(keep_fraction * len)`` transitions, order preserved."""
        if not 0.0 < keep_fraction <= 1.0:
            raise ValueError("keep_fraction must lie in (0, 1]")
        n = len(self)
        k = max(1, int(round(keep_fraction * n)))
        if k == n:
            idx = np.arange(n)
        else:
            idx = np.sort(np.random.default_rng(seed).choice(n, size=k, replace=False))
        prov = dict(self.provenance, keep_fraction=keep_fraction, source_count=n, subsample_seed=seed)
        return OfflineDataset(self.obs[idx], self.actions[idx], self.rewards[idx],
                              self.next_obs[idx], self.dones[idx], prov)


def _policy(env: PixelEnv, spec: dict, network, rng: np.random.Generator):
    kind = spec.get("kind", "random")
    eps = float(spec.get("epsilon", 0.0))
    if kind == "random":
        return lambda obs: int(rng.integers(env.n_actions))
    if kind == "scripted":
        greedy = lambda obs: env.optimal_action()
    elif kind == "network":
        if network is None:
            raise ValueError("network behaviour policy needs a network")
        from ..agent import greedy_action
        greedy = lambda obs: greedy_action(network, obs)
    else:
        raise ValueError(f"unknown behaviour policy kind {kind!r}")

    def act(obs):
        if rng.random() < eps:
            return int(rng.integers(env.n_actions))
        return greedy(obs)

    return act


def generate_offline_dataset(env: PixelEnv, behavior_policy_spec: dict, n_transitions: int,
                             seed: int, keep_fraction: float = 1.0, network=None) -> OfflineDataset:
    """Log ``n_transitions`` from a behaviour policy, then keep a uniform fraction.

    ``behavior_policy_spec`` is ``{"kind": "random"}``, ``{"kind": "scripted",
    "epsilon": e}`` (the environment's optimal action, ε-greedy) or
    ``{"kind": "network", "epsilon": e}`` with ``network`` a QNetworkParams.
    """
    if n_transitions < 1:
        raise ValueError("n_transitions must be >= 1")
    ss = np.random.SeedSequence(seed)
    env_seed, pol_seed, sub_seed = (int(s.generate_state(1)[0]) for s in ss.spawn(3))
    rng = np.random.default_rng(pol_seed)
    act = _policy(env, behavior_policy_spec, network, rng)
    shape = env.obs_shape
    obs_buf = np.zeros((n_transitions, *shape), dtype=np.float32)
    next_buf = np.zeros_like(obs_buf)
    actions = np.zeros(n_transitions, dtype=np.int64)
    rewards = np.zeros(n_transitions)
    dones = np.zeros(n_transitions)
    obs = env.reset(seed=env_seed)
    for i in range(n_transitions):
        a = act(obs)
        nxt, r, done = env.step(a)
        obs_buf[i], next_buf[i], actions[i], rewards[i], dones[i] = obs, nxt, a, r, float(done)
        obs = env.reset() if done else nxt
    spec = {k: v for k, v in behavior_policy_spec.items()}
    if network is not None:
        spec["network_hash"] = network.config.config_hash()
    prov = {"env_id": env.env_id, "policy": spec, "seed": int(seed), "count": n_transitions}
    ds = OfflineDataset(obs_buf, actions, rewards, next_buf, dones, prov)
    if keep_fraction < 1.0:
        ds = ds.subsample(keep_fraction, sub_seed)
    return ds


def save_dataset(ds: OfflineDataset, path) -> None:
    header = dict(ds.provenance, count=len(ds), obs_shape=list(ds.obs_shape))
    hb = json.dumps(header, sort_keys=True).encode()
    rec = np.dtype([("obs", "<f4", ds.obs_shape), ("action", "<i4"), ("reward", "<f8"),
                    ("next_obs", "<f4", ds.obs_shape), ("done", "u1")])
    arr = np.zeros(len(ds), dtype=rec)
    arr["obs"], arr["action"], arr["reward"] = ds.obs, ds.actions, ds.rewards
    arr["next_obs"], arr["done"] = ds.next_obs, ds.dones
    path = Path(path)
    tmp = path.with_name(f"{path.name}.{os.getpid()}.tmp")
    with open(tmp, "wb") as fh:
        fh.write(_MAGIC + struct.pack("<Q", len(hb)) + hb + arr.tobytes())
    tmp.replace(path)


def load_dataset(path) -> OfflineDataset:
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise ValueError("not an offline dataset file")
    (hl,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hl])
    shape = tuple(header["obs_shape"])
    rec = np.dtype([("obs", "<f4", shape), ("action", "<i4"), ("reward", "<f8"),
                    ("next_obs", "<f4", shape), ("done", "u1")])
    arr = np.frombuffer(raw, dtype=rec, offset=16 + hl)
    if len(arr) != header["count"]:
        raise ValueError("dataset record count does not match header")
    prov = {k: v for k, v in header.items() if k not in ("obs_shape",)}
    return OfflineDataset(arr["obs"].copy(), arr["action"].astype(np.int64), arr["reward"].copy(),
                          arr["next_obs"].copy(), arr["done"].astype(np.float64), prov)
