"""DQN-style online learner, replay-ratio scheduling and offline CQL training."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable

import numpy as np

from . import tensor as T
from .analysis import DiagnosticsConfig, HealthRecord, probe
from .envs import PixelEnv, make_env
from .envs.offline import OfflineDataset
from .networks import NetworkConfig, QNetworkParams, build_network, q_forward
from .optim import Adam
from .replay import Batch, ReplayBuffer
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AgentConfig:
    gamma: float = 0.99
    learning_rate: float = 1e-3
    adam_eps: float = 1.5e-4
    batch_size: int = 32
    min_replay_history: int = 1000
    replay_capacity: int = 50_000
    target_update_period: int = 125      # updates between syncs (500 env steps at RR 0.25)
    epsilon_start: float = 1.0
    epsilon_end: float = 0.01
    epsilon_decay_steps: int = 5000      # env steps after warm-up
    replay_ratio: float = 0.25
    update_horizon: int = 1
    double_dqn: bool = False
    cql_alpha: float = 0.0
    eval_interval: int = 1000            # env steps (online) or gradient steps (offline)
    eval_episodes: int = 10
    eval_epsilon: float = 0.001

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if self.replay_ratio <= 0:
            raise ValueError("replay_ratio must be positive")
        if self.cql_alpha < 0:
            raise ValueError("cql_alpha must be >= 0")
        if self.update_horizon != 1:
            raise ValueError("only one-step returns are supported")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


PAPER_DQN = AgentConfig(learning_rate=6.25e-5, min_replay_history=20_000,
                        replay_capacity=1_000_000, target_update_period=2000,
                        epsilon_decay_steps=250_000)


# ---------------------------------------------------------------- losses


def td_targets(batch: Batch, target: QNetworkParams, cfg: AgentConfig,
               online: QNetworkParams | None = None) -> np.ndarray:
    """One-step bootstrapped targets, computed without gradient."""
    with T.no_grad():
        q_next = q_forward(target, batch.next_obs)[0].data
        if cfg.double_dqn:
            if online is None:
                raise ValueError("double DQN targets need the online network")
            a_star = np.argmax(q_forward(online, batch.next_obs)[0].data, axis=1)
            bootstrap = q_next[np.arange(len(batch)), a_star]
        else:
            bootstrap = q_next.max(axis=1)
    return batch.rewards + cfg.gamma * (1.0 - batch.dones) * bootstrap


def _taken(q: Tensor, actions: np.ndarray) -> Tensor:
    return q[np.arange(len(actions)), np.asarray(actions)]


def huber_td(q: Tensor, actions: np.ndarray, targets: np.ndarray) -> Tensor:
    return T.mean(T.huber(_taken(q, actions) - Tensor(targets), 1.0))


def cql_regularizer(q: Tensor, actions: np.ndarray) -> Tensor:
    return T.mean(T.logsumexp(q, axis=1) - _taken(q, actions))


def dqn_loss(net: QNetworkParams, batch: Batch, targets: np.ndarray,
             leaves: dict[str, Tensor] | None = None) -> Tensor:
    q, _ = q_forward(net, batch.obs, leaves)
    return huber_td(q, batch.actions, targets)


def cql_loss(net: QNetworkParams, batch: Batch, targets: np.ndarray, alpha: float,
             leaves: dict[str, Tensor] | None = None) -> Tensor:
    """Huber TD loss plus ``alpha`` times the mean of logsumexp_a Q - Q(x, a_data)."""
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    q, _ = q_forward(net, batch.obs, leaves)
    return huber_td(q, batch.actions, targets) + alpha * cql_regularizer(q, batch.actions)


# ---------------------------------------------------------------- scheduling


class UpdateSchedule:
    """Exact replay-ratio accounting.

    After warm-up each environment step adds ``replay_ratio`` to an
    accumulator held as a Fraction; one update is owed per whole unit.
    Cumulative updates after S steps are floor((S - min_history) * ratio).
    """

    def __init__(self, replay_ratio: float, min_replay_history: int):
        self.ratio = Fraction(replay_ratio).limit_denominator(10**6)
        self.min_history = min_replay_history
        self.acc = Fraction(0)
        self.env_steps = 0
        self.updates = 0

    def on_env_step(self) -> int:
        self.env_steps += 1
        if self.env_steps <= self.min_history:
            return 0
        self.acc += self.ratio
        owed = math.floor(self.acc)
        self.acc -= owed
        self.updates += owed
        return owed

    @staticmethod
    def expected(steps: int, replay_ratio: float, min_replay_history: int) -> int:
        r = Fraction(replay_ratio).limit_denominator(10**6)
        return max(0, math.floor((steps - min_replay_history) * r))


def epsilon_at(step: int, cfg: AgentConfig) -> float:
    """1.0 through warm-up, then linear decay to ``epsilon_end``."""
    if step < cfg.min_replay_history:
        return cfg.epsilon_start
    frac = min(1.0, (step - cfg.min_replay_history) / max(1, cfg.epsilon_decay_steps))
    return cfg.epsilon_start + frac * (cfg.epsilon_end - cfg.epsilon_start)


def greedy_action(net: QNetworkParams, obs: np.ndarray) -> int:
    with T.no_grad():
        q, _ = q_forward(net, obs[None])
    return int(np.argmax(q.data[0]))


# ---------------------------------------------------------------- learner


class Learner:
    """Online network, target network and optimizer for one run."""

    def __init__(self, net: QNetworkParams, cfg: AgentConfig):
        self.cfg = cfg
        self.online = net
        self.target = net.copy()
        self.opt = Adam(lr=cfg.learning_rate, eps=cfg.adam_eps)
        self.updates = 0
        self.syncs = 0

    def loss(self, batch: Batch, leaves: dict[str, Tensor]) -> Tensor:
        targets = td_targets(batch, self.target, self.cfg, self.online)
        q, taps = q_forward(self.online, batch.obs, leaves)
        loss = huber_td(q, batch.actions, targets)
        if self.cfg.cql_alpha > 0:
            loss = loss + self.cfg.cql_alpha * cql_regularizer(q, batch.actions)
        coef = getattr(self.online.config.variant, "load_balance_coef", 0.0)
        if coef > 0 and taps.routing is not None:
            from .moe import load_balancing_loss
            loss = loss + coef * load_balancing_loss(taps.routing)
        return loss

    def update(self, batch: Batch) -> float:
        leaves = self.online.leaves()
        loss = self.loss(batch, leaves)
        value = loss.item()
        if not math.isfinite(value):
            raise FloatingPointError(f"non-finite loss at update {self.updates}")
        grads = T.backward(loss)
        named = {k: grads[t] for k, t in leaves.items() if t in grads}
        self.opt.step(self.online.params, named)
        self.updates += 1
        if self.updates % self.cfg.target_update_period == 0:
            self.sync_target()
        return value

    def sync_target(self) -> None:
        for k, v in self.online.params.items():
            np.copyto(self.target.params[k], v)
        self.syncs += 1


# ---------------------------------------------------------------- metrics


CSV_FIELDS = ("step", "episodes", "mean_return", "loss", "dormant_frac_penult",
              "entk_rank", "feature_norm", "updates_done")


@dataclass
class MetricRecord:
    step: int
    episodes: int
    mean_return: float
    loss: float
    dormant_frac_penult: float
    entk_rank: float
    feature_norm: float
    updates_done: int

    def row(self) -> list[str]:
        return [_fmt(getattr(self, f)) for f in CSV_FIELDS]


def _fmt(v) -> str:
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


@dataclass
class MetricStream:
    records: list[MetricRecord] = field(default_factory=list)
    health: list[HealthRecord] = field(default_factory=list)
    aborted: str | None = None
    updates_done: int = 0
    env_steps: int = 0
    network: QNetworkParams | None = None

    @property
    def final_return(self) -> float:
        return self.records[-1].mean_return if self.records else float("nan")


def evaluate(net: QNetworkParams, env: PixelEnv, episodes: int, epsilon: float,
             rng: np.random.Generator) -> float:
    total = 0.0
    for _ in range(episodes):
        obs = env.reset()
        done = False
        while not done:
            if rng.random() < epsilon:
                a = int(rng.integers(env.n_actions))
            else:
                a = greedy_action(net, obs)
            obs, r, done = env.step(a)
            total += r
    return total / episodes


def _seeds(seed: int, n: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(int(seed)).spawn(n)]


class _Tracker:
    def __init__(self, net_fn, diag: DiagnosticsConfig, probe_rng, sample_fn):
        self.net_fn = net_fn
        self.diag = diag
        self.rng = probe_rng
        self.sample = sample_fn
        self.latest: HealthRecord | None = None
        self.losses: list[float] = []
        self.health: list[HealthRecord] = []

    def maybe_probe(self, updates: int, step: int):
        if self.diag.probe_interval > 0 and updates > 0 and updates % self.diag.probe_interval == 0:
            batch = self.sample(self.diag.probe_batch_size, self.rng)
            self.latest = probe(self.net_fn(), batch, self.diag, step)
            self.health.append(self.latest)

    def record(self, step, episodes, mean_return, updates) -> MetricRecord:
        h = self.latest
        loss = float(np.mean(self.losses)) if self.losses else float("nan")
        self.losses = []
        return MetricRecord(
            step=step, episodes=episodes, mean_return=float(mean_return), loss=loss,
            dormant_frac_penult=h.dormant_fraction["penultimate"] if h else float("nan"),
            entk_rank=float(h.entk_effective_rank) if h else float("nan"),
            feature_norm=h.feature_norm if h else float("nan"),
            updates_done=updates)


def train_online(env: PixelEnv | str, net_config: NetworkConfig, agent_cfg: AgentConfig,
                 steps: int, seed: int, diagnostics: DiagnosticsConfig | None = None,
                 stop_at_return: float | None = None,
                 on_step: Callable[[int, int], None] | None = None) -> MetricStream:
    """ε-greedy online DQN for ``steps`` environment steps.

    ``stop_at_return`` ends the run at the first evaluation reaching it;
    ``on_step(step, updates_done)`` is called after every environment step.
    """
    cfg = agent_cfg
    if steps <= cfg.min_replay_history:
        raise ValueError("steps must exceed min_replay_history")
    env_id = env if isinstance(env, str) else env.env_id
    s_net, s_env, s_act, s_eval, s_probe = _seeds(seed, 5)
    env = make_env(env_id, s_env) if isinstance(env, str) else env
    eval_env = make_env(env_id, s_eval)
    net_config = _with_env_shape(net_config, env)
    learner = Learner(build_network(net_config, s_net), cfg)
    buffer = ReplayBuffer(cfg.replay_capacity, env.obs_shape, env.n_actions, cfg.min_replay_history)
    rng = np.random.default_rng(s_act)
    eval_rng = np.random.default_rng(s_eval)
    schedule = UpdateSchedule(cfg.replay_ratio, cfg.min_replay_history)
    tracker = _Tracker(lambda: learner.online, diagnostics or DiagnosticsConfig(),
                       np.random.default_rng(s_probe), buffer.sample)
    stream = MetricStream(health=tracker.health)

    obs = env.reset(seed=s_env)
    episodes = 0
    for step in range(1, steps + 1):
        if rng.random() < epsilon_at(step - 1, cfg):
            a = int(rng.integers(env.n_actions))
        else:
            a = greedy_action(learner.online, obs)
        nxt, r, done = env.step(a)
        buffer.add(obs, a, r, nxt, done)
        if done:
            episodes += 1
            obs = env.reset()
        else:
            obs = nxt
        for _ in range(schedule.on_env_step()):
            try:
                tracker.losses.append(learner.update(buffer.sample(cfg.batch_size, rng)))
            except FloatingPointError as exc:
                stream.aborted = str(exc)
                stream.records.append(tracker.record(step, episodes, float("nan"), learner.updates))
                stream.updates_done, stream.env_steps = learner.updates, step
                log.warning("run aborted: %s", exc)
                return stream
            tracker.maybe_probe(learner.updates, step)
        if on_step is not None:
            on_step(step, learner.updates)
        if step % cfg.eval_interval == 0 or step == steps:
            ret = evaluate(learner.online, eval_env, cfg.eval_episodes, cfg.eval_epsilon, eval_rng)
            stream.records.append(tracker.record(step, episodes, ret, learner.updates))
            if stop_at_return is not None and ret >= stop_at_return:
                break
    stream.updates_done, stream.env_steps = learner.updates, step
    stream.network = learner.online
    return stream


def train_offline(dataset: OfflineDataset, net_config: NetworkConfig, agent_cfg: AgentConfig,
                  gradient_steps: int, seed: int, eval_env: PixelEnv | str | None = None,
                  diagnostics: DiagnosticsConfig | None = None,
                  on_update: Callable[[int, Batch, float], None] | None = None) -> MetricStream:
    """Uniform-minibatch CQL on a fixed dataset; evaluation never feeds training."""
    cfg = agent_cfg
    s_net, s_sample, s_eval, s_probe = _seeds(seed, 4)
    env_id = dataset.provenance.get("env_id", "catch")
    if eval_env is None or isinstance(eval_env, str):
        eval_env = make_env(eval_env or env_id, s_eval)
    net_config = _with_env_shape(net_config, eval_env)
    learner = Learner(build_network(net_config, s_net), cfg)
    rng = np.random.default_rng(s_sample)
    eval_rng = np.random.default_rng(s_eval)

    def sample(n, r):
        return dataset.batch(r.integers(0, len(dataset), size=n))

    tracker = _Tracker(lambda: learner.online, diagnostics or DiagnosticsConfig(),
                       np.random.default_rng(s_probe), sample)
    stream = MetricStream(health=tracker.health)
    for step in range(1, gradient_steps + 1):
        batch = sample(cfg.batch_size, rng)
        try:
            loss = learner.update(batch)
        except FloatingPointError as exc:
            stream.aborted = str(exc)
            stream.records.append(tracker.record(step, 0, float("nan"), learner.updates))
            stream.updates_done = learner.updates
            return stream
        tracker.losses.append(loss)
        if on_update is not None:
            on_update(step, batch, loss)
        tracker.maybe_probe(learner.updates, step)
        if step % cfg.eval_interval == 0 or step == gradient_steps:
            ret = evaluate(learner.online, eval_env, cfg.eval_episodes, cfg.eval_epsilon, eval_rng)
            stream.records.append(tracker.record(step, 0, ret, learner.updates))
    stream.updates_done = learner.updates
    stream.network = learner.online
    return stream


def _with_env_shape(cfg: NetworkConfig, env: PixelEnv) -> NetworkConfig:
    if cfg.obs_shape == tuple(env.obs_shape) and cfg.n_actions == env.n_actions:
        return cfg
    return dataclasses.replace(cfg, obs_shape=tuple(env.obs_shape), n_actions=env.n_actions)
