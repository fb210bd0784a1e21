"""Experiment spec files: parsing, strict validation and grid expansion.

A spec is a JSON object::

    {
      "name": "scaling",
      "env": "catch",
      "mode": "online",                 # or "offline"
      "steps": 30000,                   # env steps (online) / gradient steps (offline)
      "seeds": [0, 1, 2, 3, 4],
      "agent": {...AgentConfig fields...},
      "network": {"base_width": 64, "encoder": [[8, 3, 1], [16, 3, 1]]},
      "diagnostics": {...DiagnosticsConfig fields...},
      "replay_ratios": [0.25],
      "output_dir": "results/scaling",  # optional; --out and MOERL_OUT win
      "configs": [
        {"label": "softmoe-4",
         "variant": {"type": "SoftMoE", "n_experts": 4},
         "expert_variant": {"kind": "Regular", "normalize": false}}
      ],
      "offline": {"source_steps": 6000, "dataset_transitions": 20000,
                  "behavior": {"kind": "network", "epsilon": 0.2},
                  "keep_fractions": [0.05, 0.1, 0.5]}
    }

Unknown keys anywhere are errors.
"""

from __future__ import annotations

import dataclasses
import json
import re
from dataclasses import dataclass
from pathlib import Path

from ..agent import AgentConfig
from ..analysis import DiagnosticsConfig
from ..envs import ENVS, make_env
from ..networks import NetworkConfig, canonical_hash


class SpecError(ValueError):
    """Invalid experiment spec; ``problems`` holds one message per defect."""

    def __init__(self, problems: list[str]):
        super().__init__("\n".join(problems))
        self.problems = problems


TOP_KEYS = {"name", "env", "mode", "steps", "seeds", "agent", "network", "diagnostics",
            "replay_ratios", "configs", "offline", "description", "output_dir"}
NETWORK_KEYS = {"base_width", "encoder"}
CONFIG_KEYS = {"label", "variant", "expert_variant"}
VARIANT_KEYS = {
    "Baseline": {"width_multiplier"},
    "SoftMoE": {"n_experts", "slots_per_expert", "tokenization", "l2_normalize",
                "frozen_random_phi", "divide_expert_dim"},
    "Top1MoE": {"n_experts", "tokenization", "divide_expert_dim", "load_balance_coef"},
}
EXPERT_VARIANT_KEYS = {"kind", "normalize"}
OFFLINE_KEYS = {"source_steps", "dataset_transitions", "behavior", "keep_fractions"}
AGENT_KEYS = {f.name for f in dataclasses.fields(AgentConfig)}
DIAG_KEYS = {f.name for f in dataclasses.fields(DiagnosticsConfig)}


@dataclass(frozen=True)
class Cell:
    """One fully determined run of a grid."""

    label: str
    env: str
    mode: str
    steps: int
    seed: int
    agent: AgentConfig
    network: NetworkConfig
    diagnostics: DiagnosticsConfig
    replay_ratio: float
    keep_fraction: float | None = None
    offline: dict | None = None

    @property
    def group(self) -> str:
        if self.mode == "offline":
            return f"{self.label}__keep{self.keep_fraction:g}"
        return f"{self.label}__rr{self.replay_ratio:g}"

    def semantic(self) -> dict:
        """Everything that determines the run except the seed."""
        d = {
            "env": self.env, "mode": self.mode, "steps": self.steps,
            "agent": self.agent.to_dict(), "network": self.network.to_dict(),
            "diagnostics": dataclasses.asdict(self.diagnostics),
        }
        if self.mode == "offline":
            d["offline"] = dict(self.offline or {}, keep_fraction=self.keep_fraction)
        return d

    def config_hash(self) -> str:
        return canonical_hash(self.semantic())


@dataclass(frozen=True)
class ExperimentSpec:
    name: str
    raw: dict
    cells: tuple[Cell, ...]
    output_dir: str | None = None

    @property
    def groups(self) -> list[str]:
        seen: dict[str, None] = {}
        for c in self.cells:
            seen.setdefault(c.group, None)
        return list(seen)


def _line_of(text: str, key: str) -> int | None:
    m = re.search(r'"' + re.escape(key) + r'"\s*:', text)
    return text.count("\n", 0, m.start()) + 1 if m else None


def _where(text: str, path: str, key: str) -> str:
    line = _line_of(text, key) if text else None
    return f"{path} (line {line})" if line else path


def _check_keys(problems, text, obj, allowed, path):
    if not isinstance(obj, dict):
        problems.append(f"{path}: expected an object")
        return False
    unknown = [k for k in obj if k not in allowed]
    for k in unknown:
        problems.append(f"{_where(text, path + '.' + k, k)}: unknown key {k!r}")
    return not unknown


def parse_spec(source, *, seeds=None, steps=None) -> ExperimentSpec:
    """Parse and validate a spec from a path, JSON text or dict.

    ``seeds`` and ``steps`` override the file's values (CLI flags).
    """
    text = ""
    if isinstance(source, dict):
        raw = source
    else:
        p = Path(source)
        text = p.read_text() if p.exists() else str(source)
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise SpecError([f"line {exc.lineno}, column {exc.colno}: {exc.msg}"]) from None
    problems: list[str] = []
    _check_keys(problems, text, raw, TOP_KEYS, "$")
    if not isinstance(raw, dict):
        raise SpecError(problems)
    raw = dict(raw)
    if seeds is not None:
        raw["seeds"] = list(seeds)
    if steps is not None:
        raw["steps"] = int(steps)

    for req in ("name", "env", "steps", "configs"):
        if req not in raw:
            problems.append(f"$: missing required key {req!r}")
    env = raw.get("env", "catch")
    if env not in ENVS:
        problems.append(f"{_where(text, '$.env', 'env')}: unknown environment {env!r}")
    mode = raw.get("mode", "online")
    if mode not in ("online", "offline"):
        problems.append(f"{_where(text, '$.mode', 'mode')}: mode must be 'online' or 'offline'")
    seeds_v = raw.get("seeds", [0, 1, 2, 3, 4])
    if not (isinstance(seeds_v, list) and seeds_v and all(isinstance(s, int) for s in seeds_v)):
        problems.append(f"{_where(text, '$.seeds', 'seeds')}: seeds must be a non-empty list of ints")
        seeds_v = []
    if not isinstance(raw.get("steps", 1), int) or raw.get("steps", 1) < 1:
        problems.append(f"{_where(text, '$.steps', 'steps')}: steps must be a positive int")

    out_dir = raw.get("output_dir")
    if out_dir is not None and not isinstance(out_dir, str):
        problems.append(f"{_where(text, '$.output_dir', 'output_dir')}: expected a string")

    agent_d = raw.get("agent", {})
    agent = None
    if _check_keys(problems, text, agent_d, AGENT_KEYS, "$.agent"):
        try:
            agent = AgentConfig(**agent_d)
        except (TypeError, ValueError) as exc:
            problems.append(f"{_where(text, '$.agent', 'agent')}: {exc}")
    diag_d = raw.get("diagnostics", {})
    diag = None
    if _check_keys(problems, text, diag_d, DIAG_KEYS, "$.diagnostics"):
        try:
            diag = DiagnosticsConfig(**diag_d)
        except (TypeError, ValueError) as exc:
            problems.append(f"{_where(text, '$.diagnostics', 'diagnostics')}: {exc}")
    if (agent is not None and mode == "online" and isinstance(raw.get("steps"), int)
            and raw["steps"] <= agent.min_replay_history):
        problems.append(f"{_where(text, '$.steps', 'steps')}: online steps ({raw['steps']}) must exceed "
                        f"agent.min_replay_history ({agent.min_replay_history})")
    net_d = raw.get("network", {})
    if not _check_keys(problems, text, net_d, NETWORK_KEYS, "$.network"):
        net_d = {}

    rrs = raw.get("replay_ratios", [agent.replay_ratio if agent else 0.25])
    if not (isinstance(rrs, list) and rrs and all(isinstance(r, (int, float)) and r > 0 for r in rrs)):
        problems.append(f"{_where(text, '$.replay_ratios', 'replay_ratios')}: need a list of positive numbers")
        rrs = []

    offline = raw.get("offline")
    keeps: list = [None]
    if mode == "offline":
        if offline is None:
            problems.append("$: offline mode needs an 'offline' section")
        elif _check_keys(problems, text, offline, OFFLINE_KEYS, "$.offline"):
            keeps = offline.get("keep_fractions", [1.0])
            if not (isinstance(keeps, list) and keeps
                    and all(isinstance(k, (int, float)) and 0 < k <= 1 for k in keeps)):
                problems.append(f"{_where(text, '$.offline.keep_fractions', 'keep_fractions')}: "
                                "need a list of fractions in (0, 1]")
                keeps = [None]
            for key in ("source_steps", "dataset_transitions"):
                v = offline.get(key)
                if not isinstance(v, int) or v < 1:
                    problems.append(f"{_where(text, '$.offline.' + key, key)}: need a positive int")
            beh = offline.get("behavior", {"kind": "network", "epsilon": 0.2})
            if not (isinstance(beh, dict) and beh.get("kind") in ("random", "scripted", "network")
                    and set(beh) <= {"kind", "epsilon"}):
                problems.append(f"{_where(text, '$.offline.behavior', 'behavior')}: expected "
                                "{kind: random|scripted|network, epsilon}")
            elif (beh["kind"] == "network" and agent is not None
                  and isinstance(offline.get("source_steps"), int)
                  and offline["source_steps"] <= agent.min_replay_history):
                problems.append(f"{_where(text, '$.offline.source_steps', 'source_steps')}: must exceed "
                                "agent.min_replay_history")

    try:
        probe_env = make_env(env) if env in ENVS else None
    except ValueError:
        probe_env = None
    configs = raw.get("configs", [])
    net_cfgs = []
    labels = set()
    if not isinstance(configs, list) or not configs:
        problems.append(f"{_where(text, '$.configs', 'configs')}: need a non-empty list")
        configs = []
    for i, c in enumerate(configs):
        path = f"$.configs[{i}]"
        if not _check_keys(problems, text, c, CONFIG_KEYS, path):
            continue
        label = c.get("label")
        if not isinstance(label, str) or not re.fullmatch(r"[A-Za-z0-9_.+-]+", label or ""):
            problems.append(f"{path}.label: need a filesystem-safe string label")
            continue
        if label in labels:
            problems.append(f"{path}.label: duplicate label {label!r}")
        labels.add(label)
        vd = c.get("variant", {"type": "Baseline"})
        vt = vd.get("type") if isinstance(vd, dict) else None
        if vt not in VARIANT_KEYS:
            problems.append(f"{path}.variant.type: expected one of {sorted(VARIANT_KEYS)}")
            continue
        ev = c.get("expert_variant", {})
        clean = _check_keys(problems, text, vd, VARIANT_KEYS[vt] | {"type"}, path + ".variant")
        if not (_check_keys(problems, text, ev, EXPERT_VARIANT_KEYS, path + ".expert_variant") and clean):
            continue
        try:
            nd = {"variant": vd, "expert_variant": ev, **(net_d if isinstance(net_d, dict) else {})}
            if probe_env is not None:
                nd["obs_shape"] = list(probe_env.obs_shape)
                nd["n_actions"] = probe_env.n_actions
            net_cfgs.append((label, NetworkConfig.from_dict(nd)))
        except (TypeError, ValueError) as exc:
            problems.append(f"{path}: {exc}")

    if problems:
        raise SpecError(problems)

    if mode == "offline":
        beh = dict(offline.get("behavior", {"kind": "network", "epsilon": 0.2}))
        beh["epsilon"] = float(beh.get("epsilon", 0.0))
        offline = {"source_steps": offline["source_steps"],
                   "dataset_transitions": offline["dataset_transitions"], "behavior": beh}
    cells = []
    for label, ncfg in net_cfgs:
        for rr in rrs:
            a = dataclasses.replace(agent, replay_ratio=float(rr))
            for keep in keeps:
                for seed in seeds_v:
                    cells.append(Cell(label=label, env=env, mode=mode, steps=int(raw["steps"]),
                                      seed=int(seed), agent=a, network=ncfg, diagnostics=diag,
                                      replay_ratio=float(rr),
                                      keep_fraction=None if keep is None else float(keep),
                                      offline=offline if mode == "offline" else None))
    return ExperimentSpec(name=str(raw["name"]), raw=raw, cells=tuple(cells), output_dir=out_dir)
