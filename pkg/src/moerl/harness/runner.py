"""Grid execution with per-cell result files.

Each cell writes into ``<out>/<group>/seed<seed>/``:

``metrics.csv``
    one row per evaluation interval (deterministic given the seed);
``result.json``
    config hash, semantic config, param count, returns, health records and
    status. Written last, so its presence marks a finished cell;
``timing.json``
    wall-clock figures, kept apart so the other files stay reproducible;
``network.ckpt``
    final online network.

Offline cells share logged datasets cached under ``<out>/_datasets``.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import os
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from ..agent import CSV_FIELDS, AgentConfig, MetricStream, train_offline, train_online
from ..envs import make_env
from ..envs.offline import OfflineDataset, generate_offline_dataset, load_dataset, save_dataset
from ..networks import Baseline, NetworkConfig, canonical_hash, param_count, save_checkpoint
from .spec import Cell, ExperimentSpec

log = logging.getLogger(__name__)

RESULT_FILE = "result.json"
METRICS_FILE = "metrics.csv"
TIMING_FILE = "timing.json"
CHECKPOINT_FILE = "network.ckpt"


def atomic_write(path: Path, data: bytes | str) -> None:
    path = Path(path)
    tmp = path.with_name(f"{path.name}.{os.getpid()}.tmp")
    mode = "wb" if isinstance(data, bytes) else "w"
    with open(tmp, mode, **({} if isinstance(data, bytes) else {"newline": ""})) as fh:
        fh.write(data)
    tmp.replace(path)


def dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n"


def _nan_to_none(v):
    return None if isinstance(v, float) and v != v else v


def cell_dir(out: Path, cell: Cell) -> Path:
    return Path(out) / cell.group / f"seed{cell.seed}"


def metrics_csv(stream: MetricStream) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for r in stream.records:
        w.writerow(r.row())
    return buf.getvalue()


def is_complete(out: Path, cell: Cell) -> bool:
    """True when the cell has a result file carrying the same config hash."""
    p = cell_dir(out, cell) / RESULT_FILE
    if not p.exists():
        return False
    try:
        res = json.loads(p.read_text())
    except (OSError, json.JSONDecodeError):
        return False
    return res.get("config_hash") == cell.config_hash() and res.get("status") in ("ok", "diverged")


def n_experts_of(cfg: NetworkConfig) -> int | None:
    return None if isinstance(cfg.variant, Baseline) else cfg.variant.n_experts


# ---------------------------------------------------------------- datasets


def _source_cell(cell: Cell) -> dict:
    off = cell.offline
    agent = dataclasses.replace(cell.agent, cql_alpha=0.0, replay_ratio=0.25)
    net = dataclasses.replace(cell.network, variant=Baseline(),
                              expert_variant=type(cell.network.expert_variant)())
    return {"env": cell.env, "seed": cell.seed, "source_steps": off["source_steps"],
            "dataset_transitions": off["dataset_transitions"], "behavior": off["behavior"],
            "agent": agent.to_dict(), "network": net.to_dict()}


def dataset_path(out: Path, cell: Cell) -> Path:
    key = _source_cell(cell)
    return Path(out) / "_datasets" / f"{canonical_hash(key)}.bin"


def build_dataset(out: Path, cell: Cell) -> Path:
    """Log (or reuse) the full dataset an offline cell subsamples from."""
    path = dataset_path(out, cell)
    if path.exists():
        return path
    path.parent.mkdir(parents=True, exist_ok=True)
    src = _source_cell(cell)
    network = None
    if src["behavior"]["kind"] == "network":
        stream = train_online(cell.env, NetworkConfig.from_dict(src["network"]),
                              AgentConfig(**src["agent"]), src["source_steps"], cell.seed,
                              diagnostics=dataclasses.replace(cell.diagnostics, probe_interval=0))
        if stream.aborted:
            raise FloatingPointError(f"source agent diverged: {stream.aborted}")
        network = stream.network
    env = make_env(cell.env)
    ds = generate_offline_dataset(env, src["behavior"], src["dataset_transitions"], cell.seed,
                                  network=network)
    save_dataset(ds, path)
    return path


def _cell_dataset(out: Path, cell: Cell) -> OfflineDataset:
    ds = load_dataset(build_dataset(out, cell))
    sub_seed = int(np.random.SeedSequence([cell.seed, 7]).generate_state(1)[0])
    return ds.subsample(cell.keep_fraction, sub_seed)


# ---------------------------------------------------------------- cells


def run_cell(cell: Cell, out: Path, force: bool = False) -> dict:
    """Run one cell unless a matching result exists. Returns a status summary."""
    out = Path(out)
    d = cell_dir(out, cell)
    if not force and is_complete(out, cell):
        return {"group": cell.group, "seed": cell.seed, "status": "skipped"}
    d.mkdir(parents=True, exist_ok=True)
    for stale in d.glob("*.tmp"):
        stale.unlink(missing_ok=True)
    t0 = time.perf_counter()
    base = {
        "label": cell.label, "group": cell.group, "seed": cell.seed,
        "config_hash": cell.config_hash(), "config": cell.semantic(),
        "param_count": param_count(cell.network), "n_experts": n_experts_of(cell.network),
        "variant": type(cell.network.variant).__name__,
        "width_multiplier": getattr(cell.network.variant, "width_multiplier", None),
        "replay_ratio": cell.replay_ratio, "keep_fraction": cell.keep_fraction,
    }
    try:
        if cell.mode == "online":
            stream = train_online(cell.env, cell.network, cell.agent, cell.steps, cell.seed,
                                  diagnostics=cell.diagnostics)
        else:
            ds = _cell_dataset(out, cell)
            base["dataset_size"] = len(ds)
            stream = train_offline(ds, cell.network, cell.agent, cell.steps, cell.seed,
                                   eval_env=cell.env, diagnostics=cell.diagnostics)
    except Exception as exc:  # recorded per cell; the grid carries on
        log.error("cell %s seed %d failed: %s", cell.group, cell.seed, exc)
        res = dict(base, status="error", error=f"{type(exc).__name__}: {exc}",
                   traceback=traceback.format_exc(), final_return=None, returns=[], health=[])
        atomic_write(d / RESULT_FILE, dump_json(res))
        return {"group": cell.group, "seed": cell.seed, "status": "error"}
    atomic_write(d / METRICS_FILE, metrics_csv(stream))
    if stream.network is not None:
        save_checkpoint(stream.network, d / CHECKPOINT_FILE)
    res = dict(
        base,
        status="diverged" if stream.aborted else "ok",
        error=stream.aborted,
        final_return=_nan_to_none(stream.final_return),
        returns=[[r.step, _nan_to_none(r.mean_return)] for r in stream.records],
        health=[{"step": h.step, "dormant_fraction": h.dormant_fraction,
                 "entk_effective_rank": h.entk_effective_rank,
                 "feature_norm": _nan_to_none(h.feature_norm)}
                for h in stream.health],
        updates_done=stream.updates_done, env_steps=stream.env_steps,
    )
    atomic_write(d / TIMING_FILE, dump_json({"wall_clock_seconds": time.perf_counter() - t0,
                                             "finished_unix": time.time()}))
    atomic_write(d / RESULT_FILE, dump_json(res))
    return {"group": cell.group, "seed": cell.seed, "status": res["status"]}


def _run_cell_job(args):
    cell, out = args
    return run_cell(cell, out)


def _dataset_job(args):
    cell, out = args
    try:
        build_dataset(out, cell)
    except Exception as exc:  # the dependent cells record the failure
        log.error("dataset for %s seed %d failed: %s", cell.group, cell.seed, exc)


def run_grid(spec: ExperimentSpec, out, jobs: int = 1) -> list[dict]:
    """Execute every pending cell; one worker process per running cell."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write(out / "spec.json", dump_json(spec.raw))
    pending = [c for c in spec.cells if not is_complete(out, c)]
    statuses = [{"group": c.group, "seed": c.seed, "status": "skipped"}
                for c in spec.cells if c not in pending]
    need_data: dict[Path, Cell] = {}
    for c in pending:
        if c.mode == "offline":
            need_data.setdefault(dataset_path(out, c), c)
    if jobs <= 1:
        for c in need_data.values():
            _dataset_job((c, out))
        for c in pending:
            statuses.append(run_cell(c, out))
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(_dataset_job, [(c, out) for c in need_data.values()]))
            statuses.extend(pool.map(_run_cell_job, [(c, out) for c in pending]))
    for s in statuses:
        log.info("%s seed%d: %s", s["group"], s["seed"], s["status"])
    return statuses
