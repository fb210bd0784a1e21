"""Aggregate finished cells into a summary table, JSON and SVG plots."""

from __future__ import annotations

import json
import math
from collections import defaultdict
from pathlib import Path

import numpy as np

from ..analysis import iqm, stratified_bootstrap_ci
from .runner import RESULT_FILE, atomic_write, dump_json
from .spec import SpecError, parse_spec
from .svg import line_chart

BOOTSTRAP = {"iters": 2000, "level": 0.95, "seed": 0}
HEALTH_PLOTS = (("dormant_fraction", "dormant fraction (penultimate)"),
                ("entk_effective_rank", "ENTK effective rank"),
                ("feature_norm", "feature norm"))


class ReportError(RuntimeError):
    pass


def load_results(results_dir) -> dict[str, list[dict]]:
    """``group -> [result, ...]`` sorted by seed; refuses mixed config hashes."""
    root = Path(results_dir)
    files = sorted(root.glob(f"*/seed*/{RESULT_FILE}"))
    if not files:
        raise ReportError(f"no run results under {root}")
    groups: dict[str, list[dict]] = defaultdict(list)
    for f in files:
        res = json.loads(f.read_text())
        groups[res["group"]].append(res)
    for g, rs in groups.items():
        hashes = sorted({r["config_hash"] for r in rs})
        if len(hashes) > 1:
            raise ReportError(f"group {g!r} mixes config hashes {hashes}; refusing to aggregate")
        rs.sort(key=lambda r: r["seed"])
    return dict(groups)


def _group_order(root: Path, groups) -> list[str]:
    order: list[str] = []
    spec_file = root / "spec.json"
    if spec_file.exists():
        try:
            order = [g for g in parse_spec(spec_file).groups if g in groups]
        except SpecError:
            order = []
    return order + sorted(g for g in groups if g not in order)


def summarize_group(group: str, results: list[dict]) -> dict:
    ok = [r for r in results if r["status"] == "ok" and r.get("final_return") is not None]
    finals = [float(r["final_return"]) for r in ok]
    first = results[0]
    row = {
        "group": group, "label": first["label"], "variant": first["variant"],
        "n_experts": first["n_experts"], "width_multiplier": first["width_multiplier"],
        "replay_ratio": first["replay_ratio"], "keep_fraction": first["keep_fraction"],
        "config_hash": first["config_hash"], "param_count": first["param_count"],
        "seeds": [r["seed"] for r in ok], "final_returns": finals,
        "failed_seeds": [r["seed"] for r in results if r not in ok],
        "iqm": iqm(finals) if finals else None, "ci": None,
    }
    if len(finals) >= 2:
        lo, hi = stratified_bootstrap_ci(np.array(finals)[:, None], **BOOTSTRAP)
        row["ci"] = [lo, hi]
    return row


def _fmt(v, digits=3) -> str:
    return "n/a" if v is None else f"{v:.{digits}f}"


def markdown_table(rows: list[dict]) -> str:
    lines = ["| config | variant | experts | width x | params | runs | IQM final return | 95% CI |",
             "|---|---|---|---|---|---|---|---|"]
    for r in rows:
        ci = "unavailable" if r["ci"] is None else f"[{r['ci'][0]:.3f}, {r['ci'][1]:.3f}]"
        lines.append(
            f"| {r['group']} | {r['variant']} | {r['n_experts'] if r['n_experts'] is not None else '-'} "
            f"| {r['width_multiplier'] if r['width_multiplier'] is not None else '-'} "
            f"| {r['param_count']} | {len(r['final_returns'])} | {_fmt(r['iqm'])} | {ci} |")
    return "\n".join(lines) + "\n"


def _mean_curve(points_per_run: list[list[tuple[float, float | None]]]) -> list[tuple[float, float]]:
    by_x: dict[float, list[float]] = defaultdict(list)
    for pts in points_per_run:
        for x, y in pts:
            if y is not None and not math.isnan(y):
                by_x[float(x)].append(float(y))
    return [(x, float(np.mean(ys))) for x, ys in sorted(by_x.items())]


def _health_value(h: dict, key: str):
    v = h[key]
    return v.get("penultimate") if isinstance(v, dict) else v


def report(results_dir) -> dict:
    """Write summary.json, summary.md and SVG plots into ``results_dir``."""
    root = Path(results_dir)
    groups = load_results(root)
    order = _group_order(root, groups)
    rows = [summarize_group(g, groups[g]) for g in order]
    summary = {"bootstrap": BOOTSTRAP, "groups": rows}
    atomic_write(root / "summary.json", dump_json(summary))
    atomic_write(root / "summary.md", markdown_table(rows))

    ok = {g: [r for r in groups[g] if r["status"] == "ok"] for g in order}
    curves = {g: _mean_curve([[(s, y) for s, y in r["returns"]] for r in rs]) for g, rs in ok.items()}
    plots = {"learning_curves.svg": line_chart(curves, "Evaluation return", "step", "mean return")}
    for key, title in HEALTH_PLOTS:
        series = {g: _mean_curve([[(h["step"], _health_value(h, key)) for h in r["health"]]
                                  for r in rs]) for g, rs in ok.items()}
        plots[f"diagnostics_{key}.svg"] = line_chart(series, title, "step", title)

    scale: dict[str, list[tuple[float, float]]] = defaultdict(list)
    for r in rows:
        if r["iqm"] is None:
            continue
        x = r["n_experts"] if r["n_experts"] is not None else r["width_multiplier"]
        suffix = r["group"].split("__", 1)[1] if "__" in r["group"] else ""
        scale[f"{r['variant']} {suffix}".strip()].append((float(x), r["iqm"]))
    scale = {k: v for k, v in scale.items() if len({x for x, _ in v}) == len(v)}
    if any(len(v) > 1 for v in scale.values()):
        plots["scaling.svg"] = line_chart({k: sorted(v) for k, v in scale.items()},
                                          "IQM final return vs experts / width multiplier",
                                          "experts (MoE) or width multiplier (baseline)", "IQM return")
    for name, svg in plots.items():
        atomic_write(root / name, svg)
    return summary
