"""``moerl`` command line: run grids, build reports, list presets, self-check."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

OUT_ENV = "MOERL_OUT"
EXIT_OK, EXIT_FAILURE, EXIT_CONFIG = 0, 1, 2


def _seed_list(text: str) -> list[int]:
    """``3`` means seeds 0..2; ``0,4,7`` lists them explicitly."""
    try:
        if "," in text:
            return [int(s) for s in text.split(",") if s.strip()]
        n = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}") from None
    if n < 1:
        raise argparse.ArgumentTypeError("need at least one seed")
    return list(range(n))


def _resolve_spec(ref: str) -> str:
    from .harness import shipped_specs
    if Path(ref).exists():
        return ref
    presets = shipped_specs()
    if ref in presets:
        return presets[ref]
    raise FileNotFoundError(f"{ref!r} is neither a spec file nor a preset ({', '.join(presets)})")


def _output_root(args, spec) -> Path:
    if args.out:
        return Path(args.out)
    if os.environ.get(OUT_ENV):
        return Path(os.environ[OUT_ENV]) / spec.name
    if spec.output_dir:
        return Path(spec.output_dir)
    return Path("results") / spec.name


def cmd_run(args) -> int:
    from .harness import SpecError, parse_spec, run_grid
    try:
        spec = parse_spec(_resolve_spec(args.spec), seeds=args.seeds, steps=args.steps)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SpecError as exc:
        for p in exc.problems:
            print(f"spec error: {p}", file=sys.stderr)
        return EXIT_CONFIG
    out = _output_root(args, spec)
    print(f"{spec.name}: {len(spec.cells)} cells in {len(spec.groups)} groups -> {out}")
    statuses = run_grid(spec, out, jobs=args.jobs)
    counts: dict[str, int] = {}
    for s in statuses:
        counts[s["status"]] = counts.get(s["status"], 0) + 1
    print(", ".join(f"{k}: {v}" for k, v in sorted(counts.items())))
    if args.report:
        rc = _report(out)
        if rc:
            return rc
    return EXIT_FAILURE if counts.get("error") or counts.get("diverged") else EXIT_OK


def _report(path) -> int:
    from .harness import ReportError, report
    try:
        summary = report(path)
    except ReportError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    print((Path(path) / "summary.md").read_text(), end="")
    print(f"wrote summary.json, summary.md and {len(summary['groups'])}-group plots to {path}")
    return EXIT_OK


def cmd_report(args) -> int:
    return _report(args.dir)


def cmd_presets(args) -> int:
    import json
    from .harness import parse_spec, shipped_specs
    for name, path in shipped_specs().items():
        spec = parse_spec(path)
        desc = json.loads(Path(path).read_text()).get("description", "")
        print(f"{name:16s} {len(spec.groups):3d} groups {len(spec.cells):4d} cells  {desc}")
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import run_all
    results = run_all()
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.ok]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_FAILURE if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="moerl", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true", help="log every cell")
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a spec file or a preset name")
    run.add_argument("spec")
    run.add_argument("--seeds", type=_seed_list, help="N (seeds 0..N-1) or a comma list")
    run.add_argument("--steps", type=int, help="override total steps")
    run.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    run.add_argument("--out", help=f"output directory (default ${OUT_ENV}/<name> or results/<name>)")
    run.add_argument("--report", action="store_true", help="build the report afterwards")
    run.set_defaults(fn=cmd_run)

    rep = sub.add_parser("report", help="summarize a results directory")
    rep.add_argument("dir")
    rep.set_defaults(fn=cmd_report)

    pre = sub.add_parser("presets", help="shipped experiment presets")
    pre.add_argument("action", choices=["list"])
    pre.set_defaults(fn=cmd_presets)

    ver = sub.add_parser("verify", help="gradient and invariant self-checks")
    ver.set_defaults(fn=cmd_verify)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "steps", None) is not None and args.steps < 1:
        print("error: --steps must be positive", file=sys.stderr)
        return EXIT_CONFIG
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
