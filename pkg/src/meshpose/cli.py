"""Command-line entry points.

Exit codes: 0 success, 1 failed check, 2 bad configuration, 3 I/O failure.
Log verbosity comes from the MESHPOSE_LOG_LEVEL environment variable.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3
LOG_ENV = "MESHPOSE_LOG_LEVEL"

log = logging.getLogger("meshpose")


def _configure_logging() -> None:
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def _load(args):
    from .config import load_config

    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    if getattr(args, "workers", None) is not None:
        if args.workers < 1:
            from .errors import ConfigError

            raise ConfigError("--workers must be positive")
        cfg = cfg.with_workers(args.workers)
    return cfg


def cmd_benchmark(args) -> int:
    from .benchmark import run_and_write, sweep_summary

    cfg = _load(args)
    out = Path(args.out or cfg.run.output_dir)
    results = run_and_write(cfg, out)
    status = EXIT_OK
    for r in results:
        bad = r.report_dict()["monotonicity_violations"]
        timing = r.timing_dict()["overall"]
        print(f"outlier_rate={r.outlier_rate:.2f} scenes={len(r.scenes)} recall={r.report.recall['mean']:.1f}% "
              f"10°0.5d={r.report.mean['10°0.5d']:.1f}% median={timing['median']:.0f} ms")
        if bad:
            print("monotonicity violations: " + "; ".join(bad), file=sys.stderr)
            status = EXIT_CHECK
    if len(results) > 1 and not sweep_summary(results)["recall_non_increasing"]:
        print("recall increases with outlier rate somewhere in the sweep", file=sys.stderr)
    print(f"wrote {out}")
    return status


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    results = run_selftest(perturb_gradient=args.perturb_gradient)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    if failed:
        print("failed checks: " + ", ".join(failed))
        return EXIT_CHECK
    return EXIT_OK


def cmd_simulate(args) -> int:
    from .benchmark import _prototypes
    from .geometry import poses_to_jsonl
    from .sim import save_observation, simulate

    cfg = _load(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    protos = _prototypes(cfg)
    gt = []
    for i in range(cfg.run.scenes):
        obs = simulate(cfg.sim, protos, i)
        save_observation(out / f"scene_{i:05d}.npz", obs)
        gt.append(poses_to_jsonl(obs.gt.objects, scene=i))
    (out / "ground_truth.jsonl").write_text("".join(gt), encoding="utf-8")
    print(f"wrote {cfg.run.scenes} observations to {out}")
    return EXIT_OK


def _scenes_from_jsonl(path) -> dict[int, list]:
    from .geometry import Pose9D

    scenes: dict[int, list] = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
            scenes.setdefault(int(row.get("scene", 0)), []).append(Pose9D.from_dict(row))
        except (ValueError, KeyError, TypeError) as exc:
            raise ValueError(f"{path}:{n}: {exc}") from exc
    return scenes


def cmd_evaluate(args) -> int:
    from .geometry import SceneGroundTruth, default_intrinsics
    from .metrics import aggregate_map, evaluate_scene, monotonicity_violations

    try:
        preds = _scenes_from_jsonl(args.pred)
        gts = _scenes_from_jsonl(args.gt)
    except ValueError as exc:
        print(f"malformed pose file: {exc}", file=sys.stderr)
        return EXIT_IO
    K = default_intrinsics()
    tables = [
        evaluate_scene(preds.get(s, []), SceneGroundTruth(tuple(gts.get(s, [])), K))
        for s in sorted(set(preds) | set(gts))
    ]
    report = aggregate_map(tables)
    text = report.to_json() + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_CHECK if monotonicity_violations(report) else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="meshpose", description="Category-level 9D pose benchmark tools")
    sub = p.add_subparsers(dest="command", required=True)

    b = sub.add_parser("benchmark", help="simulate scenes, run the pipeline, write reports")
    b.add_argument("--config", required=True)
    b.add_argument("--seed", type=int)
    b.add_argument("--workers", type=int)
    b.add_argument("--out", help="output directory (default: [run] output_dir)")
    b.set_defaults(func=cmd_benchmark)

    s = sub.add_parser("selftest", help="run the oracle suite")
    s.add_argument("--perturb-gradient", type=float, default=0.0, help=argparse.SUPPRESS)
    s.set_defaults(func=cmd_selftest)

    m = sub.add_parser("simulate", help="write observation containers")
    m.add_argument("--config", required=True)
    m.add_argument("--out", required=True)
    m.add_argument("--seed", type=int)
    m.set_defaults(func=cmd_simulate)

    e = sub.add_parser("evaluate", help="score pose JSONL against ground-truth JSONL")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--out")
    e.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    from .errors import ConfigError

    _configure_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
