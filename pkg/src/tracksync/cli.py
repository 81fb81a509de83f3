"""Command-line entry point: ``tracksync <command> [options]``.

Every stage reads its inputs from files and writes its outputs atomically,
so any stage can be re-run on its own and intermediate files can be swapped
for hand-made ones. Exit codes: 0 success (flagged results included),
2 configuration, schema or input errors, 3 numerical failures.
"""

from __future__ import annotations

import argparse
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from pathlib import Path

from .config import PipelineConfig, load_model
from .errors import InvalidInputError, NumericalError, SchemaError
from .jsonio import write_json, write_text
from .matching import MatchSet, match_track_sets
from .refine import build_refine_problem, refine_offsets
from .sync import SyncResult, pair_key, sync_all
from .synthgen import LoadedGroundTruth, generate_scene, score_sync
from .tracks import TrackSet

log = logging.getLogger("tracksync")

STAGES = ("gen", "match", "sync", "refine", "eval")
EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3


# --- helpers ------------------------------------------------------------


@contextmanager
def _executor(threads: int):
    if threads <= 1:
        yield None
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            yield pool


def _map(executor, fn, items):
    # results always come back in input order, whatever the worker count
    return list(executor.map(fn, items)) if executor is not None else [fn(x) for x in items]


@contextmanager
def _stage(name: str):
    """Prefix schema/input errors with the stage that hit them."""
    try:
        yield
    except SchemaError as exc:
        raise SchemaError(f"stage {name!r}: {exc}") from None
    except InvalidInputError as exc:
        raise InvalidInputError(f"stage {name!r}: {exc}") from None


def _load_tracks(paths) -> list[TrackSet]:
    sets = [TrackSet.load(p) for p in paths]
    seen = set()
    for ts in sets:
        if ts.video_id in seen:
            raise InvalidInputError(f"duplicate video id {ts.video_id!r} among track files")
        seen.add(ts.video_id)
    return sets


def _load_matches(paths) -> dict[tuple[str, str], MatchSet]:
    out = {}
    for p in paths:
        ms = MatchSet.load(p)
        out[(ms.source_video, ms.target_video)] = ms
    return out


def _histogram_csv(hist: dict) -> str:
    lines = ["offset,count"] + [f"{k},{v}" for k, v in sorted(hist.items(), key=lambda kv: int(kv[0]))]
    return "\n".join(lines) + "\n"


def _fmt(x) -> str:
    return "-" if x is None else f"{x:.3f}"


def _report_table(report: dict) -> str:
    rows = [f"{'view':<12} {'true':>9} {'coarse':>9} {'refined':>9} {'|err| c':>9} {'|err| r':>9}"]
    for vid, r in report["per_view"].items():
        rows.append(
            f"{vid:<12} {_fmt(r['true']):>9} {_fmt(float(r['coarse'])):>9} {_fmt(r['refined']):>9} "
            f"{_fmt(r['coarse_error']):>9} {_fmt(r['refined_error']):>9}"
        )
    rows.append(f"{'mean':<12} {'':>9} {'':>9} {'':>9} {_fmt(report['mean_coarse_error']):>9} "
                f"{_fmt(report['mean_refined_error']):>9}")
    return "\n".join(rows)


def _report_csv(report: dict) -> str:
    lines = ["view,true,coarse,refined,coarse_error,refined_error"]

    def cell(x):
        return "" if x is None else repr(float(x))

    for vid, r in report["per_view"].items():
        lines.append(",".join([vid] + [cell(r[k]) for k in ("true", "coarse", "refined", "coarse_error", "refined_error")]))
    lines.append(f"mean,,,,{cell(report['mean_coarse_error'])},{cell(report['mean_refined_error'])}")
    return "\n".join(lines) + "\n"


# --- commands -----------------------------------------------------------


def cmd_gen(config: PipelineConfig, out: Path) -> list[Path]:
    sets, gt = generate_scene(config.scene)
    written = []
    for ts in sets:
        path = out / "tracks" / f"{ts.video_id}.json"
        ts.save(path)
        written.append(path)
    gt.save(out / "ground_truth.json")
    written.append(out / "ground_truth.json")
    log.info("gen: %d track sets, ground truth in %s", len(sets), out)
    return written


def cmd_match(config: PipelineConfig, ref: TrackSet, queries: list[TrackSet], out: Path, executor=None) -> dict:
    def run(q):
        ms, _ = match_track_sets(ref, q, config.matching)
        return ms

    results = _map(executor, run, queries)
    matches = {}
    for q, ms in zip(queries, results):
        path = out / "matches" / f"{pair_key(ref.video_id, q.video_id)}.json"
        ms.save(path)
        if not ms.metadata.get("converged", True):
            log.warning("match %s: solver did not converge; best iterate kept", pair_key(ref.video_id, q.video_id))
        log.info("match %s: %d matches", pair_key(ref.video_id, q.video_id), len(ms))
        matches[(ms.source_video, ms.target_video)] = ms
    return matches


def cmd_sync(config: PipelineConfig, sets, matches, reference: str, out: Path, executor=None) -> SyncResult:
    result = sync_all(sets, matches, reference, config.sync, executor=executor)
    result.save(out / "sync.json")
    for key, res in result.diagnostics["pairs"].items():
        write_text(out / "histograms" / f"{key}.csv", _histogram_csv(res["histogram"]))
    log.info("sync: coarse offsets %s", {v: o.coarse for v, o in sorted(result.offsets.items())})
    return result


def cmd_refine(config: PipelineConfig, sets, matches, sync: SyncResult, out: Path) -> SyncResult:
    by_id = {ts.video_id: ts for ts in sets}
    problem = build_refine_problem(by_id, matches, sync, config.spline, config.refine)
    refined, trace = refine_offsets(problem, config.refine, sync)
    refined.save(out / "sync_refined.json")
    write_json(out / "refine_trace.json", trace.to_dict())
    write_text(out / "refine_trace.csv", trace.to_csv())
    for vid in problem.video_ids:
        problem.scaffolds[vid].save(out / "scaffolds" / f"{vid}.json")
    log.info("refine: %s after %d iterations; offsets %s", trace.status, len(trace.iterations) - 1,
             {v: o.refined for v, o in sorted(refined.offsets.items())})
    return refined


def cmd_eval(config: PipelineConfig, sync: SyncResult, gt, out: Path, matches=None, stream=None) -> dict:
    report = score_sync(sync, gt, matches)
    if config.report_format == "csv":
        write_text(out / "eval.csv", _report_csv(report))
    else:
        write_json(out / "eval.json", report)
    print(_report_table(report), file=stream or sys.stdout)
    return report


def cmd_pipeline(config: PipelineConfig, out: Path, resume_from: str = "gen", threads: int = 1, stream=None) -> dict:
    """Run gen-or-load, match, sync, refine and eval, persisting every stage.

    Stages before ``resume_from`` (or switched off in ``config.stages``) are
    not recomputed; their outputs are read back from ``out`` instead.
    """
    if resume_from not in STAGES:
        raise InvalidInputError(f"unknown stage {resume_from!r}; expected one of {STAGES}")
    start = STAGES.index(resume_from)

    def enabled(name):
        return STAGES.index(name) >= start and getattr(config.stages, name)

    artifacts: dict = {}
    with _executor(threads) as pool:
        gt = None
        if config.tracks is not None:
            with _stage("gen"):
                sets = _load_tracks(config.tracks)
                if config.ground_truth is not None:
                    gt = LoadedGroundTruth.load(config.ground_truth)
        elif enabled("gen"):
            with _stage("gen"):
                cmd_gen(config, out)
                sets = _load_tracks(sorted((out / "tracks").glob("*.json")))
                gt = LoadedGroundTruth.load(out / "ground_truth.json")
        else:
            with _stage("gen"):
                paths = sorted((out / "tracks").glob("*.json"))
                if not paths:
                    raise SchemaError(f"no track files under {out / 'tracks'}")
                sets = _load_tracks(paths)
                if (out / "ground_truth.json").exists():
                    gt = LoadedGroundTruth.load(out / "ground_truth.json")
        reference = config.reference or (gt.reference if gt is not None else sets[0].video_id)
        by_id = {ts.video_id: ts for ts in sets}
        if reference not in by_id:
            raise InvalidInputError(f"reference {reference!r} not among track sets {sorted(by_id)}")
        queries = [ts for ts in sets if ts.video_id != reference]

        with _stage("match"):
            if enabled("match"):
                matches = cmd_match(config, by_id[reference], queries, out, pool)
            else:
                matches = _load_matches(out / "matches" / f"{pair_key(reference, q.video_id)}.json" for q in queries)
        with _stage("sync"):
            if enabled("sync"):
                sync = cmd_sync(config, sets, matches, reference, out, pool)
            else:
                sync = SyncResult.load(out / "sync.json")
        with _stage("refine"):
            if enabled("refine"):
                sync = cmd_refine(config, sets, matches, sync, out)
            elif (out / "sync_refined.json").exists() and config.stages.refine:
                sync = SyncResult.load(out / "sync_refined.json")
        artifacts["sync"] = sync
        if enabled("eval"):
            with _stage("eval"):
                if gt is None:
                    log.warning("eval skipped: no ground truth available")
                else:
                    artifacts["report"] = cmd_eval(config, sync, gt, out, matches, stream)
    return artifacts


# --- argument parsing ---------------------------------------------------


def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", type=Path, default=default, help="pipeline config JSON")
    parser.add_argument("--out", type=Path, default=argparse.SUPPRESS if suppress else Path("."),
                        help="output directory (default: current directory)")
    parser.add_argument("--threads", type=int, default=default, help="worker threads for per-pair stages")
    parser.add_argument("--seed", type=int, default=default, help="override the scene seed")
    parser.add_argument("--verbose", action="store_true", default=argparse.SUPPRESS if suppress else False,
                        help="log progress to stderr")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tracksync", description="Multi-view track matching and time synchronisation")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        _global_flags(p, suppress=True)
        return p

    add("gen", "generate a synthetic scene (track sets + ground truth)")
    p = add("match", "match the reference track set against one or more query sets")
    p.add_argument("reference", type=Path)
    p.add_argument("queries", type=Path, nargs="+")
    p = add("sync", "coarse offsets by dynamic time warping")
    p.add_argument("tracks", type=Path, nargs="+")
    p.add_argument("--matches", type=Path, nargs="+", required=True)
    p.add_argument("--reference", help="reference video id (default: first track file)")
    p = add("refine", "sub-frame refinement of coarse offsets")
    p.add_argument("tracks", type=Path, nargs="+")
    p.add_argument("--matches", type=Path, nargs="+", required=True)
    p.add_argument("--sync", type=Path, required=True)
    p = add("eval", "score a sync result against ground truth")
    p.add_argument("sync", type=Path)
    p.add_argument("ground_truth", type=Path)
    p.add_argument("--matches", type=Path, nargs="*", default=[])
    p.add_argument("--format", choices=["json", "csv"], help="report format (overrides config)")
    p = add("pipeline", "run every stage, persisting intermediates")
    p.add_argument("--resume-from", choices=STAGES, default="gen", help="reuse on-disk outputs of earlier stages")
    return parser


def _resolve_config(args) -> PipelineConfig:
    config = load_model(PipelineConfig, args.config)
    updates = {}
    seed = args.seed if args.seed is not None else config.seed
    if seed is not None:
        updates["scene"] = config.scene.model_copy(update={"seed": seed})
    if args.threads is not None:
        if args.threads < 1:
            raise SchemaError("threads: must be >= 1")
        updates["threads"] = args.threads
    if getattr(args, "format", None):
        updates["report_format"] = args.format
    return config.model_copy(update=updates) if updates else config


def run(args) -> int:
    config = _resolve_config(args)
    out = Path(args.out)
    if args.command == "gen":
        cmd_gen(config, out)
    elif args.command == "match":
        ref = TrackSet.load(args.reference)
        queries = _load_tracks(args.queries)
        with _executor(config.threads) as pool:
            cmd_match(config, ref, queries, out, pool)
    elif args.command == "sync":
        sets = _load_tracks(args.tracks)
        matches = _load_matches(args.matches)
        with _executor(config.threads) as pool:
            cmd_sync(config, sets, matches, args.reference or sets[0].video_id, out, pool)
    elif args.command == "refine":
        sets = _load_tracks(args.tracks)
        cmd_refine(config, sets, _load_matches(args.matches), SyncResult.load(args.sync), out)
    elif args.command == "eval":
        sync = SyncResult.load(args.sync)
        gt = LoadedGroundTruth.load(args.ground_truth)
        cmd_eval(config, sync, gt, out, _load_matches(args.matches) or None)
    elif args.command == "pipeline":
        cmd_pipeline(config, out, args.resume_from, config.threads)
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return run(args)
    except InvalidInputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
