#!/usr/bin/env python3
"""
VTTS Command Line

Usage:
    python vtts.py run-eval data.jsonl --out runs/eval1 --endpoint http://localhost:8000/v1 --model qwen2.5-vl-7b
    python vtts.py run-eval data.jsonl --out runs/mock --mock-script script.yaml --placeholder-media
    python vtts.py run-episode data.jsonl --id charades_0001 --mock-script script.yaml --placeholder-media
    python vtts.py compute-rewards completions.jsonl --dataset data.jsonl --out rewards.jsonl
    python vtts.py validate data.jsonl
    python vtts.py stats data.jsonl --format json
    python vtts.py curate data.jsonl --out curated/ --endpoint http://localhost:8000/v1 --model judge
    python vtts.py report --dataset data.jsonl --traces runs/eval1/traces.jsonl --out runs/eval1/report.json
    python vtts.py mock-serve --script script.yaml --port 8765
    python vtts.py presets

Exit codes: 0 ok, 1 validation or metric failure, 2 infrastructure failure.
"""

import argparse
import json
import logging
import sys
from collections import Counter, OrderedDict
from pathlib import Path
from typing import Dict, List, Optional

from cache import ProbeCache
from config import DEFAULT_PRESET, PRESET_ALIASES, PRESETS, ConfigLoader, RunConfig, build_run_config, preset_table
from dataset import (
    JoinFailure,
    corpus_stats,
    curate_records,
    load_records,
    validate_record,
)
from itp_engine import run_batch, run_episode
from media import CommandMedia, PlaceholderMedia
from metrics import MetricError, answer_kind_for, has_scorable_clue, score_traces, write_report
from mock_model import MockModel, MockScript, MockServer
from model_gateway import ChatCompletionClient, GatewayError, InFlightLimiter, ModelEndpoint
from protocol import schema_for_task
from rewards import AdvantageGroup, RewardWeights, score_completion
from schema import DatasetError, VttsRecord
from spacetime import BoxSequence
from traces import TraceStore, load_traces

logger = logging.getLogger("vtts.cli")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_INFRA = 2

REPORT_FILE = "report.json"


class CliError(Exception):
    """Ends the command with a message and an exit code."""

    def __init__(self, message: str, code: int = EXIT_INFRA):
        super().__init__(message)
        self.code = code


def _setup_logging(args) -> None:
    level = logging.DEBUG if args.verbose else (logging.WARNING if args.quiet else logging.INFO)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _read_jsonl(path: Path) -> List[dict]:
    rows = []
    with open(path, "r", encoding="utf-8") as f:
        for i, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise DatasetError(f"{path}: line {i} is not valid JSON: {e}")
    return rows


def _load_dataset(path: Path) -> List[VttsRecord]:
    if not Path(path).is_file():
        raise CliError(f"Dataset not found: {path}", EXIT_INFRA)
    try:
        return load_records(path)
    except DatasetError as e:
        raise CliError(f"{path}: {e}", EXIT_FAILURE)


def _index(records: List[VttsRecord], force: bool) -> Dict[str, VttsRecord]:
    duplicates = sorted(i for i, n in Counter(r.id for r in records).items() if n > 1)
    if duplicates and not force:
        raise CliError(f"Duplicate record ids: {', '.join(duplicates)}", EXIT_FAILURE)
    if duplicates:
        logger.warning("Duplicate ids, keeping the last record for each: %s", ", ".join(duplicates))
    return {r.id: r for r in records}


def _settings(args):
    return ConfigLoader(Path(args.config) if args.config else None).load()


def _model_for(args, endpoint: Optional[ModelEndpoint], max_in_flight: int):
    """Scripted mock when --mock-script is given, the HTTP endpoint otherwise."""
    if getattr(args, "mock_script", None):
        try:
            script = MockScript.from_file(Path(args.mock_script))
        except (OSError, ValueError) as e:
            raise CliError(f"Cannot load mock script {args.mock_script}: {e}")
        return InFlightLimiter(MockModel(script), max_in_flight), "mock"
    if endpoint is None:
        raise CliError("No endpoint configured (use --endpoint, the config file or --mock-script)")
    return InFlightLimiter(ChatCompletionClient(endpoint), endpoint.max_in_flight), endpoint.model


def _backend_for(args, settings):
    if args.placeholder_media:
        return PlaceholderMedia()
    return CommandMedia(settings.media, ProbeCache())


def _run_config(args, settings) -> RunConfig:
    try:
        return build_run_config(
            settings,
            preset=args.preset,
            dataset=Path(args.dataset),
            out_dir=Path(getattr(args, "out", None) or "."),
            overrides={
                "base_url": args.endpoint,
                "model": args.model,
                "iterations": args.iterations,
                "key_ratio": args.key_ratio,
                "fps": args.fps,
                "min_frames": args.min_frames,
                "max_frames": args.max_frames,
            },
            concurrency=args.concurrency,
            resume=getattr(args, "resume", False),
        )
    except (TypeError, ValueError) as e:
        raise CliError(f"Invalid configuration: {e}")


def _print_violations(violations, fmt: str) -> None:
    if fmt == "json":
        print(json.dumps([v.to_dict() for v in violations], indent=2))
        return
    for v in violations:
        print(f"{v.record_id}: {v.code}: {v.message}")


def cmd_run_eval(args) -> int:
    settings = _settings(args)
    run = _run_config(args, settings)
    try:
        run.check_paths()
    except FileNotFoundError as e:
        raise CliError(str(e), EXIT_INFRA)

    records = _load_dataset(run.dataset)
    violations = [v for r in records for v in validate_record(r)]
    if violations and not args.force:
        _print_violations(violations, "brief")
        raise CliError(f"{len(violations)} validation problem(s); use --force to run anyway", EXIT_FAILURE)
    by_id = _index(records, args.force)

    model, model_name = _model_for(args, run.endpoint, run.concurrency)
    backend = _backend_for(args, settings)

    store = TraceStore(run.out_dir, resume=run.resume)
    done = store.completed_ids()
    pending = [r for r in by_id.values() if r.id not in done]
    if done:
        logger.info("Skipping %d already traced episodes", len(by_id) - len(pending))

    try:
        run_batch(pending, backend, run.itp, model, concurrency=run.concurrency,
                  on_trace=store.append, progress=not args.quiet)
    except KeyboardInterrupt:
        logger.warning("Interrupted; rerun with --resume to continue")
        return EXIT_INFRA
    traces = load_traces(store.finalize())

    try:
        report = score_traces(by_id, traces, run.preset, model_name, run.itp.iterations, strict=args.strict)
        written = write_report(report, run.out_dir / REPORT_FILE)
    except MetricError as e:
        raise CliError(str(e), EXIT_FAILURE)

    if args.format == "json":
        print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    else:
        print(report.to_table(), end="")
        print(f"Report: {written[0]}", file=sys.stderr)

    aborted = sorted(i for i, t in traces.items() if i in by_id and t.get("aborted_at") is not None)
    if aborted:
        print(f"Error: {len(aborted)} episode(s) aborted: {', '.join(aborted[:10])}", file=sys.stderr)
        return EXIT_INFRA
    return EXIT_OK


def cmd_run_episode(args) -> int:
    settings = _settings(args)
    run = _run_config(args, settings)
    by_id = _index(_load_dataset(run.dataset), force=True)
    if args.id not in by_id:
        raise CliError(f"No record with id {args.id}", EXIT_FAILURE)

    model, _ = _model_for(args, run.endpoint, 1)
    trace = run_episode(by_id[args.id], _backend_for(args, settings), run.itp, model)

    if args.format == "json":
        print(json.dumps(trace.to_dict(), indent=2, ensure_ascii=False))
    else:
        for it in trace.iterations:
            clue = it.parsed.clue.to_list() if it.parsed.clue is not None else None
            print(f"k={it.k}: clue={clue} answer={it.parsed.answer!r}")
        for event in trace.fallback_events:
            print(f"  event k={event['k']}: {event['reason']} -> {event['action']}")
        print(f"final: answer={trace.final_answer!r} clue={trace.final_clue}")
    if trace.aborted:
        print(f"Error: aborted at iteration {trace.aborted_at}: {trace.error}", file=sys.stderr)
        return EXIT_INFRA
    return EXIT_OK


def compute_reward_rows(
    completions: List[dict],
    records: Dict[str, VttsRecord],
    weights: RewardWeights,
    clue_metric: str = "iou",
    group_key: str = "group",
) -> List[dict]:
    """
    One output row per completion, in input order, plus group advantages
    for rows carrying `group_key`.

    Raises:
        JoinFailure: completion ids missing from the dataset
    """
    orphans = sorted({str(c.get("id")) for c in completions if str(c.get("id")) not in records})
    if orphans:
        raise JoinFailure(orphans)

    rows = []
    unusable = set()
    for c in completions:
        record = records[str(c["id"])]
        text = c.get("completion", c.get("response", ""))
        gt_clue = record.clue if has_scorable_clue(record) else None
        if gt_clue is None and record.clue is not None and record.id not in unusable:
            unusable.add(record.id)
            logger.warning("Clue of %s does not match its task %s; no clue reward", record.id, record.task.value)
        schema = schema_for_task(
            record.task, sequence_length=len(gt_clue) if isinstance(gt_clue, BoxSequence) else 8)
        kind = answer_kind_for(record)
        try:
            breakdown = score_completion(str(text), schema, gt_clue, record.answer, kind, weights, clue_metric)
        except ValueError:
            # Options listed but the ground truth carries no letter
            breakdown = score_completion(str(text), schema, gt_clue, record.answer, "exact", weights, clue_metric)
        row = OrderedDict(id=record.id)
        if group_key in c:
            row[group_key] = c[group_key]
        row.update(breakdown.to_dict())
        rows.append(row)

    groups: Dict[str, List[int]] = OrderedDict()
    for i, row in enumerate(rows):
        if group_key in row:
            groups.setdefault(json.dumps(row[group_key]), []).append(i)
    for members in groups.values():
        group = AdvantageGroup.from_rewards([rows[i]["total"] for i in members])
        for i, adv in zip(members, group.advantages):
            rows[i]["advantage"] = adv
    return rows


def cmd_compute_rewards(args) -> int:
    settings = _settings(args)
    if not Path(args.completions).is_file():
        raise CliError(f"Completions file not found: {args.completions}")
    by_id = _index(_load_dataset(Path(args.dataset)), force=False)
    try:
        completions = _read_jsonl(Path(args.completions))
    except DatasetError as e:
        raise CliError(str(e), EXIT_FAILURE)

    weights = settings.rewards
    try:
        weights = RewardWeights(
            lambda_clue=weights.lambda_clue if args.lambda_clue is None else args.lambda_clue,
            lambda_ans=weights.lambda_ans if args.lambda_ans is None else args.lambda_ans,
            lambda_fmt=weights.lambda_fmt if args.lambda_fmt is None else args.lambda_fmt,
        )
    except ValueError as e:
        raise CliError(f"Invalid weights: {e}")

    try:
        rows = compute_reward_rows(completions, by_id, weights, args.clue_metric, args.group_key)
    except JoinFailure as e:
        raise CliError(str(e), EXIT_FAILURE)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = out.with_name(out.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row, ensure_ascii=False) + "\n")
    tmp.replace(out)
    logger.info("Scored %d completions -> %s", len(rows), out)
    return EXIT_OK


def cmd_validate(args) -> int:
    records = _load_dataset(Path(args.dataset))
    backend = None if not args.probe else CommandMedia(_settings(args).media, ProbeCache())
    violations = []
    for record in records:
        probe = None
        if backend is not None:
            try:
                probe = backend.probe(record.media)
            except GatewayError as e:
                raise CliError(f"{record.id}: {e}", EXIT_INFRA)
        violations.extend(validate_record(record, probe))

    if violations or args.format == "json":
        _print_violations(violations, args.format)
    if args.format == "brief" and not violations:
        print(f"OK: {len(records)} records")
    return EXIT_FAILURE if violations else EXIT_OK


def cmd_stats(args) -> int:
    stats = corpus_stats(_load_dataset(Path(args.dataset)))
    data = stats.to_dict()
    if args.format == "json":
        print(json.dumps(data, indent=2))
        return EXIT_OK
    print(f"Records: {data['total']}")
    print(f"Temporal clues: {data['temporal_clues']}  Spatial clues: {data['spatial_clues']}  "
          f"Tracking: {data['tracking_clues']}")
    print(f"Thinks: {data['thinks']}  QA pairs: {data['qa_pairs']}")
    for task, n in data["by_task"].items():
        print(f"  {task}: {n}")
    for source, counts in data["by_source"].items():
        print(f"  [{source}] {counts['records']} records")
    if data["duplicate_ids"]:
        print(f"Duplicate ids: {', '.join(data['duplicate_ids'])}")
    return EXIT_OK


def cmd_report(args) -> int:
    by_id = _index(_load_dataset(Path(args.dataset)), force=True)
    if not Path(args.traces).is_file():
        raise CliError(f"Traces not found: {args.traces}")
    traces = load_traces(Path(args.traces))
    iterations = args.iterations or max(
        (len(t.get("iterations") or []) for t in traces.values()), default=0)
    try:
        report = score_traces(by_id, traces, args.preset, args.model or "unknown", iterations, strict=args.strict)
        write_report(report, Path(args.out))
    except MetricError as e:
        raise CliError(str(e), EXIT_FAILURE)
    print(report.to_table(), end="")
    return EXIT_OK


def cmd_curate(args) -> int:
    settings = _settings(args)
    run = _run_config(args, settings)
    records = _load_dataset(run.dataset)
    model, _ = _model_for(args, run.endpoint, run.concurrency)

    result = curate_records(
        records,
        judge=model,
        reasoner=model if args.cot else None,
        ranker=model if args.cot and args.cot_candidates > 1 else None,
        cot_candidates=args.cot_candidates,
        concurrency=run.concurrency,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, bucket in (("kept", result.kept), ("dropped", result.dropped), ("quarantined", result.quarantined)):
        with open(out / f"{name}.jsonl", "w", encoding="utf-8") as f:
            for rec in bucket:
                f.write(rec.to_json() + "\n")
    counts = result.counts()
    if args.format == "json":
        print(json.dumps(counts))
    else:
        print(f"keep {counts['keep']}  drop {counts['drop']}  quarantine {counts['quarantine']}")
    return EXIT_OK


def cmd_mock_serve(args) -> int:
    try:
        script = MockScript.from_file(Path(args.script))
    except (OSError, ValueError) as e:
        raise CliError(f"Cannot load mock script {args.script}: {e}")
    server = MockServer(MockModel(script), args.host, args.port)
    print(f"Mock model listening on {server.base_url}", file=sys.stderr)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return EXIT_OK


def cmd_presets(args) -> int:
    rows = preset_table()
    if args.format == "json":
        print(json.dumps(list(rows), indent=2))
        return EXIT_OK
    for row in rows:
        aliases = f" (alias: {', '.join(row['aliases'])})" if row["aliases"] else ""
        print(f"{row['name']}{aliases}: frames {row['min_frames']}-{row['max_frames']} @ {row['fps']} fps, "
              f"key ratio {row['key_ratio']}  [{row['note']}]")
    return EXIT_OK


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("dataset", help="JSONL dataset")
    p.add_argument("--preset", default=DEFAULT_PRESET, choices=sorted([*PRESETS, *PRESET_ALIASES]))
    p.add_argument("--endpoint", help="Base URL of an OpenAI-compatible server")
    p.add_argument("--model", help="Model name sent to the endpoint")
    p.add_argument("--mock-script", help="Answer from a scripted mock instead of an endpoint")
    p.add_argument("--iterations", type=int, help="Perception rounds per episode")
    p.add_argument("--key-ratio", type=float, help="Share of frames inside the clue")
    p.add_argument("--fps", type=float)
    p.add_argument("--min-frames", type=int)
    p.add_argument("--max-frames", type=int)
    p.add_argument("--concurrency", type=int, help="Episodes in flight (default: endpoint max_in_flight)")
    p.add_argument("--placeholder-media", action="store_true", help="Skip decoding; send placeholder frames")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="Settings file (default: ~/.vtts/config.yaml)")
    common.add_argument("--format", choices=["json", "brief"], default="brief")
    common.add_argument("--quiet", action="store_true", help="Warnings only, no progress bar")
    common.add_argument("--verbose", action="store_true", help="Debug logging")

    parser = argparse.ArgumentParser(description="Visual test-time scaling toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run-eval", parents=[common], help="Run ITP episodes over a dataset and score them")
    _add_run_flags(p)
    p.add_argument("--out", required=True, help="Output directory for traces and report")
    p.add_argument("--resume", action="store_true", help="Continue an interrupted run")
    p.add_argument("--force", action="store_true", help="Run even if validation fails")
    p.add_argument("--strict", action="store_true", help="Strict (>) metric thresholds")
    p.set_defaults(func=cmd_run_eval)

    p = sub.add_parser("run-episode", parents=[common], help="Run one episode and print its trace")
    _add_run_flags(p)
    p.add_argument("--id", required=True, help="Record id")
    p.set_defaults(func=cmd_run_episode)

    p = sub.add_parser("compute-rewards", parents=[common], help="Score completions against a dataset")
    p.add_argument("completions", help="JSONL with id, completion and optional group")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--lambda-clue", type=float)
    p.add_argument("--lambda-ans", type=float)
    p.add_argument("--lambda-fmt", type=float)
    p.add_argument("--clue-metric", choices=["iou", "l1"], default="iou")
    p.add_argument("--group-key", default="group")
    p.set_defaults(func=cmd_compute_rewards)

    p = sub.add_parser("validate", parents=[common], help="Check dataset records")
    p.add_argument("dataset")
    p.add_argument("--probe", action="store_true", help="Probe media files instead of trusting the record")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("stats", parents=[common], help="Corpus statistics")
    p.add_argument("dataset")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("report", parents=[common], help="Score an existing trace file")
    p.add_argument("--dataset", required=True)
    p.add_argument("--traces", required=True)
    p.add_argument("--out", required=True, help="Report JSON path")
    p.add_argument("--preset", default=DEFAULT_PRESET)
    p.add_argument("--model")
    p.add_argument("--iterations", type=int)
    p.add_argument("--strict", action="store_true")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("curate", parents=[common], help="Judge, write CoT for and rank dataset records")
    _add_run_flags(p)
    p.add_argument("--out", required=True, help="Directory for kept/dropped/quarantined JSONL")
    p.add_argument("--cot", action="store_true", help="Generate CoT for kept records")
    p.add_argument("--cot-candidates", type=int, default=1)
    p.set_defaults(func=cmd_curate)

    p = sub.add_parser("mock-serve", parents=[common], help="Serve a scripted mock model over HTTP")
    p.add_argument("--script", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8765)
    p.set_defaults(func=cmd_mock_serve)

    p = sub.add_parser("presets", parents=[common], help="List sampling presets")
    p.set_defaults(func=cmd_presets)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging(args)
    try:
        return args.func(args)
    except CliError as e:
        print(f"Error: {e}", file=sys.stderr)
        return e.code
    except GatewayError as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_INFRA


if __name__ == "__main__":
    sys.exit(main())
