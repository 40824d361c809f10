"""Command-line entry points: run experiments, batch-score rewards, train the
toy policy, run the bound-check suite, and record/replay mock fixtures."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import bench
from .backend import build_backend, load_mock_script, write_mock_script
from .grpo import GrpoConfig, default_toy_task, train_toy, vera_reward_fn
from .theory import render_json, render_text, run_bound_checks
from .vera import DEFAULT_WEIGHTS, ReferenceRecord, VeraWeights, score_output


def _cmd_run(args: argparse.Namespace) -> int:
    config = bench.load_run_config(args.config)
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    if args.parallelism is not None:
        config = replace(config, parallelism=args.parallelism)
    if args.out is not None:
        config = replace(config, output_dir=args.out)
    shared_mock = None
    if args.mock_script:
        config = bench.apply_mock_script(config, args.mock_script)
        shared_mock = load_mock_script(args.mock_script)
    artifacts = bench.run_experiment(config, shared_mock=shared_mock)
    if args.tags:
        artifacts = bench.attach_failure_tags(artifacts, args.tags)
    formats = set(args.format.split(",")) if args.format else {"json", "text"}
    written = bench.emit_report(artifacts, formats, config.output_dir)
    for name, value in sorted(artifacts.report.aggregates.items()):
        print(f"{name}: {value:.6f}")
    print(f"rows: {len(artifacts.report.rows)}  failures: {len(artifacts.failures)}")
    for path in written:
        print(f"wrote {path}")
    return 0


def _cmd_reward(args: argparse.Namespace) -> int:
    weights = DEFAULT_WEIGHTS
    if args.weights:
        values = [float(x) for x in args.weights.split(",")]
        if len(values) != 4:
            raise SystemExit("--weights needs four comma-separated values")
        weights = VeraWeights(*values)
    checker = None
    options = None
    if args.checker_config:
        raw = json.loads(Path(args.checker_config).read_text(encoding="utf-8"))
        checker = build_backend(bench.backend_config_from_dict(raw))
    out_path = Path(args.out)
    count = 0
    with open(args.input, encoding="utf-8") as src, open(out_path, "w", encoding="utf-8") as dst:
        for line in src:
            if not line.strip():
                continue
            row = json.loads(line)
            reference = ReferenceRecord(row["gold"], row.get("reference_reasoning", ""))
            if checker is not None:
                options = [(label, "") for label in row.get("option_labels", [])]
            breakdown = score_output(
                row["text"],
                reference,
                mode=row.get("mode", "mcq"),
                weights=weights,
                checker_backend=checker,
                options=options,
            )
            dst.write(json.dumps(breakdown.to_record(str(row["output_id"])), sort_keys=True) + "\n")
            count += 1
    print(f"scored {count} outputs -> {out_path}")
    return 0


def _cmd_grpo_sim(args: argparse.Namespace) -> int:
    cfg = GrpoConfig(seed=args.seed)
    task = default_toy_task(option_count=args.options, gold_label=args.gold)
    log = train_toy(task, cfg, vera_reward_fn())
    if args.out:
        log.to_csv(args.out)
        print(f"wrote {args.out}")
    last = log.records[-1]
    print(
        f"steps: {last.step}  gold probability: {last.gold_probability:.4f}  "
        f"mean reward: {last.reward_mean:.4f}  kl: {last.kl:.6f}"
    )
    return 0


def _cmd_theory(args: argparse.Namespace) -> int:
    results = run_bound_checks(trials=args.trials, seed=args.seed)
    text = render_text(results)
    print(text, end="")
    if args.out:
        Path(args.out).write_text(render_json(results) + "\n", encoding="utf-8")
        print(f"wrote {args.out}")
    return 0 if all(r.satisfied for r in results) else 1


def _cmd_fixtures(args: argparse.Namespace) -> int:
    config = bench.load_run_config(args.config)
    if args.replay:
        config = bench.apply_mock_script(config, args.replay)
        shared = load_mock_script(args.replay)
        artifacts = bench.run_experiment(config, shared_mock=shared)
        print(f"replayed {len(artifacts.report.rows)} instances, "
              f"{len(artifacts.failures)} failures")
        return 0 if not artifacts.failures else 1
    artifacts = bench.run_experiment(config)
    entries = []
    seen = set()
    for transcript in artifacts.transcripts:
        key = transcript["request_key"]
        if key in seen:
            continue
        seen.add(key)
        entries.append({"key": key, "response": transcript["response"], "finish_reason": "stop"})
    write_mock_script(args.out, entries)
    print(f"recorded {len(entries)} fixture entries -> {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mocot", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment from a config file")
    run.add_argument("--config", required=True)
    run.add_argument("--seed", type=int)
    run.add_argument("--parallelism", type=int)
    run.add_argument("--out")
    run.add_argument("--mock-script", help="replay every backend from this fixture file")
    run.add_argument("--format", help="comma-separated subset of json,csv,text")
    run.add_argument("--tags", help="failure-annotation JSONL to join onto the report")
    run.set_defaults(func=_cmd_run)

    reward = sub.add_parser("reward", help="batch-score a JSONL of outputs")
    reward.add_argument("--input", required=True)
    reward.add_argument("--out", required=True)
    reward.add_argument("--weights", help="four comma-separated component weights")
    reward.add_argument("--checker-config", help="backend config JSON for the logic term")
    reward.set_defaults(func=_cmd_reward)

    sim = sub.add_parser("grpo-sim", help="train the toy policy and dump the curve")
    sim.add_argument("--out", help="curve CSV path")
    sim.add_argument("--seed", type=int, default=GrpoConfig().seed)
    sim.add_argument("--options", type=int, default=4)
    sim.add_argument("--gold", default="B")
    sim.set_defaults(func=_cmd_grpo_sim)

    theory = sub.add_parser("theory", help="run the bound-check suite")
    theory.add_argument("--trials", type=int, default=100_000)
    theory.add_argument("--seed", type=int, default=20240502)
    theory.add_argument("--out", help="JSON report path")
    theory.set_defaults(func=_cmd_theory)

    fixtures = sub.add_parser("fixtures", help="record or replay mock scripts")
    fixtures.add_argument("--config", required=True)
    fixtures.add_argument("--out", help="fixture file to record into")
    fixtures.add_argument("--replay", help="fixture file to replay instead of recording")
    fixtures.set_defaults(func=_cmd_fixtures)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "fixtures" and not args.replay and not args.out:
        print("fixtures: provide --out (record) or --replay", file=sys.stderr)
        return 2
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
