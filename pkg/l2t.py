#!/usr/bin/env python3
"""
Operator entry point.

    python l2t.py run   --task instances/24/easy1.json --backend oracle --seed 7
    python l2t.py train --manifest instances/manifest.json --rounds 5
    python l2t.py eval  --manifest instances/manifest.json --repeats 3 --jobs 4
    python l2t.py trace runs/easy1/trace.jsonl
    python l2t.py gen   --family latin --count 10 --seed 1 --out instances/generated

Exit codes: 0 solved/success, 1 unsolved, 2 usage or input error, 3 backend failure.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from config import RunConfig, apply_overrides, load_config, save_config
from engine import EpisodeResult, run_episode
from errors import BackendError, ConfigError
from evaluation import evaluate_batch, write_modes_csv
from features import FeatureProvider, make_feature_provider
from llm_backend import HttpChatBackend
from oracle_backend import OracleBackend
from policy import GraphSelector, PolicyParams, load_checkpoint, make_selector, save_checkpoint
from prompts import TemplateSet
from tasks import FAMILIES, TaskSpec, generate_instances, load_manifest, load_task, write_manifest
from trace_log import format_trace, read_trace
from trainer import TrainingLog, TrajectoryBuffer, train

logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(levelname)s - %(message)s')
logger = logging.getLogger(__name__)

EXIT_SOLVED, EXIT_UNSOLVED, EXIT_USAGE, EXIT_BACKEND = 0, 1, 2, 3


def parse_args(argv: Optional[List[str]] = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(description="Graph-guided step-by-step reasoning with a learned mode selector")
    parser.add_argument("--config", type=str, help="JSON run configuration; flags override it")
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("--verbose", action="store_true", help="Log per-call detail")
    verbosity.add_argument("--quiet", action="store_true", help="Only log warnings and errors")
    sub = parser.add_subparsers(dest="command", required=True)

    def episode_flags(p):
        p.add_argument("--backend", choices=["oracle", "http"], help="Language model backend")
        p.add_argument("--seed", type=int, help="Episode seed")
        p.add_argument("--selector", choices=["gcn", "mlp", "fixed"], help="Mode selector")
        p.add_argument("--checkpoint", type=str, help="Policy checkpoint (default: untrained)")
        p.add_argument("--output-dir", type=str, help="Directory for traces and reports")
        p.add_argument("--max-steps", type=int, help="Step budget")
        p.add_argument("--max-nodes", type=int, help="Node budget")
        p.add_argument("--beta", type=int, help="Ancestor subgraph radius")
        p.add_argument("--aggregation", choices=["max", "mean"], help="Reward aggregation over children")
        p.add_argument("--feature-source", choices=["hash", "embedding"], help="Node feature source")
        p.add_argument("--templates", type=str, help="Directory overriding prompt templates")
        p.add_argument("--error-rate", type=float, help="Oracle Backtrack injection rate")
        p.add_argument("--pad-dead-ends", action="store_true", default=None,
                       help="Oracle pads multi-branch generations with dead ends")
        p.add_argument("--family", choices=FAMILIES, help="Task family when no task file is given")
        p.add_argument("--generator-seed", type=int, help="Instance generator seed")

    run_p = sub.add_parser("run", help="Run one episode")
    episode_flags(run_p)
    run_p.add_argument("--task", type=str, help="Task instance JSON file")

    train_p = sub.add_parser("train", help="Train the mode selector")
    episode_flags(train_p)
    train_p.add_argument("--manifest", type=str, help="Batch manifest of training instances")
    train_p.add_argument("--count", type=int, default=20, help="Generated instances when no manifest is given")
    train_p.add_argument("--rounds", type=int, help="Training rounds")
    train_p.add_argument("--episodes-per-round", type=int, help="Episodes collected per round")
    train_p.add_argument("--lr", type=float, help="Learning rate")
    train_p.add_argument("--epochs", type=int, help="PPO epochs per update")
    train_p.add_argument("--resume", action="store_true", help="Continue from --checkpoint and its round counter")

    eval_p = sub.add_parser("eval", help="Evaluate a batch of instances")
    episode_flags(eval_p)
    eval_p.add_argument("--manifest", type=str, required=True, help="Batch manifest")
    eval_p.add_argument("--repeats", type=int, default=1, help="Repeats per instance")
    eval_p.add_argument("--jobs", type=int, default=1, help="Concurrent episodes")
    eval_p.add_argument("--label", type=str, default="", help="Report title")

    trace_p = sub.add_parser("trace", help="Pretty-print a trace file")
    trace_p.add_argument("path", type=str, help="Trace JSONL file")
    trace_p.add_argument("--requests", action="store_true", help="Include LLM request events")

    gen_p = sub.add_parser("gen", help="Emit seeded task instances and a manifest")
    gen_p.add_argument("--family", choices=FAMILIES, required=True, help="Task family")
    gen_p.add_argument("--count", type=int, default=10, help="Number of instances")
    gen_p.add_argument("--seed", type=int, default=0, help="Generator seed")
    gen_p.add_argument("--out", type=str, default="instances/generated", help="Output directory")
    gen_p.add_argument("--size", type=int, default=3, help="Latin square size")
    gen_p.add_argument("--density", type=float, default=0.3, help="Latin square givens density")
    gen_p.add_argument("--characters", type=int, default=3, help="Knights-and-knaves character count")
    gen_p.add_argument("--variant", choices=["words", "sentences"], default="words", help="Creative writing variant")
    gen_p.add_argument("--unsolvable", action="store_true", help="Allow unsolvable Game of 24 instances")
    return parser.parse_args(argv)


def build_config(args: argparse.Namespace) -> RunConfig:
    """Defaults < --config file < flags."""
    config = load_config(args.config)
    overrides: Dict[str, Any] = {
        "task": getattr(args, "task", None),
        "family": getattr(args, "family", None),
        "generator_seed": getattr(args, "generator_seed", None),
        "backend": getattr(args, "backend", None),
        "feature_source": getattr(args, "feature_source", None),
        "checkpoint": getattr(args, "checkpoint", None),
        "templates_dir": getattr(args, "templates", None),
        "output_dir": getattr(args, "output_dir", None),
        "episode.seed": getattr(args, "seed", None),
        "episode.selector": getattr(args, "selector", None),
        "episode.max_steps": getattr(args, "max_steps", None),
        "episode.max_nodes": getattr(args, "max_nodes", None),
        "episode.beta": getattr(args, "beta", None),
        "episode.reward_aggregation": getattr(args, "aggregation", None),
        "oracle.seed": getattr(args, "seed", None),
        "oracle.error_rate": getattr(args, "error_rate", None),
        "oracle.pad_with_dead_ends": getattr(args, "pad_dead_ends", None),
        "train.rounds": getattr(args, "rounds", None),
        "train.episodes_per_round": getattr(args, "episodes_per_round", None),
        "train.lr": getattr(args, "lr", None),
        "train.epochs": getattr(args, "epochs", None),
    }
    return apply_overrides(config, overrides)


def make_backend(config: RunConfig, tasks: List[TaskSpec]):
    if config.backend == "http":
        return HttpChatBackend(config.http)
    return OracleBackend(tasks, config.oracle)


def make_features(config: RunConfig, backend) -> FeatureProvider:
    return make_feature_provider(config.feature_source, config.episode.feature_dim, backend, config.episode.seed)


def load_policy(config: RunConfig) -> Tuple[PolicyParams, Dict[str, Any]]:
    if config.checkpoint:
        params, meta = load_checkpoint(config.checkpoint)
        if params.d != config.episode.feature_dim:
            raise ConfigError(f"Checkpoint expects {params.d}-dim features, config has {config.episode.feature_dim}")
        return params, meta
    params = PolicyParams.init(config.episode.feature_dim, config.train.hidden,
                               config.train.max_branches, seed=config.episode.seed)
    return params, {"round": 0, "seed": config.episode.seed}


def resolve_task(config: RunConfig) -> TaskSpec:
    if config.task:
        return load_task(config.task)
    return generate_instances(config.family, 1, config.generator_seed)[0]


def resolve_batch(config: RunConfig, manifest: Optional[str], count: int) -> List[TaskSpec]:
    if manifest:
        return load_manifest(manifest)
    return generate_instances(config.family, count, config.generator_seed)


def write_episode(result: EpisodeResult, directory: Path, config: RunConfig) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    result.trace.export_jsonl(directory / "trace.jsonl")
    (directory / "summary.json").write_text(json.dumps(result.summary(), indent=2), encoding="utf-8")
    write_modes_csv(result.modes, directory / "modes.csv")
    save_config(config, directory / "config.json")


def cmd_run(config: RunConfig) -> int:
    task = resolve_task(config)
    backend = make_backend(config, [task])
    params, _ = load_policy(config)
    selector = make_selector(config.episode.selector, params, config.episode.fixed_mode)
    result = run_episode(task, backend, selector, config.episode, make_features(config, backend),
                         TemplateSet(config.templates_dir))
    write_episode(result, Path(config.output_dir) / (task.name or "episode"), config)
    print(json.dumps(result.summary(), indent=2))
    return EXIT_SOLVED if result.solved else EXIT_UNSOLVED


def cmd_train(config: RunConfig, manifest: Optional[str], count: int, resume: bool) -> int:
    if config.episode.selector == "fixed":
        raise ConfigError("The fixed selector has no parameters to train")
    if resume and not config.checkpoint:
        raise ConfigError("--resume needs --checkpoint")
    tasks = resolve_batch(config, manifest, count)
    backend = make_backend(config, tasks)
    features = make_features(config, backend)
    templates = TemplateSet(config.templates_dir)
    params, meta = load_policy(config)
    start_round = int(meta.get("round") or 0) if resume else 0
    aggregate = config.episode.selector == "gcn"
    per_round = config.train.episodes_per_round
    out = Path(config.output_dir)
    save_config(config, out / "config.json")

    def collect(current: PolicyParams, round_index: int) -> TrajectoryBuffer:
        buffer = TrajectoryBuffer()
        selector = GraphSelector(current, aggregate=aggregate)
        for i in range(per_round):
            episode = round_index * per_round + i
            task = tasks[episode % len(tasks)]
            result = run_episode(task, backend, selector, config.episode, features, templates, episode)
            buffer.extend(result.transitions)
        return buffer

    def checkpoint(round_number: int, current: PolicyParams, stats) -> None:
        save_checkpoint(current, out / "checkpoints" / f"round_{round_number:03d}.json",
                        config.episode.seed, round_number)
        save_checkpoint(current, out / "checkpoints" / "latest.json", config.episode.seed, round_number)

    logger.info(f"Training {config.episode.selector} selector from round {start_round + 1} on {len(tasks)} instances")
    train(params, collect, config.train, start_round=start_round, aggregate=aggregate,
          log=TrainingLog(out / "train_log.jsonl"), on_round=checkpoint)
    return EXIT_SOLVED


def cmd_eval(config: RunConfig, manifest: str, repeats: int, jobs: int, label: str) -> int:
    tasks = load_manifest(manifest)
    backend = make_backend(config, tasks)
    features = make_features(config, backend)
    templates = TemplateSet(config.templates_dir)
    params, _ = load_policy(config)

    def run_one(task: TaskSpec, repeat: int, episode: int) -> EpisodeResult:
        selector = make_selector(config.episode.selector, params, config.episode.fixed_mode)
        return run_episode(task, backend, selector, config.episode, features, templates, episode)

    results = evaluate_batch(tasks, run_one, repeats, jobs, label)
    out = Path(config.output_dir)
    results.report.save(out / "report.json")
    write_modes_csv(results.modes(), out / "modes.csv")
    for result, record in zip(results.episodes, results.report.records):
        result.trace.export_jsonl(out / "traces" / f"{record['instance']}_r{record['repeat']}.jsonl")
    table = results.report.format_table()
    (out / "report.txt").write_text(table + "\n", encoding="utf-8")
    print(table)
    print(results.report.format_instances())
    return EXIT_SOLVED


def cmd_trace(path: str, include_requests: bool) -> int:
    print(format_trace(read_trace(path), include_requests))
    return EXIT_SOLVED


def cmd_gen(args: argparse.Namespace) -> int:
    options = {"density": args.density, "variant": args.variant, "solvable": not args.unsolvable}
    if args.family == "latin":
        options["n"] = args.size
    elif args.family == "knights":
        options["n"] = args.characters
    tasks = generate_instances(args.family, args.count, args.seed, **options)
    print(write_manifest(tasks, Path(args.out)))
    return EXIT_SOLVED


def main(argv: Optional[List[str]] = None) -> int:
    args = parse_args(argv)
    if args.verbose:
        logging.getLogger().setLevel(logging.DEBUG)
    elif args.quiet:
        logging.getLogger().setLevel(logging.WARNING)
    try:
        if args.command == "trace":
            return cmd_trace(args.path, args.requests)
        if args.command == "gen":
            return cmd_gen(args)
        config = build_config(args)
        if args.command == "run":
            return cmd_run(config)
        if args.command == "train":
            return cmd_train(config, args.manifest, args.count, args.resume)
        return cmd_eval(config, args.manifest, args.repeats, args.jobs, args.label)
    except BackendError as e:
        logger.error(f"Backend failure: {e}")
        return EXIT_BACKEND
    except (ConfigError, FileNotFoundError, ValueError, KeyError) as e:
        logger.error(f"{type(e).__name__}: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
