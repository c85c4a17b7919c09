"""
Batch evaluation and reporting.

Runs repeats x instances episodes, aggregates accuracy, generated nodes,
token usage and access counts with pandas, and renders the result with
tabulate. Reports are stored as JSON and re-render to the same table.
"""

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Sequence

import pandas as pd
from tabulate import tabulate

from engine import EpisodeResult, StepMode
from tasks import TaskSpec

logger = logging.getLogger(__name__)

REPORT_VERSION = 1
MODE_COLUMNS = ["episode", "step", "node", "branch_count", "temperature", "top_p", "use_dependency"]


def episode_record(result: EpisodeResult, repeat: int = 0) -> Dict[str, Any]:
    usage = result.usage
    return {
        "instance": result.task.name or result.task.description,
        "family": result.task.family,
        "repeat": repeat,
        "outcome": result.outcome,
        "solved": result.solved,
        "verified": bool(result.verdict.accepted) if result.verdict is not None else False,
        "generated_nodes": result.generated_nodes,
        "steps": result.steps,
        "access_count": usage.access_count,
        "prompt_tokens": usage.prompt_tokens,
        "completion_tokens": usage.completion_tokens,
        "generate_completion_tokens": usage.by_kind()["generate"]["completion_tokens"],
    }


def summarize(records: Sequence[Dict[str, Any]]) -> Dict[str, Any]:
    """Aggregate episode records; std values use the population formula."""
    df = pd.DataFrame(list(records))
    if df.empty:
        raise ValueError("No episodes to summarize")
    accuracy = df.groupby("repeat")["solved"].mean() * 100.0
    thoughts = max(int(df["generated_nodes"].sum()), 1)
    return {
        "episodes": int(len(df)),
        "instances": int(df["instance"].nunique()),
        "repeats": int(df["repeat"].nunique()),
        "accuracy_mean": float(accuracy.mean()),
        "accuracy_std": float(accuracy.std(ddof=0)),
        "nodes_mean": float(df["generated_nodes"].mean()),
        "nodes_std": float(df["generated_nodes"].std(ddof=0)),
        "prompt_tokens_per_thought": float(df["prompt_tokens"].sum() / thoughts),
        "completion_tokens_per_thought": float(df["generate_completion_tokens"].sum() / thoughts),
        "prompt_tokens_per_case": float(df["prompt_tokens"].mean()),
        "completion_tokens_per_case": float(df["completion_tokens"].mean()),
        "access_count": int(df["access_count"].sum()),
        "access_count_per_case": float(df["access_count"].mean()),
    }


@dataclass
class EvalReport:
    records: List[Dict[str, Any]]
    summary: Dict[str, Any] = field(default_factory=dict)
    label: str = ""

    def __post_init__(self):
        if not self.summary:
            self.summary = summarize(self.records)

    def to_dict(self) -> Dict[str, Any]:
        return {"version": REPORT_VERSION, **asdict(self)}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "EvalReport":
        if data.get("version") != REPORT_VERSION:
            raise ValueError(f"Unsupported report version: {data.get('version')}")
        return cls(records=data["records"], summary=data["summary"], label=data.get("label", ""))

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True), encoding="utf-8")
        logger.info(f"Report written to {path}")
        return path

    @classmethod
    def load(cls, path) -> "EvalReport":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"Report not found: {path}")
        return cls.from_dict(json.loads(path.read_text(encoding="utf-8")))

    def format_table(self) -> str:
        s = self.summary
        rows = [
            ["Accuracy (%)", f"{s['accuracy_mean']:.2f} ± {s['accuracy_std']:.2f}"],
            ["Generated nodes", f"{s['nodes_mean']:.2f} ± {s['nodes_std']:.2f}"],
            ["Prompt tokens / thought", f"{s['prompt_tokens_per_thought']:.1f}"],
            ["Generate tokens / thought", f"{s['completion_tokens_per_thought']:.1f}"],
            ["Prompt tokens / case", f"{s['prompt_tokens_per_case']:.1f}"],
            ["Completion tokens / case", f"{s['completion_tokens_per_case']:.1f}"],
            ["LLM accesses", f"{s['access_count']} ({s['access_count_per_case']:.1f} / case)"],
            ["Episodes", f"{s['episodes']} ({s['instances']} instances x {s['repeats']} repeats)"],
        ]
        title = self.label or "Evaluation"
        return tabulate(rows, headers=[title, "Value"], tablefmt="grid")

    def format_instances(self) -> str:
        df = pd.DataFrame(self.records)
        per_instance = df.groupby("instance", sort=False).agg(
            solved=("solved", "mean"), nodes=("generated_nodes", "mean"), accesses=("access_count", "mean"),
        )
        rows = [[name, f"{100 * r.solved:.0f}%", f"{r.nodes:.1f}", f"{r.accesses:.1f}"]
                for name, r in per_instance.iterrows()]
        return tabulate(rows, headers=["Instance", "Solved", "Nodes", "Accesses"], tablefmt="grid")


def evaluate_batch(tasks: Sequence[TaskSpec], run_one: Callable[[TaskSpec, int, int], EpisodeResult],
                   repeats: int = 1, jobs: int = 1, label: str = "") -> "EvalResults":
    """Run every (repeat, task) pair; ``run_one(task, repeat, episode_index)`` owns one episode."""
    if not tasks:
        raise ValueError("Manifest has no instances")
    if repeats < 1 or jobs < 1:
        raise ValueError(f"repeats and jobs must be positive, got {repeats}, {jobs}")
    jobs_list = [(task, repeat, repeat * len(tasks) + i) for repeat in range(repeats) for i, task in enumerate(tasks)]
    logger.info(f"Evaluating {len(tasks)} instances x {repeats} repeats with {jobs} workers")
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        results = list(pool.map(lambda job: run_one(*job), jobs_list))
    records = [episode_record(result, repeat) for result, (_, repeat, _) in zip(results, jobs_list)]
    return EvalResults(EvalReport(records, label=label), results)


@dataclass
class EvalResults:
    report: EvalReport
    episodes: List[EpisodeResult]

    def modes(self) -> List[StepMode]:
        return [mode for result in self.episodes for mode in result.modes]


def modes_frame(modes: Sequence[StepMode]) -> pd.DataFrame:
    return pd.DataFrame([asdict(m) for m in modes], columns=MODE_COLUMNS)


def write_modes_csv(modes: Sequence[StepMode], output_file) -> Path:
    """Per-expansion temperature/top-p series for external plotting."""
    path = Path(output_file)
    path.parent.mkdir(parents=True, exist_ok=True)
    df = modes_frame(modes)
    df.to_csv(path, index=False)
    logger.info(f"Saved {len(df)} generation settings to {path}")
    return path
