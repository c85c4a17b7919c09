"""
PPO with GAE over per-node decisions.

Episodes are collected by the engine into a ``TrajectoryBuffer``; ``update``
turns the buffer into a ``PolicyBatch`` and runs clipped-surrogate gradient
descent with global-norm clipping. ``train`` alternates collection and update
for a number of rounds and appends one record per update to a JSONL log.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from config import TrainConfig
from errors import EmptyBuffer, ShapeError
from features import HashFeaturizer
from policy import (
    LossComponents,
    LossSpec,
    ModeVector,
    PolicyBatch,
    PolicyParams,
    actor_dist,
    aggregate_inputs,
    apply_gradients,
    backward,
    batch_loss,
    gcn_forward,
    global_norm,
    graph_tensors,
    sample_action,
    critic_value,
)
from reasoning_graph import ReasoningGraph, new_graph

logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(levelname)s - %(message)s')
logger = logging.getLogger(__name__)


@dataclass
class Transition:
    graph_snapshot: Dict[str, Any]
    node: str
    action: ModeVector
    log_prob_old: float
    reward: float = 0.0
    value_old: float = 0.0
    done: bool = False
    episode: int = 0
    step: int = 0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "node": self.node,
            "action": self.action.to_dict(),
            "log_prob_old": self.log_prob_old,
            "reward": self.reward,
            "value_old": self.value_old,
            "done": self.done,
            "episode": self.episode,
            "step": self.step,
        }


class TrajectoryBuffer:
    """Transitions in decision order; each episode is contiguous and ends with done."""

    def __init__(self, transitions: Optional[Sequence[Transition]] = None):
        self.transitions: List[Transition] = list(transitions or [])

    def __len__(self) -> int:
        return len(self.transitions)

    def __iter__(self) -> Iterator[Transition]:
        return iter(self.transitions)

    def append(self, transition: Transition) -> None:
        if not np.isfinite(transition.log_prob_old):
            raise ValueError(f"log_prob_old must be finite for node {transition.node}")
        self.transitions.append(transition)

    def extend(self, other: "TrajectoryBuffer") -> None:
        for transition in other:
            self.append(transition)

    def mark_done(self) -> None:
        if self.transitions:
            self.transitions[-1].done = True

    def rewards(self) -> np.ndarray:
        return np.array([t.reward for t in self.transitions], dtype=float)

    def values(self) -> np.ndarray:
        return np.array([t.value_old for t in self.transitions], dtype=float)

    def dones(self) -> np.ndarray:
        return np.array([t.done for t in self.transitions], dtype=bool)

    def validate(self) -> None:
        if self.transitions and not self.transitions[-1].done:
            raise ValueError("Last transition must close its episode")
        seen = set()
        for i, transition in enumerate(self.transitions):
            if transition.episode in seen and (i == 0 or self.transitions[i - 1].episode != transition.episode):
                raise ValueError(f"Episode {transition.episode} is not contiguous")
            seen.add(transition.episode)
            if i + 1 < len(self.transitions) and self.transitions[i + 1].episode != transition.episode:
                if not transition.done:
                    raise ValueError(f"Episode {transition.episode} does not end with done")


@dataclass
class TrainStats:
    update_idx: int
    mean_reward: float
    clip_fraction: float
    value_loss: float
    entropy: float
    grad_norm: float
    ratio_mean: float = 1.0
    first_ratio_mean: float = 1.0
    transitions: int = 0
    steps: int = 0

    def log_record(self) -> Dict[str, Any]:
        return {
            "update_idx": self.update_idx,
            "mean_reward": self.mean_reward,
            "clip_fraction": self.clip_fraction,
            "value_loss": self.value_loss,
            "entropy": self.entropy,
            "grad_norm": self.grad_norm,
        }


def td_errors(rewards, values, dones, gamma: float) -> np.ndarray:
    """δ_t = r_t + γ V(s_{t+1}) - V(s_t), bootstrapping 0 after a terminal step."""
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    dones = np.asarray(dones, dtype=bool)
    if not (rewards.shape == values.shape == dones.shape) or rewards.ndim != 1:
        raise ShapeError(f"Length mismatch: rewards {rewards.shape}, values {values.shape}, dones {dones.shape}")
    next_values = np.append(values[1:], 0.0)
    next_values[dones] = 0.0
    return rewards + gamma * next_values - values


def gae(deltas, gamma: float, lam: float, dones) -> np.ndarray:
    deltas = np.asarray(deltas, dtype=float)
    dones = np.asarray(dones, dtype=bool)
    advantages = np.zeros_like(deltas)
    running = 0.0
    for t in reversed(range(len(deltas))):
        if dones[t]:
            running = 0.0
        running = deltas[t] + gamma * lam * running
        advantages[t] = running
    return advantages


def prepare_batch(buffer: TrajectoryBuffer, cfg: TrainConfig, aggregate: bool = True) -> PolicyBatch:
    """Advantages, returns and recomputed aggregated inputs for every transition."""
    if len(buffer) == 0:
        raise EmptyBuffer("Cannot build a batch from an empty buffer")
    values = buffer.values()
    dones = buffer.dones()
    deltas = td_errors(buffer.rewards(), values, dones, cfg.gamma)
    advantages = gae(deltas, cfg.gamma, cfg.lam, dones)
    returns = advantages + values
    if cfg.normalize_advantages:
        advantages = (advantages - advantages.mean()) / (advantages.std() + 1e-8)

    # Snapshots are shared by every decision of one step.
    aggregated: Dict[int, Tuple[Dict[str, int], np.ndarray]] = {}
    rows = []
    for transition in buffer:
        key = id(transition.graph_snapshot)
        if key not in aggregated:
            graph = ReasoningGraph.from_dict(transition.graph_snapshot)
            order, features, edges = graph_tensors(graph)
            aggregated[key] = ({node_id: i for i, node_id in enumerate(order)}, aggregate_inputs(features, edges, aggregate))
        index, inputs = aggregated[key]
        rows.append(inputs[index[transition.node]])

    raws = [t.action.raw() for t in buffer]
    return PolicyBatch(
        inputs=np.vstack(rows),
        branch=np.array([t.action.branch_count - 1 for t in buffer], dtype=int),
        temperature_raw=np.array([r[0] for r in raws], dtype=float),
        top_p_raw=np.array([r[1] for r in raws], dtype=float),
        dependency=np.array([float(t.action.use_dependency) for t in buffer]),
        log_prob_old=np.array([t.log_prob_old for t in buffer], dtype=float),
        advantages=advantages,
        returns=returns,
    )


def loss_spec(cfg: TrainConfig, activation: str = "relu") -> LossSpec:
    return LossSpec(clip_eps=cfg.clip_eps, value_coef=cfg.value_coef,
                    entropy_coef=cfg.entropy_coef, activation=activation)


def ppo_loss(params: PolicyParams, batch: PolicyBatch, cfg: TrainConfig,
             activation: str = "relu") -> Tuple[float, LossComponents]:
    components = batch_loss(params, batch, loss_spec(cfg, activation))
    return components.loss, components


def optimize(params: PolicyParams, batch: PolicyBatch, cfg: TrainConfig,
             activation: str = "relu", update_idx: int = 0) -> Tuple[PolicyParams, TrainStats]:
    """Run ``cfg.epochs`` passes of clipped gradient descent over the batch."""
    n = len(batch)
    if n == 0:
        raise EmptyBuffer("Cannot update on an empty batch")
    spec = loss_spec(cfg, activation)
    size = min(cfg.minibatch_size or n, n)
    rng = np.random.default_rng(cfg.seed + update_idx)
    current = params.copy()
    history: List[LossComponents] = []
    norms: List[float] = []

    for _ in range(cfg.epochs):
        order = rng.permutation(n) if size < n else np.arange(n)
        for start in range(0, n, size):
            grads, components = backward(current, batch.subset(order[start:start + size]), spec)
            norm = global_norm(grads)
            if norm > cfg.max_grad_norm:
                grads = {name: g * (cfg.max_grad_norm / norm) for name, g in grads.items()}
            norms.append(global_norm(grads))
            history.append(components)
            current = apply_gradients(current, grads, cfg.lr)

    stats = TrainStats(
        update_idx=update_idx,
        mean_reward=0.0,
        clip_fraction=float(np.mean([c.clip_fraction for c in history])),
        value_loss=float(np.mean([c.value_loss for c in history])),
        entropy=float(np.mean([c.entropy for c in history])),
        grad_norm=float(max(norms)),
        ratio_mean=float(np.mean([c.ratio_mean for c in history])),
        first_ratio_mean=history[0].ratio_mean,
        transitions=n,
        steps=len(history),
    )
    return current, stats


def update(params: PolicyParams, buffer: TrajectoryBuffer, cfg: TrainConfig,
           aggregate: bool = True, activation: str = "relu", update_idx: int = 0) -> Tuple[PolicyParams, TrainStats]:
    if len(buffer) == 0:
        raise EmptyBuffer("Policy update requested without any transitions")
    batch = prepare_batch(buffer, cfg, aggregate)
    updated, stats = optimize(params, batch, cfg, activation, update_idx)
    stats.mean_reward = float(buffer.rewards().mean())
    logger.info(
        f"Update {update_idx}: {stats.transitions} transitions, mean reward {stats.mean_reward:.2f}, "
        f"clip {stats.clip_fraction:.3f}, value loss {stats.value_loss:.3f}, grad norm {stats.grad_norm:.3f}"
    )
    return updated, stats


class TrainingLog:
    """JSONL file with one record per update."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def append(self, stats: TrainStats) -> None:
        with open(self.path, "a", encoding="utf-8") as f:
            f.write(json.dumps(stats.log_record()) + "\n")

    def read(self) -> List[Dict[str, Any]]:
        if not self.path.exists():
            return []
        with open(self.path, encoding="utf-8") as f:
            return [json.loads(line) for line in f if line.strip()]


def train(params: PolicyParams, collect: Callable[[PolicyParams, int], TrajectoryBuffer], cfg: TrainConfig,
          rounds: Optional[int] = None, start_round: int = 0, aggregate: bool = True,
          log: Optional[TrainingLog] = None,
          on_round: Optional[Callable[[int, PolicyParams, TrainStats], None]] = None) -> Tuple[PolicyParams, List[TrainStats]]:
    """Alternate collection and update; ``collect(params, round)`` returns a sealed buffer."""
    rounds = cfg.rounds if rounds is None else rounds
    all_stats = []
    for round_index in range(start_round, start_round + rounds):
        buffer = collect(params, round_index)
        if len(buffer) == 0:
            logger.warning(f"Round {round_index + 1} produced no transitions; parameters unchanged")
            continue
        params, stats = update(params, buffer, cfg, aggregate=aggregate, update_idx=round_index)
        all_stats.append(stats)
        if log is not None:
            log.append(stats)
        if on_round is not None:
            on_round(round_index + 1, params, stats)
    return params, all_stats


@dataclass
class BanditEnvironment:
    """One-decision episodes: reward 10 iff the sampled branch count hits the context's target."""
    targets: Sequence[int]
    dimension: int = 16
    contexts: List[Dict[str, Any]] = field(default_factory=list)

    def __post_init__(self):
        featurizer = HashFeaturizer(self.dimension)
        for i in range(len(self.targets)):
            graph = new_graph(f"bandit context {i}")
            graph.set_feature(graph.root, featurizer.featurize(graph.node(graph.root).text))
            self.contexts.append(graph.to_dict())

    def _rep(self, params: PolicyParams, context: Dict[str, Any]) -> np.ndarray:
        graph = ReasoningGraph.from_dict(context)
        _, features, edges = graph_tensors(graph)
        return gcn_forward(params, features, edges)[0]

    def collect(self, params: PolicyParams, rng: np.random.Generator, episodes: int) -> TrajectoryBuffer:
        buffer = TrajectoryBuffer()
        for episode in range(episodes):
            i = episode % len(self.contexts)
            context = self.contexts[i]
            rep = self._rep(params, context)
            mode, lp = sample_action(actor_dist(params, rep), rng)
            reward = 10.0 if mode.branch_count == self.targets[i] else 0.0
            buffer.append(Transition(context, context["nodes"][0]["id"], mode, lp, reward,
                                     critic_value(params, rep), done=True, episode=episode, step=1))
        return buffer

    def expected_reward(self, params: PolicyParams) -> float:
        total = 0.0
        for context, target in zip(self.contexts, self.targets):
            total += 10.0 * actor_dist(params, self._rep(params, context)).branch_probs[target - 1]
        return total / len(self.contexts)
