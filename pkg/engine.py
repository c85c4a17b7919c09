"""
The reasoning loop.

An episode starts from a one-node graph holding the task description, asks
the model once for a step format and once for evaluation criteria, then
repeats: classify every pending node, reward the previous step's actions,
apply the labels, and expand every Continue node with a mode chosen by the
selector. It stops when a node is labeled Final, when every pending node is
Stop after one regeneration pass, or when a budget runs out.
"""

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from config import EpisodeConfig
from errors import EmptyGeneration, Unparseable
from features import FeatureProvider, HashFeaturizer
from llm_backend import LlmBackend, LlmRequest, LlmResponse, MeteredBackend, RequestKind, UsageLedger, complete
from policy import ModeSelector, ModeVector
from prompts import TemplateKind, TemplateSet, braced, parse_label, parse_score, parse_thoughts, tau, tau_single
from reasoning_graph import (
    ALL_STOPPED,
    FINAL_FOUND,
    Label,
    ReasoningGraph,
    TerminationState,
    add_children,
    ancestor_subgraph,
    apply_label,
    new_graph,
    termination_state,
)
from tasks import TaskSpec, Verdict, final_answer, verify_episode
from trace_log import StepContext, TraceRecorder
from trainer import TrajectoryBuffer, Transition

logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(levelname)s - %(message)s')
logger = logging.getLogger(__name__)

SOLVED = "Solved"
EXHAUSTED = "Exhausted"
BUDGET_HIT = "BudgetHit"
FINAL_REWARD = 100.0

Call = Tuple[LlmRequest, LlmResponse]


@dataclass
class StepMode:
    """Generation settings chosen for one expansion."""
    episode: int
    step: int
    node: str
    branch_count: int
    temperature: float
    top_p: float
    use_dependency: bool


@dataclass
class NodeVerdict:
    node: str
    label: Label
    raw: str
    retried: bool
    feature: Optional[np.ndarray]
    calls: List[Call] = field(default_factory=list)


@dataclass
class StepReport:
    step: int
    labels: Dict[str, Label]
    expanded: Dict[str, List[str]]
    regenerated: List[str]
    termination: TerminationState
    budget_hit: bool = False


@dataclass
class EpisodeResult:
    task: TaskSpec
    outcome: str
    final_text: Optional[str]
    graph: ReasoningGraph
    transitions: TrajectoryBuffer
    usage: UsageLedger
    generated_nodes: int
    steps: int
    trace: TraceRecorder
    modes: List[StepMode]
    solution_path: List[str]
    verdict: Optional[Verdict] = None

    @property
    def solved(self) -> bool:
        return self.outcome == SOLVED

    def summary(self) -> Dict[str, Any]:
        return {
            "task": self.task.name,
            "family": self.task.family,
            "outcome": self.outcome,
            "final_text": self.final_text,
            "answer": final_answer(self.task, self.final_text) if self.final_text else None,
            "verified": self.verdict.accepted if self.verdict is not None else None,
            "generated_nodes": self.generated_nodes,
            "steps": self.steps,
            "solution_path": self.solution_path,
            "rewards": [t.reward for t in self.transitions],
            "usage": self.usage.to_dict(),
        }

    def to_json(self) -> str:
        """Summary plus full graph; stable across replays with the same seed."""
        return json.dumps({"summary": self.summary(), "graph": self.graph.to_dict()}, sort_keys=True)


def _judge_request(prompt: str, kind: RequestKind, cfg: EpisodeConfig) -> LlmRequest:
    return LlmRequest(prompt, kind, cfg.judge_temperature, cfg.judge_top_p, cfg.max_tokens)


def first_step(task: TaskSpec, backend: LlmBackend, cfg: EpisodeConfig,
               templates: Optional[TemplateSet] = None,
               on_call: Optional[Callable[[LlmRequest, LlmResponse], None]] = None) -> Tuple[ReasoningGraph, str, str]:
    """Root graph plus the format and evaluation-criteria texts for this task."""
    templates = templates or TemplateSet()
    graph = new_graph(task.description)
    texts = []
    for template, kind in ((TemplateKind.FORMAT, RequestKind.FORMAT), (TemplateKind.EVAL_INFO, RequestKind.EVAL_INFO)):
        req = _judge_request(templates.render(template, task=task.description), kind, cfg)
        response = complete(backend, req)
        if on_call is not None:
            on_call(req, response)
        texts.append(response.text)
    return graph, texts[0], texts[1]


def _classify_one(g: ReasoningGraph, node_id: str, backend: LlmBackend, templates: TemplateSet,
                  features: Optional[FeatureProvider], cfg: EpisodeConfig) -> NodeVerdict:
    """Label one node against ``g``; never mutates the graph."""
    subgraph = tau(ancestor_subgraph(g, node_id, cfg.beta), g)
    prompt = templates.render(TemplateKind.NODE_CLASS, task=g.node(g.root).text, subgraph=subgraph)
    req = _judge_request(prompt, RequestKind.CLASSIFY, cfg)
    calls = []
    label, raw, retried = Label.STOP, "", False
    for attempt in range(2):
        response = complete(backend, req)
        calls.append((req, response))
        raw = response.text
        try:
            label = Label(parse_label(raw).label)
            break
        except Unparseable:
            retried = True
            logger.warning(f"Unparseable classification for {node_id} (attempt {attempt + 1}): {raw[:80]!r}")
    feature = features.featurize(g.node(node_id).text) if features is not None else None
    return NodeVerdict(node_id, label, raw, retried, feature, calls)


def _classify_nodes(g: ReasoningGraph, nodes: Sequence[str], backend: LlmBackend, templates: TemplateSet,
                    features: Optional[FeatureProvider], cfg: EpisodeConfig) -> List[NodeVerdict]:
    if not nodes:
        return []
    with ThreadPoolExecutor(max_workers=cfg.classify_parallelism) as pool:
        return list(pool.map(lambda v: _classify_one(g, v, backend, templates, features, cfg), nodes))


def classify_pending(g: ReasoningGraph, backend: LlmBackend, beta: int = 2,
                     templates: Optional[TemplateSet] = None, features: Optional[FeatureProvider] = None,
                     cfg: Optional[EpisodeConfig] = None) -> Dict[str, Label]:
    """Label every present node concurrently and refresh its feature."""
    if not g.present:
        raise ValueError("No pending nodes to classify")
    cfg = cfg or EpisodeConfig(beta=beta)
    snapshot = g.snapshot()
    verdicts = _classify_nodes(snapshot, list(g.present), backend, templates or TemplateSet(), features, cfg)
    for verdict in verdicts:
        if verdict.feature is not None:
            g.set_feature(verdict.node, verdict.feature)
    return {verdict.node: verdict.label for verdict in verdicts}


@dataclass
class _PendingAction:
    transition: Optional[Transition]
    node: str
    children: List[str]


class ReasoningEngine:
    """Runs one episode; the graph and trace belong to this object only."""

    def __init__(self, task: TaskSpec, backend: LlmBackend, selector: ModeSelector,
                 cfg: Optional[EpisodeConfig] = None, features: Optional[FeatureProvider] = None,
                 templates: Optional[TemplateSet] = None, episode: int = 0):
        self.task = task
        self.cfg = cfg or EpisodeConfig()
        self.backend = MeteredBackend(backend)
        self.selector = selector
        self.features = features or HashFeaturizer(self.cfg.feature_dim)
        self.templates = templates or TemplateSet()
        self.episode = episode
        self.rng = np.random.default_rng([self.cfg.seed, episode])
        self.trace = TraceRecorder(episode)
        self.transitions = TrajectoryBuffer()
        self.modes: List[StepMode] = []
        self.graph: Optional[ReasoningGraph] = None
        self.x_fmt = ""
        self.x_eva = ""
        self.generated = 0
        self.regen_used = 0
        self.steps_taken = 0
        self._awaiting: List[_PendingAction] = []
        self._expansion_modes: Dict[str, ModeVector] = {}

    # LLM plumbing

    def _record_calls(self, step: int, node: Optional[str], calls: Sequence[Call]) -> None:
        for req, response in calls:
            self.trace.add_event(step, "requested", node, kind=req.kind.value,
                                 prompt_tokens=response.prompt_tokens,
                                 completion_tokens=response.completion_tokens)

    def _call(self, step: int, node: Optional[str], req: LlmRequest) -> LlmResponse:
        response = complete(self.backend, req)
        self._record_calls(step, node, [(req, response)])
        return response

    # Steps

    def first_step(self) -> ReasoningGraph:
        with StepContext(self.trace, 1):
            self.graph, self.x_fmt, self.x_eva = first_step(
                self.task, self.backend, self.cfg, self.templates,
                on_call=lambda req, response: self._record_calls(1, None, [(req, response)]),
            )
            self.trace.add_event(1, "created", self.graph.root, text=self.task.description, parent=None)
        logger.info(f"Episode {self.episode}: {self.task.name or self.task.family} started")
        return self.graph

    def _classify(self, nodes: Sequence[str]) -> Dict[str, Label]:
        g = self.graph
        verdicts = _classify_nodes(g.snapshot(), nodes, self.backend, self.templates, self.features, self.cfg)
        labels = {}
        for verdict in verdicts:
            g.set_feature(verdict.node, verdict.feature)
            self._record_calls(g.step, verdict.node, verdict.calls)
            self.trace.add_event(g.step, "classified", verdict.node, label=int(verdict.label),
                                 retried=verdict.retried, raw=verdict.raw[:200])
            labels[verdict.node] = verdict.label
        return labels

    def _generation_context(self, node_id: str, use_dependency: bool) -> str:
        g = self.graph
        if use_dependency:
            return tau(ancestor_subgraph(g, node_id, self.cfg.beta), g)
        return tau_single(g.node(node_id).text)

    def _generate(self, node_id: str, mode: ModeVector, branch: int, temperature: float) -> List[str]:
        """Generate up to ``branch`` thoughts under ``node_id``, re-prompting once on an empty reply."""
        prompt = self.templates.render_generate(
            self.task.description, self._generation_context(node_id, mode.use_dependency),
            self.x_fmt, branch, mode.use_dependency,
        )
        req = LlmRequest(prompt, RequestKind.GENERATE, temperature, mode.top_p, self.cfg.max_tokens)
        for attempt in range(2):
            response = self._call(self.graph.step, node_id, req)
            try:
                return parse_thoughts(response.text, branch)
            except EmptyGeneration:
                logger.warning(f"Empty generation under {node_id} (attempt {attempt + 1})")
        raise EmptyGeneration(f"No thoughts generated under {node_id}")

    def _regenerate(self, stopped: Sequence[str]) -> List[str]:
        """Rewrite label-1 leaves in place, one Generate call per parent.

        Nodes that already have children keep their text so it still matches their subtree.
        """
        g = self.graph
        groups: Dict[str, List[str]] = {}
        for node_id in stopped:
            parent = g.node(node_id).parent
            if parent is None:
                continue
            if g.children(node_id):
                logger.debug(f"{node_id} already expanded; not regenerated")
                continue
            groups.setdefault(parent, []).append(node_id)
        regenerated = []
        for parent, kids in groups.items():
            mode = self._expansion_modes.get(parent) or ModeVector(len(kids), 1.0, 1.0, False)
            try:
                texts = self._generate(parent, mode, len(kids), self.cfg.regen_temperature)
            except EmptyGeneration:
                continue
            for kid, text in zip(kids, texts):
                g.replace_text(kid, text)
                self.trace.add_event(g.step, "created", kid, text=text, parent=parent, regenerated=True)
                regenerated.append(kid)
        return regenerated

    def assign_rewards(self, labels: Dict[str, Label]) -> TrajectoryBuffer:
        """Reward the previous step's actions from their children's labels and scores."""
        g = self.graph
        rewarded = TrajectoryBuffer()
        to_score = [
            child for action in self._awaiting
            if not any(labels.get(c) == Label.FINAL for c in action.children)
            for child in action.children
        ]

        def score(child: str) -> Tuple[int, Call]:
            prompt = self.templates.render(TemplateKind.EVALUATE, task=self.task.description,
                                           results=braced(g.node(child).text), eval_info=self.x_eva)
            req = _judge_request(prompt, RequestKind.EVALUATE, self.cfg)
            response = complete(self.backend, req)
            try:
                value = parse_score(response.text)
            except Unparseable:
                logger.warning(f"Unparseable score for {child}: {response.text[:80]!r}")
                value = 0
            return value, (req, response)

        scores: Dict[str, int] = {}
        if to_score:
            with ThreadPoolExecutor(max_workers=self.cfg.classify_parallelism) as pool:
                results = list(pool.map(score, to_score))
            for child, (value, call) in zip(to_score, results):
                self._record_calls(g.step, child, [call])
                g.node(child).eval_score = value
                scores[child] = value

        for action in self._awaiting:
            if any(labels.get(c) == Label.FINAL for c in action.children):
                reward = FINAL_REWARD
            elif not action.children:
                reward = 0.0
            elif self.cfg.reward_aggregation == "mean":
                reward = float(np.mean([scores[c] for c in action.children]))
            else:
                reward = float(max(scores[c] for c in action.children))
            self.trace.add_event(g.step, "rewarded", action.node, reward=reward, children=action.children)
            if action.transition is not None:
                action.transition.reward = reward
                rewarded.append(action.transition)
        self._awaiting = []
        return rewarded

    def _apply_labels(self, labels: Dict[str, Label]) -> None:
        g = self.graph
        for node_id, label in labels.items():
            if label == Label.BACKTRACK and g.node(node_id).parent is None:
                logger.warning(f"Backtrack on root {node_id} demoted to Stop")
                label = Label.STOP
                labels[node_id] = label
            effect = apply_label(g, node_id, label)
            self.trace.add_event(g.step, "labeled", node_id, label=int(effect.label),
                                 retired=effect.retired, restored=effect.restored)

    def _expand(self, node_id: str, snapshot: Dict[str, Any]) -> List[str]:
        g = self.graph
        decision = self.selector.select(node_id, self.rng)
        mode = decision.mode
        branch = min(mode.branch_count, self.cfg.max_nodes - len(g.nodes))
        try:
            texts = self._generate(node_id, mode, branch, mode.temperature)
        except EmptyGeneration:
            apply_label(g, node_id, Label.STOP)
            self.trace.add_event(g.step, "labeled", node_id, label=int(Label.STOP), retired=True,
                                 restored=None, reason="empty generation")
            children: List[str] = []
        else:
            children = add_children(g, node_id, texts)
            self.generated += len(children)
            for child in children:
                self.trace.add_event(g.step, "created", child, text=g.node(child).text, parent=node_id)
            self.trace.add_event(g.step, "expanded", node_id, children=children, mode=mode.to_dict(),
                                 log_prob=decision.log_prob, value=decision.value)
        self._expansion_modes[node_id] = mode
        self.modes.append(StepMode(self.episode, g.step, node_id, mode.branch_count,
                                   mode.temperature, mode.top_p, mode.use_dependency))
        transition = None
        if self.selector.records_transitions:
            transition = Transition(snapshot, node_id, mode, decision.log_prob, value_old=decision.value,
                                    episode=self.episode, step=g.step)
        self._awaiting.append(_PendingAction(transition, node_id, children))
        return children

    def kth_step(self) -> StepReport:
        g = self.graph
        g.step += 1
        self.steps_taken += 1
        with StepContext(self.trace, g.step):
            labels = self._classify(list(g.present))
            regenerated: List[str] = []
            if labels and all(label == Label.STOP for label in labels.values()) and self.regen_used < self.cfg.regen_limit:
                self.regen_used += 1
                logger.warning(f"Step {g.step}: every pending node is Stop, regenerating")
                regenerated = self._regenerate(list(labels))
                if regenerated:
                    labels.update(self._classify(regenerated))
            for transition in self.assign_rewards(labels):
                self.transitions.append(transition)
            self._apply_labels(labels)

            state = termination_state(g)
            report = StepReport(g.step, labels, {}, regenerated, state)
            if not state.is_continue:
                return report
            if len(g.nodes) >= self.cfg.max_nodes:
                report.budget_hit = True
                return report

            continuing = [v for v, label in labels.items() if label == Label.CONTINUE and v in g.present]
            if continuing:
                self.selector.prepare(g)
                snapshot = g.to_dict()
            for node_id in continuing:
                if len(g.nodes) >= self.cfg.max_nodes:
                    logger.info(f"Node budget reached; {node_id} left unexpanded")
                    break
                report.expanded[node_id] = self._expand(node_id, snapshot)
            return report

    def _close(self) -> TerminationState:
        """Classify what the last expansion produced so a final thought is not missed."""
        g = self.graph
        g.step += 1
        with StepContext(self.trace, g.step):
            labels = self._classify(list(g.present))
            for transition in self.assign_rewards(labels):
                self.transitions.append(transition)
            self._apply_labels(labels)
            return termination_state(g)

    def run(self) -> EpisodeResult:
        self.first_step()
        outcome = BUDGET_HIT
        while True:
            if self.steps_taken >= self.cfg.max_steps:
                if self._awaiting:
                    if self._close().kind == FINAL_FOUND:
                        outcome = SOLVED
                break
            report = self.kth_step()
            if report.termination.kind == FINAL_FOUND:
                outcome = SOLVED
                break
            if report.termination.kind == ALL_STOPPED:
                outcome = EXHAUSTED
                break
            if report.budget_hit:
                break
        return self._finish(outcome)

    def _finish(self, outcome: str) -> EpisodeResult:
        g = self.graph
        self.transitions.mark_done()
        final_node = termination_state(g).node if outcome == SOLVED else None
        path: List[str] = []
        final_text = None
        verdict = None
        if final_node is not None:
            final_text = g.node(final_node).text
            path = [g.node(v).text for v in g.path_to(final_node)[1:]]
            verdict = verify_episode(self.task, path)
            if not verdict.accepted:
                logger.warning(f"Final thought failed verification: {verdict.reason}")
        generated = len(g.nodes) - 1
        if generated != self.generated:
            raise RuntimeError(f"Node accounting mismatch: {generated} nodes vs {self.generated} insertions")
        self.trace.add_event(g.step, "terminated", final_node, outcome=outcome, generated_nodes=generated,
                             access_count=self.backend.ledger.access_count)
        logger.info(f"Episode {self.episode}: {outcome} after {self.steps_taken} steps, {generated} generated nodes")
        return EpisodeResult(
            task=self.task,
            outcome=outcome,
            final_text=final_text,
            graph=g,
            transitions=self.transitions,
            usage=self.backend.ledger.snapshot(),
            generated_nodes=generated,
            steps=self.steps_taken,
            trace=self.trace,
            modes=self.modes,
            solution_path=path,
            verdict=verdict,
        )


def run_episode(task: TaskSpec, backend: LlmBackend, selector: ModeSelector,
                cfg: Optional[EpisodeConfig] = None, features: Optional[FeatureProvider] = None,
                templates: Optional[TemplateSet] = None, episode: int = 0) -> EpisodeResult:
    return ReasoningEngine(task, backend, selector, cfg, features, templates, episode).run()
