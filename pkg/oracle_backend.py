"""
Scripted oracle backend.

Answers every prompt family from the exact solvers in ``tasks``: the task is
recognised by its description inside the prompt and the thought under
consideration is recovered from the serialized subgraph. Replies are
bit-deterministic given (prompt, kind, sampling settings, seed).
"""

import hashlib
import logging
import math
import re
import threading
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

from config import OracleConfig
from errors import MalformedProviderReply, Unparseable
from llm_backend import LlmRequest, LlmResponse, RequestKind, UsageLedger, count_tokens
from prompts import parse_braced_group, parse_tau
from tasks import TaskSpec, rules_for

logger = logging.getLogger(__name__)

_BRANCHES = re.compile(r"Generate (\d+) different thoughts")
NO_MOVES_REPLY = "No further steps are possible from this state."

FORMAT_INFO = {
    "game24": (
        "Each step takes the remaining numbers, combines two of them with one of + - * /, "
        "and outputs the new list of numbers.\n"
        "Input format: Input:[a,b,c,d]\nStep format: Plan:a op b = c\nOutput format: Output:[remaining numbers]\n"
        "Example 1:\n"
        "Input:[4,4,6,8] Plan:4 + 8 = 12 Output:[4,6,12]\n"
        "Input:[4,6,12] Plan:6 - 4 = 2 Output:[12,2]\n"
        "Input:[12,2] Plan:12 * 2 = 24 Output:[24]\n"
        "Example 2:\n"
        "Input:[2,9,10,12] Plan:12 * 2 = 24 Output:[9,10,24]\n"
        "Input:[9,10,24] Plan:10 - 9 = 1 Output:[24,1]\n"
        "Input:[24,1] Plan:24 * 1 = 24 Output:[24]\n"
        "Example 3:\n"
        "Input:[4,9,10,13] Plan:13 - 9 = 4 Output:[4,10,4]\n"
        "Input:[4,10,4] Plan:10 - 4 = 6 Output:[4,6]\n"
        "Input:[4,6] Plan:4 * 6 = 24 Output:[24]"
    ),
    "latin": (
        "Each step fills the first incomplete row with a permutation that keeps every column free of repeats. "
        "0 marks an empty cell.\n"
        "Input format: Input:[[row],[row],...]\nStep format: Plan:fill row r with [values]\n"
        "Output format: Output:[[row],[row],...]\n"
        "Example 1:\n"
        "Input:[[0,0,0],[0,0,0],[0,0,0]] Plan:fill row 1 with [1,2,3] Output:[[1,2,3],[0,0,0],[0,0,0]]\n"
        "Input:[[1,2,3],[0,0,0],[0,0,0]] Plan:fill row 2 with [2,3,1] Output:[[1,2,3],[2,3,1],[0,0,0]]\n"
        "Input:[[1,2,3],[2,3,1],[0,0,0]] Plan:fill row 3 with [3,1,2] Output:[[1,2,3],[2,3,1],[3,1,2]]\n"
        "Example 2:\n"
        "Input:[[2,0],[0,0]] Plan:fill row 1 with [2,1] Output:[[2,1],[0,0]]\n"
        "Input:[[2,1],[0,0]] Plan:fill row 2 with [1,2] Output:[[2,1],[1,2]]\n"
        "Example 3:\n"
        "Input:[[0,3,0],[0,0,0],[0,0,2]] Plan:fill row 1 with [2,3,1] Output:[[2,3,1],[0,0,0],[0,0,2]]\n"
        "Input:[[2,3,1],[0,0,0],[0,0,2]] Plan:fill row 2 with [3,1,2] Output:[[2,3,1],[3,1,2],[0,0,2]]\n"
        "Input:[[2,3,1],[3,1,2],[0,0,2]] Plan:fill row 3 with [1,2,3] Output:[[2,3,1],[3,1,2],[1,2,3]]"
    ),
    "knights": (
        "Each step decides the identity of the next undecided inhabitant.\n"
        "Input format: Input:[A=?,B=?,...]\nStep format: Plan:X is a knight|knave\n"
        "Output format: Output:[A=Knight,B=?,...]\n"
        "Example 1:\n"
        "Input:[A=?,B=?] Plan:A is a knight Output:[A=Knight,B=?]\n"
        "Input:[A=Knight,B=?] Plan:B is a knave Output:[A=Knight,B=Knave]\n"
        "Example 2:\n"
        "Input:[A=?,B=?] Plan:A is a knave Output:[A=Knave,B=?]\n"
        "Input:[A=Knave,B=?] Plan:B is a knight Output:[A=Knave,B=Knight]\n"
        "Example 3:\n"
        "Input:[A=?,B=?,C=?] Plan:A is a knight Output:[A=Knight,B=?,C=?]\n"
        "Input:[A=Knight,B=?,C=?] Plan:B is a knight Output:[A=Knight,B=Knight,C=?]\n"
        "Input:[A=Knight,B=Knight,C=?] Plan:C is a knave Output:[A=Knight,B=Knight,C=Knave]"
    ),
    "creative": (
        "Each step chooses two elements of the list, expands bare words or sentences into text and "
        "joins them into one element.\n"
        "Input format: Input:[\"element\",...]\nStep format: Plan:choose element i and element j\n"
        "Output format: Output:[\"combined\",\"remaining\",...]\n"
        "Example 1:\n"
        "Input:[\"Elephant\",\"Solar\",\"Lantern\"] Plan:choose element 0 and element 2 "
        "Output:[\"The elephant gently lifted the lantern with its trunk.\",\"Solar\"]\n"
        "Input:[\"The elephant gently lifted the lantern with its trunk.\",\"Solar\"] Plan:choose element 0 and element 1 "
        "Output:[\"The elephant gently lifted the lantern with its trunk. Solar panels powered the lantern.\"]\n"
        "Example 2:\n"
        "Input:[\"Harbor\",\"Violin\"] Plan:choose element 0 and element 1 "
        "Output:[\"The harbor was quiet. A violin played somewhere on the pier.\"]\n"
        "Example 3:\n"
        "Input:[\"Meadow\",\"Falcon\",\"Ember\"] Plan:choose element 1 and element 2 "
        "Output:[\"The falcon circled above the last ember of the fire.\",\"Meadow\"]\n"
        "Input:[\"The falcon circled above the last ember of the fire.\",\"Meadow\"] Plan:choose element 0 and element 1 "
        "Output:[\"The falcon circled above the last ember of the fire. Below it the meadow lay still.\"]"
    ),
}

EVAL_INFO = {
    "game24": (
        "A step helps when 24 is still reachable from the remaining numbers. Output [24] is complete (10). "
        "Fewer remaining numbers with 24 still reachable score higher. A list from which 24 cannot be reached scores 0 or 1."
    ),
    "latin": (
        "A step helps when the grid keeps every row and column free of repeats, keeps all given cells, "
        "and can still be completed. More completed rows score higher; a grid that cannot be completed scores 0."
    ),
    "knights": (
        "A step helps when the identities decided so far agree with at least one assignment under which every "
        "knight's statement is true and every knave's statement is false. More decided inhabitants score higher; "
        "a contradiction scores 0."
    ),
    "creative": (
        "A step helps when the combined text keeps every required word or opening sentence. "
        "Score by the share of required items already woven into a single passage."
    ),
}


class OracleBackend:
    """Deterministic scripted stand-in for the language model."""

    def __init__(self, tasks: Iterable[TaskSpec] = (), config: Optional[OracleConfig] = None):
        self.config = config or OracleConfig()
        self.ledger = UsageLedger()
        self._tasks: Dict[str, TaskSpec] = {}
        self._memo: Dict[Tuple, str] = {}
        self._lock = threading.Lock()
        for task in tasks:
            self.register(task)

    def register(self, task: TaskSpec) -> None:
        with self._lock:
            self._tasks[task.description] = task

    def _match_task(self, prompt: str) -> TaskSpec:
        with self._lock:
            candidates = [d for d in self._tasks if d in prompt]
            if not candidates:
                raise MalformedProviderReply("Oracle has no registered task matching the prompt")
            return self._tasks[max(candidates, key=len)]

    def _rng(self, req: LlmRequest) -> np.random.Generator:
        key = f"{self.config.seed}|{req.kind.value}|{req.temperature!r}|{req.top_p!r}|{req.prompt}"
        digest = hashlib.sha256(key.encode("utf-8")).digest()
        return np.random.default_rng(int.from_bytes(digest[:8], "big"))

    def complete(self, req: LlmRequest) -> LlmResponse:
        req.validate()
        key = (req.kind, req.prompt, req.temperature, req.top_p)
        with self._lock:
            text = self._memo.get(key)
        if text is None:
            text = self._answer(req)
            with self._lock:
                self._memo[key] = text
        response = LlmResponse(text, count_tokens(req.prompt), count_tokens(text))
        self.ledger.record(req.kind, response.prompt_tokens, response.completion_tokens)
        return response

    def _answer(self, req: LlmRequest) -> str:
        task = self._match_task(req.prompt)
        if req.kind == RequestKind.FORMAT:
            return FORMAT_INFO[task.family]
        if req.kind == RequestKind.EVAL_INFO:
            return EVAL_INFO[task.family]
        if req.kind == RequestKind.CLASSIFY:
            return self._classify(task, req)
        if req.kind == RequestKind.EVALUATE:
            return self._evaluate(task, req)
        return self._generate(task, req)

    def _classify(self, task: TaskSpec, req: LlmRequest) -> str:
        rules = rules_for(task)
        try:
            thoughts = parse_tau(req.prompt)
        except Unparseable:
            return "1"
        state = rules.state_of(task, thoughts[-1])
        if state is None:
            return "1"
        if rules.is_solved(task, state):
            return "3"
        if rules.is_solvable(task, state):
            return "2"
        if self.config.error_rate > 0 and len(thoughts) >= 2:
            former = rules.state_of(task, thoughts[-2])
            if former is not None and rules.is_solvable(task, former):
                if self._rng(req).random() < self.config.error_rate:
                    return "4"
        return "1"

    def _evaluate(self, task: TaskSpec, req: LlmRequest) -> str:
        rules = rules_for(task)
        anchor = req.prompt.find(task.description) + len(task.description)
        start = req.prompt.find("{", anchor)
        if start < 0:
            return "0"
        try:
            thought, _ = parse_braced_group(req.prompt, start)
        except Unparseable:
            return "0"
        state = rules.state_of(task, thought)
        return "0" if state is None else str(rules.score(task, state))

    def _generate(self, task: TaskSpec, req: LlmRequest) -> str:
        rules = rules_for(task)
        match = _BRANCHES.search(req.prompt)
        wanted = max(1, int(match.group(1))) if match else 1
        try:
            thoughts = parse_tau(req.prompt)
        except Unparseable:
            return NO_MOVES_REPLY
        state = rules.state_of(task, thoughts[-1])
        moves = rules.moves(task, state) if state is not None else []
        if not moves:
            return NO_MOVES_REPLY
        solvable = [rules.is_solvable(task, move.state) for move in moves]
        chosen = self._choose(req, solvable, wanted)
        return "\n".join(f"{rank + 1}. {moves[i].text}" for rank, i in enumerate(chosen))

    def _choose(self, req: LlmRequest, solvable: List[bool], wanted: int) -> List[int]:
        """Pick move indices: a solvable move first when one exists, then the rest by noisy rank."""
        base = sorted(range(len(solvable)), key=lambda i: (not solvable[i], i))
        if self.config.pad_with_dead_ends:
            dead = [i for i in base if not solvable[i]]
            spare = [i for i in base[1:] if solvable[i]]
            return [base[0]] + (dead + spare)[:wanted - 1]
        rng = self._rng(req)
        noise = rng.gumbel(size=len(base)) * 0.5 * req.temperature
        pool = base[:max(wanted, math.ceil(req.top_p * len(base)))]
        ranked = sorted(pool, key=lambda i: -((1.0 if solvable[i] else 0.0) + noise[i]))
        first = next((i for i in ranked if solvable[i]), ranked[0])
        return [first] + [i for i in ranked if i != first][:wanted - 1]
