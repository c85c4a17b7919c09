"""
Task families, exact verifiers and the scripted solvers behind the oracle.

Families:
    game24    - combine four numbers with + - * / to reach 24
    latin     - fill an n x n grid so no row or column repeats (the "Sudoku" variant)
    knights   - knights always tell the truth, knaves always lie
    creative  - compose a passage from given words or sentences

Every family also exposes step rules (state parsing, legal moves, solvability)
in the "Input:[...] Plan:... Output:[...]" line format that the oracle emits.
"""

import hashlib
import itertools
import json
import logging
import random
import re
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

from errors import InvalidTask

logger = logging.getLogger(__name__)

FAMILIES = ("game24", "latin", "knights", "creative")
CREATIVE_VARIANTS = ("words", "sentences")
NAMES = "ABCDEFGHIJ"
MAX_CHARACTERS = len(NAMES)

_OUTPUT_LIST = re.compile(r"Output:\s*\[([^\]]*)\]")
_PLAN = re.compile(r"Plan:\s*(.*?)\s*(?:Output:|$)")
_ARITHMETIC = re.compile(r"^\s*(\S+)\s*([+\-*/×÷])\s*(\S+)\s*=\s*(\S+)\s*$")


@dataclass
class TaskSpec:
    family: str
    description: str
    instance: Dict[str, Any]
    name: str = ""

    def to_dict(self) -> Dict[str, Any]:
        return {"family": self.family, "name": self.name, **self.instance}


@dataclass
class Verdict:
    accepted: bool
    reason: str = ""
    line_index: Optional[int] = None
    missing: List[str] = field(default_factory=list)


# Structural checks share the verdict shape
StructuralVerdict = Verdict


# ---------------------------------------------------------------------------
# Game of 24
# ---------------------------------------------------------------------------

def format_number(value: Fraction) -> str:
    value = Fraction(value)
    if value.denominator == 1:
        return str(value.numerator)
    return f"{value.numerator}/{value.denominator}"


def format_values(values: Sequence[Fraction]) -> str:
    return "[" + ",".join(format_number(v) for v in values) + "]"


def parse_values(body: str) -> Optional[List[Fraction]]:
    """Parse the inside of a bracketed number list; None when malformed."""
    items = [item.strip() for item in body.split(",") if item.strip()]
    try:
        return [Fraction(item) for item in items]
    except (ValueError, ZeroDivisionError):
        return None


def _combinations(a: Fraction, b: Fraction):
    yield a, "+", b, a + b
    yield a, "-", b, a - b
    yield b, "-", a, b - a
    yield a, "*", b, a * b
    if b != 0:
        yield a, "/", b, a / b
    if a != 0:
        yield b, "/", a, b / a


def _apply(a: Fraction, op: str, b: Fraction) -> Optional[Fraction]:
    if op == "+":
        return a + b
    if op == "-":
        return a - b
    if op in ("*", "×"):
        return a * b
    if op in ("/", "÷"):
        return a / b if b != 0 else None
    return None


@lru_cache(maxsize=None)
def _solve_values(key: Tuple[Fraction, ...]) -> Optional[Tuple[Tuple[Fraction, str, Fraction, Fraction], ...]]:
    if len(key) == 1:
        return () if key[0] == 24 else None
    for i, j in itertools.combinations(range(len(key)), 2):
        rest = tuple(key[k] for k in range(len(key)) if k not in (i, j))
        for a, op, b, c in _combinations(key[i], key[j]):
            tail = _solve_values(tuple(sorted(rest + (c,))))
            if tail is not None:
                return ((a, op, b, c),) + tail
    return None


def game24_solvable(values: Sequence[Fraction]) -> bool:
    return _solve_values(tuple(sorted(Fraction(v) for v in values))) is not None


def solve_24(numbers: Sequence[int]) -> Optional[List[str]]:
    """Exhaustive search with exact rationals; returns Plan lines or None."""
    steps = _solve_values(tuple(sorted(Fraction(n) for n in numbers)))
    if steps is None:
        return None
    return [f"{format_number(a)} {op} {format_number(b)} = {format_number(c)}" for a, op, b, c in steps]


def verify_24(numbers: Sequence[int], trace: Sequence[str]) -> Verdict:
    """Accept iff the trace consumes all numbers with exact arithmetic and ends at 24.

    Lines may be bare ("10 + 2 = 12") or full thought lines
    ("Input:[...] Plan:10 + 2 = 12 Output:[...]").
    """
    available = [Fraction(n) for n in numbers]
    if not trace:
        return Verdict(False, "Trace has no arithmetic steps")
    for index, line in enumerate(trace):
        plan_match = _PLAN.search(line)
        expression = plan_match.group(1) if plan_match else line
        match = _ARITHMETIC.match(expression)
        if not match:
            return Verdict(False, f"Malformed step: {line!r}", line_index=index)
        try:
            a, b, claimed = (Fraction(match.group(k)) for k in (1, 3, 4))
        except (ValueError, ZeroDivisionError):
            return Verdict(False, f"Malformed number in step: {line!r}", line_index=index)
        op = match.group(2)
        for operand in (a, b):
            if operand not in available:
                return Verdict(False, f"Value {format_number(operand)} is not available", line_index=index)
            available.remove(operand)
        result = _apply(a, op, b)
        if result is None or result != claimed:
            return Verdict(False, f"Arithmetic is wrong in step: {line!r}", line_index=index)
        available.append(result)
    if len(available) != 1:
        return Verdict(False, f"Unused values remain: {format_values(available)}")
    if available[0] != 24:
        return Verdict(False, f"Final value is {format_number(available[0])}, not 24")
    return Verdict(True, "Reaches 24")


def describe_game24(numbers: Sequence[int]) -> str:
    return (
        "Use 4 numbers and basic arithmetic operations (+-*/) to obtain 24. "
        "Each step combines two of the remaining numbers into one. "
        f"Numbers: {format_values([Fraction(n) for n in numbers])}"
    )


# ---------------------------------------------------------------------------
# Latin square
# ---------------------------------------------------------------------------

Grid = Tuple[Tuple[int, ...], ...]


def grid_from_givens(n: int, givens: Sequence[Sequence[int]]) -> Grid:
    grid = [[0] * n for _ in range(n)]
    for r, c, v in givens:
        grid[r][c] = v
    return tuple(tuple(row) for row in grid)


def format_grid(grid: Sequence[Sequence[int]]) -> str:
    return json.dumps([list(row) for row in grid], separators=(",", ":"))


def verify_latin(n: int, grid: Sequence[Sequence[int]], givens: Optional[Sequence[Sequence[int]]] = None) -> Verdict:
    """Accept iff every row and column is a permutation of 1..n and givens match."""
    if len(grid) != n or any(len(row) != n for row in grid):
        return Verdict(False, f"Grid is not {n}x{n}")
    target = set(range(1, n + 1))
    for r, row in enumerate(grid):
        for value in row:
            if not isinstance(value, int) or not 1 <= value <= n:
                return Verdict(False, f"Entry {value!r} in row {r} is out of range", line_index=r)
        if set(row) != target:
            return Verdict(False, f"Row {r} repeats a value", line_index=r)
    for c in range(n):
        if {grid[r][c] for r in range(n)} != target:
            return Verdict(False, f"Column {c} repeats a value", line_index=c)
    for r, c, v in givens or ():
        if grid[r][c] != v:
            return Verdict(False, f"Given cell ({r},{c})={v} was changed", line_index=r)
    return Verdict(True, "Valid Latin square")


def _row_candidates(grid: Grid, row: int) -> List[Tuple[int, ...]]:
    n = len(grid)
    fixed = grid[row]
    candidates = []
    for perm in itertools.permutations(range(1, n + 1)):
        if any(fixed[c] and fixed[c] != perm[c] for c in range(n)):
            continue
        clash = any(
            grid[r][c] == perm[c]
            for r in range(n) if r != row
            for c in range(n)
        )
        if not clash:
            candidates.append(perm)
    return candidates


def _first_open_row(grid: Grid) -> Optional[int]:
    for r, row in enumerate(grid):
        if 0 in row:
            return r
    return None


@lru_cache(maxsize=None)
def _latin_complete(grid: Grid) -> Optional[Grid]:
    row = _first_open_row(grid)
    if row is None:
        return grid if verify_latin(len(grid), grid).accepted else None
    for perm in _row_candidates(grid, row):
        filled = grid[:row] + (perm,) + grid[row + 1:]
        result = _latin_complete(filled)
        if result is not None:
            return result
    return None


def solve_latin(n: int, givens: Sequence[Sequence[int]] = ()) -> Optional[List[List[int]]]:
    """Backtracking row filler; returns a completed grid or None."""
    solution = _latin_complete(grid_from_givens(n, givens))
    return [list(row) for row in solution] if solution is not None else None


def describe_latin(n: int, givens: Sequence[Sequence[int]]) -> str:
    return (
        f"Fill the {n}x{n} grid with the numbers 1 to {n} so that each row and each column "
        "contains no repeated numbers. 0 marks an empty cell. "
        f"Grid: {format_grid(grid_from_givens(n, givens))}"
    )


# ---------------------------------------------------------------------------
# Knights and knaves
# ---------------------------------------------------------------------------

class Claim(ABC):
    @abstractmethod
    def evaluate(self, world: Sequence[bool]) -> bool:
        """Truth value under an assignment (True = knight)."""

    @abstractmethod
    def render(self, names: str = NAMES) -> str:
        pass

    @abstractmethod
    def to_dict(self) -> Dict[str, Any]:
        pass

    @abstractmethod
    def indices(self) -> set:
        pass


@dataclass(frozen=True)
class IsKnight(Claim):
    who: int

    def evaluate(self, world):
        return world[self.who]

    def render(self, names=NAMES):
        return f"{names[self.who]} is a knight"

    def to_dict(self):
        return {"op": "knight", "who": self.who}

    def indices(self):
        return {self.who}


@dataclass(frozen=True)
class IsKnave(Claim):
    who: int

    def evaluate(self, world):
        return not world[self.who]

    def render(self, names=NAMES):
        return f"{names[self.who]} is a knave"

    def to_dict(self):
        return {"op": "knave", "who": self.who}

    def indices(self):
        return {self.who}


def _wrapped(claim: Claim, names: str) -> str:
    text = claim.render(names)
    return f"({text})" if isinstance(claim, (And, Or, Implies)) else text


@dataclass(frozen=True)
class Not(Claim):
    operand: Claim

    def evaluate(self, world):
        return not self.operand.evaluate(world)

    def render(self, names=NAMES):
        return f"it is not the case that {_wrapped(self.operand, names)}"

    def to_dict(self):
        return {"op": "not", "operand": self.operand.to_dict()}

    def indices(self):
        return self.operand.indices()


@dataclass(frozen=True)
class And(Claim):
    left: Claim
    right: Claim

    def evaluate(self, world):
        return self.left.evaluate(world) and self.right.evaluate(world)

    def render(self, names=NAMES):
        return f"{_wrapped(self.left, names)} and {_wrapped(self.right, names)}"

    def to_dict(self):
        return {"op": "and", "left": self.left.to_dict(), "right": self.right.to_dict()}

    def indices(self):
        return self.left.indices() | self.right.indices()


@dataclass(frozen=True)
class Or(Claim):
    left: Claim
    right: Claim

    def evaluate(self, world):
        return self.left.evaluate(world) or self.right.evaluate(world)

    def render(self, names=NAMES):
        return f"{_wrapped(self.left, names)} or {_wrapped(self.right, names)}"

    def to_dict(self):
        return {"op": "or", "left": self.left.to_dict(), "right": self.right.to_dict()}

    def indices(self):
        return self.left.indices() | self.right.indices()


@dataclass(frozen=True)
class Implies(Claim):
    left: Claim
    right: Claim

    def evaluate(self, world):
        return (not self.left.evaluate(world)) or self.right.evaluate(world)

    def render(self, names=NAMES):
        return f"if {_wrapped(self.left, names)} then {_wrapped(self.right, names)}"

    def to_dict(self):
        return {"op": "implies", "left": self.left.to_dict(), "right": self.right.to_dict()}

    def indices(self):
        return self.left.indices() | self.right.indices()


def claim_from_dict(data: Dict[str, Any]) -> Claim:
    op = data.get("op")
    if op == "knight":
        return IsKnight(int(data["who"]))
    if op == "knave":
        return IsKnave(int(data["who"]))
    if op == "not":
        return Not(claim_from_dict(data["operand"]))
    binary = {"and": And, "or": Or, "implies": Implies}
    if op in binary:
        return binary[op](claim_from_dict(data["left"]), claim_from_dict(data["right"]))
    raise InvalidTask(f"Unknown claim operator: {op!r}")


@dataclass(frozen=True)
class Statement:
    speaker: int
    claim: Claim

    def to_dict(self) -> Dict[str, Any]:
        return {"speaker": self.speaker, "claim": self.claim.to_dict()}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Statement":
        return cls(int(data["speaker"]), claim_from_dict(data["claim"]))


def _check_statements(statements: Sequence[Statement], n_characters: int) -> None:
    if not 1 <= n_characters <= MAX_CHARACTERS:
        raise InvalidTask(f"Character count must lie in 1..{MAX_CHARACTERS}, got {n_characters}")
    for statement in statements:
        if statement.speaker >= n_characters or any(i >= n_characters for i in statement.claim.indices()):
            raise InvalidTask(f"Statement refers to a character outside 0..{n_characters - 1}")


def _consistent(statements: Sequence[Statement], world: Sequence[bool]) -> bool:
    return all(world[s.speaker] == s.claim.evaluate(world) for s in statements)


def solve_kk(statements: Sequence[Statement], n_characters: int) -> List[Tuple[bool, ...]]:
    """Enumerate all 2^n assignments (True = knight) and keep the consistent ones."""
    _check_statements(statements, n_characters)
    return [
        world
        for world in itertools.product((True, False), repeat=n_characters)
        if _consistent(statements, world)
    ]


def verify_kk(statements: Sequence[Statement], n_characters: int, assignment: Sequence[Optional[bool]]) -> Verdict:
    if len(assignment) != n_characters or any(v is None for v in assignment):
        return Verdict(False, "Assignment is incomplete")
    if not _consistent(statements, assignment):
        return Verdict(False, "Assignment contradicts a statement")
    return Verdict(True, "Consistent assignment")


def format_assignment(assignment: Sequence[Optional[bool]]) -> str:
    marks = {True: "Knight", False: "Knave", None: "?"}
    return "[" + ",".join(f"{NAMES[i]}={marks[v]}" for i, v in enumerate(assignment)) + "]"


def parse_assignment(body: str) -> Optional[Tuple[Optional[bool], ...]]:
    values = {"knight": True, "knave": False, "?": None}
    result = []
    for index, item in enumerate(part.strip() for part in body.split(",")):
        name, _, value = item.partition("=")
        if index >= MAX_CHARACTERS or name.strip() != NAMES[index]:
            return None
        key = value.strip().lower()
        if key not in values:
            return None
        result.append(values[key])
    return tuple(result)


def describe_knights(statements: Sequence[Statement], n_characters: int) -> str:
    names = list(NAMES[:n_characters])
    roster = names[0] if len(names) == 1 else ", ".join(names[:-1]) + f" and {names[-1]}"
    lines = [
        "On an island, knights always tell the truth and knaves always lie.",
        f"There are {n_characters} inhabitants: {roster}.",
    ]
    for statement in statements:
        lines.append(f'{NAMES[statement.speaker]} says: "{statement.claim.render()}."')
    lines.append("Determine which inhabitants are knights and which are knaves.")
    return " ".join(lines)


# ---------------------------------------------------------------------------
# Creative writing
# ---------------------------------------------------------------------------

_WORD_SENTENCES = (
    "The {w} caught the light as the evening settled over the town.",
    "Everyone in the village talked about the {w} for weeks.",
    "She kept a small {w} on the sill beside the open window.",
    "A quiet story began with the {w} waiting near the river.",
)
_PARAGRAPH_TAILS = (
    "It set the tone for everything that followed.",
    "Nobody who was there would forget it.",
    "The rest of the day unfolded slowly around it.",
)


def _pick(options: Sequence[str], key: str) -> str:
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return options[digest[0] % len(options)]


def check_creative(items: Sequence[str], output_text: str, variant: str = "words") -> StructuralVerdict:
    """Structural check only: required words (or paragraph openers) are present."""
    if not output_text or not output_text.strip():
        return Verdict(False, "Output is empty", missing=list(items))
    if variant == "sentences":
        paragraphs = [p.strip() for p in re.split(r"\n\s*\n", output_text.strip()) if p.strip()]
        missing = [s for s in items if not any(p.startswith(s.strip()) for p in paragraphs)]
    else:
        missing = [
            w for w in items
            if not re.search(rf"\b{re.escape(w)}\b", output_text, flags=re.IGNORECASE)
        ]
    if missing:
        return Verdict(False, f"Missing: {', '.join(missing)}", missing=missing)
    return Verdict(True, "All required items present")


def describe_creative(items: Sequence[str], variant: str) -> str:
    if variant == "sentences":
        listed = " | ".join(items)
        return (
            "Write a passage of paragraphs where each paragraph begins with one of the following "
            f"sentences, expanding each into a short paragraph and combining them: {listed}"
        )
    return (
        "Write a coherent passage that uses all of the following words: "
        f"{', '.join(items)}. Expand each word into a sentence containing it and combine the sentences."
    )


# ---------------------------------------------------------------------------
# Task construction, instance files and generators
# ---------------------------------------------------------------------------

def make_task(family: str, instance: Dict[str, Any], name: str = "") -> TaskSpec:
    """Validate an instance payload and render its description."""
    if family == "game24":
        numbers = instance.get("numbers")
        if not isinstance(numbers, list) or len(numbers) != 4 or not all(isinstance(n, int) and n > 0 for n in numbers):
            raise InvalidTask(f"Game of 24 needs 4 positive integers, got {numbers!r}")
        return TaskSpec(family, describe_game24(numbers), {"numbers": list(numbers)}, name)
    if family == "latin":
        n = instance.get("n")
        givens = [list(g) for g in instance.get("givens", [])]
        if not isinstance(n, int) or n < 2:
            raise InvalidTask(f"Latin square size must be >= 2, got {n!r}")
        for r, c, v in givens:
            if not (0 <= r < n and 0 <= c < n and 1 <= v <= n):
                raise InvalidTask(f"Given ({r},{c})={v} is out of range for n={n}")
        return TaskSpec(family, describe_latin(n, givens), {"n": n, "givens": givens}, name)
    if family == "knights":
        n = instance.get("n_characters")
        statements = [Statement.from_dict(s) for s in instance.get("statements", [])]
        _check_statements(statements, n if isinstance(n, int) else 0)
        payload = {"n_characters": n, "statements": [s.to_dict() for s in statements]}
        return TaskSpec(family, describe_knights(statements, n), payload, name)
    if family == "creative":
        variant = instance.get("variant", "words")
        items = instance.get("sentences" if variant == "sentences" else "words")
        if variant not in CREATIVE_VARIANTS or not items or not all(isinstance(i, str) and i.strip() for i in items):
            raise InvalidTask(f"Creative writing needs a nonempty {variant} list")
        key = "sentences" if variant == "sentences" else "words"
        return TaskSpec(family, describe_creative(items, variant), {"variant": variant, key: list(items)}, name)
    raise InvalidTask(f"Unknown task family: {family!r}")


def creative_items(task: TaskSpec) -> List[str]:
    return task.instance.get("sentences") or task.instance.get("words") or []


def load_task(path: str) -> TaskSpec:
    task_path = Path(path)
    if not task_path.exists():
        raise FileNotFoundError(f"Task file not found: {task_path}")
    data = json.loads(task_path.read_text(encoding="utf-8"))
    family = data.pop("family", None)
    name = data.pop("name", task_path.stem)
    data.pop("description", None)
    return make_task(family, data, name=name)


def save_task(task: TaskSpec, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(task.to_dict(), f, indent=2)


def load_manifest(path: str) -> List[TaskSpec]:
    """Load every instance listed in a batch manifest ({"instances": [relative paths]})."""
    manifest_path = Path(path)
    if not manifest_path.exists():
        raise FileNotFoundError(f"Manifest not found: {manifest_path}")
    data = json.loads(manifest_path.read_text(encoding="utf-8"))
    entries = data.get("instances", [])
    if not entries:
        raise InvalidTask(f"Manifest {manifest_path} lists no instances")
    return [load_task(str(manifest_path.parent / entry)) for entry in entries]


def write_manifest(tasks: Sequence[TaskSpec], directory: Path) -> Path:
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for index, task in enumerate(tasks):
        name = task.name or f"{task.family}_{index}"
        relative = Path(task.family) / f"{name}.json"
        save_task(task, directory / relative)
        entries.append(relative.as_posix())
    manifest_path = directory / "manifest.json"
    with open(manifest_path, "w", encoding="utf-8") as f:
        json.dump({"instances": entries}, f, indent=2)
    logger.info(f"Wrote {len(entries)} instances to {manifest_path}")
    return manifest_path


def _random_claim(rng: random.Random, n: int, depth: int) -> Claim:
    if depth == 0 or rng.random() < 0.4:
        who = rng.randrange(n)
        return IsKnight(who) if rng.random() < 0.5 else IsKnave(who)
    choice = rng.choice(("not", "and", "or", "implies"))
    if choice == "not":
        return Not(_random_claim(rng, n, depth - 1))
    left, right = _random_claim(rng, n, depth - 1), _random_claim(rng, n, depth - 1)
    return {"and": And, "or": Or, "implies": Implies}[choice](left, right)


def generate_instances(family: str, count: int, seed: int = 0, **options) -> List[TaskSpec]:
    """Seeded instance generator.

    Args:
        family: One of FAMILIES
        count: Number of instances
        seed: Generator seed
        **options: n (latin size / knights characters), density (latin givens),
            variant (creative), solvable (game24, default True)

    Returns:
        List of TaskSpec with names "<family>_<index>"
    """
    rng = random.Random(seed)
    tasks = []
    for index in range(count):
        name = f"{family}_{index}"
        if family == "game24":
            while True:
                numbers = [rng.randint(1, 13) for _ in range(4)]
                if not options.get("solvable", True) or solve_24(numbers) is not None:
                    break
            tasks.append(make_task(family, {"numbers": numbers}, name))
        elif family == "latin":
            n = options.get("n", 3)
            density = options.get("density", 0.3)
            rows, cols, symbols = list(range(n)), list(range(n)), list(range(1, n + 1))
            rng.shuffle(rows)
            rng.shuffle(cols)
            rng.shuffle(symbols)
            givens = [
                [r, c, symbols[(rows[r] + cols[c]) % n]]
                for r in range(n) for c in range(n)
                if rng.random() < density
            ]
            tasks.append(make_task(family, {"n": n, "givens": givens}, name))
        elif family == "knights":
            n = options.get("n", 3)
            for _ in range(1000):
                statements = [Statement(i, _random_claim(rng, n, 2)) for i in range(n)]
                if len(solve_kk(statements, n)) == 1:
                    break
            else:
                raise InvalidTask(f"Could not generate a uniquely solvable puzzle for n={n}")
            payload = {"n_characters": n, "statements": [s.to_dict() for s in statements]}
            tasks.append(make_task(family, payload, name))
        elif family == "creative":
            variant = options.get("variant", "words")
            if variant == "sentences":
                pool = list(_SENTENCE_POOL)
                items = rng.sample(pool, 4)
                tasks.append(make_task(family, {"variant": variant, "sentences": items}, name))
            else:
                items = rng.sample(list(_WORD_POOL), 4)
                tasks.append(make_task(family, {"variant": variant, "words": items}, name))
        else:
            raise InvalidTask(f"Unknown task family: {family!r}")
    return tasks


_WORD_POOL = (
    "Elephant", "Solar", "Lantern", "Velvet", "Harbor", "Compass", "Orchard", "Thunder",
    "Marble", "Violin", "Glacier", "Saffron", "Meadow", "Falcon", "Ember", "Quartz",
)
_SENTENCE_POOL = (
    "The train left the station before dawn.",
    "Her grandmother's recipe was never written down.",
    "The lighthouse keeper counted every ship.",
    "Rain had not fallen in the valley for months.",
    "The old map showed a road that no longer existed.",
    "A stray cat adopted the bookshop.",
    "The orchestra tuned their instruments in silence.",
    "Nobody remembered who planted the oak tree.",
)


# ---------------------------------------------------------------------------
# Step rules used by the oracle
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Move:
    plan: str
    state: Any
    text: str


def _last_output(text: str) -> Optional[int]:
    index = text.rfind("Output:")
    return None if index < 0 else index + len("Output:")


class StepRules(ABC):
    """State machine for one task family in the Input/Plan/Output format."""

    family = ""

    @abstractmethod
    def initial_state(self, task: TaskSpec) -> Any:
        pass

    @abstractmethod
    def parse_state(self, task: TaskSpec, text: str) -> Optional[Any]:
        pass

    @abstractmethod
    def is_solved(self, task: TaskSpec, state: Any) -> bool:
        pass

    @abstractmethod
    def is_solvable(self, task: TaskSpec, state: Any) -> bool:
        pass

    @abstractmethod
    def moves(self, task: TaskSpec, state: Any) -> List[Move]:
        pass

    @abstractmethod
    def score(self, task: TaskSpec, state: Any) -> int:
        """0..10 helpfulness of reaching ``state``."""

    def state_of(self, task: TaskSpec, text: str) -> Optional[Any]:
        if text == task.description:
            return self.initial_state(task)
        return self.parse_state(task, text)


class Game24Rules(StepRules):
    family = "game24"

    def initial_state(self, task):
        return tuple(Fraction(n) for n in task.instance["numbers"])

    def parse_state(self, task, text):
        matches = _OUTPUT_LIST.findall(text)
        if not matches:
            return None
        values = parse_values(matches[-1])
        return tuple(values) if values else None

    def is_solved(self, task, state):
        return len(state) == 1 and state[0] == 24

    def is_solvable(self, task, state):
        return game24_solvable(state)

    def moves(self, task, state):
        moves, seen = [], set()
        for i, j in itertools.combinations(range(len(state)), 2):
            rest = [state[k] for k in range(len(state)) if k not in (i, j)]
            for a, op, b, c in _combinations(state[i], state[j]):
                plan = f"{format_number(a)} {op} {format_number(b)} = {format_number(c)}"
                new_state = tuple(rest + [c])
                text = f"Input:{format_values(state)} Plan:{plan} Output:{format_values(new_state)}"
                if text not in seen:
                    seen.add(text)
                    moves.append(Move(plan, new_state, text))
        return moves

    def score(self, task, state):
        if self.is_solved(task, state):
            return 10
        if not self.is_solvable(task, state):
            return 1
        return {4: 5, 3: 6, 2: 8}.get(len(state), 5)


class LatinRules(StepRules):
    family = "latin"

    def initial_state(self, task):
        return grid_from_givens(task.instance["n"], task.instance["givens"])

    def parse_state(self, task, text):
        start = _last_output(text)
        if start is None:
            return None
        try:
            grid, _ = json.JSONDecoder().raw_decode(text[start:].lstrip())
        except json.JSONDecodeError:
            return None
        n = task.instance["n"]
        if not isinstance(grid, list) or len(grid) != n or any(
            not isinstance(row, list) or len(row) != n or not all(isinstance(v, int) for v in row) for row in grid
        ):
            return None
        return tuple(tuple(row) for row in grid)

    def is_solved(self, task, state):
        return _first_open_row(state) is None and verify_latin(task.instance["n"], state, task.instance["givens"]).accepted

    def is_solvable(self, task, state):
        if any(state[r][c] != v for r, c, v in task.instance["givens"]):
            return False
        return _latin_complete(state) is not None

    def moves(self, task, state):
        row = _first_open_row(state)
        if row is None:
            return []
        moves = []
        for perm in _row_candidates(state, row):
            new_state = state[:row] + (perm,) + state[row + 1:]
            plan = f"fill row {row + 1} with {json.dumps(list(perm), separators=(',', ':'))}"
            text = f"Input:{format_grid(state)} Plan:{plan} Output:{format_grid(new_state)}"
            moves.append(Move(plan, new_state, text))
        return moves

    def score(self, task, state):
        if self.is_solved(task, state):
            return 10
        if not self.is_solvable(task, state):
            return 0
        full_rows = sum(1 for row in state if 0 not in row)
        return 4 + round(6 * full_rows / len(state))


class KnightsRules(StepRules):
    family = "knights"

    def _statements(self, task):
        return [Statement.from_dict(s) for s in task.instance["statements"]]

    def initial_state(self, task):
        return (None,) * task.instance["n_characters"]

    def parse_state(self, task, text):
        matches = _OUTPUT_LIST.findall(text)
        if not matches:
            return None
        state = parse_assignment(matches[-1])
        if state is None or len(state) != task.instance["n_characters"]:
            return None
        return state

    def is_solved(self, task, state):
        n = task.instance["n_characters"]
        return verify_kk(self._statements(task), n, state).accepted

    def is_solvable(self, task, state):
        statements = self._statements(task)
        return any(
            all(s is None or s == w for s, w in zip(state, world))
            for world in solve_kk(statements, task.instance["n_characters"])
        )

    def moves(self, task, state):
        if None not in state:
            return []
        index = state.index(None)
        moves = []
        for value, word in ((True, "knight"), (False, "knave")):
            new_state = state[:index] + (value,) + state[index + 1:]
            plan = f"{NAMES[index]} is a {word}"
            text = f"Input:{format_assignment(state)} Plan:{plan} Output:{format_assignment(new_state)}"
            moves.append(Move(plan, new_state, text))
        return moves

    def score(self, task, state):
        if self.is_solved(task, state):
            return 10
        if not self.is_solvable(task, state):
            return 0
        assigned = sum(1 for v in state if v is not None)
        return 4 + round(6 * assigned / len(state))


class CreativeRules(StepRules):
    family = "creative"

    def initial_state(self, task):
        return tuple(creative_items(task))

    def parse_state(self, task, text):
        start = _last_output(text)
        if start is None:
            return None
        try:
            elements, _ = json.JSONDecoder().raw_decode(text[start:].lstrip())
        except json.JSONDecodeError:
            return None
        if not isinstance(elements, list) or not elements or not all(isinstance(e, str) for e in elements):
            return None
        return tuple(elements)

    def _variant(self, task):
        return task.instance.get("variant", "words")

    def _expand(self, task, element):
        if element not in creative_items(task):
            return element
        if self._variant(task) == "sentences":
            return f"{element} {_pick(_PARAGRAPH_TAILS, element)}"
        return _pick(_WORD_SENTENCES, element).format(w=element.lower())

    def is_solved(self, task, state):
        if len(state) != 1:
            return False
        return check_creative(creative_items(task), state[0], self._variant(task)).accepted

    def is_solvable(self, task, state):
        # every required item must survive in some element
        return all(
            any(item.lower() in element.lower() for element in state) for item in creative_items(task)
        )

    def moves(self, task, state):
        separator = "\n\n" if self._variant(task) == "sentences" else " "
        moves = []
        for i, j in itertools.combinations(range(len(state)), 2):
            combined = self._expand(task, state[i]) + separator + self._expand(task, state[j])
            rest = [state[k] for k in range(len(state)) if k not in (i, j)]
            new_state = tuple([combined] + rest)
            plan = f"choose element {i} and element {j}"
            text = f"Input:{json.dumps(list(state))} Plan:{plan} Output:{json.dumps(list(new_state))}"
            moves.append(Move(plan, new_state, text))
        return moves

    def score(self, task, state):
        items = creative_items(task)
        if not items:
            return 0
        best = max(state, key=len)
        covered = sum(1 for item in items if item.lower() in best.lower())
        return round(10 * covered / len(items))


RULES: Dict[str, StepRules] = {
    rules.family: rules for rules in (Game24Rules(), LatinRules(), KnightsRules(), CreativeRules())
}


def rules_for(task: TaskSpec) -> StepRules:
    try:
        return RULES[task.family]
    except KeyError:
        raise InvalidTask(f"Unknown task family: {task.family!r}")


def task_solvable(task: TaskSpec) -> bool:
    rules = rules_for(task)
    return rules.is_solvable(task, rules.initial_state(task))


def verify_episode(task: TaskSpec, path_texts: Sequence[str]) -> Verdict:
    """Verify the thoughts on the path from the root's child to the final node."""
    if not path_texts:
        return Verdict(False, "No thoughts on the solution path")
    if task.family == "game24":
        return verify_24(task.instance["numbers"], list(path_texts))
    rules = rules_for(task)
    state = rules.parse_state(task, path_texts[-1])
    if state is None:
        return Verdict(False, "Final thought has no parseable Output")
    if task.family == "latin":
        return verify_latin(task.instance["n"], state, task.instance["givens"])
    if task.family == "knights":
        statements = [Statement.from_dict(s) for s in task.instance["statements"]]
        return verify_kk(statements, task.instance["n_characters"], state)
    if len(state) != 1:
        return Verdict(False, f"Passage still has {len(state)} separate elements")
    return check_creative(creative_items(task), state[0], task.instance.get("variant", "words"))


def final_answer(task: TaskSpec, final_text: str) -> str:
    """Human-readable answer extracted from a final thought."""
    state = rules_for(task).parse_state(task, final_text)
    if state is None:
        return final_text
    if task.family == "creative" and len(state) == 1:
        return state[0]
    if task.family == "latin":
        return format_grid(state)
    if task.family == "knights":
        return format_assignment(state)
    return final_text
