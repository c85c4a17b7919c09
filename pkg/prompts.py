"""
Prompt templates, subgraph serialization and reply parsing.

Template bodies live in ``templates/`` as one UTF-8 file per kind with
``{name}`` placeholders. A per-run override directory may replace any subset.
"""

import logging
import re
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from errors import EmptyGeneration, MissingPlaceholder, Unparseable
from reasoning_graph import AncestorSubgraph, ReasoningGraph, ordered_chain

logger = logging.getLogger(__name__)

TEMPLATE_DIR = Path(__file__).resolve().parent / "templates"
TAU_PREFIX = "The former generated thoughts are: "
DEPENDENCY_FILE = "dependency.txt"


class TemplateKind(str, Enum):
    FORMAT = "format"
    EVAL_INFO = "eval_info"
    EVALUATE = "evaluate"
    NODE_CLASS = "node_class"
    GENERATE = "generate"


REQUIRED_PLACEHOLDERS: Dict[TemplateKind, Tuple[str, ...]] = {
    TemplateKind.FORMAT: ("task",),
    TemplateKind.EVAL_INFO: ("task",),
    TemplateKind.EVALUATE: ("task", "results", "eval_info"),
    TemplateKind.NODE_CLASS: ("task", "subgraph"),
    TemplateKind.GENERATE: ("task", "subgraph", "format_info", "branch_number"),
}
_PLACEHOLDER = re.compile(r"\{(task|results|eval_info|subgraph|format_info|branch_number)\}")


@dataclass(frozen=True)
class PromptTemplate:
    kind: TemplateKind
    body: str

    def __post_init__(self):
        found = set(_PLACEHOLDER.findall(self.body))
        missing = set(REQUIRED_PLACEHOLDERS[self.kind]) - found
        if missing:
            raise MissingPlaceholder(f"Template {self.kind.value} lacks placeholders: {sorted(missing)}")

    def render(self, **bindings) -> str:
        """Substitute every placeholder in one pass; bound values are never re-expanded."""
        used = set(REQUIRED_PLACEHOLDERS[self.kind]) | set(_PLACEHOLDER.findall(self.body))
        unbound = sorted(name for name in used if bindings.get(name) is None)
        if unbound:
            raise MissingPlaceholder(f"Missing bindings for {self.kind.value}: {unbound}")
        return _PLACEHOLDER.sub(lambda m: str(bindings[m.group(1)]), self.body)


@dataclass(frozen=True)
class ParsedClassification:
    label: int
    raw: str


class TemplateSet:
    """The five prompt templates plus the dependency sentence."""

    def __init__(self, override_dir: Optional[str] = None):
        self.templates: Dict[TemplateKind, PromptTemplate] = {}
        override = Path(override_dir) if override_dir else None
        if override is not None and not override.is_dir():
            raise FileNotFoundError(f"Template override directory not found: {override}")
        for kind in TemplateKind:
            self.templates[kind] = PromptTemplate(kind, self._read(f"{kind.value}.txt", override))
        self.dependency_sentence = self._read(DEPENDENCY_FILE, override).strip()

    @staticmethod
    def _read(filename: str, override: Optional[Path]) -> str:
        if override is not None and (override / filename).exists():
            logger.info(f"Using template override {override / filename}")
            return (override / filename).read_text(encoding="utf-8")
        return (TEMPLATE_DIR / filename).read_text(encoding="utf-8")

    def render(self, kind: TemplateKind, **bindings) -> str:
        return self.templates[TemplateKind(kind)].render(**bindings)

    def render_generate(self, task: str, subgraph: str, format_info: str,
                        branch_number: int, use_dependency: bool) -> str:
        text = self.render(TemplateKind.GENERATE, task=task, subgraph=subgraph,
                           format_info=format_info, branch_number=branch_number)
        if use_dependency:
            text = f"{text} {self.dependency_sentence}"
        return text


def escape_braces(text: str) -> str:
    return text.replace("{", "{{").replace("}", "}}")


def braced(text: str) -> str:
    return "{" + escape_braces(text) + "}"


def parse_braced_group(text: str, start: int) -> Tuple[str, int]:
    """Read one ``{...}`` group at ``start``; returns (unescaped text, index after the group)."""
    if start >= len(text) or text[start] != "{":
        raise Unparseable(f"Expected '{{' at position {start}")
    chars = []
    i = start + 1
    while i < len(text):
        ch = text[i]
        if ch in "{}" and text[i + 1:i + 2] == ch:
            chars.append(ch)
            i += 2
            continue
        if ch == "}":
            return "".join(chars), i + 1
        chars.append(ch)
        i += 1
    raise Unparseable("Unterminated brace group")


def tau(sub: AncestorSubgraph, g: ReasoningGraph) -> str:
    """Serialize a subgraph root-ward to focus: ``The former generated thoughts are: {t1}, {t2}``."""
    chain = ordered_chain(sub, g)
    text = TAU_PREFIX + ", ".join(braced(g.node(node_id).text) for node_id in chain)
    if len(chain) > 1:
        relations = " ".join(
            f"Thought {i + 1} is the former thought of Thought {i + 2}." for i in range(len(chain) - 1)
        )
        text = f"{text}. {relations}"
    return text


def tau_single(text: str) -> str:
    return TAU_PREFIX + braced(text)


def parse_tau(text: str) -> List[str]:
    """Inverse of ``tau``: the thought texts in order."""
    start = text.find(TAU_PREFIX)
    if start < 0:
        raise Unparseable("No serialized thoughts found")
    index = start + len(TAU_PREFIX)
    thoughts = []
    while True:
        thought, index = parse_braced_group(text, index)
        thoughts.append(thought)
        if text.startswith(", {", index):
            index += 2
            continue
        return thoughts


_LABEL = re.compile(r"(?<!\d)([1-4])(?!\d)")
_INTEGER = re.compile(r"-?\d+")
_NUMBERED = re.compile(r"^\s*\d+[\.\)]\s+", re.MULTILINE)


def parse_label(reply: str) -> ParsedClassification:
    match = _LABEL.search(reply or "")
    if not match:
        raise Unparseable(f"No action class in reply: {reply[:80]!r}")
    return ParsedClassification(label=int(match.group(1)), raw=reply)


def parse_score(reply: str) -> int:
    match = _INTEGER.search(reply or "")
    if not match:
        raise Unparseable(f"No score in reply: {reply[:80]!r}")
    return max(0, min(10, int(match.group(0))))


def parse_thoughts(reply: str, expected: int) -> List[str]:
    """Split a generation reply into at most ``expected`` thought blocks.

    Numbered items ("1." or "1)") win; otherwise blank lines separate blocks.
    """
    if expected < 1:
        raise ValueError(f"expected must be >= 1, got {expected}")
    reply = reply or ""
    markers = list(_NUMBERED.finditer(reply))
    if markers:
        bounds = [m.end() for m in markers] + [len(reply)]
        starts = [m.start() for m in markers[1:]] + [len(reply)]
        blocks = [reply[bounds[i]:starts[i]].strip() for i in range(len(markers))]
    else:
        blocks = [block.strip() for block in re.split(r"\n\s*\n", reply)]
    blocks = [block for block in blocks if block]
    if not blocks:
        raise EmptyGeneration("Reply contains no thoughts")
    return blocks[:expected]
