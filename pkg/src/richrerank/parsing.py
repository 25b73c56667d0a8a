"""Extraction and format classification of model responses.

A response is usable only when it carries a closed ``<think>...</think>`` pair
and a closed ``<answer>...</answer>`` pair. Grading answers must be a bare
base-10 integer; re-ranking answers must be a bracketed, comma-separated id
list. Parsing never raises: every input string lands in exactly one format
class.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass
from typing import Iterable, Sequence

from .core import CandidateSet, is_permutation

THINK = "think"
ANSWER = "answer"

_INTEGER = re.compile(r"[+-]?[0-9]+")
_LIST = re.compile(r"\[([^\[\]]*)\]", re.DOTALL)


def _first_pair(text: str, tag: str) -> str | None:
    # First closed pair whose body holds no nested opener of the same tag.
    pattern = re.compile(
        rf"<{tag}>((?:(?!<{tag}>).)*?)</{tag}>", re.DOTALL
    )
    match = pattern.search(text)
    return match.group(1) if match else None


def extract_tagged_sections(text: str) -> tuple[str | None, str | None]:
    """Return ``(think, answer)`` bodies; missing or unclosed tags give None.

    Tag order is irrelevant and tag names are case-sensitive.
    """
    if isinstance(text, (bytes, bytearray)):
        text = bytes(text).decode("utf-8", errors="replace")
    if not isinstance(text, str):
        return None, None
    return _first_pair(text, THINK), _first_pair(text, ANSWER)


class GradingFormat(str, enum.Enum):
    NO_VALID_ANSWER = "NoValidAnswer"
    NON_INTEGER_ANSWER = "NonIntegerAnswer"
    VALID_ANSWER = "ValidAnswer"


class RerankFormat(str, enum.Enum):
    NO_VALID_ANSWER = "NoValidAnswer"
    DEGENERATE_LIST = "DegenerateList"
    VALID_ANSWER = "ValidAnswer"


@dataclass(frozen=True)
class ParsedGradingResponse:
    think_text: str | None
    answer_raw: str | None
    grade: int | None
    format_class: GradingFormat

    def to_dict(self) -> dict:
        return {
            "think_text": self.think_text,
            "answer_raw": self.answer_raw,
            "grade": self.grade,
            "format_class": self.format_class.value,
        }


@dataclass(frozen=True)
class ParsedRerankResponse:
    think_text: str | None
    answer_raw: str | None
    ids: tuple[str, ...] | None
    format_class: RerankFormat
    problems: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "think_text": self.think_text,
            "answer_raw": self.answer_raw,
            "ids": list(self.ids) if self.ids is not None else None,
            "format_class": self.format_class.value,
            "problems": list(self.problems),
        }


def parse_grade_answer(answer: str) -> int | None:
    if _INTEGER.fullmatch(answer.strip()):
        return int(answer.strip())
    return None


def parse_grading(text: str, require_think: bool = True) -> ParsedGradingResponse:
    think, answer = extract_tagged_sections(text)
    if (require_think and think is None) or answer is None or not answer.strip():
        return ParsedGradingResponse(think, answer, None, GradingFormat.NO_VALID_ANSWER)
    grade = parse_grade_answer(answer)
    if grade is None:
        return ParsedGradingResponse(think, answer, None, GradingFormat.NON_INTEGER_ANSWER)
    return ParsedGradingResponse(think, answer, grade, GradingFormat.VALID_ANSWER)


def _strip_token(token: str) -> str:
    token = token.strip()
    if len(token) >= 2 and token[0] == token[-1] and token[0] in "'\"":
        token = token[1:-1].strip()
    return token


def parse_id_list(answer: str) -> tuple[str, ...] | None:
    """Parse ``[a, b, c]``; anything else (prose, nested lists) gives None."""
    match = _LIST.fullmatch(answer.strip())
    if match is None:
        return None
    body = match.group(1)
    if not body.strip():
        return ()
    return tuple(_strip_token(t) for t in body.split(","))


def list_problems(ids: Sequence[str], target: Iterable[str]) -> list[str]:
    target = list(target)
    known = set(target)
    problems: list[str] = []
    seen: set[str] = set()
    for i in ids:
        if i in seen:
            problems.append(f"duplicate id {i}")
        elif i not in known:
            problems.append(f"invalid id {i!r}")
        seen.add(i)
    problems.extend(f"missing id {i}" for i in target if i not in seen)
    return problems


def parse_rerank(
    text: str, cset: CandidateSet | Sequence[str], require_think: bool = True
) -> ParsedRerankResponse:
    """Classify a re-rank response against the target id set.

    With ``require_think=False`` a bare ``<answer>[...]</answer>`` is accepted.
    """
    target = cset.ids if isinstance(cset, CandidateSet) else tuple(cset)
    think, answer = extract_tagged_sections(text)
    if (require_think and think is None) or answer is None:
        return ParsedRerankResponse(think, answer, None, RerankFormat.NO_VALID_ANSWER)
    ids = parse_id_list(answer)
    if ids is None:
        return ParsedRerankResponse(think, answer, None, RerankFormat.NO_VALID_ANSWER)
    if is_permutation(ids, target):
        return ParsedRerankResponse(think, answer, ids, RerankFormat.VALID_ANSWER)
    return ParsedRerankResponse(
        think, answer, ids, RerankFormat.DEGENERATE_LIST, tuple(list_problems(ids, target))
    )


def render_ranking_answer(ids: Sequence[str], think: str = "") -> str:
    return f"<think>{think}</think><answer>[{', '.join(ids)}]</answer>"


def render_grade_answer(grade: int, think: str = "") -> str:
    return f"<think>{think}</think><answer>{grade}</answer>"
