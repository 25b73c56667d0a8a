from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from richrerank.core import Candidate, CandidateSet, Grade, GradeDimension, Query, SideInfo  # noqa: E402


def make_cset(ids, query="test query", **kwargs) -> CandidateSet:
    return CandidateSet(Query(query), tuple(Candidate(str(i), title=f"title {i}", **kwargs) for i in ids))


def graded_candidate(cid, rel=None, qual=None, ctr=0.1, completion=0.5, t=0, cover=True):
    return Candidate(
        cid,
        title=f"title {cid}",
        content=f"content {cid}",
        side=SideInfo(t, ctr, completion),
        cover_image_ref=f"img://{cid}.jpg" if cover else None,
        relevance_grade=Grade(rel, GradeDimension.RELEVANCE) if rel else None,
        quality_grade=Grade(qual, GradeDimension.QUALITY) if qual else None,
    )


@pytest.fixture
def abc():
    return make_cset(["A", "B", "C"])


ACCEPTANCE_RESULTS: list[tuple[str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
