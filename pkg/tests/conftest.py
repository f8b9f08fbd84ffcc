import os

import numpy as np
import pytest
from hypothesis import settings

from factorbird import dataprep
from factorbird.edges import write_edges
from factorbird.synthetic import SyntheticSpec, biased_low_rank

settings.register_profile("ci", max_examples=50, deadline=None)
settings.register_profile("dev", max_examples=10, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "ci"))


def make_prep(root, spec: SyntheticSpec, seed=0, partitions=1, ratios=(0.8, 0.1, 0.1)):
    os.makedirs(root, exist_ok=True)
    src = os.path.join(root, "all.fbed")
    write_edges(src, biased_low_rank(spec, seed))
    prep = os.path.join(root, "prep")
    dataprep.prepare(src, prep, ratios, seed, partitions)
    return prep


@pytest.fixture
def small_prep(tmp_path):
    """A 200 x 150 rank-3 instance with 30% of cells observed, one partition."""
    spec = SyntheticSpec(rows=200, cols=150, rank=3, density=0.3, noise=0.1)
    return make_prep(tmp_path, spec, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE: list[str] = []


class CriterionRecorder:
    """Prints one PASS/FAIL line per acceptance criterion and keeps it for the summary."""

    def __call__(self, number: int, title: str, passed: bool, detail: str = "") -> bool:
        line = f"criterion {number} [{'PASS' if passed else 'FAIL'}] {title}"
        if detail:
            line += f": {detail}"
        print(line)
        _ACCEPTANCE.append(line)
        return passed


@pytest.fixture
def criterion():
    return CriterionRecorder()


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
