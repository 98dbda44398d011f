from __future__ import annotations

import functools
from dataclasses import dataclass

import pytest

from planar_cohomology.flow import PlanarField
from planar_cohomology.foliation import FoliationChart
from planar_cohomology.hamiltonian import HamiltonianPair
from planar_cohomology.registry import FieldSpec, registry


@dataclass(frozen=True)
class Model:
    spec: FieldSpec
    field: PlanarField
    ham: HamiltonianPair
    chart: FoliationChart


@functools.lru_cache(maxsize=None)
def model(name: str) -> Model:
    spec = registry(name)
    return Model(spec, spec.field, spec.hamiltonian(), spec.chart())


@pytest.fixture(scope="session")
def ex51() -> Model:
    return model("ex51:1")


@pytest.fixture(scope="session")
def ex52() -> Model:
    return model("ex52:1")


@pytest.fixture(scope="session")
def const_model() -> Model:
    return model("const")


# one line per acceptance criterion, collected by tests/test_acceptance.py
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
