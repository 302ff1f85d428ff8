import functools

import numpy as np
import pytest

from donaldson.bundle import build_bundle, holomorphic_basis, hodge_star_E_inv
from donaldson.mesh import generate_genus2_mesh
from donaldson.solver import solve


@functools.lru_cache(maxsize=None)
def mesh_at(level):
    return generate_genus2_mesh(level)


@functools.lru_cache(maxsize=None)
def bundle_at(level, k):
    return build_bundle(mesh_at(level), k)


@functools.lru_cache(maxsize=None)
def basis_at(level, k):
    return holomorphic_basis(mesh_at(level), k)


def generic_beta(level, k, scale=2.0):
    """A fixed non-trivial class: combination of the first two basis elements."""
    b = basis_at(level, k)
    return scale * hodge_star_E_inv(None, b[0] + 0.5j * b[1])


@functools.lru_cache(maxsize=None)
def solved(level, k, scale=2.0):
    return solve(mesh_at(level), k, generic_beta(level, k, scale), bundle=bundle_at(level, k))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def mesh1():
    return mesh_at(1)


@pytest.fixture(scope="session")
def mesh2():
    return mesh_at(2)


@pytest.fixture(scope="session")
def mesh3():
    return mesh_at(3)


ACCEPTANCE_LINES = []


def report(label, ok, detail=""):
    """Record and print one acceptance line; returns ``ok`` for asserting."""
    line = f"{'PASS' if ok else 'FAIL'}  {label}" + (f"  ({detail})" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
