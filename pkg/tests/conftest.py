from __future__ import annotations

import pytest

from gridsplit.acopf import OpfOptions, kkt_jacobian, solve_centralized_opf
from gridsplit.network import build_admittance, load_case


@pytest.fixture(scope="session")
def case14():
    return load_case("case14")


@pytest.fixture(scope="session")
def case30():
    return load_case("case30")


@pytest.fixture(scope="session")
def adm14(case14):
    return build_admittance(case14)


@pytest.fixture(scope="session")
def adm30(case30):
    return build_admittance(case30)


@pytest.fixture(scope="session")
def opf14(case14, adm14):
    return solve_centralized_opf(case14, OpfOptions(), adm14)


@pytest.fixture(scope="session")
def opf30(case30, adm30):
    return solve_centralized_opf(case30, OpfOptions(), adm30)


@pytest.fixture(scope="session")
def kkt14(case14, opf14):
    return kkt_jacobian(case14, opf14)


@pytest.fixture(scope="session")
def kkt30(case30, opf30):
    return kkt_jacobian(case30, opf30)


@pytest.fixture(scope="session")
def sp_partition():
    """Spectral partition of a bundled case, cached per (case, K)."""
    from gridsplit.partitioning import affinity_matrix, spectral_partition

    cache = {}

    def get(case, adm, H, K, trials=30, seed=0):
        key = (case.name, K, trials, seed, id(H))
        if key not in cache:
            cache[key] = spectral_partition(affinity_matrix(H, adm), K, trials, seed, case.bus_ids)[0]
        return cache[key]

    return get


@pytest.fixture(scope="session")
def admm14(case14, adm14, kkt14, sp_partition):
    """Converged two-region run on case14 (desk penalty 1e4)."""
    from gridsplit.admm import AdmmOptions, run_admm

    part = sp_partition(case14, adm14, kkt14, 2)
    return part, run_admm(case14, part, AdmmOptions(rho0=1e4), adm14)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
