import pytest

from vpblab import kinetic

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def record(number, title, passed, detail):
    ACCEPTANCE[number] = (title, bool(passed), detail)
    print(f"criterion {number:2d} [{'PASS' if passed else 'FAIL'}] {title}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[n]
        tr.write_line(f"criterion {n:2d} [{'PASS' if ok else 'FAIL'}] {title}: {detail}")


@pytest.fixture(scope="session")
def angular():
    return kinetic.build_angular_quadrature()


@pytest.fixture(scope="session")
def grid12():
    return kinetic.build_velocity_grid(12, 6.0)


@pytest.fixture(scope="session")
def grid16():
    return kinetic.build_velocity_grid(16, 8.0)


@pytest.fixture(scope="session")
def hs12(grid12, angular):
    return kinetic.assemble_linearized(kinetic.PotentialModel(1.0), grid12, angular)


@pytest.fixture(scope="session")
def hs16(grid16, angular):
    return kinetic.assemble_linearized(kinetic.PotentialModel(1.0), grid16, angular)


@pytest.fixture(scope="session")
def grid20():
    return kinetic.build_velocity_grid(20, 8.0)


@pytest.fixture(scope="session")
def hs20(grid20, angular):
    return kinetic.assemble_linearized(kinetic.PotentialModel(1.0), grid20, angular)
