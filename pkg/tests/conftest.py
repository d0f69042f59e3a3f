import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from crflow.basis import build_basis
from crflow.conformal import renormalize_volume

settings.register_profile(
    "crflow",
    max_examples=20,
    deadline=None,
    derandomize=True,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("crflow")


@pytest.fixture(scope="session")
def basis_n1():
    """Small S^3 basis shared by most unit tests."""
    return build_basis(1, 6)


@pytest.fixture(scope="session")
def basis_n1_deg8():
    """S^3 basis at the default run degree."""
    return build_basis(1, 8)


@pytest.fixture(scope="session")
def basis_n2():
    """S^5 smoke-scale basis."""
    return build_basis(2, 3)


def smooth_field(basis, seed, amp=0.1, decay=1.0, around_one=True):
    """Random field with exponentially decaying spectrum (test helper)."""
    rng = np.random.default_rng(seed)
    d = np.exp(-decay * np.array([i.p + i.q for i in basis.indices], dtype=float))
    c = rng.normal(size=basis.size) * d * amp
    if around_one:
        c = c + basis.constant_field(1.0).coeffs
    return basis.field(c)


def smooth_positive_field(basis, seed, amp=0.1, decay=1.0):
    u = smooth_field(basis, seed, amp=amp, decay=decay)
    if float(np.min(u.grid)) <= 0.05:
        u = basis.field(u.coeffs + basis.constant_field(1.0).coeffs)
    return renormalize_volume(u)


@pytest.fixture(scope="session")
def yamabe_run_deg8(basis_n1_deg8):
    """Converged CR Yamabe run reused across test modules."""
    from crflow.flow import FlowConfig, run

    basis = basis_n1_deg8
    one = basis.constant_field(1.0)
    u0 = basis.field(one.coeffs + 0.1 * basis.coordinate_field(0, "re").coeffs)
    cfg = FlowConfig(n=1, N=8, t_end=20.0, dt_init=0.02, dt_max=0.08)
    return run(cfg, basis, one, u0)


def pytest_runtest_logreport(report):
    # one visible pass/fail line per acceptance criterion
    if report.when == "call" and "test_acceptance" in report.nodeid:
        name = report.nodeid.split("::")[-1]
        print(f"\n[acceptance] {name}: {'PASS' if report.passed else 'FAIL'}", flush=True)
