import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("repo", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")

_ACCEPTANCE: list[tuple[str, bool, str]] = []


@pytest.fixture(scope="session")
def acceptance_log():
    """Record (criterion, passed, detail); printed as one line each at the end of the run."""
    def record(name: str, passed: bool, detail: str) -> bool:
        _ACCEPTANCE.append((name, bool(passed), detail))
        return bool(passed)
    return record


@pytest.fixture(scope="session")
def mfa_scaling_report():
    """One MFA timing sweep over 64^2, 128^2, 256^2, shared by every test that reads it."""
    import time

    from crnbev.bench import bench_mfa

    t = time.perf_counter()
    report = bench_mfa([64, 128, 256], ("dense", "sparse"), n_k=4096, repeats=9, warmup=1)
    report.meta["elapsed_s"] = time.perf_counter() - t
    return report


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in _ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
