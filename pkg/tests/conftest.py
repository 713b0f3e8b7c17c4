import pytest

from auxfas import synthgen as sg


@pytest.fixture(scope="session")
def small_clips():
    """One subject: a live, a print and a replay clip of 60 frames at 64x64."""
    return sg.gen_dataset(1, 1, T=60, fps=30.0, size=64, seed=3)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", {})
    if lines:
        terminalreporter.section("acceptance")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
