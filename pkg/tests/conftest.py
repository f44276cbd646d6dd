from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parents[1]
ADULT_TRAIN = ROOT / "data" / "adult" / "adult.data"
ADULT_TEST = ROOT / "data" / "adult" / "adult.test"

needs_adult = pytest.mark.skipif(
    not (ADULT_TRAIN.exists() and ADULT_TEST.exists()),
    reason="UCI-Adult files missing; run scripts/fetch_adult.py",
)


@pytest.fixture(scope="session")
def adult_raw():
    from tlleak.data import load_adult

    return load_adult(ADULT_TRAIN, ADULT_TEST, drop_missing=False)


@pytest.fixture(scope="session")
def adult_pair(adult_raw):
    from tlleak.data import split_domains

    return split_domains(adult_raw)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import VERDICTS
    except ImportError:
        return
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
