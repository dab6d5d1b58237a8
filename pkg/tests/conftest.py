import pytest

from deps import pipeline as pl

TINY = dict(
    n_users=20,
    n_items=20,
    horizon=400,
    dim=8,
    layers=1,
    heads=2,
    max_len=10,
    n_p=2,
    n_u=2,
    batch_size=64,
    seeds=[0, 1],
    verify_replications=1000,
    verify_events=5,
    sweep_values=[0.05, 0.2],
)


@pytest.fixture
def tiny_config() -> pl.RunConfig:
    return pl.RunConfig(**TINY)


@pytest.fixture(scope="session")
def tiny_dataset() -> pl.Dataset:
    return pl.prepare_dataset(pl.RunConfig(**TINY))


# one line per acceptance criterion, printed after the run
ACCEPTANCE_RESULTS: dict[str, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_RESULTS, key=lambda k: int(k.split()[0])):
        ok, detail = ACCEPTANCE_RESULTS[key]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {key}: {detail}")
