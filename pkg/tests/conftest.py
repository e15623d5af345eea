import pytest

from pixground.synth.splits import GroundingDataset, SplitConfig, build_splits


@pytest.fixture(scope="session")
def default_splits():
    """The default benchmark: 5000 / 500 / 500 samples and 100 swap pairs."""
    return build_splits(SplitConfig())


@pytest.fixture(scope="session")
def default_datasets(default_splits):
    return {k: GroundingDataset.from_samples(v) for k, v in default_splits.items()}


ACCEPTANCE = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = {}


@pytest.fixture
def acceptance(request):
    """Criterion number -> (passed, detail), printed at the end of the session."""
    return request.config.stash[ACCEPTANCE]


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(ACCEPTANCE, {})
    if not results:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in range(1, 13):
        if n in results:
            ok, detail = results[n]
            terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        else:
            terminalreporter.write_line(f"criterion {n:2d}: NOT RUN")
