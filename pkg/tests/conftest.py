import pytest

_ACCEPTANCE = pytest.StashKey[dict]()
_SELECTED = pytest.StashKey[bool]()
CRITERIA = {
    1: "zero-noise PPA == reference",
    2: "instruction-set oracles",
    3: "xnor-popcount dot product",
    4: "training accuracy",
    5: "noise agreement",
    6: "bridge codec and loopback",
    7: "closed-loop tracking",
    8: "determinism",
}


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = {}


@pytest.fixture
def criterion(request):
    """Record one acceptance result, then assert it."""
    results = request.config.stash[_ACCEPTANCE]

    def check(number: int, ok: bool, detail: str):
        results[number] = (bool(ok), detail)
        assert ok, f"criterion {number} ({CRITERIA[number]}) failed: {detail}"

    return check


def pytest_collection_modifyitems(config, items):
    config.stash[_SELECTED] = any(item.path.name == "test_acceptance.py" for item in items)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not config.stash.get(_SELECTED, False):
        return
    results = config.stash[_ACCEPTANCE]
    terminalreporter.section("acceptance criteria")
    for number, name in CRITERIA.items():
        ok, detail = results.get(number, (False, "did not complete"))
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {number}. {name}: {detail}")
