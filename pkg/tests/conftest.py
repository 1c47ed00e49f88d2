import math

import pytest
from hypothesis import settings

from gwib import metrics_eval

settings.register_profile("default", deadline=None, derandomize=True)
settings.load_profile("default")

CRITERIA_KEY = pytest.StashKey[list]()
# (eps_ate, sqrt(eps_pehe), scope) for every model evaluation made during the session
EVALUATIONS: list = []
_BaseReport = metrics_eval.EvalReport


class CheckedReport(_BaseReport):
    """EvalReport that records itself and enforces eps_ATE <= sqrt(eps_PEHE)."""

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        root = math.sqrt(self.eps_pehe)
        EVALUATIONS.append((self.eps_ate, root, self.scope))
        assert self.eps_ate <= root, f"eps_ate {self.eps_ate!r} > sqrt(eps_pehe) {root!r}"


@pytest.fixture(autouse=True, scope="session")
def _check_every_evaluation():
    with pytest.MonkeyPatch.context() as mp:
        mp.setattr(metrics_eval, "EvalReport", CheckedReport)
        yield


def pytest_configure(config):
    config.stash[CRITERIA_KEY] = []


def pytest_collection_modifyitems(config, items):
    # acceptance runs last so its evaluation audit sees the whole session
    items.sort(key=lambda item: item.path.name == "test_acceptance.py")


@pytest.fixture
def record_criterion(request):
    def record(number, passed, detail):
        line = f"criterion {number:2d} {'PASS' if passed else 'FAIL'}: {detail}"
        print(line)
        request.config.stash[CRITERIA_KEY].append((number, line))
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = sorted(config.stash.get(CRITERIA_KEY, []))
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in lines:
            terminalreporter.write_line(line)
