import pytest

from gfmsysid.plant import PlantParams
from gfmsysid.simulator import SimConfig, simulate

_VERDICTS: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        number, title = mark.args
        v = _VERDICTS.setdefault(number, {"title": title, "passed": [], "details": []})
        v["passed"].append(rep.passed)
        d = getattr(item, "criterion_detail", "")
        if d:
            v["details"].append(d)


def pytest_terminal_summary(terminalreporter):
    """One line per criterion; a criterion split over several tests passes only if all do."""
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_VERDICTS):
        v = _VERDICTS[n]
        status = "PASS" if all(v["passed"]) else "FAIL"
        details = "; ".join(v["details"])
        terminalreporter.write_line(f"criterion {n}: {status}  {v['title']}" + (f"  [{details}]" if details else ""))


@pytest.fixture
def detail(request):
    """Attach a short measurement to the criterion line of the running test."""
    def note(text: str):
        request.node.criterion_detail = text
        print(text)
    return note


@pytest.fixture(scope="session")
def params() -> PlantParams:
    return PlantParams()


@pytest.fixture(scope="session")
def default_dataset(params):
    """The default three-step experiment, simulated once per session."""
    return simulate(SimConfig(), params)
