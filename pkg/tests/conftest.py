import numpy as np
import pytest

from eqfreedm import dataset, dmap, operators, twcont
from eqfreedm.dataset import SamplingConfig
from eqfreedm.model import ModelParams

DESK = SamplingConfig()  # M=1000, default seed


@pytest.fixture(scope="session")
def params():
    return ModelParams()


@pytest.fixture(scope="session")
def raw_data(request, params):
    """Desk-scale unaligned dataset, generated once and cached between runs."""
    cache = request.config.cache.mkdir("eqfreedm")
    path = cache / f"raw-{DESK.n_samples}-{DESK.rng_seed}.csv"
    if path.exists():
        data = dataset.load(path)
        if data.params == params and data.config == DESK:
            return data
    data = dataset.generate(params, DESK)
    dataset.save(data, path)
    return data


@pytest.fixture(scope="session")
def aligned_data(raw_data):
    return dataset.align_all(raw_data)


@pytest.fixture(scope="session")
def ops1(aligned_data):
    dm, _ = dmap.embed(aligned_data, dimension=1)
    return operators.OperatorPair(dm, aligned_data)


@pytest.fixture(scope="session")
def ops2(raw_data):
    dm, _ = dmap.embed(raw_data, dimension=2)
    return operators.OperatorPair(dm, raw_data)


@pytest.fixture(scope="session")
def micro(params):
    return twcont.micro_branch(params)


def micro_sigma_at(branch, v0, stable):
    """Micro-branch sigma at ``v0`` on the segment of the given stability."""
    pts = [(p.v0, p.sigma) for p in branch.points if p.stable == stable]
    v, s = np.array(pts).T
    order = np.argsort(v)
    v, s = v[order], s[order]
    if not v[0] <= v0 <= v[-1]:
        return None
    return float(np.interp(v0, v, s))


# one PASS/FAIL line per acceptance criterion at the end of the session

_criteria = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    if report.when == "call" or report.outcome != "passed":
        _criteria[report.nodeid] = (report.outcome, report)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    items = {i.nodeid: i for i in terminalreporter.config._acceptance_items}
    for nodeid in sorted(_criteria):
        outcome, _ = _criteria[nodeid]
        item = items.get(nodeid)
        doc = (item.function.__doc__ or "").strip() if item else ""
        n = int(nodeid.split("test_criterion_")[1][:2])
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if outcome == 'passed' else 'FAIL'}"
                                    f"  {doc}")


def pytest_collection_modifyitems(config, items):
    config._acceptance_items = [i for i in items if "test_acceptance.py" in i.nodeid]
