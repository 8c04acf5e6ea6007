import numpy as np
import pytest

from earlyloc.exitnet import HyperParams, build_reference_model, train_all_exits, train_baseline
from earlyloc.fingerprint import split, synth_generate

# lr 0.01 (the library default) needs far more epochs on these small sets
FAST_HP = HyperParams(lr=0.1, epochs=20, batch_size=32, seed=0)


@pytest.fixture(scope="session")
def desk_data():
    ds = synth_generate(16, 64, 100, easy_fraction=0.8, seed=0)
    return ds, split(ds, (0.8, 0.1, 0.1), seed=0)


@pytest.fixture(scope="session")
def trained_model(desk_data):
    """Reference architecture on 16 classes / 8x8 images, baseline and both exits trained."""
    ds, (train, _, _) = desk_data
    model = build_reference_model(16, ds.image_side, wap_index=ds.wap_index, seed=0)
    model.coords = ds.coords
    train_baseline(model, train, FAST_HP)
    train_all_exits(model, train, FAST_HP)
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance reporting ------------------------------------------------
# Tests marked ``criterion(n)`` get one PASS/FAIL line in the terminal
# summary; details come from ``record_property("detail", ...)``.

_CRITERIA: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when != "call" and not (rep.when == "setup" and rep.failed):
        return
    detail = dict(item.user_properties).get("detail", "")
    if rep.failed and not detail:
        detail = str(call.excinfo.value).splitlines()[0] if call.excinfo else ""
    _CRITERIA[mark.args[0]] = ("PASS" if rep.passed else "FAIL", item.name, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        status, name, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {status}  {name}  {detail}")
