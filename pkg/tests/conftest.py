import numpy as np
import pytest

from tsformer.data import SyntheticSpec, synth_generate
from tsformer.model import ModelConfig, TsformerModel


def tiny_config(**kw):
    base = dict(encoder_input_length=4, decoder_input_length=3, forecast_horizon=1, d_model=4,
                heads=2, encoder_layers=1, decoder_layers=1, ffn_dim=8, dropout=0.0, feature_dim=3)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def tiny_model():
    return TsformerModel.initialize(tiny_config(), seed=3)


@pytest.fixture(scope="session")
def small_dataset():
    return synth_generate(SyntheticSpec(days=120, seed=5))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance reporting: one line per criterion in the terminal summary

_CRITERIA: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, name): acceptance criterion")


def pytest_runtest_logreport(report):
    crit = getattr(report, "criterion", None)
    if crit is None:
        return
    number, name = crit
    if report.when == "call" or (report.when == "setup" and not report.passed):
        _CRITERIA[number] = (name, "PASS" if report.passed else "FAIL")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        outcome.get_result().criterion = tuple(marker.args)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        name, verdict = _CRITERIA[number]
        terminalreporter.write_line(f"{verdict} criterion {number:>2}: {name}")
