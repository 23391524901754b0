from __future__ import annotations

import pytest

from fedrr.config import ExperimentConfig
from fedrr.experiment import OUTPUT_ROOT_ENV


@pytest.fixture
def out_root(tmp_path, monkeypatch):
    monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path))
    return tmp_path


@pytest.fixture
def tiny_cfg() -> ExperimentConfig:
    """A logistic-regression run small enough for unit tests."""
    return ExperimentConfig().replace(
        **{
            "model.kind": "logistic",
            "data.features": 6,
            "data.classes": 3,
            "data.samples_per_client": 24,
            "training.learning_rate": 0.05,
            "training.epochs_per_round": 1,
            "training.minibatch_size": 8,
            "training.rounds": 40,
            "training.client_count": 3,
            "training.rng_seed": 11,
            "phase1.rounds": 8,
            "monitor.H": 3.0,
            "replications": 2,
            "output_dir": "tiny",
        }
    )


# --- acceptance verdict lines ---------------------------------------------

_VERDICTS: dict[int, str] = {}


@pytest.fixture
def verdict(request):
    """``verdict(n, ok, detail)`` records the one-line result of criterion ``n``."""

    def record(n: int, ok: bool, detail: str) -> None:
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
        _VERDICTS[n] = line
        print(line)
        assert ok, line

    return record


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker and rep.when == "call" and rep.failed:
        n = marker.args[0]
        _VERDICTS.setdefault(n, f"criterion {n}: FAIL  {type(call.excinfo.value).__name__}: {call.excinfo.value}")


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_VERDICTS):
            terminalreporter.write_line(_VERDICTS[n])
