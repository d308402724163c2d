import os

import pytest
import torch

from sdflow import experiment
from sdflow.evaluate import evaluate
from sdflow.numerics import precision

CRITERIA = {}


@pytest.fixture(autouse=True)
def _restore_dtype():
    old = torch.get_default_dtype()
    yield
    torch.set_default_dtype(old)


@pytest.fixture
def f64():
    with precision("float64"):
        yield


@pytest.fixture
def criterion():
    """Record one acceptance criterion outcome: ``criterion(n, passed, detail)``."""
    def record(n, passed, detail=""):
        CRITERIA.setdefault(n, []).append((bool(passed), detail))
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        results = CRITERIA[n]
        ok = all(p for p, _ in results)
        detail = "; ".join(d for _, d in results if d)
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")


# -- the desk-scale toy experiment, trained once and cached on disk ------------------

REPO = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def desk_run_dir(cfg):
    return os.environ.get("SDFLOW_RUN_DIR") or os.path.join(REPO, "runs", f"desk-{experiment.run_key(cfg)}")


@pytest.fixture(scope="session")
def desk_run():
    """``(state, corpus, log_rows)`` of the default desk configuration (hours on first use)."""
    cfg = experiment.desk_config()
    return experiment.run(cfg, desk_run_dir(cfg))


@pytest.fixture(scope="session")
def desk_eval(desk_run):
    state, corpus, _ = desk_run
    with precision(state.config.dtype):
        rows, summary = evaluate(state.model, corpus, corpus.splits["test"], (0.0, 0.8), 10, seed=0)
    return rows, summary
