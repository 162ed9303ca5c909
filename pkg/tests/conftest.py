import numpy as np
import pytest

from ssmlab import data as ds
from ssmlab import model as mdl
from ssmlab import train as tr
from ssmlab.model import ModelConfig

SEEDS = (0, 1, 2, 3, 4)

BASELINE_TRAIN = dict(epochs=6, batch_size=32, lr_start=3e-3, lr_end=3e-4,
                      weight_decay=5e-2)


@pytest.fixture(scope="session")
def desk_train_data():
    return ds.synth_dataset(32, 10, 28, 1234)


@pytest.fixture(scope="session")
def desk_eval_data():
    return ds.synth_dataset(16, 10, 28, 1235)


@pytest.fixture(scope="session")
def trained_baselines(desk_train_data, desk_eval_data):
    """Five independently seeded desk models trained without reduction.

    Shared by the trend checks; treat the returned models as read-only and
    clone before mutating.
    """
    out = {}
    for seed in SEEDS:
        model = mdl.init_model(ModelConfig(), seed=seed)
        cfg = tr.TrainConfig(seed=seed, **BASELINE_TRAIN)
        tr.retrain(model, desk_train_data, cfg, desk_eval_data)
        acc = tr.evaluate(model, desk_eval_data)
        out[seed] = (model, acc)
    return out


# ---------------------------------------------------------------------------
# one-line verdict per acceptance check, printed after the run

_CRITERIA = [
    ("test_criterion_01", "r-to-ratio table reproduced within 0.02"),
    ("test_criterion_02", "scan equals per-step reference on 1000 cases"),
    ("test_criterion_03", "all model gradients match finite differences"),
    ("test_criterion_04", "merge invariants over 10000 random cases"),
    ("test_criterion_05", "pair selection equals greedy reference"),
    ("test_criterion_06", "training-free merging beats pruning at ratio 0.5"),
    ("test_criterion_07", "re-training recovers half the accuracy gap"),
    ("test_criterion_08", "accuracy degrades as token order is shuffled"),
    ("test_criterion_09", "throughput speedup at r=20 is at least 1.15x"),
    ("test_criterion_10", "checkpoint/IDX/demo round-trips are bit-exact"),
]

_outcomes = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    for prefix, _ in _CRITERIA:
        if name.startswith(prefix):
            prev = _outcomes.get(prefix)
            if report.when == "call":
                _outcomes[prefix] = report.outcome
            elif report.when == "setup" and report.outcome != "passed" and prev is None:
                _outcomes[prefix] = report.outcome


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.write_line("")
    terminalreporter.write_line("acceptance summary:")
    for i, (prefix, desc) in enumerate(_CRITERIA, 1):
        outcome = _outcomes.get(prefix)
        if outcome is None:
            continue
        verdict = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"  criterion {i:2d} [{verdict}] {desc}")
