"""Examples measured on the trained 2-cell benchmark network (shares the acceptance cache)."""

from pathlib import Path

import pytest

from drnet.experiments import TrendRunner, TrendSettings
from drnet.inference import sweep
from drnet.training import evaluate

CACHE = Path(__file__).resolve().parent.parent / ".trend_cache"

pytestmark = pytest.mark.slow


@pytest.fixture(scope="module")
def runner():
    return TrendRunner(CACHE, log=print)


def test_thirty_epoch_run_fits_training_set():
    # one 30-epoch training run with default settings; accuracy over the whole training set
    runner = TrendRunner(CACHE, TrendSettings(pretrain_epochs=30), log=print)
    key = runner.pretrain()
    assert len(runner.training_log(key)) == 30
    net = runner.network(key)
    train, _ = runner.data
    acc = evaluate(net, train, net.final_tau)["accuracy"]
    print(f"train accuracy after 30 epochs: {acc:.4f}")
    assert acc >= 0.95


def test_threshold_sweep_sanity_band(runner):
    net = runner.network(runner.finetune(0.1))
    _, test = runner.data
    rows = sweep(net, test, [0.5, 1.0])
    assert rows[1]["accuracy"] >= rows[0]["accuracy"] - 0.02
    assert rows[0]["mean_flops"] <= rows[1]["mean_flops"]
