import json
import os

import pytest
from hypothesis import given, settings, strategies as st

from drnet.cli import locked, main
from drnet.config import DEFAULT_THRESHOLDS, RunConfig, apply_override, load_run_config, run_name
from drnet.errors import ConfigError, DRNetError
from drnet.metrics import emit_metrics, format_metrics, format_table, parse_metrics, read_metrics

TINY = ["--set", "synthetic_classes=3", "--set", "synthetic_per_class=4", "--set", "synthetic_test_per_class=4",
        "--set", "backbone.num_classes=3", "--set", "backbone.init_channels=4", "--set", "train.batch_size=6"]


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("runs")
    args = ["train", "--preset", "toy", "--epochs", "1", "--output-dir", str(out), "--seed", "3"] + TINY
    assert main(args) == 0
    run = out / "drnet-toy-R-0-T-0.8-pretrain"
    return out, run


# -- config ----------------------------------------------------------------------

def test_defaults_are_documented_constants():
    cfg = RunConfig()
    t = cfg.train_config()
    assert cfg.threshold == 0.8 and cfg.thresholds == list(DEFAULT_THRESHOLDS)
    assert (t.momentum, t.weight_decay, t.batch_size) == (0.9, 3e-4, 128)
    assert cfg.backbone_config().aux_weight == 0.4
    assert cfg.backbone_config().L == 5 and cfg.backbone_config().init_channels == 15


def test_unknown_keys_rejected(tmp_path):
    with pytest.raises(ConfigError):
        load_run_config(None, {"colour": 1})
    with pytest.raises(ConfigError):
        load_run_config(None, {"train": {"learning": 1}})
    with pytest.raises(ConfigError):
        load_run_config(None, {"backbone": {"depth": 1}})
    p = tmp_path / "c.json"
    p.write_text("[1, 2]")
    with pytest.raises(ConfigError):
        load_run_config(str(p))


def test_precedence_file_then_flags_then_assignments(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"threshold": 0.5, "train": {"lam": 0.2, "epochs": 7}}))
    cfg = load_run_config(str(p), {"threshold": 0.6, "train": {"lam": 0.3}}, ["train.epochs=9"])
    assert cfg.threshold == 0.6
    assert cfg.train_config().lam == 0.3 and cfg.train_config().epochs == 9


def test_override_parsing():
    d = {}
    apply_override(d, "train.lambda=0.5")
    apply_override(d, "run_name=abc")
    apply_override(d, "threshold=null")
    assert d == {"train": {"lambda": 0.5}, "run_name": "abc", "threshold": None}
    assert load_run_config(None, None, ["train.lambda=0.5"]).train_config().lam == 0.5
    with pytest.raises(ConfigError):
        apply_override(d, "novalue")


def test_run_names():
    assert run_name("S", 0.1, 0.8) == "drnet-S-R-0.1-T-0.8"
    assert run_name("S", 0.0, None, "finetune") == "drnet-S-R-0-finetune"


def test_resolved_echoes_every_constant():
    r = RunConfig().resolved()
    assert r["train"]["momentum"] == 0.9 and r["train"]["drop_branch_max"] == 0.7
    assert r["backbone"]["N"] == 4 and r["threshold"] == 0.8


# -- metrics files ---------------------------------------------------------------

records_st = st.lists(st.fixed_dictionaries({
    "epoch": st.integers(-10 ** 6, 10 ** 6),
    "loss": st.floats(allow_nan=False, allow_infinity=True, width=64),
    "name": st.text(alphabet="abcxyz ,\"'", min_size=1, max_size=8).filter(lambda s: s not in ("true", "false")
                                                                         and not _numeric(s)),
    "ok": st.booleans()}), max_size=6)


def _numeric(s):
    try:
        float(s)
        return True
    except ValueError:
        return False


@settings(max_examples=100, deadline=None)
@given(records_st, st.sampled_from(["csv", "jsonlines"]))
def test_metrics_round_trip(records, fmt):
    assert parse_metrics(format_metrics(records, fmt), fmt) == records


def test_empty_records_give_header_only_csv(tmp_path):
    path = emit_metrics([], "csv", tmp_path / "m.csv", columns=["T", "accuracy"])
    assert path.read_text() == "T,accuracy\n"
    assert read_metrics(path) == []


def test_stable_column_order_and_schema_check(tmp_path):
    recs = [{"b": 1, "a": 0.1}, {"a": 0.2, "b": 2}]
    assert format_metrics(recs, "csv").splitlines()[0] == "b,a"
    with pytest.raises(ValueError):
        format_metrics([{"a": 1}, {"b": 2}], "csv")
    path = emit_metrics(recs, "jsonlines", tmp_path / "m.jsonl")
    assert read_metrics(path) == [{"b": 1, "a": 0.1}, {"b": 2, "a": 0.2}]


def test_full_precision_floats():
    x = 0.1 + 0.2
    assert parse_metrics(format_metrics([{"x": x}], "csv"))[0]["x"] == x


def test_unwritable_path(tmp_path):
    with pytest.raises(OSError):
        emit_metrics([{"a": 1}], "csv", tmp_path / "missing" / "m.csv")


def test_table_formatting():
    text = format_table([{"T": 0.5, "flops": 1234567.0}])
    assert text.splitlines()[1].split() == ["0.5", "1,234,567"]


# -- commands --------------------------------------------------------------------

def test_inspect_small_model(capsys):
    assert main(["inspect"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert (out["L"], out["C"], out["B+1"]) == (5, 8, 5)
    assert out["candidate_architectures"] == "31^40"
    assert out["candidate_architectures_exact"] == str(31 ** 40)
    assert out["params"] > 0 and out["full_flops"] > sum(out["fixed_flops"].values()) > 0


def test_config_error_exit_code(capsys):
    assert main(["inspect", "--set", "colour=red"]) == 1
    assert "colour" in capsys.readouterr().err
    assert main(["train", "--threshold", "1.5"]) == 1
    assert main(["frobnicate"]) == 1


def test_missing_checkpoint_exit_codes(tmp_path, capsys):
    assert main(["eval", "--preset", "toy"]) == 1
    assert main(["eval", "--checkpoint", str(tmp_path / "none.drn")]) == 2
    assert "not found" in capsys.readouterr().err


def test_data_error_exit_code(tmp_path):
    bad = tmp_path / "bad.bin"
    bad.write_bytes(bytes(3074))
    assert main(["train", "--preset", "toy", "--data", str(bad), "--test-data", str(bad),
                 "--output-dir", str(tmp_path)]) == 3


def test_train_writes_artifacts(trained):
    _, run = trained
    meta = json.loads((run / "run_meta.json").read_text())
    assert meta["train"]["seed"] == 3 and meta["train"]["momentum"] == 0.9
    assert meta["backbone"]["init_channels"] == 4
    log = read_metrics(run / "train_log.csv")
    assert [r["epoch"] for r in log] == [0] and log[0]["tau"] == 3.0
    assert (run / "checkpoint.drn").exists() and not (run / ".lock").exists()


def test_identical_config_gives_identical_metric_files(trained, tmp_path):
    out, run = trained
    args = ["train", "--preset", "toy", "--epochs", "1", "--output-dir", str(tmp_path), "--seed", "3"] + TINY
    assert main(args) == 0
    again = tmp_path / run.name
    assert (again / "train_log.csv").read_bytes() == (run / "train_log.csv").read_bytes()
    assert (again / "checkpoint.drn").read_bytes() == (run / "checkpoint.drn").read_bytes()


def test_finetune_with_mismatched_config(trained, tmp_path, capsys):
    _, run = trained
    args = ["train", "--preset", "toy", "--stage", "finetune", "--epochs", "1", "--checkpoint",
            str(run / "checkpoint.drn"), "--output-dir", str(tmp_path)] + TINY
    assert main(args + ["--set", "backbone.L=3"]) == 2
    assert "L" in capsys.readouterr().err
    assert main(args + ["--lambda", "0.1", "--format", "jsonlines"]) == 0
    ft = tmp_path / "drnet-toy-R-0.1-T-0.8-finetune"
    rows = read_metrics(ft / "train_log.jsonl")
    assert rows[0]["stage"] == "finetune" and rows[0]["tau"] == 1.0


def _ckpt_args(trained):
    _, run = trained
    return ["--preset", "toy", "--checkpoint", str(run / "checkpoint.drn")] + TINY


def test_eval_threshold_one_equals_full(trained, capsys):
    assert main(["eval", "--threshold", "1.0"] + _ckpt_args(trained)) == 0
    at_one = json.loads(capsys.readouterr().out)
    assert main(["eval", "--full"] + _ckpt_args(trained)) == 0
    full = json.loads(capsys.readouterr().out)
    assert at_one["accuracy"] == full["accuracy"] and at_one["mean_flops"] == full["mean_flops"]
    assert full["threshold"] is None and full["flops_ratio"] == 1.0


def test_sweep_table(trained, tmp_path, capsys):
    assert main(["sweep", "--output-dir", str(tmp_path)] + _ckpt_args(trained)) == 0
    rows = read_metrics(tmp_path / "sweep" / "sweep.csv")
    assert [r["T"] for r in rows] == [0.5, 0.6, 0.7, 0.8, 0.9, 1.0]
    flops = [r["mean_flops"] for r in rows]
    assert all(a <= b for a, b in zip(flops, flops[1:]))
    assert "mean_flops" in capsys.readouterr().out


def test_report_artifacts(trained, tmp_path):
    assert main(["report", "--output-dir", str(tmp_path), "--set", "quantile=0.25"] + _ckpt_args(trained)) == 0
    ratios = read_metrics(tmp_path / "report" / "selection_ratios.csv")
    assert len(ratios) == 2 * 8
    assert set(ratios[0]) >= {"cell", "connection"}
    for r in ratios:
        vals = [v for k, v in r.items() if k not in ("cell", "connection")]
        assert len(vals) == 5 and sum(vals) >= 1 and all(0 <= v <= 1 for v in vals)
    eh = json.loads((tmp_path / "report" / "easy_hard.json").read_text())
    assert eh["easy_count"] == eh["hard_count"] == 3
    assert len((tmp_path / "report" / "decisions.jsonl").read_text().splitlines()) == 12


def test_output_lock(tmp_path):
    with locked(tmp_path / "run"):
        with pytest.raises(DRNetError):
            with locked(tmp_path / "run"):
                pass
    assert not os.path.exists(tmp_path / "run" / ".lock")


def test_locked_directory_is_runtime_error(trained, tmp_path):
    (tmp_path / "sweep").mkdir()
    (tmp_path / "sweep" / ".lock").write_text("1")
    assert main(["sweep", "--output-dir", str(tmp_path)] + _ckpt_args(trained)) == 2
