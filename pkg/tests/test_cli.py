import csv
from pathlib import Path

import numpy as np
import pytest

from mica.cli import main, parse_config, model_config_from
from mica.data import ConfigError, gen_leadlag, write_csv

TINY_CONF = """\
# tiny end-to-end run
model.horizon = 4
model.input_size = 8
model.n_layers = 1
model.d_model = 8
model.n_heads = 2
model.ff_hidden = 16
model.d_k = 4
model.d_v = 4
model.patch_len = 4
model.stride = 4
model.mica = true          # gate on
train.windows_batch = 4
train.max_steps = 6
train.val_check_every = 3
train.early_stop_patience = 5
train.seeds = 1,2
data.path = {data}
data.val_size = 20
data.test_size = 20
"""


@pytest.fixture
def workspace(tmp_path):
    data = tmp_path / "panel.csv"
    write_csv(gen_leadlag(2, 120, lag=2, noise_sigma=0.1, seed=5), data)
    conf = tmp_path / "run.conf"
    conf.write_text(TINY_CONF.format(data=data))
    return tmp_path, conf


def read_text(path: Path) -> str:
    return Path(path).read_text()


# -- config parsing ---------------------------------------------------------------

def test_parse_config_defaults_comments_and_sugar(tmp_path):
    conf = tmp_path / "a.conf"
    conf.write_text("model.horizon = 24\ntrain.seeds = 1..3\n"
                    "# full-line comment\nbench.grid = 2,4,8\n")
    parsed = parse_config(conf)
    assert parsed["model.horizon"] == 24
    assert parsed["train.seeds"] == (1, 2, 3)
    assert parsed["bench.grid"] == (2, 4, 8)
    assert parsed["model.d_model"] == 256  # default untouched
    assert parsed["model.mica"] is False


def test_parse_config_rejects_unknown_and_duplicates(tmp_path):
    conf = tmp_path / "bad.conf"
    conf.write_text("model.horizon = 4\nmodel.hidden = 12\n")
    with pytest.raises(ConfigError, match="unknown key 'model.hidden'"):
        parse_config(conf)
    conf.write_text("model.horizon = 4\nmodel.horizon = 8\n")
    with pytest.raises(ConfigError, match="duplicate"):
        parse_config(conf)
    conf.write_text("model.horizon = abc\n")
    with pytest.raises(ConfigError, match="bad.conf:1"):
        parse_config(conf)


def test_model_config_from_builds_mica(tmp_path):
    conf = tmp_path / "m.conf"
    conf.write_text("model.horizon = 4\nmodel.mica = true\n"
                    "model.gate = mlp\nmodel.exclusion = yes\n")
    mcfg = model_config_from(parse_config(conf))
    assert mcfg.input_size == 8  # derived 2*H
    assert mcfg.mica.gate == "mlp"
    assert mcfg.mica.exclusion is True
    conf.write_text("model.horizon = 4\n")
    assert model_config_from(parse_config(conf)).mica is None


# -- exit codes -----------------------------------------------------------------------

def test_exit_code_unknown_key(workspace, capsys):
    tmp, conf = workspace
    conf.write_text(conf.read_text() + "nonsense.key = 1\n")
    code = main(["train", "--config", str(conf), "--out", str(tmp / "o")])
    assert code == 2
    assert "unknown key" in capsys.readouterr().err


def test_exit_code_missing_dataset(tmp_path, capsys):
    conf = tmp_path / "c.conf"
    conf.write_text("model.horizon = 4\ndata.path = missing.csv\n"
                    "data.val_size = 8\ndata.test_size = 8\n")
    code = main(["train", "--config", str(conf), "--out", str(tmp_path)])
    assert code == 2
    assert "missing.csv" in capsys.readouterr().err


def test_help_lists_schema(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--help"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    assert "model.horizon" in out and "bench.grid" in out


# -- train / eval round trip -------------------------------------------------------------

def test_train_writes_reports_params_and_summary(workspace, capsys):
    tmp, conf = workspace
    out = tmp / "run1"
    assert main(["train", "--config", str(conf), "--out", str(out)]) == 0
    for seed in (1, 2):
        assert (out / f"params_seed{seed}.bin").exists()
        rows = list(csv.reader(open(out / f"report_seed{seed}.csv")))
        assert rows[0] == ["record", "step", "mae", "rmse"]
        kinds = {r[0] for r in rows[1:]}
        assert kinds == {"train", "val", "summary"}
    summary = list(csv.reader(open(out / "summary.csv")))
    assert summary[0] == ["seed", "best_step", "test_mae", "test_rmse"]
    assert [r[0] for r in summary[1:]] == ["1", "2", "mean", "std"]
    assert "mean test_mae" in capsys.readouterr().out


def test_train_outputs_byte_identical_across_runs(workspace):
    tmp, conf = workspace
    out_a, out_b = tmp / "a", tmp / "b"
    assert main(["train", "--config", str(conf), "--out", str(out_a)]) == 0
    assert main(["train", "--config", str(conf), "--out", str(out_b)]) == 0
    assert read_text(out_a / "summary.csv") == read_text(out_b / "summary.csv")
    for seed in (1, 2):
        assert (read_text(out_a / f"report_seed{seed}.csv") ==
                read_text(out_b / f"report_seed{seed}.csv"))


def test_parallel_seeds_match_sequential(workspace):
    tmp, conf = workspace
    seq, par = tmp / "seq", tmp / "par"
    assert main(["train", "--config", str(conf), "--out", str(seq)]) == 0
    assert main(["train", "--config", str(conf), "--out", str(par),
                 "--parallel-seeds", "2"]) == 0
    assert read_text(seq / "summary.csv") == read_text(par / "summary.csv")


def test_eval_checks_digest_and_writes_outputs(workspace, capsys):
    tmp, conf = workspace
    out = tmp / "train_out"
    assert main(["train", "--config", str(conf), "--out", str(out)]) == 0
    eval_out = tmp / "eval_out"
    code = main(["eval", "--config", str(conf),
                 "--params", str(out / "params_seed1.bin"),
                 "--out", str(eval_out)])
    assert code == 0
    metrics = list(csv.reader(open(eval_out / "metrics.csv")))
    assert metrics[0] == ["split", "mae", "rmse"]
    assert {r[0] for r in metrics[1:]} == {"val", "test"}
    forecasts = list(csv.reader(open(eval_out / "forecasts.csv")))
    # 5 test windows x 2 channels x horizon 4 = 40 rows + header
    assert len(forecasts) == 41

    # a config change must be refused with exit code 3
    mutated = tmp / "mutated.conf"
    mutated.write_text(conf.read_text().replace("model.d_k = 4",
                                                "model.d_k = 8")
                       .replace("model.d_v = 4", "model.d_v = 8"))
    code = main(["eval", "--config", str(mutated),
                 "--params", str(out / "params_seed1.bin"),
                 "--out", str(tmp / "e2")])
    assert code == 3
    assert "does not match" in capsys.readouterr().err


# -- bench / flops -------------------------------------------------------------------------

def test_bench_writes_rows_and_fits(workspace, capsys):
    tmp, conf = workspace
    bench_conf = tmp / "bench.conf"
    bench_conf.write_text(
        "model.horizon = 4\nmodel.input_size = 16\nmodel.n_layers = 1\n"
        "model.d_model = 8\nmodel.n_heads = 2\nmodel.ff_hidden = 16\n"
        "model.d_k = 4\nmodel.d_v = 4\nmodel.patch_len = 4\n"
        "model.stride = 4\nmodel.mica = true\n"
        "bench.grid = 2,4,8,16\nbench.measure = false\n")
    out = tmp / "bench_out"
    assert main(["bench", "--config", str(bench_conf),
                 "--out", str(out)]) == 0
    rows = list(csv.reader(open(out / "bench.csv")))
    assert len(rows) == 1 + 3 * 4  # header + mechanisms x grid
    fits = list(csv.reader(open(out / "bench_fits.csv")))
    mech_fits = {r[0] for r in fits[1:]}
    assert mech_fits == {"baseline", "mica", "concat"}
    assert "flop exponent" in capsys.readouterr().out


def test_bench_rejects_mica_mechanism_without_mica(workspace, capsys):
    tmp, conf = workspace
    bench_conf = tmp / "b.conf"
    bench_conf.write_text("model.horizon = 4\nbench.grid = 2,4,8,16\n"
                          "bench.measure = false\n")
    code = main(["bench", "--config", str(bench_conf),
                 "--out", str(tmp / "x")])
    assert code == 2
    assert "model.mica" in capsys.readouterr().err


def test_flops_command_prints_breakdown(workspace, capsys):
    tmp, conf = workspace
    fl_conf = tmp / "f.conf"
    fl_conf.write_text("model.horizon = 4\nmodel.mica = true\n"
                       "bench.channels = 5\n")
    assert main(["flops", "--config", str(fl_conf)]) == 0
    out = capsys.readouterr().out
    assert "mica" in out and "C=5" in out and "params=" in out
    assert main(["flops", "--config", str(fl_conf),
                 "--out", str(tmp / "fl")]) == 0
    rows = list(csv.reader(open(tmp / "fl" / "flops.csv")))
    assert rows[0][0] == "mechanism"
