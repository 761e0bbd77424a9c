import subprocess
import sys

import pytest

from symdistill.cli import main
from symdistill.config import KEYS, ConfigError, RunConfig, parse_config, parse_config_text
from symdistill.featstore import read_header, write_features
from conftest import TINY_KEYS, random_features

CANONICAL = (
    "vocab_size seq_len d_model n_heads dec_depth enc_depth proj_hidden proj_bottleneck n_prototypes "
    "discretize tau_start tau_end tau_schedule st_hard vq_beta strategy alpha beta strategy_switch_epoch "
    "teacher_temp student_temp center_momentum granularity_lambda cross_view aggregate_loss_term epochs "
    "batch_size lr_base warmup_epochs weight_decay clip_norm ema_start ema_end seed eval_every_epochs "
    "knn_temp train_features eval_features out_dir"
).split()


def test_canonical_keys():
    assert list(KEYS) == CANONICAL


def test_empty_file_gives_defaults():
    cfg = parse_config_text("")
    assert cfg == RunConfig()
    assert (cfg.model.vocab_size, cfg.model.seq_len, cfg.train.epochs, cfg.train.batch_size) == (128, 8, 140, 64)
    assert cfg.train.clip_norm == 2.0 and cfg.train.ema_start == 0.996


def test_missing_paths_listed():
    with pytest.raises(ConfigError, match="missing required keys: train_features"):
        parse_config_text("# nothing\n", require=("train_features",))


def test_bad_seq_len_names_line():
    with pytest.raises(ConfigError, match=r"cfg:2: .*power of two required"):
        parse_config_text("vocab_size = 64\nseq_len = 6\n", source="cfg")


def test_unknown_key_and_type_errors_name_line():
    with pytest.raises(ConfigError, match=r"c:3: unknown config key 'depth'"):
        parse_config_text("seed = 1\n\ndepth = 3\n", source="c")
    with pytest.raises(ConfigError, match=r"c:1: .*epochs"):
        parse_config_text("epochs = many\n", source="c")
    with pytest.raises(ConfigError, match=r"c:1:"):
        parse_config_text("not a pair\n", source="c")


def test_cross_field_constraint_blames_line():
    with pytest.raises(ConfigError, match=r"c:2:"):
        parse_config_text("tau_start = 1.0\ntau_end = 2.0\n", source="c")


def test_comments_and_whitespace():
    cfg = parse_config_text("  alpha = 0.5   # inline\n# full line\nst_hard = true\n")
    assert cfg.loss.alpha == 0.5 and cfg.disc.st_hard is True


def test_resolved_config_round_trip(tmp_path):
    cfg = parse_config_text("discretize = vq\nstrategy = combined\nstrategy_switch_epoch = 7\n"
                            "lr_base = 0.000123456789\ntrain_features = a.symf\n")
    again = parse_config_text(cfg.to_text())
    assert again == cfg
    path = tmp_path / "r.cfg"
    path.write_text(cfg.to_text())
    assert parse_config(path) == cfg


def _cfg_file(tmp_path, **extra):
    tr, ev = random_features(n=8, seed=1), random_features(n=6, seed=2)
    write_features(tr, tmp_path / "tr.symf")
    write_features(ev, tmp_path / "ev.symf")
    values = dict(TINY_KEYS, epochs=1, batch_size=4, warmup_epochs=0, eval_every_epochs=1,
                  train_features=tmp_path / "tr.symf", eval_features=tmp_path / "ev.symf",
                  out_dir=tmp_path / "out")
    values.update(extra)
    path = tmp_path / "run.cfg"
    path.write_text("".join(f"{k} = {v}\n" for k, v in values.items()))
    return path


def test_no_arguments_is_usage_error(capsys):
    assert main([]) == 1
    assert "usage" in capsys.readouterr().err


def test_unknown_subcommand_is_usage_error(capsys):
    assert main(["dance"]) == 1
    assert "usage" in capsys.readouterr().err
    assert main(["probe"]) == 1


def test_runtime_errors_exit_2(tmp_path, capsys):
    assert main(["features", "info", str(tmp_path / "missing.symf")]) == 2
    (tmp_path / "bad.cfg").write_text("seq_len = 6\n")
    assert main(["train", str(tmp_path / "bad.cfg")]) == 2
    assert "power of two" in capsys.readouterr().err


def test_features_info_matches_header(tmp_path, capsys):
    path = tmp_path / "f.symf"
    write_features(random_features(n=5, views=3, grid=(2, 3), d_t=7), path)
    assert main(["features", "info", str(path)]) == 0
    out = capsys.readouterr().out
    h = read_header(path)
    assert f"N = {h['n']}" in out and f"V = {h['v']}" in out
    assert f"grid = {h['grid_h']}x{h['grid_w']}" in out and f"d_t = {h['d_t']}" in out


def test_features_synth(tmp_path):
    assert main(["features", "synth", str(tmp_path / "a.symf"), str(tmp_path / "b.symf"),
                 "--n-train", "20", "--n-eval", "10", "--d-t", "6"]) == 0
    assert read_header(tmp_path / "a.symf")["n"] == 20


def test_train_then_tools(tmp_path, capsys):
    cfg = _cfg_file(tmp_path)
    assert main(["train", str(cfg)]) == 0
    out = capsys.readouterr().out
    assert "vocab_size = 8" in out
    ckpt = str(tmp_path / "out" / "ckpt_epoch0001.symc")
    tr, ev = str(tmp_path / "tr.symf"), str(tmp_path / "ev.symf")

    assert main(["probe", "knn", ckpt, tr, ev, "--k", "1", "3", "--csv", str(tmp_path / "k.csv")]) == 0
    assert (tmp_path / "k.csv").read_text().count("\n") == 3
    assert main(["probe", "linear", ckpt, tr, ev, "--epochs", "3"]) == 0
    assert main(["probe", "subseq", ckpt, tr, ev, "--k", "2"]) == 0
    assert main(["probe", "knn", ckpt, tr, ev, "--k", "100"]) == 2

    assert main(["generate", ckpt, ev, "--views", "0", "1", "--out", str(tmp_path / "g.tsv")]) == 0
    lines = (tmp_path / "g.tsv").read_text().splitlines()
    assert len(lines) == 12 and all(len(l.split("\t")[2].split(",")) == 4 for l in lines)

    assert main(["attend", ckpt, ev, "--sample", "1", "--scale", "4", "--csv",
                 "--out-dir", str(tmp_path / "att")]) == 0
    assert len(list((tmp_path / "att").glob("*.pgm"))) == 4
    assert main(["attend", ckpt, ev, "--sample", "99"]) == 2

    assert main(["symbol-scan", ckpt, ev, "--symbol", "0", "--class-id", "1",
                 "--out-dir", str(tmp_path / "scan")]) == 0
    assert (tmp_path / "scan" / "manifest.tsv").exists()
    assert main(["symbol-scan", ckpt, ev, "--symbol", "0", "--class-id", "9"]) == 2


def test_train_resume_via_cli(tmp_path):
    cfg = _cfg_file(tmp_path, epochs=2)
    assert main(["train", str(cfg), "--stop-epoch", "1"]) == 0
    ckpt = tmp_path / "out" / "ckpt_epoch0001.symc"
    assert main(["train", str(cfg), "--resume", str(ckpt)]) == 0
    assert (tmp_path / "out" / "ckpt_epoch0002.symc").exists()


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "symdistill"], capture_output=True, text=True)
    assert r.returncode == 1 and "usage" in r.stderr


def test_selfcheck_quick(capsys):
    assert main(["selfcheck", "--quick"]) == 0
    out = capsys.readouterr().out
    assert "[FAIL]" not in out and out.count("[PASS]") == 11
