import csv

import numpy as np
import pytest

from emshift.cli import main
from emshift.config import ConfigError, RunConfig
from emshift.synth import SCENE_FILES

SMALL = ["height=64", "width=64", "n_lines=1", "min_length=30", "min_separation=0",
         "window_size=16", "n_train_windows=6", "n_val_windows=2", "widths=2,3,4",
         "amplitude=2", "noise_std=0.3", "initial_lr=0.02"]


def _set(*pairs):
    out = []
    for p in pairs:
        out += ["--set", p]
    return out


@pytest.fixture
def scene(tmp_path):
    d = tmp_path / "scene"
    assert main(["synth", "--out", str(d), "--seed", "3", "-q"] + _set(*SMALL)) == 0
    return d


# --- config ----------------------------------------------------------------------


def test_config_roundtrip():
    cfg = RunConfig(seed=7, widths=(4, 8, 16), augment=False, epsilon=0.1)
    assert RunConfig.from_text(cfg.to_text()) == cfg


def test_config_rejects_unknown_and_bad_values():
    with pytest.raises(ConfigError, match="line 2: unknown config key 'bogus'"):
        RunConfig.from_text("seed = 1\nbogus = 3\n")
    with pytest.raises(ConfigError, match="epsilon"):
        RunConfig.from_text("epsilon = 2")
    with pytest.raises(ConfigError, match="top_k"):
        RunConfig.from_text("top_k = 25")
    with pytest.raises(ConfigError, match="'seed'"):
        RunConfig.from_text("seed = abc")
    with pytest.raises(ConfigError):
        RunConfig(seed=-1)
    with pytest.raises(ConfigError):
        RunConfig(buffer=0.0)


def test_config_regions_split_the_scene():
    cfg = RunConfig(height=100, width=80, window_size=16)
    tr, te = cfg.train_region(), cfg.test_region()
    assert te == (0, 0, 50, 80) and tr == (50, 0, 50, 80)


# --- commands --------------------------------------------------------------------


def test_synth_writes_scene(scene, capsys):
    for n in SCENE_FILES + ("config.txt",):
        assert (scene / n).is_file()


def test_synth_is_byte_identical_per_seed(tmp_path):
    a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
    for d, seed in ((a, 5), (b, 5), (c, 6)):
        assert main(["synth", "--out", str(d), "--seed", str(seed), "-q"] + _set(*SMALL)) == 0
    for n in SCENE_FILES:
        assert (a / n).read_bytes() == (b / n).read_bytes()
    assert (a / "features.grid").read_bytes() != (c / "features.grid").read_bytes()


def test_unknown_key_exits_nonzero(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("seed = 1\nnot_a_key = 4\n")
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "s")]) != 0
    assert "not_a_key" in capsys.readouterr().err


def test_missing_scene_file_exits_nonzero(scene, capsys):
    (scene / "noisy.json").unlink()
    assert main(["pretrain", str(scene), "--out", str(scene / "o"), "-q"]
                + _set(*SMALL)) != 0
    assert "noisy.json" in capsys.readouterr().err


def test_pretrain_one_epoch_curve(scene):
    out = scene / "pre"
    assert main(["pretrain", str(scene), "--out", str(out), "-q"]
                + _set(*SMALL, "max_epochs=1")) == 0
    rows = list(csv.DictReader((out / "pretrain_curve.csv").open()))
    assert len(rows) == 1
    assert (out / "pretrained.segm").is_file()


def test_pretrain_learns_smoke_scene(tmp_path):
    geo = ["height=96", "width=96"]
    d = tmp_path / "s"
    assert main(["synth", "--out", str(d), "--seed", "3", "-q"]
                + _set(*geo, "n_lines=2", "min_length=60", "min_separation=20",
                       "amplitude=2", "noise_std=0.3")) == 0
    out = tmp_path / "pre"
    assert main(["pretrain", str(d), "--out", str(out), "-q"]
                + _set(*geo, "window_size=16", "n_train_windows=14", "n_val_windows=4",
                       "widths=2,3,4", "max_epochs=15")) == 0
    rows = list(csv.DictReader((out / "pretrain_curve.csv").open()))
    assert -min(float(r["val_loss"]) for r in rows) > 0.3


def test_em_zero_iterations_writes_header_only(scene):
    out = scene / "em"
    assert main(["em", str(scene), "--out", str(out), "-q"]
                + _set(*SMALL, "max_epochs=1", "max_iterations=0")) == 0
    lines = (out / "em_history.csv").read_text().strip().splitlines()
    assert lines == ["iteration,chunk_id,selected_offset,train_f1,val_f1,mean_label_dist"]
    for n in ("em.segm", "pretrained.segm", "labels_overlay.pgm"):
        assert (out / n).is_file()


def test_em_one_iteration_and_eval(scene):
    out = scene / "em"
    assert main(["em", str(scene), "--out", str(out), "-q"]
                + _set(*SMALL, "max_epochs=2", "max_iterations=1")) == 0
    rows = list(csv.DictReader((out / "em_history.csv").open()))
    assert rows and {r["iteration"] for r in rows} == {"1"}
    assert (out / "labels_iter01.json").is_file()
    ev = scene / "ev"
    assert main(["eval", str(scene), "--out", str(ev), "--model", f"em={out / 'em.segm'}",
                 "--model", "oracle", "-q"] + _set(*SMALL)) == 0
    got = {r["name"]: r for r in csv.DictReader((ev / "metrics.csv").open())}
    assert set(got) == {"em", "oracle"}
    assert (ev / "prediction_em.pgm").is_file()


def test_eval_oracle_scores_one(scene):
    ev = scene / "ev"
    assert main(["eval", str(scene), "--out", str(ev), "--model", "oracle", "-q"]
                + _set(*SMALL)) == 0
    row = next(csv.DictReader((ev / "metrics.csv").open()))
    assert float(row["f1"]) == pytest.approx(1.0)


def test_eval_empty_test_region_exits_nonzero(scene, capsys):
    # the config is valid for a 256px scene, but the 64px scene's test half holds no 48px tile
    code = main(["eval", str(scene), "--out", str(scene / "ev"), "--model", "oracle",
                 "--set", "window_size=48"])
    assert code != 0
    assert "test region" in capsys.readouterr().err
