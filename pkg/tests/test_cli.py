import numpy as np
import pytest

from droughtcast.cli import EXIT_INPUT, EXIT_NUMERIC, EXIT_OK, main, parse_ks
from droughtcast.evaluation import read_horizon_csv, read_map_csv, read_pgm, read_summary
from droughtcast.gbt import load_grid_gbt
from droughtcast.grid import GridSeries, load_grid_series, save_grid_series
from droughtcast.indices import pdsi_grid, write_value_csv
from droughtcast.pipeline import ConfigError, RunConfig, parse_key_values, synth_config_from_file


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("synth")
    (d / "synth.txt").write_text("seed=2\nH=4\nW=5\nT=120\n")
    assert main(["synth", "--config", str(d / "synth.txt"), "--out-dir", str(d / "data")]) == EXIT_OK
    return d / "data"


def run(*argv):
    return main([str(a) for a in argv])


# index

def test_htc_without_growing_season(tmp_path, capsys):
    write_value_csv(np.full(20, 8.0), tmp_path / "t.csv")
    write_value_csv(np.ones(20), tmp_path / "p.csv")
    code = run("index", "htc", "--precip", tmp_path / "p.csv", "--temps", tmp_path / "t.csv", "--out", tmp_path / "o")
    assert code == EXIT_INPUT
    assert "no growing season" in capsys.readouterr().err


def test_htc_value(tmp_path):
    write_value_csv([20.0, 20.0, 5.0], tmp_path / "t.csv")
    write_value_csv([1.0, 1.0, 9.0], tmp_path / "p.csv")
    assert run("index", "htc", "--precip", tmp_path / "p.csv", "--temps", tmp_path / "t.csv",
               "--out", tmp_path / "o.csv") == EXIT_OK
    assert (tmp_path / "o.csv").read_text().splitlines() == ["htc", "0.5"]


def test_pdsi_index_matches_library(synth_dir, tmp_path):
    out = tmp_path / "pdsi.gsv"
    assert run("index", "pdsi", "--precip", synth_dir / "precip.gsv", "--temps", synth_dir / "temps.gsv",
               "--lat", 40.0, "--lat-step", 0.5, "--awc", 100.0, "--out", out) == EXIT_OK
    got = load_grid_series(out)
    precip, temps = load_grid_series(synth_dir / "precip.gsv"), load_grid_series(synth_dir / "temps.gsv")
    ref = pdsi_grid(precip, temps, [40.0, 39.5, 39.0, 38.5], 100.0)
    assert got.values.shape == (120, 4, 5)
    assert got.values.tobytes() == ref.values.tobytes()


def test_pdsi_index_bad_inputs(synth_dir, tmp_path, capsys):
    small = GridSeries(np.ones((24, 2, 2)))
    save_grid_series(small, tmp_path / "small.gsv")
    assert run("index", "pdsi", "--precip", tmp_path / "small.gsv", "--temps", synth_dir / "temps.gsv",
               "--out", tmp_path / "o.gsv") == EXIT_INPUT
    (tmp_path / "junk.gsv").write_text("not a grid\n")
    assert run("index", "pdsi", "--precip", tmp_path / "junk.gsv", "--temps", synth_dir / "temps.gsv",
               "--out", tmp_path / "o.gsv") == EXIT_INPUT
    assert "junk.gsv" in capsys.readouterr().err


# synth

def test_synth_byte_identical_and_manifest(synth_dir, tmp_path):
    cfg = synth_dir.parent / "synth.txt"
    assert run("synth", "--config", cfg, "--out-dir", tmp_path / "again") == EXIT_OK
    for name in ("precip.gsv", "temps.gsv", "pdsi.gsv", "manifest.txt"):
        assert (tmp_path / "again" / name).read_bytes() == (synth_dir / name).read_bytes()
    manifest = read_summary(synth_dir / "manifest.txt")
    assert manifest["seed"] == "2" and manifest["H"] == "4" and manifest["rng"] == "philox4x64-10"


def test_synth_missing_seed(tmp_path, capsys):
    (tmp_path / "c.txt").write_text("H=3\nW=3\n")
    assert run("synth", "--config", tmp_path / "c.txt", "--out-dir", tmp_path / "o") == EXIT_INPUT
    assert "seed" in capsys.readouterr().err


def test_synth_bad_values(tmp_path):
    (tmp_path / "c.txt").write_text("seed=1\nphi=1.5\n")
    assert run("synth", "--config", tmp_path / "c.txt", "--out-dir", tmp_path / "o") == EXIT_INPUT
    (tmp_path / "d.txt").write_text("seed=1\ncolour=blue\n")
    with pytest.raises(ConfigError, match="colour"):
        synth_config_from_file(tmp_path / "d.txt")


# config

def test_config_unknown_key_and_relative_paths(tmp_path):
    sub = tmp_path / "cfg"
    sub.mkdir()
    (sub / "run.txt").write_text("# comment\nmodel = gbt\nlags=3\ndata=../d.gsv\nout=m.gbt\n")
    cfg = RunConfig.from_file(sub / "run.txt")
    assert cfg.model == "gbt" and cfg.lags == 3
    assert cfg.data == str(sub / ".." / "d.gsv") and cfg.out == str(sub / "m.gbt")
    (sub / "bad.txt").write_text("model=gbt\nlearning_rate=0.1\n")
    with pytest.raises(ConfigError, match="learning_rate"):
        RunConfig.from_file(sub / "bad.txt")
    (sub / "dup.txt").write_text("L=3\nL=4\n")
    with pytest.raises(ConfigError, match="duplicate"):
        parse_key_values(sub / "dup.txt")


@pytest.mark.parametrize("text", ["model=forest", "L=0", "lr=abc", "shrinkage=2", "train_frac=0.9"])
def test_config_invalid_values(tmp_path, text):
    (tmp_path / "c.txt").write_text(text + "\n")
    with pytest.raises(ConfigError):
        RunConfig.from_file(tmp_path / "c.txt")


def test_flags_override_config(synth_dir, tmp_path):
    (tmp_path / "run.txt").write_text(f"model=gbt\nlags=3\nn_trees=5\nk=1\ndata={synth_dir / 'pdsi.gsv'}\n")
    assert run("train", "--config", tmp_path / "run.txt", "--k", 2, "--out", tmp_path / "m.gbt") == EXIT_OK
    assert load_grid_gbt(tmp_path / "m.gbt").p == 3
    assert parse_key_values(tmp_path / "m.gbt.meta")["k"] == "2"


def test_parse_ks():
    assert parse_ks("1..6") == [1, 2, 3, 4, 5, 6]
    assert parse_ks("1,3,6") == [1, 3, 6]
    assert parse_ks("2") == [2]


# train

def test_train_gbt_spatial_feature_count(synth_dir, tmp_path):
    out = tmp_path / "s.gbt"
    assert run("train", "--data", synth_dir / "pdsi.gsv", "--model", "gbt-spatial", "--out", out,
               "--config", _tree_cfg(tmp_path, lags=4)) == EXIT_OK
    meta = parse_key_values(f"{out}.meta")
    assert meta["n_features"] == "36" and meta["model"] == "gbt-spatial"
    grid = load_grid_gbt(out)
    assert all(m.n_features == 36 for m in grid.models.values())
    header, *rows = (tmp_path / "s.gbt.log.csv").read_text().splitlines()
    assert header == "tree,train_mse" and len(rows) == 11
    mse = [float(r.split(",")[1]) for r in rows]
    assert all(b <= a for a, b in zip(mse, mse[1:]))


def _tree_cfg(tmp_path, lags=3, n_trees=10, **extra):
    lines = [f"lags={lags}", f"n_trees={n_trees}"] + [f"{k}={v}" for k, v in extra.items()]
    path = tmp_path / f"trees_{lags}_{n_trees}_{len(extra)}.txt"
    path.write_text("\n".join(lines) + "\n")
    return path


def _train_convlstm(synth_dir, dest, seed=0):
    return run("train", "--data", synth_dir / "pdsi.gsv", "--model", "convlstm", "--L", 4, "--epochs", 3,
               "--seed", seed, "--out", dest)


def test_train_convlstm_log_and_checkpoint(synth_dir, tmp_path):
    dest = tmp_path / "m.dcnn"
    assert _train_convlstm(synth_dir, dest) == EXIT_OK
    header, *rows = (tmp_path / "m.dcnn.log.csv").read_text().splitlines()
    assert header == "epoch,train_loss,val_loss"
    val = [float(r.split(",")[2]) for r in rows]
    best = np.minimum.accumulate(val)
    assert len(rows) >= 1 and all(b <= a for a, b in zip(best, best[1:]))
    meta = parse_key_values(f"{dest}.meta")
    assert (meta["model"], meta["L"], meta["H"], meta["W"]) == ("convlstm", "4", "4", "5")


def test_training_reproducible(synth_dir, tmp_path):
    for name in ("a", "b"):
        assert _train_convlstm(synth_dir, tmp_path / f"{name}.dcnn", seed=3) == EXIT_OK
        assert run("evaluate", "--model", tmp_path / f"{name}.dcnn", "--data", synth_dir / "pdsi.gsv",
                   "--out-dir", tmp_path / f"rep_{name}") == EXIT_OK
    for suffix in ("", ".meta", ".log.csv"):
        assert (tmp_path / f"a.dcnn{suffix}").read_bytes() == (tmp_path / f"b.dcnn{suffix}").read_bytes()
    for name in ("r2_map.csv", "r2_map.pgm", "summary.txt"):
        assert (tmp_path / "rep_a" / name).read_bytes() == (tmp_path / "rep_b" / name).read_bytes()


def test_train_divergence_exit_3(synth_dir, tmp_path, capsys):
    assert run("train", "--data", synth_dir / "pdsi.gsv", "--model", "convlstm", "--L", 4, "--epochs", 2,
               "--lr", 1e300, "--out", tmp_path / "m.dcnn") == EXIT_NUMERIC
    assert "non-finite" in capsys.readouterr().err


def test_train_missing_inputs(tmp_path):
    assert run("train", "--model", "gbt", "--out", tmp_path / "m") == EXIT_INPUT
    assert run("train", "--model", "gbt", "--data", tmp_path / "nope.gsv", "--out", tmp_path / "m") == EXIT_INPUT


# evaluate

def test_evaluate_persistence_summary_consistent(synth_dir, tmp_path):
    assert run("evaluate", "--model", "persistence", "--data", synth_dir / "pdsi.gsv",
               "--out-dir", tmp_path) == EXIT_OK
    m = read_map_csv(tmp_path / "r2_map.csv")
    summary = read_summary(tmp_path / "summary.txt")
    assert m.shape == (4, 5)
    assert float(summary["mean_r2"]) == np.nanmean(m)
    assert summary["model"] == "persistence" and summary["split"] == "test"
    assert read_pgm(tmp_path / "r2_map.pgm").shape == (4, 5)


def test_evaluate_dimension_mismatch(synth_dir, tmp_path, capsys):
    assert run("train", "--data", synth_dir / "pdsi.gsv", "--model", "gbt", "--config", _tree_cfg(tmp_path),
               "--out", tmp_path / "m.gbt") == EXIT_OK
    other = GridSeries(np.random.default_rng(0).normal(size=(120, 3, 3)))
    save_grid_series(other, tmp_path / "other.gsv")
    assert run("evaluate", "--model", tmp_path / "m.gbt", "--data", tmp_path / "other.gsv",
               "--out-dir", tmp_path / "o") == EXIT_INPUT
    assert "does not match" in capsys.readouterr().err
    assert _train_convlstm(synth_dir, tmp_path / "m.dcnn") == EXIT_OK
    assert run("evaluate", "--model", tmp_path / "m.dcnn", "--data", tmp_path / "other.gsv",
               "--out-dir", tmp_path / "o") == EXIT_INPUT


def test_overfit_model_scores_higher_on_train(synth_dir, tmp_path):
    cfg = _tree_cfg(tmp_path, lags=6, n_trees=20, max_depth=8, min_samples_leaf=1, shrinkage=1.0)
    assert run("train", "--data", synth_dir / "pdsi.gsv", "--model", "gbt", "--config", cfg,
               "--out", tmp_path / "m.gbt") == EXIT_OK
    scores = {}
    for split in ("train", "test"):
        assert run("evaluate", "--model", tmp_path / "m.gbt", "--data", synth_dir / "pdsi.gsv",
                   "--split", split, "--out-dir", tmp_path / split) == EXIT_OK
        scores[split] = float(read_summary(tmp_path / split / "summary.txt")["mean_r2"])
    assert scores["train"] > 0.999
    assert scores["train"] >= scores["test"]


def test_evaluate_figures_opt_in(synth_dir, tmp_path):
    assert run("evaluate", "--model", "persistence", "--data", synth_dir / "pdsi.gsv",
               "--out-dir", tmp_path / "plain") == EXIT_OK
    assert not (tmp_path / "plain" / "r2_map.png").exists()
    assert run("evaluate", "--model", "persistence", "--data", synth_dir / "pdsi.gsv",
               "--out-dir", tmp_path / "fig", "--figures") == EXIT_OK
    assert (tmp_path / "fig" / "r2_map.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


# horizon sweep

def test_sweep_single_horizon_matches_evaluate(synth_dir, tmp_path):
    assert run("horizon-sweep", "--model", "persistence", "--data", synth_dir / "pdsi.gsv", "--ks", "1",
               "--out-dir", tmp_path) == EXIT_OK
    curve = read_horizon_csv(tmp_path / "horizon.csv")
    assert len(curve) == 1 and curve[0][0] == 1
    assert run("evaluate", "--model", "persistence", "--data", synth_dir / "pdsi.gsv",
               "--out-dir", tmp_path / "ev") == EXIT_OK
    assert curve[0][1] == float(read_summary(tmp_path / "ev" / "summary.txt")["mean_r2"])


def test_sweep_degrades_with_horizon(synth_dir, tmp_path):
    assert run("horizon-sweep", "--model", "gbt", "--config", _tree_cfg(tmp_path), "--data",
               synth_dir / "pdsi.gsv", "--ks", "1..6", "--out-dir", tmp_path, "--figures") == EXIT_OK
    curve = read_horizon_csv(tmp_path / "horizon.csv")
    assert [k for k, _ in curve] == [1, 2, 3, 4, 5, 6]
    assert curve[5][1] < curve[0][1]
    assert (tmp_path / "horizon.png").exists()


@pytest.mark.parametrize("ks", ["1-6", "", "6..1", "0..2", "a,b", "2,2"])
def test_sweep_malformed_ks(synth_dir, tmp_path, ks):
    assert run("horizon-sweep", "--model", "persistence", "--data", synth_dir / "pdsi.gsv", "--ks", ks,
               "--out-dir", tmp_path) == EXIT_INPUT


def test_sweep_numeric_failure_names_k(synth_dir, tmp_path, capsys):
    assert run("horizon-sweep", "--model", "convlstm", "--L", 4, "--epochs", 1, "--lr", 1e300, "--data",
               synth_dir / "pdsi.gsv", "--ks", "1..2", "--out-dir", tmp_path) == EXIT_NUMERIC
    assert "k=1" in capsys.readouterr().err
    assert not (tmp_path / "horizon.csv").exists()
