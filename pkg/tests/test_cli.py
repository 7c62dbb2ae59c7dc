import csv
import json

import pytest
import yaml

from bathyscope.cli import COMMANDS, _profile, load_config, main

TINY = {
    "run_id": "tiny",
    "scene": {"n_train": 3, "n_val": 1, "n_test": 2, "seed": 5, "size": [32, 32]},
    "scene_b": {"n_tiles": 2},
    "train": {"epochs": 1, "crop": 32},
    "diagnostics": {"min_count": 1},
}


def write_config(path, cfg):
    path.write_text(yaml.safe_dump(cfg))
    return path


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_config(root / "tiny.yaml", dict(TINY, output_dir=str(root / "out")))
    codes = {cmd: main([cmd, "--config", str(cfg)]) for cmd in COMMANDS}
    return root / "out" / "tiny", codes


def test_every_command_succeeds(run):
    run_dir, codes = run
    assert codes == {cmd: 0 for cmd in COMMANDS}
    for cmd in COMMANDS:
        assert (run_dir / f"resolved_config.{cmd}.yaml").exists()


def test_artifacts(run):
    run_dir, _ = run
    assert len(list((run_dir / "dataset" / "train").glob("*.tif"))) == 3
    assert len(list((run_dir / "dataset" / "xregion").glob("*.tif"))) == 2
    assert (run_dir / "checkpoints" / "best.pt").exists() and (run_dir / "checkpoints" / "last.pt").exists()
    assert len(list((run_dir / "predictions").glob("*.tif"))) == 2
    ev = json.loads((run_dir / "eval.json").read_text())
    assert ev["n_tiles"] == 2 and ev["rmse_m"] >= ev["mae_m"] >= 0
    for name in ("lobo.csv", "features.csv", "qc_gate.csv", "bins.csv", "xregion_eval.csv", "xregion_bins.csv"):
        assert (run_dir / name).exists(), name


def test_retention_rows_per_tile(run):
    run_dir, _ = run
    rows = list(csv.DictReader(open(run_dir / "retention.csv")))
    assert len(rows) == 2 * 3
    assert sorted({float(r["rho"]) for r in rows}) == [20, 30, 50]


def test_every_png_has_a_data_twin(run):
    run_dir, _ = run
    pngs = list(run_dir.rglob("*.png"))
    assert pngs
    for png in pngs:
        assert png.with_suffix(".csv").exists() or png.with_suffix(".json").exists(), png


def test_resolved_config_holds_defaults(run):
    run_dir, _ = run
    snap = yaml.safe_load((run_dir / "resolved_config.train.yaml").read_text())
    assert snap["train"]["lr0"] == 1e-3 and snap["scene"]["n_train"] == 3


def test_region_b_inherits_region_a_keys():
    cfg = load_config(overrides=TINY)
    prof = _profile(cfg, "scene_b")
    assert prof.scene.size == (32, 32) and prof.scene.depth_mode == "bimodal"
    assert prof.optics.k_att == (0.5, 0.12, 1.0)


@pytest.mark.parametrize("bad", [{"train": {"epochz": 3}}, {"net": {"epochz": 3}}, {"epochz": 3}])
def test_unknown_key_rejected(tmp_path, capsys, bad):
    cfg = write_config(tmp_path / "bad.yaml", bad)
    assert main(["synth", "--config", str(cfg)]) == 2
    assert "epochz" in capsys.readouterr().err


def test_missing_checkpoint_named(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.yaml", dict(TINY, output_dir=str(tmp_path)))
    assert main(["eval", "--config", str(cfg)]) == 2
    assert "checkpoint" in capsys.readouterr().err


def test_missing_dataset_named(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.yaml", dict(TINY, output_dir=str(tmp_path)))
    assert main(["train", "--config", str(cfg)]) == 2
    assert "dataset" in capsys.readouterr().err


def test_env_overrides_output_dir(tmp_path, monkeypatch):
    monkeypatch.setenv("BATHYSCOPE_OUT", str(tmp_path / "env"))
    cfg = write_config(tmp_path / "c.yaml", dict(TINY, output_dir=str(tmp_path / "ignored")))
    assert main(["synth", "--config", str(cfg)]) == 0
    assert (tmp_path / "env" / "tiny" / "dataset" / "test").is_dir()
    assert not (tmp_path / "ignored").exists()


def test_seed_flag_overrides_every_seed(tmp_path):
    cfg = write_config(tmp_path / "c.yaml", dict(TINY, output_dir=str(tmp_path)))
    assert main(["synth", "--config", str(cfg), "--seed", "9"]) == 0
    snap = yaml.safe_load((tmp_path / "tiny" / "resolved_config.synth.yaml").read_text())
    assert snap["scene"]["seed"] == 9 and snap["train"]["seed"] == 9 and snap["scene_b"]["seed"] == 1009


def test_load_config_defaults():
    cfg = load_config()
    assert cfg["geodata"]["dmax"] == pytest.approx(14.556) and cfg["net"]["variant"] == "cross_only"


def test_parallel_explain_matches_serial(run, tmp_path):
    run_dir, _ = run
    serial = (run_dir / "saliency" / "channel_weights.csv").read_bytes()
    cfg = write_config(tmp_path / "c.yaml", dict(TINY, output_dir=str(run_dir.parent)))
    assert main(["explain", "--config", str(cfg), "--jobs", "2"]) == 0
    assert (run_dir / "saliency" / "channel_weights.csv").read_bytes() == serial
