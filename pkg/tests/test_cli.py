import json

import pytest
import yaml

from copper_rating.cli import DATA_ENV, main
from copper_rating.config import RunConfig, apply_overrides, load_config
from copper_rating.pipeline import RatingReport
from copper_rating.scene_sim.dataset import tree_digest

TINY = {
    "generator": {"image_size": [32, 32], "granule_radius": [2.0, 4.0]},
    "train": {"seg_epochs": 1, "area_epochs": 1, "mass_epochs": 1, "seg_width": 8},
}


@pytest.fixture(scope="module")
def cfg_path(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "tiny.yaml"
    p.write_text(yaml.safe_dump(TINY))
    return p


@pytest.fixture(scope="module")
def run(tmp_path_factory, cfg_path):
    root = tmp_path_factory.mktemp("cli")
    data, ckpt = root / "data", root / "ckpt"
    assert main(["gen-data", "--config", str(cfg_path), "--samples", "11", "--n", "2", "--out", str(data)]) == 0
    assert main(["train", "--config", str(cfg_path), "--data", str(data), "--ckpt", str(ckpt)]) == 0
    return root, data, ckpt


def test_overrides_and_config_file(cfg_path):
    cfg = load_config(cfg_path)
    assert cfg.generator.image_size == (32, 32)
    cfg2 = apply_overrides(cfg, ["train.alpha=0.25", "seed=3"])
    assert cfg2.train.alpha == 0.25 and cfg2.seed == 3
    assert cfg2.digest() != cfg.digest()
    with pytest.raises(ValueError):
        apply_overrides(cfg, ["train.nope=1"])
    with pytest.raises(ValueError):
        RunConfig.from_dict({"bogus": 1})


def test_gen_data_outputs(run, capsys):
    _, data, _ = run
    prov = json.loads((data / "provenance.json").read_text())
    assert prov["dataset_digest"] == tree_digest(data, exclude=["provenance.json"])
    assert main(["gen-data", "--out", str(data), "--verify"]) == 0
    assert "ok" in capsys.readouterr().out


def test_gen_data_refuses_occupied_dir(run, cfg_path):
    _, data, _ = run
    assert main(["gen-data", "--config", str(cfg_path), "--samples", "11", "--n", "2", "--out", str(data)]) == 1


def test_gen_data_rejects_bad_sample_count(tmp_path):
    assert main(["gen-data", "--samples", "10", "--out", str(tmp_path / "x")]) == 1


def test_gen_data_key_value_override(tmp_path, cfg_path):
    out = tmp_path / "d"
    assert main(["gen-data", "--config", str(cfg_path), "--samples", "11", "--n", "2",
                 "--generator.purity_range", "[0.9, 1.0]", "--out", str(out)]) == 0
    prov = json.loads((out / "provenance.json").read_text())
    assert prov["config"]["generator"]["purity_range"] == [0.9, 1.0]


def test_invalid_config_exit_code(tmp_path):
    assert main(["gen-data", "--set", "generator.purity_range=[0.5, 1.5]", "--out", str(tmp_path / "x")]) == 1


def test_train_outputs(run):
    _, _, ckpt = run
    for p in (1, 2, 3):
        assert (ckpt / f"phase{p}" / "record.jsonl").exists()
    assert (ckpt / "bundle" / "bundle.json").exists()


def test_train_missing_prerequisite(run, tmp_path, cfg_path, capsys):
    _, data, ckpt = run
    empty = tmp_path / "ck"
    (empty / "phase1").mkdir(parents=True)
    (empty / "phase1" / "final.bin").write_bytes((ckpt / "phase1" / "final.bin").read_bytes())
    assert main(["train", "--config", str(cfg_path), "--data", str(data), "--ckpt", str(empty), "--phases", "3"]) == 1
    assert "run phase 2 first" in capsys.readouterr().err


def test_train_existing_needs_overwrite(run, cfg_path):
    _, data, ckpt = run
    assert main(["train", "--config", str(cfg_path), "--data", str(data), "--ckpt", str(ckpt),
                 "--phases", "3"]) == 1


def test_train_uses_env_dataset(run, cfg_path, tmp_path, monkeypatch):
    _, data, _ = run
    monkeypatch.setenv(DATA_ENV, str(data))
    assert main(["train", "--config", str(cfg_path), "--ckpt", str(tmp_path / "c"), "--phases", "1",
                 "--no-cutpaste"]) == 0
    monkeypatch.delenv(DATA_ENV)
    assert main(["train", "--ckpt", str(tmp_path / "c2"), "--phases", "1"]) == 1


def test_eval_and_passthrough(run):
    root, data, ckpt = run
    assert main(["eval", "--data", str(data), "--model", str(ckpt / "bundle"), "--out", str(root / "ev"),
                 "--verify"]) == 0
    for f in ("curve.csv", "groups.csv", "levels.csv", "errors_vs_levels.csv", "summary.md", "summary.json"):
        assert (root / "ev" / f).exists()
    assert main(["eval", "--data", str(data), "--passthrough", "--out", str(root / "oracle")]) == 0
    m = json.loads((root / "oracle" / "summary.json").read_text())["metrics"]
    assert m["mass_mae"] == 0 and m["level_exact"] == 1.0
    # occupied output without --overwrite
    assert main(["eval", "--data", str(data), "--passthrough", "--out", str(root / "oracle")]) == 1


def test_rate(run, tmp_path):
    _, data, ckpt = run
    out = tmp_path / "r.json"
    sample = data / "samples" / "s000"
    assert main(["rate", "--model", str(ckpt / "bundle"), str(sample), "--out", str(out)]) == 0
    rep = RatingReport.from_json(out.read_text())
    assert rep.sample_id == "s000" and rep.method == "network" and rep.config_digest
    assert main(["rate", "--model", str(ckpt / "bundle"), str(sample / "images"), "--baseline", "threshold",
                 "--out", str(out)]) == 0
    assert RatingReport.from_json(out.read_text()).method == "threshold"


def test_rate_errors(run, tmp_path):
    _, data, ckpt = run
    (tmp_path / "empty").mkdir()
    assert main(["rate", "--model", str(ckpt / "bundle"), str(tmp_path / "empty")]) == 1
    one = tmp_path / "one"
    one.mkdir()
    src = sorted((data / "samples" / "s000" / "images").iterdir())[0]
    (one / src.name).write_bytes(src.read_bytes())
    assert main(["rate", "--model", str(ckpt / "bundle"), str(one)]) == 1


def test_bad_phase_selector(run):
    _, data, _ = run
    assert main(["train", "--data", str(data), "--phases", "4"]) == 1
