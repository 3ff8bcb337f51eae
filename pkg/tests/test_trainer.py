import shutil

import numpy as np
import pytest
import torch

from copper_rating.config import TrainConfig
from copper_rating.scene_sim.dataset import GranuleDataset
from copper_rating.seg_net import SegNet
from copper_rating.trainer import (FrozenViolation, Phase, TrainingDiverged, _DivergenceGuard, build_stack_data,
                                   changed_components, component_digests, freeze, is_frozen, load_checkpoint,
                                   model_from_checkpoint, param_digest, phase_plan, save_checkpoint,
                                   train_phase1, train_phase2, train_phase3, verify_frozen)

CFG = TrainConfig(seg_epochs=2, area_epochs=2, mass_epochs=2, seg_width=8, seg_batch_size=4,
                  purity_batch_size=4)


@pytest.fixture(scope="module")
def splits(tiny_dataset):
    ds = GranuleDataset(tiny_dataset)
    return ds.split("train"), ds.split("val")


@pytest.fixture(scope="module")
def trained(splits, tmp_path_factory):
    tr, va = splits
    ckpt = tmp_path_factory.mktemp("ckpt")
    seg, r1 = train_phase1(tr.flat_images(), tr.flat_masks(), CFG, val_images=va.flat_images(),
                           val_masks=va.flat_masks(), seed=0, ckpt_dir=ckpt)
    train = build_stack_data(seg, tr.images, tr.masks, tr.area_purity, tr.mass_purity, tr.levels)
    val = build_stack_data(seg, va.images, va.masks, va.area_purity, va.mass_purity, va.levels)
    purity, r2 = train_phase2(seg, train, CFG, val=val, ckpt_dir=ckpt)
    area_digest = param_digest(purity.area_branch)
    purity, r3 = train_phase3(seg, purity, train, CFG, val=val, ckpt_dir=ckpt)
    return dict(seg=seg, purity=purity, records=(r1, r2, r3), ckpt=ckpt, train=train, val=val,
                area_digest=area_digest)


def test_phase_plans():
    assert phase_plan(Phase.P1_SEGMENTATION, CFG).trainable == {"seg"}
    assert phase_plan(Phase.P2_AREA, CFG).trainable == {"area"}
    assert phase_plan(Phase.P3_MASS_RANK, CFG).trainable == {"mass", "rank"}


def test_freeze_helpers():
    net = SegNet(width=8)
    assert not is_frozen(net)
    d = param_digest(net)
    freeze(net)
    assert is_frozen(net) and not net.training
    assert verify_frozen(net, d)
    with torch.no_grad():
        next(net.parameters()).add_(1.0)
    assert not verify_frozen(net, d)


def test_phase1_record_and_freeze(trained):
    r1 = trained["records"][0]
    assert len(r1.epochs) == 2
    assert {"train_miou", "val_miou", "seg_digest"} <= set(r1.final)
    assert is_frozen(trained["seg"])
    assert r1.final["seg_digest"] == param_digest(trained["seg"])


def test_phase2_changes_area_only(trained):
    r2 = trained["records"][1]
    assert r2.final["seg_frozen_ok"]
    assert set(r2.final["changed"]) <= {"area"}


def test_phase3_freeze_audit(trained):
    r3 = trained["records"][2]
    assert r3.final["area_frozen_ok"] and r3.final["seg_frozen_ok"]
    assert "area" not in r3.final["changed"]
    assert param_digest(trained["purity"].area_branch) == trained["area_digest"]


def test_checkpoint_layout(trained):
    ck = trained["ckpt"]
    for p in (1, 2, 3):
        assert (ck / f"phase{p}" / "epoch_0.bin").exists()
        assert (ck / f"phase{p}" / "epoch_1.bin").exists()
        assert (ck / f"phase{p}" / "final.bin").exists()
        lines = (ck / f"phase{p}" / "record.jsonl").read_text().strip().splitlines()
        assert len(lines) == 3


def test_checkpoint_round_trip_bit_exact(trained, tmp_path):
    for name in ("seg", "purity"):
        model = trained[name]
        save_checkpoint(tmp_path / f"{name}.bin", model, phase=1, epoch=0, config_digest="abc")
        back, meta = model_from_checkpoint(tmp_path / f"{name}.bin")
        assert meta["config_digest"] == "abc"
        assert param_digest(back) == param_digest(model)
        for (k, a), (_, b) in zip(model.state_dict().items(), back.state_dict().items()):
            assert torch.equal(a, b), k


def test_phase2_requires_frozen_seg(trained):
    seg = SegNet(width=8)
    with pytest.raises(FrozenViolation):
        train_phase2(seg, trained["train"], CFG)


def test_teacher_forcing_uses_masks(splits):
    tr, _ = splits
    data = build_stack_data(None, tr.images, tr.masks, tr.area_purity, tr.mass_purity, tr.levels,
                            teacher_forcing=True)
    np.testing.assert_array_equal(data.stacks, tr.masks)
    with pytest.raises(ValueError):
        build_stack_data(None, tr.images, tr.masks, tr.area_purity, tr.mass_purity, tr.levels)


def test_resume_matches_uninterrupted(splits, trained, tmp_path):
    tr, _ = splits
    src = trained["ckpt"] / "phase1"
    (tmp_path / "phase1").mkdir()
    shutil.copy(src / "epoch_0.bin", tmp_path / "phase1" / "epoch_0.bin")
    seg, rec = train_phase1(tr.flat_images(), tr.flat_masks(), CFG, seed=0, ckpt_dir=tmp_path, resume=True)
    assert param_digest(seg) == param_digest(trained["seg"])
    assert len(rec.epochs) == 2


def test_training_is_deterministic(splits, trained):
    tr, va = splits
    seg, rec = train_phase1(tr.flat_images(), tr.flat_masks(), CFG, val_images=va.flat_images(),
                            val_masks=va.flat_masks(), seed=0)
    assert param_digest(seg) == param_digest(trained["seg"])
    assert rec.deterministic_view()["epochs"] == trained["records"][0].deterministic_view()["epochs"]


def test_divergence_guard():
    g = _DivergenceGuard(10.0, 3)
    with pytest.raises(TrainingDiverged):
        g.check_step(float("nan"), 0)
    g.check_epoch(1.0, 0)
    g.check_epoch(20.0, 1)
    g.check_epoch(5.0, 2)  # strike counter resets
    g.check_epoch(20.0, 3)
    g.check_epoch(20.0, 4)
    with pytest.raises(TrainingDiverged):
        g.check_epoch(20.0, 5)


def test_nonfinite_loss_aborts_training(splits, monkeypatch):
    import copper_rating.trainer as trainer

    tr, _ = splits
    real = trainer.loss1_from_logits
    monkeypatch.setattr(trainer, "loss1_from_logits", lambda z, t: real(z, t) * float("nan"))
    with pytest.raises(TrainingDiverged):
        train_phase1(tr.flat_images()[:4], tr.flat_masks()[:4], CFG, seed=0)


def test_component_digest_diff(trained):
    before = component_digests(trained["seg"], trained["purity"])
    after = dict(before, mass="x")
    assert changed_components(before, after) == ["mass"]


def test_load_checkpoint_keeps_phase(trained):
    ck = load_checkpoint(trained["ckpt"] / "phase3" / "final.bin")
    assert ck["phase"] == 3 and ck["topology"]["arch"] == "purity-3branch"
