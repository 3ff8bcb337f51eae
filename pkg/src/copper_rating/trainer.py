"""Three-phase training with parameter freezing, checkpoints and per-epoch records.

Phase 1 trains the segmentation network alone. Phase 2 trains the area
branch of the purity network on heatmaps from the frozen segmentation
network. Phase 3 trains the mass and rank branches jointly with the area
branch and the segmentation network frozen. Each phase audits which
components changed by hashing their parameters before and after.
"""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
import torch
import torch.nn as nn

from .augment import extract_impurity_regions, paste_impurities, standard_augment
from .config import TrainConfig
from .heatmap import dataset_miou
from .losses import loss1_from_logits, loss2, loss3
from .purity_net import PurityNet
from .seg_net import SegNet, images_to_tensor, predict_heatmap, seg_forward

log = logging.getLogger(__name__)


class Phase(enum.IntEnum):
    P1_SEGMENTATION = 1
    P2_AREA = 2
    P3_MASS_RANK = 3


@dataclass(frozen=True)
class PhasePlan:
    phase: Phase
    epochs: int
    optimizer: dict
    trainable: frozenset
    loss: str


def phase_plan(phase: Phase, cfg: TrainConfig) -> PhasePlan:
    if phase == Phase.P1_SEGMENTATION:
        return PhasePlan(phase, cfg.seg_epochs,
                         {"name": "sgd", "lr": cfg.seg_lr, "momentum": cfg.seg_momentum,
                          "weight_decay": cfg.seg_weight_decay, "schedule": "cosine"},
                         frozenset({"seg"}), "loss1")
    if phase == Phase.P2_AREA:
        return PhasePlan(phase, cfg.area_epochs, {"name": "adam", "lr": cfg.area_lr},
                         frozenset({"area"}), "loss2")
    return PhasePlan(phase, cfg.mass_epochs, {"name": "adam", "lr": cfg.mass_lr},
                     frozenset({"mass", "rank"}), "loss3")


class TrainingDiverged(RuntimeError):
    pass


class FrozenViolation(RuntimeError):
    pass


@dataclass
class TrainRecord:
    phase: int
    seed: int
    config_digest: str
    epochs: list = field(default_factory=list)
    final: dict = field(default_factory=dict)
    wall_clock: float = 0.0

    def append(self, entry: dict) -> None:
        self.epochs.append(dict(entry))

    def to_dict(self) -> dict:
        return {"phase": self.phase, "seed": self.seed, "config_digest": self.config_digest,
                "epochs": self.epochs, "final": self.final, "wall_clock": self.wall_clock}

    def write_jsonl(self, path) -> None:
        """One JSON object per epoch, then a closing ``final`` line.

        Timings go to ``timing.json`` next to it so the record itself is
        byte-identical across deterministic reruns.
        """
        view = self.deterministic_view()
        lines = [json.dumps({"phase": self.phase, **e}, sort_keys=True) for e in view["epochs"]]
        lines.append(json.dumps({"phase": self.phase, "final": self.final,
                                 "config_digest": self.config_digest, "seed": self.seed},
                                sort_keys=True))
        path = Path(path)
        _atomic_write_text(path, "\n".join(lines) + "\n")
        timing = {"wall_clock": self.wall_clock,
                  "epochs": [{"epoch": e.get("epoch"), "wall_time": e.get("wall_time")} for e in self.epochs]}
        _atomic_write_text(path.with_name("timing.json"), json.dumps(timing, indent=2) + "\n")

    def deterministic_view(self) -> dict:
        """The record minus wall-clock timings."""
        drop = {"wall_time"}
        return {"phase": self.phase, "seed": self.seed, "config_digest": self.config_digest,
                "epochs": [{k: v for k, v in e.items() if k not in drop} for e in self.epochs],
                "final": self.final}


# ---------------------------------------------------------------- digests / freezing


def param_digest(params: nn.Module | Iterable[torch.Tensor]) -> str:
    """sha256 over the raw bytes of every parameter and buffer, in registration order."""
    if isinstance(params, nn.Module):
        tensors = [t for _, t in params.state_dict().items()]
    else:
        tensors = list(params)
    h = hashlib.sha256()
    for t in tensors:
        t = t.detach().cpu().contiguous()
        h.update(str(tuple(t.shape)).encode())
        h.update(str(t.dtype).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


def verify_frozen(component, before: str, after: str | None = None) -> bool:
    """True iff ``component`` is bit-identical to the state hashed in ``before``."""
    if after is None:
        after = param_digest(component)
    return before == after


def freeze(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        p.requires_grad_(False)
    module.eval()
    module.frozen = True
    return module


def is_frozen(module: nn.Module) -> bool:
    return bool(getattr(module, "frozen", False)) and not any(p.requires_grad for p in module.parameters())


def component_digests(seg: nn.Module | None, purity: PurityNet | None) -> dict:
    out = {}
    if seg is not None:
        out["seg"] = param_digest(seg)
    if purity is not None:
        out.update({k: param_digest(m) for k, m in purity.branches().items()})
    return out


def changed_components(before: dict, after: dict) -> list[str]:
    return sorted(k for k in before if before[k] != after.get(k))


# ---------------------------------------------------------------- checkpoints


def _atomic_write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def save_checkpoint(path, model: nn.Module, *, phase: int, epoch: int, config_digest: str,
                    optimizer: torch.optim.Optimizer | None = None, extra: dict | None = None) -> None:
    """Atomic write of parameters, topology, phase tag and optional optimizer state."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "state_dict": model.state_dict(),
        "topology": model.topology(),
        "phase": int(phase),
        "epoch": int(epoch),
        "config_digest": config_digest,
        "frozen": bool(getattr(model, "frozen", False)),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "extra": extra or {},
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)


def load_checkpoint(path) -> dict:
    return torch.load(Path(path), map_location="cpu", weights_only=False)


def build_model(topology: dict) -> nn.Module:
    arch = topology["arch"]
    if arch == "segnet-dilated":
        return SegNet(width=topology["width"], rates=tuple(topology["context_rates"]))
    if arch == "purity-3branch":
        return PurityNet(n=topology["n"], image_size=tuple(topology["image_size"]),
                         thresholds=tuple(topology["init_thresholds"]),
                         fuse_features=topology["fuse_features"])
    raise ValueError(f"unknown architecture {arch!r}")


def model_from_checkpoint(path) -> tuple[nn.Module, dict]:
    ckpt = load_checkpoint(path)
    model = build_model(ckpt["topology"])
    model.load_state_dict(ckpt["state_dict"])
    if ckpt.get("frozen"):
        freeze(model)
    return model, ckpt


def latest_checkpoint(ckpt_dir, phase: int) -> Path | None:
    d = Path(ckpt_dir) / f"phase{phase}"
    files = sorted(d.glob("epoch_*.bin"), key=lambda p: int(p.stem.split("_")[1]))
    return files[-1] if files else None


# ---------------------------------------------------------------- helpers


def set_determinism(seed: int, deterministic: bool = True) -> None:
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True, warn_only=True)


def _epoch_rng(seed: int, phase: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, phase, epoch])


class _DivergenceGuard:
    def __init__(self, factor: float, patience: int):
        self.factor = factor
        self.patience = patience
        self.initial = None
        self.strikes = 0

    def check_step(self, loss: float, step: int) -> None:
        if not math.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss {loss} at step {step}")

    def check_epoch(self, loss: float, epoch: int) -> None:
        if self.initial is None:
            self.initial = loss
            return
        self.strikes = self.strikes + 1 if loss > self.factor * self.initial else 0
        if self.strikes >= self.patience:
            raise TrainingDiverged(
                f"epoch loss {loss:.4g} above {self.factor}x initial {self.initial:.4g} "
                f"for {self.patience} epochs (epoch {epoch})")


def augment_batch(images: np.ndarray, masks: np.ndarray, bank, cfg: TrainConfig,
                  rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    out_i, out_m = [], []
    for img, msk in zip(images, masks):
        if cfg.cutpaste and bank is not None and len(bank) and rng.random() < cfg.cutpaste_prob:
            k = int(rng.integers(cfg.cutpaste_k[0], cfg.cutpaste_k[1] + 1))
            res = paste_impurities(img, msk, bank, k, int(rng.integers(2**31)))
            img, msk = res.image, res.mask
        if cfg.standard_ops:
            img, msk = standard_augment(img, msk, cfg.standard_ops, int(rng.integers(2**31)))
        out_i.append(img)
        out_m.append(msk)
    return np.stack(out_i), np.stack(out_m)


def predict_heatmaps(seg: SegNet, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
    """Hard heatmaps for ``(N, H, W, 3)`` images."""
    return predict_heatmap(seg_forward(seg, images, batch_size=batch_size).probabilities)


def segmentation_metrics(seg: SegNet, images: np.ndarray, masks: np.ndarray):
    return dataset_miou(list(predict_heatmaps(seg, images)), list(masks))


def _cosine_lr(base: float, step: int, total: int) -> float:
    return 0.5 * base * (1.0 + math.cos(math.pi * min(step, total) / max(total, 1)))


# ---------------------------------------------------------------- phase 1


def train_phase1(train_images: np.ndarray, train_masks: np.ndarray, cfg: TrainConfig, *,
                 val_images: np.ndarray | None = None, val_masks: np.ndarray | None = None,
                 seed: int = 0, config_digest: str = "", ckpt_dir=None, resume: bool = False,
                 deterministic: bool = True, model: SegNet | None = None) -> tuple[SegNet, TrainRecord]:
    """Train the segmentation network with the pixel-averaged cross entropy.

    Returns the trained (and frozen) network and its record. With
    ``resume=True`` training restarts after the newest epoch checkpoint in
    ``ckpt_dir/phase1``.
    """
    set_determinism(seed, deterministic)
    t0 = time.time()
    plan = phase_plan(Phase.P1_SEGMENTATION, cfg)
    if model is None:
        model = SegNet(width=cfg.seg_width)
    record = TrainRecord(1, seed, config_digest)
    opt = torch.optim.SGD(model.parameters(), lr=cfg.seg_lr, momentum=cfg.seg_momentum,
                          weight_decay=cfg.seg_weight_decay)
    N = len(train_images)
    steps_per_epoch = math.ceil(N / cfg.seg_batch_size)
    total_steps = steps_per_epoch * plan.epochs
    start_epoch = 0
    guard = _DivergenceGuard(cfg.divergence_factor, cfg.divergence_patience)
    if resume and ckpt_dir is not None:
        last = latest_checkpoint(ckpt_dir, 1)
        if last is not None:
            ckpt = load_checkpoint(last)
            model.load_state_dict(ckpt["state_dict"])
            opt.load_state_dict(ckpt["optimizer"])
            start_epoch = ckpt["epoch"] + 1
            record.epochs = list(ckpt["extra"].get("epochs", []))
            guard.initial = ckpt["extra"].get("guard_initial")
            guard.strikes = ckpt["extra"].get("guard_strikes", 0)

    bank = None
    if cfg.cutpaste and plan.epochs > 0:
        bank = extract_impurity_regions(train_images, train_masks, min_area=cfg.min_patch_area,
                                        rng_seed=seed)
        log.info("patch bank: %d impurity regions", len(bank))

    for epoch in range(start_epoch, plan.epochs):
        te = time.time()
        model.train()
        rng = _epoch_rng(seed, 1, epoch)
        order = rng.permutation(N)
        losses = []
        for b in range(steps_per_epoch):
            idx = np.sort(order[b * cfg.seg_batch_size:(b + 1) * cfg.seg_batch_size])
            imgs, msks = augment_batch(train_images[idx], train_masks[idx], bank, cfg, rng)
            step = epoch * steps_per_epoch + b
            for g in opt.param_groups:
                g["lr"] = _cosine_lr(cfg.seg_lr, step, total_steps)
            logits, _ = model(images_to_tensor(imgs))
            loss = loss1_from_logits(logits, torch.from_numpy(msks.astype(np.int64)))
            guard.check_step(loss.item(), step)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        entry = {"epoch": epoch, "loss": float(np.mean(losses)),
                 "lr": opt.param_groups[0]["lr"]}
        if val_images is not None:
            entry["val_miou"] = segmentation_metrics(model, val_images, val_masks).miou
        entry["wall_time"] = time.time() - te
        record.append(entry)
        log.info("phase1 epoch %d: %s", epoch, entry)
        guard.check_epoch(entry["loss"], epoch)
        if ckpt_dir is not None:
            save_checkpoint(Path(ckpt_dir) / "phase1" / f"epoch_{epoch}.bin", model, phase=1,
                            epoch=epoch, config_digest=config_digest, optimizer=opt,
                            extra={"epochs": record.deterministic_view()["epochs"], "guard_initial": guard.initial,
                                   "guard_strikes": guard.strikes})

    freeze(model)
    if plan.epochs > 0:
        tm = segmentation_metrics(model, train_images, train_masks)
        record.final["train_miou"] = tm.miou
        if val_images is not None:
            vm = segmentation_metrics(model, val_images, val_masks)
            record.final.update(val_miou=vm.miou, val_iou_copper=vm.iou_copper,
                                val_iou_impurity=vm.iou_impurity)
        record.final["patch_bank_size"] = len(bank) if bank is not None else 0
    record.final["seg_digest"] = param_digest(model)
    record.wall_clock = time.time() - t0
    if ckpt_dir is not None:
        save_checkpoint(Path(ckpt_dir) / "phase1" / "final.bin", model, phase=1,
                        epoch=plan.epochs - 1, config_digest=config_digest)
        record.write_jsonl(Path(ckpt_dir) / "phase1" / "record.jsonl")
    return model, record


# ---------------------------------------------------------------- phases 2 and 3


@dataclass
class StackData:
    """Per-sample inputs and targets for the purity network."""

    stacks: np.ndarray  # (S, n, H, W) uint8 impurity heatmaps
    area: np.ndarray  # (S, n) true area purities
    mass: np.ndarray  # (S,)
    levels: np.ndarray  # (S,)
    features: np.ndarray | None = None  # (S, C, H, W) mean segmentation features

    def __len__(self) -> int:
        return len(self.stacks)


def build_stack_data(seg: SegNet | None, images: np.ndarray, masks: np.ndarray, area, mass, levels,
                     *, teacher_forcing: bool = False, with_features: bool = False) -> StackData:
    """Heatmap stacks from the frozen segmentation network (or from true masks).

    ``images`` is ``(S, n, H, W, 3)``; ``masks`` is ``(S, n, H, W)``.
    """
    if seg is None and (with_features or not teacher_forcing):
        raise ValueError("a segmentation model is required unless teacher_forcing is set")
    S, n = images.shape[:2]
    stacks = masks.astype(np.uint8) if teacher_forcing else np.empty(masks.shape, dtype=np.uint8)
    feats = [] if with_features else None
    if with_features or not teacher_forcing:
        for s in range(S):
            out = seg_forward(seg, images[s], batch_size=n)
            if not teacher_forcing:
                stacks[s] = predict_heatmap(out.probabilities)
            if with_features:
                feats.append(out.features.mean(axis=0))
    if with_features:
        feats = np.stack(feats).astype(np.float32)
    return StackData(stacks, np.asarray(area, dtype=np.float64), np.asarray(mass, dtype=np.float64),
                     np.asarray(levels, dtype=np.int64), feats)


def _augment_stacks(stacks: np.ndarray, area: np.ndarray, feats, rng: np.random.Generator):
    """Joint flips / quarter turns of all heatmaps of a sample plus a channel shuffle."""
    out_s, out_a, out_f = [], [], []
    for i in range(len(stacks)):
        s, a = stacks[i], area[i]
        f = None if feats is None else feats[i]
        k = int(rng.integers(4))
        flip = rng.random() < 0.5
        perm = rng.permutation(s.shape[0])
        s = np.rot90(s, k, axes=(1, 2))
        if flip:
            s = s[:, :, ::-1]
        if f is not None:
            f = np.rot90(f, k, axes=(1, 2))
            if flip:
                f = f[:, :, ::-1]
            out_f.append(np.ascontiguousarray(f))
        out_s.append(np.ascontiguousarray(s[perm]))
        out_a.append(a[perm])
    return np.stack(out_s), np.stack(out_a), (np.stack(out_f) if feats is not None else None)


def _to_tensor(x) -> torch.Tensor | None:
    return None if x is None else torch.from_numpy(np.ascontiguousarray(x, dtype=np.float32))


def evaluate_purity(model: PurityNet, data: StackData, batch_size: int = 16) -> dict:
    """Area MAE, mass MAE and level exact-match of ``model`` on ``data``."""
    model.eval()
    areas, masses, levels = [], [], []
    with torch.no_grad():
        for i in range(0, len(data), batch_size):
            out = model(_to_tensor(data.stacks[i:i + batch_size]),
                        _to_tensor(None if data.features is None else data.features[i:i + batch_size]))
            areas.append(out["area"].numpy())
            masses.append(out["mass"].numpy())
            levels.append(np.argmax(out["level_logits"].numpy(), axis=1) + 1)
    area = np.concatenate(areas)
    mass = np.concatenate(masses)
    lev = np.concatenate(levels)
    return {
        "area_mae": float(np.abs(area - data.area).mean()),
        "mass_mae": float(np.abs(mass - data.mass).mean()),
        "level_acc": float((lev == data.levels).mean()),
        "area_pred": area, "mass_pred": mass, "level_pred": lev,
    }


def _check_frozen_seg(seg) -> str | None:
    if seg is None:
        return None
    if not is_frozen(seg):
        raise FrozenViolation("the segmentation network must be frozen before phases 2 and 3")
    return param_digest(seg)


def _purity_loop(phase: Phase, purity: PurityNet, train: StackData, val: StackData | None,
                 cfg: TrainConfig, seed: int, config_digest: str, ckpt_dir, resume: bool,
                 record: TrainRecord) -> None:
    plan = phase_plan(phase, cfg)
    trainable = {"area": "area" in plan.trainable, "mass": "mass" in plan.trainable,
                 "rank": "rank" in plan.trainable}
    purity.set_trainable(**trainable)
    lr = plan.optimizer["lr"]
    base, conv = [], []
    for name, p in purity.named_parameters():
        if p.requires_grad:
            (conv if (".encoder." in name or ".head." in name) else base).append(p)
    groups = [g for g in ({"params": base, "lr": lr},
                          {"params": conv, "lr": lr * cfg.correction_lr_scale}) if g["params"]]
    opt = torch.optim.Adam(groups, lr=lr)
    guard = _DivergenceGuard(cfg.divergence_factor, cfg.divergence_patience)
    start_epoch = 0
    if resume and ckpt_dir is not None:
        last = latest_checkpoint(ckpt_dir, int(phase))
        if last is not None:
            ckpt = load_checkpoint(last)
            purity.load_state_dict(ckpt["state_dict"])
            opt.load_state_dict(ckpt["optimizer"])
            start_epoch = ckpt["epoch"] + 1
            record.epochs = list(ckpt["extra"].get("epochs", []))
            guard.initial = ckpt["extra"].get("guard_initial")
            guard.strikes = ckpt["extra"].get("guard_strikes", 0)

    base_lrs = [g["lr"] for g in groups]
    S = len(train)
    bs = cfg.purity_batch_size
    steps = math.ceil(S / bs)
    for epoch in range(start_epoch, plan.epochs):
        te = time.time()
        purity.train()
        rng = _epoch_rng(seed, int(phase), epoch)
        order = rng.permutation(S)
        losses = []
        for b in range(steps):
            idx = np.sort(order[b * bs:(b + 1) * bs])
            st, ar, ft = _augment_stacks(train.stacks[idx], train.area[idx],
                                         None if train.features is None else train.features[idx], rng)
            step = epoch * steps + b
            for g, g_lr in zip(opt.param_groups, base_lrs):
                g["lr"] = _cosine_lr(g_lr, step, steps * plan.epochs)
            out = purity(_to_tensor(st), _to_tensor(ft))
            if phase == Phase.P2_AREA:
                loss = loss2(out["area"], _to_tensor(ar))
            else:
                loss = loss3(out["mass"], out["level_logits"], _to_tensor(train.mass[idx]),
                             torch.from_numpy(train.levels[idx]), cfg.alpha, cfg.gamma)
            guard.check_step(loss.item(), step)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        entry = {"epoch": epoch, "loss": float(np.mean(losses))}
        if val is not None:
            ev = evaluate_purity(purity, val)
            if phase == Phase.P2_AREA:
                entry["val_area_mae"] = ev["area_mae"]
            else:
                entry.update(val_mass_mae=ev["mass_mae"], val_level_acc=ev["level_acc"])
        entry["wall_time"] = time.time() - te
        record.append(entry)
        log.info("phase%d epoch %d: %s", int(phase), epoch, entry)
        guard.check_epoch(entry["loss"], epoch)
        if ckpt_dir is not None:
            save_checkpoint(Path(ckpt_dir) / f"phase{int(phase)}" / f"epoch_{epoch}.bin", purity,
                            phase=int(phase), epoch=epoch, config_digest=config_digest, optimizer=opt,
                            extra={"epochs": record.deterministic_view()["epochs"], "guard_initial": guard.initial,
                                   "guard_strikes": guard.strikes})
    purity.set_trainable(area=False, mass=False, rank=False)
    purity.eval()


def train_phase2(seg: SegNet | None, train: StackData, cfg: TrainConfig, *, val: StackData | None = None,
                 seed: int = 0, config_digest: str = "", ckpt_dir=None, resume: bool = False,
                 deterministic: bool = True, purity: PurityNet | None = None,
                 image_size=None, thresholds=None) -> tuple[PurityNet, TrainRecord]:
    """Train the area branch with the L1 area loss; everything else stays fixed.

    ``seg`` must already be frozen; it is only hashed here (its heatmaps are
    precomputed in ``train``) so the record can prove it did not change.
    """
    seg_before = _check_frozen_seg(seg)
    set_determinism(seed, deterministic)
    t0 = time.time()
    if purity is None:
        n = train.stacks.shape[1]
        size = image_size or train.stacks.shape[2:]
        kwargs = {} if thresholds is None else {"thresholds": thresholds}
        purity = PurityNet(n=n, image_size=size, fuse_features=cfg.fuse_seg_features, **kwargs)
    record = TrainRecord(2, seed, config_digest)
    before = component_digests(None, purity)
    init_eval = evaluate_purity(purity, val if val is not None else train)
    record.final["initial_area_mae"] = init_eval["area_mae"]

    _purity_loop(Phase.P2_AREA, purity, train, val, cfg, seed, config_digest, ckpt_dir, resume, record)

    after = component_digests(None, purity)
    record.final["changed"] = changed_components(before, after)
    if seg is not None:
        record.final["seg_frozen_ok"] = verify_frozen(seg, seg_before)
        if not record.final["seg_frozen_ok"]:
            raise FrozenViolation("segmentation parameters changed during phase 2")
    if val is not None:
        record.final["val_area_mae"] = evaluate_purity(purity, val)["area_mae"]
    record.final["purity_digest"] = param_digest(purity)
    record.wall_clock = time.time() - t0
    if ckpt_dir is not None:
        save_checkpoint(Path(ckpt_dir) / "phase2" / "final.bin", purity, phase=2,
                        epoch=cfg.area_epochs - 1, config_digest=config_digest)
        record.write_jsonl(Path(ckpt_dir) / "phase2" / "record.jsonl")
    return purity, record


def train_phase3(seg: SegNet | None, purity: PurityNet, train: StackData, cfg: TrainConfig, *,
                 val: StackData | None = None, seed: int = 0, config_digest: str = "",
                 ckpt_dir=None, resume: bool = False, deterministic: bool = True) -> tuple[PurityNet, TrainRecord]:
    """Jointly train the mass and rank branches with the weighted L1 + focal loss."""
    seg_before = _check_frozen_seg(seg)
    set_determinism(seed, deterministic)
    t0 = time.time()
    record = TrainRecord(3, seed, config_digest)
    before = component_digests(None, purity)

    _purity_loop(Phase.P3_MASS_RANK, purity, train, val, cfg, seed, config_digest, ckpt_dir, resume, record)

    after = component_digests(None, purity)
    record.final["changed"] = changed_components(before, after)
    record.final["area_frozen_ok"] = verify_frozen(purity.area_branch, before["area"], after["area"])
    if not record.final["area_frozen_ok"]:
        raise FrozenViolation("area branch changed during phase 3")
    if seg is not None:
        record.final["seg_frozen_ok"] = verify_frozen(seg, seg_before)
        if not record.final["seg_frozen_ok"]:
            raise FrozenViolation("segmentation parameters changed during phase 3")
    if val is not None:
        ev = evaluate_purity(purity, val)
        record.final.update(val_mass_mae=ev["mass_mae"], val_level_acc=ev["level_acc"])
    record.final["purity_digest"] = param_digest(purity)
    record.wall_clock = time.time() - t0
    if ckpt_dir is not None:
        save_checkpoint(Path(ckpt_dir) / "phase3" / "final.bin", purity, phase=3,
                        epoch=cfg.mass_epochs - 1, config_digest=config_digest)
        record.write_jsonl(Path(ckpt_dir) / "phase3" / "record.jsonl")
    return purity, record
