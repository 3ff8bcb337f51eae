"""A trained rating model on disk: segmentation + purity networks + ladder + config digest."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .ladder import LevelLadder
from .pipeline import EvalSummary, RatingReport, eval_dataset, rate_by_threshold, rate_sample
from .purity_net import PurityNet
from .seg_net import SegNet
from .trainer import freeze, model_from_checkpoint, param_digest, save_checkpoint

BUNDLE_FILE = "bundle.json"


@dataclass
class RatingBundle:
    seg: SegNet
    purity: PurityNet
    ladder: LevelLadder
    config_digest: str = ""

    @property
    def n(self) -> int:
        return self.purity.n

    def digest(self) -> str:
        return param_digest(list(self.seg.state_dict().values()) + list(self.purity.state_dict().values()))

    def save(self, path) -> None:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        save_checkpoint(path / "seg.bin", self.seg, phase=1, epoch=-1, config_digest=self.config_digest)
        save_checkpoint(path / "purity.bin", self.purity, phase=3, epoch=-1, config_digest=self.config_digest)
        meta = {"config_digest": self.config_digest, "ladder": self.ladder.to_dict(),
                "model_digest": self.digest(), "n": self.n,
                "image_size": list(self.purity.image_size)}
        (path / BUNDLE_FILE).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path, verify: bool = False) -> "RatingBundle":
        path = Path(path)
        meta_path = path / BUNDLE_FILE
        if not meta_path.exists():
            raise FileNotFoundError(f"{path} is not a model bundle (missing {BUNDLE_FILE})")
        meta = json.loads(meta_path.read_text())
        seg, _ = model_from_checkpoint(path / "seg.bin")
        purity, _ = model_from_checkpoint(path / "purity.bin")
        freeze(seg)
        freeze(purity)
        bundle = cls(seg, purity, LevelLadder(tuple(meta["ladder"]["thresholds"])), meta["config_digest"])
        if verify and bundle.digest() != meta["model_digest"]:
            raise ValueError(f"model digest mismatch in {path}")
        return bundle

    def rate(self, images, *, sample_id: str = "", baseline: str | None = None) -> RatingReport:
        if baseline == "threshold":
            return rate_by_threshold(self.seg, images, self.ladder, n=self.n, sample_id=sample_id,
                                     model_digest=self.digest(), config_digest=self.config_digest)
        if baseline is not None:
            raise ValueError(f"unknown baseline {baseline!r}")
        return rate_sample(self.seg, self.purity, images, self.ladder, sample_id=sample_id,
                           model_digest=self.digest(), config_digest=self.config_digest)


def dataset_groups(dataset, splits=("train", "val", "test")) -> list[dict]:
    """Group descriptors in manifest order, labelled like "Training Dataset 1"."""
    names = {"train": "Training Dataset", "val": "Validation Dataset", "test": "Test Dataset"}
    by_split = dataset.groups_by_split()
    out = []
    for split in splits:
        groups = by_split.get(split) or [dataset.manifest.splits[split]]
        for i, ids in enumerate(groups, start=1):
            out.append({"label": f"{names[split]} {i}", "split": split, "ids": list(ids)})
    return out


def truths_for(dataset, ids) -> dict:
    out = {}
    for sid in ids:
        ann = dataset.annotation(sid)
        out[sid] = {"area": ann["area_purity"], "mass": ann["mass_purity"], "level": ann["rating_level"]}
    return out


def evaluate_bundle(bundle: RatingBundle | None, dataset, splits=("train", "val", "test"), *,
                    level_counts=range(2, 11), passthrough: bool = False,
                    order_check: bool = True, seed: int = 0) -> EvalSummary:
    """Run the bundle over the dataset's samples and summarise against ground truth.

    ``passthrough=True`` replaces model outputs by the ground truth (a
    perfect oracle), which must yield a zero-error summary.
    """
    if not passthrough and bundle.n != dataset.n:
        raise ValueError(f"model expects n={bundle.n}, dataset has n={dataset.n}")
    groups = dataset_groups(dataset, splits)
    ids = [s for g in groups for s in g["ids"]]
    truths = truths_for(dataset, ids)
    ladder = bundle.ladder if bundle is not None else dataset.manifest.ladder
    preds = {}
    sensitivity = 0.0 if order_check and not passthrough else None
    rng = np.random.default_rng(seed)
    for sid in ids:
        if passthrough:
            t = truths[sid]
            preds[sid] = {**t, "ladder_level": ladder.level(t["mass"])}
            continue
        images, _, _ = dataset.load_sample(sid)
        rep = bundle.rate(images, sample_id=sid)
        preds[sid] = {"area": rep.area_purities, "mass": rep.mass_purity, "level": rep.level,
                      "ladder_level": rep.ladder_level}
        if order_check:
            shuffled = bundle.rate(images[rng.permutation(len(images))], sample_id=sid)
            sensitivity = max(sensitivity, abs(shuffled.mass_purity - rep.mass_purity))
    return eval_dataset(preds, truths, groups, ladder, level_counts, sensitivity)
