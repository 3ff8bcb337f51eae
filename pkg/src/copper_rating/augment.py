"""Impurity cut-paste augmentation and joint image/mask geometric transforms.

Cut-paste works in three steps: extract every connected impurity region of a
training split into a :class:`PatchBank`, pick and rotate ``k`` patches per
image, and paste them hard (no blending) onto copper pixels of the image.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .validation import check_heatmap, check_image


@dataclass(frozen=True)
class ImpurityPatch:
    pixels: np.ndarray  # (h, w, 3) uint8, bounding-box crop of the source image
    coverage: np.ndarray  # (h, w) bool, True where the region lies
    source_id: str
    bbox: tuple[int, int, int, int]  # (row0, col0, row1, col1), end-exclusive

    @property
    def area(self) -> int:
        return int(self.coverage.sum())


@dataclass(frozen=True)
class PatchBank:
    patches: tuple[ImpurityPatch, ...]
    rng_seed: int = 0

    def __len__(self) -> int:
        return len(self.patches)

    def save(self, path) -> None:
        """Persist as ``patch_<i>.png`` / ``coverage_<i>.png`` pairs plus ``index.json``."""
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        index = {"rng_seed": self.rng_seed, "patches": []}
        for i, p in enumerate(self.patches):
            Image.fromarray(p.pixels, mode="RGB").save(path / f"patch_{i:05d}.png")
            Image.fromarray(p.coverage.astype(np.uint8) * 255, mode="L").save(path / f"coverage_{i:05d}.png")
            index["patches"].append({"source_id": p.source_id, "bbox": list(p.bbox)})
        (path / "index.json").write_text(json.dumps(index, indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "PatchBank":
        path = Path(path)
        index = json.loads((path / "index.json").read_text())
        patches = []
        for i, meta in enumerate(index["patches"]):
            pixels = np.asarray(Image.open(path / f"patch_{i:05d}.png").convert("RGB"))
            cov = np.asarray(Image.open(path / f"coverage_{i:05d}.png")) > 127
            patches.append(ImpurityPatch(pixels, cov, meta["source_id"], tuple(meta["bbox"])))
        return cls(tuple(patches), index["rng_seed"])


def extract_impurity_regions(images: Sequence[np.ndarray], masks: Sequence[np.ndarray],
                             source_ids: Sequence[str] | None = None, min_area: int = 16,
                             rng_seed: int = 0) -> PatchBank:
    """One patch per 4-connected impurity component with at least ``min_area`` pixels.

    Returns an empty bank when the split holds no impurity region.
    """
    if len(images) != len(masks):
        raise ValueError("images and masks differ in length")
    if source_ids is None:
        source_ids = [str(i) for i in range(len(images))]
    patches = []
    for img, msk, sid in zip(images, masks, source_ids):
        img = check_image(img)
        msk = check_heatmap(msk)
        labels, count = ndimage.label(msk)
        if count == 0:
            continue
        for lab, sl in enumerate(ndimage.find_objects(labels), start=1):
            cov = labels[sl] == lab
            if cov.sum() < min_area:
                continue
            pixels = np.where(cov[..., None], img[sl], 0).astype(np.uint8)
            bbox = (sl[0].start, sl[1].start, sl[0].stop, sl[1].stop)
            patches.append(ImpurityPatch(pixels, cov, str(sid), bbox))
    return PatchBank(tuple(patches), rng_seed)


def rotate_patch(patch: ImpurityPatch, angle_deg: float) -> tuple[np.ndarray, np.ndarray]:
    """Rotate pixels and coverage with nearest-neighbour resampling, growing the canvas."""
    cov = ndimage.rotate(patch.coverage.astype(np.uint8), angle_deg, reshape=True, order=0,
                         mode="constant", cval=0).astype(bool)
    pix = ndimage.rotate(patch.pixels, angle_deg, axes=(0, 1), reshape=True, order=0,
                         mode="constant", cval=0)
    if not cov.any():
        # a 1-pixel-thin sliver can vanish under resampling
        cov, pix = patch.coverage, patch.pixels
    return pix, cov


@dataclass
class PasteResult:
    image: np.ndarray
    mask: np.ndarray
    pasted: int
    requested: int


def paste_impurities(image: np.ndarray, mask: np.ndarray, bank: PatchBank, k: int, seed,
                     max_tries: int = 10) -> PasteResult:
    """Paste ``k`` randomly chosen and rotated patches onto copper pixels.

    Patches are drawn with replacement. Each is placed so that its coverage
    centroid sits on a copper pixel and the whole patch stays inside the
    frame. Pasted pixels become impurity; nothing else changes. When no
    copper pixel can host a patch the result carries fewer than ``k`` pastes.
    """
    image = check_image(image)
    mask = check_heatmap(mask)
    if k < 0:
        raise ValueError("k must be >= 0")
    if k > 0 and len(bank) == 0:
        raise ValueError("cannot paste from an empty patch bank")
    out_img = image.copy()
    out_mask = mask.copy()
    if k == 0:
        return PasteResult(out_img, out_mask, 0, 0)
    rng = np.random.default_rng(seed)
    H, W = mask.shape
    pasted = 0
    for _ in range(k):
        for _ in range(max_tries):
            patch = bank.patches[int(rng.integers(len(bank)))]
            pix, cov = rotate_patch(patch, float(rng.uniform(0.0, 360.0)))
            ph, pw = cov.shape
            if ph > H or pw > W:
                continue
            rows, cols = np.nonzero(cov)
            ar, ac = int(round(rows.mean())), int(round(cols.mean()))
            # anchors keeping the patch inside the frame
            cu_r, cu_c = np.nonzero(out_mask[ar:H - (ph - ar) + 1, ac:W - (pw - ac) + 1] == 0)
            if len(cu_r) == 0:
                continue
            j = int(rng.integers(len(cu_r)))
            r0, c0 = cu_r[j], cu_c[j]  # top-left corner of the patch canvas
            region = (slice(r0, r0 + ph), slice(c0, c0 + pw))
            out_img[region][cov] = pix[cov]
            out_mask[region][cov] = 1
            pasted += 1
            break
    return PasteResult(out_img, out_mask, pasted, k)


def hflip(image, mask):
    return image[:, ::-1].copy(), mask[:, ::-1].copy()


def vflip(image, mask):
    return image[::-1].copy(), mask[::-1].copy()


def rot90(image, mask, quarter_turns: int):
    return (np.rot90(image, quarter_turns, axes=(0, 1)).copy(),
            np.rot90(mask, quarter_turns, axes=(0, 1)).copy())


def rotate(image, mask, angle_deg: float):
    """Rotation about the centre with nearest-neighbour resampling.

    Corners that rotate in from outside the frame are filled by reflection, so
    the frame stays fully covered by granules.
    """
    if angle_deg % 360 == 0:
        return image.copy(), mask.copy()
    if angle_deg % 90 == 0:
        return rot90(image, mask, int(angle_deg // 90))
    img = ndimage.rotate(image, angle_deg, axes=(0, 1), reshape=False, order=0, mode="reflect")
    msk = ndimage.rotate(mask, angle_deg, reshape=False, order=0, mode="reflect")
    return img, msk


def translate(image, mask, dy: int, dx: int):
    """Cyclic shift; the frame stays fully covered."""
    return (np.roll(image, (dy, dx), axis=(0, 1)), np.roll(mask, (dy, dx), axis=(0, 1)))


def standard_augment(image: np.ndarray, mask: np.ndarray, ops: Sequence[str], seed) -> tuple[np.ndarray, np.ndarray]:
    """Apply random flips, quarter-turn rotations and cyclic shifts jointly.

    ``ops`` selects from ``{"flip", "rotate", "translate"}``.
    """
    rng = np.random.default_rng(seed)
    image = check_image(image)
    mask = check_heatmap(mask)
    for op in ops:
        if op == "flip":
            if rng.random() < 0.5:
                image, mask = hflip(image, mask)
            if rng.random() < 0.5:
                image, mask = vflip(image, mask)
        elif op == "rotate":
            image, mask = rot90(image, mask, int(rng.integers(4)))
        elif op == "translate":
            h, w = mask.shape
            image, mask = translate(image, mask, int(rng.integers(h)), int(rng.integers(w)))
        else:
            raise ValueError(f"unknown augmentation op {op!r}")
    return image, mask
