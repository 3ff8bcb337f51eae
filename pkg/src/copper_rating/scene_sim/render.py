"""Stirring and rendering of a granule population into image/mask pairs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from skimage.draw import polygon as fill_polygon

from .population import SamplePopulation


@dataclass(frozen=True)
class Placement:
    granule: int
    cx: float
    cy: float
    angle: float


@dataclass(frozen=True)
class StirredScene:
    """One captured view of a stirred sample.

    ``labels`` holds, per pixel, the index of the granule seen there (the
    topmost one, or the nearest one for the few pixels no footprint covers).
    ``placements`` is bottom-to-top drawing order.
    """

    image: np.ndarray  # (H, W, 3) uint8
    mask: np.ndarray  # (H, W) uint8, 0 copper / 1 impurity
    stir_index: int
    labels: np.ndarray
    placements: tuple[Placement, ...]


def stir_rng(pop: SamplePopulation, stir_index: int) -> np.random.Generator:
    return np.random.default_rng([pop.rng_seed, 1 + stir_index])


def place_granules(pop: SamplePopulation, rng: np.random.Generator) -> tuple[Placement, ...]:
    """Random layout: uniform positions (overhanging the frame), rotations and z-order."""
    h, w = pop.frame_size
    n = len(pop.granules)
    order = rng.permutation(n)
    margin = 4.0
    cx = rng.uniform(-margin, w + margin, size=n)
    cy = rng.uniform(-margin, h + margin, size=n)
    angle = rng.uniform(0.0, 2 * np.pi, size=n)
    return tuple(Placement(int(g), float(cx[i]), float(cy[i]), float(angle[i])) for i, g in enumerate(order))


def transformed_footprint(pop: SamplePopulation, p: Placement) -> np.ndarray:
    c, s = np.cos(p.angle), np.sin(p.angle)
    v = pop.granules[p.granule].footprint
    rot = v @ np.array([[c, s], [-s, c]])
    return rot + np.array([p.cx, p.cy])


def rasterize_labels(pop: SamplePopulation, placements) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel topmost granule index; uncovered pixels take the nearest covered label.

    Returns ``(labels, covered)``.
    """
    h, w = pop.frame_size
    labels = np.full((h, w), -1, dtype=np.int64)
    for p in placements:
        v = transformed_footprint(pop, p)
        # pixel (r, c) has its centre at (x=c, y=r)
        rr, cc = fill_polygon(v[:, 1], v[:, 0], shape=(h, w))
        labels[rr, cc] = p.granule
    covered = labels >= 0
    if not covered.all():
        if not covered.any():
            raise RuntimeError("no granule landed in the frame")
        _, (ir, ic) = ndimage.distance_transform_edt(~covered, return_indices=True)
        labels = labels[ir, ic]
    return labels, covered


def shade(pop: SamplePopulation, labels: np.ndarray, placements, rng: np.random.Generator,
          color_noise: float, shading: float) -> np.ndarray:
    """Colour each pixel from its granule's material with jitter and a linear shading ramp."""
    h, w = labels.shape
    n = len(pop.granules)
    base = np.array([pop.palette[g.material].color for g in pop.granules], dtype=np.float64)
    jit = np.array([pop.palette[g.material].jitter for g in pop.granules], dtype=np.float64)
    base = base + rng.uniform(-1.0, 1.0, size=(n, 3)) * jit

    cx = np.zeros(n)
    cy = np.zeros(n)
    for p in placements:
        cx[p.granule], cy[p.granule] = p.cx, p.cy
    theta = rng.uniform(0, 2 * np.pi, size=n)
    radius = np.array([np.sqrt(g.area_px / np.pi) for g in pop.granules])

    yy, xx = np.mgrid[0:h, 0:w]
    lab = labels
    ramp = ((xx - cx[lab]) * np.cos(theta[lab]) + (yy - cy[lab]) * np.sin(theta[lab])) / radius[lab]
    gain = 1.0 + shading * np.clip(ramp, -1.0, 1.0)
    img = base[lab] * gain[..., None]
    img += rng.normal(0.0, color_noise, size=img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def stir_and_render(pop: SamplePopulation, stir_index: int, *, color_noise: float = 4.0,
                    shading: float = 0.08) -> StirredScene:
    """Re-layout the population (one stir) and render the top view.

    Every pixel shows some granule; the mask is 1 exactly where that granule
    is not copper.
    """
    if not 0 <= stir_index < pop.n_stirs:
        raise ValueError(f"stir_index must lie in [0, {pop.n_stirs}), got {stir_index}")
    rng = stir_rng(pop, stir_index)
    placements = place_granules(pop, rng)
    labels, _ = rasterize_labels(pop, placements)
    is_impurity = np.array([not pop.palette[m].is_copper for m in pop.materials], dtype=np.uint8)
    mask = is_impurity[labels]
    image = shade(pop, labels, placements, rng, color_noise, shading)
    return StirredScene(image=image, mask=mask, stir_index=stir_index, labels=labels,
                        placements=placements)


def true_area_purity(scene: StirredScene) -> float:
    """Fraction of copper pixels in the scene's mask."""
    return float(np.count_nonzero(scene.mask == 0)) / scene.mask.size
