"""Granule populations and their analytic purity.

A population is the physical content of one sample: a fixed collection of
granules, each a star-shaped polygon footprint of uniform thickness. All
ground truth (mass purity, volume fractions) is computed from the exact
polygon areas, never from rendered pixels.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .materials import MaterialSpec, copper_index


def polygon_area(vertices: np.ndarray) -> float:
    """Shoelace area of a simple polygon given as ``(k, 2)`` vertices."""
    x, y = vertices[:, 0], vertices[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def random_footprint(rng: np.random.Generator, radius: float, n_vertices: int) -> np.ndarray:
    """Irregular star-shaped polygon centred on the origin.

    Sorted angles with strictly positive radii make the polygon simple.
    """
    gaps = rng.uniform(0.5, 1.5, size=n_vertices)
    angles = np.cumsum(gaps) / gaps.sum() * 2 * np.pi
    radii = radius * rng.uniform(0.7, 1.3, size=n_vertices)
    verts = np.stack([radii * np.cos(angles), radii * np.sin(angles)], axis=1)
    # re-centre on the area centroid so rotation keeps the granule in place
    return verts - _centroid(verts)


def _centroid(v: np.ndarray) -> np.ndarray:
    x, y = v[:, 0], v[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    cross = x * yn - xn * y
    a = cross.sum() / 2.0
    cx = ((x + xn) * cross).sum() / (6.0 * a)
    cy = ((y + yn) * cross).sum() / (6.0 * a)
    return np.array([cx, cy])


@dataclass(frozen=True)
class Granule:
    material: int  # index into the population palette
    footprint: np.ndarray  # (k, 2) vertices in pixels, centred on the origin
    thickness: float  # cm

    @property
    def area_px(self) -> float:
        return polygon_area(self.footprint)


@dataclass(frozen=True)
class SamplePopulation:
    sample_id: str
    granules: tuple[Granule, ...]
    palette: tuple[MaterialSpec, ...]
    rng_seed: int
    pixel_size_cm: float
    frame_size: tuple[int, int]
    n_stirs: int

    def __post_init__(self):
        if len(self.granules) == 0:
            raise ValueError("a population needs at least one granule")

    @cached_property
    def volumes(self) -> np.ndarray:
        """Per-granule volume in cm^3."""
        px_area = self.pixel_size_cm ** 2
        return np.array([g.area_px * px_area * g.thickness for g in self.granules])

    @cached_property
    def materials(self) -> np.ndarray:
        return np.array([g.material for g in self.granules], dtype=np.int64)

    @cached_property
    def densities(self) -> np.ndarray:
        return np.array([self.palette[m].density for m in self.materials])

    @property
    def total_volume(self) -> float:
        return float(self.volumes.sum())

    @property
    def total_mass(self) -> float:
        return float((self.densities * self.volumes).sum())

    def material_volumes(self) -> np.ndarray:
        """Total volume per palette entry."""
        return np.bincount(self.materials, weights=self.volumes, minlength=len(self.palette))

    def volume_fractions(self) -> np.ndarray:
        return self.material_volumes() / self.total_volume

    def material_breakdown(self) -> list[dict]:
        fr = self.volume_fractions()
        return [
            {"name": m.name, "density": m.density, "volume_fraction": float(fr[i])}
            for i, m in enumerate(self.palette)
        ]


def true_mass_purity(pop: SamplePopulation) -> float:
    """Copper mass fraction via the subtraction form.

    m0 = m - sum_i(rho_i * pv_i * V) over impurity materials, P = m0 / m.
    """
    m = pop.total_mass
    V = pop.total_volume
    pv = pop.volume_fractions()
    impurity_mass = 0.0
    for i, mat in enumerate(pop.palette):
        if not mat.is_copper:
            impurity_mass += mat.density * pv[i] * V
    m0 = m - impurity_mass
    return float(min(max(m0 / m, 0.0), 1.0))


def direct_mass_purity(pop: SamplePopulation) -> float:
    """Copper mass over total mass, summed granule by granule."""
    cu = copper_index(pop.palette)
    masses = pop.densities * pop.volumes
    return float(masses[pop.materials == cu].sum() / masses.sum())


def impurity_area_budget(total_area: float, purity: float, rho_cu: float, rho_imp: float) -> float:
    """Impurity footprint area giving ``purity`` at fixed total area and uniform thickness.

    Solves rho_cu*(A - a) / (rho_cu*(A - a) + rho_imp*a) = purity for a.
    """
    if purity >= 1.0:
        return 0.0
    ratio = rho_cu * (1.0 - purity) / purity
    return total_area * ratio / (rho_imp + ratio)


def sample_population(config, seed: int, sample_id: str | None = None) -> SamplePopulation:
    """Draw one granule population whose mass purity lies in ``config.purity_range``.

    The impurity mix is drawn from a Dirichlet around an even split of the
    palette's impurity materials. Granules of each material are drawn until
    its area budget is met and then rescaled together so the budget is hit
    exactly, which puts the realised purity on the drawn target.
    """
    rng = np.random.default_rng(seed)
    palette = config.palette
    cu = copper_index(palette)
    impurities = [i for i, m in enumerate(palette) if not m.is_copper]
    lo, hi = config.purity_range
    target = float(rng.uniform(lo, hi)) if hi > lo else lo

    h, w = config.image_size
    total_area = config.coverage * h * w

    shares = np.zeros(len(palette))
    if impurities:
        alpha = np.full(len(impurities), config.composition_concentration / len(impurities))
        shares[impurities] = rng.dirichlet(alpha)
    r_lo, r_hi = config.granule_radius
    min_area = np.pi * (0.7 * r_lo) ** 2

    if target < 1.0 and not impurities:
        raise ValueError("purity below 1 requested from a palette without impurities")
    densities = np.array([m.density for m in palette])

    def area_budgets():
        rho_imp = float(shares @ densities) if shares.sum() else 1.0
        imp = impurity_area_budget(total_area, target, palette[cu].density, rho_imp)
        return shares * imp, imp

    # drop materials whose budget cannot hold a single small granule
    budgets, imp_area = area_budgets()
    small = (budgets > 0) & (budgets < min_area)
    while small.any() and small.sum() < (budgets > 0).sum():
        shares[small] = 0.0
        shares /= shares.sum()
        budgets, imp_area = area_budgets()
        small = (budgets > 0) & (budgets < min_area)
    budgets[cu] = total_area - imp_area

    granules: list[Granule] = []
    for mat in range(len(palette)):
        if budgets[mat] <= 0:
            continue
        polys, acc = [], 0.0
        while acc < budgets[mat]:
            r = rng.uniform(r_lo, r_hi)
            k = int(rng.integers(config.vertices[0], config.vertices[1] + 1))
            poly = random_footprint(rng, r, k)
            polys.append(poly)
            acc += polygon_area(poly)
        scale = np.sqrt(budgets[mat] / acc)
        granules.extend(Granule(mat, p * scale, config.thickness_cm) for p in polys)

    order = rng.permutation(len(granules))
    granules = [granules[i] for i in order]
    return SamplePopulation(
        sample_id=sample_id if sample_id is not None else f"s{seed:05d}",
        granules=tuple(granules),
        palette=tuple(palette),
        rng_seed=int(seed),
        pixel_size_cm=config.pixel_size_cm,
        frame_size=tuple(config.image_size),
        n_stirs=config.n_stirs,
    )
