"""On-disk dataset export and loading.

Layout under the dataset root::

    manifest.json
    samples/<id>/images/img_<k>.png     8-bit RGB
    samples/<id>/masks/mask_<k>.png     8-bit L, 0 = copper, 255 = impurity
    samples/<id>/annotation.json
"""

from __future__ import annotations

import hashlib
import json
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from ..heatmap import load_heatmap_png, save_heatmap_png
from ..ladder import LevelLadder
from .population import SamplePopulation, sample_population, true_mass_purity
from .render import stir_and_render, true_area_purity

FORMAT_VERSION = 1
SPLITS = ("train", "val", "test")


@dataclass
class DatasetManifest:
    n: int
    image_size: tuple[int, int]
    splits: dict[str, list[str]]
    num_levels: int
    level_thresholds: list[float]
    generator_config_digest: str
    groups: list[list[str]] = field(default_factory=list)
    format_version: int = FORMAT_VERSION

    def to_dict(self) -> dict:
        return {
            "format_version": self.format_version,
            "n": self.n,
            "image_size": list(self.image_size),
            "splits": {k: list(v) for k, v in self.splits.items()},
            "num_levels": self.num_levels,
            "level_thresholds": list(self.level_thresholds),
            "generator_config_digest": self.generator_config_digest,
            "groups": [list(g) for g in self.groups],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        if d.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported dataset format_version {d.get('format_version')}")
        return cls(
            n=int(d["n"]),
            image_size=tuple(d["image_size"]),
            splits={k: list(v) for k, v in d["splits"].items()},
            num_levels=int(d["num_levels"]),
            level_thresholds=list(d["level_thresholds"]),
            generator_config_digest=d["generator_config_digest"],
            groups=[list(g) for g in d.get("groups", [])],
        )

    @property
    def ladder(self) -> LevelLadder:
        return LevelLadder(tuple(self.level_thresholds))

    @property
    def num_images(self) -> int:
        return self.n * sum(len(v) for v in self.splits.values())


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _prepare_out(out: Path, overwrite: bool) -> None:
    if out.exists() and any(out.iterdir()):
        if not overwrite:
            raise FileExistsError(f"{out} exists and is not empty (pass overwrite=True)")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)


def group_splits(sample_ids: Sequence[str], group_size: int,
                 split_groups: tuple[int, int, int] = (8, 2, 1)) -> tuple[dict, list]:
    """Chunk ids into consecutive groups and assign whole groups to train/val/test."""
    groups = [list(sample_ids[i:i + group_size]) for i in range(0, len(sample_ids), group_size)]
    if len(groups) != sum(split_groups) or any(len(g) != group_size for g in groups):
        raise ValueError(
            f"{len(sample_ids)} samples do not form {sum(split_groups)} groups of {group_size}"
        )
    splits, start = {}, 0
    for name, count in zip(SPLITS, split_groups):
        splits[name] = [sid for g in groups[start:start + count] for sid in g]
        start += count
    return splits, groups


def export_dataset(populations: Sequence[SamplePopulation], n: int, splits: dict, out,
                   *, ladder: LevelLadder, generator_config, groups: list | None = None,
                   overwrite: bool = False) -> DatasetManifest:
    """Render ``n`` stirs of every population and write the dataset tree."""
    if n < 1:
        raise ValueError("n must be >= 1")
    ids = [p.sample_id for p in populations]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate sample ids")
    assigned = [sid for name in splits for sid in splits[name]]
    if sorted(assigned) != sorted(ids):
        raise ValueError("split assignment must cover every sample exactly once")
    out = Path(out)
    _prepare_out(out, overwrite)

    for pop in populations:
        if pop.n_stirs != n:
            raise ValueError(f"population {pop.sample_id} was built for n={pop.n_stirs}, not {n}")
        sdir = out / "samples" / pop.sample_id
        (sdir / "images").mkdir(parents=True)
        (sdir / "masks").mkdir()
        width = max(2, len(str(n - 1)))
        area = []
        for k in range(n):
            scene = stir_and_render(pop, k, color_noise=generator_config.color_noise,
                                    shading=generator_config.shading)
            Image.fromarray(scene.image, mode="RGB").save(sdir / "images" / f"img_{k:0{width}d}.png")
            save_heatmap_png(scene.mask, sdir / "masks" / f"mask_{k:0{width}d}.png")
            area.append(true_area_purity(scene))
        mass = true_mass_purity(pop)
        _dump_json({
            "area_purity": area,
            "mass_purity": mass,
            "rating_level": ladder.level(mass),
            "material_breakdown": pop.material_breakdown(),
            "rng_seed": pop.rng_seed,
        }, sdir / "annotation.json")

    manifest = DatasetManifest(
        n=n,
        image_size=tuple(generator_config.image_size),
        splits={k: list(v) for k, v in splits.items()},
        num_levels=ladder.num_levels,
        level_thresholds=list(ladder.thresholds),
        generator_config_digest=_digest_of(generator_config),
        groups=groups or [],
    )
    _dump_json(manifest.to_dict(), out / "manifest.json")
    return manifest


def _digest_of(generator_config) -> str:
    from ..config import config_digest
    return config_digest(generator_config.to_dict())


def sample_seeds(seed: int, count: int) -> list[int]:
    """Independent per-sample seeds derived from one run seed."""
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(count, dtype=np.uint32)]


def generate_dataset(run_config, out, *, overwrite: bool = False) -> DatasetManifest:
    """Draw all populations for ``run_config`` and export them."""
    gen = run_config.generator
    seeds = sample_seeds(run_config.seed, run_config.num_samples)
    pops = [sample_population(gen, s, sample_id=f"s{i:03d}") for i, s in enumerate(seeds)]
    splits, groups = group_splits([p.sample_id for p in pops], run_config.group_size,
                                  run_config.split_groups)
    ladder = LevelLadder(run_config.ladder.thresholds)
    return export_dataset(pops, gen.n_stirs, splits, out, ladder=ladder, generator_config=gen,
                          groups=groups, overwrite=overwrite)


def tree_digest(root, exclude: Iterable[str] = ()) -> str:
    """sha256 over every file's relative path and bytes, in sorted order."""
    root = Path(root)
    exclude = set(exclude)
    h = hashlib.sha256()
    for p in sorted(q for q in root.rglob("*") if q.is_file()):
        rel = p.relative_to(root).as_posix()
        if rel in exclude:
            continue
        h.update(rel.encode() + b"\0")
        h.update(p.read_bytes())
    return h.hexdigest()


@dataclass
class SplitArrays:
    sample_ids: list[str]
    images: np.ndarray  # (S, n, H, W, 3) uint8
    masks: np.ndarray  # (S, n, H, W) uint8
    area_purity: np.ndarray  # (S, n)
    mass_purity: np.ndarray  # (S,)
    levels: np.ndarray  # (S,)

    def __len__(self) -> int:
        return len(self.sample_ids)

    def flat_images(self) -> np.ndarray:
        return self.images.reshape(-1, *self.images.shape[2:])

    def flat_masks(self) -> np.ndarray:
        return self.masks.reshape(-1, *self.masks.shape[2:])


class GranuleDataset:
    """Read access to an exported dataset."""

    def __init__(self, root):
        self.root = Path(root)
        path = self.root / "manifest.json"
        if not path.exists():
            raise FileNotFoundError(f"no manifest.json under {self.root}")
        self.manifest = DatasetManifest.from_dict(json.loads(path.read_text()))
        self._cache: dict[str, SplitArrays] = {}

    @property
    def n(self) -> int:
        return self.manifest.n

    def sample_dir(self, sample_id: str) -> Path:
        return self.root / "samples" / sample_id

    def annotation(self, sample_id: str) -> dict:
        return json.loads((self.sample_dir(sample_id) / "annotation.json").read_text())

    def load_sample(self, sample_id: str) -> tuple[np.ndarray, np.ndarray, dict]:
        images, masks = load_sample_dir(self.sample_dir(sample_id))
        return images, masks, self.annotation(sample_id)

    def split(self, name: str) -> SplitArrays:
        if name not in self._cache:
            ids = self.manifest.splits[name]
            imgs, msks, area, mass, lev = [], [], [], [], []
            for sid in ids:
                im, mk, ann = self.load_sample(sid)
                imgs.append(im)
                msks.append(mk)
                area.append(ann["area_purity"])
                mass.append(ann["mass_purity"])
                lev.append(ann["rating_level"])
            self._cache[name] = SplitArrays(
                list(ids), np.stack(imgs), np.stack(msks), np.array(area, dtype=np.float64),
                np.array(mass, dtype=np.float64), np.array(lev, dtype=np.int64),
            )
        return self._cache[name]

    def groups_by_split(self) -> dict[str, list[list[str]]]:
        out: dict[str, list[list[str]]] = {k: [] for k in self.manifest.splits}
        for g in self.manifest.groups:
            for name, ids in self.manifest.splits.items():
                if g and g[0] in ids:
                    out[name].append(g)
        return out


def load_images_dir(path) -> np.ndarray:
    """All ``*.png`` images in a directory, sorted by name, as ``(k, H, W, 3)``."""
    files = sorted(Path(path).glob("*.png"))
    if not files:
        raise FileNotFoundError(f"no PNG images in {path}")
    return np.stack([np.asarray(Image.open(f).convert("RGB")) for f in files])


def load_sample_dir(path) -> tuple[np.ndarray, np.ndarray | None]:
    """Images (and masks if present) of one sample directory."""
    path = Path(path)
    images = load_images_dir(path / "images")
    mask_files = sorted((path / "masks").glob("*.png")) if (path / "masks").is_dir() else []
    masks = np.stack([load_heatmap_png(f) for f in mask_files]) if mask_files else None
    return images, masks
