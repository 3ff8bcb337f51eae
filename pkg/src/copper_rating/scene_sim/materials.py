from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence


@dataclass(frozen=True)
class MaterialSpec:
    """One material in a granule palette.

    ``density`` is in g/cm^3. ``color`` is the mean RGB of a granule and
    ``jitter`` the half-width of the uniform per-granule offset per channel.
    """

    name: str
    density: float
    is_copper: bool
    color: tuple[int, int, int]
    jitter: tuple[int, int, int] = (12, 12, 12)

    def __post_init__(self):
        if not self.density > 0:
            raise ValueError(f"material {self.name!r}: density must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "MaterialSpec":
        return cls(
            name=d["name"],
            density=float(d["density"]),
            is_copper=bool(d["is_copper"]),
            color=tuple(int(c) for c in d["color"]),
            jitter=tuple(int(c) for c in d.get("jitter", (12, 12, 12))),
        )

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "density": self.density,
            "is_copper": self.is_copper,
            "color": list(self.color),
            "jitter": list(self.jitter),
        }


COPPER = MaterialSpec("copper", 8.96, True, (190, 110, 55), (14, 12, 10))

# Six impurity classes spanning 0.95-7.1 g/cm^3, colored apart from copper.
DEFAULT_PALETTE: tuple[MaterialSpec, ...] = (
    COPPER,
    MaterialSpec("polyethylene", 0.95, False, (225, 225, 215), (10, 10, 10)),
    MaterialSpec("rubber", 1.3, False, (40, 40, 45), (8, 8, 8)),
    MaterialSpec("glass", 2.5, False, (90, 160, 120), (12, 14, 12)),
    MaterialSpec("aluminium", 2.7, False, (160, 165, 175), (10, 10, 10)),
    MaterialSpec("slag", 3.6, False, (105, 85, 110), (10, 10, 10)),
    MaterialSpec("zinc", 7.1, False, (110, 140, 175), (10, 10, 12)),
)


def check_palette(palette: Sequence[MaterialSpec]) -> tuple[MaterialSpec, ...]:
    if len(palette) == 0:
        raise ValueError("palette is empty")
    n_copper = sum(m.is_copper for m in palette)
    if n_copper != 1:
        raise ValueError(f"palette must contain exactly one copper material, found {n_copper}")
    names = [m.name for m in palette]
    if len(set(names)) != len(names):
        raise ValueError("material names must be unique")
    return tuple(palette)


def copper_index(palette: Sequence[MaterialSpec]) -> int:
    return next(i for i, m in enumerate(palette) if m.is_copper)
