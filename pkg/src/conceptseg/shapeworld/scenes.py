"""Deterministic synthetic scenes: colored geometric shapes on a dark canvas.

Everything is a pure function of (seed, config). Rendering rasterizes
instances in id order, so a later instance owns any overlapping pixels;
with the default non-overlap placement this never triggers.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field

import numpy as np

from ..core import BinaryMask

SHAPES = ("circle", "square", "triangle", "cross")
COLORS = ("red", "green", "blue", "yellow")
SIZES = ("small", "large")

COLOR_RGB = {
    "red": (220, 50, 50),
    "green": (60, 180, 80),
    "blue": (60, 100, 220),
    "yellow": (230, 210, 60),
}
BACKGROUND_RGB = (26, 26, 30)

_SCENE_STREAM = 0
_QUERY_STREAM = 1
_MOTION_STREAM = 2


class GenerationError(RuntimeError):
    """Placement failed after the configured retry budget; caller reseeds."""


@dataclass(frozen=True)
class ShapeInstance:
    id: int
    shape: str
    color: str
    size_class: str
    center: tuple[int, int]  # (row, col)
    extent: int              # radius / half-side in pixels


@dataclass(frozen=True)
class GenConfig:
    """Parameters shared by scene, query, and clip generation."""

    height: int = 64
    width: int = 64
    min_instances: int = 3
    max_instances: int = 9
    small_extent: tuple[int, int] = (4, 5)
    large_extent: tuple[int, int] = (7, 9)
    min_gap: int = 2
    max_place_tries: int = 80
    no_target_rate: float = 0.10
    kind_weights: tuple[tuple[str, float], ...] = (
        ("single", 0.04),
        ("multi-same", 0.04),
        ("multi-cross", 0.46),
        ("open-ended", 0.46),
    )
    # video
    min_frames: int = 8
    max_frames: int = 32
    motion_rate: float = 0.0
    still_rate: float = 0.3
    max_speed: int = 2
    disjoint_paths: bool = False
    max_velocity_tries: int = 40

    def __post_init__(self) -> None:
        if not (1 <= self.min_instances <= self.max_instances <= 12):
            raise ValueError("instance count range must lie within [1, 12]")
        if not (8 <= self.min_frames <= self.max_frames <= 32):
            raise ValueError("frame count range must lie within [8, 32]")
        if not 0.0 <= self.no_target_rate <= 1.0:
            raise ValueError("no_target_rate must be a probability")

    @classmethod
    def from_json(cls, obj: dict) -> "GenConfig":
        obj = dict(obj)
        for key in ("small_extent", "large_extent"):
            if key in obj:
                obj[key] = tuple(obj[key])
        if "kind_weights" in obj:
            obj["kind_weights"] = tuple((k, w) for k, w in obj["kind_weights"])
        return cls(**obj)


@dataclass(frozen=True)
class Scene:
    height: int
    width: int
    instances: tuple[ShapeInstance, ...]
    seed: int

    def __post_init__(self) -> None:
        if not (1 <= len(self.instances) <= 12):
            raise ValueError(f"scene must hold 1..12 instances, got {len(self.instances)}")

    @property
    def image(self) -> np.ndarray:
        """Rendered uint8 RGB grid, (H, W, 3)."""
        return render_image(self)


def instance_raster(inst: ShapeInstance, height: int, width: int) -> np.ndarray:
    """Boolean footprint of one instance, ignoring occlusion."""
    rr, cc = np.mgrid[0:height, 0:width]
    r0, c0 = inst.center
    e = inst.extent
    if inst.shape == "circle":
        return (rr - r0) ** 2 + (cc - c0) ** 2 <= e * e
    if inst.shape == "square":
        return np.maximum(np.abs(rr - r0), np.abs(cc - c0)) <= e
    if inst.shape == "triangle":
        # isoceles triangle, apex at the top
        a = (r0 - e, c0)
        b = (r0 + e, c0 - e)
        c = (r0 + e, c0 + e)

        def half_plane(p, q):
            return (q[0] - p[0]) * (cc - p[1]) - (q[1] - p[1]) * (rr - p[0])

        d1, d2, d3 = half_plane(a, b), half_plane(b, c), half_plane(c, a)
        return (d1 >= 0) & (d2 >= 0) & (d3 >= 0)
    if inst.shape == "cross":
        t = max(1, e // 3)
        vertical = (np.abs(cc - c0) <= t) & (np.abs(rr - r0) <= e)
        horizontal = (np.abs(rr - r0) <= t) & (np.abs(cc - c0) <= e)
        return vertical | horizontal
    raise ValueError(f"unknown shape {inst.shape!r}")


@functools.lru_cache(maxsize=4096)
def _ownership(scene: Scene) -> np.ndarray:
    """Per-pixel owner instance index, -1 for background."""
    owner = np.full((scene.height, scene.width), -1, dtype=np.int8)
    for idx, inst in enumerate(scene.instances):
        owner[instance_raster(inst, scene.height, scene.width)] = idx
    owner.setflags(write=False)
    return owner


def render_image(scene: Scene) -> np.ndarray:
    owner = _ownership(scene)
    palette = np.array(
        [BACKGROUND_RGB] + [COLOR_RGB[i.color] for i in scene.instances], dtype=np.uint8
    )
    return palette[owner + 1]


def visible_masks(scene: Scene) -> dict[int, BinaryMask]:
    """Per-instance masks of the pixels the renderer actually shows."""
    owner = _ownership(scene)
    return {inst.id: BinaryMask(owner == idx) for idx, inst in enumerate(scene.instances)}


def _place(rng: np.random.Generator, config: GenConfig, placed: list[ShapeInstance], idx: int) -> ShapeInstance:
    for _ in range(config.max_place_tries):
        shape = SHAPES[rng.integers(len(SHAPES))]
        color = COLORS[rng.integers(len(COLORS))]
        size_class = SIZES[rng.integers(len(SIZES))]
        lo, hi = config.small_extent if size_class == "small" else config.large_extent
        extent = int(rng.integers(lo, hi + 1))
        r = int(rng.integers(extent, config.height - extent))
        c = int(rng.integers(extent, config.width - extent))
        ok = True
        for other in placed:
            dr = r - other.center[0]
            dc = c - other.center[1]
            if (dr * dr + dc * dc) ** 0.5 < extent + other.extent + config.min_gap:
                ok = False
                break
        if ok:
            return ShapeInstance(id=idx, shape=shape, color=color, size_class=size_class,
                                 center=(r, c), extent=extent)
    raise GenerationError(f"could not place instance {idx} after {config.max_place_tries} tries")


def generate_scene(seed: int, config: GenConfig | None = None) -> Scene:
    """Deterministic scene for (seed, config); raises GenerationError on a packing failure."""
    config = config or GenConfig()
    rng = np.random.default_rng([seed, _SCENE_STREAM])
    n = int(rng.integers(config.min_instances, config.max_instances + 1))
    placed: list[ShapeInstance] = []
    for idx in range(n):
        placed.append(_place(rng, config, placed, idx))
    return Scene(height=config.height, width=config.width, instances=tuple(placed), seed=seed)
