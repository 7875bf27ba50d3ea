from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

COLORS: dict[str, tuple[float, float, float]] = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
}
KINDS = ("rectangle", "disc", "triangle")


class PlacementError(RuntimeError):
    """Could not place all shapes within the retry budget."""


@dataclass(frozen=True)
class WorldConfig:
    width: int = 32
    height: int = 32
    min_shapes: int = 2
    max_shapes: int = 6
    min_size: int = 4
    max_size: int = 9
    max_overlap: float = 0.2
    # bounding boxes are kept this many pixels apart; None permits overlap up to max_overlap
    box_gap: int | None = 1
    max_retries: int = 200

    def validate(self) -> None:
        if self.width < 16 or self.height < 16:
            raise ValueError("image size must be at least 16")
        if not 2 <= self.min_shapes <= self.max_shapes <= 6:
            raise ValueError("shape count range must satisfy 2 <= min <= max <= 6")
        if self.min_size < 4 or self.max_size < self.min_size:
            raise ValueError("invalid shape size range")
        if self.max_size > min(self.width, self.height):
            raise ValueError("max_size exceeds image")
        if not 0.0 <= self.max_overlap <= 0.2:
            raise ValueError("max_overlap must lie in [0, 0.2]")


@dataclass(frozen=True)
class ShapeSpec:
    kind: str
    color: str
    x: int
    y: int
    w: int
    h: int

    @property
    def box(self) -> tuple[int, int, int, int]:
        return (self.x, self.y, self.x + self.w, self.y + self.h)

    @property
    def center(self) -> tuple[float, float]:
        return (self.x + self.w / 2.0, self.y + self.h / 2.0)


@dataclass(frozen=True)
class Scene:
    width: int
    height: int
    shapes: tuple[ShapeSpec, ...] = field(default_factory=tuple)
    seed: int = 0


def rasterize_mask(shape: ShapeSpec, width: int, height: int) -> np.ndarray:
    """Binary (height, width) mask of one shape, sampled at pixel centres."""
    if shape.x < 0 or shape.y < 0 or shape.x + shape.w > width or shape.y + shape.h > height:
        raise ValueError(f"shape {shape} outside {width}x{height} image")
    if shape.w < 1 or shape.h < 1:
        raise ValueError("empty shape extent")
    mask = np.zeros((height, width), dtype=bool)
    jj, ii = np.mgrid[0 : shape.h, 0 : shape.w]
    if shape.kind == "rectangle":
        local = np.ones((shape.h, shape.w), dtype=bool)
    elif shape.kind == "disc":
        if shape.w != shape.h or shape.w % 2 == 0:
            raise ValueError("disc extent must be square with odd side")
        r = (shape.w - 1) // 2
        local = (ii - r) ** 2 + (jj - r) ** 2 <= r * r
    elif shape.kind == "triangle":
        if shape.w % 2 == 0 or shape.h < 2:
            raise ValueError("triangle needs odd width and height >= 2")
        half = (shape.w - 1) / 2.0
        # apex at top centre, base on the bottom row: two slanted half-planes plus the base
        slope = half / (shape.h - 1)
        left = (ii - half) >= -slope * jj - 1e-9
        right = (ii - half) <= slope * jj + 1e-9
        local = left & right
    else:
        raise ValueError(f"unknown kind {shape.kind!r}")
    mask[shape.y : shape.y + shape.h, shape.x : shape.x + shape.w] = local
    return mask


def render(scene: Scene) -> np.ndarray:
    """(H, W, 3) float32 raster on black; later shapes paint over earlier ones."""
    img = np.zeros((scene.height, scene.width, 3), dtype=np.float32)
    for s in scene.shapes:
        img[rasterize_mask(s, scene.width, scene.height)] = COLORS[s.color]
    return img


def _random_shape(rng: np.random.Generator, cfg: WorldConfig) -> ShapeSpec:
    kind = KINDS[rng.integers(len(KINDS))]
    color = list(COLORS)[rng.integers(len(COLORS))]
    lo, hi = cfg.min_size, cfg.max_size
    if kind == "rectangle":
        w = int(rng.integers(lo, hi + 1))
        h = int(rng.integers(lo, hi + 1))
    elif kind == "disc":
        sides = [s for s in range(max(lo, 5), hi + 1) if s % 2 == 1]
        w = h = int(sides[rng.integers(len(sides))])
    else:
        sides = [s for s in range(max(lo, 5), hi + 1) if s % 2 == 1]
        w = int(sides[rng.integers(len(sides))])
        h = int(rng.integers(lo, hi + 1))
    x = int(rng.integers(0, cfg.width - w + 1))
    y = int(rng.integers(0, cfg.height - h + 1))
    return ShapeSpec(kind, color, x, y, w, h)


def _boxes_clear(a: ShapeSpec, b: ShapeSpec, gap: int) -> bool:
    ax1, ay1, ax2, ay2 = a.box
    bx1, by1, bx2, by2 = b.box
    return ax2 + gap <= bx1 or bx2 + gap <= ax1 or ay2 + gap <= by1 or by2 + gap <= ay1


def overlap_fraction(a: ShapeSpec, b: ShapeSpec, width: int, height: int) -> float:
    ma = rasterize_mask(a, width, height)
    mb = rasterize_mask(b, width, height)
    return float((ma & mb).sum()) / float(min(ma.sum(), mb.sum()))


def generate_scene(seed: int, config: WorldConfig | None = None) -> Scene:
    """Deterministically place 2-6 non-colliding shapes for ``seed``."""
    cfg = config or WorldConfig()
    cfg.validate()
    rng = np.random.default_rng(seed)
    n = int(rng.integers(cfg.min_shapes, cfg.max_shapes + 1))
    shapes: list[ShapeSpec] = []
    for _ in range(n):
        for _attempt in range(cfg.max_retries):
            cand = _random_shape(rng, cfg)
            ok = True
            for other in shapes:
                if cfg.box_gap is not None and not _boxes_clear(cand, other, cfg.box_gap):
                    ok = False
                    break
                if overlap_fraction(cand, other, cfg.width, cfg.height) > cfg.max_overlap:
                    ok = False
                    break
            if ok:
                shapes.append(cand)
                break
        else:
            raise PlacementError(f"seed {seed}: could not place shape {len(shapes) + 1} of {n}")
    if not any(
        a.color == b.color or a.kind == b.kind for i, a in enumerate(shapes) for b in shapes[i + 1 :]
    ):
        s = shapes[1]
        shapes[1] = ShapeSpec(s.kind, shapes[0].color, s.x, s.y, s.w, s.h)
    return Scene(cfg.width, cfg.height, tuple(shapes), seed)


def clock_hour(shape: ShapeSpec, width: int, height: int, min_radius: float = 6.0) -> int | None:
    """Clock-face hour (1-12) of the shape centre about the image centre, or None near the middle."""
    cx, cy = shape.center
    dx, dy = cx - width / 2.0, cy - height / 2.0
    if math.hypot(dx, dy) < min_radius:
        return None
    deg = math.degrees(math.atan2(dx, -dy)) % 360.0
    hour = int(round(deg / 30.0)) % 12
    return 12 if hour == 0 else hour


def tight_box(mask: np.ndarray) -> tuple[int, int, int, int]:
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        raise ValueError("empty mask has no bounding box")
    return (int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)
