"""Seeded multi-object scenes and their rasterization."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np

CATEGORIES = ("circle", "square", "triangle", "diamond")
COLORS = ("red", "green", "blue", "yellow", "purple")
SIZES = ("large", "small")
TEXTURES = ("striped",)
ATTRIBUTES = COLORS + SIZES + TEXTURES

PALETTE = {
    "red": (220, 40, 40),
    "green": (40, 180, 60),
    "blue": (40, 70, 220),
    "yellow": (230, 210, 40),
    "purple": (150, 50, 190),
}
STRIPE_SHADE = 0.55


class SceneGenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class GenConfig:
    image_size: int = 64
    min_objects: int = 2
    max_objects: int = 4
    small_px: tuple[int, int] = (10, 12)
    medium_px: tuple[int, int] = (14, 16)
    large_px: tuple[int, int] = (19, 22)
    gap_px: int = 2
    max_overlap: float = 0.0
    shared_category_fraction: float = 0.6
    duplicate_fraction: float = 0.5
    striped_prob: float = 0.25
    relation_margin: float = 0.1
    noise: int = 12
    max_retries: int = 200

    def __post_init__(self):
        if not 1 <= self.min_objects <= self.max_objects:
            raise ValueError("need 1 <= min_objects <= max_objects")
        if self.large_px[1] + 2 * self.gap_px > self.image_size:
            raise ValueError("objects do not fit in the image")

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


@dataclass(frozen=True)
class SceneObject:
    category: str
    color: str
    size: str | None  # "large" | "small" | None for medium
    striped: bool
    x0: int  # pixel box, half-open [x0, x0 + side)
    y0: int
    side: int
    draw_order: int

    @property
    def attributes(self) -> tuple[str, ...]:
        """Attribute words in expression order: size, texture, color."""
        words = []
        if self.size:
            words.append(self.size)
        if self.striped:
            words.append("striped")
        words.append(self.color)
        return tuple(words)

    def box(self, image_size: int) -> tuple[float, float, float, float]:
        s = float(image_size)
        return ((self.x0 + self.side / 2) / s, (self.y0 + self.side / 2) / s,
                self.side / s, self.side / s)

    def attribute_bits(self) -> list[int]:
        present = set(self.attributes)
        return [int(a in present) for a in ATTRIBUTES]

    @property
    def category_id(self) -> int:
        return CATEGORIES.index(self.category)

    def same_look(self, other: "SceneObject") -> bool:
        return (self.category, self.color, self.size, self.striped) == \
            (other.category, other.color, other.size, other.striped)


@dataclass(frozen=True)
class Scene:
    seed: int
    objects: tuple[SceneObject, ...]
    background: tuple[int, int, int]


def _rng(seed: int, stream: str) -> np.random.Generator:
    key = int.from_bytes(hashlib.sha256(stream.encode()).digest()[:4], "little")
    return np.random.default_rng([seed, key])


def _look(rng, cfg: GenConfig, category=None):
    category = category or CATEGORIES[rng.integers(len(CATEGORIES))]
    color = COLORS[rng.integers(len(COLORS))]
    size = (None, "large", "small")[rng.choice(3, p=(0.5, 0.25, 0.25))]
    striped = bool(rng.random() < cfg.striped_prob)
    return category, color, size, striped


def _side(rng, cfg: GenConfig, size) -> int:
    lo, hi = {"small": cfg.small_px, "large": cfg.large_px, None: cfg.medium_px}[size]
    return int(rng.integers(lo, hi + 1))


def _overlap(a, b, gap: int) -> float:
    ax0, ay0, aside = a
    bx0, by0, bside = b
    iw = min(ax0 + aside + gap, bx0 + bside) - max(ax0 - gap, bx0)
    ih = min(ay0 + aside + gap, by0 + bside) - max(ay0 - gap, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    return iw * ih / float(min(aside, bside) ** 2)


def generate_scene(seed: int, cfg: GenConfig = GenConfig(), force_duplicate: bool = False) -> Scene:
    """Deterministic scene for ``seed``. Raises SceneGenerationError if placement keeps failing."""
    rng = _rng(seed, "scene")
    n = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    duplicate = force_duplicate or rng.random() < cfg.duplicate_fraction
    shared = duplicate or rng.random() < cfg.shared_category_fraction
    if (duplicate or shared) and n < 2:
        n = 2
    looks = [_look(rng, cfg) for _ in range(n)]
    sides = [_side(rng, cfg, look[2]) for look in looks]
    if duplicate:
        looks[1], sides[1] = looks[0], sides[0]
    elif shared:
        looks[1] = _look(rng, cfg, category=looks[0][0])
        sides[1] = _side(rng, cfg, looks[1][2])
    order = rng.permutation(n)
    looks = [looks[i] for i in order]
    sides = [sides[i] for i in order]

    size = cfg.image_size
    for _ in range(cfg.max_retries):
        placed = []
        for side in sides:
            for _ in range(cfg.max_retries):
                x0 = int(rng.integers(0, size - side + 1))
                y0 = int(rng.integers(0, size - side + 1))
                cand = (x0, y0, side)
                if all(_overlap(cand, p, cfg.gap_px) <= cfg.max_overlap for p in placed):
                    placed.append(cand)
                    break
            else:
                break
        if len(placed) == n:
            break
    else:
        raise SceneGenerationError(f"seed {seed}: could not place {n} objects")
    objects = tuple(
        SceneObject(look[0], look[1], look[2], look[3], p[0], p[1], p[2], k)
        for k, (look, p) in enumerate(zip(looks, placed)))
    background = tuple(int(v) for v in rng.integers(110, 150, size=3))
    return Scene(seed, objects, background)


def shape_mask(category: str, side: int) -> np.ndarray:
    """Boolean side x side mask of a shape that touches all four box edges."""
    c = np.arange(side) + 0.5
    yy, xx = np.meshgrid(c, c, indexing="ij")
    r = side / 2.0
    dx, dy = np.abs(xx - r), np.abs(yy - r)
    if category == "square":
        return np.ones((side, side), dtype=bool)
    if category == "circle":
        return dx ** 2 + dy ** 2 <= r ** 2 + 1e-9
    if category == "diamond":
        return dx + dy <= r + 1e-9
    if category == "triangle":
        half = (np.arange(side)[:, None] + 1) / side * r
        return dx <= half + 1e-9
    raise ValueError(f"unknown category {category}")


def object_pixels(obj: SceneObject) -> tuple[np.ndarray, np.ndarray]:
    """Mask and per-pixel RGB for one object inside its own box."""
    mask = shape_mask(obj.category, obj.side)
    rgb = np.empty((obj.side, obj.side, 3), dtype=np.float64)
    rgb[:] = PALETTE[obj.color]
    if obj.striped:
        rows = (np.arange(obj.side) // 2) % 2 == 1
        rgb[rows] *= STRIPE_SHADE
    return mask, np.round(rgb).astype(np.uint8)


def render(scene: Scene, cfg: GenConfig = GenConfig()) -> np.ndarray:
    """uint8 (H, W, 3) image; background carries seeded noise, objects are flat."""
    rng = _rng(scene.seed, "noise")
    size = cfg.image_size
    noise = rng.integers(-cfg.noise, cfg.noise + 1, size=(size, size, 3))
    img = np.clip(np.array(scene.background)[None, None, :] + noise, 0, 255).astype(np.uint8)
    for obj in sorted(scene.objects, key=lambda o: o.draw_order):
        mask, rgb = object_pixels(obj)
        region = img[obj.y0:obj.y0 + obj.side, obj.x0:obj.x0 + obj.side]
        region[mask] = rgb[mask]
    return img
