"""Procedural out-of-context scene generator.

Seeded 2D room scenes with a placed target glyph, plus controlled transforms
that violate one contextual cue at a time: removing the surroundings,
lifting the target off its support, moving it to a room where it does not
belong, combining both, or inflating its size while the rest of the scene
stays intact.  Each violation image differs from its in-context counterpart
only in the target's placement or (for no-context) only outside its box.

The class roster contains ambiguous pairs: two classes rendered from the
same stencil whose home rooms are disjoint, so the room is the only
disambiguator.  This is the harness device that makes contextual benefit
measurable without pretrained features.

Images are written as binary PPM; the manifest is a line-delimited UTF-8
table with a fixed field order (see ``MANIFEST_FIELDS``).
"""

from __future__ import annotations

import dataclasses
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .model import BoundingBox
from .ppm import encode_ppm, read_ppm, write_ppm
from .rng import Rng, derive_seed

__all__ = [
    "CONDITIONS", "ROOM_KINDS", "MANIFEST_FIELDS",
    "ClassDef", "Surface", "Scene", "Placement", "Sample", "GenConfig",
    "ManifestRecord", "GenerationError", "ConditionUnavailableError",
    "ManifestError", "default_classes", "paint_glyph", "build_room",
    "generate_base_scene", "apply_gravity", "apply_cooccurrence",
    "apply_cooccur_gravity", "apply_size", "blank_context", "render",
    "placement_box", "generate_sample", "build_dataset",
    "write_manifest", "read_manifest", "SampleStore",
]

CONDITIONS = ("Normal", "NoContextGrey", "NoContextSaltPepper", "Gravity",
              "CoOccur", "CoOccurGravity", "Size2", "Size3", "Size4")

ROOM_KINDS = ("kitchen", "bathroom", "bedroom", "study", "living")

SIZE_FACTORS = {"Size2": 2, "Size3": 3, "Size4": 4}


class GenerationError(RuntimeError):
    """No valid placement found; the caller should reseed and retry."""


class ConditionUnavailableError(ValueError):
    """The requested condition cannot be built for this class."""


class ManifestError(ValueError):
    """Malformed manifest content (message names the line number)."""


# ---------------------------------------------------------------------------
# classes and glyphs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ClassDef:
    class_id: int
    name: str
    glyph: str
    home_rooms: frozenset
    base_size: int
    support_required: bool = True

    def __post_init__(self):
        if not self.home_rooms:
            raise ValueError(f"class {self.name} has no home rooms")


def default_classes() -> list[ClassDef]:
    """Eight classes over five rooms, including two ambiguous pairs.

    (flour_jar, lotion_jar) and (book_crate, game_crate) share stencils but
    have disjoint home rooms, so only context can tell them apart.
    """
    mk = ClassDef
    return [
        mk(0, "flour_jar", "jar", frozenset({"kitchen"}), 14),
        mk(1, "lotion_jar", "jar", frozenset({"bathroom"}), 14),
        mk(2, "book_crate", "crate", frozenset({"study"}), 17),
        mk(3, "game_crate", "crate", frozenset({"living"}), 17),
        mk(4, "mug", "mug", frozenset({"kitchen", "living"}), 12),
        mk(5, "desk_lamp", "lamp", frozenset({"bedroom", "study"}), 22),
        mk(6, "potted_plant", "plant", frozenset({"living", "bedroom"}), 20),
        mk(7, "towel_roll", "towel", frozenset({"bathroom"}), 15),
    ]


def _paint_jar(h: int):
    w = max(4, int(round(h * 0.75)))
    mask = np.ones((h, w), dtype=bool)
    mask[0, 0] = mask[0, -1] = mask[-1, 0] = mask[-1, -1] = False
    colors = np.empty((h, w, 3))
    colors[:] = (0.93, 0.93, 0.88)
    lid = max(1, h // 5)
    colors[:lid] = (0.42, 0.38, 0.34)
    band = min(h - 1, lid + max(1, h // 4))
    colors[band] = (0.75, 0.73, 0.66)
    return mask, colors


def _paint_crate(h: int):
    w = max(4, int(round(h * 1.05)))
    mask = np.ones((h, w), dtype=bool)
    colors = np.empty((h, w, 3))
    colors[:] = (0.72, 0.55, 0.34)
    colors[0] = colors[-1] = (0.5, 0.36, 0.2)
    colors[:, 0] = colors[:, -1] = (0.5, 0.36, 0.2)
    colors[h // 2] = (0.5, 0.36, 0.2)
    return mask, colors


def _paint_mug(h: int):
    w = max(5, int(round(h * 1.15)))
    body_w = max(3, int(round(w * 0.72)))
    mask = np.zeros((h, w), dtype=bool)
    mask[:, :body_w] = True
    top = max(1, h // 4)
    bot = min(h - 1, top + max(2, h // 3))
    mask[top:bot, body_w:] = True          # handle stub
    inner = max(1, h // 6)
    colors = np.empty((h, w, 3))
    colors[:] = (0.82, 0.18, 0.15)
    colors[:inner, :body_w] = (0.35, 0.08, 0.06)
    return mask, colors


def _paint_lamp(h: int):
    w = max(5, int(round(h * 0.62)))
    mask = np.zeros((h, w), dtype=bool)
    colors = np.empty((h, w, 3))
    colors[:] = (0.2, 0.18, 0.16)
    shade_h = max(2, int(round(h * 0.4)))
    for r in range(shade_h):
        span = int(round((w / 2 - 1) * r / max(1, shade_h - 1))) + 1
        mask[r, max(0, w // 2 - span):min(w, w // 2 + span)] = True
        colors[r, :] = (0.95, 0.84, 0.3)
    stem = max(1, w // 6)
    mask[shade_h:, w // 2 - stem // 2:w // 2 + stem // 2 + 1] = True
    base_h = max(1, h // 8)
    mask[h - base_h:, max(0, w // 4):min(w, 3 * w // 4 + 1)] = True
    return mask, colors


def _paint_plant(h: int):
    w = max(5, int(round(h * 0.7)))
    mask = np.zeros((h, w), dtype=bool)
    colors = np.empty((h, w, 3))
    pot_h = max(2, int(round(h * 0.35)))
    crown_h = h - pot_h
    cy, cx = crown_h / 2.0, w / 2.0
    yy, xx = np.mgrid[0:crown_h, 0:w]
    crown = ((yy - cy) / max(cy, 1)) ** 2 + ((xx - cx) / max(cx, 1)) ** 2 <= 1.0
    mask[:crown_h] = crown
    colors[:crown_h] = (0.18, 0.55, 0.22)
    for r in range(pot_h):
        inset = int(round((w // 5) * r / max(1, pot_h - 1)))
        mask[crown_h + r, inset:w - inset] = True
    colors[crown_h:] = (0.65, 0.36, 0.2)
    return mask, colors


def _paint_towel(h: int):
    w = max(4, int(round(h * 0.85)))
    mask = np.ones((h, w), dtype=bool)
    colors = np.empty((h, w, 3))
    for r in range(h):
        colors[r] = (0.25, 0.45, 0.8) if (r // 2) % 2 == 0 else (0.95, 0.96, 0.98)
    return mask, colors


_PAINTERS = {
    "jar": _paint_jar,
    "crate": _paint_crate,
    "mug": _paint_mug,
    "lamp": _paint_lamp,
    "plant": _paint_plant,
    "towel": _paint_towel,
}


def paint_glyph(glyph: str, height: int):
    """Render a stencil at the given height -> (mask (h,w), colors (h,w,3)).

    Painters are deterministic in (glyph, height), so classes sharing a
    stencil are pixel-identical at equal size.
    """
    if glyph not in _PAINTERS:
        raise KeyError(f"unknown glyph {glyph!r}")
    if height < 4:
        raise ValueError(f"glyph height must be >= 4, got {height}")
    return _PAINTERS[glyph](int(height))


# ---------------------------------------------------------------------------
# rooms
# ---------------------------------------------------------------------------

# wall, floor, furniture, accent colours per room kind; saturated and
# well-separated so a small conv stack can tell rooms apart.
_PALETTES = {
    "kitchen": ((0.93, 0.85, 0.52), (0.78, 0.47, 0.27), (0.62, 0.2, 0.16), (0.95, 0.95, 0.9)),
    "bathroom": ((0.6, 0.86, 0.9), (0.83, 0.91, 0.94), (0.26, 0.5, 0.78), (0.96, 0.98, 1.0)),
    "bedroom": ((0.77, 0.67, 0.88), (0.52, 0.36, 0.26), (0.5, 0.28, 0.55), (0.9, 0.85, 0.95)),
    "study": ((0.64, 0.74, 0.58), (0.33, 0.24, 0.17), (0.3, 0.4, 0.28), (0.85, 0.9, 0.8)),
    "living": ((0.92, 0.78, 0.62), (0.42, 0.58, 0.32), (0.72, 0.4, 0.2), (0.95, 0.9, 0.85)),
}


@dataclass(frozen=True)
class Surface:
    """Horizontal support segment: top row ``y`` spanning columns [x0, x1)."""
    y: int
    x0: int
    x1: int


@dataclass
class Scene:
    room_kind: str
    background: np.ndarray                  # (3, S, S) float in [0, 1]
    surfaces: list[Surface]
    furniture_boxes: list[tuple[int, int, int, int]]   # (x, y, w, h)

    @property
    def side(self) -> int:
        return self.background.shape[1]


@dataclass
class Placement:
    """A glyph stencil at a position; rendering clips to the image."""
    mask: np.ndarray
    colors: np.ndarray
    x: int
    y: int
    clamped: bool = False

    @property
    def h(self) -> int:
        return self.mask.shape[0]

    @property
    def w(self) -> int:
        return self.mask.shape[1]

    @property
    def bottom(self) -> int:
        return self.y + self.h


@dataclass
class Sample:
    image: np.ndarray                       # (3, S, S) float in [0, 1]
    box: BoundingBox
    class_id: int
    class_name: str
    condition: str
    size_bin: str
    seed: int


def _fill_rect(img, x, y, w, h, color):
    img[:, max(0, y):y + h, max(0, x):x + w] = np.asarray(color)[:, None, None]


def build_room(kind: str, rng: Rng, cfg: "GenConfig") -> Scene:
    """Background, distractor furniture and support surfaces for one room."""
    if kind not in _PALETTES:
        raise ValueError(f"unknown room kind {kind!r}")
    s = cfg.image_side
    wall, floor, furn, accent = (np.array(c) for c in _PALETTES[kind])
    jitter = lambda c: np.clip(c + rng.uniform(-0.03, 0.03, 3), 0.0, 1.0)

    img = np.empty((3, s, s))
    floor_y = rng.integers(int(s * 0.64), int(s * 0.74))
    img[:, :floor_y] = jitter(wall)[:, None, None]
    img[:, floor_y:] = jitter(floor)[:, None, None]

    boxes: list[tuple[int, int, int, int]] = []

    # window / wall decor
    wx = rng.integers(s // 12, s - s // 3)
    wy = rng.integers(s // 12, s // 5)
    ww, wh = rng.integers(s // 6, s // 4), rng.integers(s // 8, s // 6)
    _fill_rect(img, wx, wy, ww, wh, jitter(accent))
    boxes.append((wx, wy, ww, wh))

    # side cabinet against one wall
    cw = rng.integers(s // 8, s // 6)
    ch = rng.integers(s // 4, s // 3)
    cx = rng.integers(0, s // 16) if rng.random() < 0.5 else s - cw - rng.integers(0, s // 16)
    cy = floor_y - ch + rng.integers(0, s // 16)
    _fill_rect(img, cx, cy, cw, ch, jitter(furn * 0.85))
    boxes.append((cx, cy, cw, ch))

    # main support: a table spanning the central region
    tx0 = rng.integers(s // 10, s // 5 + 1)
    tx1 = rng.integers(s - s // 5, s - s // 10 + 1)
    ty = rng.integers(int(s * 0.58), int(s * 0.67))
    th = rng.integers(s // 10, s // 7)
    _fill_rect(img, tx0, ty, tx1 - tx0, th, jitter(furn))
    leg_w = max(2, s // 32)
    _fill_rect(img, tx0 + 2, ty + th, leg_w, floor_y - ty - th + 4, jitter(furn * 0.8))
    _fill_rect(img, tx1 - 2 - leg_w, ty + th, leg_w, floor_y - ty - th + 4, jitter(furn * 0.8))

    return Scene(kind, img, [Surface(ty, tx0, tx1)], boxes)


def _rects_overlap(a, b) -> bool:
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    return ax < bx + bw and bx < ax + aw and ay < by + bh and by < ay + ah


def place_on_surface(scene: Scene, mask: np.ndarray, colors: np.ndarray,
                     rng: Rng, cfg: "GenConfig", attempts: int = 100) -> Placement:
    """Rest the glyph on a support surface near the horizontal center.

    The bottom edge sits exactly on the surface row; the glyph must stay
    inside the surface span and must not overlap any distractor furniture.
    """
    s = scene.side
    h, w = mask.shape
    for _ in range(attempts):
        surface = rng.choice(scene.surfaces)
        cx = s / 2.0 + rng.uniform(-0.1, 0.1) * s
        x = int(round(cx - w / 2.0))
        y = surface.y - h
        if y < 0 or x < surface.x0 or x + w > surface.x1:
            continue
        rect = (x, y, w, h)
        if any(_rects_overlap(rect, b) for b in scene.furniture_boxes):
            continue
        return Placement(mask, colors, x, y)
    raise GenerationError(
        f"no valid placement in {scene.room_kind} after {attempts} attempts")


def generate_base_scene(rng: Rng, class_def: ClassDef, cfg: "GenConfig"):
    """In-context scene: a home room with the target resting on a surface."""
    room = rng.choice(sorted(class_def.home_rooms))
    scene = build_room(room, rng, cfg)
    lo, hi = cfg.size_jitter
    height = max(4, int(round(class_def.base_size * rng.uniform(lo, hi))))
    mask, colors = paint_glyph(class_def.glyph, height)
    placement = place_on_surface(scene, mask, colors, rng, cfg)
    return scene, placement


# ---------------------------------------------------------------------------
# condition transforms
# ---------------------------------------------------------------------------

def apply_gravity(placement: Placement, scene: Scene,
                  lift_fraction: float = 0.125) -> Placement:
    """Lift the target so no surface touches its bottom edge."""
    if not any(placement.bottom == s.y for s in scene.surfaces):
        raise ValueError("gravity transform expects a supported target")
    lift = int(round(lift_fraction * scene.side))
    y = placement.y - lift
    clamped = False
    if y < 0:
        y, clamped = 0, True
    while y > 0 and any(y + placement.h == s.y for s in scene.surfaces):
        y -= 1
    return dataclasses.replace(placement, y=y, clamped=clamped)


def apply_cooccurrence(class_def: ClassDef, rng: Rng) -> str:
    """Pick a room the class does not belong to, uniformly."""
    candidates = [k for k in ROOM_KINDS if k not in class_def.home_rooms]
    if not candidates:
        raise ConditionUnavailableError(
            f"class {class_def.name} is at home in every room")
    return rng.choice(candidates)


def apply_cooccur_gravity(placement: Placement, scene: Scene) -> Placement:
    """Float the target with its vertical center at half the room height."""
    s = scene.side
    y = int(round(s / 2.0 - placement.h / 2.0))
    while y > 0 and any(y + placement.h == surf.y for surf in scene.surfaces):
        y -= 1
    return dataclasses.replace(placement, y=y)


def apply_size(placement: Placement, factor: int, scene: Scene) -> Placement:
    """Rescale the glyph about its bottom-center anchor (stays supported)."""
    if factor not in (2, 3, 4):
        raise ValueError(f"size factor must be 2, 3 or 4, got {factor}")
    mask = np.repeat(np.repeat(placement.mask, factor, axis=0), factor, axis=1)
    colors = np.repeat(np.repeat(placement.colors, factor, axis=0), factor, axis=1)
    cx = placement.x + placement.w // 2
    x = cx - mask.shape[1] // 2
    y = placement.bottom - mask.shape[0]
    s = scene.side
    clamped = x < 0 or y < 0 or x + mask.shape[1] > s or y + mask.shape[0] > s
    return Placement(mask, colors, x, y, clamped=clamped)


def blank_context(image: np.ndarray, box: BoundingBox, mode: str,
                  rng: Rng | None = None) -> np.ndarray:
    """Replace everything outside the box with grey or salt-and-pepper noise."""
    s = image.shape[1]
    if mode == "grey":
        out = np.full_like(image, 0.5)
    elif mode == "salt_pepper":
        if rng is None:
            raise ValueError("salt_pepper mode needs an rng")
        noise = (rng.random((s, image.shape[2])) < 0.5).astype(np.float64)
        out = np.repeat(noise[None, :, :], 3, axis=0)
    else:
        raise ValueError(f"unknown blank mode {mode!r}")
    out[:, box.y:box.y + box.h, box.x:box.x + box.w] = \
        image[:, box.y:box.y + box.h, box.x:box.x + box.w]
    return out


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def render(scene: Scene, placement: Placement) -> np.ndarray:
    """Stamp the glyph over a copy of the background, clipping to the image."""
    img = scene.background.copy()
    s = scene.side
    x0, y0 = max(0, placement.x), max(0, placement.y)
    x1 = min(s, placement.x + placement.w)
    y1 = min(s, placement.y + placement.h)
    if x0 >= x1 or y0 >= y1:
        raise GenerationError("glyph entirely outside the image")
    mview = placement.mask[y0 - placement.y:y1 - placement.y,
                           x0 - placement.x:x1 - placement.x]
    cview = placement.colors[y0 - placement.y:y1 - placement.y,
                             x0 - placement.x:x1 - placement.x]
    region = img[:, y0:y1, x0:x1]
    region[:, mview] = cview[mview].T
    return img


def placement_box(placement: Placement, side: int) -> BoundingBox:
    """Tight bounding box of the visible stencil pixels."""
    x0, y0 = max(0, placement.x), max(0, placement.y)
    x1 = min(side, placement.x + placement.w)
    y1 = min(side, placement.y + placement.h)
    if x0 >= x1 or y0 >= y1:
        raise GenerationError("glyph entirely outside the image")
    mview = placement.mask[y0 - placement.y:y1 - placement.y,
                           x0 - placement.x:x1 - placement.x]
    rows = np.flatnonzero(mview.any(axis=1))
    cols = np.flatnonzero(mview.any(axis=0))
    if rows.size == 0:
        raise GenerationError("no visible stencil pixels")
    return BoundingBox(x=int(x0 + cols[0]), y=int(y0 + rows[0]),
                       w=int(cols[-1] - cols[0] + 1), h=int(rows[-1] - rows[0] + 1))


# ---------------------------------------------------------------------------
# dataset assembly
# ---------------------------------------------------------------------------

def _default_test_counts() -> dict[str, int]:
    return {
        "Normal": 320, "NoContextGrey": 160, "NoContextSaltPepper": 160,
        "Gravity": 320, "CoOccur": 320, "CoOccurGravity": 320,
        "Size2": 107, "Size3": 107, "Size4": 106,
    }


@dataclass
class GenConfig:
    image_side: int = 96
    train_count: int = 4000
    test_counts: dict = field(default_factory=_default_test_counts)
    lift_fraction: float = 0.125
    small_max_side: int = 20            # box side below this -> "small" bin
    size_jitter: tuple = (0.8, 1.3)
    classes: list = field(default_factory=default_classes)

    def __post_init__(self):
        for cond in self.test_counts:
            if cond not in CONDITIONS:
                raise ValueError(f"unknown condition {cond!r}")


def _size_bin(box: BoundingBox, cfg: GenConfig) -> str:
    return "small" if max(box.w, box.h) < cfg.small_max_side else "large"


def generate_sample(seed: int, condition: str, class_def: ClassDef,
                    cfg: GenConfig) -> Sample:
    """Deterministic sample constructor: (seed, condition, class) -> image."""
    if condition not in CONDITIONS:
        raise ValueError(f"unknown condition {condition!r}")
    rng = Rng(seed)
    scene, placement = generate_base_scene(rng, class_def, cfg)

    if condition in ("CoOccur", "CoOccurGravity"):
        room = apply_cooccurrence(class_def, rng)
        scene = build_room(room, rng, cfg)
        placement = place_on_surface(scene, placement.mask, placement.colors, rng, cfg)
        if condition == "CoOccurGravity":
            placement = apply_cooccur_gravity(placement, scene)
    elif condition == "Gravity":
        placement = apply_gravity(placement, scene, cfg.lift_fraction)
    elif condition in SIZE_FACTORS:
        placement = apply_size(placement, SIZE_FACTORS[condition], scene)

    image = render(scene, placement)
    box = placement_box(placement, scene.side)
    if condition == "NoContextGrey":
        image = blank_context(image, box, "grey")
    elif condition == "NoContextSaltPepper":
        image = blank_context(image, box, "salt_pepper", rng)

    return Sample(image=image, box=box, class_id=class_def.class_id,
                  class_name=class_def.name, condition=condition,
                  size_bin=_size_bin(box, cfg), seed=seed)


def _generate_with_retries(seed: int, condition: str, class_def: ClassDef,
                           cfg: GenConfig, retries: int = 20) -> Sample:
    attempt_seed = seed
    for attempt in range(retries):
        try:
            return generate_sample(attempt_seed, condition, class_def, cfg)
        except GenerationError:
            attempt_seed = derive_seed(seed, "retry", attempt)
    raise GenerationError(
        f"could not generate {condition} sample for {class_def.name} "
        f"after {retries} reseeds")


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

MANIFEST_FIELDS = ("path", "class_id", "class_name", "x", "y", "w", "h",
                   "condition", "size_bin", "seed")
_MANIFEST_HEADER = "\t".join(MANIFEST_FIELDS)


@dataclass(frozen=True)
class ManifestRecord:
    path: str
    class_id: int
    class_name: str
    x: int
    y: int
    w: int
    h: int
    condition: str
    size_bin: str
    seed: int

    def box(self) -> BoundingBox:
        return BoundingBox(self.x, self.y, self.w, self.h)

    def line(self) -> str:
        return "\t".join(str(getattr(self, f)) for f in MANIFEST_FIELDS)


def write_manifest(path, records):
    lines = [_MANIFEST_HEADER] + [r.line() for r in records]
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines) + "\n")


def read_manifest(path) -> list[ManifestRecord]:
    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines or lines[0] != _MANIFEST_HEADER:
        raise ManifestError(f"{path}: line 1: bad or missing header")
    records = []
    ints = {"class_id", "x", "y", "w", "h", "seed"}
    for num, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != len(MANIFEST_FIELDS):
            raise ManifestError(
                f"{path}: line {num}: expected {len(MANIFEST_FIELDS)} fields, got {len(parts)}")
        kwargs = {}
        for name, raw in zip(MANIFEST_FIELDS, parts):
            if name in ints:
                try:
                    kwargs[name] = int(raw)
                except ValueError:
                    raise ManifestError(
                        f"{path}: line {num}: field {name!r} is not an integer: {raw!r}")
            else:
                kwargs[name] = raw
        if kwargs["condition"] not in CONDITIONS:
            raise ManifestError(
                f"{path}: line {num}: unknown condition {kwargs['condition']!r}")
        records.append(ManifestRecord(**kwargs))
    return records


# ---------------------------------------------------------------------------
# dataset build
# ---------------------------------------------------------------------------

def _sample_plan(cfg: GenConfig, master_seed: int):
    """Flat build plan: (split, index, seed, condition, class_def)."""
    plan = []
    roster = cfg.classes
    for i in range(cfg.train_count):
        plan.append(("train", i, derive_seed(master_seed, "train", i),
                     "Normal", roster[i % len(roster)]))
    index = 0
    for cond in CONDITIONS:
        count = cfg.test_counts.get(cond, 0)
        for j in range(count):
            plan.append(("test", index, derive_seed(master_seed, "test", cond, j),
                         cond, roster[j % len(roster)]))
            index += 1
    return plan


def build_dataset(cfg: GenConfig, out_dir, master_seed: int,
                  threads: int = 1) -> dict:
    """Generate all samples, write PPM images and one manifest per split.

    The whole tree is a pure function of (cfg, master_seed): per-sample seeds
    are hashes of the master seed, split and index, so regeneration is
    byte-identical and samples can be produced in parallel.
    """
    out_dir = os.fspath(out_dir)
    for split in ("train", "test"):
        os.makedirs(os.path.join(out_dir, "images", split), exist_ok=True)

    plan = _sample_plan(cfg, master_seed)

    def make(entry):
        split, index, seed, cond, class_def = entry
        sample = _generate_with_retries(seed, cond, class_def, cfg)
        rel = f"images/{split}/{index:06d}.ppm"
        record = ManifestRecord(
            path=rel, class_id=sample.class_id, class_name=sample.class_name,
            x=sample.box.x, y=sample.box.y, w=sample.box.w, h=sample.box.h,
            condition=sample.condition, size_bin=sample.size_bin,
            seed=sample.seed)
        return split, record, encode_ppm(sample.image)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(make, plan))
    else:
        results = [make(entry) for entry in plan]

    manifests = {"train": [], "test": []}
    for split, record, blob in results:
        with open(os.path.join(out_dir, record.path), "wb") as f:
            f.write(blob)
        manifests[split].append(record)

    paths = {}
    for split, records in manifests.items():
        path = os.path.join(out_dir, f"{split}.manifest")
        write_manifest(path, records)
        paths[split] = path
    return paths


class SampleStore:
    """Manifest-backed sample access with an in-memory uint8 image cache."""

    def __init__(self, manifest_path):
        self.manifest_path = os.fspath(manifest_path)
        self.root = os.path.dirname(os.path.abspath(self.manifest_path))
        self.records = read_manifest(self.manifest_path)
        self._cache: dict[str, np.ndarray] = {}

    def __len__(self):
        return len(self.records)

    def image(self, record: ManifestRecord) -> np.ndarray:
        cached = self._cache.get(record.path)
        if cached is None:
            img = read_ppm(os.path.join(self.root, record.path))
            cached = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
            self._cache[record.path] = cached
        return cached.astype(np.float64) / 255.0

    def __getitem__(self, i: int):
        record = self.records[i]
        return record, self.image(record)
