from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

from ..errors import ConfigError, GenerationError
from .rng import Xoshiro256

MODALITIES = ("visible", "infrared")
CLASS_NAMES = ("disc", "square", "triangle", "bar")
VISIBILITY = ("full", "partial", "absent")
HALVES = ("left", "right", "top", "bottom")
_OPPOSITE = {"left": "right", "right": "left", "top": "bottom", "bottom": "top"}

# fixed placement margin (normalized); shifts larger than this get clamped
_MARGIN = 0.1


@dataclass(frozen=True)
class SceneParams:
    """Generator knobs. ``visibility_mix`` is (full, partial, absent-in-one)."""

    image_size: int = 64
    min_objects: int = 1
    max_objects: int = 4
    size_range: tuple = (0.16, 0.32)
    bar_aspect: tuple = (0.3, 0.42)
    visibility_mix: tuple = (0.4, 0.3, 0.3)
    max_shift: float = 0.03
    max_overlap: float = 0.1
    max_retries: int = 200
    visible_clutter: int = 4
    infrared_clutter: int = 3

    def validate(self) -> "SceneParams":
        if self.image_size <= 0:
            raise ConfigError("image_size must be positive")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ConfigError("need 1 <= min_objects <= max_objects")
        lo, hi = self.size_range
        if not 0 < lo <= hi < 1 - 2 * _MARGIN:
            raise ConfigError(f"size_range {self.size_range} out of bounds")
        if len(self.visibility_mix) != 3 or min(self.visibility_mix) < 0 or sum(self.visibility_mix) <= 0:
            raise ConfigError(f"bad visibility_mix {self.visibility_mix}")
        if self.max_shift < 0:
            raise ConfigError("max_shift must be >= 0")
        if not 0 <= self.max_overlap <= 1:
            raise ConfigError("max_overlap must lie in [0, 1]")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneParams":
        known = {f.name for f in fields(cls)}
        kw = {}
        for k, v in d.items():
            if k in known:
                kw[k] = tuple(v) if isinstance(v, list) else v
        return cls(**kw)


@dataclass(frozen=True)
class ObjectSpec:
    class_id: int
    box: tuple                      # true (cx, cy, w, h), normalized
    visibility: tuple               # per modality, one of VISIBILITY
    shift: tuple                    # per modality (dx, dy), normalized, after clamping
    occluded_half: tuple            # per modality, one of HALVES or None
    appearance_seed: int


@dataclass(frozen=True)
class SceneSpec:
    index: int
    image_size: int
    background_seed: tuple          # per modality
    clutter: tuple                  # per modality, count of clutter items
    objects: tuple = field(default_factory=tuple)

    def ground_truth(self) -> list:
        """Shared annotation: ``(class_id, cx, cy, w, h)``; shifts never appear."""
        return [(o.class_id,) + tuple(o.box) for o in self.objects]


def _iou(a, b) -> float:
    ax0, ay0, ax1, ay1 = a[0] - a[2] / 2, a[1] - a[3] / 2, a[0] + a[2] / 2, a[1] + a[3] / 2
    bx0, by0, bx1, by1 = b[0] - b[2] / 2, b[1] - b[3] / 2, b[0] + b[2] / 2, b[1] + b[3] / 2
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    return inter / (a[2] * a[3] + b[2] * b[3] - inter)


def _clamped_shift(box, dx, dy):
    cx, cy, w, h = box
    nx = min(max(cx + dx, w / 2), 1 - w / 2)
    ny = min(max(cy + dy, h / 2), 1 - h / 2)
    return (nx - cx, ny - cy)


def generate_scene(params: SceneParams, seed: int, index: int) -> SceneSpec:
    """Draw one scene from stream ``index`` of ``seed``.

    The draw order is fixed and shift draws are scaled by ``max_shift``
    only at the end, so two parameter sets that differ solely in
    ``max_shift`` yield the same objects with proportionally larger shifts.
    """
    rng = Xoshiro256.for_stream(seed, index)
    bg = tuple(rng.next_u64() for _ in MODALITIES)
    clutter = (params.visible_clutter, params.infrared_clutter)
    n = params.min_objects + rng.randbelow(params.max_objects - params.min_objects + 1)
    lo, hi = params.size_range
    objects = []
    for _ in range(n):
        cls = rng.randbelow(len(CLASS_NAMES))
        for _attempt in range(params.max_retries):
            w = rng.uniform(lo, hi)
            if CLASS_NAMES[cls] == "bar":
                h = w * rng.uniform(*params.bar_aspect)
                w = min(w * 1.25, hi * 1.25)
            else:
                h = w * rng.uniform(0.85, 1.15)
            cx = rng.uniform(_MARGIN + w / 2, 1 - _MARGIN - w / 2)
            cy = rng.uniform(_MARGIN + h / 2, 1 - _MARGIN - h / 2)
            box = (cx, cy, w, h)
            if all(_iou(box, o["box"]) <= params.max_overlap for o in objects):
                break
        else:
            raise GenerationError(f"scene {index}: could not place object {len(objects)} "
                                  f"after {params.max_retries} attempts")
        kind = rng.choice(params.visibility_mix)
        side = HALVES[rng.randbelow(4)]
        which = rng.randbelow(2)
        if kind == 0:
            vis, occ = ("full", "full"), (None, None)
        elif kind == 1:
            # complementary halves: each modality shows what the other hides
            vis, occ = ("partial", "partial"), (side, _OPPOSITE[side])
        else:
            vis = ("absent", "full") if which == 0 else ("full", "absent")
            occ = (None, None)
        raw = [(2 * rng.random() - 1, 2 * rng.random() - 1) for _ in MODALITIES]
        objects.append({"cls": cls, "box": box, "vis": vis, "occ": occ, "raw": raw,
                        "seed": rng.next_u64()})

    specs = []
    for o in objects:
        shifts = tuple(_clamped_shift(o["box"], params.max_shift * rx, params.max_shift * ry)
                       for rx, ry in o["raw"])
        specs.append(ObjectSpec(o["cls"], o["box"], o["vis"], shifts, o["occ"], o["seed"]))
    return SceneSpec(index, params.image_size, bg, clutter, tuple(specs))
