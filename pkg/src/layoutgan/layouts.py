"""Layouts, category sets, and style codes: the generator's conditional input.

A layout is an ordered list of category-labeled boxes in normalized [0,1]
coordinates over a pixel lattice. Before synthesis a background instance
covering the whole lattice is prepended, so every pixel belongs to at least
one instance. Style codes are standard-normal latents, one image-level vector
plus one row per instance, each row generated from its own 64-bit seed so a
single instance can be resampled without disturbing the others.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

__all__ = [
    "CategorySet", "LabeledBox", "Layout", "InstanceLayout", "StyleSpec",
    "StyleCodes", "Violation", "LayoutError", "CATEGORY_SETS", "SHAPES",
    "validate", "require_valid", "with_background", "box_to_pixels",
    "occupancy_map", "derive_style_seeds", "styles_from_seeds",
    "sample_styles", "resample_instance", "parse_layout", "layout_to_json",
]


class LayoutError(ValueError):
    """Raised for malformed layout documents or contract breaches."""


@dataclass(frozen=True)
class CategorySet:
    """Ordered category names; index 0 is always the background class."""

    name: str
    names: Tuple[str, ...]

    def __post_init__(self):
        if len(set(self.names)) != len(self.names):
            raise LayoutError(f"category set '{self.name}': duplicate names")
        if not self.names:
            raise LayoutError(f"category set '{self.name}': empty")

    @property
    def d_ell(self) -> int:
        return len(self.names)

    @property
    def background_index(self) -> int:
        return 0

    def index_of(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise LayoutError(f"unknown category name '{name}' in set "
                              f"'{self.name}'") from None


SHAPES = CategorySet("shapes", ("background", "circle", "rect", "triangle"))

CATEGORY_SETS = {SHAPES.name: SHAPES}


@dataclass(frozen=True)
class LabeledBox:
    """Category index plus (x0, y0, x1, y1) normalized to [0,1]."""

    label: int
    box: Tuple[float, float, float, float]
    confidence: Optional[float] = None


@dataclass(frozen=True)
class Violation:
    path: str
    message: str

    def __str__(self):
        return f"{self.path}: {self.message}"


@dataclass(frozen=True)
class Layout:
    """Foreground boxes over a pixel lattice (background not yet inserted)."""

    lattice: Tuple[int, int]  # (H, W) pixels
    boxes: Tuple[LabeledBox, ...]
    categories: CategorySet = SHAPES

    @property
    def m(self) -> int:
        return len(self.boxes)


@dataclass(frozen=True)
class InstanceLayout:
    """Layout after background insertion; instance 0 is the background."""

    lattice: Tuple[int, int]
    instances: Tuple[LabeledBox, ...]
    categories: CategorySet = SHAPES

    @property
    def n_instances(self) -> int:
        return len(self.instances)

    @property
    def labels(self) -> np.ndarray:
        return np.array([b.label for b in self.instances], dtype=np.int64)

    def pixel_rects(self, H: int, W: int):
        return [box_to_pixels(b.box, H, W) for b in self.instances]


def validate(layout: Layout, m_max: int = 8):
    """Check every layout invariant; returns all violations, not the first."""
    out = []
    H, W = layout.lattice
    if H < 1 or W < 1:
        out.append(Violation("lattice", f"non-positive lattice {H}x{W}"))
    if layout.m > m_max:
        out.append(Violation("boxes", f"{layout.m} boxes exceeds limit {m_max}"))
    d_ell = layout.categories.d_ell
    for i, b in enumerate(layout.boxes):
        p = f"boxes[{i}]"
        if not (0 <= b.label < d_ell):
            out.append(Violation(p, f"label {b.label} out of range "
                                    f"[0, {d_ell})"))
        x0, y0, x1, y1 = b.box
        if not (0.0 <= x0 and x1 <= 1.0 and 0.0 <= y0 and y1 <= 1.0):
            out.append(Violation(p, f"box {b.box} outside [0,1]"))
        if not (x0 < x1 and y0 < y1):
            out.append(Violation(p, "empty box"))
        if b.confidence is not None and not (0.0 < b.confidence <= 1.0):
            out.append(Violation(p, f"confidence {b.confidence} outside (0,1]"))
    return out


def require_valid(layout: Layout, m_max: int = 8) -> None:
    violations = validate(layout, m_max=m_max)
    if violations:
        raise LayoutError("; ".join(str(v) for v in violations))


def with_background(layout: Layout, m_max: int = 8) -> InstanceLayout:
    """Prepend the background instance (label 0, full-lattice box)."""
    if isinstance(layout, InstanceLayout):
        raise LayoutError("background instance already present")
    require_valid(layout, m_max=m_max)
    bg = LabeledBox(label=layout.categories.background_index,
                    box=(0.0, 0.0, 1.0, 1.0), confidence=1.0)
    return InstanceLayout(lattice=layout.lattice,
                          instances=(bg,) + tuple(layout.boxes),
                          categories=layout.categories)


def _round_half_up(v: float) -> int:
    return int(np.floor(v + 0.5))


def box_to_pixels(box, H: int, W: int):
    """Integer rect (r0, c0, r1, c1) for a normalized box, min side 1.

    Each edge rounds half-up; degenerate rects are widened downward/rightward
    to one cell so every instance influences at least one pixel.
    """
    x0, y0, x1, y1 = box
    r0 = _round_half_up(y0 * H)
    r1 = _round_half_up(y1 * H)
    c0 = _round_half_up(x0 * W)
    c1 = _round_half_up(x1 * W)
    r0 = max(0, min(r0, H - 1))
    c0 = max(0, min(c0, W - 1))
    r1 = max(r0 + 1, min(r1, H))
    c1 = max(c0 + 1, min(c1, W))
    return r0, c0, r1, c1


def occupancy_map(inst: InstanceLayout, H: int, W: int) -> np.ndarray:
    """Count of covering pixel rects at each cell (box coverage)."""
    occ = np.zeros((H, W), dtype=np.int64)
    for r0, c0, r1, c1 in inst.pixel_rects(H, W):
        occ[r0:r1, c0:c1] += 1
    return occ


# --------------------------------------------------------------------------
# style codes
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class StyleSpec:
    """Seed block of a layout file: master seed plus optional explicit rows.

    ``per_object_seeds``, when given, has one entry per instance after
    background insertion, background first (length m+1).
    """

    seed: int
    per_object_seeds: Optional[Tuple[int, ...]] = None


@dataclass(frozen=True)
class StyleCodes:
    """Sampled latents with full seed provenance.

    Each z_obj row is a pure function of its 64-bit entry in ``object_seeds``,
    so replacing one seed resamples exactly one instance.
    """

    z_img: np.ndarray
    z_obj: np.ndarray
    image_seed: int
    object_seeds: Tuple[int, ...]

    @property
    def n_instances(self) -> int:
        return self.z_obj.shape[0]


_U64 = np.uint64


def _seed_to_u64(ss: np.random.SeedSequence) -> int:
    return int(ss.generate_state(1, _U64)[0])


def derive_style_seeds(master_seed: int, n_instances: int):
    """Split a master seed into (image_seed, per-instance seeds).

    Uses disjoint seed-sequence branches so streams never collide; instance i
    always receives the same seed regardless of how many instances exist.
    """
    image_seed = _seed_to_u64(np.random.SeedSequence([master_seed, 1, 0]))
    object_seeds = tuple(
        _seed_to_u64(np.random.SeedSequence([master_seed, 2, i]))
        for i in range(n_instances))
    return image_seed, object_seeds


def _normal_from_seed(seed: int, n: int) -> np.ndarray:
    gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    return gen.standard_normal(n)


def styles_from_seeds(image_seed: int, object_seeds: Sequence[int],
                      d_img: int, d_obj: int) -> StyleCodes:
    z_img = _normal_from_seed(int(image_seed), d_img)
    z_obj = np.stack([_normal_from_seed(int(s), d_obj)
                      for s in object_seeds]) if object_seeds else \
        np.zeros((0, d_obj))
    return StyleCodes(z_img=z_img, z_obj=z_obj,
                      image_seed=int(image_seed),
                      object_seeds=tuple(int(s) for s in object_seeds))


def sample_styles(inst: InstanceLayout, d_img: int, d_obj: int,
                  seed: int, style: Optional[StyleSpec] = None) -> StyleCodes:
    """Standard-normal codes for every instance of ``inst``.

    ``style`` (typically from a layout file) overrides the master seed and,
    when it carries explicit per-object seeds, the derived per-instance seeds.
    """
    n = inst.n_instances
    master = style.seed if style is not None else seed
    image_seed, object_seeds = derive_style_seeds(master, n)
    if style is not None and style.per_object_seeds is not None:
        if len(style.per_object_seeds) != n:
            raise LayoutError(
                f"per_object_seeds has {len(style.per_object_seeds)} entries, "
                f"expected {n} (background included, first)")
        object_seeds = tuple(style.per_object_seeds)
    return styles_from_seeds(image_seed, object_seeds, d_img, d_obj)


def resample_instance(codes: StyleCodes, i: int, new_seed: int) -> StyleCodes:
    """New codes with only instance i's row regenerated from ``new_seed``."""
    if not (0 <= i < codes.n_instances):
        raise LayoutError(f"instance index {i} out of range")
    seeds = list(codes.object_seeds)
    seeds[i] = int(new_seed)
    return styles_from_seeds(codes.image_seed, seeds,
                             codes.z_img.shape[0], codes.z_obj.shape[1])


# --------------------------------------------------------------------------
# serialization
# --------------------------------------------------------------------------

_TOP_FIELDS = {"lattice", "categories", "boxes", "style"}
_BOX_FIELDS = {"label", "box", "confidence"}
_STYLE_FIELDS = {"seed", "per_object_seeds"}


def parse_layout(text_or_obj, category_sets=None):
    """Parse a layout document; returns (Layout, StyleSpec or None).

    Rejects unknown fields at every level and names the offending field.
    """
    sets = category_sets if category_sets is not None else CATEGORY_SETS
    if isinstance(text_or_obj, (str, bytes)):
        try:
            obj = json.loads(text_or_obj)
        except json.JSONDecodeError as e:
            raise LayoutError(f"malformed JSON at line {e.lineno}, "
                              f"column {e.colno}: {e.msg}") from None
    else:
        obj = text_or_obj
    if not isinstance(obj, dict):
        raise LayoutError("layout document must be a JSON object")
    unknown = set(obj) - _TOP_FIELDS
    if unknown:
        raise LayoutError(f"unknown field(s): {sorted(unknown)}")
    for req in ("lattice", "categories", "boxes"):
        if req not in obj:
            raise LayoutError(f"missing field '{req}'")

    lat = obj["lattice"]
    if (not isinstance(lat, list) or len(lat) != 2
            or not all(isinstance(v, int) and v >= 1 for v in lat)):
        raise LayoutError(f"lattice: expected [H, W] positive integers, "
                          f"got {lat!r}")
    set_name = obj["categories"]
    if set_name not in sets:
        raise LayoutError(f"unknown category set '{set_name}'")
    cats = sets[set_name]

    boxes = []
    for i, b in enumerate(obj["boxes"]):
        path = f"boxes[{i}]"
        if not isinstance(b, dict):
            raise LayoutError(f"{path}: expected an object")
        unknown = set(b) - _BOX_FIELDS
        if unknown:
            raise LayoutError(f"{path}: unknown field(s): {sorted(unknown)}")
        if "label" not in b or "box" not in b:
            raise LayoutError(f"{path}: needs 'label' and 'box'")
        label = cats.index_of(b["label"]) if isinstance(b["label"], str) \
            else int(b["label"])
        coords = b["box"]
        if not isinstance(coords, list) or len(coords) != 4:
            raise LayoutError(f"{path}.box: expected [x0,y0,x1,y1]")
        conf = b.get("confidence")
        boxes.append(LabeledBox(label=label,
                                box=tuple(float(v) for v in coords),
                                confidence=None if conf is None
                                else float(conf)))

    style = None
    if "style" in obj and obj["style"] is not None:
        s = obj["style"]
        if not isinstance(s, dict):
            raise LayoutError("style: expected an object")
        unknown = set(s) - _STYLE_FIELDS
        if unknown:
            raise LayoutError(f"style: unknown field(s): {sorted(unknown)}")
        if "seed" not in s:
            raise LayoutError("style: needs 'seed'")
        pos = s.get("per_object_seeds")
        style = StyleSpec(seed=int(s["seed"]),
                          per_object_seeds=None if pos is None
                          else tuple(int(v) for v in pos))

    layout = Layout(lattice=(lat[0], lat[1]), boxes=tuple(boxes),
                    categories=cats)
    errs = validate(layout)
    if errs:
        raise LayoutError("; ".join(str(v) for v in errs))
    return layout, style


def layout_to_json(layout: Layout, style: Optional[StyleSpec] = None) -> str:
    """Serialize to the layout file format (labels written as names)."""
    doc = {
        "lattice": [layout.lattice[0], layout.lattice[1]],
        "categories": layout.categories.name,
        "boxes": [
            {"label": layout.categories.names[b.label],
             "box": [float(v) for v in b.box],
             **({} if b.confidence is None
                else {"confidence": float(b.confidence)})}
            for b in layout.boxes
        ],
    }
    if style is not None:
        s = {"seed": int(style.seed)}
        if style.per_object_seeds is not None:
            s["per_object_seeds"] = [int(v) for v in style.per_object_seeds]
        doc["style"] = s
    return json.dumps(doc, indent=2)
