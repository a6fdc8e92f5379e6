"""Procedural shapes dataset: images, tight layouts, ground-truth masks.

Each sample is a smooth gradient background with 1..4 colored shapes drawn
back to front, so later instances occlude earlier ones. Categories map to
disjoint color families (circles red, rects green, triangles blue), which
makes "right category in the right box" mechanically checkable. Ground
truth masks keep the full analytic support of each shape even where the
image occludes it, and every layout box is the tight bounding box of its
mask, so mask and box stay mutually consistent.

On disk a dataset is a directory with ``index.json``, 8-bit PNGs under
``images/`` and ``masks/``, and per-sample layout JSON under ``layouts/``.
Pixel values map linearly between [0, 255] bytes and [-1, 1] floats.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .layouts import (CATEGORY_SETS, CategorySet, LabeledBox, Layout,
                      LayoutError, SHAPES, layout_to_json, parse_layout)

__all__ = [
    "DataError", "Sample", "Dataset",
    "circle_mask", "rect_mask", "triangle_mask", "tight_box",
    "render_sample", "make_dataset", "load_dataset",
    "simulate_detections", "split",
]


class DataError(ValueError):
    """A dataset directory is missing, malformed, or inconsistent."""


@dataclass(frozen=True)
class Sample:
    """One dataset entry: image, tight layout, and evaluation-only masks."""

    sample_id: str
    image: np.ndarray        # (3, R, R) float32 in [-1, 1]
    layout: Layout
    gt_masks: np.ndarray     # (m, R, R) bool, full shape support
    split: str = "train"


@dataclass(frozen=True)
class Dataset:
    root: Optional[Path]
    resolution: int
    categories: CategorySet
    samples: Tuple[Sample, ...]

    def __len__(self) -> int:
        return len(self.samples)


# --------------------------------------------------------------------------
# analytic shape rasterization (pixel-center point tests)
# --------------------------------------------------------------------------

def _pixel_centers(resolution: int):
    ax = np.arange(resolution, dtype=np.float64) + 0.5
    return np.meshgrid(ax, ax, indexing="ij")


def circle_mask(resolution: int, cy: float, cx: float, r: float) -> np.ndarray:
    """Pixels whose centers lie inside the disk of radius ``r``."""
    yy, xx = _pixel_centers(resolution)
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def rect_mask(resolution: int, cy: float, cx: float,
              hy: float, hx: float) -> np.ndarray:
    """Axis-aligned rectangle with half-extents (hy, hx)."""
    yy, xx = _pixel_centers(resolution)
    return (np.abs(yy - cy) <= hy) & (np.abs(xx - cx) <= hx)


def triangle_mask(resolution: int, cy: float, cx: float,
                  h: float, w: float) -> np.ndarray:
    """Isoceles triangle, apex up: half-height ``h``, half-base ``w``."""
    yy, xx = _pixel_centers(resolution)
    ay, ax_ = cy - h, cx          # apex
    by, bx = cy + h, cx - w       # base left
    cy2, cx2 = cy + h, cx + w     # base right

    def side(py, px, qy, qx):
        return (qx - px) * (yy - py) - (qy - py) * (xx - px)

    d0 = side(ay, ax_, by, bx)
    d1 = side(by, bx, cy2, cx2)
    d2 = side(cy2, cx2, ay, ax_)
    neg = (d0 <= 0) & (d1 <= 0) & (d2 <= 0)
    pos = (d0 >= 0) & (d1 >= 0) & (d2 >= 0)
    return neg | pos


def tight_box(mask: np.ndarray) -> Tuple[float, float, float, float]:
    """Normalized (x0, y0, x1, y1) of the tight pixel bounding box."""
    if not mask.any():
        raise DataError("cannot take the tight box of an empty mask")
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    h, w = mask.shape
    return (cols[0] / w, rows[0] / h, (cols[-1] + 1) / w, (rows[-1] + 1) / h)


# --------------------------------------------------------------------------
# sample synthesis
# --------------------------------------------------------------------------

# Per-category color families: (dominant channel, low channels).
_FAMILIES = {"circle": 0, "rect": 1, "triangle": 2}


def _shape_color(rng: np.random.Generator, category: str) -> np.ndarray:
    dom = _FAMILIES[category]
    color = rng.uniform(0.0, 0.25, size=3)
    color[dom] = rng.uniform(0.7, 1.0)
    return color


def _background(rng: np.random.Generator, resolution: int) -> np.ndarray:
    """Smooth linear gradient between two mid-gray tints, (3, R, R)."""
    c0 = rng.uniform(0.3, 0.7, size=3)
    c1 = rng.uniform(0.3, 0.7, size=3)
    theta = rng.uniform(0.0, 2.0 * np.pi)
    yy, xx = _pixel_centers(resolution)
    proj = np.cos(theta) * xx + np.sin(theta) * yy
    t = (proj - proj.min()) / max(proj.max() - proj.min(), 1e-12)
    return c0[:, None, None] + t[None] * (c1 - c0)[:, None, None]


def _sample_shape(rng: np.random.Generator, resolution: int, category: str):
    """Random geometry for one shape, fully inside the lattice."""
    lo, hi = 0.08 * resolution, 0.20 * resolution
    if category == "circle":
        r = rng.uniform(lo, hi)
        cy = rng.uniform(r + 1.0, resolution - r - 1.0)
        cx = rng.uniform(r + 1.0, resolution - r - 1.0)
        return circle_mask(resolution, cy, cx, r)
    if category == "rect":
        hy = rng.uniform(lo, hi)
        hx = rng.uniform(lo, hi)
        cy = rng.uniform(hy + 1.0, resolution - hy - 1.0)
        cx = rng.uniform(hx + 1.0, resolution - hx - 1.0)
        return rect_mask(resolution, cy, cx, hy, hx)
    if category == "triangle":
        h = rng.uniform(lo, hi)
        w = rng.uniform(lo, hi)
        cy = rng.uniform(h + 1.0, resolution - h - 1.0)
        cx = rng.uniform(w + 1.0, resolution - w - 1.0)
        return triangle_mask(resolution, cy, cx, h, w)
    raise DataError(f"no renderer for category '{category}'")


def _boxes_intersect(a, b) -> bool:
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    return (min(ax1, bx1) - max(ax0, bx0) > 0
            and min(ay1, by1) - max(ay0, by0) > 0)


def render_sample(rng: np.random.Generator, resolution: int,
                  m_min: int = 1, m_max: int = 4,
                  allow_overlap: bool = True,
                  categories: CategorySet = SHAPES):
    """Draw one sample; returns (image, layout, gt_masks).

    The image is float64 in [0, 1] before quantization. Shapes are placed
    in draw order; with overlap disabled a placement that intersects an
    accepted box is retried and, after repeated failures, skipped.
    """
    m_target = int(rng.integers(m_min, m_max + 1))
    foreground = [n for n in categories.names
                  if n != categories.names[categories.background_index]]
    image = _background(rng, resolution)
    boxes: List[LabeledBox] = []
    masks: List[np.ndarray] = []
    for _ in range(m_target):
        placed = False
        for _attempt in range(100):
            name = foreground[int(rng.integers(len(foreground)))]
            mask = _sample_shape(rng, resolution, name)
            if not mask.any():
                continue
            box = tight_box(mask)
            if not allow_overlap and any(
                    _boxes_intersect(box, b.box) for b in boxes):
                continue
            color = _shape_color(rng, name)
            image = np.where(mask[None], color[:, None, None], image)
            boxes.append(LabeledBox(label=categories.index_of(name), box=box))
            masks.append(mask)
            placed = True
            break
        if not placed and not boxes:
            raise DataError("failed to place any shape")
    layout = Layout(lattice=(resolution, resolution), boxes=tuple(boxes),
                    categories=categories)
    gt = np.stack(masks) if masks else np.zeros(
        (0, resolution, resolution), dtype=bool)
    return image, layout, gt


def _quantize(image01: np.ndarray) -> np.ndarray:
    """(3, R, R) floats in [0, 1] -> (R, R, 3) uint8."""
    arr = np.clip(np.round(image01 * 255.0), 0, 255).astype(np.uint8)
    return np.transpose(arr, (1, 2, 0))


def _dequantize(arr: np.ndarray) -> np.ndarray:
    """(R, R, 3) uint8 -> (3, R, R) float32 in [-1, 1]."""
    img = arr.astype(np.float32) / 255.0 * 2.0 - 1.0
    return np.transpose(img, (2, 0, 1))


def make_dataset(out_dir, n_samples: int, resolution: int = 32,
                 m_min: int = 1, m_max: int = 4,
                 allow_overlap: bool = True, seed: int = 0,
                 categories: CategorySet = SHAPES) -> Path:
    """Write a deterministic dataset directory; returns its path."""
    if n_samples < 1:
        raise DataError(f"n_samples must be >= 1, got {n_samples}")
    if not 1 <= m_min <= m_max:
        raise DataError(f"need 1 <= m_min <= m_max, got [{m_min}, {m_max}]")
    root = Path(out_dir)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(exist_ok=True)
    (root / "layouts").mkdir(exist_ok=True)

    entries = []
    for idx in range(n_samples):
        rng = np.random.default_rng(np.random.SeedSequence([seed, idx]))
        image01, layout, gt = render_sample(
            rng, resolution, m_min=m_min, m_max=m_max,
            allow_overlap=allow_overlap, categories=categories)
        sid = f"{idx:04d}"
        Image.fromarray(_quantize(image01), mode="RGB").save(
            root / "images" / f"{sid}.png")
        mask_files = []
        for i in range(gt.shape[0]):
            name = f"masks/{sid}_{i}.png"
            Image.fromarray(gt[i].astype(np.uint8) * 255, mode="L").save(
                root / name)
            mask_files.append(name)
        (root / "layouts" / f"{sid}.json").write_text(
            layout_to_json(layout) + "\n", encoding="utf-8")
        entries.append({"id": sid,
                        "image": f"images/{sid}.png",
                        "layout": f"layouts/{sid}.json",
                        "masks": mask_files,
                        "split": "train"})

    index = {"resolution": resolution, "categories": categories.name,
             "samples": entries}
    (root / "index.json").write_text(
        json.dumps(index, indent=2) + "\n", encoding="utf-8")
    return root


def load_dataset(root) -> Dataset:
    """Read a dataset directory back into memory, validating consistency."""
    root = Path(root)
    index_path = root / "index.json"
    if not index_path.is_file():
        raise DataError(f"no index.json under {root}")
    try:
        index = json.loads(index_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DataError(f"index.json is not valid JSON: {e.msg}") from None
    for key in ("resolution", "categories", "samples"):
        if key not in index:
            raise DataError(f"index.json missing '{key}'")
    resolution = int(index["resolution"])
    set_name = index["categories"]
    if set_name not in CATEGORY_SETS:
        raise DataError(f"unknown category set '{set_name}'")
    categories = CATEGORY_SETS[set_name]

    samples = []
    for entry in index["samples"]:
        sid = entry["id"]
        arr = np.asarray(Image.open(root / entry["image"]).convert("RGB"))
        if arr.shape[:2] != (resolution, resolution):
            raise DataError(
                f"sample {sid}: image is {arr.shape[1]}x{arr.shape[0]}, "
                f"index says {resolution}x{resolution}")
        try:
            layout, _ = parse_layout(
                (root / entry["layout"]).read_text(encoding="utf-8"))
        except LayoutError as e:
            raise DataError(f"sample {sid}: {e}") from None
        if layout.m != len(entry["masks"]):
            raise DataError(
                f"sample {sid}: {layout.m} boxes but "
                f"{len(entry['masks'])} mask files")
        gt = np.zeros((layout.m, resolution, resolution), dtype=bool)
        for i, name in enumerate(entry["masks"]):
            gt[i] = np.asarray(Image.open(root / name).convert("L")) >= 128
        samples.append(Sample(sample_id=sid, image=_dequantize(arr),
                              layout=layout, gt_masks=gt,
                              split=entry.get("split", "train")))
    return Dataset(root=root, resolution=resolution,
                   categories=categories, samples=tuple(samples))


# --------------------------------------------------------------------------
# simulated detections and supervision split
# --------------------------------------------------------------------------

def simulate_detections(layout: Layout, seed: int,
                        jitter_sigma: float = 0.0,
                        drop_prob: float = 0.0,
                        tau: float = 0.5,
                        kappa: float = 2.0) -> Layout:
    """Jittered copy of a layout with per-box confidences.

    Each box coordinate is perturbed by N(0, sigma) noise, clipped back to
    the unit square, and repaired to stay non-empty. The confidence is
    clip(1 - kappa * mean|perturbation|, tau, 1), so zero noise yields
    exactly 1 and an unchanged layout. The random stream consumes the same
    number of draws per box whether or not the box is dropped, so dropping
    one box never changes another box's jitter.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 9101]))
    H, W = layout.lattice
    half_w, half_h = 0.5 / W, 0.5 / H
    kept: List[LabeledBox] = []
    for b in layout.boxes:
        delta = rng.normal(0.0, jitter_sigma, size=4)
        dropped = rng.random() < drop_prob
        if dropped:
            continue
        x0, y0, x1, y1 = (np.clip(c + d, 0.0, 1.0)
                          for c, d in zip(b.box, delta))
        if x1 - x0 <= 0:
            mid = float(np.clip((x0 + x1) / 2, half_w, 1.0 - half_w))
            x0, x1 = mid - half_w, mid + half_w
        if y1 - y0 <= 0:
            mid = float(np.clip((y0 + y1) / 2, half_h, 1.0 - half_h))
            y0, y1 = mid - half_h, mid + half_h
        conf = float(np.clip(1.0 - kappa * np.mean(np.abs(delta)), tau, 1.0))
        kept.append(LabeledBox(label=b.label,
                               box=(float(x0), float(y0),
                                    float(x1), float(y1)),
                               confidence=conf))
    return Layout(lattice=layout.lattice, boxes=tuple(kept),
                  categories=layout.categories)


def split(n_samples: int, fraction: float, seed: int
          ) -> Tuple[List[int], List[int]]:
    """Deterministic disjoint covering split of range(n_samples).

    Returns (supervised, unsupervised) index lists; the first holds
    round(fraction * n) samples. Both lists are sorted.
    """
    if not 0.0 <= fraction <= 1.0:
        raise DataError(f"fraction {fraction} outside [0, 1]")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 4242]))
    perm = rng.permutation(n_samples)
    n_a = int(round(fraction * n_samples))
    return sorted(int(i) for i in perm[:n_a]), \
        sorted(int(i) for i in perm[n_a:])
