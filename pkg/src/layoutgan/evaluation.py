"""Model evaluation: diversity, mask quality, and reconfigurability probes.

Everything here treats the generator as a frozen function of (layout,
style codes). The diversity proxy measures perceptual-feature distance
with the same fixed random extractor the training loss uses, mask IoU
compares generated instance masks against ground truth after a shared
crop-and-resize, and the two probe functions check the editing contracts:
resampling one instance's style, or moving one box, should leave the rest
of the scene alone in the precise sense each probe documents.

The report writer emits a JSON document plus rendered PNG figures
(contact sheets and metric curves). Inception-style scores are reported
as unavailable rather than approximated with uncalibrated features.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")

import matplotlib.patches as mpatches  # noqa: E402
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from . import autodiff as ad  # noqa: E402
from .data import Dataset  # noqa: E402
from .layouts import (InstanceLayout, LabeledBox, Layout,  # noqa: E402
                      box_to_pixels, resample_instance, sample_styles,
                      styles_from_seeds, with_background)
from .networks import Generator  # noqa: E402
from .objectives import FrozenExtractor  # noqa: E402

__all__ = [
    "diversity_proxy", "diversity_score", "mask_iou", "mean_iou_report",
    "locality_probe", "layout_probe", "category_palette", "label_map_to_rgb",
    "contact_sheet", "plot_metrics", "evaluate_model", "write_report",
]

NOT_AVAILABLE = "N/A (requires pretrained classifier)"


# --------------------------------------------------------------------------
# diversity
# --------------------------------------------------------------------------

_extractor: Optional[FrozenExtractor] = None


def _get_extractor() -> FrozenExtractor:
    global _extractor
    if _extractor is None:
        _extractor = FrozenExtractor()
    return _extractor


def diversity_proxy(img_a: np.ndarray, img_b: np.ndarray) -> float:
    """Mean over extractor stages of normalized-feature L2 distance.

    Symmetric and zero exactly when the images are identical.
    """
    a = np.asarray(img_a, dtype=np.float32)
    b = np.asarray(img_b, dtype=np.float32)
    if a.shape != b.shape or a.ndim != 3:
        raise ad.ContractError(
            f"diversity_proxy: need two images of one shape, "
            f"got {a.shape} and {b.shape}")
    ext = _get_extractor()
    fa = ext.stage_features(ad.constant(a[None]))
    fb = ext.stage_features(ad.constant(b[None]))
    dists = []
    for sa, sb in zip(fa, fb):
        va = np.asarray(sa.data).ravel()
        vb = np.asarray(sb.data).ravel()
        va = va / max(float(np.linalg.norm(va)), 1e-12)
        vb = vb / max(float(np.linalg.norm(vb)), 1e-12)
        dists.append(float(np.linalg.norm(va - vb)))
    return float(np.mean(dists))


def diversity_score(gen, layouts: Sequence[Layout], k: int,
                    seed: int = 0) -> Dict[str, object]:
    """Mean pairwise style-to-style distance, aggregated over layouts.

    For each layout, ``k`` style draws produce ``k`` images; all pairwise
    proxy distances are averaged. Returns mean and std over layouts plus
    the per-layout values.
    """
    if k < 2:
        raise ad.ContractError(f"diversity needs k >= 2 styles, got {k}")
    per_layout = []
    for li, layout in enumerate(layouts):
        inst = layout if isinstance(layout, InstanceLayout) \
            else with_background(layout)
        images = []
        for j in range(k):
            master = int(np.random.SeedSequence([seed, li, j])
                         .generate_state(1)[0])
            codes = sample_styles(inst, gen.config.d_img, gen.config.d_obj,
                                  seed=master)
            images.append(np.asarray(gen.forward(inst, codes).image.data))
        dists = [diversity_proxy(images[a], images[b])
                 for a in range(k) for b in range(a + 1, k)]
        per_layout.append(float(np.mean(dists)))
    return {"mean": float(np.mean(per_layout)),
            "std": float(np.std(per_layout)),
            "per_layout": per_layout}


# --------------------------------------------------------------------------
# mask quality
# --------------------------------------------------------------------------

def mask_iou(mask_a: np.ndarray, mask_b: np.ndarray,
             threshold: float = 0.5) -> float:
    """Intersection over union after binarizing at ``threshold``.

    An empty union (both masks empty) counts as a perfect match.
    """
    a = np.asarray(mask_a, dtype=np.float64) >= threshold
    b = np.asarray(mask_b, dtype=np.float64) >= threshold
    if a.shape != b.shape:
        raise ad.ContractError(
            f"mask_iou: shape mismatch {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def _crop_resize(mask: np.ndarray, rect, size: int = 32) -> np.ndarray:
    r0, c0, r1, c1 = rect
    crop = np.asarray(mask, dtype=np.float64)[r0:r1, c0:c1]
    out = ad.bilinear_resize(ad.constant(crop), size, size)
    return np.asarray(out.data)


def mean_iou_report(gen, dataset: Dataset, seed: int = 0,
                    crop_size: int = 32) -> Dict[str, object]:
    """Generated-vs-ground-truth instance mask IoU over a dataset.

    Each foreground instance's generated soft mask and its ground-truth
    mask are cropped to the annotated box, resized to ``crop_size``
    square, binarized, and compared. Aggregated per category and overall
    (mean of per-category means).
    """
    cats = dataset.categories
    per_cat: Dict[str, List[float]] = {}
    R = dataset.resolution
    for idx, sample in enumerate(dataset.samples):
        if sample.layout.m == 0:
            continue
        inst = with_background(sample.layout)
        master = int(np.random.SeedSequence([seed, 300 + idx])
                     .generate_state(1)[0])
        codes = sample_styles(inst, gen.config.d_img, gen.config.d_obj,
                              seed=master)
        out = gen.forward(inst, codes)
        stack = np.asarray(out.masks.values.data)
        for i, box in enumerate(sample.layout.boxes):
            rect = box_to_pixels(box.box, R, R)
            got = _crop_resize(stack[i + 1], rect, crop_size)
            want = _crop_resize(sample.gt_masks[i], rect, crop_size)
            iou = mask_iou(got, want)
            per_cat.setdefault(cats.names[box.label], []).append(iou)
    per_category = {name: float(np.mean(v)) for name, v in per_cat.items()}
    values = list(per_category.values())
    return {"per_category": per_category,
            "mean": float(np.mean(values)) if values else 0.0,
            "n_instances": int(sum(len(v) for v in per_cat.values()))}


# --------------------------------------------------------------------------
# reconfigurability probes
# --------------------------------------------------------------------------

def _mask_stacks(gen, inst, codes) -> Tuple[np.ndarray, np.ndarray]:
    out = gen.forward(inst, codes)
    return np.asarray(out.masks.values.data), np.asarray(out.image.data)


class _ZeroAlpha:
    """Temporarily force every blend weight to the pure mask-path value."""

    def __init__(self, gen: Generator):
        self.gen = gen
        self.saved = None

    def __enter__(self):
        self.saved = [(l.alpha, l.alpha.data.copy())
                      for l in self.gen.isla_layers()]
        for alpha, _ in self.saved:
            alpha.data[...] = 0.0
        return self

    def __exit__(self, *exc):
        for alpha, val in self.saved:
            alpha.data[...] = val
        return False


def locality_probe(gen: Generator, layout: Layout, instance: int,
                   master_seed: int = 0, new_seed: int = 1
                   ) -> Dict[str, object]:
    """Effect of resampling one instance's style code.

    With the blend weights forced to zero the per-instance masks are a
    pure function of that instance's code, so the probe asserts bitwise
    invariance of every other instance's mask (and of all masks under an
    image-code reseed). With the model's own blend weights it reports how
    concentrated the pixel change is inside the instance's box; growing
    receptive fields make image-level invariance impossible to guarantee,
    so that part is descriptive.
    """
    inst = layout if isinstance(layout, InstanceLayout) \
        else with_background(layout)
    if not 0 <= instance < inst.n_instances:
        raise ad.ContractError(
            f"instance {instance} out of range for {inst.n_instances}")
    cfg = gen.config
    codes = sample_styles(inst, cfg.d_img, cfg.d_obj, seed=master_seed)
    moved = resample_instance(codes, instance, new_seed)
    reseed_img = styles_from_seeds(codes.image_seed + 1, codes.object_seeds,
                                   cfg.d_img, cfg.d_obj)

    with _ZeroAlpha(gen):
        base_masks, _ = _mask_stacks(gen, inst, codes)
        new_masks, _ = _mask_stacks(gen, inst, moved)
        img_masks, _ = _mask_stacks(gen, inst, reseed_img)
    others = [j for j in range(inst.n_instances) if j != instance]
    others_same = all(
        np.array_equal(base_masks[j], new_masks[j]) for j in others)
    target_changed = not np.array_equal(base_masks[instance],
                                        new_masks[instance])
    image_reseed_same = np.array_equal(base_masks, img_masks)

    _, img_a = _mask_stacks(gen, inst, codes)
    _, img_b = _mask_stacks(gen, inst, moved)
    delta = np.abs(img_b - img_a).mean(axis=0)
    R = cfg.resolution
    r0, c0, r1, c1 = box_to_pixels(inst.instances[instance].box, R, R)
    box_mask = np.zeros((R, R), dtype=bool)
    box_mask[r0:r1, c0:c1] = True
    inside = float(delta[box_mask].mean())
    outside = float(delta[~box_mask].mean()) if (~box_mask).any() else 0.0
    return {
        "instance": instance,
        "alpha_zero": {
            "other_masks_bit_identical": bool(others_same),
            "target_mask_changed": bool(target_changed),
            "image_reseed_masks_bit_identical": bool(image_reseed_same),
        },
        "full_model": {
            "inside_mean_abs_change": inside,
            "outside_mean_abs_change": outside,
            "concentration_ratio": inside / max(outside, 1e-12),
        },
    }


def layout_probe(gen: Generator, layout: Layout, edit,
                 master_seed: int = 0) -> Dict[str, object]:
    """Regenerate after a layout edit with style seeds held fixed.

    ``edit`` is one of ``("identity",)``, ``("move", i, new_box)`` with a
    foreground index, or ``("add", LabeledBox)``. Per-instance codes are
    derived from ``master_seed``, which keeps existing instances' codes
    stable across the edit.
    """
    inst = with_background(layout)
    cfg = gen.config
    codes = sample_styles(inst, cfg.d_img, cfg.d_obj, seed=master_seed)
    base_masks, base_img = _mask_stacks(gen, inst, codes)
    R = cfg.resolution

    kind = edit[0]
    if kind == "identity":
        masks2, img2 = _mask_stacks(gen, inst, codes)
        return {"edit": "identity",
                "image_bit_identical": bool(np.array_equal(base_img, img2)),
                "masks_bit_identical": bool(np.array_equal(base_masks,
                                                           masks2))}
    if kind == "move":
        _, i, new_box = edit
        if not 0 <= i < layout.m:
            raise ad.ContractError(f"no foreground box {i} to move")
        boxes = list(layout.boxes)
        boxes[i] = LabeledBox(label=boxes[i].label,
                              box=tuple(float(v) for v in new_box),
                              confidence=boxes[i].confidence)
        edited = with_background(Layout(lattice=layout.lattice,
                                        boxes=tuple(boxes),
                                        categories=layout.categories))
        masks2, _img2 = _mask_stacks(gen, edited, codes)
        unedited = [mask_iou(base_masks[j + 1], masks2[j + 1])
                    for j in range(layout.m) if j != i]

        def centroid(mask):
            w = np.maximum(mask, 0.0)
            tot = w.sum()
            if tot <= 0:
                return 0.0, 0.0
            yy, xx = np.mgrid[0:mask.shape[0], 0:mask.shape[1]]
            return float((w * yy).sum() / tot), float((w * xx).sum() / tot)

        cy0, cx0 = centroid(base_masks[i + 1])
        cy1, cx1 = centroid(masks2[i + 1])
        old = layout.boxes[i].box
        box_dx = ((new_box[0] + new_box[2]) - (old[0] + old[2])) / 2 * R
        box_dy = ((new_box[1] + new_box[3]) - (old[1] + old[3])) / 2 * R
        mask_dy, mask_dx = cy1 - cy0, cx1 - cx0
        sign_ok = True
        for b, m in ((box_dy, mask_dy), (box_dx, mask_dx)):
            if abs(b) > 0.5 and np.sign(b) != np.sign(m):
                sign_ok = False
        return {"edit": "move", "instance": i,
                "unedited_mask_iou": unedited,
                "box_delta_px": [box_dy, box_dx],
                "mask_centroid_delta_px": [mask_dy, mask_dx],
                "direction_sign_match": bool(sign_ok)}
    if kind == "add":
        _, new_box = edit
        edited = with_background(Layout(
            lattice=layout.lattice, boxes=tuple(layout.boxes) + (new_box,),
            categories=layout.categories))
        codes2 = sample_styles(edited, cfg.d_img, cfg.d_obj,
                               seed=master_seed)
        with _ZeroAlpha(gen):
            a, _ = _mask_stacks(gen, inst, codes)
            b, _ = _mask_stacks(gen, edited, codes2)
        same = all(np.array_equal(a[j], b[j])
                   for j in range(inst.n_instances))
        return {"edit": "add",
                "existing_masks_bit_identical_alpha_zero": bool(same)}
    raise ad.ContractError(f"unknown edit kind '{kind}'")


# --------------------------------------------------------------------------
# rendering
# --------------------------------------------------------------------------

_PALETTE = np.array([
    [90, 90, 90],      # background
    [220, 50, 47],     # circle
    [64, 160, 43],     # rect
    [38, 110, 220],    # triangle
    [203, 75, 22], [108, 113, 196], [181, 137, 0], [42, 161, 152],
], dtype=np.uint8)


def category_palette(n: int) -> np.ndarray:
    """(n, 3) uint8 colors; fixed so every surface uses the same coding."""
    reps = int(np.ceil(n / len(_PALETTE)))
    return np.tile(_PALETTE, (reps, 1))[:n]


def label_map_to_rgb(label_map: np.ndarray, n_categories: int) -> np.ndarray:
    pal = category_palette(n_categories)
    return pal[np.asarray(label_map, dtype=np.int64)]


def _to_unit(img: np.ndarray) -> np.ndarray:
    return np.clip((np.transpose(img, (1, 2, 0)) + 1.0) / 2.0, 0.0, 1.0)


def _draw_boxes(ax, layout: Layout, n_categories: int) -> None:
    pal = category_palette(n_categories) / 255.0
    for b in layout.boxes:
        x0, y0, x1, y1 = b.box
        ax.add_patch(mpatches.Rectangle(
            (x0, y0), x1 - x0, y1 - y0, fill=False, lw=1.5,
            edgecolor=pal[b.label]))
    ax.set_xlim(0, 1)
    ax.set_ylim(1, 0)
    ax.set_aspect("equal")


def contact_sheet(path, gen, dataset: Dataset, seed: int = 0,
                  max_rows: int = 8) -> None:
    """Grid figure: layout boxes, generated image, label map, gt image."""
    rows = min(len(dataset.samples), max_rows)
    d_ell = dataset.categories.d_ell
    fig, axes = plt.subplots(rows, 4, figsize=(8, 2 * rows), squeeze=False)
    for r in range(rows):
        sample = dataset.samples[r]
        inst = with_background(sample.layout)
        master = int(np.random.SeedSequence([seed, 300 + r])
                     .generate_state(1)[0])
        codes = sample_styles(inst, gen.config.d_img, gen.config.d_obj,
                              seed=master)
        out = gen.forward(inst, codes)
        _draw_boxes(axes[r][0], sample.layout, d_ell)
        axes[r][1].imshow(_to_unit(np.asarray(out.image.data)))
        axes[r][2].imshow(label_map_to_rgb(out.argmax_map, d_ell))
        axes[r][3].imshow(_to_unit(sample.image))
        for ax in axes[r]:
            ax.set_xticks([])
            ax.set_yticks([])
    for title, ax in zip(("layout", "generated", "label map", "target"),
                         axes[0]):
        ax.set_title(title, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def plot_metrics(ndjson_path, out_path) -> None:
    """Loss and score curves from a newline-delimited metric stream."""
    records = []
    with open(ndjson_path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    if not records:
        raise ad.ContractError(f"no metric records in {ndjson_path}")
    steps = [r["step"] for r in records]
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.2))
    axes[0].plot(steps, [r["d_loss"] for r in records], label="d_loss")
    axes[0].plot(steps, [r["g_loss"] for r in records], label="g_loss")
    axes[0].set_title("losses")
    axes[1].plot(steps, [r["recon"] for r in records], label="recon")
    axes[1].plot(steps, [r["percep"] for r in records], label="percep")
    axes[1].set_title("reconstruction")
    axes[2].plot(steps, [r["p_img_real"] for r in records], label="real")
    axes[2].plot(steps, [r["p_img_fake"] for r in records], label="fake")
    axes[2].set_title("image scores")
    for ax in axes:
        ax.legend(fontsize=8)
        ax.set_xlabel("step")
    fig.tight_layout()
    fig.savefig(out_path, dpi=110)
    plt.close(fig)


# --------------------------------------------------------------------------
# full report
# --------------------------------------------------------------------------

def evaluate_model(gen, dataset: Dataset, seed: int = 0,
                   n_diversity_layouts: int = 8, k_styles: int = 4
                   ) -> Dict[str, object]:
    """All metric blocks as one JSON-serializable dictionary."""
    layouts = [s.layout for s in dataset.samples if s.layout.m >= 1]
    div_layouts = layouts[:n_diversity_layouts]
    probe_layout = next((s.layout for s in dataset.samples
                         if s.layout.m >= 2), layouts[0])
    first = probe_layout.boxes[0].box
    shift = 0.15 if first[2] <= 0.8 else -0.15
    moved = (first[0] + shift, first[1], first[2] + shift, first[3])
    report = {
        "resolution": dataset.resolution,
        "n_samples": len(dataset.samples),
        "mask_iou": mean_iou_report(gen, dataset, seed=seed),
        "diversity": diversity_score(gen, div_layouts, k=k_styles,
                                     seed=seed),
        "locality": locality_probe(gen, probe_layout, instance=1,
                                   master_seed=seed, new_seed=seed + 1),
        "layout_consistency": layout_probe(
            gen, probe_layout, ("move", 0, moved), master_seed=seed),
        "inception_score": NOT_AVAILABLE,
        "fid": NOT_AVAILABLE,
    }
    return report


def write_report(out_dir, gen, dataset: Dataset, seed: int = 0,
                 metrics_path=None) -> Dict[str, object]:
    """Write report.json plus rendered figures into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = evaluate_model(gen, dataset, seed=seed)
    (out / "report.json").write_text(
        json.dumps(report, indent=2, sort_keys=True) + "\n",
        encoding="utf-8")
    contact_sheet(out / "contact_sheet.png", gen, dataset, seed=seed)
    if metrics_path is not None:
        plot_metrics(metrics_path, out / "metric_curves.png")
    return report
