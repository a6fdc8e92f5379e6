"""Instance-sensitive, layout-aware feature recalibration.

Feature maps are standardized with batch statistics, then rescaled and
shifted per pixel. The per-pixel scale and shift fields are assembled from
per-instance parameters: each instance's label embedding and style code are
projected to one (beta, gamma) row per channel, and those rows are spread
across the lattice through soft instance masks, averaged where several boxes
overlap. Masks come from two sources, a per-instance mask generator working
from the joint label-style encoding, and a map derived from the evolving
feature tensor clipped to the boxes; a learnable scalar blends them.

Everything here operates on a single sample (one layout); batching is the
caller's concern except for standardization, which by contract uses the
statistics of the full batch.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layouts import InstanceLayout, occupancy_map
from .nn import Conv2d, Linear

__all__ = [
    "InstanceMaskStack", "AffineTable", "IslaParams",
    "MaskGenerator", "IslaLayer",
    "embed_labels", "joint_encode", "place_masks", "masks_from_features",
    "blend_masks", "compose_isla", "standardize", "apply_affine",
    "isla_apply", "argmax_label_map", "instance_argmax_labels",
]


@dataclass
class InstanceMaskStack:
    """Per-instance soft masks (n_instances, H, W) with provenance tag."""

    values: Tensor
    source: str  # "generated" | "feature" | "blended"

    @property
    def shape(self):
        return self.values.shape


@dataclass
class AffineTable:
    """Per-instance modulation rows: beta and gamma, each (n_instances, C)."""

    beta: Tensor
    gamma: Tensor


@dataclass
class IslaParams:
    """Per-pixel affine fields for one sample, plus the occupancy count."""

    gamma: Tensor  # (C, H, W)
    beta: Tensor   # (C, H, W)
    occupancy: np.ndarray


def embed_labels(labels, W: Tensor) -> Tensor:
    """Row per instance from the shared label embedding table."""
    return ad.index_rows(W, np.asarray(labels, dtype=np.int64))


def joint_encode(embedding: Tensor, z_obj: Tensor) -> Tensor:
    """Concatenate label embedding and per-instance style codes row-wise."""
    if embedding.shape[0] != z_obj.shape[0]:
        raise ad.DimensionError(
            f"joint_encode: {embedding.shape[0]} embeddings vs "
            f"{z_obj.shape[0]} style rows")
    return ad.concat([embedding, z_obj], axis=1)


class MaskGenerator:
    """Per-instance mask net: one row of the joint encoding to an s x s mask.

    A fully-connected layer maps the row to a 4x4 feature block, then
    upsample-conv-relu stages double the side up to ``s``, and a final conv
    plus sigmoid produces the mask. Rows are processed as a batch; every
    output depends only on its own row. The final bias starts positive so
    initial masks roughly fill their boxes instead of vanishing.
    """

    def __init__(self, d_in: int, s: int = 32, c0: int = 16,
                 rng: np.random.Generator = None, dtype=np.float32,
                 final_bias: float = 1.0):
        if rng is None:
            rng = np.random.default_rng(0)
        stages = int(np.log2(s / 4))
        if s != 4 * 2 ** stages or stages < 1:
            raise ad.ContractError(f"mask size {s} not 4 * 2^k with k >= 1")
        self.s = s
        self.c0 = c0
        self.fc = Linear(d_in, 16 * c0, rng, dtype=dtype)
        self.convs = [Conv2d(c0, c0, rng, dtype=dtype) for _ in range(stages)]
        self.out_conv = Conv2d(c0, 1, rng, dtype=dtype, bias_init=final_bias)

    def __call__(self, S: Tensor, sn_update: bool = False) -> Tensor:
        n = S.shape[0]
        h = ad.reshape(self.fc(S, sn_update), (n, self.c0, 4, 4))
        for conv in self.convs:
            h = ad.relu(conv(ad.upsample2x_nearest(h), sn_update))
        m = ad.sigmoid(self.out_conv(h, sn_update))
        return ad.reshape(m, (n, self.s, self.s))

    def layers(self):
        yield "fc", self.fc
        for i, c in enumerate(self.convs):
            yield f"conv{i}", c
        yield "out", self.out_conv


class IslaLayer:
    """Per-layer parameters: the projection to affine rows and the blend.

    ``project`` maps the joint encoding (n, d_s) to (n, 2C); the first C
    columns are beta rows, the second C gamma rows. ``alpha`` blends
    generated and feature-derived masks and starts at 0, so training begins
    trusting the generated masks alone.
    """

    def __init__(self, d_s: int, channels: int, rng: np.random.Generator,
                 dtype=np.float32):
        self.channels = channels
        self.project = Linear(d_s, 2 * channels, rng, dtype=dtype, bias=False)
        self.alpha = ad.tensor(np.zeros((), dtype=dtype), requires_grad=True)

    def table(self, S: Tensor, sn_update: bool = False) -> AffineTable:
        t = self.project(S, sn_update)
        c = self.channels
        return AffineTable(beta=t[:, :c], gamma=t[:, c:])

    def layers(self):
        yield "project", self.project


def place_masks(masks: Tensor, inst: InstanceLayout, H: int,
                W: int) -> InstanceMaskStack:
    """Resize each instance's mask into its pixel rect on a zero canvas."""
    if masks.shape[0] != inst.n_instances:
        raise ad.DimensionError(
            f"place_masks: {masks.shape[0]} masks for "
            f"{inst.n_instances} instances")
    slices = []
    for i, rect in enumerate(inst.pixel_rects(H, W)):
        r0, c0, r1, c1 = rect
        patch = ad.bilinear_resize(masks[i], r1 - r0, c1 - c0)
        slices.append(ad.place_patch(patch, (H, W), rect))
    return InstanceMaskStack(ad.stack(slices), "generated")


def masks_from_features(label_map: Tensor, inst: InstanceLayout
                        ) -> InstanceMaskStack:
    """Instance slices of a (d_ell, H, W) sigmoid map, clipped to boxes.

    Each instance reads the channel of its own category; values inside the
    pixel rect are kept, everything outside is exactly zero. Same-label
    instances share a channel and differ only by their rects.
    """
    d_ell, H, W = label_map.shape
    slices = []
    for b, rect in zip(inst.instances, inst.pixel_rects(H, W)):
        r0, c0, r1, c1 = rect
        ind = np.zeros((H, W), dtype=label_map.dtype)
        ind[r0:r1, c0:c1] = 1.0
        slices.append(ad.mul(label_map[b.label], ad.constant(ind)))
    return InstanceMaskStack(ad.stack(slices), "feature")


def blend_masks(m_s: InstanceMaskStack, m_f: InstanceMaskStack,
                alpha: Tensor) -> InstanceMaskStack:
    """(1 - alpha) * generated + alpha * feature-derived."""
    if m_s.shape != m_f.shape:
        raise ad.DimensionError(
            f"blend_masks: shapes {m_s.shape} vs {m_f.shape}")
    v = ad.add(ad.mul(m_s.values, ad.sub(1.0, alpha)),
               ad.mul(m_f.values, alpha))
    return InstanceMaskStack(v, "blended")


def compose_isla(M: InstanceMaskStack, table: AffineTable,
                 occupancy: np.ndarray) -> IslaParams:
    """Spread per-instance affine rows across the lattice through masks.

    gamma[c,h,w] = sum_i M[i,h,w] * T_gamma[i,c] / D[h,w], where D is the
    mask sum at pixels covered by more than one box and 1 elsewhere.
    The division is guarded at 1e-8 for pixels where all covering masks
    are (numerically) zero.
    """
    n, H, W = M.shape
    C = table.gamma.shape[1]
    flat = ad.reshape(M.values, (n, H * W))
    num_g = ad.reshape(ad.matmul(ad.transpose(table.gamma), flat), (C, H, W))
    num_b = ad.reshape(ad.matmul(ad.transpose(table.beta), flat), (C, H, W))

    multi = (occupancy > 1).astype(M.values.dtype)
    mask_sum = ad.sum_(M.values, axis=0)
    denom = ad.add(ad.mul(mask_sum, ad.constant(multi)),
                   ad.constant(1.0 - multi))
    denom = ad.reshape(ad.clip_min(denom, 1e-8), (1, H, W))
    return IslaParams(gamma=ad.div(num_g, denom), beta=ad.div(num_b, denom),
                      occupancy=occupancy)


def standardize(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Subtract channel means and divide by channel stds of the full batch."""
    c = x.shape[1]
    mu, sigma = ad.batch_stats(x, eps=eps)
    return ad.div(ad.sub(x, ad.reshape(mu, (1, c, 1, 1))),
                  ad.reshape(sigma, (1, c, 1, 1)))


def apply_affine(x_hat: Tensor, params: Sequence[IslaParams]) -> Tensor:
    """Per-sample, per-pixel gamma * x_hat + beta."""
    if len(params) != x_hat.shape[0]:
        raise ad.DimensionError(
            f"apply_affine: {len(params)} param sets for batch "
            f"{x_hat.shape[0]}")
    gam = ad.stack([p.gamma for p in params])
    bet = ad.stack([p.beta for p in params])
    return ad.add(ad.mul(gam, x_hat), bet)


def isla_apply(x: Tensor, params: Sequence[IslaParams],
               eps: float = 1e-5) -> Tensor:
    """Standardize over the batch, then recalibrate per sample."""
    return apply_affine(standardize(x, eps=eps), params)


def argmax_label_map(stack: np.ndarray) -> np.ndarray:
    """Per-pixel index of the strongest channel; ties go to the lowest."""
    arr = np.asarray(stack)
    if arr.ndim != 3:
        raise ad.DimensionError(f"argmax_label_map: need (k,H,W), "
                                f"got {arr.shape}")
    return np.argmax(arr, axis=0).astype(np.int64)


def instance_argmax_labels(mask_stack: np.ndarray,
                           labels: Sequence[int]) -> np.ndarray:
    """Category per pixel: the label of the argmax instance at each cell."""
    winner = argmax_label_map(mask_stack)
    return np.asarray(labels, dtype=np.int64)[winner]
