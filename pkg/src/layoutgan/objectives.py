"""Losses, initialization, spectral normalization, and the optimizer.

The adversarial objective is the hinge form: real scores are pushed above +1,
fake scores below -1, with an image-level term weighted by ``lam`` plus the
mean of per-object terms. A confidence-weighted variant covers training on
detected (rather than annotated) boxes; with unit confidences it is
bit-identical to the unweighted form.

Also here: the orthogonal initializer used for every weight matrix, spectral
normalization by one-step power iteration with persistent state, Adam, and
the frozen random-feature extractor standing in for a pretrained perceptual
network (declared proxy, not equivalent to one).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = [
    "LossConfig", "AdamState", "FrozenExtractor",
    "hinge_term", "combined_adv", "semi_weighted_adv",
    "generator_adv_score", "l1_mean", "adam_step",
    "orthogonal_init", "conv_orthogonal", "spectral_normalize",
    "estimate_sigma_max",
]


@dataclass
class LossConfig:
    lam: float = 0.1           # image/object trade-off
    recon_weight: float = 1.0
    percep_weight: float = 1.0
    tau: float = 0.5           # confidence floor for detected boxes

    def __post_init__(self):
        if min(self.lam, self.recon_weight, self.percep_weight) < 0:
            raise ad.ContractError("loss weights must be >= 0")


# --------------------------------------------------------------------------
# adversarial terms
# --------------------------------------------------------------------------

def hinge_term(p: Tensor, is_real: bool) -> Tensor:
    """max(0, 1 - p) for real scores, max(0, 1 + p) for fake ones."""
    if is_real:
        return ad.relu(ad.sub(1.0, p))
    return ad.relu(ad.add(1.0, p))


def semi_weighted_adv(p_img: Tensor, p_obj: Sequence[Tensor],
                      confidences: Optional[Sequence[float]],
                      lam: float, is_real: bool,
                      tau: float = 0.5) -> Tensor:
    """lam * image hinge + (1/m) sum of confidence-weighted object hinges.

    ``confidences=None`` means fully annotated (weight 1 everywhere, no
    multiplication performed). Confidences below ``tau`` are a caller bug:
    detected boxes must be filtered before entering the loss.
    """
    m = len(p_obj)
    if confidences is not None:
        if len(confidences) != m:
            raise ad.DimensionError(
                f"{len(confidences)} confidences for {m} object scores")
        for c in confidences:
            if c < tau:
                raise ad.ContractError(
                    f"confidence {c} below threshold {tau}; filter first")
    img_term = ad.mul(hinge_term(p_img, is_real), lam)
    if m == 0:
        return img_term
    total = None
    for i, p in enumerate(p_obj):
        t = hinge_term(p, is_real)
        if confidences is not None:
            t = ad.mul(t, float(confidences[i]))
        total = t if total is None else ad.add(total, t)
    return ad.add(img_term, ad.mul(total, 1.0 / m))


def combined_adv(p_img: Tensor, p_obj: Sequence[Tensor], lam: float,
                 is_real: bool) -> Tensor:
    """Unweighted adversarial combination (all boxes fully annotated)."""
    return semi_weighted_adv(p_img, p_obj, None, lam, is_real)


def generator_adv_score(p_img: Tensor, p_obj: Sequence[Tensor],
                        lam: float) -> Tensor:
    """lam * p_img + mean(p_obj): the score the generator maximizes."""
    total = ad.mul(p_img, lam)
    if p_obj:
        s = None
        for p in p_obj:
            s = p if s is None else ad.add(s, p)
        total = ad.add(total, ad.mul(s, 1.0 / len(p_obj)))
    return total


def l1_mean(a: Tensor, b: Tensor) -> Tensor:
    """Mean absolute difference (per-element average of the L1 distance)."""
    return ad.mean_(ad.absolute(ad.sub(a, b)))


# --------------------------------------------------------------------------
# initialization
# --------------------------------------------------------------------------

def orthogonal_init(shape, rng: np.random.Generator,
                    gain: float = 1.0) -> np.ndarray:
    """Orthogonal matrix of the given 2-D shape (float64).

    The smaller side is orthonormal: rows if rows <= cols, else columns.
    Signs fixed from the QR factor so the result is deterministic.
    """
    rows, cols = shape
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q


def conv_orthogonal(shape, rng: np.random.Generator,
                    gain: float = 1.0) -> np.ndarray:
    """Orthogonal init for an (out, in, kh, kw) kernel via 2-D reshape."""
    out, cin, kh, kw = shape
    flat = orthogonal_init((out, cin * kh * kw), rng, gain=gain)
    return flat.reshape(shape)


# --------------------------------------------------------------------------
# spectral normalization
# --------------------------------------------------------------------------

def _l2_normalize(v: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    return v / max(float(np.linalg.norm(v)), eps)


def spectral_normalize(w: Tensor, u: np.ndarray, n_iters: int = 1,
                       update: bool = True):
    """Divide ``w`` by its estimated largest singular value.

    ``u`` is the persistent left-singular-vector estimate (shape = first axis
    of ``w``). One power iteration per call refines it when ``update`` is
    true; inference passes ``update=False`` for a pure function of (w, u).
    Returns ``(w_normalized, u_new)``; the sigma estimate stays in the graph,
    so gradients flow through the division. Guarded for zero weights.
    """
    out_dim = w.shape[0]
    rest = w.size // out_dim
    w2d = w.data.reshape(out_dim, rest)
    if u.shape != (out_dim,):
        raise ad.DimensionError(
            f"power-iteration state shape {u.shape} vs weight {w.shape}")
    un = u
    if update:
        for _ in range(n_iters):
            v = _l2_normalize(w2d.T @ un)
            un = _l2_normalize(w2d @ v)
    else:
        # pure in (w, u): sigma becomes ||w^T u||, whose exact gradient is
        # the u v^T the graph computes with u, v held constant
        v = _l2_normalize(w2d.T @ un)
    # sigma = u^T W v, computed in-graph so d(w/sigma)/dw is complete
    wt = ad.reshape(w, (out_dim, rest))
    ut = ad.constant(un.reshape(1, out_dim).astype(w.dtype))
    vt = ad.constant(v.reshape(rest, 1).astype(w.dtype))
    sigma = ad.clip_min(ad.matmul(ad.matmul(ut, wt), vt), 1e-12)
    wbar = ad.div(w, sigma)
    return wbar, un


def estimate_sigma_max(w: np.ndarray, n_iters: int = 50,
                       seed: int = 0) -> float:
    """Independent power-method estimate of the largest singular value."""
    out_dim = w.shape[0]
    w2d = w.reshape(out_dim, -1).astype(np.float64)
    rng = np.random.default_rng(seed)
    u = _l2_normalize(rng.standard_normal(out_dim))
    for _ in range(n_iters):
        v = _l2_normalize(w2d.T @ u)
        u = _l2_normalize(w2d @ v)
    return float(u @ w2d @ v)


# --------------------------------------------------------------------------
# optimizer
# --------------------------------------------------------------------------

@dataclass
class AdamState:
    """Per-parameter moment accumulators plus the shared step counter."""

    t: int = 0
    m1: Dict[str, np.ndarray] = field(default_factory=dict)
    m2: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Dict[str, Tensor], state: AdamState,
              lr: float = 1e-4, beta1: float = 0.0, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, in place. Missing grads count as 0."""
    state.t += 1
    t = state.t
    for name, p in params.items():
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ad.DimensionError(
                f"adam_step: grad shape {g.shape} vs param "
                f"'{name}' {p.data.shape}")
        m1 = state.m1.get(name)
        if m1 is None:
            m1 = np.zeros_like(p.data)
            state.m1[name] = m1
            state.m2[name] = np.zeros_like(p.data)
        m2 = state.m2[name]
        m1 *= beta1
        m1 += (1.0 - beta1) * g
        m2 *= beta2
        m2 += (1.0 - beta2) * (g * g)
        mhat = m1 / (1.0 - beta1 ** t)
        vhat = m2 / (1.0 - beta2 ** t)
        p.data -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.dtype)


# --------------------------------------------------------------------------
# frozen feature extractor (perceptual-loss proxy)
# --------------------------------------------------------------------------

class FrozenExtractor:
    """Fixed random conv net used for the perceptual term and diversity.

    Three conv-relu-pool stages with orthogonally initialized, never-updated
    kernels from a fixed seed. This is a stand-in for a pretrained perceptual
    network; its features are untrained and carry no semantic calibration.
    """

    SEED = 7002

    def __init__(self, in_channels: int = 3, widths=(8, 16, 32),
                 dtype=np.float32, seed: int = SEED):
        rng = np.random.default_rng(seed)
        self.kernels = []
        self.dtype = np.dtype(dtype)
        cin = in_channels
        for width in widths:
            k = conv_orthogonal((width, cin, 3, 3), rng).astype(dtype)
            self.kernels.append(ad.constant(k))
            cin = width

    def stage_features(self, x: Tensor) -> List[Tensor]:
        """Per-stage feature maps for an NCHW image batch."""
        feats = []
        h = x
        for k in self.kernels:
            h = ad.avg_pool2d(ad.relu(ad.conv2d(h, k, padding=1)), 2)
            feats.append(h)
        return feats

    def flat_features(self, x: Tensor) -> Tensor:
        """All stages flattened and concatenated per sample: (N, D)."""
        n = x.shape[0]
        parts = [ad.reshape(f, (n, f.size // n))
                 for f in self.stage_features(x)]
        return ad.concat(parts, axis=1)

    def perceptual_l1(self, a: Tensor, b: Tensor) -> Tensor:
        """Mean absolute feature distance between two image batches."""
        return l1_mean(self.flat_features(a), self.flat_features(b))
