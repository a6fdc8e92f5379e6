"""Parameterized layers shared by the generator and discriminator.

Each layer owns its weight tensors (orthogonally initialized) and, when
spectrally normalized, a persistent power-iteration vector. Forward passes
take ``sn_update``: training refreshes the power-iteration state once per
use, inference and gradient checking leave it untouched so the layer is a
pure function of its parameters.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .objectives import (conv_orthogonal, orthogonal_init,
                         spectral_normalize)

__all__ = ["Linear", "Conv2d"]

SN_WARMUP_ITERS = 30


def _warm_u(w_data: np.ndarray, rng: np.random.Generator,
            iters: int = SN_WARMUP_ITERS) -> np.ndarray:
    """Near-converged power-iteration state for a fresh weight."""
    out_dim = w_data.shape[0]
    w2d = w_data.reshape(out_dim, -1)
    u = rng.standard_normal(out_dim)
    u /= max(float(np.linalg.norm(u)), 1e-12)
    for _ in range(iters):
        v = w2d.T @ u
        v /= max(float(np.linalg.norm(v)), 1e-12)
        u = w2d @ v
        u /= max(float(np.linalg.norm(u)), 1e-12)
    return u.astype(w_data.dtype)


class Linear:
    """Fully-connected layer; weight stored (d_in, d_out), y = x @ w + b."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator,
                 dtype=np.float32, spectral: bool = True, bias: bool = True,
                 gain: float = 1.0):
        self.w = ad.tensor(
            orthogonal_init((d_in, d_out), rng, gain=gain).astype(dtype),
            requires_grad=True)
        self.b = ad.tensor(np.zeros(d_out, dtype=dtype),
                           requires_grad=True) if bias else None
        self.spectral = spectral
        self.u = _warm_u(self.w.data, rng) if spectral else None

    def weight(self, sn_update: bool = False) -> Tensor:
        if not self.spectral:
            return self.w
        wbar, u = spectral_normalize(self.w, self.u, update=sn_update)
        if sn_update:
            self.u = u
        return wbar

    def __call__(self, x: Tensor, sn_update: bool = False) -> Tensor:
        y = ad.matmul(x, self.weight(sn_update))
        if self.b is not None:
            y = ad.add(y, self.b)
        return y

    def params(self):
        out = {"w": self.w}
        if self.b is not None:
            out["b"] = self.b
        return out

    def sn_state(self):
        return {"u": self.u} if self.spectral else {}

    def load_sn_state(self, state):
        if self.spectral:
            self.u = np.asarray(state["u"], dtype=self.w.dtype)


class Conv2d:
    """3x3 (by default) convolution with same-padding and optional bias."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator,
                 k: int = 3, stride: int = 1, padding=None,
                 dtype=np.float32, spectral: bool = True, bias: bool = True,
                 bias_init: float = 0.0, gain: float = 1.0):
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.w = ad.tensor(
            conv_orthogonal((c_out, c_in, k, k), rng, gain=gain).astype(dtype),
            requires_grad=True)
        self.b = ad.tensor(np.full(c_out, bias_init, dtype=dtype),
                           requires_grad=True) if bias else None
        self.spectral = spectral
        self.u = _warm_u(self.w.data, rng) if spectral else None

    def weight(self, sn_update: bool = False) -> Tensor:
        if not self.spectral:
            return self.w
        wbar, u = spectral_normalize(self.w, self.u, update=sn_update)
        if sn_update:
            self.u = u
        return wbar

    def __call__(self, x: Tensor, sn_update: bool = False) -> Tensor:
        y = ad.conv2d(x, self.weight(sn_update), stride=self.stride,
                      padding=self.padding)
        if self.b is not None:
            c = self.b.shape[0]
            y = ad.add(y, ad.reshape(self.b, (1, c, 1, 1)))
        return y

    def params(self):
        out = {"w": self.w}
        if self.b is not None:
            out["b"] = self.b
        return out

    def sn_state(self):
        return {"u": self.u} if self.spectral else {}

    def load_sn_state(self, state):
        if self.spectral:
            self.u = np.asarray(state["u"], dtype=self.w.dtype)
