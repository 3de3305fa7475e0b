"""Shared test fixtures and independent oracle implementations.

The oracles here deliberately avoid the package's vectorized code paths:
convolutions are quadruple loops, SSIM walks windows pixel by pixel, and the
attention identity is evaluated as straight-line scalar arithmetic.
"""

from __future__ import annotations

import math

import numpy as np
import pytest

from bioatt.autodiff import Tensor


# ---------------------------------------------------------------------------
# convolution oracles (naive loops)
# ---------------------------------------------------------------------------


def direct_conv2d(x: np.ndarray, w: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Valid cross-correlation via explicit summation."""
    b, c, h, width = x.shape
    f, _, kh, kw = w.shape
    out = np.zeros((b, f, h - kh + 1, width - kw + 1), dtype=np.float64)
    for bi in range(b):
        for fi in range(f):
            for i in range(out.shape[2]):
                for j in range(out.shape[3]):
                    acc = 0.0
                    for ci in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                acc += x[bi, ci, i + u, j + v] * w[fi, ci, u, v]
                    out[bi, fi, i, j] = acc + bias[fi]
    return out


def direct_conv_transpose2d(x: np.ndarray, w: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Transposed convolution by scattering each input pixel through the kernel."""
    b, f, h, width = x.shape
    _, c, kh, kw = w.shape
    out = np.zeros((b, c, h + kh - 1, width + kw - 1), dtype=np.float64)
    for bi in range(b):
        for fi in range(f):
            for i in range(h):
                for j in range(width):
                    for ci in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                out[bi, ci, i + u, j + v] += x[bi, fi, i, j] * w[fi, ci, u, v]
    out += bias[None, :, None, None]
    return out


# ---------------------------------------------------------------------------
# SSIM oracle (literal sliding window)
# ---------------------------------------------------------------------------


def sliding_window_ssim(a: np.ndarray, b: np.ndarray, data_range: float,
                        window: int = 11, sigma: float = 1.5,
                        k1: float = 0.01, k2: float = 0.03) -> float:
    half = (window - 1) / 2.0
    g1 = np.array([math.exp(-((i - half) ** 2) / (2 * sigma * sigma)) for i in range(window)])
    kern = np.outer(g1, g1)
    kern /= kern.sum()
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    values = []
    for i in range(a.shape[0] - window + 1):
        for j in range(a.shape[1] - window + 1):
            wa = a[i:i + window, j:j + window]
            wb = b[i:i + window, j:j + window]
            mu_a = float((kern * wa).sum())
            mu_b = float((kern * wb).sum())
            var_a = float((kern * wa * wa).sum()) - mu_a * mu_a
            var_b = float((kern * wb * wb).sum()) - mu_b * mu_b
            cov = float((kern * wa * wb).sum()) - mu_a * mu_b
            num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
            den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
            values.append(num / den)
    return float(np.mean(values))


# ---------------------------------------------------------------------------
# organ-gate oracle (straight-line evaluation of the pooling/conv/sigmoid/
# prior-weighting/fusion chain)
# ---------------------------------------------------------------------------


def straight_line_organ_gate(x: np.ndarray, weight: np.ndarray, bias: np.ndarray,
                             prior: np.ndarray):
    """Returns (x_out, fused_map) computed with scalar loops only."""
    b, c, h, w = x.shape
    n, _, k, _ = weight.shape
    pad = (k - 1) // 2
    pooled = np.zeros((b, 2, h, w))
    for bi in range(b):
        for i in range(h):
            for j in range(w):
                vals = [x[bi, ci, i, j] for ci in range(c)]
                pooled[bi, 0, i, j] = sum(vals) / c
                pooled[bi, 1, i, j] = max(vals)
    padded = np.zeros((b, 2, h + 2 * pad, w + 2 * pad))
    padded[:, :, pad:pad + h, pad:pad + w] = pooled
    fused = np.zeros((b, 1, h, w))
    for bi in range(b):
        for i in range(h):
            for j in range(w):
                total = 0.0
                for ni in range(n):
                    acc = bias[ni]
                    for ci in range(2):
                        for u in range(k):
                            for v in range(k):
                                acc += padded[bi, ci, i + u, j + v] * weight[ni, ci, u, v]
                    total += prior[ni] / (1.0 + math.exp(-acc))
                fused[bi, 0, i, j] = total
    return x * fused, fused


# ---------------------------------------------------------------------------
# finite-difference-friendly network instances
# ---------------------------------------------------------------------------


def randomize_for_gradcheck(model, rng: np.random.Generator) -> None:
    """Re-draw parameters so finite differences stay valid.

    Central differences with step 1e-3 are only correct where the loss is
    smooth across the whole step.  Backbone biases are staggered to +/-2-ish
    so every ReLU input sits far from its kink, decoder biases avoid the skip
    bands, and channel 0 of the layers feeding an attention gate dominates
    the channel max by a wide margin.  Weights stay small so activations
    fluctuate well below those margins.
    """
    w_std = 0.012
    for i, layer in enumerate(model.enc, start=1):
        c_out = layer.weight.shape[0]
        layer.weight.data = rng.normal(0.0, w_std, size=layer.weight.shape).astype(layer.weight.dtype)
        signs = np.where(rng.random(c_out) < 0.5, -1.0, 1.0)
        layer.bias.data = (signs * (1.8 + 0.25 * (np.arange(c_out) % 5))).astype(layer.bias.dtype)
        if i in (3, 5):  # feeds an attention gate: make channel 0 the decisive max
            layer.weight.data[0] = np.abs(layer.weight.data[0]) + 0.02
            layer.bias.data[0] = 3.2
    for layer in model.dec:
        c_out = layer.weight.shape[1]
        layer.weight.data = rng.normal(0.0, w_std, size=layer.weight.shape).astype(layer.weight.dtype)
        picks = rng.random(c_out) < 0.5
        layer.bias.data = np.where(picks, 2.2, -4.5).astype(layer.bias.dtype)
    for gate in (model.att_middle, model.att_last):
        if gate is None:
            continue
        for name, p in gate.parameters():
            if name.startswith(("w", "weight")):
                p.data = rng.normal(0.0, 0.05, size=p.data.shape).astype(p.dtype)
            else:
                p.data = np.full(p.data.shape, 2.0 if name == "b1" else 0.3, dtype=p.dtype)


def staggered_channels(rng: np.random.Generator, shape, spread: float = 0.8,
                       noise: float = 0.15) -> np.ndarray:
    """Random [B,C,H,W] data whose per-channel means are separated enough
    that the channel max has a decisive winner everywhere."""
    b, c, h, w = shape
    offsets = spread * np.arange(c)
    offsets[-1] = 3.0 + spread * c
    return rng.normal(0.0, noise, size=shape) + offsets[None, :, None, None]


@pytest.fixture
def rng():
    return np.random.default_rng(20260809)


def as_t64(arr, requires_grad=False) -> Tensor:
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=requires_grad, dtype=np.float64)
