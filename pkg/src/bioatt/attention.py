"""Organ-aware spatial attention, plus SE and CBAM-spatial baseline gates.

The organ gate pools the feature map over channels (mean and max), runs one
same-padded 7x7 convolution producing a sigmoid map per anatomical
descriptor, scales each map by its prior probability, and sums the maps into
a single fused gate applied back to the features.  Priors are constants: no
gradient flows into them.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .priors import DescriptorSet, PriorDistribution

DEFAULT_ATTENTION_KERNEL = 7
DEFAULT_SE_REDUCTION = 16

PriorLike = Union[PriorDistribution, Sequence[PriorDistribution]]


@dataclass
class AttentionMaps:
    """Diagnostics from one organ-gate forward pass (kept only on request)."""

    organ_maps: np.ndarray    # [B,N,H,W] sigmoid maps
    weighted_maps: np.ndarray  # [B,N,H,W] prior-scaled maps
    fused: np.ndarray          # [B,1,H,W]
    prior: np.ndarray          # [B,N]


def _kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = float(np.sqrt(6.0 / fan_in))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _prior_tensor(prior: PriorLike, n: int, batch: int, dtype) -> np.ndarray:
    """Stack priors into a constant [B or 1, N, 1, 1] array."""
    if isinstance(prior, PriorDistribution):
        if len(prior) != n:
            raise ValueError(f"prior length {len(prior)} != descriptor count {n}")
        return prior.probs.astype(dtype)[None, :, None, None]
    dists = list(prior)
    if len(dists) != batch:
        raise ValueError(f"got {len(dists)} priors for batch of {batch}")
    rows = []
    for d in dists:
        if len(d) != n:
            raise ValueError(f"prior length {len(d)} != descriptor count {n}")
        rows.append(d.probs.astype(dtype))
    return np.stack(rows)[:, :, None, None]


class BioAttBlock:
    """Spatial attention with one sigmoid map per anatomical descriptor."""

    def __init__(self, n_descriptors: int, kernel: int = DEFAULT_ATTENTION_KERNEL,
                 rng: Optional[np.random.Generator] = None, dtype=np.float32):
        if n_descriptors < 1:
            raise ValueError("need at least one descriptor")
        if kernel % 2 == 0:
            raise ValueError("attention kernel must be odd (same padding)")
        if rng is None:
            rng = np.random.default_rng(0)
        self.n_descriptors = n_descriptors
        self.kernel = kernel
        fan_in = 2 * kernel * kernel
        self.weight = Tensor(_kaiming_uniform(rng, (n_descriptors, 2, kernel, kernel), fan_in, dtype),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(n_descriptors, dtype=dtype), requires_grad=True)

    def parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def organ_maps(self, x: Tensor) -> Tensor:
        """Sigmoid attention maps [B,N,H,W] from channel-pooled descriptors.

        The conv runs one GEMV per organ so each map's bits are independent
        of descriptor order (the permutation-equivariance contract)."""
        pooled = ad.concat_channels(ad.channel_mean(x), ad.channel_max(x))
        return ad.sigmoid(ad.conv2d(pooled, self.weight, self.bias, padding="same", per_filter=True))

    def forward(self, x: Tensor, prior: PriorLike, capture: bool = False):
        maps = self.organ_maps(x)
        p = _prior_tensor(prior, self.n_descriptors, x.shape[0], x.dtype)
        weighted = ad.mul(maps, Tensor(p))
        # Canonical summation order: descriptor permutations leave the fused
        # map bit-identical.
        fused = ad.sum_over_axis(weighted, axis=1, keepdims=True, canonical=True)
        out = ad.mul(x, fused)
        if not capture:
            return out, None
        diag = AttentionMaps(
            organ_maps=maps.data.copy(),
            weighted_maps=weighted.data.copy(),
            fused=fused.data.copy(),
            prior=p.reshape(p.shape[0], p.shape[1]).copy(),
        )
        return out, diag


class SpatialAttention:
    """CBAM spatial sub-module: a single-map organ gate with no prior weighting."""

    def __init__(self, kernel: int = DEFAULT_ATTENTION_KERNEL,
                 rng: Optional[np.random.Generator] = None, dtype=np.float32):
        self._gate = BioAttBlock(1, kernel, rng=rng, dtype=dtype)

    @property
    def weight(self):
        return self._gate.weight

    @property
    def bias(self):
        return self._gate.bias

    def parameters(self):
        return self._gate.parameters()

    def forward(self, x: Tensor, prior=None, capture: bool = False):
        gate = self._gate.organ_maps(x)
        out = ad.mul(x, gate)
        if not capture:
            return out, None
        diag = AttentionMaps(
            organ_maps=gate.data.copy(),
            weighted_maps=gate.data.copy(),
            fused=gate.data.copy(),
            prior=np.ones((x.shape[0], 1), dtype=x.dtype),
        )
        return out, diag


class SqueezeExcitation:
    """SE channel gate: global average pool, bottleneck MLP, sigmoid rescale."""

    def __init__(self, channels: int, reduction: int = DEFAULT_SE_REDUCTION,
                 rng: Optional[np.random.Generator] = None, dtype=np.float32):
        if rng is None:
            rng = np.random.default_rng(0)
        hidden = max(1, channels // reduction)  # clamped so C/r >= 1
        self.channels = channels
        self.hidden = hidden
        # The bottleneck opens nearly constant-active (tiny w1, positive b1):
        # a ReLU unit that draws a dead init would zero the gradients of its
        # whole w1 row and w2 column, and with C/r units there is no margin.
        self.w1 = Tensor(0.05 * _kaiming_uniform(rng, (hidden, channels, 1, 1), channels, dtype),
                         requires_grad=True)
        self.b1 = Tensor(np.full(hidden, 0.5, dtype=dtype), requires_grad=True)
        self.w2 = Tensor(_kaiming_uniform(rng, (channels, hidden, 1, 1), hidden, dtype), requires_grad=True)
        self.b2 = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)

    def parameters(self):
        return [("w1", self.w1), ("b1", self.b1), ("w2", self.w2), ("b2", self.b2)]

    def forward(self, x: Tensor, prior=None, capture: bool = False):
        b, c, h, w = x.shape
        pooled = ad.mul(ad.sum_over_axis(ad.sum_over_axis(x, axis=3, keepdims=True), axis=2, keepdims=True),
                        1.0 / (h * w))
        z = ad.relu(ad.conv2d(pooled, self.w1, self.b1))
        gate = ad.sigmoid(ad.conv2d(z, self.w2, self.b2))
        out = ad.mul(x, gate)
        if not capture:
            return out, None
        diag = AttentionMaps(
            organ_maps=gate.data.copy(),
            weighted_maps=gate.data.copy(),
            fused=gate.data.copy(),
            prior=np.ones((b, 1), dtype=x.dtype),
        )
        return out, diag


def bioatt_forward(x: Tensor, prior: PriorLike, block: BioAttBlock, capture: bool = False):
    return block.forward(x, prior, capture=capture)


def se_forward(x: Tensor, block: SqueezeExcitation, capture: bool = False):
    return block.forward(x, capture=capture)


def cbam_spatial_forward(x: Tensor, block: SpatialAttention, capture: bool = False):
    return block.forward(x, capture=capture)


# ---------------------------------------------------------------------------
# attention-map export
# ---------------------------------------------------------------------------


def _to_pgm_bytes(map2d: np.ndarray) -> bytes:
    """Min-max normalize one map to 8-bit and wrap it as binary PGM (P5)."""
    lo, hi = float(map2d.min()), float(map2d.max())
    if hi > lo:
        scaled = np.round((map2d - lo) / (hi - lo) * 255.0)
    else:
        scaled = np.full_like(map2d, 128.0)  # constant map renders mid-gray
    pixels = scaled.astype(np.uint8)
    header = f"P5\n{map2d.shape[1]} {map2d.shape[0]}\n255\n".encode("ascii")
    return header + pixels.tobytes()


def _safe_name(descriptor: str) -> str:
    return "".join(ch if ch.isalnum() else "_" for ch in descriptor)


def export_attention_maps(diag: AttentionMaps, descriptors: DescriptorSet, out_dir) -> list:
    """Write one PGM per organ map (rank-ordered by prior) plus the fused map.

    Filenames are rank_<r>_<descriptor>.pgm with r=1 for the most probable
    organ, matching the published artifact style; high attention renders
    white.  Returns the written paths.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n = diag.organ_maps.shape[1]
    if n != len(descriptors):
        raise ValueError(f"diagnostics carry {n} maps for {len(descriptors)} descriptors")
    prior = diag.prior[0]
    order = np.argsort(-prior, kind="stable")
    written = []
    for rank, organ in enumerate(order, start=1):
        path = out_dir / f"rank_{rank}_{_safe_name(descriptors.names[organ])}.pgm"
        path.write_bytes(_to_pgm_bytes(diag.organ_maps[0, organ]))
        written.append(path)
    fused_path = out_dir / "fused.pgm"
    fused_path.write_bytes(_to_pgm_bytes(diag.fused[0, 0]))
    written.append(fused_path)
    return written
