"""CT rasters, standardization, patch grids, splits, phantoms, and file I/O.

Images carry Hounsfield Units in [-1024, 3071].  Standardized units are
(HU + 500) / 500, computed in float64 so the round-trip is exact to well
below 1e-4 HU; training casts patches to float32 separately.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np

from .validation import check_array

HU_MIN = -1024.0
HU_MAX = 3071.0
HU_MEAN = -500.0
HU_STD = 500.0

DEFAULT_PATCH = 55

CTV_MAGIC = b"CTV1"
_CTV_MAX_EXTENT = 1 << 20
_CTV_MAX_PIXELS = 1 << 26

# Synthetic-phantom tissue palette (HU).
PHANTOM_TISSUES = {"lung": -700.0, "liver": 60.0, "spleen": 50.0, "bone": 400.0, "aorta": 45.0}


class CtvError(ValueError):
    """Raised for malformed CTV containers."""


@dataclass
class CTImage:
    """A single 2-D CT raster in Hounsfield Units."""

    id: str
    pixels: np.ndarray

    def __post_init__(self):
        px = check_array(self.pixels, f"image {self.id!r}", ndim=2)
        if px.min() < HU_MIN or px.max() > HU_MAX:
            raise ValueError(
                f"image {self.id!r}: HU values outside [{HU_MIN:g}, {HU_MAX:g}] "
                f"(found [{px.min():g}, {px.max():g}])"
            )
        self.pixels = px

    @property
    def shape(self) -> Tuple[int, int]:
        return self.pixels.shape


@dataclass(frozen=True)
class ImagePair:
    id: str
    ldct: CTImage
    ndct: CTImage


def standardize(img) -> np.ndarray:
    """HU -> standardized units: z = (HU + 500) / 500."""
    px = img.pixels if isinstance(img, CTImage) else check_array(img, "image", ndim=2)
    return (px - HU_MEAN) / HU_STD


def destandardize(arr: np.ndarray, image_id: str = "image") -> CTImage:
    """Inverse of standardize, clamped back into the valid HU range."""
    hu = check_array(arr, "standardized image", ndim=2) * HU_STD + HU_MEAN
    return CTImage(image_id, np.clip(hu, HU_MIN, HU_MAX))


# ---------------------------------------------------------------------------
# patch grid
# ---------------------------------------------------------------------------


def patch_anchors(length: int, patch: int = DEFAULT_PATCH) -> List[int]:
    """Anchor offsets along one axis: stride = patch size, final anchor
    snapped to the edge, so every pixel is covered and overlap occurs only in
    the band of the edge-snapped last patch."""
    if length < patch:
        raise ValueError(f"axis length {length} smaller than patch size {patch}")
    last = length - patch
    anchors = [a for a in range(0, last, patch)]
    anchors.append(last)
    return anchors


@dataclass
class PatchGrid:
    image_id: str
    image_shape: Tuple[int, int]
    patch_size: int
    row_anchors: List[int]
    col_anchors: List[int]
    patches: List[np.ndarray] = field(repr=False)

    def __len__(self) -> int:
        return len(self.patches)


def patchify(source, patch_size: int = DEFAULT_PATCH) -> PatchGrid:
    """Tile a 2-D raster (or CTImage) into covering patches, row-major order."""
    if isinstance(source, CTImage):
        image_id, arr = source.id, source.pixels
    else:
        image_id, arr = "image", check_array(source, "image", ndim=2)
    rows = patch_anchors(arr.shape[0], patch_size)
    cols = patch_anchors(arr.shape[1], patch_size)
    patches = [arr[r:r + patch_size, c:c + patch_size].copy() for r in rows for c in cols]
    return PatchGrid(image_id, arr.shape, patch_size, rows, cols, patches)


def depatchify(grid: PatchGrid) -> np.ndarray:
    """Stitch patches back; overlapping pixels are averaged."""
    acc = np.zeros(grid.image_shape, dtype=np.float64)
    count = np.zeros(grid.image_shape, dtype=np.float64)
    p = grid.patch_size
    idx = 0
    for r in grid.row_anchors:
        for c in grid.col_anchors:
            acc[r:r + p, c:c + p] += grid.patches[idx]
            count[r:r + p, c:c + p] += 1.0
            idx += 1
    if count.min() == 0:
        raise AssertionError("patch grid does not cover the image")
    return acc / count


def rotate_augment(patch: np.ndarray, seed: int, probability: float = 0.5) -> np.ndarray:
    """With the given probability, rotate the square patch by 90, 180 or 270
    degrees (uniform choice); deterministic for a fixed seed."""
    if patch.ndim != 2 or patch.shape[0] != patch.shape[1]:
        raise ValueError("rotate_augment expects a square 2-D patch")
    rng = np.random.default_rng(seed)
    if rng.random() < probability:
        quarter_turns = int(rng.integers(1, 4))
        return np.ascontiguousarray(np.rot90(patch, quarter_turns))
    return patch.copy()


def derive_seed(*parts) -> int:
    """Stable 64-bit stream seed from heterogeneous parts (run seed, image id,
    epoch, ...); independent of process hash randomization and worker order."""
    digest = hashlib.sha256("\x1f".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


# ---------------------------------------------------------------------------
# dataset split
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SplitSpec:
    ratios: Tuple[float, float, float] = (0.64, 0.16, 0.20)
    seed: int = 0

    def __post_init__(self):
        if abs(sum(self.ratios) - 1.0) > 1e-9:
            raise ValueError(f"split ratios must sum to 1, got {self.ratios}")
        if any(r < 0 for r in self.ratios):
            raise ValueError("split ratios must be non-negative")


def split_dataset(image_ids: Sequence[str], spec: SplitSpec = SplitSpec()):
    """Partition image ids into (train, val, test) with the floor/remainder
    rule: train = floor(r0*M), val = floor(r1*M), test = remainder."""
    ids = list(image_ids)
    if len(ids) < 5:
        raise ValueError(f"need at least 5 images to split, got {len(ids)}")
    order = np.random.default_rng(spec.seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    n_train = int(np.floor(spec.ratios[0] * len(ids)))
    n_val = int(np.floor(spec.ratios[1] * len(ids)))
    return shuffled[:n_train], shuffled[n_train:n_train + n_val], shuffled[n_train + n_val:]


# ---------------------------------------------------------------------------
# synthetic phantoms
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PhantomSpec:
    dims: Tuple[int, int] = (512, 512)
    sigma: float = 0.06          # LDCT noise, standardized units
    min_ellipses: int = 3
    max_ellipses: int = 8

    def __post_init__(self):
        if self.dims[0] < 64 or self.dims[1] < 64:
            raise ValueError(f"phantom dims must be >= 64, got {self.dims}")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if not 1 <= self.min_ellipses <= self.max_ellipses:
            raise ValueError("invalid ellipse count range")


def _paint_ellipse(canvas, ys, xs, cy, cx, ay, ax_, angle, hu):
    """Alpha-composite one anti-aliased ellipse onto the canvas."""
    dy, dx = ys - cy, xs - cx
    ca, sa = np.cos(angle), np.sin(angle)
    u = (dy * ca + dx * sa) / ay
    v = (-dy * sa + dx * ca) / ax_
    dist = np.sqrt(u * u + v * v)
    edge = 1.0 / min(ay, ax_)  # ~one-pixel soft edge
    alpha = np.clip((1.0 - dist) / edge, 0.0, 1.0)
    canvas += alpha * (hu - canvas)


def gen_phantom(spec: PhantomSpec, seed: int) -> Tuple[CTImage, CTImage]:
    """Deterministic (NDCT, LDCT) pair: air background, two large soft-tissue
    body blobs, then smaller organ ellipses; LDCT adds zero-mean Gaussian
    noise in standardized units, clamped to the HU range.

    The body blobs keep the air fraction low enough (< ~25%) that floor
    clamping of the -1000 HU background barely dents the noise statistics."""
    rng = np.random.default_rng(seed)
    h, w = spec.dims
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    canvas = np.full((h, w), -1000.0)

    n_ellipses = int(rng.integers(spec.min_ellipses, spec.max_ellipses + 1))
    body_hu = (PHANTOM_TISSUES["liver"], PHANTOM_TISSUES["spleen"])
    for i in range(min(2, n_ellipses)):
        cy = h * (0.5 + rng.uniform(-0.04, 0.04))
        cx = w * (0.5 + rng.uniform(-0.06, 0.06))
        ay = h * rng.uniform(0.44, 0.55)
        ax_ = w * rng.uniform(0.44, 0.55)
        _paint_ellipse(canvas, ys, xs, cy, cx, ay, ax_, rng.uniform(0, np.pi), body_hu[i])
    tissue_names = sorted(PHANTOM_TISSUES)
    for _ in range(max(0, n_ellipses - 2)):
        hu = PHANTOM_TISSUES[tissue_names[int(rng.integers(len(tissue_names)))]]
        cy = h * rng.uniform(0.25, 0.75)
        cx = w * rng.uniform(0.25, 0.75)
        ay = h * rng.uniform(0.06, 0.20)
        ax_ = w * rng.uniform(0.06, 0.20)
        _paint_ellipse(canvas, ys, xs, cy, cx, ay, ax_, rng.uniform(0, np.pi), hu)

    ndct_hu = np.clip(canvas, HU_MIN, HU_MAX)
    noise = rng.normal(0.0, spec.sigma, size=(h, w)) if spec.sigma > 0 else np.zeros((h, w))
    ldct_hu = np.clip(ndct_hu + noise * HU_STD, HU_MIN, HU_MAX)
    return CTImage("phantom_nd", ndct_hu), CTImage("phantom_ld", ldct_hu)


# ---------------------------------------------------------------------------
# CTV container
# ---------------------------------------------------------------------------


def write_ctv(img: CTImage, path) -> None:
    """magic 'CTV1', u32 LE height, u32 LE width, then H*W float32 LE, row-major."""
    path = Path(path)
    h, w = img.pixels.shape
    payload = np.ascontiguousarray(img.pixels, dtype="<f4").tobytes()
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CTV_MAGIC)
        fh.write(struct.pack("<II", h, w))
        fh.write(payload)
    tmp.replace(path)


def read_ctv(path) -> CTImage:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 12:
        raise CtvError(f"{path}: truncated header")
    if raw[:4] != CTV_MAGIC:
        raise CtvError(f"{path}: bad magic {raw[:4]!r}")
    h, w = struct.unpack("<II", raw[4:12])
    if not (0 < h <= _CTV_MAX_EXTENT and 0 < w <= _CTV_MAX_EXTENT) or h * w > _CTV_MAX_PIXELS:
        raise CtvError(f"{path}: dimension overflow ({h}x{w})")
    expected = 12 + 4 * h * w
    if len(raw) < expected:
        raise CtvError(f"{path}: truncated pixel data ({len(raw)} bytes, expected {expected})")
    if len(raw) > expected:
        raise CtvError(f"{path}: {len(raw) - expected} trailing bytes")
    pixels = np.frombuffer(raw[12:], dtype="<f4").reshape(h, w).astype(np.float64)
    try:
        return CTImage(path.stem, pixels)
    except ValueError as exc:
        raise CtvError(f"{path}: {exc}") from exc


def pair_id_from_stem(stem: str) -> str:
    for suffix in ("_ld", "_nd"):
        if stem.endswith(suffix):
            return stem[: -len(suffix)]
    return stem


def load_pairs(directory) -> List[ImagePair]:
    """Load <id>_ld.ctv / <id>_nd.ctv pairs from a dataset directory."""
    directory = Path(directory)
    if not directory.is_dir():
        raise CtvError(f"{directory}: not a directory")
    pairs = []
    for ld_path in sorted(directory.glob("*_ld.ctv")):
        pair_id = pair_id_from_stem(ld_path.stem)
        nd_path = directory / f"{pair_id}_nd.ctv"
        if not nd_path.exists():
            raise CtvError(f"{ld_path}: missing companion {nd_path.name}")
        pairs.append(ImagePair(pair_id, read_ctv(ld_path), read_ctv(nd_path)))
    return pairs
