"""Residual encoder-decoder backbone with optional attention gates.

Five 5x5 valid convolutions encode, five transposed convolutions decode,
with three skip additions (input into the final stage, conv2 output after
deconv3, conv4 output after deconv1).  Attention gates, when the variant has
them, sit after the ReLU of conv3 ("middle") and conv5 ("last").  All
interior additions precede their ReLU; the final stage is linear so the
network can reproduce standardized values below zero (air sits at -1).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .attention import BioAttBlock, SpatialAttention, SqueezeExcitation, PriorLike

VARIANTS = ("base", "channel", "spatial", "bioatt")

CHECKPOINT_MAGIC = b"BATT"
CHECKPOINT_VERSION = 1

# Backbone convolutions use Kaiming-scale gains (healthy activations and
# gradients from step one); the final projection starts at epsilon scale so
# the network opens at the identity mapping through the input skip,
# residual-network style.  Exactly zero would cut gradient flow to the rest
# of the network; epsilon keeps every parameter live while avoiding the
# initial garbage transient that pollutes Adam's second moments.
_FINAL_LAYER_SCALE = 1e-5


class CheckpointError(ValueError):
    """Raised for malformed or mismatched checkpoint files."""


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "bioatt"
    channels: int = 96
    kernel: int = 5
    n_descriptors: int = 17
    patch_size: int = 55
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.channels < 1 or self.n_descriptors < 1:
            raise ValueError("channels and n_descriptors must be >= 1")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError("backbone kernel must be odd and >= 1")
        if self.patch_size < self.min_extent():
            raise ValueError(
                f"patch_size {self.patch_size} too small: five valid {self.kernel}x{self.kernel} "
                f"convolutions need at least {self.min_extent()}"
            )

    def min_extent(self) -> int:
        return 5 * (self.kernel - 1) + 1


class _Conv:
    def __init__(self, rng, in_ch: int, out_ch: int, kernel: int, dtype, scale: float = 1.0):
        std = scale * np.sqrt(2.0 / (in_ch * kernel * kernel))
        self.weight = Tensor(
            rng.normal(0.0, std, size=(out_ch, in_ch, kernel, kernel)).astype(dtype),
            requires_grad=True,
        )
        self.bias = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.weight, self.bias)

    def parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]


class _Deconv:
    def __init__(self, rng, in_ch: int, out_ch: int, kernel: int, dtype, scale: float = 1.0):
        std = scale * np.sqrt(2.0 / (in_ch * kernel * kernel))
        self.weight = Tensor(
            rng.normal(0.0, std, size=(in_ch, out_ch, kernel, kernel)).astype(dtype),
            requires_grad=True,
        )
        self.bias = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv_transpose2d(x, self.weight, self.bias)

    def parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]


class Model:
    """Backbone plus per-variant attention; built via build_model."""

    def __init__(self, config: ModelConfig, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(config.seed)
        c, k = config.channels, config.kernel
        # Backbone parameters are drawn before attention parameters so all
        # variants with the same seed share identical backbone initialization.
        self.enc = [_Conv(rng, 1 if i == 0 else c, c, k, self.dtype) for i in range(5)]
        self.dec = [
            _Deconv(rng, c, c if i < 4 else 1, k, self.dtype,
                    scale=_FINAL_LAYER_SCALE if i == 4 else 1.0)
            for i in range(5)
        ]
        self.att_middle = self._make_gate(rng)
        self.att_last = self._make_gate(rng)

    def _make_gate(self, rng):
        v = self.config.variant
        if v == "base":
            return None
        if v == "channel":
            return SqueezeExcitation(self.config.channels, rng=rng, dtype=self.dtype)
        if v == "spatial":
            return SpatialAttention(rng=rng, dtype=self.dtype)
        return BioAttBlock(self.config.n_descriptors, rng=rng, dtype=self.dtype)

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        out = []
        for i, layer in enumerate(self.enc, start=1):
            out.extend((f"enc{i}.{n}", t) for n, t in layer.parameters())
        for i, layer in enumerate(self.dec, start=1):
            out.extend((f"dec{i}.{n}", t) for n, t in layer.parameters())
        for tag, gate in (("att_middle", self.att_middle), ("att_last", self.att_last)):
            if gate is not None:
                out.extend((f"{tag}.{n}", t) for n, t in gate.parameters())
        return out

    def parameter_count(self) -> int:
        return sum(t.size for _, t in self.named_parameters())

    def _apply_gate(self, gate, x: Tensor, prior, capture: bool):
        if gate is None:
            return x, None
        if isinstance(gate, BioAttBlock):
            return gate.forward(x, prior, capture=capture)
        return gate.forward(x, capture=capture)

    def forward(self, x, prior: Optional[PriorLike] = None, capture: bool = False):
        """Denoise a [B,1,H,W] batch; returns (output, diagnostics or None)."""
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        if x.ndim != 4 or x.shape[1] != 1:
            raise ValueError(f"expected [B,1,H,W] input, got {x.shape}")
        min_extent = self.config.min_extent()
        if x.shape[2] < min_extent or x.shape[3] < min_extent:
            raise ValueError(f"spatial extent {x.shape[2:]} below minimum {min_extent}")
        if self.config.variant == "bioatt" and prior is None:
            raise ValueError("bioatt variant requires a prior distribution")

        skip_input = x
        h = ad.relu(self.enc[0](x))
        h = ad.relu(self.enc[1](h))
        skip_mid = h                      # conv2 output, added after deconv3
        h = ad.relu(self.enc[2](h))
        h, diag_middle = self._apply_gate(self.att_middle, h, prior, capture)
        h = ad.relu(self.enc[3](h))
        skip_deep = h                     # conv4 output, added after deconv1
        h = ad.relu(self.enc[4](h))
        h, diag_last = self._apply_gate(self.att_last, h, prior, capture)

        h = ad.relu(ad.add(self.dec[0](h), skip_deep))
        h = ad.relu(self.dec[1](h))
        h = ad.relu(ad.add(self.dec[2](h), skip_mid))
        h = ad.relu(self.dec[3](h))
        out = ad.add(self.dec[4](h), skip_input)

        if capture:
            return out, {"middle": diag_middle, "last": diag_last}
        return out, None

    def astype(self, dtype) -> "Model":
        clone = Model(self.config, dtype=dtype)
        for (_, src), (_, dst) in zip(self.named_parameters(), clone.named_parameters()):
            dst.data = src.data.astype(dtype)
        return clone

    def state_arrays(self) -> Dict[str, np.ndarray]:
        return {name: t.data for name, t in self.named_parameters()}

    def load_state_arrays(self, arrays: Dict[str, np.ndarray]) -> None:
        for name, t in self.named_parameters():
            if name not in arrays:
                raise CheckpointError(f"missing parameter {name!r}")
            src = arrays[name]
            if src.shape != t.data.shape:
                raise CheckpointError(f"parameter {name!r}: shape {src.shape} != {t.data.shape}")
            t.data = src.astype(self.dtype)


def build_model(config: ModelConfig, dtype=np.float32) -> Model:
    return Model(config, dtype=dtype)


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------


def _write_record(fh, name: str, arr: np.ndarray) -> None:
    raw = np.ascontiguousarray(arr, dtype="<f4")
    name_bytes = name.encode("utf-8")
    fh.write(struct.pack("<I", len(name_bytes)))
    fh.write(name_bytes)
    fh.write(struct.pack("<I", raw.ndim))
    for extent in raw.shape:
        fh.write(struct.pack("<Q", extent))
    fh.write(raw.tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return buf


def _read_record(fh) -> Tuple[str, np.ndarray]:
    (name_len,) = struct.unpack("<I", _read_exact(fh, 4, "record name length"))
    name = _read_exact(fh, name_len, "record name").decode("utf-8")
    (rank,) = struct.unpack("<I", _read_exact(fh, 4, "record rank"))
    shape = tuple(struct.unpack("<Q", _read_exact(fh, 8, "record extent"))[0] for _ in range(rank))
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    if count < 0 or count > 1 << 32:
        raise CheckpointError(f"record {name!r}: extent overflow {shape}")
    data = np.frombuffer(_read_exact(fh, 4 * count, f"record {name!r} data"), dtype="<f4")
    return name, data.reshape(shape)


def save_checkpoint(model: Model, path, epoch: int = 0,
                    optimizer_arrays: Optional[Dict[str, np.ndarray]] = None,
                    optimizer_meta: Optional[dict] = None) -> None:
    """Serialize parameters (and optional optimizer moments) bit-exactly."""
    if model.dtype != np.float32:
        raise CheckpointError("checkpoints store 32-bit parameters; convert the model first")
    path = Path(path)
    params = model.named_parameters()
    records = [(name, t.data) for name, t in params]
    if optimizer_arrays:
        records.extend(sorted(optimizer_arrays.items()))
    header = {
        "config": asdict(model.config),
        "epoch": int(epoch),
        "optimizer": optimizer_meta or {},
        "record_count": len(records),
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for name, arr in records:
            _write_record(fh, name, arr)
    tmp.replace(path)


def load_checkpoint(path, expected_config: Optional[ModelConfig] = None):
    """Read a checkpoint; returns (model, meta) with meta carrying epoch and
    optimizer state.  Config mismatches and malformed files raise CheckpointError."""
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        (blob_len,) = struct.unpack("<I", _read_exact(fh, 4, "header length"))
        try:
            header = json.loads(_read_exact(fh, blob_len, "header").decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"{path}: corrupt header ({exc})") from exc
        try:
            config = ModelConfig(**header["config"])
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointError(f"{path}: invalid config block ({exc})") from exc
        if expected_config is not None and config != expected_config:
            raise CheckpointError(
                f"{path}: checkpoint config {config} disagrees with requested {expected_config}"
            )
        arrays: Dict[str, np.ndarray] = {}
        for _ in range(int(header.get("record_count", 0))):
            name, arr = _read_record(fh)
            arrays[name] = arr
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing bytes after final record")

    model = build_model(config)
    model.load_state_arrays({k: v for k, v in arrays.items() if not k.startswith("adam.")})
    meta = {
        "epoch": int(header.get("epoch", 0)),
        "optimizer": header.get("optimizer", {}),
        "optimizer_arrays": {k: v for k, v in arrays.items() if k.startswith("adam.")},
    }
    return model, meta
