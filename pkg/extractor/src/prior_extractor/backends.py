"""Image/text scoring backends.

`BiomedClipBackend` wraps the published pretrained biomedical CLIP checkpoint
(512-wide joint embedding); it needs the optional [clip] dependencies and a
reachable/cached checkpoint.  `HistogramBackend` is a deterministic offline
stub scorer built on HU-band occupancy, good enough for rank-level sanity
(air-filled lungs dominate a chest slice) and for exercising the pipeline
without any model download.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np


class ExtractorError(RuntimeError):
    pass


# HU bands used by the histogram stub: (name, low, high)
_BANDS = (
    ("air", -1100.0, -900.0),
    ("lung", -900.0, -500.0),
    ("fat", -500.0, -100.0),
    ("soft", -100.0, 150.0),
    ("contrast", 150.0, 300.0),
    ("bone", 300.0, 4000.0),
)

# Primary HU band per known descriptor; unknown names score uniformly.
_DESCRIPTOR_BANDS = {
    "lungs": "lung",
    "trachea": "lung",
    "mediastinum": "soft",
    "heart": "soft",
    "ventricles": "soft",
    "liver": "soft",
    "spleen": "soft",
    "kidneys": "soft",
    "pancreas": "soft",
    "stomach": "soft",
    "gallbladder": "soft",
    "bowel": "soft",
    "esophagus": "soft",
    "diaphragm": "soft",
    "abdominal aorta": "soft",
    "spine": "bone",
    "ribs": "bone",
}


def _normalize(v: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(v))
    return v / norm if norm > 0 else v


class HistogramBackend:
    """Deterministic HU-band scorer; no model, no randomness."""

    name = "histogram"
    logit_scale = 10.0

    def encode_image(self, hu: np.ndarray, display: np.ndarray) -> np.ndarray:
        fractions = np.array([
            float(((hu >= lo) & (hu < hi)).mean()) for _, lo, hi in _BANDS
        ])
        return _normalize(fractions)

    def encode_texts(self, prompts: Sequence[str], descriptors: Sequence[str]) -> np.ndarray:
        band_index = {name: i for i, (name, _, _) in enumerate(_BANDS)}
        out = np.zeros((len(descriptors), len(_BANDS)))
        for row, name in enumerate(descriptors):
            band = _DESCRIPTOR_BANDS.get(name.strip().lower())
            if band is None:
                out[row] = 1.0 / np.sqrt(len(_BANDS))
            else:
                out[row, band_index[band]] = 1.0
        return out


class BiomedClipBackend:
    """Pretrained biomedical CLIP checkpoint (text tower tokenized with its
    paired tokenizer; 512-wide projections).  Requires the [clip] extra and a
    downloadable or cached checkpoint."""

    name = "biomedclip"
    EMBED_WIDTH = 512
    DEFAULT_MODEL = "hf-hub:microsoft/BiomedCLIP-PubMedBERT_256-vit_base_patch16_224"

    def __init__(self, model_id: str = DEFAULT_MODEL, device: str = "cpu"):
        try:
            import open_clip
            import torch
            from PIL import Image
        except ImportError as exc:
            raise ExtractorError(
                "biomedclip backend unavailable: install the [clip] extra "
                "(torch, open_clip_torch, pillow)"
            ) from exc
        self._torch = torch
        self._Image = Image
        self.device = device
        try:
            model, _, preprocess = open_clip.create_model_and_transforms(model_id)
            self.tokenizer = open_clip.get_tokenizer(model_id)
        except Exception as exc:
            raise ExtractorError(f"cannot load checkpoint {model_id!r}: {exc}") from exc
        self.model = model.to(device).eval()
        self.preprocess = preprocess
        self.logit_scale = float(model.logit_scale.exp().item())

    def encode_image(self, hu: np.ndarray, display: np.ndarray) -> np.ndarray:
        rgb = self._Image.fromarray(np.stack([display] * 3, axis=-1))
        with self._torch.no_grad():
            batch = self.preprocess(rgb).unsqueeze(0).to(self.device)
            feat = self.model.encode_image(batch)[0]
        vec = feat.cpu().numpy().astype(np.float64)
        if vec.shape[0] != self.EMBED_WIDTH:
            raise ExtractorError(f"unexpected embedding width {vec.shape[0]} (want {self.EMBED_WIDTH})")
        return _normalize(vec)

    def encode_texts(self, prompts: Sequence[str], descriptors: Sequence[str]) -> np.ndarray:
        with self._torch.no_grad():
            tokens = self.tokenizer(list(prompts)).to(self.device)
            feats = self.model.encode_text(tokens)
        mat = feats.cpu().numpy().astype(np.float64)
        return np.stack([_normalize(row) for row in mat])


def make_backend(name: str, **kwargs):
    if name == "histogram":
        return HistogramBackend()
    if name == "biomedclip":
        return BiomedClipBackend(**kwargs)
    raise ExtractorError(f"unknown backend {name!r}; expected histogram or biomedclip")
