"""Prior extraction: encode, score, softmax, emit the prior JSON file."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Dict, List, Sequence

import numpy as np

from .backends import ExtractorError, HistogramBackend
from .ctv import read_ctv
from .windowing import DEFAULT_LEVEL, DEFAULT_WIDTH, window_image

DEFAULT_TEMPLATE = "a CT scan showing the {descriptor}"

# Matches the denoiser's default anatomical descriptor set.
DEFAULT_DESCRIPTORS = (
    "lungs",
    "mediastinum",
    "spleen",
    "ventricles",
    "spine",
    "liver",
    "kidneys",
    "abdominal aorta",
    "heart",
    "stomach",
    "pancreas",
    "gallbladder",
    "bowel",
    "ribs",
    "esophagus",
    "trachea",
    "diaphragm",
)


def softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max()
    e = np.exp(shifted)
    return e / e.sum()


def _collect_images(image_dir: Path) -> List[Path]:
    """CTV files to encode.  Paired datasets (<id>_ld.ctv / <id>_nd.ctv)
    contribute only their low-dose file, keyed by the pair id, which is how
    the training pipeline looks priors up."""
    files = sorted(image_dir.glob("*.ctv"))
    if not files:
        raise ExtractorError(f"{image_dir}: no CTV images found")
    ld = [p for p in files if p.stem.endswith("_ld")]
    return ld if ld else files


def _image_id(path: Path) -> str:
    stem = path.stem
    return stem[:-3] if stem.endswith("_ld") else stem


def extract_priors(
    image_dir,
    descriptors: Sequence[str] = DEFAULT_DESCRIPTORS,
    template: str = DEFAULT_TEMPLATE,
    out_path=None,
    backend=None,
    window_level: float = DEFAULT_LEVEL,
    window_width: float = DEFAULT_WIDTH,
    apply_logit_scale: bool = True,
) -> Dict[str, List[float]]:
    """Compute anatomical priors for every CT image in a directory.

    Each image is display-windowed, encoded jointly with the tokenized (or
    stub-scored) descriptors, scored by dot product (scaled by the backend's
    learned logit scale unless disabled), and softmaxed into a probability
    vector.  Returns {image-id: probabilities} and, when out_path is given,
    writes the prior JSON file.
    """
    descriptors = list(descriptors)
    if not descriptors:
        raise ExtractorError("descriptor list is empty")
    if len(set(descriptors)) != len(descriptors):
        raise ExtractorError("descriptor names must be unique")
    if backend is None:
        backend = HistogramBackend()

    prompts = [template.format(descriptor=d) for d in descriptors]
    text_features = backend.encode_texts(prompts, descriptors)
    if text_features.shape[0] != len(descriptors):
        raise ExtractorError(
            f"backend returned {text_features.shape[0]} text embeddings for "
            f"{len(descriptors)} descriptors"
        )
    scale = backend.logit_scale if apply_logit_scale else 1.0

    priors: Dict[str, List[float]] = {}
    for path in _collect_images(Path(image_dir)):
        hu = read_ctv(path)
        display = window_image(hu, window_level, window_width)
        image_feature = backend.encode_image(hu, display)
        scores = scale * (text_features @ image_feature)
        priors[_image_id(path)] = [float(p) for p in softmax(scores)]

    if out_path is not None:
        payload = {"descriptors": descriptors, "priors": priors}
        out_path = Path(out_path)
        tmp = out_path.with_name(out_path.name + ".tmp")
        tmp.write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")
        tmp.replace(out_path)
    return priors
