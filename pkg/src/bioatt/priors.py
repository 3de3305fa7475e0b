"""Anatomical descriptor sets and prior probability distributions.

A prior is a softmax over image-text similarity scores, one probability per
anatomical descriptor.  The network treats priors as constants; this module
also provides the uniform and random weightings used by the ablation runs
and the JSON file format that connects the offline extractor to training.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Mapping

import numpy as np

from .validation import check_array

# Eight names visible in the published attention-map artifacts plus nine
# further common thoraco-abdominal structures; override via config.
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

SUM_TOLERANCE = 1e-4  # acceptance threshold for loaded prior files


class PriorFileError(ValueError):
    """Raised when a prior file violates the schema or its invariants."""


@dataclass(frozen=True)
class DescriptorSet:
    """Ordered anatomical descriptor names; order defines the organ channel index."""

    names: tuple = DEFAULT_DESCRIPTORS

    def __post_init__(self):
        names = tuple(self.names)
        if not names:
            raise ValueError("descriptor set must not be empty")
        if len(set(names)) != len(names):
            raise ValueError("descriptor names must be unique")
        object.__setattr__(self, "names", names)

    def __len__(self) -> int:
        return len(self.names)

    def __iter__(self):
        return iter(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)


@dataclass(frozen=True)
class PriorDistribution:
    """Probability vector over a descriptor set; sums to 1 within 1e-6."""

    probs: np.ndarray
    descriptors: DescriptorSet = field(default_factory=DescriptorSet)

    def __post_init__(self):
        probs = check_array(self.probs, "prior probabilities", ndim=1)
        if probs.shape[0] != len(self.descriptors):
            raise ValueError(
                f"prior length {probs.shape[0]} != descriptor count {len(self.descriptors)}"
            )
        if probs.min() < 0.0 or probs.max() > 1.0:
            raise ValueError("prior probabilities must lie in [0, 1]")
        if abs(probs.sum() - 1.0) > 1e-6:
            raise ValueError(f"prior probabilities sum to {probs.sum()!r}, not 1")
        probs = probs.copy()
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)

    def __len__(self) -> int:
        return len(self.probs)

    def ranked(self) -> list:
        """(descriptor, probability) pairs sorted by descending probability."""
        order = np.argsort(-self.probs, kind="stable")
        return [(self.descriptors.names[i], float(self.probs[i])) for i in order]


def compute_priors(scores, descriptors: DescriptorSet = DescriptorSet()) -> PriorDistribution:
    """Softmax of raw similarity scores: p_i = exp(S_i) / sum_j exp(S_j)."""
    s = check_array(scores, "similarity scores", ndim=1)
    if s.shape[0] != len(descriptors):
        raise ValueError(f"got {s.shape[0]} scores for {len(descriptors)} descriptors")
    shifted = s - s.max()
    e = np.exp(shifted)
    return PriorDistribution(e / e.sum(), descriptors)


def generic_descriptors(n: int) -> DescriptorSet:
    """Placeholder descriptor set for size-driven construction."""
    if n < 1:
        raise ValueError("descriptor count must be >= 1")
    return DescriptorSet(tuple(f"descriptor_{i:02d}" for i in range(n)))


def _as_descriptors(spec) -> DescriptorSet:
    return generic_descriptors(spec) if isinstance(spec, int) else spec


def uniform_priors(descriptors=DescriptorSet()) -> PriorDistribution:
    """Equal weight 1/n per descriptor; accepts a DescriptorSet or a count."""
    descriptors = _as_descriptors(descriptors)
    n = len(descriptors)
    return PriorDistribution(np.full(n, 1.0 / n), descriptors)


def random_priors(descriptors, seed: int) -> PriorDistribution:
    """i.i.d. uniform(0,1) weights normalized to sum 1; deterministic per seed."""
    descriptors = _as_descriptors(descriptors)
    n = len(descriptors)
    raw = np.random.default_rng(seed).uniform(0.0, 1.0, size=n)
    return PriorDistribution(raw / raw.sum(), descriptors)


def load_prior_file(
    path,
    descriptors: DescriptorSet = None,
    renormalize: bool = False,
) -> Dict[str, PriorDistribution]:
    """Load and validate a prior JSON file.

    Distributions whose sum deviates from 1 by more than SUM_TOLERANCE are
    rejected unless renormalize=True is passed explicitly; silent repair
    would hide extractor bugs.
    """
    path = Path(path)
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise PriorFileError(f"{path}: not valid JSON ({exc})") from exc

    if not isinstance(payload, dict) or "descriptors" not in payload or "priors" not in payload:
        raise PriorFileError(f"{path}: expected top-level keys 'descriptors' and 'priors'")
    names = payload["descriptors"]
    if not isinstance(names, list) or not all(isinstance(n, str) for n in names):
        raise PriorFileError(f"{path}: 'descriptors' must be a list of strings")
    if not names:
        raise PriorFileError(f"{path}: descriptor list is empty")
    try:
        file_set = DescriptorSet(tuple(names))
    except ValueError as exc:
        raise PriorFileError(f"{path}: {exc}") from exc
    if descriptors is not None and file_set.names != descriptors.names:
        raise PriorFileError(
            f"{path}: descriptor names do not match the configured set "
            f"(expected {list(descriptors.names)}, got {names})"
        )

    result: Dict[str, PriorDistribution] = {}
    for image_id, vec in payload["priors"].items():
        if not isinstance(vec, list) or len(vec) != len(file_set):
            raise PriorFileError(
                f"{path}: prior for {image_id!r} must be a list of {len(file_set)} numbers"
            )
        arr = np.asarray(vec, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise PriorFileError(f"{path}: prior for {image_id!r} contains non-finite values")
        if arr.min() < 0.0:
            raise PriorFileError(f"{path}: prior for {image_id!r} has negative entries")
        total = arr.sum()
        if abs(total - 1.0) > SUM_TOLERANCE:
            if not renormalize:
                raise PriorFileError(
                    f"{path}: prior for {image_id!r} sums to {total:.6g}, outside 1 +/- {SUM_TOLERANCE}"
                )
            if total <= 0.0:
                raise PriorFileError(f"{path}: prior for {image_id!r} sums to {total:.6g}; cannot renormalize")
            arr = arr / total
        else:
            # Small float drift from serialization is absorbed exactly once.
            arr = arr / total
        result[image_id] = PriorDistribution(arr, file_set)
    return result


def write_prior_file(path, priors: Mapping[str, PriorDistribution]) -> None:
    """Serialize priors to the JSON schema (full float precision, >= 9 significant digits)."""
    path = Path(path)
    items = list(priors.items())
    if not items:
        raise ValueError("cannot write an empty prior mapping")
    descriptors = items[0][1].descriptors
    for image_id, dist in items:
        if dist.descriptors.names != descriptors.names:
            raise ValueError(f"prior for {image_id!r} uses a different descriptor set")
    payload = {
        "descriptors": list(descriptors.names),
        "priors": {image_id: [float(p) for p in dist.probs] for image_id, dist in items},
    }
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")
    tmp.replace(path)
