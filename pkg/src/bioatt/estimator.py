"""Scikit-learn style wrapper around the denoising pipeline.

`BioAttDenoiser` exposes fit/predict/transform/get_params over stacks of
HU-valued images so the model composes with sklearn tooling (clone,
pipelines, searches).  All heavy lifting happens in the package's training
and pipeline modules.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .metrics import score_image
from .network import ModelConfig
from .pipeline import CTImage, ImagePair, standardize
from .priors import DescriptorSet
from .training import TrainConfig, denoise_image, resolve_priors, train
from .validation import check_array


class BioAttDenoiser(BaseEstimator, TransformerMixin):
    """Denoise low-dose CT images with an attention-gated residual network.

    Parameters mirror the training protocol: `variant` selects the attention
    flavor (base/channel/spatial/bioatt), `weighting` how organ priors are
    assigned for the bioatt variant.  X and y are (n_images, H, W) arrays in
    Hounsfield Units.
    """

    def __init__(self, variant: str = "bioatt", weighting: str = "uniform",
                 channels: int = 96, kernel: int = 5, n_descriptors: int = 17,
                 patch_size: int = 55, lr: float = 1e-5, max_epochs: int = 20,
                 batch_size: int = 16, patience: int = 7, halve_every: int = 5,
                 whole_image: bool = False, rotate_probability: float = 0.5,
                 seed: int = 0):
        self.variant = variant
        self.weighting = weighting
        self.channels = channels
        self.kernel = kernel
        self.n_descriptors = n_descriptors
        self.patch_size = patch_size
        self.lr = lr
        self.max_epochs = max_epochs
        self.batch_size = batch_size
        self.patience = patience
        self.halve_every = halve_every
        self.whole_image = whole_image
        self.rotate_probability = rotate_probability
        self.seed = seed

    def _check_stack(self, X, name: str) -> np.ndarray:
        arr = check_array(X, name, ndim=3)
        if arr.shape[1] < self.patch_size or arr.shape[2] < self.patch_size:
            raise ValueError(f"{name}: images {arr.shape[1:]} smaller than patch size {self.patch_size}")
        return arr

    def _pairs(self, X: np.ndarray, y: np.ndarray):
        return [
            ImagePair(f"img_{i:04d}", CTImage(f"img_{i:04d}_ld", ld), CTImage(f"img_{i:04d}_nd", nd))
            for i, (ld, nd) in enumerate(zip(X, y))
        ]

    def fit(self, X, y, priors=None):
        """Train on paired (low-dose, normal-dose) image stacks.

        `priors` optionally maps image ids (img_0000, ...) to
        PriorDistribution for weighting='clip-file'.
        """
        X = self._check_stack(X, "X")
        y = self._check_stack(y, "y")
        if X.shape != y.shape:
            raise ValueError(f"X and y must align: {X.shape} vs {y.shape}")
        descriptors = (DescriptorSet() if self.n_descriptors == 17
                       else DescriptorSet(tuple(f"descriptor_{i:02d}" for i in range(self.n_descriptors))))
        config = TrainConfig(
            variant=self.variant, weighting=self.weighting, lr0=self.lr,
            halve_every=self.halve_every, patience=self.patience,
            batch_size=self.batch_size, max_epochs=self.max_epochs,
            seed=self.seed, whole_image=self.whole_image,
            rotate_probability=self.rotate_probability,
        )
        model_config = ModelConfig(
            variant=self.variant, channels=self.channels, kernel=self.kernel,
            n_descriptors=self.n_descriptors, patch_size=self.patch_size, seed=self.seed,
        )
        result = train(self._pairs(X, y), config, model_config=model_config,
                       prior_file=priors, descriptors=descriptors)
        self.model_ = result.model
        self.history_ = result.history
        self.descriptors_ = descriptors
        self.train_config_ = config
        return self

    def _require_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("this BioAttDenoiser instance is not fitted yet")

    def _inference_priors(self, n: int, priors):
        """One PriorDistribution per image, or None for prior-free variants."""
        if self.model_.config.variant != "bioatt":
            return [None] * n
        if priors is not None:
            if isinstance(priors, (list, tuple)):
                if len(priors) != n:
                    raise ValueError(f"got {len(priors)} priors for {n} images")
                return list(priors)
            return [priors] * n
        if self.weighting == "clip-file":
            raise ValueError("weighting='clip-file' needs explicit priors at inference")
        resolved = resolve_priors(self.train_config_, ["_"], self.descriptors_)
        return [resolved["_"]] * n

    def predict(self, X, priors=None) -> np.ndarray:
        """Denoise a stack of HU images; returns HU-domain reconstructions.

        `priors` may be one PriorDistribution for all images or a sequence of
        per-image distributions (bioatt variant only)."""
        from .pipeline import destandardize

        self._require_fitted()
        X = self._check_stack(X, "X")
        per_image = self._inference_priors(len(X), priors)
        out = np.empty_like(X)
        for i, img in enumerate(X):
            recon = denoise_image(self.model_, CTImage(f"predict_{i:04d}", img), per_image[i])
            out[i] = destandardize(recon).pixels
        return out

    def transform(self, X) -> np.ndarray:
        return self.predict(X)

    def score(self, X, y, priors=None) -> float:
        """Mean SSIM of the denoised X against y, in standardized units."""
        self._require_fitted()
        X = self._check_stack(X, "X")
        y = self._check_stack(y, "y")
        per_image = self._inference_priors(len(X), priors)
        values = []
        for i, (ld, nd) in enumerate(zip(X, y)):
            recon = denoise_image(self.model_, CTImage(f"score_{i:04d}", ld), per_image[i])
            values.append(score_image(f"score_{i:04d}", recon, standardize(nd)).ssim)
        return float(np.mean(values))
