"""Training loop (Adam, halving LR schedule, early stopping), evaluation,
and the scripted comparison experiments."""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .metrics import ImageMetrics, MetricsReport, aggregate, score_image, to_csv
from .network import Model, ModelConfig, build_model
from .pipeline import (
    ImagePair,
    SplitSpec,
    depatchify,
    derive_seed,
    patchify,
    rotate_augment,
    split_dataset,
    standardize,
)
from .priors import DescriptorSet, PriorDistribution, compute_priors, random_priors, uniform_priors

WEIGHTING_MODES = ("clip-file", "uniform", "random")

HISTORY_HEADER = "epoch,lr,train_mse,val_rmse,val_psnr,val_ssim"


def worker_count() -> int:
    """Worker-thread cap: BIOATT_THREADS env var, else hardware parallelism."""
    env = os.environ.get("BIOATT_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError as exc:
            raise ValueError(f"BIOATT_THREADS must be an integer, got {env!r}") from exc
        if n < 1:
            raise ValueError("BIOATT_THREADS must be >= 1")
        return n
    return os.cpu_count() or 1


@dataclass(frozen=True)
class TrainConfig:
    variant: str = "bioatt"
    weighting: str = "uniform"
    lr0: float = 1e-5
    halve_every: int = 5
    lr_min: float = 1e-10
    patience: int = 7
    batch_size: int = 16
    max_epochs: int = 20
    seed: int = 0
    whole_image: bool = False     # batch-1 full-image mode
    rotate_probability: float = 0.5

    def __post_init__(self):
        if not self.lr0 > self.lr_min > 0:
            raise ValueError("require lr0 > lr_min > 0")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.weighting not in WEIGHTING_MODES:
            raise ValueError(f"unknown weighting {self.weighting!r}; expected one of {WEIGHTING_MODES}")
        if self.batch_size < 1 or self.max_epochs < 1 or self.halve_every < 1:
            raise ValueError("batch_size, max_epochs and halve_every must be >= 1")


def learning_rate(epoch: int, config: TrainConfig) -> float:
    """lr = max(lr0 * 0.5^floor((epoch-1)/halve_every), lr_min); epoch is 1-indexed."""
    if epoch < 1:
        raise ValueError("epochs are 1-indexed")
    halvings = (epoch - 1) // config.halve_every
    return max(config.lr0 * 0.5 ** halvings, config.lr_min)


@dataclass
class EpochStats:
    epoch: int
    lr: float
    train_mse: float
    val_rmse: float
    val_psnr: float
    val_ssim: float


def history_csv(history: Sequence[EpochStats]) -> str:
    lines = [HISTORY_HEADER]
    for h in history:
        lines.append(f"{h.epoch},{h.lr!r},{h.train_mse!r},{h.val_rmse!r},{h.val_psnr!r},{h.val_ssim!r}")
    return "\n".join(lines) + "\n"


class EarlyStopping:
    """Best-value tracker: stops after `patience` consecutive non-improving
    evaluations (strict improvement resets the counter)."""

    def __init__(self, patience: int):
        if patience < 1:
            raise ValueError("patience must be >= 1")
        self.patience = patience
        self.best = math.inf
        self.stale = 0

    def update(self, value: float) -> bool:
        """Record one evaluation; returns True when the value improved."""
        if value < self.best:
            self.best = value
            self.stale = 0
            return True
        self.stale += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.stale >= self.patience


class Adam:
    """Adam with bias correction; moments live alongside the parameters."""

    def __init__(self, named_params: Sequence[Tuple[str, Tensor]],
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.named_params = list(named_params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.named_params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.named_params}

    def zero_grad(self) -> None:
        for _, p in self.named_params:
            p.grad = None

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for name, p in self.named_params:
            if p.grad is None:
                raise RuntimeError(f"parameter {name!r} has no gradient; run backward first")
            g = p.grad
            self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            self.v[name] = b2 * self.v[name] + (1.0 - b2) * (g * g)
            m_hat = self.m[name] / bias1
            v_hat = self.v[name] / bias2
            p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def export_arrays(self) -> Dict[str, np.ndarray]:
        out = {}
        for name in self.m:
            out[f"adam.m.{name}"] = self.m[name].copy()
            out[f"adam.v.{name}"] = self.v[name].copy()
        return out

    def meta(self) -> dict:
        return {"step": self.t, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps}


# ---------------------------------------------------------------------------
# priors per weighting mode
# ---------------------------------------------------------------------------


def fixture_priors(image_ids: Sequence[str], descriptors: DescriptorSet) -> Dict[str, PriorDistribution]:
    """Stable per-image pseudo-priors (softmax of id-derived scores); a
    stand-in for extractor output when no vision-language model is around."""
    out = {}
    for image_id in image_ids:
        rng = np.random.default_rng(derive_seed("prior-fixture", image_id))
        out[image_id] = compute_priors(rng.normal(0.0, 2.0, size=len(descriptors)), descriptors)
    return out


def stub_priors(image_ids: Sequence[str], descriptors: DescriptorSet, mode: str,
                seed: int = 0) -> Dict[str, PriorDistribution]:
    """Schema-valid prior mapping without the extractor: uniform, per-image
    random, or the deterministic fixture."""
    if mode == "uniform":
        u = uniform_priors(descriptors)
        return {image_id: u for image_id in image_ids}
    if mode == "random":
        return {
            image_id: random_priors(descriptors, derive_seed(seed, "stub-random", image_id))
            for image_id in image_ids
        }
    if mode == "fixture":
        return fixture_priors(image_ids, descriptors)
    raise ValueError(f"unknown stub mode {mode!r}")


def resolve_priors(config: TrainConfig, image_ids: Sequence[str], descriptors: DescriptorSet,
                   prior_file: Optional[Dict[str, PriorDistribution]] = None,
                   ) -> Optional[Dict[str, PriorDistribution]]:
    """Per-image priors for a run, or None for variants without organ gates."""
    if config.variant != "bioatt":
        return None
    if config.weighting == "clip-file":
        if prior_file is None:
            raise ValueError("weighting 'clip-file' requires a prior file")
        missing = [i for i in image_ids if i not in prior_file]
        if missing:
            raise ValueError(f"prior file lacks entries for: {', '.join(sorted(missing))}")
        return {i: prior_file[i] for i in image_ids}
    if config.weighting == "uniform":
        u = uniform_priors(descriptors)
        return {i: u for i in image_ids}
    shared = random_priors(descriptors, derive_seed(config.seed, "run-random-prior"))
    return {i: shared for i in image_ids}


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: Model
    history: List[EpochStats]
    best_epoch: int
    best_val_rmse: float
    optimizer_arrays: Dict[str, np.ndarray]
    optimizer_meta: dict
    train_ids: List[str]
    val_ids: List[str]
    test_ids: List[str]
    sample_shape: Tuple[int, ...] = field(default=())


def _training_samples(pairs: Sequence[ImagePair], config: TrainConfig, patch_size: int):
    """(image_id, ld_patch, nd_patch) triples in float64 standardized units."""
    samples = []
    for pair in pairs:
        ld = standardize(pair.ldct)
        nd = standardize(pair.ndct)
        if config.whole_image:
            samples.append((pair.id, 0, ld, nd))
        else:
            ld_grid = patchify(ld, patch_size)
            nd_grid = patchify(nd, patch_size)
            for k, (lp, np_) in enumerate(zip(ld_grid.patches, nd_grid.patches)):
                samples.append((pair.id, k, lp, np_))
    return samples


def _augmented(sample, config: TrainConfig, epoch: int):
    image_id, k, ld, nd = sample
    if ld.shape[0] != ld.shape[1] or config.rotate_probability <= 0:
        return ld, nd
    seed = derive_seed(config.seed, "rotate", image_id, k, epoch)
    return (rotate_augment(ld, seed, config.rotate_probability),
            rotate_augment(nd, seed, config.rotate_probability))


def _snapshot(model: Model) -> Dict[str, np.ndarray]:
    return {name: p.data.copy() for name, p in model.named_parameters()}


def train(pairs: Sequence[ImagePair], config: TrainConfig,
          model_config: Optional[ModelConfig] = None,
          prior_file: Optional[Dict[str, PriorDistribution]] = None,
          descriptors: DescriptorSet = DescriptorSet(),
          split: SplitSpec = None) -> TrainResult:
    """MSE training on standardized patches with per-epoch validation.

    Monitors validation RMSE once per epoch; stops at max_epochs or after
    `patience` consecutive non-improving evaluations, and returns the model
    restored to its best-validation parameters plus the per-epoch history.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("empty dataset")
    if model_config is None:
        model_config = ModelConfig(variant=config.variant, seed=config.seed,
                                   n_descriptors=len(descriptors))
    if model_config.variant != config.variant:
        raise ValueError("model_config.variant disagrees with TrainConfig.variant")
    if split is None:
        split = SplitSpec(seed=config.seed)

    by_id = {p.id: p for p in pairs}
    train_ids, val_ids, test_ids = split_dataset([p.id for p in pairs], split)
    if not train_ids or not val_ids:
        raise ValueError(
            f"split of {len(pairs)} images leaves an empty train or validation set "
            f"under ratios {split.ratios}; supply more images"
        )
    priors = resolve_priors(config, list(by_id), descriptors, prior_file)

    effective_batch = 1 if config.whole_image else config.batch_size
    model = build_model(model_config)
    optimizer = Adam(model.named_parameters())
    samples = _training_samples([by_id[i] for i in train_ids], config, model_config.patch_size)
    if not samples:
        raise ValueError("no training samples")

    history: List[EpochStats] = []
    stopper = EarlyStopping(config.patience)
    best_epoch = 0
    best_params = _snapshot(model)
    best_opt = optimizer.export_arrays()
    best_meta = optimizer.meta()
    sample_shape: Tuple[int, ...] = ()

    for epoch in range(1, config.max_epochs + 1):
        lr = learning_rate(epoch, config)
        order = np.random.default_rng(derive_seed(config.seed, "shuffle", epoch)).permutation(len(samples))
        loss_sum = 0.0
        loss_n = 0
        for start in range(0, len(order), effective_batch):
            chosen = [samples[i] for i in order[start:start + effective_batch]]
            lds, nds, batch_priors = [], [], []
            for sample in chosen:
                ld, nd = _augmented(sample, config, epoch)
                lds.append(ld)
                nds.append(nd)
                if priors is not None:
                    batch_priors.append(priors[sample[0]])
            x = Tensor(np.stack(lds)[:, None].astype(np.float32))
            target = Tensor(np.stack(nds)[:, None].astype(np.float32))
            if not sample_shape:
                sample_shape = x.shape
            optimizer.zero_grad()
            out, _ = model.forward(x, prior=batch_priors if batch_priors else None)
            loss = ad.mse_loss(out, target)
            ad.backward(loss)
            optimizer.step(lr)
            loss_sum += float(loss.data) * len(chosen)
            loss_n += len(chosen)

        val_report = evaluate(model, [by_id[i] for i in val_ids], priors=priors)
        history.append(EpochStats(
            epoch=epoch,
            lr=lr,
            train_mse=loss_sum / max(1, loss_n),
            val_rmse=val_report.rmse_mean,
            val_psnr=val_report.psnr_mean,
            val_ssim=val_report.ssim_mean,
        ))
        if stopper.update(val_report.rmse_mean):
            best_epoch = epoch
            best_params = _snapshot(model)
            best_opt = optimizer.export_arrays()
            best_meta = optimizer.meta()
        elif stopper.should_stop:
            break

    model.load_state_arrays(best_params)
    return TrainResult(
        model=model,
        history=history,
        best_epoch=best_epoch,
        best_val_rmse=stopper.best,
        optimizer_arrays=best_opt,
        optimizer_meta=best_meta,
        train_ids=train_ids,
        val_ids=val_ids,
        test_ids=test_ids,
        sample_shape=sample_shape,
    )


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def denoise_image(model: Model, image, prior: Optional[PriorDistribution] = None,
                  batch_size: int = 16) -> np.ndarray:
    """standardize -> patchify -> forward per patch -> depatchify; returns the
    reconstruction in standardized units (float64)."""
    z = standardize(image)
    grid = patchify(z, model.config.patch_size)
    outputs = []
    with ad.no_grad():
        for start in range(0, len(grid.patches), batch_size):
            chunk = grid.patches[start:start + batch_size]
            x = Tensor(np.stack(chunk)[:, None].astype(np.float32))
            p = [prior] * len(chunk) if prior is not None else None
            out, _ = model.forward(x, prior=p)
            outputs.extend(np.asarray(out.data[i, 0], dtype=np.float64) for i in range(len(chunk)))
    grid.patches = outputs
    return depatchify(grid)


def evaluate(model: Model, pairs: Sequence[ImagePair],
             priors: Optional[Dict[str, PriorDistribution]] = None,
             data_range: Optional[float] = None, label: str = "model") -> MetricsReport:
    """Full-image metrics of the model's reconstructions against NDCT."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("evaluate: empty image list")
    if model.config.variant == "bioatt" and priors is None:
        raise ValueError("bioatt checkpoint requires priors for evaluation")

    def score(pair: ImagePair) -> ImageMetrics:
        prior = priors[pair.id] if priors is not None else None
        recon = denoise_image(model, pair.ldct, prior)
        return score_image(pair.id, recon, standardize(pair.ndct), data_range)

    workers = min(worker_count(), len(pairs))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            items = list(pool.map(score, pairs))
    else:
        items = [score(p) for p in pairs]
    note = "per-image reference max-min" if data_range is None else f"fixed {data_range!r}"
    return aggregate(label, items, data_range_note=note)


def baseline_report(pairs: Sequence[ImagePair], data_range: Optional[float] = None,
                    label: str = "input") -> MetricsReport:
    """Metrics of the raw LDCT input against NDCT (the no-model baseline row)."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("baseline_report: empty image list")
    items = [
        score_image(p.id, standardize(p.ldct), standardize(p.ndct), data_range)
        for p in pairs
    ]
    note = "per-image reference max-min" if data_range is None else f"fixed {data_range!r}"
    return aggregate(label, items, data_range_note=note)


# ---------------------------------------------------------------------------
# scripted experiments
# ---------------------------------------------------------------------------

EXPERIMENTS = ("attention", "patching", "weighting")


def run_experiment(name: str, pairs: Sequence[ImagePair], out_dir,
                   config: TrainConfig,
                   model_config: Optional[ModelConfig] = None,
                   prior_file: Optional[Dict[str, PriorDistribution]] = None,
                   descriptors: DescriptorSet = DescriptorSet()) -> List[MetricsReport]:
    """Train the experiment's run set on a shared seed/split and emit a
    Table-style CSV plus one history CSV per run."""
    if name not in EXPERIMENTS:
        raise ValueError(f"unknown experiment {name!r}; expected one of {EXPERIMENTS}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if name == "attention":
        runs = [(variant, replace(config, variant=variant)) for variant in
                ("base", "channel", "spatial", "bioatt")]
    elif name == "patching":
        runs = [
            ("whole", replace(config, whole_image=True, batch_size=1)),
            ("patch", replace(config, whole_image=False)),
        ]
    else:
        if prior_file is None:
            # Deterministic stand-in so the clip-file arm runs without the extractor.
            prior_file = fixture_priors([p.id for p in pairs], descriptors)
        runs = [(mode, replace(config, variant="bioatt", weighting=mode))
                for mode in ("clip-file", "uniform", "random")]

    reports = []
    for label, run_cfg in runs:
        run_mc = replace(model_config, variant=run_cfg.variant) if model_config else None
        result = train(pairs, run_cfg, model_config=run_mc,
                       prior_file=prior_file, descriptors=descriptors)
        test_pairs = [p for p in pairs if p.id in set(result.test_ids)]
        priors = resolve_priors(run_cfg, [p.id for p in test_pairs], descriptors, prior_file)
        report = evaluate(result.model, test_pairs, priors=priors, label=label)
        reports.append(report)
        (out_dir / f"history_{label}.csv").write_text(history_csv(result.history), encoding="utf-8")
        (out_dir / f"shapes_{label}.txt").write_text(
            f"training sample shape: {'x'.join(map(str, result.sample_shape))}\n", encoding="utf-8")
    (out_dir / f"experiment_{name}.csv").write_text(to_csv(reports), encoding="utf-8")
    return reports
