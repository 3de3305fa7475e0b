"""Organ-aware spatial attention for low-dose CT denoising."""

from .autodiff import Tensor, backward, no_grad
from .attention import AttentionMaps, BioAttBlock, SpatialAttention, SqueezeExcitation, export_attention_maps
from .estimator import BioAttDenoiser
from .metrics import MetricsReport, aggregate, psnr, rmse, ssim
from .network import Model, ModelConfig, build_model, load_checkpoint, save_checkpoint
from .pipeline import (
    CTImage,
    ImagePair,
    PhantomSpec,
    SplitSpec,
    depatchify,
    destandardize,
    gen_phantom,
    patchify,
    read_ctv,
    split_dataset,
    standardize,
    write_ctv,
)
from .priors import (
    DescriptorSet,
    PriorDistribution,
    compute_priors,
    load_prior_file,
    random_priors,
    uniform_priors,
    write_prior_file,
)
from .training import TrainConfig, TrainResult, baseline_report, evaluate, run_experiment, train

__version__ = "0.1.0"
