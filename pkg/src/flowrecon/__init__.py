"""Conditional normalizing flows (cINNs) for linear inverse problems.

The package is organised bottom-up: ``engine`` (arrays, reverse-mode
autodiff, parameters, FRT1 files), ``distributions``, ``layers``,
``architectures``, ``operators``, ``conditioning``, ``train``,
``inference``, ``metrics`` and the ``pipeline``/``cli`` front end.
"""

from ._kernels import BACKEND
from .architectures import (
    CSSpec,
    Features,
    FlowModel,
    IUNetSpec,
    MultiScaleSpec,
    build_cs_multiscale,
    build_iunet,
    build_model,
    build_multiscale,
)
from .conditioning import Conditioner, ConditionerSpec, conditional_loss, conditioner_for_model
from .distributions import BaseDistribution, log_density_normal, log_density_radial
from .engine import ParameterStore, Tape, Tensor, no_grad, precision
from .inference import PosteriorSummary, posterior_samples, refine_sweep, sample_refine
from .metrics import psnr, ssim
from .operators import (
    FourierOperator,
    MatrixOperator,
    RadonOperator,
    add_relative_gaussian_noise,
    gaussian_matrix,
    make_mask,
    poisson_lowdose_noise,
)
from .train import TrainConfig, TrainData, adam_step, nll_loss, prepare_data, train

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "CSSpec", "Features", "FlowModel", "IUNetSpec", "MultiScaleSpec",
    "build_cs_multiscale", "build_iunet", "build_model", "build_multiscale", "Conditioner",
    "ConditionerSpec", "conditional_loss", "conditioner_for_model", "BaseDistribution",
    "log_density_normal", "log_density_radial", "ParameterStore", "Tape", "Tensor", "no_grad",
    "precision", "PosteriorSummary", "posterior_samples", "refine_sweep", "sample_refine",
    "psnr", "ssim", "FourierOperator", "MatrixOperator", "RadonOperator",
    "add_relative_gaussian_noise", "gaussian_matrix", "make_mask", "poisson_lowdose_noise",
    "TrainConfig", "TrainData", "adam_step", "nll_loss", "prepare_data", "train",
]
