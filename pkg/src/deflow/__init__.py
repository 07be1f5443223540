"""Unpaired image degradation learning with conditional normalizing flows.

The degraded domain is modeled as a Gaussian shift of the clean domain in
the latent space of a shared invertible flow, so the conditional
distribution of a degraded image given its clean source is learned from the
two marginals alone.  A closed-form 1D Gaussian special case serves as the
end-to-end oracle.  Everything runs on a self-contained float64 reverse-mode
autodiff engine.
"""

from .autodiff import Tape, Tensor, backward
from .conditioning import ConditionSpec, bicubic_downsample, make_condition
from .data import Corpus, DegradationOracle, synth_corpus
from .evaluation import heldout_nll, ks_statistic, residual_stats
from .gauss1d import (
    Gauss1DSolution,
    SampleSets1D,
    fit_affine_flow,
    fit_closed_form,
    joint_marginal_nll_1d,
    sample_pairs_1d,
    to_standard_base,
)
from .model import DeFlowModel
from .rng import RandomStream
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "Tape",
    "Tensor",
    "backward",
    "ConditionSpec",
    "bicubic_downsample",
    "make_condition",
    "Corpus",
    "DegradationOracle",
    "synth_corpus",
    "heldout_nll",
    "ks_statistic",
    "residual_stats",
    "Gauss1DSolution",
    "SampleSets1D",
    "fit_affine_flow",
    "fit_closed_form",
    "joint_marginal_nll_1d",
    "sample_pairs_1d",
    "to_standard_base",
    "DeFlowModel",
    "RandomStream",
    "TrainConfig",
    "train",
    "__version__",
]
