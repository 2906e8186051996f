"""Likelihood-based distribution matching with score-based priors.

Modules:

* :mod:`scoredm.autodiff` -- reverse-mode autodiff on float64 numpy arrays.
* :mod:`scoredm.networks` -- per-domain Gaussian encoders/decoders and the noise-conditioned score network.
* :mod:`scoredm.priors` -- analytic priors (Gaussian, mixtures), learnable mixtures, blended score priors.
* :mod:`scoredm.objectives` -- VAUB/SAUB, the score-function substitution surrogate, DSM, LSGM and GW costs.
* :mod:`scoredm.trainer` -- Adam, noise schedules, alternating training and the stability driver.
* :mod:`scoredm.data`, :mod:`scoredm.metrics` -- generators, tabular ingestion and evaluation metrics.
* :mod:`scoredm.config`, :mod:`scoredm.experiments`, :mod:`scoredm.cli` -- the ``dm`` experiment command.
"""

from .autodiff import Tensor, detach, finite_difference_gradient, no_grad, reparameterized_sample
from .objectives import (LossConfig, dsm_loss, gw_cost, lsgm_cross_entropy, saub_loss,
                         sfs_cross_entropy_surrogate, total_loss, vaub_loss)
from .priors import BlendedScorePrior, Gaussian, LearnableMixture, MixtureOfGaussians
from .trainer import NoiseSchedule, TrainConfig, alternate_train, pretrain_score, stability_run

__version__ = "0.1.0"

__all__ = [
    "Tensor", "detach", "finite_difference_gradient", "no_grad", "reparameterized_sample",
    "LossConfig", "dsm_loss", "gw_cost", "lsgm_cross_entropy", "saub_loss", "sfs_cross_entropy_surrogate",
    "total_loss", "vaub_loss", "BlendedScorePrior", "Gaussian", "LearnableMixture", "MixtureOfGaussians",
    "NoiseSchedule", "TrainConfig", "alternate_train", "pretrain_score", "stability_run",
]
