"""
Objectives
==========
The four ELBOs (vae / nvae / nvmp / nvmp+), cyclical KL annealing, KL balancing
and the lesion supervision loss.

Units: KL terms are summed over latent elements and averaged over the batch;
the reconstruction log-likelihood is summed over pixels and averaged likewise.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import torch
import torch.nn.functional as F

from .config import ScheduleConfig, Variant
from .errors import ContractViolation
from .gaussian_core import (
    GaussianMixture,
    kl_prior_to_mixture,
    kl_standard,
    kl_to_mixture,
    relative_kl,
)
from .hvae_model import ImageLikelihood, InferenceResult

logger = logging.getLogger(__name__)

BALANCE_EPS = 1e-8
PROB_EPS = 1e-6


@dataclass
class SupervisionInputs:
    pred: torch.Tensor
    label: torch.Tensor
    weight: float = 1.0


@dataclass
class ElboBreakdown:
    """Every term of the objective, pre-weighting, plus the weights applied"""

    recon_ll: torch.Tensor
    kl_per_layer: List[torch.Tensor]
    beta: float
    gammas: List[float]
    vamprior_extra_kl: List[torch.Tensor] = field(default_factory=list)
    supervision_loss: Optional[torch.Tensor] = None
    supervision_weight: float = 0.0
    total_weighted_loss: Optional[torch.Tensor] = None

    def __post_init__(self):
        if self.total_weighted_loss is None:
            self.total_weighted_loss = self.recompute_total()

    def recompute_total(self) -> torch.Tensor:
        total = -self.recon_ll
        total = total + self.beta * sum(g * kl for g, kl in zip(self.gammas, self.kl_per_layer))
        if self.vamprior_extra_kl:
            total = total + self.beta * sum(self.vamprior_extra_kl)
        if self.supervision_loss is not None:
            total = total + self.supervision_weight * self.supervision_loss
        return total

    @property
    def kl_total(self) -> float:
        return float(sum(float(kl.detach()) for kl in self.kl_per_layer))

    def to_record(self) -> Dict[str, object]:
        return {
            "recon_ll": float(self.recon_ll.detach()),
            "kl_per_layer": [float(kl.detach()) for kl in self.kl_per_layer],
            "vamprior_extra_kl": [float(kl.detach()) for kl in self.vamprior_extra_kl],
            "supervision_loss": None if self.supervision_loss is None else float(self.supervision_loss.detach()),
            "beta": self.beta,
            "gammas": list(self.gammas),
            "total_loss": float(self.total_weighted_loss.detach()),
        }


def kl_anneal_coefficient(iteration: int, cfg: ScheduleConfig) -> float:
    """Cyclical linear ramp from beta_init to 1, then a plateau, reset every cycle"""
    if iteration < 0:
        raise ContractViolation("iteration must be non-negative")
    position = iteration % cfg.cycle_length
    progress = position / (cfg.ramp_fraction * cfg.cycle_length)
    if progress >= 1.0:
        return 1.0
    return min(1.0, cfg.beta_init + (1.0 - cfg.beta_init) * progress)


def kl_balancing_coeffs(layer_sizes: Sequence[int], layer_klds: Sequence[float]) -> List[float]:
    """Per-layer KL weights proportional to layer size and current KL.

    Normalised so that sum(gamma_l * kl_l) == sum(kl_l). Layers whose KL is not
    positive (a Monte-Carlo mixture estimate can dip below zero) keep gamma = 1 and
    the rest are balanced among themselves, so the identity holds for any input.
    """
    if len(layer_sizes) != len(layer_klds):
        raise ContractViolation("layer_sizes and layer_klds must have equal length")
    if any(s <= 0 for s in layer_sizes):
        raise ContractViolation("layer sizes must be positive")
    klds = [float(kl) for kl in layer_klds]
    active = [l for l, kl in enumerate(klds) if kl > 0.0]
    gammas = [1.0] * len(klds)
    if not active:
        return gammas
    total = math.fsum(klds[l] for l in active)
    raw = {l: layer_sizes[l] * max(klds[l], BALANCE_EPS) for l in active}
    norm = math.fsum(raw[l] * klds[l] for l in active)
    for l in active:
        gammas[l] = raw[l] * total / norm
    return gammas


def supervision_loss(pred: torch.Tensor, label: torch.Tensor) -> torch.Tensor:
    """BCE + (1 - soft Dice) with +1 smoothing; Dice is per image, then averaged"""
    if pred.shape != label.shape:
        raise ContractViolation(f"pred {tuple(pred.shape)} and label {tuple(label.shape)} differ in shape")
    if not bool(((label == 0) | (label == 1)).all()):
        raise ContractViolation("supervision labels must be binary")
    label = label.to(pred.dtype)
    pred = pred.clamp(PROB_EPS, 1.0 - PROB_EPS)
    bce = F.binary_cross_entropy(pred, label)
    if pred.dim() <= 2:
        pred, label = pred.unsqueeze(0), label.unsqueeze(0)
    p = pred.reshape(pred.shape[0], -1)
    y = label.reshape(label.shape[0], -1)
    dice = (2.0 * (p * y).sum(dim=1) + 1.0) / (p.sum(dim=1) + y.sum(dim=1) + 1.0)
    return bce + (1.0 - dice).mean()


def _per_image(values: torch.Tensor) -> torch.Tensor:
    return values.reshape(values.shape[0], -1).sum(dim=1).mean()


def compute_elbo(
    variant: Variant,
    inference: InferenceResult,
    x: torch.Tensor,
    likelihood: Optional[ImageLikelihood] = None,
    iteration: int = 0,
    schedule: Optional[ScheduleConfig] = None,
    mixtures: Optional[Sequence[GaussianMixture]] = None,
    supervision: Optional[SupervisionInputs] = None,
    generator: Optional[torch.Generator] = None,
    kl_balancing: bool = True,
    layer_sizes: Optional[Sequence[int]] = None,
    n_mc_samples: int = 1,
    beta: Optional[float] = None,
) -> ElboBreakdown:
    """Assemble the negative ELBO for ``variant`` from an inference pass.

    ``beta`` overrides the annealing schedule when given.
    """
    variant = Variant(variant)
    if inference.variant is not variant:
        raise ContractViolation(
            f"inference produced by {inference.variant.value} cannot feed a {variant.value} objective"
        )
    posteriors = inference.posteriors
    n_layers = len(inference.priors)
    if len(posteriors) != n_layers or any(p is None for p in posteriors):
        raise ContractViolation("objective needs a posterior for every layer (run infer, not decode)")
    if variant.is_residual and any(inference.residuals[l] is None for l in range(1, n_layers)):
        raise ContractViolation(f"{variant.value} needs residual parameters for layers 1..L")
    if not variant.is_residual and any(r is not None for r in inference.residuals):
        raise ContractViolation("vae objective got residual parameters")
    if variant.uses_vamprior:
        needed = n_layers if variant is Variant.NVMP_PLUS else 1
        if mixtures is None or len(mixtures) < needed:
            raise ContractViolation(f"{variant.value} needs VamPrior mixtures for {needed} layer(s)")

    likelihood = likelihood or inference.likelihood
    batch = x.shape[0]
    recon_ll = _per_image(likelihood.log_prob(x))

    kl_terms: List[torch.Tensor] = []
    for l in range(n_layers):
        if l == 0:
            if variant.uses_vamprior:
                kl = kl_to_mixture(posteriors[0], mixtures[0], n_mc_samples, generator) / batch
            else:
                kl = _per_image(kl_standard(posteriors[0]))
        elif variant.is_residual:
            kl = _per_image(relative_kl(inference.residuals[l]))
        else:
            kl = _per_image(kl_standard(posteriors[l]))
        kl_terms.append(kl)

    extra: List[torch.Tensor] = []
    if variant is Variant.NVMP_PLUS:
        for l in range(1, n_layers):
            kl = kl_prior_to_mixture(inference.priors[l], mixtures[l], n_mc_samples, generator)
            extra.append(kl.estimate / batch)

    if beta is None:
        beta = kl_anneal_coefficient(iteration, schedule or ScheduleConfig())
    if kl_balancing:
        if layer_sizes is None:
            layer_sizes = [int(p.mean[0].numel()) for p in posteriors]
        gammas = kl_balancing_coeffs(layer_sizes, [float(kl.detach()) for kl in kl_terms])
    else:
        gammas = [1.0] * n_layers

    sup_loss = None
    sup_weight = 0.0
    if supervision is not None:
        sup_loss = supervision_loss(supervision.pred, supervision.label)
        sup_weight = supervision.weight

    return ElboBreakdown(
        recon_ll=recon_ll,
        kl_per_layer=kl_terms,
        beta=beta,
        gammas=gammas,
        vamprior_extra_kl=extra,
        supervision_loss=sup_loss,
        supervision_weight=sup_weight,
    )
