"""
Gaussian Core
=============
Distribution algebra for the latent hierarchy: diagonal Gaussians over spatial
grids, reparameterised sampling, closed-form KL divergences (standard, general,
residual) and uniform mixtures used as VamPriors.

Everything is parameterised by log standard deviation and is a pure function of
its inputs; random draws take an explicit ``torch.Generator``.
"""

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence, Tuple

import torch

from .errors import ContractViolation

HALF_LOG_TWO_PI = 0.5 * math.log(2.0 * math.pi)


def _check_same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ContractViolation(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


@dataclass(frozen=True)
class DiagonalGaussian:
    """Per-element mean and log-std over a grid"""

    mean: torch.Tensor
    log_std: torch.Tensor

    def __post_init__(self):
        _check_same_shape(self.mean, self.log_std, "DiagonalGaussian")
        if not bool(torch.isfinite(self.log_std.detach()).all()):
            raise ContractViolation("DiagonalGaussian: log_std must be finite")

    @property
    def shape(self) -> torch.Size:
        return self.mean.shape

    @property
    def std(self) -> torch.Tensor:
        return torch.exp(self.log_std)

    @classmethod
    def standard(cls, shape: Sequence[int], like: Optional[torch.Tensor] = None) -> "DiagonalGaussian":
        """N(0, I) over ``shape``"""
        kwargs = {}
        if like is not None:
            kwargs = {"dtype": like.dtype, "device": like.device}
        zeros = torch.zeros(tuple(shape), **kwargs)
        return cls(zeros, zeros.clone())

    def log_prob(self, z: torch.Tensor) -> torch.Tensor:
        """Per-element log density (broadcasts over leading dims of ``z``)"""
        return -HALF_LOG_TWO_PI - self.log_std - 0.5 * ((z - self.mean) * torch.exp(-self.log_std)) ** 2

    def sample(self, generator: Optional[torch.Generator] = None, temperature: float = 1.0) -> torch.Tensor:
        noise = torch.randn(self.shape, generator=generator, dtype=self.mean.dtype, device=self.mean.device)
        return reparam_sample(self, temperature * noise)

    def detach(self) -> "DiagonalGaussian":
        return DiagonalGaussian(self.mean.detach(), self.log_std.detach())

    def index(self, i) -> "DiagonalGaussian":
        return DiagonalGaussian(self.mean[i], self.log_std[i])


@dataclass(frozen=True)
class ResidualPosteriorParams:
    """Decoder prior plus encoder deltas; the posterior is their composition"""

    prior: DiagonalGaussian
    delta_mean: torch.Tensor
    delta_log_std: torch.Tensor

    def __post_init__(self):
        _check_same_shape(self.prior.mean, self.delta_mean, "ResidualPosteriorParams")
        _check_same_shape(self.prior.mean, self.delta_log_std, "ResidualPosteriorParams")

    def compose(self) -> DiagonalGaussian:
        # N(mu + dmu, sigma * dsigma)
        return DiagonalGaussian(self.prior.mean + self.delta_mean, self.prior.log_std + self.delta_log_std)


@dataclass(frozen=True)
class GaussianMixture:
    """Uniform mixture (1/K) sum_k N(mu_k, sigma_k^2)"""

    components: Tuple[DiagonalGaussian, ...]

    def __post_init__(self):
        if len(self.components) < 1:
            raise ContractViolation("GaussianMixture needs at least one component")
        first = self.components[0].shape
        for comp in self.components[1:]:
            if comp.shape != first:
                raise ContractViolation(
                    f"GaussianMixture: component shapes differ {tuple(first)} vs {tuple(comp.shape)}"
                )

    @classmethod
    def from_stacked(cls, stacked: DiagonalGaussian) -> "GaussianMixture":
        """Split a Gaussian with a leading K axis into K components"""
        return cls(tuple(stacked.index(k) for k in range(stacked.shape[0])))

    @property
    def k(self) -> int:
        return len(self.components)

    @property
    def shape(self) -> torch.Size:
        return self.components[0].shape

    def stacked(self) -> DiagonalGaussian:
        return DiagonalGaussian(
            torch.stack([c.mean for c in self.components]),
            torch.stack([c.log_std for c in self.components]),
        )

    def mean(self) -> torch.Tensor:
        return self.stacked().mean.mean(dim=0)

    def sample(
        self,
        batch: int,
        generator: Optional[torch.Generator] = None,
        temperature: float = 1.0,
    ) -> torch.Tensor:
        """Draw ``batch`` samples: pick a component uniformly, then sample it"""
        stacked = self.stacked()
        if temperature == 0:
            return self.mean().expand(batch, *self.shape).clone()
        idx = torch.randint(self.k, (batch,), generator=generator, device=stacked.mean.device)
        chosen = DiagonalGaussian(stacked.mean[idx], stacked.log_std[idx])
        return chosen.sample(generator, temperature)


class MonteCarloKL(NamedTuple):
    estimate: torch.Tensor
    stderr: torch.Tensor


def reparam_sample(dist: DiagonalGaussian, noise: torch.Tensor) -> torch.Tensor:
    """mean + exp(log_std) * noise, differentiable in the distribution parameters"""
    _check_same_shape(dist.mean, noise, "reparam_sample")
    return dist.mean + torch.exp(dist.log_std) * noise


def kl_standard(q: DiagonalGaussian) -> torch.Tensor:
    """Per-element KL[q || N(0, 1)] = 1/2 (mu^2 + sigma^2 - log sigma^2 - 1)"""
    return 0.5 * (q.mean ** 2 + torch.exp(2.0 * q.log_std) - 2.0 * q.log_std - 1.0)


def kl_diag(q: DiagonalGaussian, p: DiagonalGaussian) -> torch.Tensor:
    """Per-element KL[q || p] for diagonal Gaussians"""
    _check_same_shape(q.mean, p.mean, "kl_diag")
    var_ratio = torch.exp(2.0 * (q.log_std - p.log_std))
    mean_term = ((q.mean - p.mean) * torch.exp(-p.log_std)) ** 2
    return 0.5 * (var_ratio + mean_term - 1.0 - 2.0 * (q.log_std - p.log_std))


def relative_kl(params: ResidualPosteriorParams) -> torch.Tensor:
    """Per-element KL between the composed residual posterior and its prior.

    1/2 (dmu^2 / sigma^2 + dsigma^2 - log dsigma^2 - 1); the log term is on the
    delta, which is what keeps the value a true (non-negative) KL.
    """
    mean_term = (params.delta_mean * torch.exp(-params.prior.log_std)) ** 2
    return 0.5 * (mean_term + torch.exp(2.0 * params.delta_log_std) - 2.0 * params.delta_log_std - 1.0)


def _check_mixture_input(m: GaussianMixture, z: torch.Tensor) -> None:
    comp_shape = tuple(m.shape)
    if z.dim() < len(comp_shape) or tuple(z.shape[z.dim() - len(comp_shape):]) != comp_shape:
        raise ContractViolation(
            f"mixture input shape {tuple(z.shape)} does not end with component shape {comp_shape}"
        )


def mixture_log_density(m: GaussianMixture, z: torch.Tensor) -> torch.Tensor:
    """Per-element log[(1/K) sum_k N(z; mu_k, sigma_k^2)] via log-sum-exp.

    ``z`` may carry extra leading (batch/sample) dimensions.
    """
    if m.k < 1:
        raise ContractViolation("mixture must have K >= 1")
    _check_mixture_input(m, z)
    stacked = m.stacked()
    # component axis goes first; broadcast it against z's leading dims
    extra = z.dim() - len(m.shape)
    view = (m.k,) + (1,) * extra + tuple(m.shape)
    log_probs = DiagonalGaussian(stacked.mean.reshape(view), stacked.log_std.reshape(view)).log_prob(z.unsqueeze(0))
    return torch.logsumexp(log_probs, dim=0) - math.log(m.k)


def mc_kl_to_mixture(
    q: DiagonalGaussian,
    m: GaussianMixture,
    n_samples: int = 1,
    generator: Optional[torch.Generator] = None,
) -> MonteCarloKL:
    """Unbiased Monte-Carlo estimate of KL[q || m] summed over all elements of q.

    Returns the sample mean of log q(z) - log m(z) over ``n_samples`` draws z ~ q
    and its standard error (NaN for a single draw).
    """
    if n_samples < 1:
        raise ContractViolation("n_samples must be >= 1")
    _check_mixture_input(m, q.mean)
    noise = torch.randn(
        (n_samples,) + tuple(q.shape), generator=generator, dtype=q.mean.dtype, device=q.mean.device
    )
    z = q.mean + torch.exp(q.log_std) * noise
    log_ratio = q.log_prob(z) - mixture_log_density(m, z)
    per_sample = log_ratio.reshape(n_samples, -1).sum(dim=1)
    estimate = per_sample.mean()
    if n_samples > 1:
        stderr = per_sample.detach().std(unbiased=True) / math.sqrt(n_samples)
    else:
        stderr = torch.full((), float("nan"), dtype=q.mean.dtype, device=q.mean.device)
    return MonteCarloKL(estimate, stderr)


def _single_component_kl(q: DiagonalGaussian, m: GaussianMixture) -> torch.Tensor:
    comp = m.components[0]
    target = DiagonalGaussian(comp.mean.expand_as(q.mean), comp.log_std.expand_as(q.log_std))
    return kl_diag(q, target).sum()


def kl_prior_to_mixture(
    p: DiagonalGaussian,
    m: GaussianMixture,
    n_samples: int = 1,
    generator: Optional[torch.Generator] = None,
) -> MonteCarloKL:
    """KL[p || m] with samples drawn from the decoder prior ``p``.

    A single-component mixture is a plain Gaussian, so K == 1 takes the closed
    form and reports a zero standard error.
    """
    if n_samples < 1:
        raise ContractViolation("n_samples must be >= 1")
    if m.k == 1:
        _check_mixture_input(m, p.mean)
        estimate = _single_component_kl(p, m)
        return MonteCarloKL(estimate, torch.zeros((), dtype=estimate.dtype, device=estimate.device))
    return mc_kl_to_mixture(p, m, n_samples, generator)


def kl_to_mixture(
    q: DiagonalGaussian,
    m: GaussianMixture,
    n_samples: int = 1,
    generator: Optional[torch.Generator] = None,
) -> torch.Tensor:
    """Summed KL[q || m]: closed form when K == 1, Monte-Carlo otherwise"""
    if m.k == 1:
        return _single_component_kl(q, m)
    return mc_kl_to_mixture(q, m, n_samples, generator).estimate
