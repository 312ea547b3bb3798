"""
Hierarchical VAE
================
(L+1)-group spatial latent hierarchy with a bottom-up encoder emitting per-layer
deltas, a top-down decoder emitting per-layer priors and the image likelihood,
and bidirectional inference combining the two.

Variants:
    vae    mean-field: posteriors read the deltas as absolute parameters, N(0, I) priors
    nvae   residual: posterior_l = N(mu_l + dmu_l, sigma_l * dsigma_l) around decoder priors
    nvmp   nvae with a K-component VamPrior on z_0
    nvmp+  nvmp, decoder priors additionally pulled toward per-layer VamPriors

Tensors are (batch, channel, height, width); z_l has spatial size
resolution / 2^(L-l), so z_L is full resolution and z_0 the coarsest.
"""

import logging
from dataclasses import dataclass, field
from typing import Collection, List, Mapping, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import RunConfig, SupervisionConfig, Variant
from .errors import ContractViolation
from .gaussian_core import DiagonalGaussian, GaussianMixture, ResidualPosteriorParams

logger = logging.getLogger(__name__)

SEGMENT_EPS = 1e-6


@dataclass
class LatentHierarchy:
    """Ordered latent groups z_0..z_L"""

    groups: List[torch.Tensor]

    def __len__(self) -> int:
        return len(self.groups)

    def __getitem__(self, layer: int) -> torch.Tensor:
        return self.groups[layer]

    @property
    def levels(self) -> int:
        return len(self.groups) - 1

    def replace(self, layer: int, value: torch.Tensor) -> "LatentHierarchy":
        _check_layer(layer, self.levels)
        groups = list(self.groups)
        groups[layer] = value
        return LatentHierarchy(groups)

    def detach(self) -> "LatentHierarchy":
        return LatentHierarchy([g.detach() for g in self.groups])


def _check_layer(layer: int, levels: int) -> None:
    if not 0 <= layer <= levels:
        raise ContractViolation(f"layer {layer} outside [0, {levels}]")


def scale_layer(latents: LatentHierarchy, layer: int, factor: float) -> LatentHierarchy:
    """Copy of ``latents`` with group ``layer`` multiplied by ``factor``"""
    _check_layer(layer, latents.levels)
    return latents.replace(layer, latents[layer] * factor)


@dataclass
class ImageLikelihood:
    """Gaussian p(x | z_L) with one global log-std"""

    mean: torch.Tensor
    log_std: torch.Tensor

    def distribution(self) -> DiagonalGaussian:
        return DiagonalGaussian(self.mean, self.log_std.expand_as(self.mean))

    def log_prob(self, x: torch.Tensor) -> torch.Tensor:
        return self.distribution().log_prob(x)


@dataclass
class InferenceResult:
    """Latent sample plus every distribution the objectives need.

    ``priors[0]`` is always N(0, I); VamPrior variants take their z_0 prior from
    ``HierarchicalVAE.vamprior_mixtures``. ``residuals[l]`` is set for residual
    variants at l >= 1.
    """

    variant: Variant
    latents: LatentHierarchy
    likelihood: ImageLikelihood
    priors: List[DiagonalGaussian]
    posteriors: List[Optional[DiagonalGaussian]] = field(default_factory=list)
    residuals: List[Optional[ResidualPosteriorParams]] = field(default_factory=list)
    deltas: Optional[List[DiagonalGaussian]] = None

    @property
    def x_mean(self) -> torch.Tensor:
        return self.likelihood.mean


class ResidualCell(nn.Module):
    """Two 3x3 convolutions with SiLU and an identity skip"""

    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.act = nn.SiLU()

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return h + self.conv2(self.act(self.conv1(self.act(h))))


def _shrink_init(conv: nn.Conv2d, scale: float = 0.1) -> nn.Conv2d:
    with torch.no_grad():
        conv.weight.mul_(scale)
        if conv.bias is not None:
            conv.bias.zero_()
    return conv


class HierarchicalVAE(nn.Module):
    """Encoder, decoder, likelihood, optional VamPrior pseudo-inputs and segmentation head"""

    def __init__(
        self,
        variant: Variant = Variant.NVAE,
        levels: int = 4,
        latent_channels: int = 2,
        resolution: int = 64,
        base_channels: int = 32,
        max_channels: int = 128,
        k: int = 16,
        supervision: Optional[SupervisionConfig] = None,
    ):
        super().__init__()
        variant = Variant(variant)
        if resolution % (2 ** levels) != 0:
            raise ContractViolation(f"resolution {resolution} not divisible by 2^{levels}")
        if variant.uses_vamprior and k < 1:
            raise ContractViolation("VamPrior variants need k >= 1")
        supervision = supervision or SupervisionConfig()
        if supervision.enabled:
            _check_layer(supervision.target_layer, levels)

        self.variant = variant
        self.levels = levels
        self.latent_channels = latent_channels
        self.resolution = resolution
        self.k = k if variant.uses_vamprior else 0
        self.supervision = supervision

        c = latent_channels
        ch = [min(base_channels * 2 ** (levels - l), max_channels) for l in range(levels + 1)]
        self.channels = ch

        # bottom-up: full resolution (z_L) down to z_0
        self.stem = nn.Conv2d(1, ch[levels], 3, padding=1)
        self.enc_cells = nn.ModuleList([ResidualCell(ch[l]) for l in range(levels + 1)])
        self.enc_taps = nn.ModuleList([_shrink_init(nn.Conv2d(ch[l], 2 * c, 1)) for l in range(levels + 1)])
        self.enc_down = nn.ModuleList(
            [nn.Identity()] + [nn.Conv2d(ch[l], ch[l - 1], 3, stride=2, padding=1) for l in range(1, levels + 1)]
        )

        # top-down: z_0 up to z_L, then the likelihood mean
        self.z_proj = nn.ModuleList([nn.Conv2d(c, ch[l], 1) for l in range(levels + 1)])
        self.dec_cells = nn.ModuleList([ResidualCell(ch[l]) for l in range(levels + 1)])
        self.dec_up = nn.ModuleList(
            [nn.Identity()]
            + [
                nn.Sequential(nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(ch[l - 1], ch[l], 3, padding=1))
                for l in range(1, levels + 1)
            ]
        )
        if variant.is_residual:
            self.prior_heads = nn.ModuleList(
                [nn.Identity()] + [_shrink_init(nn.Conv2d(ch[l], 2 * c, 1)) for l in range(1, levels + 1)]
            )
        self.out_cell = ResidualCell(ch[levels])
        self.out_head = nn.Conv2d(ch[levels], 1, 1)
        self.likelihood_log_std = nn.Parameter(torch.zeros(()))

        if variant.uses_vamprior:
            self.pseudo_inputs = nn.Parameter(torch.randn(k, 1, resolution, resolution))

        if supervision.enabled:
            self.seg_conv = nn.Conv2d(c, 16, 3, padding=1)
            self.seg_out = nn.Conv2d(16, 1, 1)

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "HierarchicalVAE":
        return cls(
            variant=cfg.variant,
            levels=cfg.levels,
            latent_channels=cfg.latent_channels,
            resolution=cfg.resolution,
            base_channels=cfg.base_channels,
            max_channels=cfg.max_channels,
            k=cfg.k,
            supervision=cfg.supervision,
        )

    # ------------------------------------------------------------------ shapes

    def latent_shape(self, layer: int) -> Tuple[int, int, int]:
        _check_layer(layer, self.levels)
        side = self.resolution // 2 ** (self.levels - layer)
        return (self.latent_channels, side, side)

    def layer_sizes(self) -> List[int]:
        sizes = []
        for l in range(self.levels + 1):
            c, h, w = self.latent_shape(l)
            sizes.append(c * h * w)
        return sizes

    def _as_batch(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() == 2:
            x = x.unsqueeze(0).unsqueeze(0)
        elif x.dim() == 3:
            x = x.unsqueeze(1)
        expected = (1, self.resolution, self.resolution)
        if x.dim() != 4 or tuple(x.shape[1:]) != expected:
            raise ContractViolation(f"expected images of shape (B, {expected}), got {tuple(x.shape)}")
        return x

    def _standard(self, batch: int, layer: int) -> DiagonalGaussian:
        return DiagonalGaussian.standard((batch,) + self.latent_shape(layer), like=self.likelihood_log_std)

    # --------------------------------------------------------------- inference

    def encode(self, x: torch.Tensor) -> List[DiagonalGaussian]:
        """Per-layer deltas (dmu_l, dlog_sigma_l) for l = 0..L"""
        h = self.stem(self._as_batch(x))
        deltas: List[Optional[DiagonalGaussian]] = [None] * (self.levels + 1)
        for l in range(self.levels, -1, -1):
            h = self.enc_cells[l](h)
            delta_mean, delta_log_std = self.enc_taps[l](h).chunk(2, dim=1)
            deltas[l] = DiagonalGaussian(delta_mean, delta_log_std)
            if l > 0:
                h = self.enc_down[l](h)
        return deltas

    def vamprior_mixtures(self) -> List[GaussianMixture]:
        """(1/K) sum_k q(z_l | u_k) for every layer, from the pseudo-inputs"""
        if not self.variant.uses_vamprior:
            raise ContractViolation(f"variant {self.variant.value} has no VamPrior")
        return [GaussianMixture.from_stacked(d) for d in self.encode(self.pseudo_inputs)]

    def init_pseudo_inputs(
        self,
        images: torch.Tensor,
        generator: Optional[torch.Generator] = None,
        noise: float = 0.01,
    ) -> None:
        """Seed the pseudo-inputs with K training images plus small noise"""
        if not self.variant.uses_vamprior:
            return
        images = self._as_batch(images)
        if images.shape[0] < self.k:
            raise ContractViolation(f"need at least k={self.k} images to initialise pseudo-inputs")
        pick = torch.randperm(images.shape[0], generator=generator)[: self.k]
        jitter = torch.randn(self.pseudo_inputs.shape, generator=generator, dtype=images.dtype)
        with torch.no_grad():
            self.pseudo_inputs.copy_(images[pick] + noise * jitter)

    def _prior(self, layer: int, h: Optional[torch.Tensor], batch: int) -> DiagonalGaussian:
        if layer == 0 or not self.variant.is_residual:
            return self._standard(batch, layer)
        mean, log_std = self.prior_heads[layer](h).chunk(2, dim=1)
        return DiagonalGaussian(mean, log_std)

    @staticmethod
    def _draw(
        dist: DiagonalGaussian,
        generator: Optional[torch.Generator],
        mean_mode: bool,
        temperature: float = 1.0,
    ) -> torch.Tensor:
        if mean_mode or temperature == 0:
            return dist.mean
        return dist.sample(generator, temperature)

    def _top_down(
        self,
        batch: int,
        deltas: Optional[Sequence[DiagonalGaussian]] = None,
        latents: Optional[LatentHierarchy] = None,
        generator: Optional[torch.Generator] = None,
        mean_mode: bool = False,
        prior_layers: Collection[int] = (),
        temperature: float = 1.0,
        fixed: Optional[Mapping[int, torch.Tensor]] = None,
    ) -> InferenceResult:
        if temperature < 0:
            raise ContractViolation(f"temperature must be >= 0, got {temperature}")
        for layer in prior_layers:
            _check_layer(layer, self.levels)
        fixed = dict(fixed or {})
        for layer, z in fixed.items():
            _check_layer(layer, self.levels)
            if tuple(z.shape[1:]) != self.latent_shape(layer) or z.shape[0] not in (1, batch):
                raise ContractViolation(
                    f"fixed z_{layer} has shape {tuple(z.shape)}, expected ({batch} or 1, {self.latent_shape(layer)})"
                )

        groups, priors, posteriors, residuals = [], [], [], []
        mixture0 = None
        h = None
        for l in range(self.levels + 1):
            if l > 0:
                h = self.dec_up[l](h)
            prior = self._prior(l, h, batch)

            posterior, residual = None, None
            if deltas is not None:
                d = deltas[l]
                if self.variant.is_residual and l > 0:
                    residual = ResidualPosteriorParams(prior, d.mean, d.log_std)
                    posterior = residual.compose()
                else:
                    posterior = d

            if latents is not None:
                z = latents[l]
            elif l in fixed:
                z = fixed[l].expand((batch,) + self.latent_shape(l))
            elif posterior is not None and l not in prior_layers:
                z = self._draw(posterior, generator, mean_mode)
            elif l == 0 and self.variant.uses_vamprior:
                if mixture0 is None:
                    mixture0 = self.vamprior_mixtures()[0]
                z = mixture0.sample(batch, generator, temperature)
            else:
                z = self._draw(prior, generator, False, temperature)

            injected = self.z_proj[l](z)
            h = self.dec_cells[l](injected if h is None else h + injected)
            groups.append(z)
            priors.append(prior)
            posteriors.append(posterior)
            residuals.append(residual)

        x_mean = self.out_head(self.out_cell(h))
        return InferenceResult(
            variant=self.variant,
            latents=LatentHierarchy(groups),
            likelihood=ImageLikelihood(x_mean, self.likelihood_log_std),
            priors=priors,
            posteriors=posteriors,
            residuals=residuals,
            deltas=list(deltas) if deltas is not None else None,
        )

    def infer(
        self,
        x: Optional[torch.Tensor] = None,
        generator: Optional[torch.Generator] = None,
        *,
        mean_mode: bool = False,
        deltas: Optional[Sequence[DiagonalGaussian]] = None,
        prior_layers: Collection[int] = (),
        temperature: float = 1.0,
    ) -> InferenceResult:
        """Bidirectional inference.

        Args:
            x: images (B, 1, R, R); may be omitted when ``deltas`` is given
            generator: RNG for posterior/prior draws
            mean_mode: use posterior means instead of samples
            deltas: precomputed (possibly mixed) encoder deltas
            prior_layers: layers drawn from their conditional prior instead of the posterior
            temperature: std scale for prior draws
        """
        if deltas is None:
            if x is None:
                raise ContractViolation("infer needs images or precomputed deltas")
            deltas = self.encode(x)
        if len(deltas) != self.levels + 1:
            raise ContractViolation(f"expected {self.levels + 1} delta groups, got {len(deltas)}")
        for l, d in enumerate(deltas):
            if tuple(d.shape[1:]) != self.latent_shape(l):
                raise ContractViolation(f"delta {l} has shape {tuple(d.shape)}, expected {self.latent_shape(l)}")
        return self._top_down(
            deltas[0].shape[0],
            deltas=deltas,
            generator=generator,
            mean_mode=mean_mode,
            prior_layers=prior_layers,
            temperature=temperature,
        )

    forward = infer

    # -------------------------------------------------------------- generation

    def decode(self, latents: LatentHierarchy) -> InferenceResult:
        """Top-down pass with every group fixed (priors are recomputed along the way)"""
        if len(latents) != self.levels + 1:
            raise ContractViolation(f"expected {self.levels + 1} latent groups, got {len(latents)}")
        return self._top_down(latents[0].shape[0], latents=latents)

    def sample_prior(
        self,
        n: int,
        generator: Optional[torch.Generator] = None,
        temperature: float = 1.0,
        fixed: Optional[Mapping[int, torch.Tensor]] = None,
    ) -> InferenceResult:
        """Ancestral sampling from the generative model.

        ``fixed`` maps layer -> z_l of shape (n or 1, C, h, w); those groups are held
        and every other group is drawn from its prior given them.
        """
        if n < 1:
            raise ContractViolation("n must be >= 1")
        return self._top_down(n, generator=generator, temperature=temperature, fixed=fixed)

    def generate(
        self,
        n: int = 1,
        generator: Optional[torch.Generator] = None,
        temperature: float = 1.0,
    ) -> torch.Tensor:
        return self.sample_prior(n, generator, temperature).x_mean

    def reconstruct(
        self,
        x: torch.Tensor,
        generator: Optional[torch.Generator] = None,
        mean_mode: bool = False,
    ) -> torch.Tensor:
        return self.infer(x, generator, mean_mode=mean_mode).x_mean

    # ------------------------------------------------------------ supervision

    def segment(self, z_p: torch.Tensor) -> torch.Tensor:
        """Lesion probabilities (B, 1, R, R) in (0, 1) from a z_P sample"""
        if not self.supervision.enabled:
            raise ContractViolation("segment() requires supervision to be enabled")
        expected = self.latent_shape(self.supervision.target_layer)
        if tuple(z_p.shape[1:]) != expected:
            raise ContractViolation(f"z_P has shape {tuple(z_p.shape)}, expected (B, {expected})")
        h = self.seg_conv(z_p)
        h = F.interpolate(h, size=(self.resolution, self.resolution), mode="bilinear", align_corners=False)
        return torch.sigmoid(self.seg_out(h)).clamp(SEGMENT_EPS, 1.0 - SEGMENT_EPS)

    def describe(self) -> str:
        n_params = sum(p.numel() for p in self.parameters())
        shapes = ", ".join(f"z{l}={self.latent_shape(l)}" for l in range(self.levels + 1))
        return f"{self.variant.value} L={self.levels} params={n_params:,} latents: {shapes}"
