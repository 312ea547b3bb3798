"""
Tests for the objectives: annealing, balancing, supervision loss, ELBO assembly and gradients.
"""

import math

import numpy as np
import pytest
import torch

from hvae.config import ScheduleConfig, Variant
from hvae.errors import ContractViolation
from hvae.gaussian_core import DiagonalGaussian, GaussianMixture, ResidualPosteriorParams, kl_standard
from hvae.hvae_model import ImageLikelihood, InferenceResult, LatentHierarchy
from hvae.objectives import (
    SupervisionInputs,
    compute_elbo,
    kl_anneal_coefficient,
    kl_balancing_coeffs,
    supervision_loss,
)

VARIANTS = ["vae", "nvae", "nvmp", "nvmp+"]


def _images(batch=2, seed=0, dtype=torch.float32):
    return torch.randn(batch, 1, 16, 16, generator=torch.Generator().manual_seed(seed), dtype=dtype)


def _loss(model, x, seed=0, **kwargs):
    generator = torch.Generator().manual_seed(seed)
    inference = model.infer(x, generator)
    mixtures = model.vamprior_mixtures() if model.variant.uses_vamprior else None
    return compute_elbo(model.variant, inference, x, mixtures=mixtures, generator=generator,
                        layer_sizes=model.layer_sizes(), **kwargs)


# ----------------------------------------------------------------- schedule

def test_schedule_values_under_defaults():
    cfg = ScheduleConfig()
    assert kl_anneal_coefficient(0, cfg) == pytest.approx(2e-7, abs=1e-15)
    assert kl_anneal_coefficient(5000, cfg) == 1.0
    assert kl_anneal_coefficient(7500, cfg) == 1.0
    assert kl_anneal_coefficient(10000, cfg) == pytest.approx(2e-7, abs=1e-15)
    assert kl_anneal_coefficient(2500, cfg) == pytest.approx(2e-7 + (1 - 2e-7) * 0.5)


def test_schedule_is_monotone_within_the_ramp():
    cfg = ScheduleConfig(cycle_length=100, ramp_fraction=0.5)
    values = [kl_anneal_coefficient(i, cfg) for i in range(100)]
    assert all(b >= a for a, b in zip(values, values[1:]))
    assert all(0 < v <= 1 for v in values)


def test_schedule_rejects_negative_iteration():
    with pytest.raises(ContractViolation):
        kl_anneal_coefficient(-1, ScheduleConfig())


def test_schedule_config_validates_ranges():
    with pytest.raises(ValueError):
        ScheduleConfig(beta_init=0.0)
    with pytest.raises(ValueError):
        ScheduleConfig(cycle_length=0)


# ---------------------------------------------------------------- balancing

def test_balancing_conserves_total_kl():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(1, 7))
        sizes = rng.integers(1, 5000, size=n).tolist()
        klds = rng.exponential(3.0, size=n).tolist()
        gammas = kl_balancing_coeffs(sizes, klds)
        assert abs(sum(g * k for g, k in zip(gammas, klds)) - sum(klds)) < 1e-9 * max(1.0, sum(klds))
        assert all(g >= 0 for g in gammas)


def test_balancing_with_zero_kl_returns_ones():
    assert kl_balancing_coeffs([10, 20, 30], [0.0, 0.0, 0.0]) == [1.0, 1.0, 1.0]


def test_balancing_upweights_large_layers_with_large_kl():
    gammas = kl_balancing_coeffs([10, 1000], [1.0, 1.0])
    assert gammas[1] > gammas[0]


def test_balancing_matches_the_worked_example():
    assert kl_balancing_coeffs([1, 3], [2.0, 2.0]) == pytest.approx([0.5, 1.5], abs=1e-12)


def test_balancing_leaves_negative_estimates_at_one():
    gammas = kl_balancing_coeffs([1, 1], [-0.5, 2.0])
    assert gammas == pytest.approx([1.0, 1.0])
    assert gammas[0] * -0.5 + gammas[1] * 2.0 == pytest.approx(1.5, abs=1e-12)


def test_balancing_conserves_total_kl_with_negative_entries():
    rng = np.random.default_rng(1)
    for _ in range(200):
        n = int(rng.integers(2, 7))
        sizes = rng.integers(1, 5000, size=n).tolist()
        klds = rng.normal(0.5, 2.0, size=n).tolist()
        gammas = kl_balancing_coeffs(sizes, klds)
        weighted = sum(g * k for g, k in zip(gammas, klds))
        assert abs(weighted - sum(klds)) < 1e-9 * max(1.0, sum(abs(k) for k in klds))
        assert all(g == 1.0 for g, k in zip(gammas, klds) if k <= 0)


@pytest.mark.parametrize("variant", ["nvmp", "nvmp+"])
def test_balanced_vamprior_elbo_conserves_total_kl(tiny_model, variant):
    model = tiny_model(variant, dtype=torch.float64)
    for seed in range(5):
        elbo = _loss(model, _images(dtype=torch.float64, seed=seed), seed=seed, beta=1.0)
        kls = [float(kl) for kl in elbo.kl_per_layer]
        assert sum(g * k for g, k in zip(elbo.gammas, kls)) == pytest.approx(sum(kls), abs=1e-9)


def test_balancing_rejects_mismatched_lengths():
    with pytest.raises(ContractViolation):
        kl_balancing_coeffs([1, 2], [1.0])


# -------------------------------------------------------------- supervision

def test_supervision_loss_is_small_for_perfect_prediction():
    label = torch.zeros(2, 1, 8, 8)
    label[:, :, 2:5, 2:5] = 1.0
    perfect = supervision_loss(label.clone(), label)
    wrong = supervision_loss(1.0 - label, label)
    assert float(perfect) < 1e-3
    assert float(wrong) > float(perfect)


def test_supervision_loss_matches_hand_computation():
    """10% positives predicted at 0.8, negatives at 0.3"""
    label = torch.zeros(1, 1, 10, 10, dtype=torch.float64)
    label[0, 0, 0, :] = 1.0
    pred = torch.where(label > 0, torch.tensor(0.8, dtype=torch.float64), torch.tensor(0.3, dtype=torch.float64))
    bce = (10 * -math.log(0.8) + 90 * -math.log(0.7)) / 100
    dice = (2 * 8.0 + 1) / ((8.0 + 27.0) + 10.0 + 1)
    assert float(supervision_loss(pred, label)) == pytest.approx(bce + 1 - dice, abs=1e-12)


def test_supervision_loss_rejects_soft_labels_and_shapes():
    with pytest.raises(ContractViolation):
        supervision_loss(torch.full((1, 1, 4, 4), 0.5), torch.full((1, 1, 4, 4), 0.5))
    with pytest.raises(ContractViolation):
        supervision_loss(torch.full((1, 1, 4, 4), 0.5), torch.zeros(1, 1, 4, 3))


# --------------------------------------------------------------------- elbo

@pytest.mark.parametrize("variant", VARIANTS)
def test_elbo_is_finite_for_every_variant(tiny_model, variant):
    model = tiny_model(variant)
    elbo = _loss(model, _images(), iteration=3)
    assert torch.isfinite(elbo.total_weighted_loss)
    assert len(elbo.kl_per_layer) == 3
    assert len(elbo.vamprior_extra_kl) == (2 if variant == "nvmp+" else 0)
    assert float(elbo.total_weighted_loss) == pytest.approx(float(elbo.recompute_total()))


def test_elbo_includes_weighted_supervision(tiny_model):
    model = tiny_model("nvae", supervise_layer=1)
    x = _images()
    generator = torch.Generator().manual_seed(0)
    inference = model.infer(x, generator)
    label = torch.zeros(2, 1, 16, 16)
    label[:, :, 6:9, 6:9] = 1.0
    sup = SupervisionInputs(model.segment(inference.latents[1]), label, weight=2.0)
    with_sup = compute_elbo("nvae", inference, x, supervision=sup, beta=1.0)
    without = compute_elbo("nvae", inference, x, beta=1.0)
    expected = float(without.total_weighted_loss) + 2.0 * float(with_sup.supervision_loss)
    assert float(with_sup.total_weighted_loss) == pytest.approx(expected, rel=1e-6)


def test_elbo_rejects_variant_mismatch(tiny_model):
    model = tiny_model("nvae")
    x = _images()
    inference = model.infer(x, torch.Generator().manual_seed(0))
    with pytest.raises(ContractViolation):
        compute_elbo(Variant.VAE, inference, x)


def test_vamprior_objective_requires_mixtures(tiny_model):
    model = tiny_model("nvmp")
    x = _images()
    inference = model.infer(x, torch.Generator().manual_seed(0))
    with pytest.raises(ContractViolation):
        compute_elbo("nvmp", inference, x)


def test_objective_rejects_decoded_results(tiny_model):
    model = tiny_model("nvae")
    x = _images()
    decoded = model.decode(model.infer(x, mean_mode=True).latents)
    with pytest.raises(ContractViolation):
        compute_elbo("nvae", decoded, x)


def test_single_standard_vamprior_nests_nvae(tiny_model):
    """nvmp with K=1 and a N(0, I) pseudo-posterior is the nvae objective"""
    nvae = tiny_model("nvae", dtype=torch.float64)
    nvmp = tiny_model("nvmp", dtype=torch.float64, k=1)
    state = {k: v for k, v in nvae.state_dict().items()}
    missing, unexpected = nvmp.load_state_dict(state, strict=False)
    assert missing == ["pseudo_inputs"] and not unexpected

    x = _images(dtype=torch.float64)
    mixtures = [GaussianMixture((DiagonalGaussian.standard(nvmp.latent_shape(l), like=x),)) for l in range(3)]
    ref = _loss(nvae, x, seed=5, iteration=123)
    inference = nvmp.infer(x, torch.Generator().manual_seed(5))
    nested = compute_elbo("nvmp", inference, x, mixtures=mixtures, iteration=123, layer_sizes=nvmp.layer_sizes())
    assert abs(float(nested.total_weighted_loss) - float(ref.total_weighted_loss)) < 1e-6


@pytest.mark.parametrize("variant", VARIANTS)
def test_elbo_gradient_matches_finite_differences(tiny_model, variant):
    """Autograd against central differences on 50 random parameters per variant (200 in total)"""
    model = tiny_model(variant, dtype=torch.float64, seed=1)
    x = _images(batch=2, seed=2, dtype=torch.float64)

    def loss() -> torch.Tensor:
        return _loss(model, x, seed=7, beta=1.0, kl_balancing=False).total_weighted_loss

    model.zero_grad()
    loss().backward()
    params = [p for p in model.parameters() if p.requires_grad]
    rng = np.random.default_rng(11)
    h = 1e-5
    for _ in range(50):
        p = params[int(rng.integers(len(params)))]
        i = int(rng.integers(p.numel()))
        flat = p.data.view(-1)
        analytic = float(p.grad.view(-1)[i])
        with torch.no_grad():
            original = float(flat[i])
            flat[i] = original + h
            up = float(loss())
            flat[i] = original - h
            down = float(loss())
            flat[i] = original
        numeric = (up - down) / (2 * h)
        scale = max(abs(analytic), abs(numeric))
        assert abs(analytic - numeric) <= 1e-3 * scale + 1e-6, (variant, analytic, numeric)


def _scalar_grid(value: float) -> torch.Tensor:
    return torch.tensor(value, dtype=torch.float64).reshape(1, 1, 1, 1)


def _gauss_kl(m1, s1, m2, s2) -> float:
    return math.log(s2 / s1) + (s1 ** 2 + (m1 - m2) ** 2) / (2 * s2 ** 2) - 0.5


def test_nvae_objective_matches_a_scalar_oracle():
    """Two one-element layers: recon from the Gaussian pdf, KLs from the textbook formula"""
    prior1 = DiagonalGaussian(_scalar_grid(0.3), _scalar_grid(-0.2))
    residual = ResidualPosteriorParams(prior1, _scalar_grid(0.5), _scalar_grid(0.1))
    q0 = DiagonalGaussian(_scalar_grid(-0.4), _scalar_grid(0.25))
    inference = InferenceResult(
        variant=Variant.NVAE,
        latents=LatentHierarchy([_scalar_grid(0.1), _scalar_grid(0.7)]),
        likelihood=ImageLikelihood(_scalar_grid(0.2), torch.tensor(-0.5, dtype=torch.float64)),
        priors=[DiagonalGaussian(_scalar_grid(0.0), _scalar_grid(0.0)), prior1],
        posteriors=[q0, residual.compose()],
        residuals=[None, residual],
    )
    x = _scalar_grid(0.9)
    elbo = compute_elbo("nvae", inference, x, beta=0.5, kl_balancing=False)

    sx = math.exp(-0.5)
    recon = -0.5 * ((0.9 - 0.2) / sx) ** 2 - math.log(sx) - 0.5 * math.log(2 * math.pi)
    kl0 = _gauss_kl(-0.4, math.exp(0.25), 0.0, 1.0)
    kl1 = _gauss_kl(0.3 + 0.5, math.exp(-0.2 + 0.1), 0.3, math.exp(-0.2))
    assert float(elbo.recon_ll) == pytest.approx(recon, abs=1e-12)
    assert [float(kl) for kl in elbo.kl_per_layer] == pytest.approx([kl0, kl1], abs=1e-12)
    assert float(elbo.total_weighted_loss) == pytest.approx(-recon + 0.5 * (kl0 + kl1), abs=1e-12)


def test_nvae_with_zero_lower_deltas_pays_only_the_top_kl(tiny_model):
    model = tiny_model("nvae", dtype=torch.float64)
    x = _images(dtype=torch.float64)
    deltas = model.encode(x)
    zero = [DiagonalGaussian(torch.zeros_like(d.mean), torch.zeros_like(d.log_std)) for d in deltas[1:]]
    zeroed = [deltas[0]] + zero
    inference = model.infer(deltas=zeroed, generator=torch.Generator().manual_seed(0))
    elbo = compute_elbo("nvae", inference, x, beta=1.0, kl_balancing=False)
    assert [float(kl) for kl in elbo.kl_per_layer[1:]] == [0.0, 0.0]
    top = float(kl_standard(deltas[0]).sum()) / x.shape[0]
    assert elbo.kl_total == pytest.approx(top, rel=1e-10)
