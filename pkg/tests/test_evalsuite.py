"""
Tests for the evaluation suite: metrics against hand computations, the Lasso probe and latent manipulations.
"""

import logging

import numpy as np
import pytest
import torch

from hvae.errors import ContractViolation, DataError, ProbeUndefinedError
from hvae.evalsuite import (
    PSNR_CAP_DB,
    RESAMPLE_PATHOLOGY,
    TRANSPLANT_PATHOLOGY,
    attribute_sensitivity,
    conditional_resample,
    evaluate_reconstructions,
    fid_surrogate,
    fit_lasso_probe,
    frechet_distance,
    informativeness_probe,
    layer_variation_grid,
    make_grid,
    pathology_layer,
    psnr,
    sensitivity_gallery,
    sensitivity_scan,
    ssim,
    style_mix,
    vamprior_cluster_grid,
    write_f32,
    write_json,
    write_pgm,
)


def _image(seed=0, size=16):
    return torch.randn(1, 1, size, size, generator=torch.Generator().manual_seed(seed))


def _lesioned(dataset, split="train"):
    """Index of a sample in ``split`` whose lesion mask is neither empty nor full"""
    for i in dataset.split(split):
        area = int(dataset.masks[i].sum())
        if 0 < area < dataset.masks[i].size:
            return i
    pytest.skip("no lesioned sample in the fixture split")


# ------------------------------------------------------------------- psnr

def test_psnr_identical_images_hit_the_cap():
    x = np.random.default_rng(0).normal(size=(8, 8))
    assert psnr(x, x) == PSNR_CAP_DB


def test_psnr_known_value():
    x = np.zeros((4, 4))
    x[0, 0] = 1.0
    y = x + 0.1
    assert psnr(x, y) == pytest.approx(20.0)


def test_psnr_is_symmetric_with_fixed_range():
    rng = np.random.default_rng(1)
    x, y = rng.normal(size=(8, 8)), rng.normal(size=(8, 8))
    assert psnr(x, y, data_range=2.0) == pytest.approx(psnr(y, x, data_range=2.0))


# ------------------------------------------------------------------- ssim

def _ssim_oracle(x, y, data_range):
    """Uniform 7x7 windows fully inside the image, population statistics"""
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    h, w = x.shape
    values = []
    for r in range(3, h - 3):
        for c in range(3, w - 3):
            a = x[r - 3:r + 4, c - 3:c + 4]
            b = y[r - 3:r + 4, c - 3:c + 4]
            mu_a, mu_b = a.mean(), b.mean()
            var_a, var_b = a.var(), b.var()
            cov = ((a - mu_a) * (b - mu_b)).mean()
            values.append(
                ((2 * mu_a * mu_b + c1) * (2 * cov + c2))
                / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
            )
    return float(np.mean(values))


def test_ssim_matches_hand_computation():
    rng = np.random.default_rng(2)
    x = rng.uniform(size=(8, 8))
    y = np.clip(x + 0.1 * rng.normal(size=(8, 8)), 0.0, 1.0)
    data_range = float(x.max() - x.min())
    assert ssim(x, y) == pytest.approx(_ssim_oracle(x, y, data_range), abs=1e-8)


def test_ssim_identity_and_constants():
    x = np.random.default_rng(3).normal(size=(16, 16))
    assert ssim(x, x) == pytest.approx(1.0)
    flat = np.full((8, 8), 0.3)
    assert ssim(flat, flat) == pytest.approx(1.0)


def test_ssim_of_negated_image_is_negative():
    """Column cosine with period 7: every 7x7 window has zero mean, so only the structure term is left"""
    cols = np.cos(2.0 * np.pi * np.arange(16) / 7.0)
    x = np.tile(cols, (16, 1))
    value = ssim(x, -x)
    assert value < -0.9
    assert value == pytest.approx(_ssim_oracle(x, -x, float(x.max() - x.min())), abs=1e-6)


def test_ssim_rejects_images_smaller_than_the_window():
    with pytest.raises(ContractViolation):
        ssim(np.zeros((6, 6)), np.zeros((6, 6)))


# ---------------------------------------------------------------- frechet

def test_frechet_distance_of_identical_gaussians_is_zero():
    rng = np.random.default_rng(5)
    a = rng.normal(size=(4, 4))
    sigma = a @ a.T + np.eye(4)
    mu = rng.normal(size=4)
    assert frechet_distance(mu, sigma, mu, sigma) == pytest.approx(0.0, abs=1e-9)


def test_frechet_distance_one_dimensional():
    assert frechet_distance(0.0, 1.0, 1.0, 1.0) == pytest.approx(1.0)
    # (σ1 − σ2)² for variances 1 and 4
    assert frechet_distance(0.0, 1.0, 0.0, 4.0) == pytest.approx(1.0)


def test_frechet_distance_is_symmetric():
    rng = np.random.default_rng(6)
    a, b = rng.normal(size=(5, 5)), rng.normal(size=(5, 5))
    s1, s2 = a @ a.T + 0.1 * np.eye(5), b @ b.T + 0.1 * np.eye(5)
    m1, m2 = rng.normal(size=5), rng.normal(size=5)
    assert abs(frechet_distance(m1, s1, m2, s2) - frechet_distance(m2, s2, m1, s1)) < 1e-8


def test_singular_covariance_is_regularised_with_a_warning(caplog):
    singular = np.zeros((3, 3))
    with caplog.at_level(logging.WARNING, logger="hvae.evalsuite"):
        value = frechet_distance(np.zeros(3), singular, np.ones(3), singular)
    assert value == pytest.approx(3.0, abs=1e-6)
    assert any("Singular" in r.message for r in caplog.records)


def test_fid_surrogate_ranks_noise_far_from_phantoms(phantom_dataset):
    images = phantom_dataset.images
    assert fid_surrogate(images, images) == pytest.approx(0.0, abs=1e-6)
    noise = np.random.default_rng(7).normal(size=images.shape) * 3.0
    assert fid_surrogate(images[:10], images[10:]) < fid_surrogate(images[:10], noise[:10])


def test_fid_surrogate_needs_two_images_per_set(phantom_dataset):
    with pytest.raises(ContractViolation):
        fid_surrogate(phantom_dataset.images[:1], phantom_dataset.images[:4])


# ------------------------------------------------------------------ lasso

def _coordinate_descent(X, y, alpha, sweeps=200):
    """Lasso on standardised X with a free intercept, soft-thresholded coordinate updates"""
    mean, std = X.mean(axis=0), X.std(axis=0)
    Z = (X - mean) / std
    y_mean = y.mean()
    r = y - y_mean
    n, d = Z.shape
    w = np.zeros(d)
    for _ in range(sweeps):
        for j in range(d):
            rho = Z[:, j] @ (r + Z[:, j] * w[j]) / n
            new = np.sign(rho) * max(abs(rho) - alpha, 0.0)
            r -= Z[:, j] * (new - w[j])
            w[j] = new
    return lambda X_new: ((X_new - mean) / std) @ w + y_mean


def _lasso_fixture(seed=8, n=1000):
    rng = np.random.default_rng(seed)
    X = np.column_stack([3.0 * rng.normal(size=n), rng.normal(size=n), rng.normal(size=n)])
    y = 5.0 * X[:, 0] + 0.01 * rng.normal(size=n)
    return X, y


def test_lasso_fit_matches_coordinate_descent():
    X, y = _lasso_fixture()
    lasso = fit_lasso_probe(X, y, alpha=0.5)
    oracle = _coordinate_descent(X, y, alpha=0.5)
    X_test, _ = _lasso_fixture(seed=9, n=50)
    assert np.max(np.abs(lasso.predict(X_test) - oracle(X_test))) < 1e-4


def test_unpenalised_lasso_recovers_a_linear_target():
    X, y = _lasso_fixture()
    lasso = fit_lasso_probe(X, y, alpha=0.0)
    assert lasso.score(X, y) == pytest.approx(1.0, abs=1e-6)


def test_independent_target_is_not_predicted():
    rng = np.random.default_rng(10)
    X_train, X_test = rng.normal(size=(200, 5)), rng.normal(size=(200, 5))
    y_train, y_test = rng.normal(size=200), rng.normal(size=200)
    assert fit_lasso_probe(X_train, y_train, alpha=10.0).score(X_test, y_test) <= 0.05


def test_lasso_scaler_uses_training_statistics():
    X, y = _lasso_fixture()
    lasso = fit_lasso_probe(X, y, alpha=0.1)
    assert np.allclose(lasso.scaler.mean_, X.mean(axis=0))
    assert np.allclose(lasso.scaler.scale_, X.std(axis=0))


def test_constant_target_makes_r2_undefined():
    X, _ = _lasso_fixture(n=20)
    with pytest.raises(ProbeUndefinedError):
        fit_lasso_probe(X, np.ones(20))
    lasso = fit_lasso_probe(*_lasso_fixture(n=20))
    with pytest.raises(ProbeUndefinedError):
        lasso.score(X, np.ones(20))


def test_lasso_rejects_negative_alpha():
    with pytest.raises(ContractViolation):
        fit_lasso_probe(*_lasso_fixture(n=20), alpha=-1.0)


def test_informativeness_reports_every_layer(tiny_model, phantom_dataset):
    areas = phantom_dataset.lesion_areas(phantom_dataset.split("train"))
    if np.ptp(areas) == 0:
        pytest.skip("lesion area is constant on the fixture split")
    model = tiny_model("nvae", supervise_layer=1)
    report = informativeness_probe(model, phantom_dataset, alpha=0.1, train_split="train", test_split="train")
    assert len(report.r2_per_layer) == 3
    assert all(-1.0 <= r <= 1.0 for r in report.r2_per_layer)
    assert report.supervised_layer == 1
    assert report.n_train == report.n_test == 12


# ----------------------------------------------------------- manipulation

def test_unit_factor_has_zero_sensitivity(tiny_model, phantom_dataset):
    i = _lesioned(phantom_dataset)
    model = tiny_model("nvae")
    score = attribute_sensitivity(model, phantom_dataset.images[i], phantom_dataset.masks[i], 1, factors=(1.0,))
    assert score == 0.0


def test_empty_mask_has_no_sensitivity(tiny_model):
    assert attribute_sensitivity(tiny_model("nvae"), _image(), np.zeros((16, 16)), 0) is None


def test_sensitivity_scan_and_gallery(tiny_model, phantom_dataset):
    _lesioned(phantom_dataset)
    model = tiny_model("nvmp")
    report = sensitivity_scan(model, phantom_dataset, split="train")
    assert len(report.mean_per_layer) == 3
    assert report.posthoc_layer == int(np.argmax(report.mean_per_layer))
    assert report.reference_layer == report.posthoc_layer
    assert sum(report.argmax_counts) == report.n_scored
    assert report.n_scored + report.n_skipped == 12
    assert pathology_layer(model, phantom_dataset, split="train") == report.posthoc_layer
    gallery = sensitivity_gallery(model, phantom_dataset.images[0])
    assert gallery.shape == (3, 5, 16, 16)


def test_supervised_model_names_its_pathology_layer(tiny_model):
    assert pathology_layer(tiny_model("nvae", supervise_layer=2)) == 2
    with pytest.raises(ContractViolation):
        pathology_layer(tiny_model("nvae"))


def test_style_mix_with_no_or_all_layers(tiny_model):
    model = tiny_model("nvae")
    a, b = _image(1), _image(2)
    with torch.no_grad():
        recon_a = model.infer(a, mean_mode=True).x_mean
        recon_b = model.infer(b, mean_mode=True).x_mean
    assert torch.equal(style_mix(model, a, b, []), recon_a)
    assert torch.equal(style_mix(model, a, b, [0, 1, 2]), recon_b)
    assert not torch.equal(style_mix(model, a, b, [2]), recon_a)


def test_style_mix_rejects_unknown_layers(tiny_model):
    with pytest.raises(ContractViolation):
        style_mix(tiny_model("nvae"), _image(1), _image(2), [5])


def test_zero_temperature_resampling_is_deterministic(tiny_model):
    model = tiny_model("nvae")
    a = conditional_resample(model, _image(), RESAMPLE_PATHOLOGY, 1, torch.Generator().manual_seed(1),
                             count=2, temperature=0.0)
    b = conditional_resample(model, _image(), RESAMPLE_PATHOLOGY, 1, torch.Generator().manual_seed(2),
                             count=1, temperature=0.0)
    assert len(a) == 2
    assert torch.equal(a[0], a[1]) and torch.equal(a[0], b[0])


def test_resampling_varies_the_chosen_layer(tiny_model):
    model = tiny_model("nvae")
    out = conditional_resample(model, _image(), RESAMPLE_PATHOLOGY, 1, torch.Generator().manual_seed(1), count=2)
    assert not torch.equal(out[0], out[1])


def test_transplant_from_itself_is_the_reconstruction(tiny_model):
    model = tiny_model("nvmp+")
    x = _image(3)
    out = conditional_resample(model, x, TRANSPLANT_PATHOLOGY, 1, donors=[x, _image(4)])
    with torch.no_grad():
        recon = model.infer(x, mean_mode=True).x_mean
    assert torch.allclose(out[0], recon, atol=1e-6)
    assert not torch.allclose(out[1], recon)


def test_resample_argument_errors(tiny_model):
    model = tiny_model("nvae")
    with pytest.raises(ContractViolation):
        conditional_resample(model, _image(), TRANSPLANT_PATHOLOGY, 1)
    with pytest.raises(ContractViolation):
        conditional_resample(model, _image(), "swap_everything", 1)
    with pytest.raises(ContractViolation):
        conditional_resample(model, _image(), RESAMPLE_PATHOLOGY, 3)


def test_resampling_with_different_seeds_gives_different_images(tiny_model):
    model = tiny_model("nvae")
    x = _image(5)
    a = conditional_resample(model, x, RESAMPLE_PATHOLOGY, 1, torch.Generator().manual_seed(10))
    b = conditional_resample(model, x, RESAMPLE_PATHOLOGY, 1, torch.Generator().manual_seed(11))
    again = conditional_resample(model, x, RESAMPLE_PATHOLOGY, 1, torch.Generator().manual_seed(10))
    assert a[0].shape == b[0].shape == (1, 1, 16, 16)
    assert not torch.equal(a[0], b[0])
    assert torch.equal(a[0], again[0])


def test_untrained_model_has_no_sensitivity_on_average(tiny_model):
    """Single-pixel masks at uniform positions: the in-minus-out change averages to zero"""
    model = tiny_model("nvae")
    rng = np.random.default_rng(12)
    scores = []
    for seed in range(100):
        mask = np.zeros((16, 16))
        mask[tuple(rng.integers(0, 16, size=2))] = 1.0
        scores.append(attribute_sensitivity(model, _image(100 + seed), mask, 1))
    scores = np.array(scores)
    assert abs(scores.mean()) < 4 * scores.std(ddof=1) / np.sqrt(len(scores))


# ---------------------------------------------------------------- galleries

def test_layer_variation_grid_rows(tiny_model):
    model = tiny_model("nvae")
    rows = layer_variation_grid(model, count=3, generator=torch.Generator().manual_seed(0))
    assert len(rows) == 3
    assert all(tuple(row.shape) == (3, 1, 16, 16) for row in rows)
    for row in rows:
        assert not torch.equal(row[0], row[1])

    again = layer_variation_grid(model, count=3, generator=torch.Generator().manual_seed(0))
    assert all(torch.equal(a, b) for a, b in zip(rows, again))


def test_layer_variation_grid_at_zero_temperature_repeats_each_row(tiny_model):
    rows = layer_variation_grid(tiny_model("nvmp"), count=2, temperature=0.0)
    assert all(torch.equal(row[0], row[1]) for row in rows)


def test_vamprior_cluster_grid_has_one_row_per_pseudo_input(tiny_model):
    model = tiny_model("nvmp")
    rows = vamprior_cluster_grid(model, per_component=2, generator=torch.Generator().manual_seed(0))
    assert len(rows) == model.k
    assert all(tuple(row.shape) == (2, 1, 16, 16) for row in rows)

    flat = vamprior_cluster_grid(model, per_component=2, temperature=0.0)
    assert all(torch.equal(row[0], row[1]) for row in flat)
    assert not torch.equal(flat[0][0], flat[1][0])


def test_grid_argument_errors(tiny_model):
    with pytest.raises(ContractViolation):
        vamprior_cluster_grid(tiny_model("nvae"))
    with pytest.raises(ContractViolation):
        layer_variation_grid(tiny_model("nvae"), count=0)
    with pytest.raises(ContractViolation):
        vamprior_cluster_grid(tiny_model("nvmp"), per_component=0)


def test_evaluate_reconstructions_reports_finite_metrics(tiny_model, phantom_dataset):
    report = evaluate_reconstructions(tiny_model("vae"), phantom_dataset, generator=torch.Generator().manual_seed(0))
    values = report.to_dict()
    for key in ("neg_recon_ll", "psnr", "ssim", "fid_surrogate", "fid_surrogate_samples"):
        assert np.isfinite(values[key]), key
    assert report.counts["psnr"] == 4
    with pytest.raises(DataError):
        evaluate_reconstructions(tiny_model("vae"), phantom_dataset, split="holdout")


# ---------------------------------------------------------------- outputs

def test_make_grid_tiles_row_major():
    tiles = [np.full((2, 3), float(i)) for i in range(5)]
    grid = make_grid(tiles, ncols=2)
    assert grid.shape == (6, 6)
    assert grid[0, 3] == 1.0 and grid[2, 0] == 2.0 and grid[4, 0] == 4.0


def test_write_pgm_header_and_pixels(tmp_path):
    image = np.array([[0.0, 1.0], [2.0, 4.0]])
    raw = write_pgm(tmp_path / "a.pgm", image).read_bytes()
    assert raw.startswith(b"P5\n2 2\n255\n")
    assert list(raw[-4:]) == [0, 64, 128, 255]


def test_write_f32_and_json(tmp_path):
    path = write_f32(tmp_path / "x.f32", np.arange(6.0).reshape(2, 3))
    assert np.array_equal(np.fromfile(path, dtype="<f4"), np.arange(6.0, dtype=np.float32))
    text = write_json(tmp_path / "r.json", {"b": 1, "a": 2}).read_text()
    assert text.index('"a"') < text.index('"b"')
