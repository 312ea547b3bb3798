"""
Evaluation Suite
================
Quantitative and qualitative evaluations of a trained HierarchicalVAE:

    reconstruction metrics   negative recon log-likelihood, PSNR, SSIM, Fréchet feature distance
    informativeness probe    per-layer Lasso R² for lesion area from posterior-mean latents
    attribute sensitivity    lesion-localised output change when one latent group is scaled
    style mixing             anatomy from one image, chosen layers from another
    conditional resampling   redraw or transplant the pathological layer
    generation galleries     per-layer variation and per-pseudo-input (VamPrior cluster) samples

Every evaluation runs on a frozen model without gradients; random draws take an
explicit ``torch.Generator``. Reports are written as sorted JSON, images as 8-bit
PGM (P5) grids plus raw float32 dumps.
"""

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Collection, Dict, List, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy import linalg
from skimage.metrics import structural_similarity
from sklearn.linear_model import Lasso, LinearRegression
from sklearn.metrics import r2_score
from sklearn.preprocessing import StandardScaler

from .errors import ContractViolation, DataError, ProbeUndefinedError
from .gaussian_core import DiagonalGaussian
from .hvae_model import HierarchicalVAE, LatentHierarchy, scale_layer
from .phantom import PhantomDataset

logger = logging.getLogger(__name__)

PSNR_CAP_DB = 100.0
SSIM_WINDOW = 7
COV_EPS = 1e-6
PROBE_TOL = 1e-6
PROBE_MAX_ITER = 10_000
PROBE_ALPHA = 10.0
SENSITIVITY_FACTORS = (0.5, 1.5, 2.0)
GALLERY_FACTORS = (0.0, 0.5, 1.0, 1.5, 2.0)
EVAL_BATCH = 64

RESAMPLE_PATHOLOGY = "resample_pathology"
TRANSPLANT_PATHOLOGY = "transplant_pathology"


# --------------------------------------------------------------------- helpers

def _to_numpy(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def _as_image(x) -> np.ndarray:
    """Squeeze a single-channel image to (H, W)"""
    array = _to_numpy(x)
    while array.ndim > 2 and array.shape[0] == 1:
        array = array[0]
    if array.ndim != 2:
        raise ContractViolation(f"expected a single-channel 2-D image, got shape {array.shape}")
    return array


def _reference_range(reference: np.ndarray) -> float:
    span = float(reference.max() - reference.min())
    return span if span > 0 else 1.0


def _model_tensor(model: HierarchicalVAE, images) -> torch.Tensor:
    dtype = model.likelihood_log_std.dtype
    if isinstance(images, torch.Tensor):
        return images.to(dtype)
    return torch.as_tensor(np.asarray(images), dtype=dtype)


def _chunks(n: int, size: int = EVAL_BATCH):
    for start in range(0, n, size):
        yield slice(start, min(start + size, n))


# --------------------------------------------------------------------- metrics

def psnr(x, y, data_range: Optional[float] = None) -> float:
    """10·log10(R² / MSE); R defaults to the range of the reference ``x``; MSE 0 gives the 100 dB cap"""
    x, y = _to_numpy(x), _to_numpy(y)
    if x.shape != y.shape:
        raise ContractViolation(f"psnr: shape mismatch {x.shape} vs {y.shape}")
    if data_range is None:
        data_range = _reference_range(x)
    if data_range <= 0:
        raise ContractViolation("psnr: data_range must be > 0")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return 10.0 * math.log10(data_range ** 2 / mse)


def ssim(x, y, data_range: Optional[float] = None) -> float:
    """Mean local SSIM with a 7x7 uniform window; R defaults to the range of the reference ``x``"""
    x, y = _as_image(x), _as_image(y)
    if x.shape != y.shape:
        raise ContractViolation(f"ssim: shape mismatch {x.shape} vs {y.shape}")
    if min(x.shape) < SSIM_WINDOW:
        raise ContractViolation(f"ssim: image {x.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    if data_range is None:
        data_range = _reference_range(x)
    return float(
        structural_similarity(
            x,
            y,
            win_size=SSIM_WINDOW,
            data_range=data_range,
            gaussian_weights=False,
            use_sample_covariance=False,
        )
    )


class FeatureExtractor(nn.Module):
    """Fixed, untrained three-layer strided CNN; weights depend only on ``seed``"""

    def __init__(self, seed: int = 0, widths: Sequence[int] = (16, 32, 64)):
        super().__init__()
        generator = torch.Generator()
        generator.manual_seed(seed)
        layers = []
        in_ch = 1
        for width in widths:
            conv = nn.Conv2d(in_ch, width, 3, stride=2, padding=1)
            fan_in = in_ch * 9
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=generator) / math.sqrt(fan_in))
                conv.bias.zero_()
            layers.append(conv)
            in_ch = width
        self.convs = nn.ModuleList(layers)
        self.double()
        self.requires_grad_(False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = x
        for conv in self.convs:
            h = F.relu(conv(h))
        return h.mean(dim=(2, 3))


def extract_features(images, feature_seed: int = 0) -> np.ndarray:
    """(n, d) float64 features for a stack of single-channel images"""
    x = torch.as_tensor(_to_numpy(images))
    if x.dim() == 3:
        x = x.unsqueeze(1)
    if x.dim() != 4 or x.shape[1] != 1:
        raise ContractViolation(f"expected (n, 1, H, W) images, got {tuple(x.shape)}")
    extractor = FeatureExtractor(feature_seed)
    with torch.no_grad():
        return torch.cat([extractor(x[s]) for s in _chunks(x.shape[0])]).numpy()


def _sqrt_psd(matrix: np.ndarray) -> np.ndarray:
    w, v = linalg.eigh(matrix)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(mu1, sigma1, mu2, sigma2) -> float:
    """‖μ1−μ2‖² + Tr(Σ1 + Σ2 − 2(Σ1Σ2)^½), the square root via symmetric eigendecomposition"""
    mu1, mu2 = np.atleast_1d(_to_numpy(mu1)), np.atleast_1d(_to_numpy(mu2))
    sigma1, sigma2 = np.atleast_2d(_to_numpy(sigma1)), np.atleast_2d(_to_numpy(sigma2))
    if mu1.shape != mu2.shape or sigma1.shape != sigma2.shape or sigma1.shape != (mu1.size, mu1.size):
        raise ContractViolation("frechet_distance: inconsistent mean/covariance shapes")

    sigma1 = 0.5 * (sigma1 + sigma1.T)
    sigma2 = 0.5 * (sigma2 + sigma2.T)
    floor = min(linalg.eigvalsh(sigma1).min(), linalg.eigvalsh(sigma2).min())
    if floor <= 0.0:
        logger.warning(f"Singular feature covariance (min eigenvalue {floor:.3g}); adding {COV_EPS}·I")
        eye = np.eye(sigma1.shape[0])
        sigma1 = sigma1 + COV_EPS * eye
        sigma2 = sigma2 + COV_EPS * eye

    root1 = _sqrt_psd(sigma1)
    cross = linalg.eigvalsh(root1 @ sigma2 @ root1)
    tr_sqrt = float(np.sum(np.sqrt(np.clip(cross, 0.0, None))))
    diff = mu1 - mu2
    value = float(diff @ diff + np.trace(sigma1) + np.trace(sigma2) - 2.0 * tr_sqrt)
    return max(value, 0.0)


def fid_surrogate(real, generated, feature_seed: int = 0) -> float:
    """Fréchet distance between seeded-CNN features of two image sets"""
    real_f = extract_features(real, feature_seed)
    gen_f = extract_features(generated, feature_seed)
    if real_f.shape[0] < 2 or gen_f.shape[0] < 2:
        raise ContractViolation("fid_surrogate needs at least 2 images per set")
    return frechet_distance(
        real_f.mean(axis=0), np.cov(real_f, rowvar=False),
        gen_f.mean(axis=0), np.cov(gen_f, rowvar=False),
    )


@dataclass
class MetricsReport:
    """Reconstruction quality on one split; ``neg_recon_ll`` is in nats per image, lower is better"""

    neg_recon_ll: float
    psnr: float
    ssim: float
    fid_surrogate: float
    fid_surrogate_samples: float
    counts: Dict[str, int] = field(default_factory=dict)
    split: str = "test"
    feature_seed: int = 0

    def to_dict(self) -> Dict:
        return asdict(self)


def evaluate_reconstructions(
    model: HierarchicalVAE,
    dataset: PhantomDataset,
    split: str = "test",
    feature_seed: int = 0,
    generator: Optional[torch.Generator] = None,
) -> MetricsReport:
    """Posterior-mean reconstructions of ``split`` scored against the originals"""
    indices = dataset.split(split)
    if len(indices) < 2:
        raise DataError(f"split {split!r} needs at least 2 samples, has {len(indices)}")
    images = dataset.images[indices]
    model.eval()

    recons, lls = [], []
    with torch.no_grad():
        for s in _chunks(len(indices)):
            x = _model_tensor(model, images[s])
            inference = model.infer(x, mean_mode=True)
            ll = inference.likelihood.log_prob(x).reshape(x.shape[0], -1).sum(dim=1)
            lls.append(ll.double().numpy())
            recons.append(inference.x_mean.double().numpy())
        samples = model.generate(len(indices), generator).double().numpy()
    recon = np.concatenate(recons)
    ll = np.concatenate(lls)

    psnrs = [psnr(images[i, 0], recon[i, 0]) for i in range(len(indices))]
    ssims = [ssim(images[i, 0], recon[i, 0]) for i in range(len(indices))]
    report = MetricsReport(
        neg_recon_ll=float(-ll.mean()),
        psnr=float(np.mean(psnrs)),
        ssim=float(np.mean(ssims)),
        fid_surrogate=fid_surrogate(images, recon, feature_seed),
        fid_surrogate_samples=fid_surrogate(images, samples, feature_seed),
        counts={
            "neg_recon_ll": len(ll),
            "psnr": len(psnrs),
            "ssim": len(ssims),
            "fid_surrogate": len(indices),
            "fid_surrogate_samples": int(samples.shape[0]),
        },
        split=split,
        feature_seed=feature_seed,
    )
    logger.info(
        f"Metrics ({split}): -LL {report.neg_recon_ll:.2f}  PSNR {report.psnr:.2f} dB  "
        f"SSIM {report.ssim:.4f}  FID* {report.fid_surrogate:.4f}  FID*(samples) {report.fid_surrogate_samples:.4f}"
    )
    return report


# ----------------------------------------------------------------------- probe

@dataclass
class LassoProbe:
    """Standardiser fitted on the training split plus the sparse linear regressor"""

    scaler: StandardScaler
    regressor: Union[Lasso, LinearRegression]
    alpha: float

    def predict(self, features: np.ndarray) -> np.ndarray:
        return self.regressor.predict(self.scaler.transform(features))

    def score(self, features: np.ndarray, target: np.ndarray) -> float:
        target = np.asarray(target, dtype=np.float64)
        if np.ptp(target) == 0:
            raise ProbeUndefinedError("R² undefined: evaluation target is constant")
        return float(r2_score(target, self.predict(features)))


def fit_lasso_probe(features: np.ndarray, target: np.ndarray, alpha: float = PROBE_ALPHA) -> LassoProbe:
    """Fit min (1/2n)‖y − Xw − b‖² + α‖w‖₁ on standardised features (α = 0 is least squares)"""
    features = np.asarray(features, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] != target.shape[0]:
        raise ContractViolation(f"probe: features {features.shape} do not match target {target.shape}")
    if alpha < 0:
        raise ContractViolation("probe: alpha must be >= 0")
    if np.ptp(target) == 0:
        raise ProbeUndefinedError("probe undefined: training target is constant")
    scaler = StandardScaler().fit(features)
    if alpha == 0:
        regressor = LinearRegression()
    else:
        regressor = Lasso(alpha=alpha, tol=PROBE_TOL, max_iter=PROBE_MAX_ITER)
    regressor.fit(scaler.transform(features), target)
    return LassoProbe(scaler=scaler, regressor=regressor, alpha=alpha)


def posterior_mean_features(model: HierarchicalVAE, images) -> List[np.ndarray]:
    """Flattened posterior-mean latents per layer, one (n, d_l) array each"""
    images = np.asarray(images)
    per_layer: List[List[np.ndarray]] = [[] for _ in range(model.levels + 1)]
    model.eval()
    with torch.no_grad():
        for s in _chunks(images.shape[0]):
            inference = model.infer(_model_tensor(model, images[s]), mean_mode=True)
            for l in range(model.levels + 1):
                z = inference.latents[l]
                per_layer[l].append(z.reshape(z.shape[0], -1).double().numpy())
    return [np.concatenate(chunks) for chunks in per_layer]


@dataclass
class ProbeReport:
    """Held-out R² per latent group; ``r2_per_layer`` is clipped to [-1, 1], ``r2_raw`` is not"""

    r2_per_layer: List[float]
    r2_raw: List[float]
    alpha: float
    target: str = "lesion_area"
    supervised_layer: Optional[int] = None
    n_train: int = 0
    n_test: int = 0

    def to_dict(self) -> Dict:
        return asdict(self)


def informativeness_probe(
    model: HierarchicalVAE,
    dataset: PhantomDataset,
    alpha: float = PROBE_ALPHA,
    train_split: str = "train",
    test_split: str = "test",
) -> ProbeReport:
    """Lasso probe of lesion area from each layer: fit on ``train_split``, score on ``test_split``"""
    train_idx, test_idx = dataset.split(train_split), dataset.split(test_split)
    y_train, y_test = dataset.lesion_areas(train_idx), dataset.lesion_areas(test_idx)
    if np.ptp(y_train) == 0 or np.ptp(y_test) == 0:
        raise ProbeUndefinedError("probe undefined: lesion_area is constant on a split")

    train_features = posterior_mean_features(model, dataset.images[train_idx])
    test_features = posterior_mean_features(model, dataset.images[test_idx])
    raw = []
    for l in range(model.levels + 1):
        probe = fit_lasso_probe(train_features[l], y_train, alpha)
        raw.append(probe.score(test_features[l], y_test))
        logger.info(f"  z{l}: R² = {raw[-1]:.4f}")

    supervision = model.supervision
    return ProbeReport(
        r2_per_layer=[float(np.clip(r, -1.0, 1.0)) for r in raw],
        r2_raw=raw,
        alpha=alpha,
        supervised_layer=supervision.target_layer if supervision.enabled else None,
        n_train=len(train_idx),
        n_test=len(test_idx),
    )


# ---------------------------------------------------------------- manipulation

def _single(model: HierarchicalVAE, x) -> torch.Tensor:
    x = model._as_batch(_model_tensor(model, x))
    if x.shape[0] != 1:
        raise ContractViolation(f"expected one image, got a batch of {x.shape[0]}")
    return x


def _check_layer_set(model: HierarchicalVAE, layers: Collection[int]) -> set:
    layers = set(int(l) for l in layers)
    bad = sorted(l for l in layers if not 0 <= l <= model.levels)
    if bad:
        raise ContractViolation(f"layers {bad} outside [0, {model.levels}]")
    return layers


def _posterior_latents(model: HierarchicalVAE, x: torch.Tensor) -> LatentHierarchy:
    return model.infer(x, mean_mode=True).latents


def attribute_sensitivity(
    model: HierarchicalVAE,
    x,
    lesion_mask,
    layer: int,
    factors: Sequence[float] = SENSITIVITY_FACTORS,
) -> Optional[float]:
    """Mean |Δimage| inside the lesion mask minus outside when z_layer is scaled, averaged over ``factors``.

    None when the mask (or its complement) is empty.
    """
    mask = _as_image(lesion_mask) > 0
    if not mask.any() or mask.all():
        return None
    model.eval()
    with torch.no_grad():
        latents = _posterior_latents(model, _single(model, x))
        base = model.decode(latents).x_mean[0, 0].double().numpy()
        scores = []
        for factor in factors:
            scaled = model.decode(scale_layer(latents, layer, factor)).x_mean[0, 0].double().numpy()
            change = np.abs(scaled - base)
            scores.append(change[mask].mean() - change[~mask].mean())
    return float(np.mean(scores))


@dataclass
class SensitivityReport:
    """Per-layer attribute sensitivity over one split; ``posthoc_layer`` is the argmax layer"""

    mean_per_layer: List[float]
    posthoc_layer: int
    argmax_counts: List[int]
    argmax_agreement: float
    reference_layer: int
    n_scored: int
    n_skipped: int
    factors: List[float]
    split: str = "test"

    def to_dict(self) -> Dict:
        return asdict(self)


def sensitivity_scan(
    model: HierarchicalVAE,
    dataset: PhantomDataset,
    split: str = "test",
    factors: Sequence[float] = SENSITIVITY_FACTORS,
) -> SensitivityReport:
    """Score every layer on every lesioned sample of ``split``.

    ``argmax_agreement`` is the fraction of scored samples whose best layer is the
    supervised layer (or, without supervision, the post-hoc layer).
    """
    per_sample = []
    skipped = 0
    for i in dataset.split(split):
        scores = [attribute_sensitivity(model, dataset.images[i], dataset.masks[i], l, factors)
                  for l in range(model.levels + 1)]
        if scores[0] is None:
            skipped += 1
            continue
        per_sample.append(scores)
    if not per_sample:
        raise DataError(f"no sample in split {split!r} has a non-empty lesion mask")

    table = np.array(per_sample, dtype=np.float64)
    means = table.mean(axis=0)
    posthoc = int(np.argmax(means))
    argmax = table.argmax(axis=1)
    supervision = model.supervision
    reference = supervision.target_layer if supervision.enabled else posthoc
    counts = np.bincount(argmax, minlength=model.levels + 1)
    report = SensitivityReport(
        mean_per_layer=[float(m) for m in means],
        posthoc_layer=posthoc,
        argmax_counts=[int(c) for c in counts],
        argmax_agreement=float(np.mean(argmax == reference)),
        reference_layer=reference,
        n_scored=len(per_sample),
        n_skipped=skipped,
        factors=[float(f) for f in factors],
        split=split,
    )
    logger.info(
        f"Sensitivity: post-hoc z_P = z{posthoc}, agreement with z{reference} "
        f"{report.argmax_agreement:.2%} over {report.n_scored} samples ({skipped} skipped)"
    )
    return report


def sensitivity_gallery(model: HierarchicalVAE, x, factors: Sequence[float] = GALLERY_FACTORS) -> np.ndarray:
    """(levels + 1, len(factors), H, W) decodes with each layer scaled by each factor"""
    model.eval()
    with torch.no_grad():
        latents = _posterior_latents(model, _single(model, x))
        rows = []
        for layer in range(model.levels + 1):
            rows.append([
                model.decode(scale_layer(latents, layer, f)).x_mean[0, 0].double().numpy() for f in factors
            ])
    return np.array(rows)


def style_mix(model: HierarchicalVAE, x_a, x_b, pathology_layers: Collection[int]) -> torch.Tensor:
    """Decode with ``pathology_layers`` taken from x_b's encoding and the rest from x_a's (posterior means)"""
    layers = _check_layer_set(model, pathology_layers)
    x_a = model._as_batch(_model_tensor(model, x_a))
    x_b = model._as_batch(_model_tensor(model, x_b))
    if x_a.shape != x_b.shape:
        raise ContractViolation(f"style_mix: batch shapes differ {tuple(x_a.shape)} vs {tuple(x_b.shape)}")
    model.eval()
    with torch.no_grad():
        deltas_a, deltas_b = model.encode(x_a), model.encode(x_b)
        mixed = [deltas_b[l] if l in layers else deltas_a[l] for l in range(model.levels + 1)]
        return model.infer(deltas=mixed, mean_mode=True).x_mean


def conditional_resample(
    model: HierarchicalVAE,
    x,
    mode: str,
    layer: int,
    generator: Optional[torch.Generator] = None,
    donors=None,
    count: int = 1,
    temperature: float = 1.0,
) -> List[torch.Tensor]:
    """Vary one side of the anatomy/pathology split of ``x``.

    resample_pathology: keep every other layer's posterior mean, draw z_layer ``count``
    times from its conditional prior. transplant_pathology: keep x's z_layer deltas and
    take every other layer from each donor image.
    """
    _check_layer_set(model, [layer])
    x = _single(model, x)
    model.eval()
    with torch.no_grad():
        deltas = model.encode(x)
        if mode == RESAMPLE_PATHOLOGY:
            if count < 1:
                raise ContractViolation("count must be >= 1")
            return [
                model.infer(deltas=deltas, generator=generator, mean_mode=True,
                            prior_layers={layer}, temperature=temperature).x_mean
                for _ in range(count)
            ]
        if mode == TRANSPLANT_PATHOLOGY:
            if donors is None or len(donors) == 0:
                raise ContractViolation("transplant_pathology needs at least one donor image")
            out = []
            for donor in donors:
                donor_deltas = model.encode(_single(model, donor))
                mixed = [deltas[l] if l == layer else donor_deltas[l] for l in range(model.levels + 1)]
                out.append(model.infer(deltas=mixed, mean_mode=True).x_mean)
            return out
    raise ContractViolation(f"unknown resample mode {mode!r}; use {RESAMPLE_PATHOLOGY} or {TRANSPLANT_PATHOLOGY}")


def layer_variation_grid(
    model: HierarchicalVAE,
    count: int = 8,
    generator: Optional[torch.Generator] = None,
    temperature: float = 1.0,
) -> List[torch.Tensor]:
    """Residual variation captured by each layer, one (count, 1, R, R) row per level.

    Row 0 redraws every group. Row n (1..L) holds z_0..z_{n-1} of one reference
    ancestral sample and redraws z_n..z_L ``count`` times.
    """
    if count < 1:
        raise ContractViolation("count must be >= 1")
    model.eval()
    with torch.no_grad():
        rows = [model.sample_prior(count, generator, temperature).x_mean]
        reference = model.sample_prior(1, generator, temperature).latents
        for n in range(1, model.levels + 1):
            held = {l: reference[l] for l in range(n)}
            rows.append(model.sample_prior(count, generator, temperature, fixed=held).x_mean)
    return rows


def vamprior_cluster_grid(
    model: HierarchicalVAE,
    per_component: int = 8,
    generator: Optional[torch.Generator] = None,
    temperature: float = 1.0,
) -> List[torch.Tensor]:
    """One row per pseudo-input u_k: z_0 ~ q(z_0 | u_k), lower groups from their priors"""
    if per_component < 1:
        raise ContractViolation("per_component must be >= 1")
    model.eval()
    with torch.no_grad():
        rows = []
        for comp in model.vamprior_mixtures()[0].components:
            shape = (per_component,) + tuple(comp.shape)
            z0 = DiagonalGaussian(comp.mean.expand(shape), comp.log_std.expand(shape)).sample(generator, temperature)
            rows.append(model.sample_prior(per_component, generator, temperature, fixed={0: z0}).x_mean)
    return rows


def pathology_layer(model: HierarchicalVAE, dataset: Optional[PhantomDataset] = None, split: str = "test") -> int:
    """Supervised layer if any, else the post-hoc sensitivity argmax on ``split``"""
    if model.supervision.enabled:
        return model.supervision.target_layer
    if dataset is None:
        raise ContractViolation("unsupervised model: a dataset is needed to locate the pathological layer")
    return sensitivity_scan(model, dataset, split).posthoc_layer


# --------------------------------------------------------------------- outputs

def write_json(path: Union[str, Path], payload: Dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def make_grid(images: Sequence, ncols: Optional[int] = None) -> np.ndarray:
    """Tile equally sized 2-D images row-major into one array"""
    tiles = [_as_image(im) for im in images]
    if not tiles:
        raise ContractViolation("make_grid needs at least one image")
    h, w = tiles[0].shape
    if any(t.shape != (h, w) for t in tiles):
        raise ContractViolation("make_grid: images differ in shape")
    ncols = ncols or len(tiles)
    nrows = -(-len(tiles) // ncols)
    grid = np.full((nrows * h, ncols * w), min(t.min() for t in tiles), dtype=np.float64)
    for i, tile in enumerate(tiles):
        r, c = divmod(i, ncols)
        grid[r * h:(r + 1) * h, c * w:(c + 1) * w] = tile
    return grid


def write_pgm(path: Union[str, Path], image) -> Path:
    """8-bit binary PGM (P5) after min-max normalisation"""
    array = _as_image(image)
    lo, hi = float(array.min()), float(array.max())
    scaled = np.zeros_like(array) if hi == lo else (array - lo) / (hi - lo)
    pixels = np.round(scaled * 255.0).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(f"P5\n{pixels.shape[1]} {pixels.shape[0]}\n255\n".encode("ascii"))
        f.write(pixels.tobytes())
    return path


def write_f32(path: Union[str, Path], array) -> Path:
    """Raw row-major little-endian float32 dump"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    _to_numpy(array).astype("<f4").tofile(path)
    return path
