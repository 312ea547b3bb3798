"""
Brain Phantoms
==============
Deterministic synthetic 2-D brain slices with known generating factors:
skull ellipse, white/gray matter split by a sulcal ridge pattern, a mirrored
ventricle pair and hyperintense lesions that may only sit in white matter
outside the ventricles.

Dataset layout (one directory):
    manifest.json       version, n, resolution, seed, splits, per-sample factors
    img_%06d.f32        raw row-major little-endian float32 image, no header
    msk_%06d.u8         raw row-major uint8 lesion mask, no header

Usage:
    python -m hvae.cli gen-data --n 256 --seed 7 --out data/phantoms
"""

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

from .errors import DataError, PhantomGenerationError, PhantomInvariantError

logger = logging.getLogger(__name__)

MANIFEST_VERSION = 1
DEFAULT_RESOLUTION = (64, 64)
MAX_LESIONS = 8
LESION_RATE = 3.0
MAX_PLACEMENT_TRIES = 10_000

# anatomy ranges, lengths as fractions of the image side
SKULL_A_RANGE = (0.36, 0.42)
SKULL_B_RANGE = (0.40, 0.45)
VENTRICLE_SCALE_RANGE = (0.7, 1.3)
VENTRICLE_ANGLE_RANGE = (-0.35, 0.35)
SULCAL_FREQ_RANGE = (6.0, 14.0)
TISSUE_BASE_RANGE = (0.8, 1.2)
LESION_RADIUS_RANGE = (1.0, 2.5)
LESION_BOOST_RANGE = (1.5, 3.0)

WM_BOUNDARY = 0.74
SULCAL_DEPTH = 0.06
SKULL_THICKNESS = 0.12


@dataclass
class Lesion:
    cx: float
    cy: float
    radius: float
    boost: float


@dataclass
class FactorRecord:
    """Ground-truth generating factors of one phantom"""

    skull_axes: Tuple[float, float]
    ventricle_scale: float
    ventricle_angle: float
    sulcal_freq: float
    sulcal_phase: float
    tissue_base: float
    texture_seed: int
    lesion_count: int = 0
    lesion_params: List[Lesion] = field(default_factory=list)
    lesion_area: int = 0

    def to_dict(self) -> Dict:
        record = asdict(self)
        record["skull_axes"] = list(self.skull_axes)
        return record

    @classmethod
    def from_dict(cls, record: Dict) -> "FactorRecord":
        record = dict(record)
        record["skull_axes"] = tuple(record["skull_axes"])
        record["lesion_params"] = [Lesion(**p) for p in record.get("lesion_params", [])]
        return cls(**record)


@dataclass
class PhantomSample:
    image: np.ndarray
    lesion_mask: np.ndarray
    factors: FactorRecord


@dataclass
class AnatomyMasks:
    brain: np.ndarray
    skull: np.ndarray
    white_matter: np.ndarray
    ventricles: np.ndarray

    @property
    def valid(self) -> np.ndarray:
        return self.white_matter & ~self.ventricles


def _grid(resolution: Tuple[int, int]) -> Tuple[np.ndarray, np.ndarray]:
    w, h = resolution
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    return xs + 0.5, ys + 0.5


def _anatomy_fields(factors: FactorRecord, xs, ys, resolution: Tuple[int, int]):
    """Normalised brain radius, WM boundary radius and ventricle membership at (xs, ys)"""
    w, h = resolution
    cx, cy = w / 2.0, h / 2.0
    a, b = factors.skull_axes
    dx, dy = xs - cx, ys - cy
    rho = np.sqrt((dx / a) ** 2 + (dy / b) ** 2)
    theta = np.arctan2(dy / b, dx / a)
    wm_edge = WM_BOUNDARY + SULCAL_DEPTH * np.cos(factors.sulcal_freq * theta + factors.sulcal_phase)

    s = factors.ventricle_scale
    va, vb = 0.06 * w * s, 0.15 * h * s
    offset = 0.07 * w * s
    ventricles = np.zeros(np.shape(xs), dtype=bool)
    for side in (-1.0, 1.0):
        angle = side * factors.ventricle_angle
        px, py = dx - side * offset, dy
        u = px * math.cos(angle) + py * math.sin(angle)
        v = -px * math.sin(angle) + py * math.cos(angle)
        ventricles |= (u / va) ** 2 + (v / vb) ** 2 <= 1.0
    return rho, wm_edge, ventricles


def anatomy_masks(factors: FactorRecord, resolution: Tuple[int, int] = DEFAULT_RESOLUTION) -> AnatomyMasks:
    xs, ys = _grid(resolution)
    rho, wm_edge, ventricles = _anatomy_fields(factors, xs, ys, resolution)
    brain = rho <= 1.0
    skull = (rho > 1.0) & (rho <= 1.0 + SKULL_THICKNESS)
    white_matter = rho < wm_edge
    return AnatomyMasks(brain=brain, skull=skull, white_matter=white_matter, ventricles=ventricles & brain)


def _lesion_coverage(lesion: Lesion, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Anti-aliased disc coverage in [0, 1]; >= 0.5 exactly inside the radius"""
    dist = np.sqrt((xs - lesion.cx) ** 2 + (ys - lesion.cy) ** 2)
    return np.clip(lesion.radius + 0.5 - dist, 0.0, 1.0)


def lesion_mask(factors: FactorRecord, masks: AnatomyMasks, resolution: Tuple[int, int]) -> np.ndarray:
    xs, ys = _grid(resolution)
    mask = np.zeros(masks.valid.shape, dtype=bool)
    for lesion in factors.lesion_params:
        mask |= _lesion_coverage(lesion, xs, ys) >= 0.5
    return mask & masks.valid


def _truncated_poisson(rng: np.random.Generator, lam: float, upper: int) -> int:
    while True:
        count = int(rng.poisson(lam))
        if count <= upper:
            return count


def sample_factors(
    rng: np.random.Generator,
    resolution: Tuple[int, int] = DEFAULT_RESOLUTION,
    lesion_count: Optional[int] = None,
) -> FactorRecord:
    """Draw anatomy uniformly from fixed ranges, then rejection-sample lesion centres.

    Lesion centres are pixel centres inside white matter and outside the
    ventricles; ``lesion_count`` forces the number of lesions.
    """
    w, h = resolution
    factors = FactorRecord(
        skull_axes=(float(rng.uniform(*SKULL_A_RANGE) * w), float(rng.uniform(*SKULL_B_RANGE) * h)),
        ventricle_scale=float(rng.uniform(*VENTRICLE_SCALE_RANGE)),
        ventricle_angle=float(rng.uniform(*VENTRICLE_ANGLE_RANGE)),
        sulcal_freq=float(rng.uniform(*SULCAL_FREQ_RANGE)),
        sulcal_phase=float(rng.uniform(0.0, 2.0 * math.pi)),
        tissue_base=float(rng.uniform(*TISSUE_BASE_RANGE)),
        texture_seed=int(rng.integers(0, 2 ** 31 - 1)),
    )
    count = _truncated_poisson(rng, LESION_RATE, MAX_LESIONS) if lesion_count is None else int(lesion_count)
    masks = anatomy_masks(factors, resolution)
    valid = masks.valid

    lesions = []
    for i in range(count):
        for _ in range(MAX_PLACEMENT_TRIES):
            ix, iy = int(rng.integers(0, w)), int(rng.integers(0, h))
            if valid[iy, ix]:
                break
        else:
            raise PhantomGenerationError(
                f"no valid lesion location after {MAX_PLACEMENT_TRIES} tries (lesion {i}, factors {factors})"
            )
        lesions.append(
            Lesion(
                cx=ix + 0.5,
                cy=iy + 0.5,
                radius=float(rng.uniform(*LESION_RADIUS_RANGE)),
                boost=float(rng.uniform(*LESION_BOOST_RANGE)),
            )
        )
    factors.lesion_count = count
    factors.lesion_params = lesions
    factors.lesion_area = int(lesion_mask(factors, masks, resolution).sum())
    return factors


def render(factors: FactorRecord, resolution: Tuple[int, int] = DEFAULT_RESOLUTION) -> PhantomSample:
    """Paint the phantom and standardise it to zero mean and unit variance"""
    xs, ys = _grid(resolution)
    masks = anatomy_masks(factors, resolution)
    valid = masks.valid

    image = np.zeros(masks.brain.shape, dtype=np.float64)
    image[masks.skull] = 0.6
    image[masks.brain] = 0.7 * factors.tissue_base
    image[masks.white_matter & masks.brain] = factors.tissue_base

    texture_rng = np.random.default_rng(factors.texture_seed)
    texture = ndimage.gaussian_filter(texture_rng.standard_normal(masks.brain.shape), sigma=1.5)
    image += 0.05 * texture / (texture.std() + 1e-12) * masks.brain

    image[masks.ventricles] = 0.15

    boost = np.zeros_like(image)
    mask = np.zeros(masks.brain.shape, dtype=bool)
    for lesion in factors.lesion_params:
        ix, iy = int(lesion.cx), int(lesion.cy)
        if not (0 <= iy < valid.shape[0] and 0 <= ix < valid.shape[1]) or not valid[iy, ix]:
            raise PhantomInvariantError(f"lesion centre ({lesion.cx}, {lesion.cy}) outside white matter or inside ventricles")
        coverage = _lesion_coverage(lesion, xs, ys)
        boost = np.maximum(boost, lesion.boost * coverage)
        mask |= coverage >= 0.5
    mask &= valid
    image += boost * valid

    if int(mask.sum()) != factors.lesion_area:
        raise PhantomInvariantError(
            f"rendered lesion area {int(mask.sum())} != recorded lesion_area {factors.lesion_area}"
        )

    image = (image - image.mean()) / image.std()
    return PhantomSample(image=image.astype(np.float32), lesion_mask=mask.astype(np.uint8), factors=factors)


def split_sizes(n: int) -> Tuple[int, int, int]:
    """(train, val, test): floor 20 % each for val/test, remainder to train"""
    n_val = n // 5
    n_test = n // 5
    return n - n_val - n_test, n_val, n_test


def assign_splits(n: int, seed: int) -> Dict[str, List[int]]:
    perm = np.random.default_rng([seed, 0]).permutation(n)
    n_train, n_val, _ = split_sizes(n)
    return {
        "train": sorted(int(i) for i in perm[:n_train]),
        "val": sorted(int(i) for i in perm[n_train : n_train + n_val]),
        "test": sorted(int(i) for i in perm[n_train + n_val :]),
    }


def generate_sample(seed: int, index: int, resolution: Tuple[int, int] = DEFAULT_RESOLUTION) -> PhantomSample:
    """Sample ``index`` of a dataset; its RNG stream depends only on (seed, index)"""
    rng = np.random.default_rng([seed, index + 1])
    return render(sample_factors(rng, resolution), resolution)


def make_dataset(
    n: int,
    seed: int,
    out_dir: Union[str, Path],
    resolution: Tuple[int, int] = DEFAULT_RESOLUTION,
    workers: int = 1,
) -> Dict:
    """Write ``n`` phantoms plus manifest.json to ``out_dir`` and return the manifest"""
    if n < 5:
        raise DataError(f"need at least 5 samples for a 60/20/20 split, got {n}")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataError(f"cannot create dataset directory {out_dir}: {e}") from e

    logger.info(f"Generating {n} phantoms at {resolution[0]}x{resolution[1]} (seed={seed}) -> {out_dir}")

    def _write(index: int) -> Dict:
        sample = generate_sample(seed, index, resolution)
        sample.image.astype("<f4").tofile(out_dir / f"img_{index:06d}.f32")
        sample.lesion_mask.astype(np.uint8).tofile(out_dir / f"msk_{index:06d}.u8")
        return sample.factors.to_dict()

    try:
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                records = list(pool.map(_write, range(n)))
        else:
            records = [_write(i) for i in range(n)]
    except OSError as e:
        raise DataError(f"cannot write dataset to {out_dir}: {e}") from e

    splits = assign_splits(n, seed)
    manifest = {
        "version": MANIFEST_VERSION,
        "n": n,
        "seed": seed,
        "resolution": list(resolution),
        "splits": splits,
        "samples": records,
    }
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")

    logger.info(
        f"✅ Dataset written: train={len(splits['train'])} val={len(splits['val'])} test={len(splits['test'])}"
    )
    return manifest


class PhantomDataset:
    """In-memory view of a dataset directory"""

    def __init__(self, root: Union[str, Path]):
        self.root = Path(root)
        manifest_path = self.root / "manifest.json"
        if not manifest_path.exists():
            raise DataError(f"no manifest.json in {self.root}")
        try:
            with open(manifest_path, "r", encoding="utf-8") as f:
                self.manifest = json.load(f)
        except json.JSONDecodeError as e:
            raise DataError(f"unreadable manifest {manifest_path}: {e}") from e
        if self.manifest.get("version") != MANIFEST_VERSION:
            raise DataError(f"unsupported manifest version {self.manifest.get('version')}")

        w, h = self.manifest["resolution"]
        self.resolution = (int(w), int(h))
        self.n = int(self.manifest["n"])
        self.splits = {k: list(v) for k, v in self.manifest["splits"].items()}
        self.factors = [FactorRecord.from_dict(r) for r in self.manifest["samples"]]

        images = np.empty((self.n, 1, h, w), dtype=np.float32)
        masks = np.empty((self.n, 1, h, w), dtype=np.uint8)
        for i in range(self.n):
            images[i, 0] = _read_raw(self.root / f"img_{i:06d}.f32", "<f4", (h, w))
            masks[i, 0] = _read_raw(self.root / f"msk_{i:06d}.u8", np.uint8, (h, w))
        self.images = images
        self.masks = masks

    def __len__(self) -> int:
        return self.n

    def split(self, name: str) -> List[int]:
        if name not in self.splits:
            raise DataError(f"unknown split {name!r}; have {sorted(self.splits)}")
        return self.splits[name]

    def lesion_areas(self, indices: Optional[Sequence[int]] = None) -> np.ndarray:
        indices = range(self.n) if indices is None else indices
        return np.array([self.factors[i].lesion_area for i in indices], dtype=np.float64)


def _read_raw(path: Path, dtype, shape: Tuple[int, int]) -> np.ndarray:
    if not path.exists():
        raise DataError(f"missing sample file {path}")
    data = np.fromfile(path, dtype=dtype)
    if data.size != shape[0] * shape[1]:
        raise DataError(f"{path} holds {data.size} values, expected {shape[0] * shape[1]}")
    return data.reshape(shape)
