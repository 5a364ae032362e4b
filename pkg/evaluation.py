"""Generation, segmentation and classification metrics.

FID/KID run on feature matrices from a registered extractor. Dice, Hausdorff
and average surface distance compare integer masks; the two distances work on
class boundaries (4-connectivity, image border counts as outside) in pixels.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import linalg
from scipy.ndimage import binary_erosion, distance_transform_edt, generate_binary_structure
from sklearn.metrics import accuracy_score, precision_recall_fscore_support
from sklearn.metrics.pairwise import polynomial_kernel

from data_cleaning import resize_image
from errors import ConfigurationError, ContractViolation, NumericFault, ParameterError, ShapeError

logger = logging.getLogger(__name__)

STRUCTURES = {1: 'LV-endo', 2: 'LV-epi', 3: 'LA'}
PHASE_LABELS = ('ED', 'ES')
KID_SCALE_NOTE = 'KID values are raw (not multiplied by 1e3)'
DISTANCE_UNITS = 'pixels'


@dataclass
class FeatureSet:
    features: np.ndarray
    extractor: str
    source_hash: Optional[str] = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise ShapeError(f"features must be N x d, got shape {self.features.shape}")
        if not np.isfinite(self.features).all():
            raise NumericFault(f"non-finite features from extractor '{self.extractor}'")

    def __len__(self):
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def take(self, rows: Sequence[int]) -> 'FeatureSet':
        return FeatureSet(self.features[list(rows)], self.extractor, self.source_hash)


@dataclass
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        if not np.allclose(self.cov, self.cov.T, atol=1e-10):
            raise NumericFault("covariance is not symmetric")
        smallest = float(linalg.eigvalsh(self.cov)[0]) if self.cov.size else 0.0
        if smallest < -1e-8 * max(1.0, float(np.abs(self.cov).max())):
            raise NumericFault(f"covariance is not positive semi-definite (min eigenvalue {smallest:.3e})")

    @classmethod
    def from_features(cls, fs: FeatureSet) -> 'GaussianStats':
        if len(fs) < 2:
            raise ParameterError(f"need at least 2 feature rows for statistics, got {len(fs)}")
        cov = np.cov(fs.features, rowvar=False).reshape(fs.dim, fs.dim)
        return cls(mean=fs.features.mean(axis=0), cov=(cov + cov.T) / 2.0)


_EXTRACTORS: Dict[str, Callable[..., 'FeatureExtractor']] = {}


def register_extractor(name: str):
    def decorator(factory):
        _EXTRACTORS[name] = factory
        return factory
    return decorator


def available_extractors() -> List[str]:
    return sorted(_EXTRACTORS)


class FeatureExtractor:
    name = 'base'

    @property
    def fingerprint(self) -> str:
        return self.name

    def __call__(self, images: np.ndarray) -> np.ndarray:
        raise NotImplementedError


@register_extractor('random-projection')
class RandomProjectionExtractor(FeatureExtractor):
    """Deterministic test embedder: resize, flatten, fixed Gaussian projection"""
    name = 'random-projection'

    def __init__(self, dim: int = 64, seed: int = 0, size: Tuple[int, int] = (32, 32)):
        self.dim, self.seed, self.size = int(dim), int(seed), tuple(size)
        rng = np.random.default_rng(self.seed)
        pixels = self.size[0] * self.size[1]
        self.projection = rng.standard_normal((pixels, self.dim)) / math.sqrt(pixels)

    @property
    def fingerprint(self) -> str:
        return f"{self.name}-d{self.dim}-s{self.seed}-{self.size[0]}x{self.size[1]}"

    def __call__(self, images: np.ndarray) -> np.ndarray:
        flat = np.stack([resize_image(np.asarray(img, dtype=np.float32), self.size).reshape(-1)
                         for img in images]).astype(np.float64)
        return flat @ self.projection


@register_extractor('inception')
class InceptionExtractor(FeatureExtractor):
    """2048-d pool features of an Inception-v3 loaded from a local weight file"""
    name = 'inception'

    def __init__(self, asset: Optional[str] = None, device: str = 'cpu'):
        if not asset:
            raise ConfigurationError("inception extractor needs assets.inception (a local weight file)")
        import torch
        from torchvision.models import inception_v3
        self.torch = torch
        model = inception_v3(weights=None, aux_logits=True, init_weights=False)
        model.load_state_dict(torch.load(asset, map_location='cpu'))
        model.fc = torch.nn.Identity()
        self.model = model.eval().to(device)
        self.device = device

    def __call__(self, images: np.ndarray) -> np.ndarray:
        torch = self.torch
        batch = torch.as_tensor(np.stack(images), dtype=torch.float32)[:, None].repeat(1, 3, 1, 1)
        batch = torch.nn.functional.interpolate(batch, size=(299, 299), mode='bilinear', align_corners=False)
        with torch.no_grad():
            return self.model((batch * 2.0 - 1.0).to(self.device)).cpu().numpy().astype(np.float64)


def get_extractor(name: str, **kwargs) -> FeatureExtractor:
    if name not in _EXTRACTORS:
        raise ConfigurationError(f"Unregistered extractor '{name}'; available: {available_extractors()}")
    return _EXTRACTORS[name](**kwargs)


def extract_features(images: Sequence[np.ndarray], extractor: Union[str, FeatureExtractor],
                     batch_size: int = 64, source_hash: Optional[str] = None, workers: int = 1) -> FeatureSet:
    """Row i of the result embeds images[i]"""
    if isinstance(extractor, str):
        extractor = get_extractor(extractor)
    images = list(images)
    if not images:
        return FeatureSet(np.zeros((0, 0)), extractor.fingerprint, source_hash)
    batches = [images[i:i + batch_size] for i in range(0, len(images), batch_size)]
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        parts = list(pool.map(extractor, batches))
    return FeatureSet(np.concatenate(parts, axis=0), extractor.fingerprint, source_hash)


class FeatureCache:
    """.npy cache keyed by manifest content hash and extractor fingerprint"""

    def __init__(self, directory: Union[str, Path]):
        self.directory = Path(directory)

    def path(self, source_hash: str, fingerprint: str) -> Path:
        return self.directory / f"{source_hash}-{fingerprint}.npy"

    def get_or_compute(self, source_hash: str, extractor: FeatureExtractor,
                       compute: Callable[[], FeatureSet]) -> FeatureSet:
        path = self.path(source_hash, extractor.fingerprint)
        if path.is_file():
            logger.info(f"Feature cache hit: {path.name}")
            return FeatureSet(np.load(path), extractor.fingerprint, source_hash)
        features = compute()
        self.directory.mkdir(parents=True, exist_ok=True)
        np.save(path, features.features)
        return features


def _check_pair(a, b):
    if a.dim != b.dim:
        raise ShapeError(f"feature dimensions differ: {a.dim} vs {b.dim}")


def _trace_sqrt_product(cov_a: np.ndarray, cov_b: np.ndarray) -> float:
    """Tr((cov_a cov_b)^{1/2}) via the symmetric form sqrt(A) B sqrt(A)"""
    try:
        w, v = linalg.eigh(cov_a)
        sqrt_a = (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T
        product = sqrt_a @ cov_b @ sqrt_a
        product = (product + product.T) / 2.0
        eig = linalg.eigvalsh(product)
    except (linalg.LinAlgError, ValueError) as e:
        cond_a, cond_b = np.linalg.cond(cov_a), np.linalg.cond(cov_b)
        raise NumericFault(f"matrix square root failed ({e}); cond(cov_a)={cond_a:.3e}, "
                           f"cond(cov_b)={cond_b:.3e}") from e
    return float(np.sqrt(np.clip(eig, 0.0, None)).sum())


def fid(a: FeatureSet, b: FeatureSet) -> float:
    """Frechet distance between Gaussian fits of two feature sets"""
    _check_pair(a, b)
    sa, sb = GaussianStats.from_features(a), GaussianStats.from_features(b)
    diff = sa.mean - sb.mean
    value = float(diff @ diff + np.trace(sa.cov) + np.trace(sb.cov) - 2.0 * _trace_sqrt_product(sa.cov, sb.cov))
    if value < 0.0:
        if value < -1e-6 * max(1.0, float(np.trace(sa.cov) + np.trace(sb.cov))):
            logger.warning(f"FID came out at {value:.3e}; clamped to 0")
        value = 0.0
    return value


def mmd2_unbiased(x: np.ndarray, y: np.ndarray) -> float:
    """Unbiased MMD^2 under k(x, y) = (x.y / d + 1)^3"""
    d = x.shape[1]
    kxx = polynomial_kernel(x, degree=3, gamma=1.0 / d, coef0=1)
    kyy = polynomial_kernel(y, degree=3, gamma=1.0 / d, coef0=1)
    kxy = polynomial_kernel(x, y, degree=3, gamma=1.0 / d, coef0=1)
    m, n = x.shape[0], y.shape[0]
    term_x = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    term_y = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    return float(term_x + term_y - 2.0 * kxy.mean())


def kid(a: FeatureSet, b: FeatureSet, subset_size: Optional[int] = None, n_subsets: int = 100,
        seed: int = 0) -> Tuple[float, float]:
    """Mean and std of unbiased MMD^2 over seeded subsets drawn without replacement"""
    _check_pair(a, b)
    limit = min(len(a), len(b))
    if subset_size is None:
        subset_size = min(1000, limit)
    if subset_size > limit:
        raise ParameterError(f"KID subset_size {subset_size} exceeds the smaller set ({limit})")
    if subset_size < 2:
        raise ParameterError(f"KID subset_size must be >= 2, got {subset_size}")
    if n_subsets < 1:
        raise ParameterError(f"KID n_subsets must be >= 1, got {n_subsets}")
    rng = np.random.default_rng(seed)
    values = []
    for _ in range(n_subsets):
        ia = rng.choice(len(a), subset_size, replace=False)
        ib = rng.choice(len(b), subset_size, replace=False)
        values.append(mmd2_unbiased(a.features[ia], b.features[ib]))
    return float(np.mean(values)), float(np.std(values))


@dataclass(frozen=True)
class Distance:
    """A boundary distance; ``defined`` is False when either mask is empty"""
    value: float
    defined: bool = True

    def __float__(self):
        return float(self.value)


def _binary(mask, cls):
    mask = np.asarray(mask)
    return mask == cls if cls is not None else mask.astype(bool)


def _check_masks(pred, gt):
    if np.shape(pred) != np.shape(gt):
        raise ShapeError(f"mask shapes differ: {np.shape(pred)} vs {np.shape(gt)}")


def dice(pred: np.ndarray, gt: np.ndarray, cls: Optional[int] = None) -> float:
    """2|P & G| / (|P| + |G|); 1.0 when both are empty"""
    _check_masks(pred, gt)
    if cls is not None and cls not in STRUCTURES:
        raise ParameterError(f"dice class must be one of {sorted(STRUCTURES)}, got {cls}")
    p, g = _binary(pred, cls), _binary(gt, cls)
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / total


def boundary(mask: np.ndarray) -> np.ndarray:
    """Class pixels 4-adjacent to a non-class pixel or to the image border"""
    structure = generate_binary_structure(mask.ndim, 1)
    return mask & ~binary_erosion(mask, structure=structure, border_value=0)


def _surface_distances(pred, gt, cls) -> Optional[Tuple[np.ndarray, np.ndarray]]:
    _check_masks(pred, gt)
    p, g = _binary(pred, cls), _binary(gt, cls)
    if not p.any() or not g.any():
        return None
    bp, bg = boundary(p), boundary(g)
    return distance_transform_edt(~bg)[bp], distance_transform_edt(~bp)[bg]


def hausdorff(pred: np.ndarray, gt: np.ndarray, cls: Optional[int] = None) -> Distance:
    dists = _surface_distances(pred, gt, cls)
    if dists is None:
        return Distance(float('nan'), defined=False)
    return Distance(float(max(dists[0].max(), dists[1].max())))


def asd(pred: np.ndarray, gt: np.ndarray, cls: Optional[int] = None) -> Distance:
    dists = _surface_distances(pred, gt, cls)
    if dists is None:
        return Distance(float('nan'), defined=False)
    return Distance(float(np.concatenate(dists).mean()))


def segmentation_scores(preds: Sequence[np.ndarray], gts: Sequence[np.ndarray],
                        workers: int = 1) -> Dict[str, Dict[str, float]]:
    """Per-structure mean Dice/HD/ASD; undefined distances are excluded and counted"""
    if len(preds) != len(gts):
        raise ShapeError(f"{len(preds)} predictions for {len(gts)} ground truths")

    def score(pair):
        pred, gt = pair
        return {cls: (dice(pred, gt, cls), hausdorff(pred, gt, cls), asd(pred, gt, cls)) for cls in STRUCTURES}

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        per_image = list(pool.map(score, zip(preds, gts)))

    table: Dict[str, Dict[str, float]] = {}
    for cls, name in STRUCTURES.items():
        dices = [row[cls][0] for row in per_image]
        hds = [row[cls][1] for row in per_image]
        asds = [row[cls][2] for row in per_image]
        table[name] = {
            'dice': float(np.mean(dices)) if dices else float('nan'),
            'hd': float(np.mean([d.value for d in hds if d.defined])) if any(d.defined for d in hds) else float('nan'),
            'asd': float(np.mean([d.value for d in asds if d.defined])) if any(d.defined for d in asds) else float('nan'),
            'undefined': sum(not d.defined for d in hds),
        }
    table['mean'] = {k: float(np.nanmean([table[n][k] for n in STRUCTURES.values()]))
                     if any(not math.isnan(table[n][k]) for n in STRUCTURES.values()) else float('nan')
                     for k in ('dice', 'hd', 'asd')}
    table['mean']['undefined'] = sum(table[n]['undefined'] for n in STRUCTURES.values())
    return table


def classification_metrics(pred_labels: Sequence, true_labels: Sequence,
                           labels: Sequence = PHASE_LABELS) -> Dict[str, float]:
    """ACC plus macro-averaged PR/RC/F1 over ``labels``"""
    if len(pred_labels) != len(true_labels):
        raise ShapeError(f"{len(pred_labels)} predictions for {len(true_labels)} labels")
    if len(true_labels) == 0:
        raise ParameterError("classification_metrics needs at least one label")
    precision, recall, f1, _ = precision_recall_fscore_support(
        true_labels, pred_labels, labels=list(labels), average='macro', zero_division=0)
    return {'ACC': float(accuracy_score(true_labels, pred_labels)),
            'PR': float(precision), 'RC': float(recall), 'F1': float(f1)}


@dataclass
class MetricReport:
    generation: Dict[str, Dict[str, float]] = field(default_factory=dict)
    segmentation: Dict[str, Dict[str, float]] = field(default_factory=dict)
    classification: Dict[str, float] = field(default_factory=dict)
    notes: List[str] = field(default_factory=lambda: [KID_SCALE_NOTE, f"distances in {DISTANCE_UNITS}"])

    @property
    def mean_fid(self) -> float:
        values = [cell['fid'] for cell in self.generation.values() if cell.get('defined')]
        return float(np.mean(values)) if values else float('nan')

    def check(self) -> 'MetricReport':
        for name, row in self.segmentation.items():
            if not math.isnan(row.get('dice', 0.0)) and not 0.0 <= row['dice'] <= 1.0:
                raise ContractViolation(f"Dice for {name} outside [0, 1]: {row['dice']}")
            for key in ('hd', 'asd'):
                if not math.isnan(row.get(key, 0.0)) and row[key] < 0:
                    raise ContractViolation(f"{key} for {name} is negative")
        for key, value in self.classification.items():
            if not 0.0 <= value <= 1.0:
                raise ContractViolation(f"{key} outside [0, 1]: {value}")
        for cell, row in self.generation.items():
            if row.get('defined') and row['fid'] < 0:
                raise ContractViolation(f"FID for {cell} is negative")
        return self

    def generation_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame.from_dict(self.generation, orient='index')
        frame.index.name = 'cell'
        return frame

    def to_dict(self) -> Dict:
        return {**asdict(self), 'mean_fid': self.mean_fid}


def evaluate_generation(real: Dict[str, List[np.ndarray]], synth: Dict[str, List[np.ndarray]],
                        real_features: Dict[str, FeatureSet], synth_features: Dict[str, FeatureSet],
                        kid_subset_size: Optional[int] = None, kid_subsets: int = 100,
                        seed: int = 0) -> MetricReport:
    """FID and KID per (view, phase) cell; cells with fewer than two images are undefined"""
    report = MetricReport()
    for cell in real:
        a, b = real_features.get(cell), synth_features.get(cell)
        row = {'n_real': len(real.get(cell, [])), 'n_synth': len(synth.get(cell, [])),
               'fid': float('nan'), 'kid_mean': float('nan'), 'kid_std': float('nan'), 'defined': False}
        if a is not None and b is not None and len(a) >= 2 and len(b) >= 2:
            size = min(kid_subset_size or 1000, len(a), len(b))
            row['fid'] = fid(a, b)
            row['kid_mean'], row['kid_std'] = kid(a, b, size, kid_subsets, seed)
            row['defined'] = True
        else:
            logger.warning(f"cell {cell}: fewer than 2 images on one side; marked undefined")
        report.generation[cell] = row
    return report.check()


if __name__ == "__main__":
    pred = np.zeros((8, 8), dtype=np.uint8)
    gt = np.zeros((8, 8), dtype=np.uint8)
    pred[2:6, 2:6] = 1
    gt[3:7, 2:6] = 1
    print("Dice:", dice(pred, gt, 1))
    print("HD:", hausdorff(pred, gt, 1).value, "ASD:", asd(pred, gt, 1).value)
    print("Classification:", classification_metrics(['ED', 'ES', 'ES', 'ED'], ['ED', 'ES', 'ED', 'ED']))
