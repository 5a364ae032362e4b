"""Downstream tasks on Real+k% mixes: UNet segmentation, ED/ES linear probes and regime comparison."""
import copy
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
import torch.nn as nn
import torch.nn.functional as F
from sklearn.linear_model import LogisticRegression
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler
from tqdm import tqdm

from dataset_pipeline import DatasetManifest, PatientRecord
from errors import ComparisonError, ConfigurationError, InvariantViolation, ParameterError
from evaluation import STRUCTURES, classification_metrics, segmentation_scores
from generative_models import parameter_checksum
from validator import check_validation_purity, missing_label_keys

logger = logging.getLogger(__name__)

NUM_CLASSES = 4
LOWER_IS_BETTER = ('hd', 'asd', 'fid', 'kid')

Records = Union[DatasetManifest, Sequence[PatientRecord]]


def _records(data: Records, size: Optional[Tuple[int, int]] = None) -> List[PatientRecord]:
    if isinstance(data, DatasetManifest):
        return data.load_records(size=size)
    return list(data)


def _content_hash(data: Records) -> Optional[str]:
    return data.content_hash() if isinstance(data, DatasetManifest) else None


def _stack_images(records: Sequence[PatientRecord]) -> torch.Tensor:
    return torch.from_numpy(np.stack([r.image for r in records])[:, None].astype(np.float32))


@dataclass
class SegConfig:
    epochs: int = 20
    learning_rate: float = 1e-3
    batch_size: int = 8
    mix_percent: int = 0
    seed: int = 0
    classes: int = NUM_CLASSES
    base_width: int = 16
    depth: int = 3
    patience: int = 5
    hflip: bool = False
    device: str = 'cpu'
    workers: int = 1

    def __post_init__(self):
        if self.classes != NUM_CLASSES:
            raise ConfigurationError(f"segmentation.classes is fixed to {NUM_CLASSES}, got {self.classes}")
        if int(self.mix_percent) != self.mix_percent or self.mix_percent < 0:
            raise ParameterError(f"segmentation.mix_percent must be a non-negative integer, got {self.mix_percent}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ParameterError("segmentation.epochs and batch_size must be >= 1")


def _double_conv(in_ch, out_ch):
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, 3, padding=1), nn.BatchNorm2d(out_ch), nn.ReLU(inplace=True),
        nn.Conv2d(out_ch, out_ch, 3, padding=1), nn.BatchNorm2d(out_ch), nn.ReLU(inplace=True))


class LightUNet(nn.Module):
    """Small encoder-decoder with skip connections"""

    def __init__(self, in_channels=1, classes=NUM_CLASSES, base_width=16, depth=3):
        super().__init__()
        widths = [base_width * 2 ** i for i in range(depth)]
        self.downs = nn.ModuleList()
        prev = in_channels
        for w in widths:
            self.downs.append(_double_conv(prev, w))
            prev = w
        self.ups = nn.ModuleList()
        self.up_convs = nn.ModuleList()
        for w in reversed(widths[:-1]):
            self.ups.append(nn.ConvTranspose2d(prev, w, 2, stride=2))
            self.up_convs.append(_double_conv(2 * w, w))
            prev = w
        self.head = nn.Conv2d(prev, classes, 1)

    def forward(self, x):
        skips = []
        for i, down in enumerate(self.downs):
            x = down(x)
            if i < len(self.downs) - 1:
                skips.append(x)
                x = F.max_pool2d(x, 2)
        for up, conv, skip in zip(self.ups, self.up_convs, reversed(skips)):
            x = conv(torch.cat([up(x), skip], dim=1))
        return self.head(x)


def segmentation_loss(logits: torch.Tensor, target: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Cross-entropy plus soft Dice over the foreground classes"""
    ce = F.cross_entropy(logits, target)
    probs = logits.softmax(dim=1)[:, 1:]
    one_hot = F.one_hot(target, logits.shape[1]).permute(0, 3, 1, 2).float()[:, 1:]
    inter = (probs * one_hot).sum(dim=(0, 2, 3))
    denom = probs.sum(dim=(0, 2, 3)) + one_hot.sum(dim=(0, 2, 3))
    soft_dice = (2 * inter + eps) / (denom + eps)
    return ce + (1 - soft_dice.mean())


@torch.no_grad()
def predict_masks(model: nn.Module, images: torch.Tensor, batch_size: int = 16) -> List[np.ndarray]:
    model.eval()
    device = next(model.parameters()).device
    masks = []
    for i in range(0, images.shape[0], batch_size):
        logits = model(images[i:i + batch_size].to(device))
        masks.extend(m.astype(np.uint8) for m in logits.argmax(dim=1).cpu().numpy())
    return masks


@dataclass
class SegResult:
    model: nn.Module
    table: Dict[str, Dict[str, float]]
    history: List[Dict[str, float]] = field(default_factory=list)
    best_epoch: int = 0
    validation_hash: Optional[str] = None

    def to_regime(self, regime: str, seed: int = 0) -> 'RegimeResult':
        metrics = {}
        for name in [*STRUCTURES.values(), 'mean']:
            for key in ('dice', 'hd', 'asd'):
                metrics[f"{key}_{name}"] = self.table[name][key]
        curve = [row['val_dice'] for row in self.history]
        return RegimeResult(regime=regime, validation_hash=self.validation_hash, metrics=metrics,
                            seed=seed, curve=curve)


def train_segmentation(config: SegConfig, mixed: Records, validation: Records,
                       show_progress: bool = False) -> SegResult:
    """Train LightUNet on the mix, early-stopping on held-out mean Dice"""
    train_records = _records(mixed)
    missing = missing_label_keys(train_records)
    if missing:
        raise ConfigurationError(f"{len(missing)} synthetic records have no label map (e.g. {missing[0]}); "
                                 f"segmentation needs text_seg synthetic data")
    val_records = _records(validation, size=tuple(train_records[0].image.shape) if train_records else None)
    check_validation_purity([r.provenance for r in val_records])
    if not train_records or not val_records:
        raise ConfigurationError("segmentation needs non-empty train and validation sets")

    device = torch.device(config.device)
    torch.manual_seed(config.seed)
    generator = torch.Generator().manual_seed(config.seed)
    images = _stack_images(train_records)
    labels = torch.from_numpy(np.stack([r.label_map for r in train_records]).astype(np.int64))
    val_images = _stack_images(val_records)
    val_labels = [r.label_map for r in val_records]

    model = LightUNet(classes=config.classes, base_width=config.base_width, depth=config.depth).to(device)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    history: List[Dict[str, float]] = []
    best = (-1.0, 0, copy.deepcopy(model.state_dict()))
    stale = 0
    for epoch in tqdm(range(1, config.epochs + 1), desc='segmentation', disable=not show_progress):
        model.train()
        order = torch.randperm(images.shape[0], generator=generator)
        losses = []
        for i in range(0, len(order), config.batch_size):
            idx = order[i:i + config.batch_size]
            x, y = images[idx], labels[idx]
            if config.hflip and bool(torch.rand((), generator=generator) < 0.5):
                x, y = x.flip(-1), y.flip(-1)
            loss = segmentation_loss(model(x.to(device)), y.to(device))
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(float(loss))
        scores = segmentation_scores(predict_masks(model, val_images), val_labels, workers=config.workers)
        val_dice = scores['mean']['dice']
        history.append({'epoch': epoch, 'train_loss': float(np.mean(losses)), 'val_dice': val_dice})
        logger.info(f"epoch {epoch}: loss {np.mean(losses):.4f} val mean Dice {val_dice:.4f}")
        if val_dice > best[0]:
            best, stale = (val_dice, epoch, copy.deepcopy(model.state_dict())), 0
        else:
            stale += 1
            if stale >= config.patience:
                logger.info(f"early stop at epoch {epoch}; best epoch {best[1]}")
                break

    model.load_state_dict(best[2])
    table = segmentation_scores(predict_masks(model, val_images), val_labels, workers=config.workers)
    return SegResult(model=model, table=table, history=history, best_epoch=best[1],
                     validation_hash=_content_hash(validation))


@dataclass
class ProbeConfig:
    backbone: str = 'small-cnn'
    frozen: bool = True
    mix_percent: int = 0
    seed: int = 0
    C: float = 1.0
    max_iter: int = 1000
    batch_size: int = 32
    asset: Optional[str] = None

    def __post_init__(self):
        if not self.frozen:
            raise ConfigurationError("linear probing requires a frozen backbone")
        if self.backbone not in BACKBONES:
            raise ConfigurationError(f"Unknown backbone '{self.backbone}'; available: {sorted(BACKBONES)}")


class SmallCNNBackbone(nn.Module):
    """Seeded random conv feature extractor; asset-free stand-in for a pretrained backbone"""

    def __init__(self, seed: int = 0, width: int = 16):
        super().__init__()
        generator_state = torch.random.get_rng_state()
        torch.manual_seed(seed)
        self.features = nn.Sequential(
            nn.Conv2d(1, width, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(width, 2 * width, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(2 * width, 4 * width, 3, padding=1), nn.ReLU(),
            nn.AdaptiveAvgPool2d(2), nn.Flatten())
        torch.random.set_rng_state(generator_state)

    def forward(self, x):
        return self.features(x)


def _torchvision_backbone(name: str, asset: Optional[str]) -> nn.Module:
    if not asset:
        raise ConfigurationError(f"backbone '{name}' needs a local weight file (assets.{name})")
    import torchvision.models as models
    model = getattr(models, name)(weights=None)
    model.load_state_dict(torch.load(asset, map_location='cpu'))
    if name.startswith('resnet'):
        model.fc = nn.Identity()
    else:
        model.classifier = nn.Identity()

    class _Gray(nn.Module):
        def __init__(self, inner):
            super().__init__()
            self.inner = inner

        def forward(self, x):
            return self.inner(x.repeat(1, 3, 1, 1))

    return _Gray(model)


BACKBONES = {
    'small-cnn': lambda config: SmallCNNBackbone(seed=config.seed),
    'resnet18': lambda config: _torchvision_backbone('resnet18', config.asset),
    'vgg16': lambda config: _torchvision_backbone('vgg16', config.asset),
}


def build_backbone(config: ProbeConfig) -> nn.Module:
    backbone = BACKBONES[config.backbone](config).eval()
    for p in backbone.parameters():
        p.requires_grad_(False)
    return backbone


@torch.no_grad()
def backbone_features(backbone: nn.Module, images: torch.Tensor, batch_size: int = 32) -> np.ndarray:
    backbone.eval()
    parts = [backbone(images[i:i + batch_size]).reshape(min(batch_size, images.shape[0] - i), -1).numpy()
             for i in range(0, images.shape[0], batch_size)]
    return np.concatenate(parts, axis=0).astype(np.float64)


def linear_probe_features(train_x: np.ndarray, train_y: Sequence[str], val_x: np.ndarray,
                          val_y: Sequence[str], seed: int = 0, C: float = 1.0,
                          max_iter: int = 1000) -> Tuple[Dict[str, float], np.ndarray]:
    """Fit a single linear layer on fixed features; returns (metrics, validation predictions)"""
    head = make_pipeline(StandardScaler(), LogisticRegression(C=C, max_iter=max_iter, random_state=seed))
    head.fit(train_x, list(train_y))
    predictions = head.predict(val_x)
    return classification_metrics(list(predictions), list(val_y)), predictions


@dataclass
class ProbeResult:
    metrics: Dict[str, float]
    backbone: str
    backbone_checksum: str
    predictions: List[str] = field(default_factory=list)
    validation_hash: Optional[str] = None

    def to_regime(self, regime: str, seed: int = 0) -> 'RegimeResult':
        return RegimeResult(regime=regime, backbone=self.backbone, validation_hash=self.validation_hash,
                            metrics=dict(self.metrics), seed=seed)


def linear_probe(config: ProbeConfig, mixed: Records, validation: Records,
                 backbone: Optional[nn.Module] = None) -> ProbeResult:
    """ED/ES classification from frozen backbone features of every view"""
    train_records = _records(mixed)
    val_records = _records(validation, size=tuple(train_records[0].image.shape) if train_records else None)
    check_validation_purity([r.provenance for r in val_records])
    backbone = backbone if backbone is not None else build_backbone(config)
    before = parameter_checksum(backbone)

    train_x = backbone_features(backbone, _stack_images(train_records), config.batch_size)
    val_x = backbone_features(backbone, _stack_images(val_records), config.batch_size)
    metrics, predictions = linear_probe_features(
        train_x, [r.phase for r in train_records], val_x, [r.phase for r in val_records],
        seed=config.seed, C=config.C, max_iter=config.max_iter)

    after = parameter_checksum(backbone)
    if after != before:
        raise InvariantViolation(f"backbone '{config.backbone}' parameters changed during probing")
    logger.info(f"probe {config.backbone} Real+{config.mix_percent}%: {metrics}")
    return ProbeResult(metrics=metrics, backbone=config.backbone, backbone_checksum=after,
                       predictions=list(predictions), validation_hash=_content_hash(validation))


@dataclass
class RegimeResult:
    regime: str
    validation_hash: Optional[str]
    metrics: Dict[str, float]
    backbone: Optional[str] = None
    seed: int = 0
    curve: List[float] = field(default_factory=list)

    @property
    def label(self) -> str:
        return f"{self.regime} [{self.backbone}]" if self.backbone else self.regime


@dataclass
class RegimeComparison:
    table: pd.DataFrame
    deltas: pd.DataFrame
    flags: pd.DataFrame
    curves: Dict[str, List[float]]
    validation_hash: Optional[str]


def lower_is_better(column: str) -> bool:
    return column.lower().startswith(LOWER_IS_BETTER)


def compare_regimes(results: Sequence[RegimeResult]) -> RegimeComparison:
    """Side-by-side table, deltas against the first regime, best/second flags per column"""
    if len(results) < 2:
        raise ComparisonError(f"need at least 2 regime results to compare, got {len(results)}")
    hashes = {r.validation_hash for r in results}
    if len(hashes) != 1:
        raise ComparisonError(f"results were evaluated on different validation sets: {sorted(map(str, hashes))}")

    table = pd.DataFrame([r.metrics for r in results], index=[r.label for r in results])
    table.index.name = 'regime'
    deltas = table - table.iloc[0]
    flags = pd.DataFrame('', index=table.index, columns=table.columns)
    for column in table.columns:
        ranks = table[column].rank(method='min', ascending=lower_is_better(column))
        flags.loc[ranks == 1, column] = 'best'
        flags.loc[ranks == 2, column] = 'second'
    curves = {r.label: list(r.curve) for r in results if r.curve}
    return RegimeComparison(table=table, deltas=deltas, flags=flags, curves=curves,
                            validation_hash=hashes.pop())


def save_regime(result: RegimeResult, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(asdict(result), indent=2, sort_keys=True))
    return path


def load_regime(path: Union[str, Path]) -> RegimeResult:
    try:
        data = json.loads(Path(path).read_text())
        return RegimeResult(**data)
    except (OSError, ValueError, TypeError) as e:
        raise ComparisonError(f"Unreadable regime result {path}: {e}") from e
