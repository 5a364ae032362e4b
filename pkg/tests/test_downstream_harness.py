from dataclasses import replace

import numpy as np
import pytest
import torch
import torch.nn as nn

from downstream_harness import (LightUNet, ProbeConfig, RegimeResult, SegConfig, build_backbone,
                                compare_regimes, linear_probe, linear_probe_features, load_regime,
                                save_regime, segmentation_loss, train_segmentation)
from errors import ComparisonError, ConfigurationError, DataIntegrityError, InvariantViolation, ParameterError
from generative_models import parameter_checksum
from prompt_engineering import ViewPhase, render_textual

from tests.conftest import make_records

SMALL_SEG = dict(epochs=2, batch_size=4, base_width=4, depth=2, patience=5)


def _regime(name, dice, hd, validation_hash='v1', curve=()):
    return RegimeResult(regime=name, validation_hash=validation_hash,
                        metrics={'dice_mean': dice, 'hd_mean': hd}, curve=list(curve))


def test_compare_needs_two_results_on_one_validation_set():
    with pytest.raises(ComparisonError):
        compare_regimes([_regime('Real', 0.8, 5.0)])
    with pytest.raises(ComparisonError):
        compare_regimes([_regime('Real', 0.8, 5.0), _regime('Real+50%', 0.9, 4.0, validation_hash='v2')])


def test_compare_flags_and_deltas():
    comparison = compare_regimes([
        _regime('Real', 0.80, 6.0, curve=[0.5, 0.8]),
        _regime('Real+50%', 0.90, 4.0),
        _regime('Real+100%', 0.85, 5.0),
    ])
    assert list(comparison.table.index) == ['Real', 'Real+50%', 'Real+100%']
    assert comparison.flags.loc['Real+50%', 'dice_mean'] == 'best'
    assert comparison.flags.loc['Real+100%', 'dice_mean'] == 'second'
    assert comparison.flags.loc['Real+50%', 'hd_mean'] == 'best'
    assert comparison.flags.loc['Real', 'hd_mean'] == ''
    assert comparison.deltas.loc['Real+50%', 'dice_mean'] == pytest.approx(0.10)
    assert comparison.deltas.loc['Real+50%', 'hd_mean'] == pytest.approx(-2.0)
    assert comparison.curves == {'Real': [0.5, 0.8]}
    assert comparison.validation_hash == 'v1'


def test_regime_labels_include_backbone():
    result = RegimeResult('Real+100%', 'v1', {'ACC': 0.9}, backbone='resnet18')
    assert result.label == 'Real+100% [resnet18]'


def test_regime_persistence(tmp_path):
    result = _regime('Real+200%', 0.7, float('nan'), curve=[0.1, 0.2])
    loaded = load_regime(save_regime(result, tmp_path / 'results' / 'seg_200.json'))
    assert loaded.regime == 'Real+200%' and loaded.curve == [0.1, 0.2]
    assert loaded.metrics['dice_mean'] == 0.7 and np.isnan(loaded.metrics['hd_mean'])
    with pytest.raises(ComparisonError):
        load_regime(tmp_path / 'missing.json')


def test_light_unet_and_loss():
    model = LightUNet(base_width=4, depth=3)
    logits = model(torch.zeros(2, 1, 16, 16))
    assert logits.shape == (2, 4, 16, 16)
    target = torch.zeros(2, 16, 16, dtype=torch.long)
    loss = segmentation_loss(logits, target)
    assert loss.ndim == 0 and float(loss) > 0


def test_seg_config_validation():
    with pytest.raises(ConfigurationError):
        SegConfig(classes=3)
    with pytest.raises(ParameterError):
        SegConfig(mix_percent=-50)


def test_segmentation_training_runs():
    train = make_records(3, size=(16, 16))
    validation = make_records(1, size=(16, 16), prefix='val')
    result = train_segmentation(SegConfig(**SMALL_SEG), train, validation)
    assert 1 <= len(result.history) <= 2
    assert 1 <= result.best_epoch <= 2
    for name in ('LV-endo', 'LV-epi', 'LA', 'mean'):
        assert 0.0 <= result.table[name]['dice'] <= 1.0
    regime = result.to_regime('Real')
    assert {'dice_LV-endo', 'hd_mean', 'asd_LA'} <= set(regime.metrics)
    assert len(regime.curve) == len(result.history)


def test_segmentation_rejects_unlabeled_synthetic_and_impure_validation():
    prompt = render_textual(ViewPhase('2CH', 'ED'))
    real = make_records(2, size=(16, 16))
    synthetic = replace(real[0], provenance='synthetic', source_prompt=prompt, sample_index=0)
    with pytest.raises(ConfigurationError):
        train_segmentation(SegConfig(**SMALL_SEG), real + [replace(synthetic, label_map=None)], real[:4])
    with pytest.raises(DataIntegrityError):
        train_segmentation(SegConfig(**SMALL_SEG), real, real[:4] + [synthetic])


def test_probe_config_validation():
    with pytest.raises(ConfigurationError):
        ProbeConfig(frozen=False)
    with pytest.raises(ConfigurationError):
        ProbeConfig(backbone='alexnet')
    with pytest.raises(ConfigurationError):
        build_backbone(ProbeConfig(backbone='resnet18'))


def test_linear_probe_on_separable_features():
    rng = np.random.default_rng(0)
    train_x = np.concatenate([rng.normal(3, 0.5, (20, 4)), rng.normal(-3, 0.5, (20, 4))])
    val_x = np.concatenate([rng.normal(3, 0.5, (5, 4)), rng.normal(-3, 0.5, (5, 4))])
    train_y = ['ED'] * 20 + ['ES'] * 20
    val_y = ['ED'] * 5 + ['ES'] * 5
    metrics, predictions = linear_probe_features(train_x, train_y, val_x, val_y)
    assert metrics == {'ACC': 1.0, 'PR': 1.0, 'RC': 1.0, 'F1': 1.0}
    assert list(predictions) == val_y


def test_linear_probe_keeps_backbone_frozen():
    config = ProbeConfig(seed=3)
    train = make_records(4, size=(16, 16))
    validation = make_records(2, size=(16, 16), prefix='val')
    result = linear_probe(config, train, validation)
    assert result.backbone_checksum == parameter_checksum(build_backbone(config))
    assert all(0.0 <= v <= 1.0 for v in result.metrics.values())
    assert len(result.predictions) == len(validation)
    assert result.to_regime('Real').backbone == 'small-cnn'


def test_linear_probe_detects_drifting_backbone():
    class Drifting(nn.Module):
        def __init__(self):
            super().__init__()
            self.scale = nn.Parameter(torch.ones(()))

        def forward(self, x):
            self.scale.add_(1.0)
            return x.flatten(1) * self.scale

    train = make_records(2, size=(8, 8))
    validation = make_records(1, size=(8, 8), prefix='val')
    with pytest.raises(InvariantViolation):
        linear_probe(ProbeConfig(), train, validation, backbone=Drifting())
