"""Layered configuration: defaults < preset < YAML file < ECHOSYNTH__* environment < --set flags."""
import copy
import hashlib
import json
import logging
import os
from dataclasses import asdict
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Tuple, Union

import yaml
from fuzzywuzzy import process

from downstream_harness import ProbeConfig, SegConfig
from errors import ConfigurationError
from generative_models import CodecSpec, DenoiserSpec, TextEncoderSpec
from training_engine import PRESETS, TrainConfig

logger = logging.getLogger(__name__)

ENV_PREFIX = 'ECHOSYNTH__'

_train_defaults = asdict(TrainConfig())
_train_defaults.pop('mode')

DEFAULTS: Dict[str, Any] = {
    'seed': 0,
    'output_dir': 'runs',
    'preset': 'full',
    'assets': {'vae': None, 'text_encoder': None, 'inception': None, 'resnet18': None, 'vgg16': None},
    'data': {'views': [], 'phases': [], 'validation_patients': 50, 'workers': 4},
    'model': {
        'mode': 'unconditional',
        'image_size': 256,
        'image_channels': 1,
        'base_width': 64,
        'depth': 4,
        'attention_levels': None,
        'timestep_embedding_dim': 128,
        'codec': 'toy',
        'downsample_factor': 8,
        'latent_channels': 4,
        'codec_hidden_channels': 32,
        'text_encoder': 'hash-bow',
        'max_sequence_length': 16,
        'embedding_dim': 64,
        'vocab_size': 4096,
        'text_trainable': True,
    },
    'train': _train_defaults,
    'sample': {'sampler': 'multistep', 'steps': 50, 'order': 2, 'guidance_scale': None,
               'batch_size': 8, 'views': [], 'phases': [], 'no_repeat': False},
    'evaluate': {'extractor': 'random-projection', 'feature_dim': 64, 'kid_subset_size': 1000,
                 'kid_subsets': 100, 'batch_size': 64, 'workers': 1},
    'segmentation': asdict(SegConfig()),
    'probe': asdict(ProbeConfig()),
}


def flatten(tree: Mapping[str, Any], prefix: str = '') -> Dict[str, Any]:
    flat = {}
    for key, value in tree.items():
        path = f"{prefix}{key}"
        if isinstance(value, Mapping) and value:
            flat.update(flatten(value, path + '.'))
        else:
            flat[path] = value
    return flat


def known_keys(cfg: Mapping[str, Any] = DEFAULTS) -> List[str]:
    return sorted(flatten(cfg))


def _suggest(key, choices):
    match = process.extractOne(key, list(choices))
    return f"; did you mean '{match[0]}'?" if match and match[1] >= 60 else ''


def _coerce(key: str, value: Any, default: Any) -> Any:
    if isinstance(value, str):
        parsed = yaml.safe_load(value) if value.strip() else value
    else:
        parsed = value
    if default is None or parsed is None:
        return parsed
    try:
        if isinstance(default, bool):
            if isinstance(parsed, bool):
                return parsed
            if str(parsed).lower() in ('1', 'true', 'yes', 'on'):
                return True
            if str(parsed).lower() in ('0', 'false', 'no', 'off'):
                return False
            raise ValueError(parsed)
        if isinstance(default, int):
            if isinstance(parsed, float) and not parsed.is_integer():
                raise ValueError(parsed)
            return int(parsed)
        if isinstance(default, float):
            return float(parsed)
        if isinstance(default, (list, tuple)):
            if isinstance(parsed, str):
                return [p.strip() for p in parsed.split(',') if p.strip()]
            return list(parsed) if isinstance(parsed, (list, tuple)) else [parsed]
        return str(parsed)
    except (TypeError, ValueError):
        raise ConfigurationError(f"Config key '{key}' expects {type(default).__name__}, got {value!r}") from None


def set_path(cfg: Dict[str, Any], dotted: str, value: Any) -> None:
    """Assign ``cfg[a][b] = value`` for 'a.b', coercing to the default's type"""
    flat_defaults = flatten(DEFAULTS)
    if dotted not in flat_defaults:
        # environment keys arrive lower-cased (train.t -> train.T)
        folded = {k.lower(): k for k in flat_defaults}
        if dotted.lower() not in folded:
            raise ConfigurationError(f"Unknown config key '{dotted}'{_suggest(dotted, flat_defaults)}")
        dotted = folded[dotted.lower()]
    node = cfg
    parts = dotted.split('.')
    for part in parts[:-1]:
        node = node.setdefault(part, {})
    node[parts[-1]] = _coerce(dotted, value, flat_defaults[dotted])


def parse_overrides(items: Iterable[str]) -> Dict[str, str]:
    overrides = {}
    for item in items:
        if '=' not in item:
            raise ConfigurationError(f"Malformed override '{item}': expected key=value")
        key, value = item.split('=', 1)
        overrides[key.strip()] = value
    return overrides


def env_overrides(environ: Mapping[str, str]) -> Dict[str, str]:
    """ECHOSYNTH__TRAIN__LEARNING_RATE=1e-4 -> {'train.learning_rate': '1e-4'}"""
    return {key[len(ENV_PREFIX):].lower().replace('__', '.'): value
            for key, value in environ.items() if key.startswith(ENV_PREFIX)}


def read_yaml(path: Union[str, Path]) -> Dict[str, Any]:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"Config file {path} not found")
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise ConfigurationError(f"Config file {path} must hold a mapping")
    return flatten(data)


def load_config(path: Optional[Union[str, Path]] = None, overrides: Iterable[str] = (),
                environ: Optional[Mapping[str, str]] = None, preset: Optional[str] = None) -> Dict[str, Any]:
    """Resolve the full configuration tree"""
    layers: List[Tuple[str, Dict[str, Any]]] = []
    if path is not None:
        layers.append((str(path), read_yaml(path)))
    layers.append(('environment', env_overrides(os.environ if environ is None else environ)))
    layers.append(('--set', parse_overrides(overrides)))

    chosen = preset
    for _, layer in layers:
        chosen = layer.get('preset', chosen)
    chosen = chosen or DEFAULTS['preset']
    if chosen not in PRESETS:
        raise ConfigurationError(f"Unknown preset '{chosen}'{_suggest(str(chosen), PRESETS)}")

    cfg = copy.deepcopy(DEFAULTS)
    cfg['preset'] = chosen
    for section, values in PRESETS[chosen].items():
        for key, value in values.items():
            set_path(cfg, f"{section}.{key}", value)
    for source, layer in layers:
        for key, value in layer.items():
            set_path(cfg, key, value)
            logger.debug(f"config {key} <- {value!r} ({source})")
    return cfg


def config_hash(cfg: Mapping[str, Any]) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, default=str).encode('utf-8')).hexdigest()


def save_snapshot(cfg: Mapping[str, Any], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w') as fh:
        yaml.safe_dump(json.loads(json.dumps(cfg, default=str)), fh, sort_keys=True)
    return path


def train_config(cfg: Mapping[str, Any]) -> TrainConfig:
    return TrainConfig(mode=cfg['model']['mode'], **{**cfg['train'], 'seed': cfg['seed']})


def seg_config(cfg: Mapping[str, Any], mix_percent: Optional[int] = None) -> SegConfig:
    values = {**cfg['segmentation'], 'seed': cfg['seed']}
    if mix_percent is not None:
        values['mix_percent'] = mix_percent
    return SegConfig(**values)


def probe_config(cfg: Mapping[str, Any], backbone: Optional[str] = None,
                 mix_percent: Optional[int] = None) -> ProbeConfig:
    values = {**cfg['probe'], 'seed': cfg['seed']}
    if backbone is not None:
        values['backbone'] = backbone
    if mix_percent is not None:
        values['mix_percent'] = mix_percent
    values['asset'] = values.get('asset') or cfg['assets'].get(values['backbone'])
    return ProbeConfig(**values)


def model_specs(cfg: Mapping[str, Any]) -> Tuple[Tuple[int, int], DenoiserSpec, CodecSpec, TextEncoderSpec]:
    m = cfg['model']
    size = (int(m['image_size']), int(m['image_size']))
    levels = tuple(m['attention_levels']) if m['attention_levels'] else None
    denoiser = DenoiserSpec(base_width=m['base_width'], depth=m['depth'], attention_levels=levels,
                            timestep_embedding_dim=m['timestep_embedding_dim'])
    if m['codec'] == 'identity':
        codec = CodecSpec(kind='identity', downsample_factor=1, latent_channels=m['image_channels'],
                          image_channels=m['image_channels'])
    else:
        codec = CodecSpec(kind=m['codec'], downsample_factor=m['downsample_factor'],
                          latent_channels=m['latent_channels'], image_channels=m['image_channels'],
                          hidden_channels=m['codec_hidden_channels'], asset=cfg['assets'].get('vae'))
    text = TextEncoderSpec(tokenizer=m['text_encoder'], max_sequence_length=m['max_sequence_length'],
                           embedding_dim=m['embedding_dim'], trainable=m['text_trainable'],
                           vocab_size=m['vocab_size'], asset=cfg['assets'].get('text_encoder'))
    return size, denoiser, codec, text
