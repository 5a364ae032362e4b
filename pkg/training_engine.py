"""Training objectives and the training loop for the three generation modes."""
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F
from tqdm import tqdm

from dataset_pipeline import DatasetManifest, PatientRecord
from diffusion_schedule import NoiseSchedule, make_schedule, q_sample
from errors import ConfigurationError, InvariantViolation, LexiconError, NumericFault, ParameterError, ShapeError
from generative_models import MODES, ModelBundle, load_checkpoint, rasterize_label_map, save_checkpoint
from prompt_engineering import STYLES, ConceptLexicon, Prompt, build_lexicon, check_lexicon_matches, render_prompt

logger = logging.getLogger(__name__)

LOSS_LOG = 'losses.jsonl'

# desk-scale presets; 'full' keeps the TrainConfig defaults
PRESETS: Dict[str, Dict[str, Dict[str, Any]]] = {
    'full': {
        'train': {},
        'model': {'image_size': 256, 'base_width': 64, 'depth': 4, 'downsample_factor': 8,
                  'latent_channels': 4},
    },
    'desk32': {
        'train': {'T': 200, 'max_iterations': 2000, 'learning_rate': 1e-3, 'batch_size_per_device': 8,
                  'checkpoint_every': 500, 'codec_iterations': 300},
        'model': {'image_size': 32, 'base_width': 16, 'depth': 2, 'downsample_factor': 2,
                  'latent_channels': 2, 'timestep_embedding_dim': 32},
    },
    'desk64': {
        'train': {'T': 200, 'max_iterations': 5000, 'learning_rate': 5e-4, 'batch_size_per_device': 8,
                  'checkpoint_every': 1000, 'codec_iterations': 500},
        'model': {'image_size': 64, 'base_width': 16, 'depth': 3, 'downsample_factor': 4,
                  'latent_channels': 4, 'timestep_embedding_dim': 64},
    },
}


@dataclass
class TrainConfig:
    mode: str = 'unconditional'
    learning_rate: float = 5e-6
    batch_size_per_device: int = 1
    max_iterations: int = 120000
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    seed: int = 0
    checkpoint_every: int = 10000
    prompt_style: str = 'textual'
    token_length: int = 8
    grad_accum_steps: int = 1
    ema_decay: float = 0.0
    log_every: int = 100
    codec_iterations: int = 2000
    codec_learning_rate: float = 1e-3
    device: str = 'cpu'

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"train.mode must be one of {MODES}, got '{self.mode}'")
        if not self.learning_rate > 0:
            raise ParameterError(f"train.learning_rate must be > 0, got {self.learning_rate}")
        if self.max_iterations < 1:
            raise ParameterError(f"train.max_iterations must be >= 1, got {self.max_iterations}")
        if self.batch_size_per_device < 1 or self.grad_accum_steps < 1 or self.checkpoint_every < 1:
            raise ParameterError("batch size, grad_accum_steps and checkpoint_every must be >= 1")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ParameterError(f"train.ema_decay must be in [0, 1), got {self.ema_decay}")
        if self.mode != 'unconditional' and self.prompt_style not in STYLES:
            raise ConfigurationError(f"train.prompt_style must be one of {STYLES}, got '{self.prompt_style}'")

    def schedule(self) -> NoiseSchedule:
        return make_schedule(self.T, self.beta_start, self.beta_end)


@dataclass
class LossRecord:
    iteration: int
    loss: float
    timesteps: List[int]
    mode: str

    def to_json(self) -> str:
        return json.dumps(asdict(self))


@dataclass
class TrainResult:
    bundle: ModelBundle
    losses: List[LossRecord] = field(default_factory=list)
    checkpoints: List[Path] = field(default_factory=list)
    final_step: int = 0
    lexicon: Optional[ConceptLexicon] = None


def _check_loss(loss: torch.Tensor, iteration: Optional[int] = None) -> torch.Tensor:
    if not bool(torch.isfinite(loss)):
        where = f" at iteration {iteration}" if iteration is not None else ''
        raise NumericFault(f"Non-finite loss{where}: {float(loss)}")
    return loss


def ddpm_loss(bundle: ModelBundle, x0: torch.Tensor, t, eps: torch.Tensor, s: NoiseSchedule,
              iteration: Optional[int] = None) -> torch.Tensor:
    """Mean squared error between eps and eps_theta(q_sample(x0, t, eps), t)"""
    if bundle.mode != 'unconditional':
        raise ConfigurationError(f"ddpm_loss needs an unconditional bundle, got {bundle.mode}")
    x_t = q_sample(x0, t, eps, s)
    return _check_loss(F.mse_loss(bundle.denoise(x_t, t), eps), iteration)


def _prompt_texts(prompts: Union[str, Prompt, Sequence[Union[str, Prompt]], None]) -> List[str]:
    if prompts is None:
        return []
    if isinstance(prompts, (str, Prompt)):
        prompts = [prompts]
    return [p.text if isinstance(p, Prompt) else p for p in prompts]


def ldm_loss(bundle: ModelBundle, x: torch.Tensor, prompts, t, eps: torch.Tensor, s: NoiseSchedule,
             label_map: Optional[torch.Tensor] = None, iteration: Optional[int] = None) -> torch.Tensor:
    """Latent objective: z_t = q_sample(E(x), t, eps), eps_theta conditioned on the prompt text"""
    if bundle.mode not in ('text', 'text_seg'):
        raise ConfigurationError(f"ldm_loss needs a text or text_seg bundle, got {bundle.mode}")
    texts = _prompt_texts(prompts)
    if len(texts) != x.shape[0]:
        raise ConfigurationError(f"ldm_loss needs one prompt per image: {len(texts)} prompts, {x.shape[0]} images")
    if bundle.mode == 'text_seg' and label_map is None:
        raise ConfigurationError("text_seg ldm_loss requires the record label maps")
    with torch.no_grad():
        z0 = bundle.encode_image(x)
    z_t = q_sample(z0, t, eps, s)
    context = bundle.encode_text(texts).to(z_t.dtype)
    if bundle.mode == 'text_seg':
        pred = bundle.control_denoise(z_t, t, context, label_map)
    else:
        pred = bundle.denoise(z_t, t, context)
    return _check_loss(F.mse_loss(pred, eps), iteration)


def train_codec(codec: torch.nn.Module, images: torch.Tensor, iterations: int, learning_rate: float = 1e-3,
                batch_size: int = 8, seed: int = 0) -> List[float]:
    """Fit the from-scratch autoencoder on model-space images, then freeze it"""
    for p in codec.parameters():
        p.requires_grad_(True)
    optimizer = torch.optim.Adam(codec.parameters(), lr=learning_rate)
    generator = torch.Generator().manual_seed(int(seed))
    losses = []
    for _ in tqdm(range(iterations), desc='codec', leave=False):
        idx = torch.randint(0, images.shape[0], (min(batch_size, images.shape[0]),), generator=generator)
        batch = images[idx]
        loss = F.mse_loss(codec.decode(codec.encode(batch)), batch)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        losses.append(float(loss))
    for p in codec.parameters():
        p.requires_grad_(False)
    if hasattr(codec, 'fitted'):
        codec.fitted.fill_(True)
    if losses:
        logger.info(f"Codec fitted: reconstruction loss {losses[0]:.4f} -> {np.mean(losses[-10:]):.4f}")
    return losses


class _TrainingData:
    """Stacked tensors for the records; prompts rendered once per record"""

    def __init__(self, records: Sequence[PatientRecord], bundle: ModelBundle, style: str,
                 lexicon: Optional[ConceptLexicon], device: torch.device):
        if not records:
            raise ConfigurationError("Training set is empty")
        expected = bundle.image_size
        bad = [r.key for r in records if tuple(r.image.shape) != expected]
        if bad:
            raise ShapeError(f"{len(bad)} records are not {expected}, e.g. {bad[0]}")
        images = np.stack([r.image for r in records])[:, None].astype(np.float32)
        self.images = ModelBundle.to_model_space(torch.from_numpy(images)).to(device)
        self.prompts: List[str] = []
        self.label_maps = None
        if bundle.mode != 'unconditional':
            self.prompts = [render_prompt(r.view_phase, style, lexicon).text for r in records]
        if bundle.mode == 'text_seg':
            missing = [r.key for r in records if r.label_map is None]
            if missing:
                raise ConfigurationError(f"text_seg training needs label maps; {len(missing)} records lack one")
            labels = np.stack([r.label_map for r in records])
            self.label_maps = rasterize_label_map(labels, bundle.latent_shape[1:]).to(device)

    def __len__(self):
        return self.images.shape[0]


def _resolve_records(data: Union[DatasetManifest, Sequence[PatientRecord]], bundle: ModelBundle
                     ) -> List[PatientRecord]:
    if isinstance(data, DatasetManifest):
        return data.load_records(size=bundle.image_size)
    return list(data)


def _ema_update(ema: Dict[str, torch.Tensor], bundle: ModelBundle, decay: float) -> None:
    with torch.no_grad():
        for name, tensor in _trainable_state(bundle).items():
            ema[name].mul_(decay).add_(tensor, alpha=1.0 - decay)


def _trainable_state(bundle: ModelBundle) -> Dict[str, torch.Tensor]:
    return {f"{prefix}.{k}": v for prefix, module in bundle.trainable_modules().items()
            for k, v in module.state_dict().items() if v.is_floating_point()}


def load_ema_weights(bundle: ModelBundle, directory: Union[str, Path]) -> bool:
    """Swap in EMA weights saved next to a checkpoint; returns False when there are none"""
    path = Path(directory) / 'ema.pt'
    if not path.is_file():
        return False
    ema = torch.load(path, map_location='cpu')
    with torch.no_grad():
        for prefix, module in bundle.trainable_modules().items():
            state = module.state_dict()
            for k in state:
                if f"{prefix}.{k}" in ema:
                    state[k].copy_(ema[f"{prefix}.{k}"])
    logger.info(f"Loaded EMA weights from {path}")
    return True


def _resume_lexicon(config: TrainConfig, resume_from: Union[str, Path], manifest: Dict[str, Any],
                    lexicon: Optional[ConceptLexicon]) -> Optional[ConceptLexicon]:
    """The lexicon a resumed run must keep using: the one stored with the checkpoint"""
    if config.mode == 'unconditional':
        return None
    recorded_style = manifest.get('prompt_style')
    if recorded_style is not None and recorded_style != config.prompt_style:
        raise ConfigurationError(f"checkpoint was trained with prompt_style '{recorded_style}', "
                                 f"config asks for '{config.prompt_style}'")
    if config.prompt_style != 'abstract':
        return None
    path = Path(resume_from) / 'lexicon.json'
    if lexicon is None:
        if not path.is_file():
            raise LexiconError(f"abstract checkpoint {resume_from} has no lexicon.json")
        lexicon = ConceptLexicon.load(path)
    check_lexicon_matches(lexicon, manifest.get('lexicon_hash'))
    return lexicon


def _open_loss_log(path: Path, resume_step: Optional[int]):
    """Fresh runs start an empty log; resumed runs drop records past the checkpoint step"""
    if resume_step is None or not path.is_file():
        return open(path, 'w')
    kept = [line for line in path.read_text().splitlines()
            if line.strip() and json.loads(line)['iteration'] <= resume_step]
    handle = open(path, 'w')
    handle.writelines(line + '\n' for line in kept)
    return handle


def train(config: TrainConfig, data: Union[DatasetManifest, Sequence[PatientRecord]],
          bundle: Optional[ModelBundle] = None, out_dir: Union[str, Path] = 'runs/train',
          resume_from: Optional[Union[str, Path]] = None, lexicon: Optional[ConceptLexicon] = None,
          show_progress: bool = False) -> TrainResult:
    """Run the mode's objective for ``config.max_iterations`` optimizer steps"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    device = torch.device(config.device)
    schedule = config.schedule()
    start = 0
    resume_manifest: Dict[str, Any] = {}
    if resume_from is not None:
        bundle, resume_manifest = load_checkpoint(resume_from)
        start = int(resume_manifest['step'])
        logger.info(f"Resuming from {resume_from} at step {start}")
    if bundle is None:
        raise ConfigurationError("train needs a bundle or a checkpoint to resume from")
    if bundle.mode != config.mode:
        raise ConfigurationError(f"config mode '{config.mode}' does not match bundle mode '{bundle.mode}'")
    bundle.to(device)

    if resume_from is not None:
        lexicon = _resume_lexicon(config, resume_from, resume_manifest, lexicon)
    if config.mode != 'unconditional' and config.prompt_style == 'abstract' and lexicon is None:
        lexicon = build_lexicon(config.seed, config.token_length)
    if lexicon is not None:
        lexicon.save(out_dir / 'lexicon.json')

    records = _resolve_records(data, bundle)
    batch = _TrainingData(records, bundle, config.prompt_style, lexicon, device)
    data_hash = data.content_hash() if isinstance(data, DatasetManifest) else None

    codec = bundle.codec
    if getattr(codec, 'fitted', None) is not None and not bool(codec.fitted) and config.mode != 'unconditional':
        train_codec(codec, batch.images, config.codec_iterations, config.codec_learning_rate,
                    batch_size=config.batch_size_per_device, seed=config.seed)
    bundle.apply_freezing()
    frozen_checksum = bundle.frozen_checksum()

    optimizer = torch.optim.Adam(bundle.trainable_parameters(), lr=config.learning_rate)
    generator = torch.Generator().manual_seed(int(config.seed))
    ema = {k: v.detach().clone() for k, v in _trainable_state(bundle).items()} if config.ema_decay else None
    if resume_from is not None:
        resume_dir = Path(resume_from)
        if (resume_dir / 'optimizer.pt').is_file():
            optimizer.load_state_dict(torch.load(resume_dir / 'optimizer.pt', map_location=device))
        if (resume_dir / 'rng.pt').is_file():
            generator.set_state(torch.load(resume_dir / 'rng.pt'))
        if ema is not None and (resume_dir / 'ema.pt').is_file():
            ema = torch.load(resume_dir / 'ema.pt', map_location=device)

    result = TrainResult(bundle=bundle, final_step=start, lexicon=lexicon)
    last_good: Optional[Path] = Path(resume_from) if resume_from is not None else None
    extra = {
        'train_config': asdict(config),
        'lexicon_hash': lexicon.content_hash() if lexicon is not None else None,
        'prompt_style': config.prompt_style if config.mode != 'unconditional' else None,
        'manifest_hash': data_hash or resume_manifest.get('manifest_hash'),
        'frozen_checksum': frozen_checksum,
        'cells': sorted({str(r.view_phase) for r in records}),
    }

    def verify_frozen(iteration: int) -> None:
        current = bundle.frozen_checksum()
        if current != frozen_checksum:
            raise InvariantViolation(f"Frozen parameters changed by iteration {iteration} "
                                     f"({frozen_checksum[:12]} -> {current[:12]})")

    def checkpoint(iteration: int) -> Path:
        verify_frozen(iteration)
        path = save_checkpoint(bundle, out_dir / 'checkpoints' / f"step_{iteration:07d}", iteration,
                               schedule.to_metadata(), extra=extra, optimizer=optimizer,
                               generator_state=generator.get_state())
        if ema is not None:
            torch.save(ema, path / 'ema.pt')
        if lexicon is not None:
            lexicon.save(path / 'lexicon.json')
        result.checkpoints.append(path)
        logger.info(f"Checkpoint written: {path}")
        return path

    bundle.train()
    loss_log = _open_loss_log(out_dir / LOSS_LOG, start if resume_from is not None else None)
    try:
        progress = tqdm(range(start + 1, config.max_iterations + 1), desc=config.mode, disable=not show_progress)
        for iteration in progress:
            optimizer.zero_grad()
            total = 0.0
            drawn: List[int] = []
            for _ in range(config.grad_accum_steps):
                idx = torch.randint(0, len(batch), (config.batch_size_per_device,), generator=generator)
                t = torch.randint(1, schedule.T + 1, (config.batch_size_per_device,), generator=generator)
                x = batch.images[idx.to(device)]
                shape = (x.shape[0], *bundle.latent_shape)
                eps = torch.randn(shape, generator=generator).to(device=device, dtype=x.dtype)
                t = t.to(device)
                try:
                    if config.mode == 'unconditional':
                        loss = ddpm_loss(bundle, x, t, eps, schedule, iteration=iteration)
                    else:
                        labels = batch.label_maps[idx.to(device)] if batch.label_maps is not None else None
                        loss = ldm_loss(bundle, x, [batch.prompts[i] for i in idx.tolist()], t, eps, schedule,
                                        label_map=labels, iteration=iteration)
                except NumericFault as e:
                    raise NumericFault(f"{e}; last good checkpoint: {last_good}") from e
                (loss / config.grad_accum_steps).backward()
                total += float(loss) / config.grad_accum_steps
                drawn.extend(int(v) for v in t.tolist())
            optimizer.step()
            if ema is not None:
                _ema_update(ema, bundle, config.ema_decay)

            record = LossRecord(iteration=iteration, loss=total, timesteps=drawn, mode=config.mode)
            result.losses.append(record)
            loss_log.write(record.to_json() + '\n')
            if iteration % config.log_every == 0:
                recent = [r.loss for r in result.losses[-config.log_every:]]
                logger.info(f"iter {iteration}/{config.max_iterations} loss {np.mean(recent):.5f}")
            if iteration % config.checkpoint_every == 0 or iteration == config.max_iterations:
                last_good = checkpoint(iteration)
            result.final_step = iteration
    finally:
        loss_log.close()
        bundle.eval()

    verify_frozen(result.final_step)
    return result
