"""Denoiser, latent codec, text encoder and control branch, composed into a ModelBundle.

Three generation modes share one UNet denoiser:

- ``unconditional``: pixel-space DDPM, identity codec, no text.
- ``text``: latent diffusion with cross-attention on a text context.
- ``text_seg``: the text model frozen, plus a trainable copy of its encoder
  path that reads a rasterized label map and feeds the frozen decoder through
  zero-initialised 1x1 convolutions.

Pretrained VAE / CLIP weights are optional assets. The from-scratch
``ToyAutoencoder`` and ``HashTextEncoder`` let everything run without them.
"""
import copy
import hashlib
import json
import logging
import math
import re
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from errors import ConfigurationError, DataIntegrityError, NumericFault, ShapeError

logger = logging.getLogger(__name__)

MODES = ('unconditional', 'text', 'text_seg')
NUM_CLASSES = 4
CHECKPOINT_VERSION = 1
SUBMODULES = ('denoiser', 'codec', 'text_encoder', 'control')


@dataclass
class DenoiserSpec:
    in_channels: int = 1
    base_width: int = 32
    depth: int = 3
    attention_levels: Optional[Tuple[int, ...]] = None
    timestep_embedding_dim: int = 128
    context_dim: int = 0

    def widths(self) -> List[int]:
        return [self.base_width * 2 ** i for i in range(self.depth)]

    def resolved_attention_levels(self) -> Tuple[int, ...]:
        """Cross-attention levels; defaults to the two lowest-resolution levels"""
        if self.context_dim == 0:
            if self.attention_levels:
                raise ConfigurationError("attention_levels given but context_dim is 0")
            return ()
        if self.attention_levels is None:
            return tuple(range(max(0, self.depth - 2), self.depth))
        bad = [lvl for lvl in self.attention_levels if not 0 <= lvl < self.depth]
        if bad:
            raise ConfigurationError(f"attention_levels {bad} outside [0, {self.depth})")
        return tuple(sorted(set(self.attention_levels)))


@dataclass
class CodecSpec:
    kind: str = 'identity'  # identity | toy | pretrained
    downsample_factor: int = 1
    latent_channels: int = 1
    image_channels: int = 1
    hidden_channels: int = 32
    asset: Optional[str] = None


@dataclass
class TextEncoderSpec:
    tokenizer: str = 'hash-bow'  # hash-bow | clip
    max_sequence_length: int = 16
    embedding_dim: int = 64
    trainable: bool = True
    vocab_size: int = 4096
    asset: Optional[str] = None


@dataclass
class ControlBranchSpec:
    copy_of: str = 'denoiser.encoder'
    zero_conv_count: int = 0
    condition_channels: int = NUM_CLASSES


def _spec_from_dict(cls, data: Optional[Dict[str, Any]]):
    if data is None:
        return None
    known = {k: v for k, v in data.items() if k in cls.__dataclass_fields__}
    if 'attention_levels' in known and known['attention_levels'] is not None:
        known['attention_levels'] = tuple(known['attention_levels'])
    return cls(**known)


def _groups(channels):
    return math.gcd(8, channels)


class SinusoidalEmbedding(nn.Module):
    def __init__(self, dim):
        super().__init__()
        self.dim = dim

    def forward(self, t):
        half = self.dim // 2
        freqs = torch.exp(-math.log(10000) * torch.arange(half, device=t.device, dtype=t.dtype) / half)
        args = t[:, None] * freqs[None, :]
        emb = torch.cat([args.sin(), args.cos()], dim=-1)
        if self.dim % 2:
            emb = F.pad(emb, (0, 1))
        return emb


class ResBlock(nn.Module):
    def __init__(self, in_ch, out_ch, time_dim):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.time_mlp = nn.Sequential(nn.SiLU(), nn.Linear(time_dim, out_ch))
        self.norm2 = nn.GroupNorm(_groups(out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, t_emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_mlp(t_emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class CrossAttention(nn.Module):
    """Image features attend to a context sequence (single head)"""

    def __init__(self, channels, context_dim):
        super().__init__()
        self.norm = nn.GroupNorm(_groups(channels), channels)
        self.to_q = nn.Linear(channels, channels, bias=False)
        self.to_k = nn.Linear(context_dim, channels, bias=False)
        self.to_v = nn.Linear(context_dim, channels, bias=False)
        self.proj = nn.Linear(channels, channels)

    def forward(self, x, context):
        b, c, h, w = x.shape
        q = self.to_q(self.norm(x).flatten(2).transpose(1, 2))
        k, v = self.to_k(context), self.to_v(context)
        attn = torch.softmax(torch.einsum('bqc,bkc->bqk', q, k) * c ** -0.5, dim=-1)
        out = self.proj(torch.einsum('bqk,bkc->bqc', attn, v))
        return x + out.transpose(1, 2).reshape(b, c, h, w)


class EncoderLevel(nn.Module):
    def __init__(self, res, attn=None, down=None):
        super().__init__()
        self.res = res
        self.attn = attn
        self.down = down


class EncoderPath(nn.Module):
    """Time embedding, input conv, downsampling levels and the middle block"""

    def __init__(self, spec: DenoiserSpec):
        super().__init__()
        widths = spec.widths()
        temb = spec.timestep_embedding_dim
        attention = spec.resolved_attention_levels()
        self.time_embed = nn.Sequential(
            SinusoidalEmbedding(temb), nn.Linear(temb, temb), nn.SiLU(), nn.Linear(temb, temb))
        self.init_conv = nn.Conv2d(spec.in_channels, widths[0], 3, padding=1)
        self.levels = nn.ModuleList()
        prev = widths[0]
        for i, w in enumerate(widths):
            self.levels.append(EncoderLevel(
                ResBlock(prev, w, temb),
                CrossAttention(w, spec.context_dim) if i in attention else None,
                nn.Conv2d(w, w, 3, stride=2, padding=1) if i < spec.depth - 1 else None))
            prev = w
        self.mid_res = ResBlock(prev, prev, temb)
        self.mid_attn = CrossAttention(prev, spec.context_dim) if spec.context_dim > 0 else None

    def forward(self, x, t_emb, context=None, hint=None):
        h = self.init_conv(x)
        if hint is not None:
            h = h + hint
        skips = []
        for level in self.levels:
            h = level.res(h, t_emb)
            if level.attn is not None:
                h = level.attn(h, context)
            skips.append(h)
            if level.down is not None:
                h = level.down(h)
        h = self.mid_res(h, t_emb)
        if self.mid_attn is not None:
            h = self.mid_attn(h, context)
        return skips, h


class DecoderLevel(nn.Module):
    def __init__(self, res, attn=None, up=None):
        super().__init__()
        self.res = res
        self.attn = attn
        self.up = up


class DenoisingUNet(nn.Module):
    """eps_theta(z_t, t, context); output shape equals input shape"""

    def __init__(self, spec: DenoiserSpec):
        super().__init__()
        self.spec = spec
        widths = spec.widths()
        temb = spec.timestep_embedding_dim
        attention = spec.resolved_attention_levels()
        self.encoder = EncoderPath(spec)
        self.up_levels = nn.ModuleList()
        prev = widths[-1]
        for i in reversed(range(spec.depth)):
            w = widths[i]
            up = nn.Sequential(nn.Upsample(scale_factor=2, mode='nearest'),
                               nn.Conv2d(w, w, 3, padding=1)) if i > 0 else None
            self.up_levels.append(DecoderLevel(
                ResBlock(prev + w, w, temb),
                CrossAttention(w, spec.context_dim) if i in attention else None,
                up))
            prev = w
        self.out = nn.Sequential(nn.GroupNorm(_groups(widths[0]), widths[0]), nn.SiLU(),
                                 nn.Conv2d(widths[0], spec.in_channels, 3, padding=1))

    def embed_time(self, t: torch.Tensor) -> torch.Tensor:
        return self.encoder.time_embed(t)

    def forward(self, x, t, context=None, control=None):
        t_emb = self.embed_time(t)
        skips, h = self.encoder(x, t_emb, context)
        if control is not None:
            down_residuals, mid_residual = control
            skips = [s + r for s, r in zip(skips, down_residuals)]
            h = h + mid_residual
        for level, skip in zip(self.up_levels, reversed(skips)):
            h = level.res(torch.cat([h, skip], dim=1), t_emb)
            if level.attn is not None:
                h = level.attn(h, context)
            if level.up is not None:
                h = level.up(h)
        return self.out(h)


def zero_conv(in_ch: int, out_ch: Optional[int] = None, kernel_size: int = 1) -> nn.Conv2d:
    conv = nn.Conv2d(in_ch, out_ch or in_ch, kernel_size, padding=kernel_size // 2)
    nn.init.zeros_(conv.weight)
    nn.init.zeros_(conv.bias)
    return conv


class ControlBranch(nn.Module):
    """Trainable copy of the denoiser encoder path plus zero convolutions"""

    def __init__(self, base: DenoisingUNet, condition_channels: int = NUM_CLASSES):
        super().__init__()
        widths = base.spec.widths()
        self.encoder = copy.deepcopy(base.encoder)
        for p in self.encoder.parameters():
            p.requires_grad_(True)
        stem_width = max(4, widths[0] // 2)
        self.cond_stem = nn.Sequential(
            nn.Conv2d(condition_channels, stem_width, 3, padding=1), nn.SiLU(),
            zero_conv(stem_width, widths[0], kernel_size=3))
        self.zero_convs = nn.ModuleList([zero_conv(w) for w in widths])
        self.mid_zero_conv = zero_conv(widths[-1])
        self.spec = ControlBranchSpec(zero_conv_count=len(self.zero_convolutions()),
                                      condition_channels=condition_channels)

    def zero_convolutions(self) -> List[nn.Conv2d]:
        return [self.cond_stem[-1], *self.zero_convs, self.mid_zero_conv]

    def forward(self, x, t, context, label_map):
        t_emb = self.encoder.time_embed(t)
        skips, h = self.encoder(x, t_emb, context, hint=self.cond_stem(label_map))
        return [zc(s) for zc, s in zip(self.zero_convs, skips)], self.mid_zero_conv(h)


class IdentityCodec(nn.Module):
    def __init__(self, spec: Optional[CodecSpec] = None):
        super().__init__()
        self.spec = spec or CodecSpec()

    def encode(self, x):
        return x

    def decode(self, z):
        return z


class ToyAutoencoder(nn.Module):
    """Small from-scratch conv autoencoder standing in for a pretrained VAE"""

    def __init__(self, spec: CodecSpec):
        super().__init__()
        f = spec.downsample_factor
        if f < 2 or f & (f - 1):
            raise ConfigurationError(f"ToyAutoencoder downsample_factor must be a power of 2 >= 2, got {f}")
        self.spec = spec
        hidden = spec.hidden_channels
        stages = int(math.log2(f))
        enc: List[nn.Module] = [nn.Conv2d(spec.image_channels, hidden, 3, padding=1), nn.SiLU()]
        for _ in range(stages):
            enc += [nn.Conv2d(hidden, hidden, 4, stride=2, padding=1), nn.SiLU()]
        enc.append(nn.Conv2d(hidden, spec.latent_channels, 1))
        dec: List[nn.Module] = [nn.Conv2d(spec.latent_channels, hidden, 3, padding=1), nn.SiLU()]
        for _ in range(stages):
            dec += [nn.ConvTranspose2d(hidden, hidden, 4, stride=2, padding=1), nn.SiLU()]
        dec.append(nn.Conv2d(hidden, spec.image_channels, 3, padding=1))
        self.encoder = nn.Sequential(*enc)
        self.decoder = nn.Sequential(*dec)
        self.register_buffer('fitted', torch.zeros((), dtype=torch.bool))

    def encode(self, x):
        return self.encoder(x)

    def decode(self, z):
        return self.decoder(z)


class PretrainedVAECodec(nn.Module):
    """Adapter over a locally stored diffusers AutoencoderKL"""

    def __init__(self, spec: CodecSpec):
        super().__init__()
        if not spec.asset:
            raise ConfigurationError("pretrained codec needs an asset path")
        from diffusers import AutoencoderKL
        self.spec = spec
        self.vae = AutoencoderKL.from_pretrained(spec.asset, local_files_only=True)
        self.scaling = float(getattr(self.vae.config, 'scaling_factor', 0.18215))

    def encode(self, x):
        if x.shape[1] == 1:
            x = x.repeat(1, 3, 1, 1)
        return self.vae.encode(x).latent_dist.mean * self.scaling

    def decode(self, z):
        images = self.vae.decode(z / self.scaling).sample
        return images.mean(dim=1, keepdim=True) if self.spec.image_channels == 1 else images


def build_codec(spec: CodecSpec) -> nn.Module:
    if spec.kind == 'identity':
        if spec.downsample_factor != 1 or spec.latent_channels != spec.image_channels:
            raise ConfigurationError("identity codec needs downsample_factor=1 and latent_channels=image_channels")
        return IdentityCodec(spec)
    if spec.kind == 'toy':
        return ToyAutoencoder(spec)
    if spec.kind == 'pretrained':
        return PretrainedVAECodec(spec)
    raise ConfigurationError(f"Unknown codec kind '{spec.kind}'")


_WORD = re.compile(r'[a-z0-9]+(?:-[a-z0-9]+)*')


class HashTextEncoder(nn.Module):
    """Bag-of-tokens encoder: crc32 word ids, learned token + position embeddings"""

    def __init__(self, spec: TextEncoderSpec):
        super().__init__()
        self.spec = spec
        self.token_embedding = nn.Embedding(spec.vocab_size + 1, spec.embedding_dim)
        self.position_embedding = nn.Parameter(torch.randn(spec.max_sequence_length, spec.embedding_dim) * 0.02)
        self.proj = nn.Linear(spec.embedding_dim, spec.embedding_dim)

    def tokenize(self, prompt: str) -> List[int]:
        ids = [zlib.crc32(word.encode('utf-8')) % self.spec.vocab_size + 1
               for word in _WORD.findall(prompt.lower())]
        limit = self.spec.max_sequence_length
        if len(ids) > limit:
            logger.warning(f"Prompt truncated from {len(ids)} to {limit} tokens: {prompt[:60]!r}")
            ids = ids[:limit]
        return ids + [0] * (limit - len(ids))

    def forward(self, prompts: Sequence[str]) -> torch.Tensor:
        device = self.position_embedding.device
        ids = torch.tensor([self.tokenize(p) for p in prompts], dtype=torch.long, device=device)
        return self.proj(self.token_embedding(ids) + self.position_embedding)


class ClipTextEncoder(nn.Module):
    """Adapter over a locally stored CLIP text model"""

    def __init__(self, spec: TextEncoderSpec):
        super().__init__()
        if not spec.asset:
            raise ConfigurationError("clip text encoder needs an asset path")
        from transformers import CLIPTextModel, CLIPTokenizer
        self.spec = spec
        self.tokenizer = CLIPTokenizer.from_pretrained(spec.asset, local_files_only=True)
        self.model = CLIPTextModel.from_pretrained(spec.asset, local_files_only=True)

    def forward(self, prompts: Sequence[str]) -> torch.Tensor:
        tokens = self.tokenizer(list(prompts), padding='max_length', truncation=True,
                                max_length=self.spec.max_sequence_length, return_tensors='pt')
        return self.model(tokens.input_ids.to(self.model.device)).last_hidden_state


def build_text_encoder(spec: TextEncoderSpec) -> nn.Module:
    if spec.tokenizer == 'hash-bow':
        return HashTextEncoder(spec)
    if spec.tokenizer == 'clip':
        return ClipTextEncoder(spec)
    raise ConfigurationError(f"Unknown text encoder '{spec.tokenizer}'")


def rasterize_label_map(label_map: Union[np.ndarray, torch.Tensor], size: Tuple[int, int],
                        num_classes: int = NUM_CLASSES) -> torch.Tensor:
    """One-hot (B, C, h, w) float map, nearest-neighbour resized to ``size``"""
    labels = torch.as_tensor(np.asarray(label_map) if not isinstance(label_map, torch.Tensor) else label_map)
    if labels.ndim == 2:
        labels = labels[None]
    labels = labels.long()
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= num_classes):
        raise DataIntegrityError(f"label values must lie in [0, {num_classes - 1}]")
    one_hot = F.one_hot(labels, num_classes).permute(0, 3, 1, 2).float()
    if tuple(one_hot.shape[-2:]) != tuple(size):
        one_hot = F.interpolate(one_hot, size=tuple(size), mode='nearest')
    return one_hot


@dataclass
class Conditioning:
    context: Optional[torch.Tensor] = None
    label_map: Optional[torch.Tensor] = None
    prompts: List[str] = field(default_factory=list)


def parameter_checksum(*modules: Optional[nn.Module]) -> str:
    digest = hashlib.sha256()
    for module in modules:
        if module is None:
            continue
        for name, tensor in sorted(module.state_dict().items()):
            digest.update(name.encode('utf-8'))
            digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def _as_timestep_tensor(t, batch: int, like: torch.Tensor) -> torch.Tensor:
    if isinstance(t, torch.Tensor):
        t = t.to(device=like.device, dtype=like.dtype).reshape(-1)
        return t.expand(batch) if t.numel() == 1 else t
    return torch.full((batch,), float(t), device=like.device, dtype=like.dtype)


class ModelBundle(nn.Module):
    """Mode-tagged composition of denoiser, codec, text encoder and control branch"""

    def __init__(self, mode: str, denoiser: DenoisingUNet, codec: nn.Module,
                 text_encoder: Optional[nn.Module] = None, control: Optional[ControlBranch] = None,
                 image_size: Tuple[int, int] = (64, 64), text_encoder_trainable: bool = True):
        super().__init__()
        if mode not in MODES:
            raise ConfigurationError(f"Unknown mode '{mode}', expected one of {MODES}")
        self.mode = mode
        self.image_size = (int(image_size[0]), int(image_size[1]))
        self.text_encoder_trainable = bool(text_encoder_trainable)
        self._check_invariants(denoiser, codec, text_encoder, control)
        self.denoiser = denoiser
        self.codec = codec
        self.text_encoder = text_encoder
        self.control = control
        self.apply_freezing()

    def _check_invariants(self, denoiser, codec, text_encoder, control):
        mode = self.mode
        if mode == 'unconditional':
            if not isinstance(codec, IdentityCodec):
                raise ConfigurationError("unconditional mode requires the identity codec")
            if text_encoder is not None or control is not None:
                raise ConfigurationError("unconditional mode takes no text encoder or control branch")
            if denoiser.spec.context_dim != 0:
                raise ConfigurationError("unconditional denoiser must have context_dim=0")
        else:
            if text_encoder is None:
                raise ConfigurationError(f"{mode} mode requires a text encoder")
            if denoiser.spec.context_dim != text_encoder.spec.embedding_dim:
                raise ConfigurationError(
                    f"denoiser context_dim {denoiser.spec.context_dim} != text embedding_dim "
                    f"{text_encoder.spec.embedding_dim}")
        if mode == 'text' and control is not None:
            raise ConfigurationError("text mode takes no control branch; use init_control_from_base")
        if mode == 'text_seg':
            if control is None:
                raise ConfigurationError("text_seg mode requires a control branch")
            base = {k: v.shape for k, v in denoiser.encoder.state_dict().items()}
            copy_ = {k: v.shape for k, v in control.encoder.state_dict().items()}
            if base != copy_:
                raise ConfigurationError("control branch does not mirror the denoiser encoder path")
        if codec.spec.latent_channels != denoiser.spec.in_channels:
            raise ConfigurationError(
                f"codec latent_channels {codec.spec.latent_channels} != denoiser in_channels "
                f"{denoiser.spec.in_channels}")
        f = codec.spec.downsample_factor
        h, w = self.image_size
        if h % f or w % f:
            raise ConfigurationError(f"image size {self.image_size} not divisible by codec factor {f}")
        stride = 2 ** (denoiser.spec.depth - 1)
        if (h // f) % stride or (w // f) % stride:
            raise ConfigurationError(f"latent size {(h // f, w // f)} not divisible by UNet stride {stride}")

    def frozen_modules(self) -> Dict[str, nn.Module]:
        if self.mode == 'unconditional':
            return {}
        frozen = {'codec': self.codec}
        if self.mode == 'text_seg':
            frozen.update(denoiser=self.denoiser, text_encoder=self.text_encoder)
        elif not self.text_encoder_trainable:
            frozen['text_encoder'] = self.text_encoder
        return frozen

    def trainable_modules(self) -> Dict[str, nn.Module]:
        if self.mode == 'unconditional':
            return {'denoiser': self.denoiser}
        if self.mode == 'text_seg':
            return {'control': self.control}
        trainable = {'denoiser': self.denoiser}
        if self.text_encoder_trainable:
            trainable['text_encoder'] = self.text_encoder
        return trainable

    def apply_freezing(self) -> None:
        for module in self.frozen_modules().values():
            for p in module.parameters():
                p.requires_grad_(False)
        for module in self.trainable_modules().values():
            for p in module.parameters():
                p.requires_grad_(True)

    def trainable_parameters(self) -> List[nn.Parameter]:
        return [p for m in self.trainable_modules().values() for p in m.parameters()]

    def frozen_checksum(self) -> str:
        frozen = self.frozen_modules()
        return parameter_checksum(*(frozen[k] for k in sorted(frozen)))

    @property
    def latent_shape(self) -> Tuple[int, int, int]:
        f = self.codec.spec.downsample_factor
        return (self.codec.spec.latent_channels, self.image_size[0] // f, self.image_size[1] // f)

    @property
    def device(self) -> torch.device:
        return next(self.denoiser.parameters()).device

    def encode_image(self, x: torch.Tensor) -> torch.Tensor:
        expected = (self.codec.spec.image_channels, *self.image_size)
        if x.ndim != 4 or tuple(x.shape[1:]) != expected:
            raise ShapeError(f"encode_image expects (B, {expected}), got {tuple(x.shape)}")
        return self.codec.encode(x)

    def decode_latent(self, z: torch.Tensor) -> torch.Tensor:
        if z.ndim != 4 or tuple(z.shape[1:]) != self.latent_shape:
            raise ShapeError(f"decode_latent expects (B, {self.latent_shape}), got {tuple(z.shape)}")
        return self.codec.decode(z)

    def encode_text(self, prompts: Union[str, Sequence[str]]) -> torch.Tensor:
        if self.text_encoder is None:
            raise ConfigurationError(f"{self.mode} bundle has no text encoder")
        if isinstance(prompts, str):
            prompts = [prompts]
        return self.text_encoder(list(prompts))

    def _check_latent(self, z_t: torch.Tensor) -> None:
        if z_t.ndim != 4 or tuple(z_t.shape[1:]) != self.latent_shape:
            raise ShapeError(f"latent must be (B, {self.latent_shape}), got {tuple(z_t.shape)}")

    def _check_finite(self, out: torch.Tensor, t) -> torch.Tensor:
        if not bool(torch.isfinite(out).all()):
            step = t.tolist() if isinstance(t, torch.Tensor) else t
            raise NumericFault(f"Non-finite denoiser output at timestep {step}")
        return out

    def denoise(self, z_t: torch.Tensor, t, context: Optional[torch.Tensor] = None) -> torch.Tensor:
        self._check_latent(z_t)
        if self.mode == 'unconditional' and context is not None:
            raise ConfigurationError("unconditional bundle does not accept a context")
        if self.mode != 'unconditional' and context is None:
            raise ConfigurationError(f"{self.mode} bundle requires a text context")
        t_vec = _as_timestep_tensor(t, z_t.shape[0], z_t)
        return self._check_finite(self.denoiser(z_t, t_vec, context), t)

    def control_denoise(self, z_t: torch.Tensor, t, context: torch.Tensor,
                        label_map: Optional[torch.Tensor]) -> torch.Tensor:
        if self.mode != 'text_seg':
            raise ConfigurationError(f"control_denoise needs a text_seg bundle, got {self.mode}")
        if label_map is None:
            raise ConfigurationError("control_denoise requires a label map")
        if context is None:
            raise ConfigurationError("control_denoise requires a text context")
        self._check_latent(z_t)
        expected = (z_t.shape[0], self.control.spec.condition_channels, *z_t.shape[-2:])
        if tuple(label_map.shape) != expected:
            raise ShapeError(f"label map must be {expected}, got {tuple(label_map.shape)}")
        t_vec = _as_timestep_tensor(t, z_t.shape[0], z_t)
        residuals = self.control(z_t, t_vec, context, label_map.to(z_t.dtype))
        return self._check_finite(self.denoiser(z_t, t_vec, context, control=residuals), t)

    def check_conditioning(self, cond: Optional[Conditioning]) -> None:
        has_context = cond is not None and cond.context is not None
        has_map = cond is not None and cond.label_map is not None
        if self.mode == 'unconditional' and (has_context or has_map):
            raise ConfigurationError("unconditional bundle sampled with conditioning")
        if self.mode == 'text' and (not has_context or has_map):
            raise ConfigurationError("text bundle needs a context and no label map")
        if self.mode == 'text_seg' and not (has_context and has_map):
            raise ConfigurationError("text_seg bundle needs both a context and a label map")

    def _conditional_eps(self, x, t, context, label_map):
        if self.mode == 'text_seg':
            return self.control_denoise(x, t, context, label_map)
        return self.denoise(x, t, context)

    def predict_eps(self, x_t: torch.Tensor, t, cond: Optional[Conditioning] = None,
                    guidance_scale: Optional[float] = None) -> torch.Tensor:
        if self.mode == 'unconditional':
            return self.denoise(x_t, t)
        eps = self._conditional_eps(x_t, t, cond.context, cond.label_map)
        if guidance_scale is not None and guidance_scale != 1.0:
            empty = self.encode_text([''] * x_t.shape[0]).to(x_t.dtype)
            eps_uncond = self._conditional_eps(x_t, t, empty, cond.label_map)
            eps = eps_uncond + guidance_scale * (eps - eps_uncond)
        return eps

    def conditioning(self, prompts: Optional[Sequence[str]] = None,
                     label_maps: Optional[Union[np.ndarray, torch.Tensor]] = None) -> Optional[Conditioning]:
        """Build sampler conditioning from prompt strings and raw integer label maps"""
        if self.mode == 'unconditional':
            return None
        context = self.encode_text(list(prompts or []))
        label = None
        if self.mode == 'text_seg':
            if label_maps is None:
                raise ConfigurationError("text_seg sampling needs label maps")
            label = rasterize_label_map(label_maps, self.latent_shape[1:]).to(self.device)
        return Conditioning(context=context, label_map=label, prompts=list(prompts or []))

    @staticmethod
    def to_model_space(images: torch.Tensor) -> torch.Tensor:
        return images * 2.0 - 1.0

    @staticmethod
    def to_image_space(x: torch.Tensor) -> torch.Tensor:
        return ((x + 1.0) / 2.0).clamp(0.0, 1.0)

    def describe(self) -> Dict[str, Any]:
        return {
            'mode': self.mode,
            'image_size': list(self.image_size),
            'text_encoder_trainable': self.text_encoder_trainable,
            'specs': {
                'denoiser': asdict(self.denoiser.spec),
                'codec': asdict(self.codec.spec),
                'text_encoder': asdict(self.text_encoder.spec) if self.text_encoder is not None else None,
                'control': asdict(self.control.spec) if self.control is not None else None,
            },
        }


def build_bundle(mode: str, image_size: Tuple[int, int] = (64, 64),
                 denoiser_spec: Optional[DenoiserSpec] = None, codec_spec: Optional[CodecSpec] = None,
                 text_spec: Optional[TextEncoderSpec] = None, condition_channels: int = NUM_CLASSES
                 ) -> ModelBundle:
    """Construct a freshly initialised bundle for ``mode``"""
    if mode not in MODES:
        raise ConfigurationError(f"Unknown mode '{mode}', expected one of {MODES}")
    denoiser_spec = denoiser_spec or DenoiserSpec()
    if mode == 'unconditional':
        channels = (codec_spec or CodecSpec()).image_channels
        codec = IdentityCodec(CodecSpec(image_channels=channels, latent_channels=channels))
        denoiser = DenoisingUNet(replace(denoiser_spec, in_channels=channels, context_dim=0,
                                         attention_levels=None))
        return ModelBundle(mode, denoiser, codec, image_size=image_size)

    codec_spec = codec_spec or CodecSpec()
    text_spec = text_spec or TextEncoderSpec()
    codec = build_codec(codec_spec)
    text_encoder = build_text_encoder(text_spec)
    denoiser = DenoisingUNet(replace(denoiser_spec, in_channels=codec_spec.latent_channels,
                                     context_dim=text_spec.embedding_dim))
    bundle = ModelBundle('text', denoiser, codec, text_encoder, image_size=image_size,
                         text_encoder_trainable=text_spec.trainable)
    if mode == 'text_seg':
        bundle = init_control_from_base(bundle, condition_channels)
    return bundle


def init_control_from_base(bundle: ModelBundle, condition_channels: int = NUM_CLASSES) -> ModelBundle:
    """Return a text_seg bundle whose control branch copies ``bundle``'s encoder path"""
    if bundle.mode != 'text':
        raise ConfigurationError(f"init_control_from_base needs a text bundle, got {bundle.mode}")
    denoiser = copy.deepcopy(bundle.denoiser)
    control = ControlBranch(denoiser, condition_channels)
    result = ModelBundle('text_seg', denoiser, copy.deepcopy(bundle.codec), copy.deepcopy(bundle.text_encoder),
                         control=control, image_size=bundle.image_size,
                         text_encoder_trainable=bundle.text_encoder_trainable)
    logger.info(f"Control branch initialised with {control.spec.zero_conv_count} zero convolutions; "
                f"base frozen (checksum {result.frozen_checksum()[:12]})")
    return result


def save_checkpoint(bundle: ModelBundle, directory: Union[str, Path], step: int,
                    schedule_metadata: Dict[str, Any], extra: Optional[Dict[str, Any]] = None,
                    optimizer: Optional[torch.optim.Optimizer] = None,
                    generator_state: Optional[torch.Tensor] = None) -> Path:
    """Write per-submodel parameter blobs plus manifest.json"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name in SUBMODULES:
        module = getattr(bundle, name)
        if module is not None:
            torch.save(module.state_dict(), directory / f'{name}.pt')
    if optimizer is not None:
        torch.save(optimizer.state_dict(), directory / 'optimizer.pt')
    if generator_state is not None:
        torch.save(generator_state, directory / 'rng.pt')
    manifest = {
        'version': CHECKPOINT_VERSION,
        **bundle.describe(),
        'schedule': schedule_metadata,
        'reverse_variance': 'beta',
        'step': int(step),
        **(extra or {}),
    }
    with open(directory / 'manifest.json', 'w') as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return directory


def read_checkpoint_manifest(directory: Union[str, Path]) -> Dict[str, Any]:
    path = Path(directory) / 'manifest.json'
    if not path.is_file():
        raise ConfigurationError(f"No checkpoint manifest at {path}")
    with open(path) as fh:
        manifest = json.load(fh)
    version = int(manifest.get('version', 0))
    if version > CHECKPOINT_VERSION:
        raise ConfigurationError(f"Checkpoint version {version} is newer than supported {CHECKPOINT_VERSION}")
    manifest.setdefault('reverse_variance', 'beta')
    manifest.setdefault('text_encoder_trainable', True)
    return manifest


def load_checkpoint(directory: Union[str, Path], map_location: str = 'cpu') -> Tuple[ModelBundle, Dict[str, Any]]:
    directory = Path(directory)
    manifest = read_checkpoint_manifest(directory)
    specs = manifest['specs']
    denoiser_spec = _spec_from_dict(DenoiserSpec, specs['denoiser'])
    codec_spec = _spec_from_dict(CodecSpec, specs['codec'])
    text_spec = _spec_from_dict(TextEncoderSpec, specs.get('text_encoder'))
    control_spec = _spec_from_dict(ControlBranchSpec, specs.get('control'))
    mode = manifest['mode']
    image_size = tuple(manifest['image_size'])

    denoiser = DenoisingUNet(denoiser_spec)
    codec = build_codec(codec_spec)
    text_encoder = build_text_encoder(text_spec) if text_spec is not None else None
    control = ControlBranch(denoiser, control_spec.condition_channels) if control_spec is not None else None
    bundle = ModelBundle(mode, denoiser, codec, text_encoder, control, image_size=image_size,
                         text_encoder_trainable=manifest['text_encoder_trainable'])
    for name in SUBMODULES:
        module = getattr(bundle, name)
        blob = directory / f'{name}.pt'
        if module is not None and blob.is_file():
            module.load_state_dict(torch.load(blob, map_location=map_location))
    bundle.apply_freezing()
    return bundle, manifest
