"""Noise schedule and the forward/reverse diffusion arithmetic.

Timesteps are 1-based everywhere in the public API: ``t`` runs from 1 (almost
clean) to ``T`` (almost pure noise). Tables are stored 0-based internally.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Protocol, Sequence, Union

import numpy as np
import torch
from tqdm import tqdm

from errors import (ConfigurationError, ContractViolation, ParameterError,
                    ShapeError, TimestepError)

logger = logging.getLogger(__name__)

SCHEDULE_KINDS = ('linear',)

Timestep = Union[int, torch.Tensor]


@dataclass(frozen=True)
class NoiseSchedule:
    """beta/alpha/alpha_bar tables for T steps (float64)"""
    T: int
    beta_start: float
    beta_end: float
    kind: str
    betas: torch.Tensor = field(repr=False, compare=False)
    alphas: torch.Tensor = field(repr=False, compare=False)
    alpha_bars: torch.Tensor = field(repr=False, compare=False)

    def check_timestep(self, t: Timestep) -> None:
        if isinstance(t, torch.Tensor):
            if t.numel() == 0:
                raise TimestepError("Empty timestep tensor")
            low, high = int(t.min()), int(t.max())
        else:
            low = high = int(t)
        if low < 1 or high > self.T:
            raise TimestepError(f"Timestep out of range [1, {self.T}]: got {low}..{high}")

    def beta(self, t: int) -> float:
        self.check_timestep(t)
        return float(self.betas[t - 1])

    def alpha(self, t: int) -> float:
        self.check_timestep(t)
        return float(self.alphas[t - 1])

    def alpha_bar(self, t: int) -> float:
        self.check_timestep(t)
        return float(self.alpha_bars[t - 1])

    def gather(self, table: torch.Tensor, t: Timestep, like: torch.Tensor) -> Union[float, torch.Tensor]:
        """Look up ``table`` at 1-based ``t``, broadcastable against ``like``"""
        self.check_timestep(t)
        if not isinstance(t, torch.Tensor):
            return float(table[int(t) - 1])
        values = table.to(like.device)[t.long().to(like.device) - 1].to(like.dtype)
        return values.view(-1, *([1] * (like.ndim - 1)))

    def to_metadata(self) -> Dict[str, Any]:
        """Serializable form; betas are re-derived on load, never stored"""
        return {'kind': self.kind, 'T': self.T,
                'beta_start': self.beta_start, 'beta_end': self.beta_end}

    @classmethod
    def from_metadata(cls, metadata: Dict[str, Any]) -> 'NoiseSchedule':
        return make_schedule(int(metadata['T']), float(metadata['beta_start']),
                             float(metadata['beta_end']), metadata.get('kind', 'linear'))


def make_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02,
                  kind: str = 'linear') -> NoiseSchedule:
    """Build a schedule with betas interpolated from beta_start to beta_end"""
    if kind not in SCHEDULE_KINDS:
        raise ParameterError(f"Unknown schedule kind '{kind}', expected one of {SCHEDULE_KINDS}")
    if int(T) != T or T < 1:
        raise ParameterError(f"T must be a positive integer, got {T}")
    if not beta_start > 0:
        raise ParameterError(f"beta_start must be > 0, got {beta_start}")
    if not beta_end < 1:
        raise ParameterError(f"beta_end must be < 1, got {beta_end}")
    if beta_start > beta_end:
        raise ParameterError(f"beta_start ({beta_start}) must not exceed beta_end ({beta_end})")

    T = int(T)
    betas = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
    alphas = 1.0 - betas
    if bool((alphas >= 1.0).any()):
        raise ParameterError(f"beta_start={beta_start} is too small: 1 - beta rounds to 1")

    # sequential product so that alpha_bars[t] == alpha_bars[t-1] * alphas[t] holds exactly
    products: List[float] = []
    running = 1.0
    for a in alphas.tolist():
        running *= a
        products.append(running)
    alpha_bars = torch.tensor(products, dtype=torch.float64)
    if products[-1] <= 0.0:
        raise ParameterError(f"Schedule underflows: alpha_bar_T is 0 for T={T}, beta_end={beta_end}")

    return NoiseSchedule(T=T, beta_start=float(beta_start), beta_end=float(beta_end), kind=kind,
                         betas=betas, alphas=alphas, alpha_bars=alpha_bars)


def _check_same_shape(a, b, what):
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape {tuple(b.shape)} does not match {tuple(a.shape)}")


def forward_step(x_prev: torch.Tensor, t: Timestep, eps: torch.Tensor, s: NoiseSchedule) -> torch.Tensor:
    """One forward noising step x_{t-1} -> x_t"""
    _check_same_shape(x_prev, eps, 'forward_step noise')
    beta = s.gather(s.betas, t, x_prev)
    if isinstance(beta, float):
        return math.sqrt(1.0 - beta) * x_prev + math.sqrt(beta) * eps
    return torch.sqrt(1.0 - beta) * x_prev + torch.sqrt(beta) * eps


def q_sample(x0: torch.Tensor, t: Timestep, eps: torch.Tensor, s: NoiseSchedule) -> torch.Tensor:
    """Closed-form marginal x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps"""
    _check_same_shape(x0, eps, 'q_sample noise')
    abar = s.gather(s.alpha_bars, t, x0)
    if isinstance(abar, float):
        return math.sqrt(abar) * x0 + math.sqrt(1.0 - abar) * eps
    return torch.sqrt(abar) * x0 + torch.sqrt(1.0 - abar) * eps


def predict_x0(x_t: torch.Tensor, t: int, eps_pred: torch.Tensor, s: NoiseSchedule) -> torch.Tensor:
    abar = s.alpha_bar(t)
    return (x_t - math.sqrt(1.0 - abar) * eps_pred) / math.sqrt(abar)


def reverse_step(x_t: torch.Tensor, t: int, eps_pred: torch.Tensor, s: NoiseSchedule,
                 z: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Posterior mean from eps_pred plus sigma_t * z, with sigma_t^2 = beta_t"""
    s.check_timestep(t)
    t = int(t)
    _check_same_shape(x_t, eps_pred, 'reverse_step eps_pred')
    beta, alpha, abar = s.beta(t), s.alpha(t), s.alpha_bar(t)
    mean = (x_t - (beta / math.sqrt(1.0 - abar)) * eps_pred) / math.sqrt(alpha)
    if z is None:
        return mean
    _check_same_shape(x_t, z, 'reverse_step z')
    if t == 1:
        if bool(torch.any(z != 0)):
            raise ContractViolation("reverse_step at t=1 must not receive noise (z must be 0)")
        return mean
    return mean + math.sqrt(beta) * z


class Denoiser(Protocol):
    """Anything the samplers can drive: a ModelBundle or a test oracle"""

    def check_conditioning(self, cond: Any) -> None:
        ...

    def predict_eps(self, x_t: torch.Tensor, t: int, cond: Any = None,
                    guidance_scale: Optional[float] = None) -> torch.Tensor:
        ...


def _check_model(model, cond):
    check = getattr(model, 'check_conditioning', None)
    if check is None:
        raise ConfigurationError(f"{type(model).__name__} cannot be sampled: no check_conditioning()")
    check(cond)


@torch.no_grad()
def ddpm_sample(model: Denoiser, shape: Sequence[int], s: NoiseSchedule, seed: int,
                cond: Any = None, guidance_scale: Optional[float] = None,
                dtype: torch.dtype = torch.float32, device: Optional[torch.device] = None,
                show_progress: bool = False) -> torch.Tensor:
    """Full T-step ancestral sampler from standard normal noise"""
    _check_model(model, cond)
    device = device or torch.device('cpu')
    generator = torch.Generator().manual_seed(int(seed))
    x = torch.randn(tuple(shape), generator=generator, dtype=dtype).to(device)
    steps = range(s.T, 0, -1)
    for t in tqdm(steps, desc='ddpm', disable=not show_progress):
        eps = model.predict_eps(x, t, cond, guidance_scale=guidance_scale)
        z = torch.randn(tuple(shape), generator=generator, dtype=dtype).to(device) if t > 1 else None
        x = reverse_step(x, t, eps, s, z)
    return x


def fast_timesteps(T: int, steps: int) -> List[int]:
    """Rounded linspace from T down to 1; steps <= T keeps the spacing >= 1"""
    if steps < 1 or steps > T:
        raise ParameterError(f"steps must be in [1, {T}], got {steps}")
    timesteps = [int(v) for v in np.rint(np.linspace(T, 1, steps))]
    if any(a <= b for a, b in zip(timesteps, timesteps[1:])):
        raise ContractViolation(f"timestep subsequence for T={T}, steps={steps} is not strictly decreasing")
    return timesteps


@torch.no_grad()
def fast_sample(model: Denoiser, shape: Sequence[int], steps: int, s: NoiseSchedule, seed: int,
                cond: Any = None, order: int = 2, guidance_scale: Optional[float] = None,
                dtype: torch.dtype = torch.float32, device: Optional[torch.device] = None) -> torch.Tensor:
    """Multistep solver over a strided timestep subsequence.

    order=1 is the deterministic DDIM update; order=2 reuses the previous
    data prediction (second-order multistep in data-prediction form). The
    result is the data prediction at the last visited timestep.
    """
    if order not in (1, 2):
        raise ParameterError(f"order must be 1 or 2, got {order}")
    timesteps = fast_timesteps(s.T, steps)
    _check_model(model, cond)
    device = device or torch.device('cpu')
    generator = torch.Generator().manual_seed(int(seed))
    x = torch.randn(tuple(shape), generator=generator, dtype=dtype).to(device)

    prev_x0: Optional[torch.Tensor] = None
    prev_h: Optional[float] = None
    for i, t in enumerate(timesteps):
        eps = model.predict_eps(x, t, cond, guidance_scale=guidance_scale)
        x0 = predict_x0(x, t, eps, s)
        if i == len(timesteps) - 1:
            return x0
        t_next = timesteps[i + 1]
        a_t, s_t = math.sqrt(s.alpha_bar(t)), math.sqrt(1.0 - s.alpha_bar(t))
        a_n, s_n = math.sqrt(s.alpha_bar(t_next)), math.sqrt(1.0 - s.alpha_bar(t_next))
        h = math.log(a_n / s_n) - math.log(a_t / s_t)
        if order == 1 or prev_x0 is None:
            d = x0
        else:
            r = prev_h / h
            d = (1.0 + 0.5 / r) * x0 - (0.5 / r) * prev_x0
        x = (s_n / s_t) * x - a_n * math.expm1(-h) * d
        prev_x0, prev_h = x0, h
    return x
