"""Noise schedule, forward process, DDPM/DDIM samplers and the training step.

Timesteps are 1-indexed: ``t = 1..T``. Index 0 of the schedule tables holds
the ``t = 0`` values (``alpha_bar_0 = 1``) so ``alpha_bars[t]`` reads
naturally.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from .numeric import Adam, Tensor, backward, mean, square, sub


class ScheduleError(ValueError):
    pass


class NumericalError(FloatingPointError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alpha_bars: np.ndarray
    sigmas: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas) - 1


def make_linear_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 2e-2) -> NoiseSchedule:
    if T < 1:
        raise ScheduleError(f"T must be >= 1, got {T}")
    if not (0 < beta_start <= beta_end < 1):
        raise ScheduleError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    betas = np.concatenate([[0.0], np.linspace(beta_start, beta_end, T)])
    alpha_bars = np.ones(T + 1)
    for t in range(1, T + 1):
        alpha_bars[t] = alpha_bars[t - 1] * (1.0 - betas[t])
    return NoiseSchedule(betas, alpha_bars, np.sqrt(betas))


def _check_t(t, sched: NoiseSchedule) -> np.ndarray:
    t = np.asarray(t)
    if np.any(t < 1) or np.any(t > sched.T):
        raise ScheduleError(f"timesteps must lie in [1, {sched.T}]")
    return t


def _per_sample(values: np.ndarray, ndim: int) -> np.ndarray:
    return values.reshape(values.shape + (1,) * (ndim - values.ndim))


def q_sample(x0: np.ndarray, t, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Closed-form forward process x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps.

    ``t`` is a scalar or one timestep per leading-axis sample.
    """
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if x0.shape != eps.shape:
        raise ScheduleError(f"eps shape {eps.shape} does not match x0 shape {x0.shape}")
    t = _check_t(t, sched)
    ab = sched.alpha_bars[t]
    if ab.ndim:
        ab = _per_sample(ab, x0.ndim)
    return (np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps).astype(x0.dtype, copy=False)


def ddpm_step(x_t: np.ndarray, t: int, eps_hat: np.ndarray, z: np.ndarray | None, sched: NoiseSchedule) -> np.ndarray:
    """One ancestral step x_t -> x_{t-1} with sigma_t^2 = beta_t; no noise at t = 1."""
    t = int(_check_t(t, sched))
    beta = sched.betas[t]
    mean_ = (x_t - beta / math.sqrt(1.0 - sched.alpha_bars[t]) * eps_hat) / math.sqrt(1.0 - beta)
    if t == 1 or z is None:
        return mean_
    return mean_ + sched.sigmas[t] * z


def ddim_timesteps(steps: int, T: int) -> np.ndarray:
    """Descending subsequence of ``steps`` timesteps from T down to 1."""
    if not (1 <= steps <= T):
        raise ScheduleError(f"steps must lie in [1, {T}], got {steps}")
    if steps == 1:
        return np.array([T])
    return np.unique(np.round(np.linspace(1, T, steps)).astype(int))[::-1]


def ddim_step(x_t, t: int, t_prev: int, eps_hat, sched: NoiseSchedule, eta: float = 0.0, z=None,
              clip_x0: float | None = None):
    ab = sched.alpha_bars[t]
    ab_prev = sched.alpha_bars[t_prev]
    x0 = (x_t - math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(ab)
    if clip_x0 is not None:
        x0 = np.clip(x0, -clip_x0, clip_x0)
        eps_hat = (x_t - math.sqrt(ab) * x0) / math.sqrt(1.0 - ab)
    sigma = eta * math.sqrt((1.0 - ab_prev) / (1.0 - ab) * (1.0 - ab / ab_prev))
    out = math.sqrt(ab_prev) * x0 + math.sqrt(max(1.0 - ab_prev - sigma ** 2, 0.0)) * eps_hat
    if sigma > 0 and z is not None:
        out = out + sigma * z
    return out


def ddim_sample(model: Callable[[np.ndarray, np.ndarray], np.ndarray], shape, sched: NoiseSchedule,
                rng: np.random.Generator, steps: int = 50, eta: float = 0.0, clip_x0: float | None = None,
                x_T: np.ndarray | None = None, dtype=np.float64) -> np.ndarray:
    """Run the DDIM reverse process.

    ``model(x_t, t_batch)`` returns the predicted noise; any condition is
    closed over by the caller. With ``eta = 0`` the result is a
    deterministic function of the initial Gaussian draw.
    """
    x = rng.standard_normal(shape).astype(dtype) if x_T is None else np.array(x_T, dtype=dtype)
    ts = ddim_timesteps(steps, sched.T)
    n = shape[0]
    for i, t in enumerate(ts):
        t_prev = int(ts[i + 1]) if i + 1 < len(ts) else 0
        eps_hat = np.asarray(model(x, np.full(n, int(t))), dtype=dtype)
        z = rng.standard_normal(shape).astype(dtype) if eta > 0 else None
        x = ddim_step(x, int(t), t_prev, eps_hat, sched, eta, z, clip_x0).astype(dtype, copy=False)
    return x


def ddpm_sample(model, shape, sched: NoiseSchedule, rng: np.random.Generator, dtype=np.float64) -> np.ndarray:
    x = rng.standard_normal(shape).astype(dtype)
    n = shape[0]
    for t in range(sched.T, 0, -1):
        eps_hat = np.asarray(model(x, np.full(n, t)), dtype=dtype)
        z = rng.standard_normal(shape).astype(dtype) if t > 1 else None
        x = ddpm_step(x, t, eps_hat, z, sched).astype(dtype, copy=False)
    return x


@dataclass
class TrainConfig:
    batch_size: int = 8
    lr: float = 1e-3
    optimizer: str = "adam"
    betas: tuple[float, float] = (0.9, 0.999)
    grad_clip: float | None = 1.0
    steps: int = 2000
    seed: int = 0
    conditioning: str = "tokens"
    precision: str = "float32"
    loss_weight: float = 1.0
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2

    def __post_init__(self):
        if self.loss_weight != 1.0:
            raise ValueError("loss weight lambda_t is fixed to 1")
        if self.conditioning not in ("tokens", "pixel_aligned"):
            raise ValueError(f"unknown conditioning mode {self.conditioning!r}")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"unknown precision {self.precision!r}")
        if self.optimizer != "adam":
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")
        self.betas = tuple(self.betas)

    @property
    def dtype(self):
        return np.float32 if self.precision == "float32" else np.float64

    def schedule(self) -> NoiseSchedule:
        return make_linear_schedule(self.T, self.beta_start, self.beta_end)

    def to_json(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


def diffusion_loss(eps_hat: Tensor, eps: np.ndarray) -> Tensor:
    """Mean squared error between predicted and drawn noise (lambda_t = 1)."""
    return mean(square(sub(eps_hat, eps)))


def train_step(predict: Callable[[np.ndarray, np.ndarray], Tensor], x0: np.ndarray, opt: Adam,
               sched: NoiseSchedule, rng: np.random.Generator) -> float:
    """One optimisation step of the conditional denoising objective.

    ``predict(x_t, t)`` builds the full differentiable forward pass (feature
    extraction, condition construction, denoiser) for the batch whose
    targets are ``x0``. Raises :class:`NumericalError` on a non-finite loss.
    """
    if x0.shape[0] == 0:
        raise ValueError("empty batch")
    n = x0.shape[0]
    t = rng.integers(1, sched.T + 1, size=n)
    eps = rng.standard_normal(x0.shape).astype(x0.dtype)
    x_t = q_sample(x0, t, eps, sched)
    opt.zero_grad()
    loss = diffusion_loss(predict(x_t, t), eps)
    value = float(loss.data)
    if not math.isfinite(value):
        raise NumericalError(f"non-finite loss {value} at optimiser step {opt.t + 1}")
    backward(loss)
    opt.step()
    return value
