"""DDPM schedule, forward noising and x0-parameterized reverse sampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


@dataclass(frozen=True)
class DiffusionSchedule:
    """Tables indexed by step ``t`` in ``1..T`` (arrays hold entry ``t`` at ``t-1``)."""

    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta)

    def abar(self, t: int) -> float:
        """Cumulative product up to ``t``, with ``abar(0) == 1``."""
        return 1.0 if t == 0 else float(self.alpha_bar[t - 1])

    def _check(self, t: int, lo: int = 1) -> None:
        if not lo <= t <= self.T:
            raise ValueError(f"step {t} outside [{lo}, {self.T}]")


def make_schedule(T: int = 100, beta_start: float = 1e-3, beta_end: float = 0.2) -> DiffusionSchedule:
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64) if T > 1 else np.array([beta_start])
    alpha = 1.0 - beta
    alpha_bar = np.empty(T)
    acc = 1.0
    for i in range(T):
        acc = acc * alpha[i]
        alpha_bar[i] = acc
    return DiffusionSchedule(beta, alpha, alpha_bar)


def forward_diffuse(x0, t: int, epsilon, schedule: DiffusionSchedule):
    """``x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps``; works on numpy arrays or tensors."""
    if tuple(np.shape(x0)) != tuple(np.shape(epsilon)):
        raise ValueError(f"shape mismatch: x0 {tuple(np.shape(x0))} vs epsilon {tuple(np.shape(epsilon))}")
    schedule._check(t, lo=0)
    ab = schedule.abar(t)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * epsilon


def posterior_coefficients(t: int, schedule: DiffusionSchedule):
    """``(c_x0, c_xt, sigma)`` of q(x_{t-1} | x_t, x0)."""
    schedule._check(t)
    if t == 1:
        # closed form with abar_0 = 1; avoids beta / (1 - (1 - beta)) rounding
        return 1.0, 0.0, 0.0
    ab_t, ab_prev = schedule.abar(t), schedule.abar(t - 1)
    beta_t, alpha_t = schedule.beta[t - 1], schedule.alpha[t - 1]
    c_x0 = np.sqrt(ab_prev) * beta_t / (1.0 - ab_t)
    c_xt = np.sqrt(alpha_t) * (1.0 - ab_prev) / (1.0 - ab_t)
    var = beta_t * (1.0 - ab_prev) / (1.0 - ab_t)
    return float(c_x0), float(c_xt), float(np.sqrt(var))


def posterior_step(x_t, x0_hat, t: int, z, schedule: DiffusionSchedule):
    """Sample ``x_{t-1}`` given ``x_t`` and a clean-image estimate; ``z=None`` means zero noise."""
    c_x0, c_xt, sigma = posterior_coefficients(t, schedule)
    if t == 1:
        # abar_0 = 1 forces (c_x0, c_xt, sigma) = (1, 0, 0); return x0_hat bit-exactly
        return x0_hat * 1.0
    out = c_x0 * x0_hat + c_xt * x_t
    if z is not None:
        out = out + sigma * z
    return out


def to_diffusion_range(img):
    return img * 2.0 - 1.0


def from_diffusion_range(x):
    return (x + 1.0) * 0.5


@dataclass
class DenoiseResult:
    x0_hat: torch.Tensor  # (H, W, 3) in [0, 1]
    pose: object  # CameraPose used for rendering
    index: int  # selected candidate (0 in single mode)
    scores: torch.Tensor | None  # (K,) logits in multi mode
    h1: torch.Tensor | None  # raw pose-head output
    omega: torch.Tensor | None = None
    ts: torch.Tensor | None = None


@torch.no_grad()
def denoise_once(model, x_t: torch.Tensor, t: int) -> DenoiseResult:
    """Predict the pose of ``x_t`` (diffusion range, H x W x 3) and render it once.

    In multi-pose mode the candidate with the highest classifier score is
    rendered.
    """
    return model.denoise(x_t, t)


@dataclass
class SampleStep:
    t: int
    x_prev: torch.Tensor  # x_{t-1}, diffusion range
    x0_hat: torch.Tensor  # [0, 1]
    pose: object
    index: int


@torch.no_grad()
def sample_from_noise(model, schedule: DiffusionSchedule, seed: int = 0, deterministic: bool = False,
                      shape=None) -> list[SampleStep]:
    """Run the full reverse chain from ``x_T ~ N(0, I)`` and record every step."""
    g = torch.Generator().manual_seed(seed)
    if shape is None:
        shape = (model.intrinsics.height, model.intrinsics.width, 3)
    x = torch.randn(shape, generator=g)
    traj = []
    for t in range(schedule.T, 0, -1):
        res = denoise_once(model, x, t)
        x0_hat = to_diffusion_range(res.x0_hat)
        z = None if deterministic or t == 1 else torch.randn(shape, generator=g)
        x = posterior_step(x, x0_hat, t, z, schedule)
        traj.append(SampleStep(t, x, res.x0_hat, res.pose, res.index))
    return traj
