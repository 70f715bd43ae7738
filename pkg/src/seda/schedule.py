"""Variance schedule and closed-form forward noising.

Timesteps are 1-indexed; step 0 is the clean sample. With the convention
``alpha_bar[0] = 1`` the first posterior variance is exactly zero, so the
last reverse step is deterministic.
"""

from dataclasses import dataclass

import numpy as np
import torch

from .exceptions import InvalidArgumentError


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Immutable per-step tables for a discrete diffusion of ``total_steps``.

    ``betas``, ``alphas`` and ``posterior_variances`` are indexed 1..T and
    stored with a leading placeholder at position 0 (``beta_0 = 0``) so that
    ``table[i]`` always refers to step ``i``. ``alpha_bars`` has length T + 1.
    """

    total_steps: int
    beta_start: float
    beta_end: float
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    posterior_variances: np.ndarray

    @classmethod
    def from_betas(cls, betas, beta_start=None, beta_end=None):
        betas = np.asarray(betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 1:
            raise InvalidArgumentError("betas must be a non-empty 1-D sequence")
        if not np.all((betas > 0.0) & (betas < 1.0)):
            raise InvalidArgumentError("every beta must lie in (0, 1)")
        total = betas.size
        padded = np.concatenate([[0.0], betas])
        alphas = 1.0 - padded
        alpha_bars = np.cumprod(alphas)  # alpha_bars[0] == 1 since padded[0] == 0
        post = np.zeros(total + 1)
        post[1:] = (1.0 - alpha_bars[:-1]) / (1.0 - alpha_bars[1:]) * betas
        for arr in (padded, alphas, alpha_bars, post):
            arr.setflags(write=False)
        return cls(
            total_steps=total,
            beta_start=float(betas[0] if beta_start is None else beta_start),
            beta_end=float(betas[-1] if beta_end is None else beta_end),
            betas=padded,
            alphas=alphas,
            alpha_bars=alpha_bars,
            posterior_variances=post,
        )

    def _check_step(self, i, lo):
        if not lo <= int(i) <= self.total_steps:
            raise InvalidArgumentError(f"step {i} outside [{lo}, {self.total_steps}]")

    def coefficient(self, table, steps, like):
        """Gather ``table[steps]`` as a column tensor matching ``like``."""
        idx = torch.as_tensor(steps, dtype=torch.long).cpu().numpy()
        vals = torch.from_numpy(np.ascontiguousarray(table[idx]))
        return vals.to(dtype=like.dtype, device=like.device).unsqueeze(-1)

    def arguments(self):
        return {"total_steps": self.total_steps, "beta_start": self.beta_start, "beta_end": self.beta_end}


def build_linear_schedule(total_steps=1000, beta_start=1e-4, beta_end=0.02):
    """Linearly spaced betas from ``beta_start`` to ``beta_end`` inclusive."""
    if int(total_steps) != total_steps or total_steps < 1:
        raise InvalidArgumentError(f"total_steps must be a positive integer, got {total_steps!r}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise InvalidArgumentError(
            f"need 0 < beta_start <= beta_end < 1, got {beta_start!r}, {beta_end!r}"
        )
    betas = np.linspace(beta_start, beta_end, int(total_steps), dtype=np.float64)
    return NoiseSchedule.from_betas(betas, beta_start, beta_end)


def forward_noising(schedule, x0, steps, noise):
    """Sample ``x_i = sqrt(abar_i) * x0 + sqrt(1 - abar_i) * noise`` row-wise."""
    x0 = torch.as_tensor(x0)
    noise = torch.as_tensor(noise, dtype=x0.dtype)
    if x0.ndim != 2 or noise.shape != x0.shape:
        raise InvalidArgumentError(
            f"x0 and noise must be matching B x d matrices, got {tuple(x0.shape)} and {tuple(noise.shape)}"
        )
    steps = torch.as_tensor(steps, dtype=torch.long).reshape(-1)
    if steps.numel() != x0.shape[0]:
        raise InvalidArgumentError(f"expected {x0.shape[0]} steps, got {steps.numel()}")
    if steps.numel() and (int(steps.min()) < 0 or int(steps.max()) > schedule.total_steps):
        raise InvalidArgumentError(f"steps must lie in [0, {schedule.total_steps}]")
    abar = schedule.coefficient(schedule.alpha_bars, steps, x0)
    return torch.sqrt(abar) * x0 + torch.sqrt(1.0 - abar) * noise


def posterior_variance(schedule, i):
    """Variance of the reverse step ``i -> i - 1``."""
    schedule._check_step(i, 1)
    return float(schedule.posterior_variances[int(i)])
