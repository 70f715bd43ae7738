"""Reverse denoising chain from Gaussian noise to aligned features."""

import math
from dataclasses import dataclass
from typing import List, NamedTuple, Optional

import torch

from .denoiser import classify, predict_clean
from .exceptions import InvalidArgumentError, NumericFailureError


@dataclass
class SamplingOptions:
    noise_scale: float = 1.0
    stride: int = 1
    record_trajectory: bool = False

    def __post_init__(self):
        if not 0.0 <= self.noise_scale <= 1.0:
            raise InvalidArgumentError("noise_scale must lie in [0, 1]")
        if int(self.stride) != self.stride or self.stride < 1:
            raise InvalidArgumentError("stride must be a positive integer")


class ChainResult(NamedTuple):
    features: torch.Tensor
    steps: List[int]  # visited steps, descending, ending with 0
    trajectory: Optional[List[torch.Tensor]]  # x at each entry of ``steps`` when recorded


class Predictions(NamedTuple):
    scores: torch.Tensor
    topk: torch.Tensor
    features: torch.Tensor


def visited_steps(total_steps, stride=1):
    """Descending steps T, T - stride, ..., followed by the clean index 0."""
    return list(range(total_steps, 0, -stride)) + [0]


def _jump_coefficients(schedule, i, prev):
    abar_i = schedule.alpha_bars[i]
    abar_prev = schedule.alpha_bars[prev]
    alpha = abar_i / abar_prev  # equals alphas[i] when prev == i - 1
    beta = 1.0 - alpha
    denom = 1.0 - abar_i
    c_pred = math.sqrt(abar_prev) * beta / denom
    c_x = math.sqrt(alpha) * (1.0 - abar_prev) / denom
    var = (1.0 - abar_prev) / denom * beta
    return c_pred, c_x, var


def posterior_mean(schedule, i, x_i, x_pred, prev=None):
    """Mean of the reverse step from ``i`` to ``prev`` (default ``i - 1``)."""
    if not 1 <= int(i) <= schedule.total_steps:
        raise InvalidArgumentError(f"step {i} outside [1, {schedule.total_steps}]")
    prev = int(i) - 1 if prev is None else int(prev)
    if not 0 <= prev < int(i):
        raise InvalidArgumentError(f"previous step {prev} must lie in [0, {i})")
    c_pred, c_x, _ = _jump_coefficients(schedule, int(i), prev)
    return c_pred * x_pred + c_x * x_i


def reverse_chain(model, schedule, x_visual, generator=None, options=None, x_start=None):
    """Run the reverse chain conditioned on ``x_visual``.

    ``x_start`` replaces the standard-normal draw for the initial state. When
    it is given and ``noise_scale == 0`` the generator is never touched.
    """
    options = options or SamplingOptions()
    x_visual = torch.as_tensor(x_visual)
    if x_start is None:
        x = torch.randn(x_visual.shape, generator=generator, dtype=x_visual.dtype)
    else:
        x = torch.as_tensor(x_start, dtype=x_visual.dtype).clone()
        if x.shape != x_visual.shape:
            raise InvalidArgumentError("x_start must match x_visual in shape")
    steps = visited_steps(schedule.total_steps, options.stride)
    trajectory = [x] if options.record_trajectory else None
    b = x_visual.shape[0]
    with torch.no_grad():
        for i, prev in zip(steps[:-1], steps[1:]):
            pred = predict_clean(model, x, torch.full((b,), i, dtype=torch.long), x_visual)
            c_pred, c_x, var = _jump_coefficients(schedule, i, prev)
            x = c_pred * pred + c_x * x
            if options.noise_scale > 0 and var > 0:
                z = torch.randn(x.shape, generator=generator, dtype=x.dtype)
                x = x + options.noise_scale * math.sqrt(var) * z
            if not torch.isfinite(x).all():
                raise NumericFailureError(f"non-finite state after reverse step {i}", step=i)
            if trajectory is not None:
                trajectory.append(x)
    return ChainResult(x, steps, trajectory)


def align_and_classify(model, schedule, x_visual, generator=None, options=None, k=5, x_start=None):
    """Aligned features, head scores and the top-k class ids per row.

    Ties in the ranking go to the lower class index.
    """
    chain = reverse_chain(model, schedule, x_visual, generator, options, x_start=x_start)
    with torch.no_grad():
        scores = model.head.scores(classify(model.head, chain.features))
    return Predictions(scores, rank_classes(scores, k), chain.features)


def rank_classes(scores, k):
    k = min(int(k), scores.shape[-1])
    order = torch.sort(-scores, dim=-1, stable=True).indices
    return order[:, :k]
