"""Latent alignment regularizers and decoder inversion."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from rapidfuzz.distance import Levenshtein
from scipy.stats import norm

from .latent_model import DTYPE, DesignSequence, GRUDecoder


class CoincidentLatentWarning(RuntimeWarning):
    """Two latents coincide while their objective values differ."""


@dataclass(frozen=True)
class AlignmentBatch:
    latents: np.ndarray
    values: np.ndarray
    weights: np.ndarray

    def __post_init__(self) -> None:
        if len(self.latents) != len(self.values) or len(self.values) != len(self.weights):
            raise ValueError("latents, values and weights must have matching lengths")
        if np.any(np.asarray(self.weights) <= 0):
            raise ValueError("weights must be positive")


@dataclass(frozen=True)
class InversionConfig:
    step_size: float = 0.05
    max_steps: int = 200
    distance_tolerance: float = 0.05

    def __post_init__(self) -> None:
        if self.step_size < 0:
            raise ValueError("step_size must be non-negative")
        if self.max_steps < 0:
            raise ValueError("max_steps must be non-negative")
        if not 0.0 <= self.distance_tolerance <= 1.0:
            raise ValueError("distance_tolerance must lie in [0, 1]")


def design_distance(a: DesignSequence, b: DesignSequence) -> float:
    """Levenshtein distance over tokens divided by the longer length."""
    return float(Levenshtein.normalized_distance(a.tokens, b.tokens))


def importance_weights(values, quantile: float = 0.5, smoothing: float | None = None) -> np.ndarray:
    """``w_i = 1 - Phi((y_q - y_i) / sigma_w)``.

    ``smoothing`` defaults to the sample standard deviation of ``values``
    floored at 1e-6.
    """
    y = np.asarray(values, dtype=float).reshape(-1)
    if y.size == 0:
        raise ValueError("need at least one value")
    if smoothing is None:
        smoothing = max(float(np.std(y, ddof=1)) if y.size > 1 else 0.0, 1e-6)
    if not smoothing > 0:
        raise ValueError("smoothing must be positive")
    y_q = np.quantile(y, quantile)
    return norm.sf((y_q - y) / smoothing)


def _median(x: torch.Tensor) -> torch.Tensor:
    s, _ = torch.sort(x)
    n = s.numel()
    if n % 2:
        return s[n // 2]
    return 0.5 * (s[n // 2 - 1] + s[n // 2])


def lipschitz_loss(latents, values, weights) -> torch.Tensor:
    """Weighted hinge on pairwise slopes above their median.

    Diagonal pairs are excluded from the median and contribute zero.  Pairs with
    coincident latents and different values take the largest finite slope.
    """
    z = torch.as_tensor(latents, dtype=DTYPE)
    y = torch.as_tensor(values, dtype=DTYPE).reshape(-1)
    w = torch.as_tensor(weights, dtype=DTYPE).reshape(-1)
    n = z.shape[0]
    if n < 2:
        raise ValueError("lipschitz_loss needs at least two points")
    off = ~torch.eye(n, dtype=torch.bool)
    diff = z[:, None, :] - z[None, :, :]
    sq = (diff**2).sum(-1)
    coincident = (sq == 0) & off
    dist = torch.sqrt(torch.where(coincident | ~off, torch.ones_like(sq), sq))
    dy = (y[:, None] - y[None, :]).abs()
    slopes = torch.where(coincident, torch.zeros_like(dy), dy / dist)
    bad = coincident & (dy > 0)
    if bad.any():
        warnings.warn("coincident latents with distinct values; using the largest finite slope", CoincidentLatentWarning, stacklevel=2)
        finite_max = slopes[off & ~bad].max() if (off & ~bad).any() else slopes.new_zeros(())
        slopes = torch.where(bad, finite_max.detach().expand_as(slopes), slopes)
    slopes = torch.where(off, slopes, torch.zeros_like(slopes))
    med = _median(slopes[off])
    pair_w = torch.sqrt(w[:, None] * w[None, :])
    hinge = torch.clamp(slopes - med, min=0.0) * off
    return (pair_w * hinge).sum() / n**2


def expected_normal_distance(d: int) -> float:
    """``E||U - V||`` for independent standard normal vectors in ``R^d``."""
    return 2.0 * math.exp(math.lgamma((d + 1) / 2.0) - math.lgamma(d / 2.0))


def latent_scale_loss(latents) -> torch.Tensor:
    """``|mean pairwise distance - c_d|`` over all ordered pairs, diagonal included."""
    z = torch.as_tensor(latents, dtype=DTYPE)
    n, d = z.shape
    if n < 2:
        raise ValueError("latent_scale_loss needs at least two points")
    sq = ((z[:, None, :] - z[None, :, :]) ** 2).sum(-1)
    # coincident pairs contribute zero distance; masking keeps sqrt's gradient finite
    pos = sq > 0
    dist = torch.where(pos, torch.sqrt(torch.where(pos, sq, torch.ones_like(sq))), torch.zeros_like(sq))
    return (dist.sum() / n**2 - expected_normal_distance(d)).abs()


def inversion_loss(designs: Sequence[DesignSequence], z: torch.Tensor, decoder: GRUDecoder) -> torch.Tensor:
    """Per-design length-normalized token negative log-likelihood."""
    return -decoder.log_likelihood(designs, z)


def invert_latents(
    designs: Sequence[DesignSequence],
    z_init,
    decoder: GRUDecoder,
    config: InversionConfig = InversionConfig(),
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Independent gradient-descent inversions, vectorized over designs.

    Each row stops as soon as its decoded design is within the distance
    tolerance; a row whose loss turns non-finite is reset to its initial code
    and reported as not converged.
    Returns ``(codes, converged, steps_used)``.
    """
    z0 = torch.as_tensor(np.asarray(z_init, dtype=float), dtype=DTYPE).reshape(len(designs), -1)
    targets, mask = decoder.targets(designs)
    n = len(designs)
    z = z0.clone()
    converged = np.zeros(n, dtype=bool)
    aborted = np.zeros(n, dtype=bool)
    steps = np.zeros(n, dtype=int)

    def check(active_idx):
        decoded = decoder.decode(z[active_idx])
        for j, x_hat in zip(active_idx.tolist(), decoded):
            if design_distance(designs[j], x_hat) <= config.distance_tolerance:
                converged[j] = True

    check(np.arange(n))
    params = [p for p in decoder.parameters()]
    saved = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad_(False)
    try:
        for k in range(config.max_steps):
            active = np.flatnonzero(~converged & ~aborted)
            if active.size == 0:
                break
            idx = torch.as_tensor(active)
            za = z[idx].clone().requires_grad_(True)
            loss = -decoder.log_likelihood_from_targets(targets[idx], mask[idx], za)
            finite = torch.isfinite(loss)
            (grad,) = torch.autograd.grad(loss.sum(), za)
            finite &= torch.isfinite(grad).all(-1)
            with torch.no_grad():
                z[idx] = torch.where(finite[:, None], za - config.step_size * grad, z0[idx])
            bad = active[~finite.numpy()]
            aborted[bad] = True
            steps[active] = k + 1
            check(active[finite.numpy()])
    finally:
        for p, flag in zip(params, saved):
            p.requires_grad_(flag)
    return z.numpy(), converged & ~aborted, steps


def invert_latent(x: DesignSequence, z_init, theta: GRUDecoder, config: InversionConfig = InversionConfig()) -> tuple[np.ndarray, bool, int]:
    z, ok, steps = invert_latents([x], np.asarray(z_init, dtype=float)[None], theta, config)
    return z[0], bool(ok[0]), int(steps[0])
