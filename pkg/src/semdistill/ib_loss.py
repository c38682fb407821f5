"""Information-bottleneck distillation objective.

``total = rate + beta * distortion`` where ``rate`` is the sampled
contrastive upper bound on I(input; transmitted feature) under a Gaussian
encoder density, and ``distortion`` is the soft cross-entropy between the
(smoothed) teacher labels and the student's received-side prediction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .errors import ShapeError

LOG_CLAMP = 1e-12
_LOG_2PI = math.log(2 * math.pi)


@dataclass
class StochasticEncoderDensity:
    """Diagonal Gaussian ``N(mean, exp(log_variance))``.

    ``log_variance`` is a scalar or a per-channel vector broadcast over the
    spatial dimensions of ``mean`` (``(C, H, W)`` or ``(N, C, H, W)``).
    """

    mean: torch.Tensor
    log_variance: torch.Tensor | float

    def _log_var(self, like: torch.Tensor) -> torch.Tensor:
        lv = torch.as_tensor(self.log_variance, dtype=like.dtype)
        if lv.dim() == 1:
            lv = lv.view(-1, 1, 1)
        return lv

    def log_prob(self, x: torch.Tensor) -> torch.Tensor:
        """Sum of elementwise log densities (per sample for batched input)."""
        if x.shape[-3:] != self.mean.shape[-3:]:
            raise ShapeError(f"point shape {tuple(x.shape)} vs mean shape {tuple(self.mean.shape)}")
        lv = self._log_var(x)
        elem = -0.5 * (_LOG_2PI + lv + (x - self.mean) ** 2 / torch.exp(lv))
        return elem.flatten(-3).sum(-1)


def gaussian_log_density(x: torch.Tensor, density: StochasticEncoderDensity) -> torch.Tensor:
    lv = torch.as_tensor(density.log_variance)
    if not torch.isfinite(lv).all():
        raise ValueError("log-variance must be finite (variance > 0)")
    return density.log_prob(x)


def _inv_std(log_var, like: torch.Tensor) -> torch.Tensor:
    lv = torch.as_tensor(log_var, dtype=like.dtype)
    if lv.dim() == 1:
        lv = lv.view(1, -1, 1, 1)
    return torch.exp(-0.5 * lv)


def _sq(t: torch.Tensor) -> torch.Tensor:
    return (t * t).flatten(1).sum(1)


def mi_upper_bound(means: torch.Tensor, samples: torch.Tensor, log_var) -> torch.Tensor:
    """Monte Carlo upper bound on I(input; feature).

    ``mean_n log p(x_n|i_n) - mean_{n,j} log p(x_n|i_j)`` for Gaussian
    densities centred on ``means`` with shared ``log_var``. Normalizing
    constants cancel, leaving half the average excess squared Mahalanobis
    distance of each sample to the other means. Distances are taken relative
    to the first mean, so identical means give exactly zero.
    """
    if means.shape != samples.shape:
        raise ShapeError(f"means {tuple(means.shape)} vs samples {tuple(samples.shape)}")
    n = means.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    inv = _inv_std(log_var, means)
    u = (samples - means[:1]) * inv  # (N, ...)
    d = (means - means[:1]) * inv
    d_flat = d.flatten(1)
    # mean_j |u_n - d_j|^2 expanded around the reference mean
    cross = u.flatten(1) @ (d_flat.sum(0) / n)
    mean_pair = _sq(u) - 2 * cross + _sq(d).mean()
    diag = _sq(u - d)
    return 0.5 * (mean_pair - diag).mean()


def soft_cross_entropy(p: torch.Tensor, y_hat: torch.Tensor) -> torch.Tensor:
    """``-sum_c y_hat[c] log p[c]`` along the last axis (``p`` clamped at 1e-12)."""
    if p.shape != y_hat.shape:
        raise ShapeError(f"prediction {tuple(p.shape)} vs target {tuple(y_hat.shape)}")
    return -(y_hat * torch.log(p.clamp_min(LOG_CLAMP))).sum(-1)


def soft_cross_entropy_logits(logits: torch.Tensor, y_hat: torch.Tensor) -> torch.Tensor:
    """Same as :func:`soft_cross_entropy` on ``softmax(logits)``, computed stably."""
    if logits.shape != y_hat.shape:
        raise ShapeError(f"prediction {tuple(logits.shape)} vs target {tuple(y_hat.shape)}")
    log_p = logits.log_softmax(-1).clamp_min(math.log(LOG_CLAMP))
    return -(y_hat * log_p).sum(-1)


@dataclass
class LossBreakdown:
    rate: torch.Tensor
    distortion: torch.Tensor
    total: torch.Tensor
    beta: float

    def as_dict(self) -> dict:
        return {"rate": float(self.rate.detach()), "distortion": float(self.distortion.detach()),
                "total": float(self.total.detach()), "beta": self.beta}


def distillation_loss(
    means: torch.Tensor,
    samples: torch.Tensor,
    log_var,
    y_hat: torch.Tensor,
    beta: float,
    probs: torch.Tensor | None = None,
    logits: torch.Tensor | None = None,
    rate: bool = True,
) -> LossBreakdown:
    """Rate plus ``beta`` times the mean soft cross-entropy over the batch.

    Give either ``probs`` or ``logits`` for the student prediction. Minimizing
    ``total`` maximizes the label log-likelihood term while penalizing the
    rate bound. ``rate=False`` drops the rate term (for ablations).
    """
    if not beta >= 0:
        raise ValueError(f"beta must be non-negative, got {beta}")
    if (probs is None) == (logits is None):
        raise ValueError("pass exactly one of probs / logits")
    if means.shape[0] != y_hat.shape[0]:
        raise ShapeError(f"batch of {means.shape[0]} features but {y_hat.shape[0]} targets")
    y_hat = torch.as_tensor(y_hat, dtype=means.dtype)
    ce = soft_cross_entropy(probs, y_hat) if probs is not None else soft_cross_entropy_logits(logits, y_hat)
    distortion = ce.mean()
    r = mi_upper_bound(means, samples, log_var) if rate else torch.zeros((), dtype=means.dtype)
    return LossBreakdown(r, distortion, r + beta * distortion, beta)
