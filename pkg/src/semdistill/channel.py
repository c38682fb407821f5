"""Noisy link simulation: SNR bookkeeping, power normalization and AWGN.

Features are real tensors, so the channel is the real-valued equivalent of the
complex baseband model: every real element receives independent Gaussian noise
of variance ``sigma^2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

CHANNEL_KINDS = ("awgn", "scalar_gain")


def snr_to_noise_variance(snr_db: float, signal_power: float = 1.0) -> float:
    if not signal_power > 0:
        raise ValueError(f"signal_power must be positive, got {signal_power}")
    return signal_power * 10.0 ** (-snr_db / 10.0)


@dataclass(frozen=True)
class ChannelState:
    snr_db: float
    signal_power: float = 1.0
    gain: float = 1.0
    kind: str = "awgn"

    def __post_init__(self):
        if self.kind not in CHANNEL_KINDS:
            raise ValueError(f"unknown channel kind {self.kind!r}")
        if self.kind == "awgn" and self.gain != 1.0:
            raise ValueError("an AWGN channel has unit gain")
        if not self.gain > 0:
            raise ValueError(f"gain must be positive, got {self.gain}")
        # validates signal_power as a side effect
        snr_to_noise_variance(self.snr_db, self.signal_power)

    @property
    def noise_variance(self) -> float:
        return snr_to_noise_variance(self.snr_db, self.signal_power)


@dataclass(frozen=True)
class SnrRange:
    low_db: float
    high_db: float

    def __post_init__(self):
        if self.low_db > self.high_db:
            raise ValueError(f"empty SNR range [{self.low_db}, {self.high_db}]")


def sample_snr(snr_range: SnrRange, rng: torch.Generator) -> float:
    """Draw one SNR (dB) uniformly from ``snr_range``."""
    u = torch.rand((), generator=rng, dtype=torch.float64).item()
    return snr_range.low_db + (snr_range.high_db - snr_range.low_db) * u


def normalize_power(x: torch.Tensor, eps: float = 0.0) -> torch.Tensor:
    """Scale each sample of ``x`` to unit mean squared element.

    ``x`` is ``(C, H, W)`` for a single feature or ``(B, C, H, W)`` for a
    batch; batches are normalized per sample.
    """
    if x.dim() == 3:
        return normalize_power(x.unsqueeze(0), eps).squeeze(0)
    power = x.pow(2).flatten(1).mean(dim=1)
    if bool((power <= 0).any()):
        raise ValueError("cannot power-normalize an all-zero feature")
    scale = torch.rsqrt(power + eps)
    return x * scale.view(-1, *([1] * (x.dim() - 1)))


def _noise_std(state: ChannelState | torch.Tensor | float, x: torch.Tensor) -> torch.Tensor:
    if isinstance(state, ChannelState):
        return torch.tensor(math.sqrt(state.noise_variance), dtype=x.dtype)
    # per-sample SNRs in dB, unit signal power
    snr = torch.as_tensor(state, dtype=x.dtype)
    std = torch.pow(10.0, -snr / 20.0)
    if std.dim() == 1:
        std = std.view(-1, *([1] * (x.dim() - 1)))
    return std


def apply_awgn(
    x: torch.Tensor,
    state: ChannelState | torch.Tensor | float,
    rng: torch.Generator | None = None,
    noise: torch.Tensor | None = None,
) -> torch.Tensor:
    """Return ``gain * x + n`` with ``n ~ N(0, sigma^2)`` elementwise.

    ``state`` may also be an SNR in dB (scalar or one per batch sample), in
    which case unit signal power and unit gain are assumed. Passing ``noise``
    (standard normal, same shape as ``x``) freezes the realization, which is
    how gradient checks hold the channel fixed.
    """
    gain = state.gain if isinstance(state, ChannelState) else 1.0
    if noise is None:
        noise = torch.randn(x.shape, generator=rng, dtype=x.dtype, device=x.device)
    elif noise.shape != x.shape:
        raise ValueError(f"noise shape {tuple(noise.shape)} != feature shape {tuple(x.shape)}")
    return gain * x + _noise_std(state, x) * noise


def measured_snr_db(x: torch.Tensor, received: torch.Tensor, gain: float = 1.0) -> float:
    """Empirical SNR of a realized channel use, in dB."""
    noise = received - gain * x
    return 10.0 * math.log10(x.pow(2).mean().item() / noise.pow(2).mean().item())


def stream_generator(seed: int, *stream: int) -> torch.Generator:
    """Independent torch generator for ``(seed, *stream)``, e.g. a batch index."""
    state = np.random.SeedSequence([seed, *stream]).generate_state(2, dtype=np.uint64)
    g = torch.Generator()
    g.manual_seed(int(state[0] >> np.uint64(1)))
    return g
