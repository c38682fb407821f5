"""Lightweight student codec and a desk-scale teacher.

The student is encoder -> channel-adaptive weighting -> power normalization ->
channel -> decoder. The encoder is a two-convolution patch embedding followed
by four attention stages; the decoder pools the received feature and applies
two dense layers.
"""

from __future__ import annotations

import hashlib
import json
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from . import channel as ch
from .errors import ShapeError, StorageIOError


@dataclass(frozen=True)
class EncoderConfig:
    input_shape: tuple[int, int, int] = (3, 32, 32)
    stage_widths: tuple[int, int, int, int] = (32, 48, 64, 96)
    heads: int = 2
    mlp_ratio: float = 2.0
    decoder_hidden: int = 128
    adaptive_hidden: int = 64
    num_classes: int = 10
    adaptive: bool = True
    log_var_init: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        object.__setattr__(self, "stage_widths", tuple(self.stage_widths))
        if len(self.stage_widths) != 4:
            raise ValueError(f"exactly 4 stage widths required, got {self.stage_widths}")
        if any(w % self.heads for w in self.stage_widths):
            raise ValueError(f"stage widths {self.stage_widths} not divisible by {self.heads} heads")

    @property
    def feature_shape(self) -> tuple[int, int, int]:
        _, h, w = self.input_shape
        # two stride-2 / kernel-3 / padding-1 convolutions
        for _ in range(2):
            h, w = (h - 1) // 2 + 1, (w - 1) // 2 + 1
        return (self.stage_widths[-1], h, w)

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


class PatchEmbed(nn.Module):
    def __init__(self, in_ch: int, width: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, width // 2, kernel_size=3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(width // 2, width, kernel_size=3, stride=2, padding=1)

    def forward(self, x):
        return self.conv2(F.gelu(self.conv1(x)))


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, n, d = x.shape
        q, k, v = self.qkv(x).view(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        attn = (q @ k.transpose(-2, -1)) * (d // self.heads) ** -0.5
        out = attn.softmax(dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(b, n, d))


class Block(nn.Module):
    """Pre-norm transformer block over the spatial tokens."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class Stage(nn.Module):
    def __init__(self, in_dim: int, dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        self.proj = nn.Linear(in_dim, dim) if in_dim != dim else nn.Identity()
        self.block = Block(dim, heads, mlp_ratio)

    def forward(self, x):
        return self.block(self.proj(x))


class Encoder(nn.Module):
    """Image -> raw semantic feature ``(C_f, H/4, W/4)``."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        c_in = cfg.input_shape[0]
        widths = cfg.stage_widths
        _, h, w = cfg.feature_shape
        self.patch_embed = PatchEmbed(c_in, widths[0])
        self.pos_embed = nn.Parameter(torch.zeros(1, h * w, widths[0]))
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        dims = (widths[0],) + widths
        self.stages = nn.ModuleList(
            Stage(dims[i], dims[i + 1], cfg.heads, cfg.mlp_ratio) for i in range(4)
        )
        self.norm = nn.LayerNorm(widths[-1])

    def forward(self, img):
        if tuple(img.shape[1:]) != self.cfg.input_shape:
            raise ShapeError(f"expected input (B, {self.cfg.input_shape}), got {tuple(img.shape)}")
        x = self.patch_embed(img)
        b, _, h, w = x.shape
        x = x.flatten(2).transpose(1, 2) + self.pos_embed
        for stage in self.stages:
            x = stage(x)
        x = self.norm(x)
        return x.transpose(1, 2).reshape(b, -1, h, w)


class ChannelAdaptive(nn.Module):
    """Pooled feature + SNR -> per-channel weights in (0, 1)."""

    SNR_SCALE = 20.0

    def __init__(self, channels: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(channels + 1, hidden)
        self.fc2 = nn.Linear(hidden, channels)

    def forward(self, x0, snr_db):
        pooled = x0.mean(dim=(2, 3))
        snr = torch.as_tensor(snr_db, dtype=x0.dtype).expand(x0.shape[0]).reshape(-1, 1)
        z = torch.cat([pooled, snr / self.SNR_SCALE], dim=1)
        return torch.sigmoid(self.fc2(F.relu(self.fc1(z))))


def apply_weights(x0: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    """Channel-wise product of ``(B, C, H, W)`` features with ``(B, C)`` weights."""
    if x0.dim() == 3:
        return apply_weights(x0.unsqueeze(0), w.reshape(1, -1)).squeeze(0)
    if w.shape != x0.shape[:2]:
        raise ShapeError(f"weights {tuple(w.shape)} do not match feature channels {tuple(x0.shape[:2])}")
    return x0 * w[:, :, None, None]


class Decoder(nn.Module):
    """Received feature -> class probabilities (global pool, two dense layers)."""

    def __init__(self, channels: int, hidden: int, num_classes: int, feature_shape=None):
        super().__init__()
        self.feature_shape = feature_shape
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, num_classes)

    def logits(self, xp):
        if self.feature_shape is not None and tuple(xp.shape[1:]) != tuple(self.feature_shape):
            raise ShapeError(f"expected feature (B, {self.feature_shape}), got {tuple(xp.shape)}")
        return self.fc2(F.gelu(self.fc1(xp.mean(dim=(2, 3)))))

    def forward(self, xp):
        return self.logits(xp).softmax(dim=-1)


@dataclass
class ForwardOutput:
    probs: torch.Tensor
    logits: torch.Tensor
    x0: torch.Tensor
    w: torch.Tensor
    x: torch.Tensor
    transmitted: torch.Tensor
    received: torch.Tensor
    sample: torch.Tensor = None
    mean: torch.Tensor = None
    extras: dict = field(default_factory=dict)


class Student(nn.Module):
    """Encoder, channel-adaptive module, decoder and the encoder noise scale.

    ``log_var`` is the log-variance of the Gaussian used by the rate term. It
    is centred on the power-normalized weighted feature so that shrinking the
    feature scale cannot lower the rate. Training draws the transmitted
    feature from it, evaluation transmits the mean.
    """

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        c_f = cfg.feature_shape[0]
        self.encoder = Encoder(cfg)
        self.adaptive = ChannelAdaptive(c_f, cfg.adaptive_hidden) if cfg.adaptive else None
        self.decoder = Decoder(c_f, cfg.decoder_hidden, cfg.num_classes, cfg.feature_shape)
        self.log_var = nn.Parameter(torch.tensor(float(cfg.log_var_init)))

    def encode(self, img):
        return self.encoder(img)

    def adapt_weights(self, x0, snr_db):
        if self.adaptive is None:
            return torch.ones(x0.shape[:2], dtype=x0.dtype)
        return self.adaptive(x0, snr_db)

    def forward(
        self,
        img: torch.Tensor,
        snr_db,
        rng: torch.Generator | None = None,
        sample_noise: torch.Tensor | None = None,
        channel_noise: torch.Tensor | None = None,
        stochastic: bool = False,
        bypass_channel: bool = False,
    ) -> ForwardOutput:
        """Full transmit/receive chain.

        With ``stochastic`` the normalized feature ``m`` is replaced by a draw
        ``m + exp(log_var / 2) * eps``, renormalized before transmission. Noise tensors
        passed explicitly take precedence over ``rng``.
        """
        x0 = self.encode(img)
        w = self.adapt_weights(x0, snr_db)
        x = apply_weights(x0, w)
        mean = ch.normalize_power(x)
        sample = None
        if stochastic:
            if sample_noise is None:
                sample_noise = torch.randn(x.shape, generator=rng, dtype=x.dtype)
            sample = mean + torch.exp(0.5 * self.log_var) * sample_noise
            tx = ch.normalize_power(sample)
        else:
            tx = mean
        rx = tx if bypass_channel else ch.apply_awgn(tx, snr_db, rng=rng, noise=channel_noise)
        logits = self.decoder.logits(rx)
        return ForwardOutput(logits.softmax(dim=-1), logits, x0, w, x, tx, rx, sample, mean)


class TeacherCNN(nn.Module):
    """Plain VGG-style classifier standing in for the large pretrained model."""

    def __init__(self, in_ch: int = 3, widths=(64, 128, 256), num_classes: int = 10, hidden: int = 256):
        super().__init__()
        layers, c = [], in_ch
        for wdt in widths:
            layers += [
                nn.Conv2d(c, wdt, 3, padding=1), nn.BatchNorm2d(wdt), nn.ReLU(inplace=True),
                nn.Conv2d(wdt, wdt, 3, padding=1), nn.BatchNorm2d(wdt), nn.ReLU(inplace=True),
                nn.MaxPool2d(2),
            ]
            c = wdt
        self.features = nn.Sequential(*layers)
        self.head = nn.Sequential(nn.Flatten(), nn.Linear(c, hidden), nn.ReLU(inplace=True),
                                  nn.Linear(hidden, num_classes))
        self.widths = tuple(widths)
        self.num_classes = num_classes
        self.hidden = hidden

    def forward(self, x):
        x = self.features(x)
        return self.head(x.mean(dim=(2, 3)))


def count_params(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def dense_layer_params(widths) -> int:
    """Parameters of a stack of dense layers ``widths[0] -> widths[1] -> ...``."""
    return sum(a * b + b for a, b in zip(widths[:-1], widths[1:]))


def measure_latency(fn, batch, repetitions: int = 20, warmup: int = 3) -> float:
    """Median wall time per image (ms) of ``fn(batch)``."""
    with torch.no_grad():
        for _ in range(warmup):
            fn(batch)
        times = []
        for _ in range(repetitions):
            t0 = time.perf_counter()
            fn(batch)
            times.append(time.perf_counter() - t0)
    return 1e3 * statistics.median(times) / len(batch)


def model_bytes(module: nn.Module) -> int:
    return sum(t.numel() * t.element_size() for t in module.state_dict().values())


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(path, model: nn.Module, manifest: dict) -> Path:
    """Single file: ``{"manifest": ..., "state_dict": ...}``."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save({"manifest": manifest, "state_dict": model.state_dict()}, path)
    except OSError as exc:
        raise StorageIOError(f"saving checkpoint {path}: {exc}") from exc
    return path


def load_checkpoint(path):
    try:
        blob = torch.load(Path(path), map_location="cpu", weights_only=False)
    except OSError as exc:
        raise StorageIOError(f"loading checkpoint {path}: {exc}") from exc
    return blob["manifest"], blob["state_dict"]


def save_student(path, model: Student, extra: dict | None = None) -> Path:
    manifest = {"kind": "student", "encoder_config": model.cfg.to_dict(),
                "config_hash": model.cfg.digest(), **(extra or {})}
    return save_checkpoint(path, model, manifest)


def load_student(path) -> tuple[Student, dict]:
    manifest, state = load_checkpoint(path)
    if manifest.get("kind") != "student":
        raise ValueError(f"{path} is not a student checkpoint")
    model = Student(EncoderConfig(**manifest["encoder_config"]))
    model.load_state_dict(state)
    return model.to(next(iter(state.values())).dtype).eval(), manifest


def save_teacher(path, model: TeacherCNN, extra: dict | None = None) -> Path:
    manifest = {"kind": "teacher", "widths": list(model.widths), "num_classes": model.num_classes,
                "hidden": model.hidden, **(extra or {})}
    return save_checkpoint(path, model, manifest)


def load_teacher(path) -> tuple[TeacherCNN, dict]:
    manifest, state = load_checkpoint(path)
    if manifest.get("kind") != "teacher":
        raise ValueError(f"{path} is not a teacher checkpoint")
    model = TeacherCNN(widths=manifest["widths"], num_classes=manifest["num_classes"],
                       hidden=manifest["hidden"])
    model.load_state_dict(state)
    return model.eval(), manifest
