"""Training loops: fast distillation from a logit store, the teacher-in-loop
ablation arm, the ground-truth baseline, and desk-teacher pretraining.

All three student arms share :func:`_fit`; they differ only in how the soft
target for a batch is produced. The FDM arm has no teacher in scope at all.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from . import __version__
from .channel import SnrRange, sample_snr, stream_generator
from .data import ImageDataset, augment
from .errors import AlignmentError, NumericError, UsageError
from .ib_loss import distillation_loss
from .logit_store import (compress_topk_batch, read_store, smooth_arrays,
                          teacher_probabilities)
from .models import EncoderConfig, Student, TeacherCNN, save_student

log = logging.getLogger(__name__)

LABEL_MODES = ("teacher_soft", "ground_truth")


@dataclass
class DistillConfig:
    beta: float = 65536.0
    top_k: int = 5
    batch_size: int = 128
    epochs: int = 10
    lr: float = 2e-3
    weight_decay: float = 0.05
    warmup_frac: float = 0.05
    min_lr_frac: float = 0.0
    train_snr_db: tuple[float, float] = (-5.0, 15.0)
    snr_per_sample: bool = False
    seed: int = 0
    label_mode: str = "teacher_soft"
    temperature: float = 1.0
    augment: bool = True
    rate_term: bool = True
    stage_widths: tuple[int, int, int, int] = (32, 48, 64, 96)
    heads: int = 2
    decoder_hidden: int = 128
    adaptive_hidden: int = 64
    adaptive: bool = True
    num_classes: int = 10
    input_shape: tuple[int, int, int] = (3, 32, 32)

    def __post_init__(self):
        self.train_snr_db = tuple(float(v) for v in self.train_snr_db)
        self.stage_widths = tuple(int(v) for v in self.stage_widths)
        self.input_shape = tuple(int(v) for v in self.input_shape)
        if self.label_mode not in LABEL_MODES:
            raise UsageError(f"label_mode must be one of {LABEL_MODES}, got {self.label_mode!r}")
        if not 1 <= self.top_k < self.num_classes:
            raise UsageError(f"need 1 <= top_k < num_classes, got {self.top_k}")
        if self.rate_term and self.batch_size < 2:
            raise UsageError("the rate term needs batch_size >= 2")
        for name in ("beta", "batch_size", "epochs", "lr", "temperature"):
            if not getattr(self, name) > 0:
                raise UsageError(f"{name} must be positive")
        SnrRange(*self.train_snr_db)

    @property
    def snr_range(self) -> SnrRange:
        return SnrRange(*self.train_snr_db)

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            input_shape=self.input_shape, stage_widths=self.stage_widths, heads=self.heads,
            decoder_hidden=self.decoder_hidden, adaptive_hidden=self.adaptive_hidden,
            num_classes=self.num_classes, adaptive=self.adaptive,
        )

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def replace(self, **changes) -> "DistillConfig":
        return dataclasses.replace(self, **changes)


# dotted config-file keys -> DistillConfig fields
CONFIG_KEYS = {
    "loss.beta": "beta",
    "loss.rate_term": "rate_term",
    "distill.top_k": "top_k",
    "distill.temperature": "temperature",
    "distill.label_mode": "label_mode",
    "train.batch_size": "batch_size",
    "train.epochs": "epochs",
    "train.lr": "lr",
    "train.weight_decay": "weight_decay",
    "train.warmup_frac": "warmup_frac",
    "train.min_lr_frac": "min_lr_frac",
    "train.seed": "seed",
    "train.augment": "augment",
    "channel.train_snr_db": "train_snr_db",
    "channel.snr_per_sample": "snr_per_sample",
    "model.stage_widths": "stage_widths",
    "model.heads": "heads",
    "model.decoder_hidden": "decoder_hidden",
    "model.adaptive_hidden": "adaptive_hidden",
    "model.adaptive": "adaptive",
    "model.num_classes": "num_classes",
    "model.input_shape": "input_shape",
}
# accepted but fixed in this implementation
PASSIVE_KEYS = {"channel.kind": "awgn"}


def parse_config_text(text: str) -> dict:
    """``key = value`` lines; values are JSON where possible, else bare strings."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            out[key] = json.loads(value)
        except json.JSONDecodeError:
            out[key] = value
    return out


def config_from_mapping(values: dict, base: DistillConfig | None = None) -> DistillConfig:
    kwargs = {}
    for key, value in values.items():
        if key in PASSIVE_KEYS:
            if value != PASSIVE_KEYS[key]:
                raise UsageError(f"{key}={value!r} is not supported (only {PASSIVE_KEYS[key]!r})")
            continue
        field_name = CONFIG_KEYS.get(key, key if key in DistillConfig.__dataclass_fields__ else None)
        if field_name is None:
            raise UsageError(f"unknown config key {key!r}")
        kwargs[field_name] = value
    return dataclasses.replace(base or DistillConfig(), **kwargs)


def load_config(path) -> DistillConfig:
    return config_from_mapping(parse_config_text(Path(path).read_text()))


def dump_config(cfg: DistillConfig) -> str:
    inverse = {v: k for k, v in CONFIG_KEYS.items()}
    d = cfg.to_dict()
    return "".join(f"{inverse[k]} = {json.dumps(d[k])}\n" for k in sorted(d, key=lambda k: inverse[k]))


@dataclass
class TrainRecord:
    step: int
    epoch: int
    rate: float
    distortion: float
    total: float
    beta: float
    snr_db: float
    wall_time: float

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self))


@dataclass
class TrainResult:
    model: Student
    records: list[TrainRecord]
    epoch_times: list[float]
    config: DistillConfig
    arm: str
    extra: dict = field(default_factory=dict)

    @property
    def losses(self) -> list[float]:
        return [r.total for r in self.records]

    @property
    def final_loss(self) -> float:
        """Mean total loss over the last epoch."""
        last = self.records[-1].epoch
        vals = [r.total for r in self.records if r.epoch == last]
        return float(np.mean(vals))

    def write_log(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("".join(r.to_json() + "\n" for r in self.records))
        return path

    def save(self, out_dir) -> Path:
        out_dir = Path(out_dir)
        ckpt = save_student(out_dir / "student.pt", self.model, {
            "train_config": self.config.to_dict(), "train_config_hash": self.config.digest(),
            "arm": self.arm, "code_version": __version__,
        })
        self.write_log(out_dir / "train_log.jsonl")
        return ckpt


def build_student(cfg: DistillConfig) -> Student:
    torch.manual_seed(cfg.seed)
    return Student(cfg.encoder_config())


def cosine_schedule(total_steps: int, warmup_frac: float, min_lr_frac: float):
    warmup = max(1, int(round(warmup_frac * total_steps))) if warmup_frac > 0 else 0

    def factor(step):
        if step < warmup:
            return (step + 1) / warmup
        progress = (step - warmup) / max(1, total_steps - warmup)
        return min_lr_frac + (1 - min_lr_frac) * 0.5 * (1 + math.cos(math.pi * min(progress, 1.0)))

    return factor


TargetFn = Callable[[np.ndarray, torch.Tensor, np.ndarray], torch.Tensor]


def _fit(cfg: DistillConfig, dataset: ImageDataset, targets: TargetFn, arm: str,
         model: Student | None = None, max_steps: int | None = None,
         on_record: Callable[[TrainRecord], None] | None = None) -> TrainResult:
    if len(dataset) < 2:
        raise ValueError("need at least two training samples")
    if model is None:
        model = build_student(cfg)
    dtype = next(model.parameters()).dtype
    images = torch.from_numpy(dataset.images).to(dtype)
    n = len(dataset)
    bs = min(cfg.batch_size, n)
    steps_per_epoch = n // bs
    total = cfg.epochs * steps_per_epoch if max_steps is None else min(max_steps, cfg.epochs * steps_per_epoch)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, cosine_schedule(total, cfg.warmup_frac, cfg.min_lr_frac))
    shuffle_rng = torch.Generator().manual_seed(cfg.seed)
    records: list[TrainRecord] = []
    epoch_times: list[float] = []
    step = 0
    t_start = time.perf_counter()
    model.train()
    for epoch in range(cfg.epochs):
        t_epoch = time.perf_counter()
        perm = torch.randperm(n, generator=shuffle_rng).numpy()
        for b in range(steps_per_epoch):
            if step >= total:
                break
            idx = perm[b * bs:(b + 1) * bs]
            batch_rng = stream_generator(cfg.seed, step)
            raw = images[idx]
            y_hat = targets(idx, raw, dataset.sample_ids[idx]).to(dtype)
            xb = augment(raw, batch_rng) if cfg.augment else raw
            if cfg.snr_per_sample:
                lo, hi = cfg.train_snr_db
                snr = lo + (hi - lo) * torch.rand(len(idx), generator=batch_rng, dtype=dtype)
                snr_log = float(snr.mean())
            else:
                snr = sample_snr(cfg.snr_range, batch_rng)
                snr_log = snr
            out = model(xb, snr, rng=batch_rng, stochastic=True)
            loss = distillation_loss(out.mean, out.sample, model.log_var, y_hat, cfg.beta,
                                     logits=out.logits, rate=cfg.rate_term)
            rec = TrainRecord(step, epoch, *(loss.as_dict()[k] for k in ("rate", "distortion", "total", "beta")),
                              snr_db=snr_log, wall_time=time.perf_counter() - t_start)
            if not math.isfinite(rec.total):
                raise NumericError(f"non-finite loss at step {step}: {rec.to_json()}")
            opt.zero_grad(set_to_none=True)
            loss.total.backward()
            opt.step()
            sched.step()
            records.append(rec)
            if on_record is not None:
                on_record(rec)
            step += 1
        epoch_times.append(time.perf_counter() - t_epoch)
        if step >= total:
            break
    model.eval()
    return TrainResult(model, records, epoch_times, cfg, arm)


class StoreTargets:
    """Soft targets read from a logit store and smoothed on the fly."""

    def __init__(self, store_path, dataset: ImageDataset, num_classes: int):
        header, reader = read_store(store_path)
        if header.class_count != num_classes:
            raise AlignmentError(f"store has C={header.class_count}, model expects {num_classes}")
        rec = np.array(reader.arrays())
        order = np.argsort(rec["sample_id"], kind="stable")
        ids = rec["sample_id"][order]
        pos = np.searchsorted(ids, dataset.sample_ids)
        pos = np.minimum(pos, len(ids) - 1) if len(ids) else pos
        if len(ids) == 0 or not np.array_equal(ids[pos], dataset.sample_ids):
            missing = int((~np.isin(dataset.sample_ids, ids)).sum())
            raise AlignmentError(
                f"{missing} of {len(dataset)} dataset samples have no record in {store_path}; "
                "re-run extract-logits on this dataset")
        rows = rec[order][pos]
        self.indices = rows["indices"]
        self.values = rows["values"]
        self.class_count = header.class_count

    def __call__(self, idx, raw, sample_ids):
        return torch.from_numpy(smooth_arrays(self.indices[idx], self.values[idx], self.class_count))


class TeacherTargets:
    """Teacher run on every batch, then compressed and smoothed exactly as the store is."""

    def __init__(self, teacher, k: int, temperature: float, num_classes: int):
        self.teacher = teacher
        self.k = k
        self.temperature = temperature
        self.class_count = num_classes

    def __call__(self, idx, raw, sample_ids):
        with torch.no_grad():
            scores = self.teacher(raw.float())
        probs = teacher_probabilities(scores.numpy(), self.temperature)
        indices, values = compress_topk_batch(probs, self.k)
        return torch.from_numpy(smooth_arrays(indices, values, self.class_count))


class OneHotTargets:
    def __init__(self, dataset: ImageDataset, num_classes: int):
        self.labels = torch.from_numpy(dataset.labels)
        self.num_classes = num_classes

    def __call__(self, idx, raw, sample_ids):
        return F.one_hot(self.labels[idx], self.num_classes).double()


def train_distill(cfg: DistillConfig, store_path, dataset: ImageDataset, model: Student | None = None,
                  **kw) -> TrainResult:
    """Fast distillation: targets come from the pre-stored compressed teacher outputs."""
    if cfg.label_mode != "teacher_soft":
        raise UsageError("train_distill expects label_mode='teacher_soft'")
    if store_path is None or not Path(store_path).exists():
        raise AlignmentError(f"logit store {store_path!r} not found; run extract-logits first")
    return _fit(cfg, dataset, StoreTargets(store_path, dataset, cfg.num_classes), "fdm", model, **kw)


def train_with_teacher_in_loop(cfg: DistillConfig, teacher, dataset: ImageDataset,
                               model: Student | None = None, **kw) -> TrainResult:
    """Ablation arm: same objective, teacher evaluated on every batch."""
    targets = TeacherTargets(teacher, cfg.top_k, cfg.temperature, cfg.num_classes)
    return _fit(cfg, dataset, targets, "teacher_in_loop", model, **kw)


def train_e2e_baseline(cfg: DistillConfig, dataset: ImageDataset, model: Student | None = None,
                       **kw) -> TrainResult:
    """No distillation: one-hot ground-truth labels, rate term unchanged."""
    cfg = cfg.replace(label_mode="ground_truth")
    return _fit(cfg, dataset, OneHotTargets(dataset, cfg.num_classes), "baseline", model, **kw)


def train_teacher(dataset: ImageDataset, widths=(64, 128, 256), epochs: int = 6, lr: float = 3e-3,
                  batch_size: int = 128, seed: int = 0, num_classes: int | None = None,
                  log_every: int = 0) -> TeacherCNN:
    """Fit the desk teacher with plain cross-entropy on clean images."""
    num_classes = num_classes or dataset.num_classes
    batch_size = min(batch_size, len(dataset))
    torch.manual_seed(seed)
    model = TeacherCNN(in_ch=dataset.images.shape[1], widths=widths, num_classes=num_classes)
    x = torch.from_numpy(dataset.images)
    y = torch.from_numpy(dataset.labels)
    steps = epochs * (len(dataset) // batch_size)
    opt = torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=5e-4)
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, lr, total_steps=steps)
    g = torch.Generator().manual_seed(seed)
    model.train()
    for epoch in range(epochs):
        perm = torch.randperm(len(dataset), generator=g)
        for b in range(len(dataset) // batch_size):
            idx = perm[b * batch_size:(b + 1) * batch_size]
            loss = F.cross_entropy(model(augment(x[idx], g)), y[idx])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sched.step()
        if log_every and (epoch + 1) % log_every == 0:
            log.info("teacher epoch %d loss %.4f", epoch, loss.item())
    return model.eval()


def teacher_accuracy(teacher, dataset: ImageDataset, batch_size: int = 500) -> float:
    correct = 0
    with torch.no_grad():
        for s in range(0, len(dataset), batch_size):
            pred = teacher(torch.from_numpy(dataset.images[s:s + batch_size])).argmax(-1).numpy()
            correct += int((pred == dataset.labels[s:s + batch_size]).sum())
    return correct / len(dataset)
