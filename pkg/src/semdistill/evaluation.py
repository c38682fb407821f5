"""Result surfaces: accuracy vs SNR, accuracy vs training-set size, model
complexity, and the pre-stored-logits ablation."""

from __future__ import annotations

import csv
import math
import time
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .channel import stream_generator
from .data import ImageDataset
from .errors import StorageIOError
from .logit_store import extract_teacher_logits
from .models import Student, count_params, measure_latency, model_bytes
from .training import (DistillConfig, TrainResult, train_distill, train_e2e_baseline,
                       train_with_teacher_in_loop)

DEFAULT_SNR_GRID = (-4.0, 0.0, 4.0, 8.0, 12.0)
DEFAULT_SEEDS = (0, 1, 2)
CSV_FIELDS = ("scheme", "snr_db", "seed", "top1", "n")


def binomial_halfwidth(acc: float, n: int) -> float:
    return 1.96 * math.sqrt(acc * (1 - acc) / n)


@dataclass(frozen=True)
class EvalRow:
    scheme: str
    snr_db: float
    seed: int
    top1: float
    n: int


@dataclass(frozen=True)
class GridPoint:
    snr_db: float
    top1: float
    n: int
    halfwidth: float


@dataclass
class EvalReport:
    scheme: str
    rows: list[EvalRow] = field(default_factory=list)

    @property
    def seeds(self) -> list[int]:
        return sorted({r.seed for r in self.rows})

    @property
    def grid(self) -> list[GridPoint]:
        """Per-SNR accuracy pooled over seeds, ascending in SNR."""
        by_snr = defaultdict(list)
        for r in self.rows:
            by_snr[r.snr_db].append(r)
        out = []
        for snr in sorted(by_snr):
            rs = by_snr[snr]
            n = sum(r.n for r in rs)
            acc = sum(r.top1 * r.n for r in rs) / n
            out.append(GridPoint(snr, acc, n, binomial_halfwidth(acc, n)))
        return out

    def accuracy_at(self, snr_db: float) -> float:
        for g in self.grid:
            if g.snr_db == snr_db:
                return g.top1
        raise KeyError(snr_db)

    @property
    def mean_top1(self) -> float:
        """Mean over the SNR grid."""
        return float(np.mean([g.top1 for g in self.grid]))


def _snr_key(snr_db: float) -> int:
    return int(round((snr_db + 1000.0) * 1000))


def predict(model: Student, images: np.ndarray, snr_db: float, seed: int,
            batch_size: int = 500) -> np.ndarray:
    """Predicted classes for ``images`` sent through the channel at ``snr_db``.

    Channel noise for batch ``b`` comes from the stream ``(seed, snr, b)``.
    """
    dtype = next(model.parameters()).dtype
    preds = []
    model.eval()
    with torch.no_grad():
        for b, s in enumerate(range(0, len(images), batch_size)):
            x = torch.from_numpy(images[s:s + batch_size]).to(dtype)
            out = model(x, float(snr_db), rng=stream_generator(seed, _snr_key(snr_db), b))
            preds.append(out.probs.argmax(-1).numpy())
    return np.concatenate(preds)


def eval_accuracy_vs_snr(model: Student, dataset: ImageDataset, snr_grid=DEFAULT_SNR_GRID,
                         seeds=DEFAULT_SEEDS, scheme: str = "student") -> EvalReport:
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty split")
    if len(snr_grid) == 0:
        raise ValueError("empty SNR grid")
    report = EvalReport(scheme)
    for snr in sorted(float(s) for s in snr_grid):
        for seed in seeds:
            pred = predict(model, dataset.images, snr, seed)
            acc = float((pred == dataset.labels).mean())
            report.rows.append(EvalRow(scheme, snr, int(seed), acc, len(dataset)))
    return report


# -- accuracy vs training-set size ------------------------------------------

@dataclass(frozen=True)
class SizeRow:
    size: int
    arm: str
    snr_db: float
    seed: int
    top1: float
    n: int


@dataclass
class SizeReport:
    rows: list[SizeRow] = field(default_factory=list)

    def mean_top1(self, size: int, arm: str) -> float:
        """Mean over seeds and the SNR grid at one (size, arm)."""
        vals = [r.top1 for r in self.rows if r.size == size and r.arm == arm]
        return float(np.mean(vals))

    @property
    def sizes(self) -> list[int]:
        return sorted({r.size for r in self.rows})


def eval_vs_training_size(cfg: DistillConfig, fractions, train: ImageDataset, test: ImageDataset,
                          store_path, snr_grid=DEFAULT_SNR_GRID, seeds=DEFAULT_SEEDS,
                          arms=("distilled", "baseline"), eval_seeds=(0,),
                          equal_steps: bool = True) -> SizeReport:
    """Fresh model per (size, arm, seed) on nested head-subsets of ``train``.

    With ``equal_steps`` a subset holding a fraction ``f`` of the data trains
    for ``epochs / f`` epochs, so every size gets the same optimizer budget
    and the full-size run is the standard run.
    """
    for frac in fractions:
        if not 0 < frac <= 1:
            raise ValueError(f"fractions must lie in (0, 1], got {frac}")
    report = SizeReport()
    for frac in sorted(fractions):
        subset = train.fraction(frac)
        epochs = max(1, round(cfg.epochs * len(train) / len(subset))) if equal_steps else cfg.epochs
        for arm in arms:
            for seed in seeds:
                run_cfg = cfg.replace(seed=int(seed), epochs=epochs)
                if arm == "distilled":
                    res = train_distill(run_cfg, store_path, subset)
                else:
                    res = train_e2e_baseline(run_cfg, subset)
                ev = eval_accuracy_vs_snr(res.model, test, snr_grid, eval_seeds, scheme=arm)
                for g in ev.grid:
                    report.rows.append(SizeRow(len(subset), arm, g.snr_db, int(seed), g.top1, g.n))
    return report


# -- complexity ---------------------------------------------------------------

@dataclass(frozen=True)
class ComplexityRow:
    model: str
    size_bytes: int
    parameters: int
    latency_ms: float


def complexity_table(models: dict, input_shape=(3, 32, 32), batch: int = 64,
                     repetitions: int = 10) -> list[ComplexityRow]:
    x = torch.randn(batch, *input_shape, generator=torch.Generator().manual_seed(0))
    rows = []
    for name, m in models.items():
        m.eval()
        fn = (lambda b, m=m: m(b, 0.0, rng=torch.Generator().manual_seed(0))) if isinstance(m, Student) else m
        rows.append(ComplexityRow(name, model_bytes(m), count_params(m), measure_latency(fn, x, repetitions)))
    return rows


# -- pre-stored logits ablation --------------------------------------------------

ABLATION_NOTE = (
    "Storage ratio compares the compressed logit payload with dense float32 logits. "
    "A whole-system ratio that also counts image data and teacher weights is a different "
    "quantity and is not comparable."
)


@dataclass
class AblationReport:
    class_count: int
    top_k: int
    records: int
    store_bytes: int
    payload_bytes: int
    dense_logit_bytes: int
    teacher_bytes: int
    image_bytes: int
    time_with: float
    time_without: float
    final_loss_with: float = float("nan")
    final_loss_without: float = float("nan")
    note: str = ABLATION_NOTE

    @property
    def storage_ratio(self) -> float:
        """Dense float32 logits over compressed payload."""
        return self.dense_logit_bytes / self.payload_bytes

    @property
    def system_storage_with(self) -> int:
        return self.image_bytes + self.store_bytes

    @property
    def system_storage_without(self) -> int:
        return self.image_bytes + self.teacher_bytes

    @property
    def time_ratio(self) -> float:
        return self.time_without / self.time_with

    def to_table(self) -> list[dict]:
        return [
            {"method": "with FDM", "storage_bytes": self.store_bytes,
             "training_time_s": self.time_with},
            {"method": "without FDM", "storage_bytes": self.dense_logit_bytes,
             "storage_ratio": self.storage_ratio, "training_time_s": self.time_without,
             "time_ratio": self.time_ratio},
        ]


def storage_measurement(teacher, images: np.ndarray, sample_ids, k: int, path,
                        temperature: float = 1.0) -> dict:
    summary = extract_teacher_logits(teacher, images, sample_ids, k, temperature, path)
    return {"class_count": summary.class_count, "records": summary.count,
            "store_bytes": summary.bytes, "payload_bytes": summary.payload_bytes,
            "dense_logit_bytes": summary.dense_bytes, "extract_time": summary.wall_time}


def ablation_fdm(dataset: ImageDataset, teacher, cfg: DistillConfig, store_path,
                 storage: dict | None = None) -> tuple[AblationReport, TrainResult, TrainResult]:
    """Train both arms on ``dataset`` and compare storage and epoch wall time.

    ``storage`` may carry a separate storage measurement (e.g. at a larger
    class count); otherwise the desk store at ``store_path`` is measured.
    """
    if not Path(store_path).exists():
        extract_teacher_logits(teacher, dataset.images, dataset.sample_ids, cfg.top_k,
                               cfg.temperature, store_path)
    with_fdm = train_distill(cfg, store_path, dataset)
    without = train_with_teacher_in_loop(cfg, teacher, dataset)
    if storage is None:
        size = Path(store_path).stat().st_size
        from .logit_store import read_store  # local: only needed here
        header, _ = read_store(store_path)
        storage = {"class_count": header.class_count, "records": header.record_count,
                   "store_bytes": size, "payload_bytes": header.record_count * header.record_size,
                   "dense_logit_bytes": header.record_count * 4 * header.class_count}
    report = AblationReport(
        class_count=storage["class_count"], top_k=cfg.top_k, records=storage["records"],
        store_bytes=storage["store_bytes"], payload_bytes=storage["payload_bytes"],
        dense_logit_bytes=storage["dense_logit_bytes"], teacher_bytes=model_bytes(teacher),
        image_bytes=int(dataset.images.nbytes),
        time_with=float(np.mean(with_fdm.epoch_times)), time_without=float(np.mean(without.epoch_times)),
        final_loss_with=with_fdm.final_loss, final_loss_without=without.final_loss,
    )
    return report, with_fdm, without


# -- report files ----------------------------------------------------------------

def write_eval_csv(reports, path) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_FIELDS)
            for rep in reports:
                for r in rep.rows:
                    w.writerow([r.scheme, repr(r.snr_db), r.seed, repr(r.top1), r.n])
    except OSError as exc:
        raise StorageIOError(f"writing {path}: {exc}") from exc
    return path


def read_eval_csv(path) -> list[EvalReport]:
    reports: dict[str, EvalReport] = {}
    try:
        with open(path, newline="") as fh:
            for rec in csv.DictReader(fh):
                row = EvalRow(rec["scheme"], float(rec["snr_db"]), int(rec["seed"]),
                              float(rec["top1"]), int(rec["n"]))
                reports.setdefault(row.scheme, EvalReport(row.scheme)).rows.append(row)
    except OSError as exc:
        raise StorageIOError(f"reading {path}: {exc}") from exc
    return list(reports.values())


def plot_accuracy_vs_snr(reports, path) -> int:
    """One line per scheme; returns the number of series drawn."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    n = 0
    for rep in reports:
        g = rep.grid
        if not g:
            continue
        ax.errorbar([p.snr_db for p in g], [p.top1 for p in g], yerr=[p.halfwidth for p in g],
                    marker="o", capsize=2, label=rep.scheme)
        n += 1
    ax.set_xlabel("SNR (dB)")
    ax.set_ylabel("top-1 accuracy")
    if n:
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return n


def plot_accuracy_vs_size(report: SizeReport, path) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    arms = sorted({r.arm for r in report.rows})
    for arm in arms:
        sizes = report.sizes
        ax.plot(sizes, [report.mean_top1(s, arm) for s in sizes], marker="o", label=arm)
    ax.set_xlabel("training samples")
    ax.set_ylabel("mean top-1 over SNR grid")
    ax.set_xscale("log")
    if arms:
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return len(arms)


def write_size_csv(report: SizeReport, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("size", "arm", "snr_db", "seed", "top1", "n"))
        for r in report.rows:
            w.writerow([r.size, r.arm, repr(r.snr_db), r.seed, repr(r.top1), r.n])
    return path


def write_ablation_csv(report: AblationReport, path) -> Path:
    path = Path(path)
    fields = ("method", "storage_bytes", "storage_ratio", "training_time_s", "time_ratio")
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for row in report.to_table():
            w.writerow(row)
    return path


def emit_report(reports, out_dir, size_report: SizeReport | None = None,
                ablation: AblationReport | None = None) -> dict:
    """Write CSV tables and figure analogs into ``out_dir``; returns the paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"accuracy_vs_snr_csv": write_eval_csv(reports, out_dir / "accuracy_vs_snr.csv")}
    png = out_dir / "accuracy_vs_snr.png"
    plot_accuracy_vs_snr(reports, png)
    paths["accuracy_vs_snr_png"] = png
    if size_report is not None:
        paths["accuracy_vs_size_csv"] = write_size_csv(size_report, out_dir / "accuracy_vs_size.csv")
        png = out_dir / "accuracy_vs_size.png"
        plot_accuracy_vs_size(size_report, png)
        paths["accuracy_vs_size_png"] = png
    if ablation is not None:
        paths["ablation_csv"] = write_ablation_csv(ablation, out_dir / "ablation.csv")
        note = out_dir / "ablation_note.txt"
        note.write_text(ablation.note + "\n")
        paths["ablation_note"] = note
    return paths


def timed(fn, *args, **kwargs):
    t0 = time.perf_counter()
    out = fn(*args, **kwargs)
    return out, time.perf_counter() - t0
