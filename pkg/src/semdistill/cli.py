"""``semdistill`` command line.

Subcommands: extract-logits, train, eval, report, ablate, plus the desk
helpers synth-data and train-teacher. Every command writes a run manifest
next to its outputs. Exit codes: 0 ok, 2 usage, 3 data, 4 numeric, 5 I/O.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .data import SynthSpec, load_split, make_splits, save_dataset_dir
from .errors import DataError, SemDistillError, StorageIOError, UsageError
from .evaluation import (DEFAULT_SNR_GRID, ablation_fdm, emit_report, eval_accuracy_vs_snr,
                         read_eval_csv, storage_measurement)
from .logit_store import extract_teacher_logits
from .models import load_student, load_teacher, save_student, save_teacher
from .training import (DistillConfig, config_from_mapping, dump_config, parse_config_text,
                       teacher_accuracy, train_distill, train_e2e_baseline, train_teacher)

log = logging.getLogger("semdistill")

MANIFEST_NAME = "manifest.json"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _utc() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def write_manifest(path: Path, argv, config: dict, seed, outputs: dict, started: str) -> Path:
    blob = json.dumps(config, sort_keys=True).encode()
    manifest = {
        "command_line": list(argv),
        "config": config,
        "config_hash": hashlib.sha256(blob).hexdigest()[:16],
        "seed": seed,
        "code_version": __version__,
        "started": started,
        "finished": _utc(),
        "outputs": {k: str(v) for k, v in outputs.items()},
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"bad number list {text!r}") from exc


def _overrides(pairs) -> dict:
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        out.update(parse_config_text(item))
    return out


def _resolve_config(args) -> tuple[DistillConfig, dict]:
    values = parse_config_text(Path(args.config).read_text()) if getattr(args, "config", None) else {}
    values.update(_overrides(getattr(args, "set", None)))
    # flags double as config keys and win over the file
    for flag, key in (("seed", "train.seed"), ("epochs", "train.epochs"), ("beta", "loss.beta"),
                      ("k", "distill.top_k"), ("label_mode", "distill.label_mode"),
                      ("temperature", "distill.temperature")):
        val = getattr(args, flag, None)
        if val is not None:
            values[key] = val
    extras = {k: values.pop(k) for k in list(values) if k.startswith("data.")}
    return config_from_mapping(values), extras


def _dataset_dir(args, extras, manifest: dict | None = None) -> Path:
    d = getattr(args, "dataset", None) or extras.get("data.dir") or (manifest or {}).get("data_dir")
    if not d:
        raise UsageError("no dataset given: pass --dataset or set data.dir in the config")
    return Path(d)


# -- commands -------------------------------------------------------------------

def cmd_synth_data(args, argv):
    started = _utc()
    spec = SynthSpec(seed=args.seed)
    train, test, teacher = make_splits(args.n_train, args.n_test, args.n_teacher, spec)
    out = save_dataset_dir(args.out, train=train, test=test, teacher=teacher)
    write_manifest(out / MANIFEST_NAME, argv, vars(spec), args.seed,
                   {"dir": out}, started)
    print(f"wrote {len(train)} train / {len(test)} test / {args.n_teacher} teacher samples to {out}")


def cmd_train_teacher(args, argv):
    started = _utc()
    ds = load_split(args.dataset, args.split)
    teacher = train_teacher(ds, widths=tuple(args.widths), epochs=args.epochs, seed=args.seed)
    acc = teacher_accuracy(teacher, load_split(args.dataset, "test"))
    out = Path(args.out)
    save_teacher(out, teacher, {"test_accuracy": acc})
    write_manifest(out.with_name(out.name + ".manifest.json"), argv,
                   {"widths": args.widths, "epochs": args.epochs, "split": args.split}, args.seed,
                   {"checkpoint": out}, started)
    print(f"teacher test accuracy {acc:.4f} -> {out}")


def cmd_extract(args, argv):
    started = _utc()
    ds = load_split(args.dataset, args.split)
    teacher, _ = load_teacher(args.teacher)
    out = Path(args.out)
    s = extract_teacher_logits(teacher, ds.images, ds.sample_ids, args.k, args.temperature, out)
    write_manifest(out.with_name(out.name + ".manifest.json"), argv,
                   {"k": args.k, "temperature": args.temperature, "split": args.split,
                    "dataset": str(args.dataset), "teacher": str(args.teacher)}, None,
                   {"store": out}, started)
    print(json.dumps({"records": s.count, "bytes": s.bytes, "payload_bytes": s.payload_bytes,
                      "dense_bytes": s.dense_bytes, "ratio": s.compression_ratio,
                      "wall_time_s": round(s.wall_time, 3)}))


def cmd_train(args, argv):
    started = _utc()
    cfg, extras = _resolve_config(args)
    data_dir = _dataset_dir(args, extras)
    ds = load_split(data_dir, extras.get("data.split", "train"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    logf = open(out / "train_log.jsonl", "w")
    try:
        on_record = lambda r: (logf.write(r.to_json() + "\n"), logf.flush())
        if cfg.label_mode == "teacher_soft":
            if not args.store:
                raise DataError("label_mode=teacher_soft needs --store; run extract-logits on the "
                                "training split first so every sample_id has a record")
            res = train_distill(cfg, args.store, ds, on_record=on_record)
        else:
            res = train_e2e_baseline(cfg, ds, on_record=on_record)
    finally:
        logf.close()
    res.extra["data_dir"] = str(data_dir)
    ckpt = save_student(out / "student.pt", res.model, {
        "train_config": cfg.to_dict(), "train_config_hash": cfg.digest(), "arm": res.arm,
        "code_version": __version__, "data_dir": str(data_dir),
    })
    (out / "config.txt").write_text(dump_config(cfg))
    write_manifest(out / MANIFEST_NAME, argv, cfg.to_dict(), cfg.seed,
                   {"checkpoint": ckpt, "log": out / "train_log.jsonl"}, started)
    print(f"final loss {res.final_loss:.6g}; checkpoint {ckpt}")


def cmd_eval(args, argv):
    started = _utc()
    model, manifest = load_student(args.ckpt)
    data_dir = _dataset_dir(args, {}, manifest)
    ds = load_split(data_dir, args.split)
    grid = _floats(args.snr_grid)
    seeds = list(range(args.seeds))
    scheme = args.scheme or manifest.get("arm", "student")
    report = eval_accuracy_vs_snr(model, ds, grid, seeds, scheme=scheme)
    out = Path(args.out)
    paths = emit_report([report], out)
    write_manifest(out / MANIFEST_NAME, argv, {"snr_grid": grid, "seeds": seeds, "split": args.split,
                                              "checkpoint": str(args.ckpt)}, seeds, paths, started)
    for g in report.grid:
        print(f"{scheme} snr={g.snr_db:+.1f} dB top1={g.top1:.4f} ±{g.halfwidth:.4f} (n={g.n})")


def cmd_report(args, argv):
    started = _utc()
    src = Path(args.inp)
    csvs = sorted(src.rglob("accuracy_vs_snr.csv"))
    out = Path(args.out) if args.out else src
    if not csvs:
        raise DataError(f"no accuracy_vs_snr.csv under {src}")
    reports = {}
    for f in csvs:
        if f.parent == out:
            continue
        for rep in read_eval_csv(f):
            reports.setdefault(rep.scheme, type(rep)(rep.scheme)).rows.extend(rep.rows)
    if not reports and (out / "accuracy_vs_snr.csv").exists():
        reports = {r.scheme: r for r in read_eval_csv(out / "accuracy_vs_snr.csv")}
    merged = list(reports.values())
    paths = emit_report(merged, out)
    write_manifest(out / MANIFEST_NAME, argv, {"inputs": [str(c) for c in csvs]}, None, paths, started)
    for rep in merged:
        line = " ".join(f"{g.snr_db:+.0f}:{g.top1:.4f}" for g in rep.grid)
        print(f"{rep.scheme:>16s} mean={rep.mean_top1:.4f}  {line}")


class RandomProjectionTeacher:
    """Fixed random linear scorer used only to size stores at a large class count."""

    def __init__(self, in_dim: int, classes: int, seed: int = 0):
        g = torch.Generator().manual_seed(seed)
        self.w = torch.randn(in_dim, classes, generator=g) / in_dim ** 0.5

    def __call__(self, x):
        return x.flatten(1).float() @ self.w


def cmd_ablate(args, argv):
    started = _utc()
    cfg, extras = _resolve_config(args)
    data_dir = _dataset_dir(args, extras)
    ds = load_split(data_dir, "train")
    if args.limit:
        ds = ds.head(args.limit)
    teacher, _ = load_teacher(args.teacher)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    storage = None
    if args.storage_classes:
        big = RandomProjectionTeacher(int(np.prod(ds.images.shape[1:])), args.storage_classes)
        storage = storage_measurement(big, ds.images, ds.sample_ids, args.storage_k, out / "storage_probe.fdls")
        storage["top_k"] = args.storage_k
    report, _, _ = ablation_fdm(ds, teacher, cfg, out / "store.fdls", storage=storage)
    if storage is not None:
        report.top_k = args.storage_k
    paths = emit_report([], out, ablation=report)
    summary = {
        "class_count": report.class_count, "top_k": report.top_k, "records": report.records,
        "payload_bytes": report.payload_bytes, "dense_logit_bytes": report.dense_logit_bytes,
        "storage_ratio": report.storage_ratio, "teacher_bytes": report.teacher_bytes,
        "image_bytes": report.image_bytes, "epoch_time_with_s": report.time_with,
        "epoch_time_without_s": report.time_without, "time_ratio": report.time_ratio,
        "final_loss_with": report.final_loss_with, "final_loss_without": report.final_loss_without,
        "note": report.note,
    }
    (out / "ablation.json").write_text(json.dumps(summary, indent=2) + "\n")
    paths["ablation_json"] = out / "ablation.json"
    write_manifest(out / MANIFEST_NAME, argv, cfg.to_dict(), cfg.seed, paths, started)
    print(json.dumps(summary, indent=2))


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="semdistill", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)

    s = sub.add_parser("synth-data", help="write the procedural desk dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--n-train", type=int, default=10_000)
    s.add_argument("--n-test", type=int, default=2_000)
    s.add_argument("--n-teacher", type=int, default=20_000)
    s.add_argument("--seed", type=int, default=SynthSpec().seed)
    s.set_defaults(func=cmd_synth_data)

    s = sub.add_parser("train-teacher", help="fit the desk teacher")
    s.add_argument("--dataset", required=True)
    s.add_argument("--split", default="teacher")
    s.add_argument("--out", required=True)
    s.add_argument("--epochs", type=int, default=6)
    s.add_argument("--widths", type=int, nargs=3, default=[64, 128, 256])
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_train_teacher)

    s = sub.add_parser("extract-logits", help="run the teacher once and store top-K probabilities")
    s.add_argument("--dataset", required=True)
    s.add_argument("--split", default="train")
    s.add_argument("--teacher", required=True)
    s.add_argument("--k", type=int, default=DistillConfig.top_k)
    s.add_argument("--temperature", type=float, default=DistillConfig.temperature)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("train", help="train a student (distilled or ground-truth baseline)")
    s.add_argument("--config")
    s.add_argument("--store")
    s.add_argument("--out", required=True)
    s.add_argument("--dataset")
    s.add_argument("--seed", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--beta", type=float)
    s.add_argument("--k", type=int)
    s.add_argument("--label-mode", choices=["teacher_soft", "ground_truth"])
    s.add_argument("--set", action="append", metavar="KEY=VALUE")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="accuracy versus SNR")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--snr-grid", default=",".join(f"{v:g}" for v in DEFAULT_SNR_GRID))
    s.add_argument("--seeds", type=int, default=3)
    s.add_argument("--out", required=True)
    s.add_argument("--dataset")
    s.add_argument("--split", default="test")
    s.add_argument("--scheme")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("report", help="merge evaluation CSVs and redraw figures")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("ablate", help="storage and wall-time comparison with/without pre-stored logits")
    s.add_argument("--dataset")
    s.add_argument("--teacher", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--epochs", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--k", type=int)
    s.add_argument("--limit", type=int, help="use only the first N training samples")
    s.add_argument("--storage-classes", type=int, help="also size a store at this class count")
    s.add_argument("--storage-k", type=int, default=10)
    s.add_argument("--set", action="append", metavar="KEY=VALUE")
    s.set_defaults(func=cmd_ablate)
    return p


def _join_negative_lists(argv: list[str]) -> list[str]:
    """``--snr-grid -4,0`` would read ``-4,0`` as a flag; glue it to its option."""
    out = []
    i = 0
    while i < len(argv):
        if argv[i] == "--snr-grid" and i + 1 < len(argv):
            out.append(f"--snr-grid={argv[i + 1]}")
            i += 2
        else:
            out.append(argv[i])
            i += 1
    return out


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(_join_negative_lists(argv))
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.command is None:
            parser.print_help()
            return 2
        args.func(args, ["semdistill", *argv])
        return 0
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except SemDistillError as exc:
        print(f"semdistill: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except ValueError as exc:
        print(f"semdistill: error: {exc}", file=sys.stderr)
        return DataError.exit_code
    except (OSError, EOFError) as exc:
        print(f"semdistill: error: {exc}", file=sys.stderr)
        return StorageIOError.exit_code


if __name__ == "__main__":
    sys.exit(main())
