"""
Distilling into a small transmitter
===================================

The whole pipeline at a size that runs in a few minutes on a laptop CPU:
procedural images, a convolutional teacher, a logit store, then two students
that share every setting except their labels. One learns from the stored
teacher probabilities, the other from one-hot ground truth. Both are
evaluated across channel SNRs.

Set ``N_TRAIN`` and ``EPOCHS`` higher for numbers closer to the acceptance
runs (10,000 samples, 8 epochs).
"""

import tempfile
from pathlib import Path

from semdistill.data import make_splits
from semdistill.evaluation import emit_report, eval_accuracy_vs_snr
from semdistill.logit_store import extract_teacher_logits
from semdistill.training import (DistillConfig, teacher_accuracy, train_distill, train_e2e_baseline,
                                 train_teacher)

N_TRAIN = 4_000
EPOCHS = 16
work = Path(tempfile.mkdtemp())

###############################################################################
# Data and teacher. The teacher trains on its own disjoint pool.

train, test, pool = make_splits(N_TRAIN, 1_000, 6_000)
teacher = train_teacher(pool, epochs=4)
print(f"teacher clean accuracy {teacher_accuracy(teacher, test):.3f}")

###############################################################################
# Run the teacher once over the student's training split. After this the
# teacher is no longer needed.

cfg = DistillConfig(epochs=EPOCHS)
summary = extract_teacher_logits(teacher, train.images, train.sample_ids, cfg.top_k,
                                 cfg.temperature, work / "train.fdls")
print(f"store: {summary.count} records, {summary.bytes} bytes")

###############################################################################
# Two students with identical architecture, channel and schedule.

distilled = train_distill(cfg, work / "train.fdls", train)
baseline = train_e2e_baseline(cfg, train)

reports = [eval_accuracy_vs_snr(r.model, test, seeds=(0,), scheme=name)
           for name, r in (("distilled", distilled), ("baseline", baseline))]
for rep in reports:
    print(rep.scheme, " ".join(f"{g.snr_db:+.0f}dB:{g.top1:.3f}" for g in rep.grid))

paths = emit_report(reports, work / "report")
print("wrote", paths["accuracy_vs_snr_png"])
