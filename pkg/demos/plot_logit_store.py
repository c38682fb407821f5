"""
Storing a teacher's outputs once
================================

A distillation run normally asks the teacher for its class probabilities on
every batch of every epoch. Here those probabilities are computed once, cut
down to the K largest entries, and written to a small binary file. Training
then reads the file back and spreads the dropped probability mass evenly over
the classes that were not kept.
"""

import tempfile
from pathlib import Path

import numpy as np

from semdistill.logit_store import (LogitStoreHeader, compress_topk, read_store, smooth,
                                    write_store)

###############################################################################
# One probability vector over ten classes. Ties are broken toward the smaller
# class index, so compression is deterministic.

y = np.array([0.02, 0.40, 0.05, 0.25, 0.05, 0.10, 0.03, 0.04, 0.03, 0.03])
cl = compress_topk(y, k=3, sample_id=7)
print("kept classes", cl.indices, "values", cl.values)

###############################################################################
# Smoothing puts the kept values back and shares the remaining 0.25 of mass
# equally over the other seven classes.

dense = smooth(cl, class_count=10)
print("smoothed", np.round(dense, 4), "sum", dense.sum())

###############################################################################
# A store is a 32-byte header followed by fixed-size records: an 8-byte
# sample id, then K uint32 indices and K float32 values.

rng = np.random.default_rng(0)
probs = rng.dirichlet(np.ones(10), size=1000).astype(np.float32)
records = [compress_topk(p, 3, sample_id=i) for i, p in enumerate(probs)]
path = Path(tempfile.mkdtemp()) / "demo.fdls"
write_store(path, LogitStoreHeader(class_count=10, top_k=3), records)
header, reader = read_store(path)
print(f"{header.record_count} records of {header.record_size} bytes, file {path.stat().st_size} bytes")
assert list(reader) == records

###############################################################################
# At 1000 classes with K = 10 a record takes 8 + 8*10 = 88 bytes, against 4000
# bytes for the dense float32 vector.

big = LogitStoreHeader(class_count=1000, top_k=10)
print(f"payload ratio at C=1000, K=10: {4 * 1000 / big.record_size:.1f}x")
