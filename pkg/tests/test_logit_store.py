import struct

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from semdistill.errors import FormatError, ShapeError
from semdistill.logit_store import (HEADER_SIZE, VALUE_F16, CompressedLogits, LogitStoreHeader,
                                    compress_topk, compress_topk_batch, extract_teacher_logits,
                                    read_store, smooth, smooth_arrays, teacher_probabilities,
                                    write_store)


def random_probs(rng, c):
    p = rng.dirichlet(np.full(c, 0.3)).astype(np.float32)
    return p / p.sum(dtype=np.float32)


def random_record(rng, c, k, sample_id):
    return compress_topk(random_probs(rng, c), k, sample_id=sample_id)


# -- compress_topk ------------------------------------------------------------

def test_compress_topk_basic():
    cl = compress_topk(np.array([0.5, 0.3, 0.1, 0.1]), 2)
    assert cl.indices.tolist() == [0, 1]
    assert cl.values.tolist() == [0.5, 0.3]


def test_compress_topk_all_equal_picks_smallest_index():
    cl = compress_topk(np.full(4, 0.25), 1)
    assert cl.indices.tolist() == [0]
    assert cl.values.tolist() == [0.25]


def test_compress_topk_one_hot_zero_ties():
    p = np.zeros(10)
    p[7] = 1.0
    cl = compress_topk(p, 3)
    assert cl.indices.tolist() == [7, 0, 1]
    assert cl.values.tolist() == [1.0, 0.0, 0.0]


def test_compress_topk_ties_in_middle():
    cl = compress_topk(np.array([0.1, 0.3, 0.2, 0.3, 0.1]), 4)
    assert cl.indices.tolist() == [1, 3, 2, 0]


@pytest.mark.parametrize("k", [4, 5, 0])
def test_compress_topk_rejects_bad_k(k):
    with pytest.raises(ValueError):
        compress_topk(np.full(4, 0.25), k)


def test_compress_topk_rejects_unnormalized():
    with pytest.raises(ValueError):
        compress_topk(np.array([0.5, 0.3, 0.3]), 1)


def test_compress_topk_values_bit_exact():
    rng = np.random.default_rng(1)
    p = random_probs(rng, 50)
    cl = compress_topk(p, 7)
    assert cl.values.dtype == np.float32
    assert cl.values.tobytes() == p[cl.indices].tobytes()


def test_batch_compress_matches_single():
    rng = np.random.default_rng(2)
    probs = np.stack([random_probs(rng, 20) for _ in range(30)])
    idx, val = compress_topk_batch(probs, 4)
    for row in range(30):
        cl = compress_topk(probs[row], 4)
        assert np.array_equal(idx[row], cl.indices)
        assert val[row].tobytes() == cl.values.tobytes()


# -- smooth -------------------------------------------------------------------

@pytest.mark.parametrize("indices, values, c, expected", [
    ([0, 1], [0.7, 0.2], 4, [0.7, 0.2, 0.05, 0.05]),
    ([0, 1], [0.5, 0.3], 4, [0.5, 0.3, 0.1, 0.1]),
    ([2], [1.0], 5, [0.0, 0.0, 1.0, 0.0, 0.0]),
])
def test_smooth_examples(indices, values, c, expected):
    out = smooth(CompressedLogits(0, indices, values), c)
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_smooth_rejects_c_equal_k():
    with pytest.raises(ValueError):
        smooth_arrays(np.array([0, 1]), np.array([0.6, 0.4]), 2)


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 200), st.data())
def test_smooth_normalizes(c, data):
    k = data.draw(st.integers(1, c - 1))
    seed = data.draw(st.integers(0, 2**32 - 1))
    cl = random_record(np.random.default_rng(seed), c, k, 0)
    out = smooth(cl, c)
    assert abs(out.sum() - 1) < 1e-6
    assert np.array_equal(out[cl.indices.astype(int)], cl.values.astype(np.float64))


@settings(max_examples=100, deadline=None)
@given(st.integers(3, 100), st.data())
def test_compress_of_smooth_recovers_record(c, data):
    k = data.draw(st.integers(1, c - 1))
    cl = random_record(np.random.default_rng(data.draw(st.integers(0, 2**32 - 1))), c, k, 0)
    dense = smooth(cl, c)
    floor = (1 - cl.values.astype(np.float64).sum()) / (c - k)
    if (cl.values > floor).all():
        again = compress_topk(dense, k)
        assert np.array_equal(again.indices, cl.indices)
        assert np.array_equal(again.values, cl.values.astype(np.float64))


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 60), st.data())
def test_values_non_increasing(c, data):
    k = data.draw(st.integers(1, c - 1))
    cl = random_record(np.random.default_rng(data.draw(st.integers(0, 2**32 - 1))), c, k, 0)
    assert (np.diff(cl.values) <= 0).all()


# -- binary store -------------------------------------------------------------

def test_header_roundtrip():
    h = LogitStoreHeader(1000, 10, 5)
    assert LogitStoreHeader.unpack(h.pack()) == h
    assert len(h.pack()) == HEADER_SIZE


def test_empty_store(tmp_path):
    path = tmp_path / "empty.fdls"
    assert write_store(path, LogitStoreHeader(1000, 10), []) == 0
    assert path.stat().st_size == HEADER_SIZE
    header, reader = read_store(path)
    assert header.record_count == 0
    assert list(reader) == []


def test_single_record_size(tmp_path):
    path = tmp_path / "one.fdls"
    rec = random_record(np.random.default_rng(0), 1000, 10, 42)
    write_store(path, LogitStoreHeader(1000, 10), [rec])
    assert path.stat().st_size == HEADER_SIZE + 88


def test_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(3)
    recs = [random_record(rng, 100, 10, int(rng.integers(0, 2**63))) for _ in range(100)]
    path = tmp_path / "s.fdls"
    assert write_store(path, LogitStoreHeader(100, 10), recs) == 100
    header, reader = read_store(path)
    assert header.record_count == 100
    back = list(reader)
    assert back == recs
    # iterating twice yields the same sequence
    assert list(reader) == back
    arr = reader.arrays()
    assert arr["values"].tobytes() == np.stack([r.values for r in recs]).tobytes()


def test_streaming_reads_in_chunks(tmp_path):
    rng = np.random.default_rng(4)
    recs = [random_record(rng, 20, 3, i) for i in range(25)]
    path = tmp_path / "s.fdls"
    write_store(path, LogitStoreHeader(20, 3), recs)
    _, reader = read_store(path)
    reader.chunk = 4
    assert list(reader) == recs


def test_float16_values(tmp_path):
    rng = np.random.default_rng(5)
    recs = [random_record(rng, 50, 5, i) for i in range(10)]
    path = tmp_path / "h.fdls"
    write_store(path, LogitStoreHeader(50, 5, value_dtype=VALUE_F16), recs)
    assert path.stat().st_size == HEADER_SIZE + 10 * (8 + 6 * 5)
    _, reader = read_store(path)
    for a, b in zip(reader, recs):
        np.testing.assert_allclose(a.values.astype(np.float64), b.values, atol=1e-3)


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.fdls"
    write_store(path, LogitStoreHeader(10, 2), [])
    raw = bytearray(path.read_bytes())
    raw[:4] = b"XXXX"
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="magic"):
        read_store(path)


def test_bad_version(tmp_path):
    path = tmp_path / "v.fdls"
    path.write_bytes(struct.pack("<4sIIIQBB6x", b"FDLS", 9, 10, 2, 0, 0, 0))
    with pytest.raises(FormatError, match="version"):
        read_store(path)


def test_truncated_names_offset(tmp_path):
    rng = np.random.default_rng(6)
    recs = [random_record(rng, 10, 2, i) for i in range(3)]
    path = tmp_path / "t.fdls"
    write_store(path, LogitStoreHeader(10, 2), recs)
    path.write_bytes(path.read_bytes()[:-5])
    rec_size = 8 + 8 * 2
    with pytest.raises(FormatError, match=f"offset {HEADER_SIZE + 2 * rec_size}"):
        read_store(path)


def test_inconsistent_k_rejected(tmp_path):
    rec = random_record(np.random.default_rng(7), 10, 3, 0)
    with pytest.raises(FormatError):
        write_store(tmp_path / "k.fdls", LogitStoreHeader(10, 2), [rec])
    assert not (tmp_path / "k.fdls").exists()


def test_record_count_mismatch(tmp_path):
    rec = random_record(np.random.default_rng(8), 10, 2, 0)
    with pytest.raises(FormatError):
        write_store(tmp_path / "n.fdls", LogitStoreHeader(10, 2, record_count=2), [rec])


def test_header_rejects_k_ge_c():
    with pytest.raises(FormatError):
        LogitStoreHeader(10, 10)


# -- extraction ---------------------------------------------------------------

class LinearTeacher:
    def __init__(self, dim, classes, seed=0):
        g = torch.Generator().manual_seed(seed)
        self.w = torch.randn(dim, classes, generator=g)

    def __call__(self, x):
        return x.flatten(1) @ self.w


def test_extract_storage_arithmetic(tmp_path):
    rng = np.random.default_rng(9)
    images = rng.normal(size=(1000, 8)).astype(np.float32)
    s = extract_teacher_logits(LinearTeacher(8, 1000), images, np.arange(1000), 10, 1.0,
                               tmp_path / "x.fdls", batch_size=128)
    assert s.payload_bytes == 88_000
    assert s.dense_bytes == 4_000_000
    assert s.compression_ratio == pytest.approx(4_000_000 / 88_000)
    assert s.compression_ratio > 45
    assert s.bytes == HEADER_SIZE + 88_000


def test_extract_k_near_c_is_counterproductive(tmp_path):
    images = np.random.default_rng(10).normal(size=(20, 4)).astype(np.float32)
    s = extract_teacher_logits(LinearTeacher(4, 12), images, np.arange(20), 11, 1.0, tmp_path / "y.fdls")
    assert s.compression_ratio < 1
    assert s.payload_bytes == 20 * (8 + 8 * 11)


def test_extract_uniform_teacher(tmp_path):
    teacher = lambda x: torch.zeros(len(x), 10)
    images = np.zeros((5, 3), dtype=np.float32)
    extract_teacher_logits(teacher, images, np.arange(5), 3, 1.0, tmp_path / "u.fdls")
    _, reader = read_store(tmp_path / "u.fdls")
    for rec in reader:
        assert np.allclose(rec.values, 0.1)


def test_extract_order_independent_of_batching(tmp_path):
    rng = np.random.default_rng(11)
    images = rng.normal(size=(50, 6)).astype(np.float32)
    t = LinearTeacher(6, 30)
    extract_teacher_logits(t, images, np.arange(50) * 3, 4, 2.0, tmp_path / "a.fdls", batch_size=7)
    extract_teacher_logits(t, images, np.arange(50) * 3, 4, 2.0, tmp_path / "b.fdls", batch_size=50)
    _, ra = read_store(tmp_path / "a.fdls")
    _, rb = read_store(tmp_path / "b.fdls")
    a, b = list(ra), list(rb)
    assert [r.sample_id for r in a] == list(range(0, 150, 3))
    assert [r.indices.tolist() for r in a] == [r.indices.tolist() for r in b]
    np.testing.assert_allclose([r.values for r in a], [r.values for r in b], rtol=1e-6)


def test_extract_shape_error(tmp_path):
    calls = iter([torch.zeros(2, 10), torch.zeros(2, 11)])
    with pytest.raises(ShapeError):
        extract_teacher_logits(lambda x: next(calls), np.zeros((4, 3), np.float32), np.arange(4), 2, 1.0,
                               tmp_path / "e.fdls", batch_size=2)


def test_teacher_probabilities_temperature():
    s = np.array([[2.0, 0.0]])
    p1 = teacher_probabilities(s, 1.0)
    p2 = teacher_probabilities(s, 2.0)
    assert p1.dtype == np.float32
    np.testing.assert_allclose(p1[0, 0], 1 / (1 + np.exp(-2)), rtol=1e-6)
    np.testing.assert_allclose(p2[0, 0], 1 / (1 + np.exp(-1)), rtol=1e-6)
    with pytest.raises(ValueError):
        teacher_probabilities(s, 0.0)
