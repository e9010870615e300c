from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from medadapt import glm_prep
from medadapt.errors import DataParseError, ValidationError
from medadapt.glm_prep import (
    CorruptedExample, Sentinels, SpanSet, attention_allowed, attention_mask, corrupt, read_examples, reconstruct,
    sample_spans, write_examples,
)
from medadapt.glm_prep import kernels

VOCAB = 1000
S = Sentinels.for_vocab(VOCAB)
a, b, c, d, e = 10, 11, 12, 13, 14


@st.composite
def sequences_and_spans(draw, max_n=64):
    n = draw(st.integers(1, max_n))
    tokens = draw(st.lists(st.integers(0, VOCAB - 1), min_size=n, max_size=n))
    spans, cursor = [], 0
    while cursor < n and draw(st.booleans()):
        start = draw(st.integers(cursor, n - 1))
        length = draw(st.integers(1, n - start))
        spans.append((start, length))
        cursor = start + length
    perm = draw(st.permutations(range(len(spans))))
    return tokens, SpanSet(n, tuple(spans), tuple(perm))


def brute_mask(la, lb):
    n = la + lb
    m = np.zeros((n, n), dtype=np.uint8)
    for q in range(n):
        for k in range(n):
            if q < la:
                m[q, k] = k < la
            else:
                m[q, k] = k < la or (la <= k <= q)
    return m


def test_single_span_layout():
    ex = corrupt([a, b, c, d, e], SpanSet(5, ((1, 2),), (0,)), S)
    assert ex.part_a.tolist() == [a, S.mask, d, e]
    assert ex.part_b.tolist() == [S.start, b, c]
    assert ex.targets.tolist() == [b, c, S.end]
    assert ex.pos_1.tolist() == [0, 1, 2, 3, 1, 1, 1]
    assert ex.pos_2.tolist() == [0, 0, 0, 0, 1, 2, 3]
    assert reconstruct(ex).tolist() == [a, b, c, d, e]


def test_swapped_permutation_puts_second_span_first():
    ex = corrupt([a, b, c, d, e], SpanSet(5, ((0, 1), (3, 2)), (1, 0)), S)
    assert ex.part_a.tolist() == [S.mask, b, c, S.mask]
    assert ex.part_b.tolist() == [S.start, d, e, S.start, a]
    assert ex.targets.tolist() == [d, e, S.end, a, S.end]
    # Part-B positions point at the MASK of their own span
    assert ex.pos_1.tolist()[4:] == [3, 3, 3, 0, 0]
    assert reconstruct(ex).tolist() == [a, b, c, d, e]


def test_empty_tokens_rejected():
    with pytest.raises(ValidationError):
        corrupt([], SpanSet(0, (), ()), S)


def test_out_of_bounds_span_rejected():
    with pytest.raises(ValidationError):
        SpanSet(5, ((4, 2),), (0,))
    with pytest.raises(ValidationError):
        SpanSet(5, ((0, 2), (1, 2)), (0, 1))
    with pytest.raises(ValidationError):
        SpanSet(5, ((0, 2),), (1,))
    with pytest.raises(ValidationError):
        corrupt([a, b, c], SpanSet(5, ((1, 2),), (0,)), S)


def test_sentinel_ids_in_input_rejected():
    with pytest.raises(ValidationError):
        corrupt([a, S.mask, c], SpanSet(3, ((0, 1),), (0,)), S)


def test_corrupted_layout_detected():
    ex = corrupt([a, b, c, d, e], SpanSet(5, ((1, 2),), (0,)), S)
    broken = CorruptedExample(ex.part_a, np.array([b, S.start, c]), ex.targets, ex.pos_1, ex.pos_2, S)
    with pytest.raises(ValidationError):
        reconstruct(broken)
    bad_targets = CorruptedExample(ex.part_a, ex.part_b, np.array([b, d, S.end]), ex.pos_1, ex.pos_2, S)
    with pytest.raises(ValidationError):
        reconstruct(bad_targets)
    extra_mask = CorruptedExample(np.array([S.mask, S.mask, d, e]), ex.part_b, ex.targets,
                                  np.array([0, 1, 2, 3, 1, 1, 1]), ex.pos_2, S)
    with pytest.raises(ValidationError):
        reconstruct(extra_mask)


@settings(max_examples=300, deadline=None)
@given(sequences_and_spans())
def test_inverse_law_and_invariants(case):
    tokens, spans = case
    ex = corrupt(tokens, spans, S)
    assert reconstruct(ex).tolist() == tokens

    k, masked, n = len(spans.spans), spans.masked, len(tokens)
    assert int((ex.part_a == S.mask).sum()) == k
    assert len(ex.part_a) == n - masked + k
    assert len(ex.part_b) == masked + k
    assert len(ex.targets) == len(ex.part_b)
    # token conservation
    kept = [t for t in ex.part_a.tolist() if t != S.mask]
    spanned = [t for t in ex.part_b.tolist() if t != S.start]
    assert Counter(kept + spanned) == Counter(tokens)
    # targets are the Part-B inputs shifted left, with END closing each block
    blocks = np.flatnonzero(ex.part_b == S.start).tolist() + [len(ex.part_b)]
    for lo, hi in zip(blocks, blocks[1:]):
        assert ex.targets[lo:hi - 1].tolist() == ex.part_b[lo + 1:hi].tolist()
        assert ex.targets[hi - 1] == S.end
        # position validity
        assert ex.pos_2[len(ex.part_a) + lo: len(ex.part_a) + hi].tolist() == list(range(1, hi - lo + 1))
        mask_at = ex.pos_1[len(ex.part_a) + lo]
        assert ex.part_a[mask_at] == S.mask
        assert set(ex.pos_1[len(ex.part_a) + lo: len(ex.part_a) + hi].tolist()) == {mask_at}
    assert ex.pos_2[: len(ex.part_a)].tolist() == [0] * len(ex.part_a)
    assert ex.pos_1[: len(ex.part_a)].tolist() == list(range(len(ex.part_a)))


@pytest.mark.skipif(kernels.compiled_kernels is None, reason="compiled kernels not built")
@settings(max_examples=200, deadline=None)
@given(sequences_and_spans())
def test_compiled_kernels_match_python(case):
    tokens, spans = case
    args = (
        np.asarray(tokens, dtype=np.int64),
        np.asarray([s for s, _ in spans.spans], dtype=np.int64),
        np.asarray([ln for _, ln in spans.spans], dtype=np.int64),
        np.asarray(spans.permutation, dtype=np.int64),
        S.mask, S.start, S.end,
    )
    py = kernels.python_kernels.corrupt_arrays(*args)
    cy = kernels.compiled_kernels.corrupt_arrays(*args)
    for x, y in zip(py, cy):
        assert np.array_equal(x, y)
    back = kernels.compiled_kernels.reconstruct_arrays(*cy, S.mask, S.start, S.end)
    assert back.tolist() == tokens
    la, lb = len(py[0]), len(py[1])
    assert np.array_equal(kernels.python_kernels.attention_mask(la, lb), kernels.compiled_kernels.attention_mask(la, lb))


@pytest.mark.parametrize("impl", kernels.available(), ids=lambda m: m.IMPLEMENTATION)
def test_kernels_reject_inconsistent_input(impl):
    pa = np.array([a, S.mask], dtype=np.int64)
    pb = np.array([S.start, b], dtype=np.int64)
    tg = np.array([b, S.end], dtype=np.int64)
    p1 = np.array([0, 1, 1, 1], dtype=np.int64)
    p2 = np.array([0, 0, 1, 2], dtype=np.int64)
    assert impl.reconstruct_arrays(pa, pb, tg, p1, p2, S.mask, S.start, S.end).tolist() == [a, b]
    with pytest.raises(ValueError):
        impl.reconstruct_arrays(pa, pb, tg, np.array([0, 1, 0, 0], dtype=np.int64), p2, S.mask, S.start, S.end)
    with pytest.raises(ValueError):
        impl.reconstruct_arrays(pa, pb[:1], tg, p1, p2, S.mask, S.start, S.end)
    with pytest.raises(ValueError):
        impl.corrupt_arrays(np.array([a, b], dtype=np.int64), np.array([1], dtype=np.int64),
                            np.array([2], dtype=np.int64), np.array([0], dtype=np.int64), S.mask, S.start, S.end)


def test_attention_examples():
    ex = corrupt([a, b, c, d, e], SpanSet(5, ((1, 2),), (0,)), S)
    la = len(ex.part_a)
    assert all(attention_allowed(ex, q, k) for q in range(la) for k in range(la))
    assert not attention_allowed(ex, 0, la)
    assert attention_allowed(ex, la + 1, 0)
    assert attention_allowed(ex, la + 1, la)
    assert not attention_allowed(ex, la, la + 1)
    with pytest.raises(IndexError):
        attention_allowed(ex, ex.length, 0)
    with pytest.raises(IndexError):
        attention_allowed(ex, 0, -1)


@pytest.mark.parametrize("n", range(1, 17))
def test_attention_matches_brute_force(n):
    tokens = list(range(n))
    for spans in ([], [(0, 1)], [(max(0, n - 2), min(2, n))], [(0, 1), (n - 1, 1)] if n > 2 else []):
        ex = corrupt(tokens, SpanSet(n, tuple(spans), tuple(range(len(spans)))), S)
        la, lb = len(ex.part_a), len(ex.part_b)
        full = np.array([[attention_allowed(ex, q, k) for k in range(ex.length)] for q in range(ex.length)], dtype=np.uint8)
        assert np.array_equal(full, brute_mask(la, lb))
        assert np.array_equal(attention_mask(ex), full)


@given(st.integers(0, 12), st.integers(0, 12))
def test_mask_monotone_prefix(la, lb):
    m = brute_mask(la, lb) if la + lb else np.zeros((0, 0))
    for impl in kernels.available():
        assert np.array_equal(impl.attention_mask(la, lb), m)
    for q in range(la, la + lb):
        allowed = np.flatnonzero(m[q]).tolist()
        assert allowed == list(range(q + 1))


def test_sample_spans_forced_single():
    # 0.2 * 10 = 2 masked tokens, mean span 2 -> exactly one span of length 2
    for seed in range(20):
        ss = sample_spans(10, 0.2, 2.0, seed)
        assert len(ss.spans) == 1 and ss.masked == 2


def test_sample_spans_deterministic():
    assert sample_spans(64, 0.15, 3.0, 7) == sample_spans(64, 0.15, 3.0, 7)
    assert sample_spans(64, 0.15, 3.0, [7, 1]) == sample_spans(64, 0.15, 3.0, [7, 1])


@pytest.mark.parametrize("args", [(10, 0.0, 2.0), (10, 1.0, 2.0), (1, 0.5, 1.0), (10, 0.2, 0.5), (4, 0.05, 1.0), (4, 0.95, 1.0)])
def test_sample_spans_errors(args):
    with pytest.raises(ValidationError):
        sample_spans(*args, seed=0)


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 256), st.floats(0.01, 0.99), st.floats(1.0, 10.0), st.integers(0, 2**31))
def test_sample_spans_properties(n, ratio, mean, seed):
    target = int(np.floor(ratio * n + 0.5))
    if not 1 <= target <= n - 1:
        with pytest.raises(ValidationError):
            sample_spans(n, ratio, mean, seed)
        return
    ss = sample_spans(n, ratio, mean, seed)
    assert ss.masked == target
    assert sorted(ss.permutation) == list(range(len(ss.spans)))


def test_sample_spans_mean_ratio():
    masked = [sample_spans(64, 0.15, 3.0, s).masked / 64 for s in range(2000)]
    assert abs(np.mean(masked) - 0.15) <= 0.02


def test_sample_spans_permutation_roughly_uniform():
    counts = Counter(sample_spans(40, 0.3, 4.0, s).permutation for s in range(3000))
    k = len(next(iter(counts)))
    assert k == 3
    assert len(counts) == 6 and min(counts.values()) > 400


def test_write_read_examples(tmp_path):
    exs = [corrupt(list(range(20)), sample_spans(20, 0.25, 2.0, s), S) for s in range(5)]
    assert write_examples(tmp_path / "x.jsonl", exs, VOCAB, S) == 5
    header, back = read_examples(tmp_path / "x.jsonl")
    assert header["vocab_size"] == VOCAB and header["mask_id"] == S.mask
    assert back == exs


def test_read_examples_rejects_missing_header(tmp_path):
    (tmp_path / "x.jsonl").write_text('{"part_a": []}\n')
    with pytest.raises(DataParseError):
        read_examples(tmp_path / "x.jsonl")


def test_implementation_flag():
    assert glm_prep.IMPLEMENTATION in ("python", "cython")
