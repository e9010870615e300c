"""Blank-filling example construction.

A token sequence is split into Part A (the sequence with each sampled span
collapsed to one MASK) and Part B (the spans in shuffled order, each opened by
START). Part A is laid out first in the flat index space. Position row 1 holds
the Part-A index, or for Part-B tokens the index of their span's MASK; row 2 is
0 on Part A and counts 1, 2, ... inside each Part-B block.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

import numpy as np

from ..errors import DataParseError, ValidationError
from . import kernels


@dataclass(frozen=True)
class Sentinels:
    mask: int
    start: int
    end: int

    @classmethod
    def for_vocab(cls, vocab_size: int) -> "Sentinels":
        """Reserve the three ids just above a vocabulary of ``vocab_size`` tokens."""
        return cls(mask=vocab_size, start=vocab_size + 1, end=vocab_size + 2)

    def __post_init__(self):
        if len({self.mask, self.start, self.end}) != 3:
            raise ValidationError(f"sentinel ids must be distinct: {self}")


@dataclass(frozen=True)
class SpanSet:
    """Spans as ``(start, length)`` in sequence order plus the Part-B order."""

    n: int
    spans: tuple[tuple[int, int], ...]
    permutation: tuple[int, ...]

    def __post_init__(self):
        cursor = 0
        for s, ln in self.spans:
            if ln < 1 or s < cursor or s + ln > self.n:
                raise ValidationError(f"invalid span ({s}, {ln}) for n={self.n}")
            cursor = s + ln
        if sorted(self.permutation) != list(range(len(self.spans))):
            raise ValidationError(f"permutation {self.permutation} is not a bijection")

    @property
    def masked(self) -> int:
        return sum(ln for _, ln in self.spans)


def sample_spans(n: int, mask_ratio: float, mean_span_len: float, seed) -> SpanSet:
    """Sample non-overlapping spans covering exactly ``round(mask_ratio * n)`` tokens.

    The span count is ``round(target / mean_span_len)`` (at least 1); lengths are
    a uniformly random composition of the target into that many positive parts,
    whose marginals are close to geometric with the requested mean. Unmasked
    tokens are spread uniformly over the gaps between spans (adjacent spans
    allowed). At least one token always stays unmasked.
    """
    if not (0 < mask_ratio < 1):
        raise ValidationError(f"mask_ratio must be in (0, 1), got {mask_ratio}")
    if n < 2:
        raise ValidationError(f"sequence length must be >= 2, got {n}")
    if mean_span_len < 1:
        raise ValidationError(f"mean_span_len must be >= 1, got {mean_span_len}")
    target = int(np.floor(mask_ratio * n + 0.5))
    if target < 1 or target > n - 1:
        raise ValidationError(f"mask_ratio {mask_ratio} is infeasible for n={n} (would mask {target} tokens)")

    rng = np.random.default_rng(seed)
    k = max(1, min(target, int(np.floor(target / mean_span_len + 0.5))))
    cuts = np.sort(rng.choice(target - 1, size=k - 1, replace=False) + 1) if k > 1 else np.empty(0, dtype=int)
    lengths = np.diff(np.concatenate(([0], cuts, [target])))

    unmasked = n - target
    slots = np.sort(rng.choice(unmasked + k, size=k, replace=False))
    spans = []
    covered = 0
    for i in range(k):
        start = int(slots[i] - i + covered)
        spans.append((start, int(lengths[i])))
        covered += int(lengths[i])
    perm = tuple(int(p) for p in rng.permutation(k))
    return SpanSet(n=n, spans=tuple(spans), permutation=perm)


@dataclass(frozen=True, eq=False)
class CorruptedExample:
    part_a: np.ndarray
    part_b: np.ndarray
    targets: np.ndarray
    pos_1: np.ndarray
    pos_2: np.ndarray
    sentinels: Sentinels

    def __eq__(self, other):
        if not isinstance(other, CorruptedExample):
            return NotImplemented
        return self.sentinels == other.sentinels and all(
            np.array_equal(getattr(self, f), getattr(other, f)) for f in ("part_a", "part_b", "targets", "pos_1", "pos_2")
        )

    @property
    def length(self) -> int:
        return len(self.part_a) + len(self.part_b)

    def to_dict(self) -> dict:
        return {
            "part_a": self.part_a.tolist(),
            "part_b": self.part_b.tolist(),
            "targets": self.targets.tolist(),
            "pos_1": self.pos_1.tolist(),
            "pos_2": self.pos_2.tolist(),
        }

    @classmethod
    def from_dict(cls, d, sentinels: Sentinels) -> "CorruptedExample":
        arr = lambda key: np.asarray(d[key], dtype=np.int64)
        return cls(arr("part_a"), arr("part_b"), arr("targets"), arr("pos_1"), arr("pos_2"), sentinels)


def _i64(xs) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(xs, dtype=np.int64).reshape(-1))


def corrupt(tokens: Sequence[int], span_set: SpanSet, sentinels: Sentinels) -> CorruptedExample:
    tokens = _i64(tokens)
    if tokens.size == 0:
        raise ValidationError("cannot corrupt an empty token sequence")
    if span_set.n != tokens.size:
        raise ValidationError(f"span set is for n={span_set.n}, sequence has {tokens.size} tokens")
    if np.isin(tokens, [sentinels.mask, sentinels.start, sentinels.end]).any():
        raise ValidationError("input tokens contain reserved sentinel ids")
    starts = _i64([s for s, _ in span_set.spans])
    lengths = _i64([ln for _, ln in span_set.spans])
    try:
        arrays = kernels.corrupt_arrays(
            tokens, starts, lengths, _i64(span_set.permutation), sentinels.mask, sentinels.start, sentinels.end
        )
    except ValueError as exc:
        raise ValidationError(str(exc)) from None
    return CorruptedExample(*arrays, sentinels=sentinels)


def reconstruct(example: CorruptedExample) -> np.ndarray:
    s = example.sentinels
    try:
        return kernels.reconstruct_arrays(
            _i64(example.part_a), _i64(example.part_b), _i64(example.targets),
            _i64(example.pos_1), _i64(example.pos_2), s.mask, s.start, s.end,
        )
    except ValueError as exc:
        raise ValidationError(f"inconsistent example: {exc}") from None


def attention_allowed(example: CorruptedExample, query_index: int, key_index: int) -> bool:
    """Part A sees all of Part A; Part B sees Part A and Part B up to itself."""
    n = example.length
    if not (0 <= query_index < n and 0 <= key_index < n):
        raise IndexError(f"index out of range for length {n}: ({query_index}, {key_index})")
    la = len(example.part_a)
    if query_index < la:
        return key_index < la
    return key_index <= query_index


def attention_mask(example: CorruptedExample) -> np.ndarray:
    """Full ``uint8`` visibility matrix, ``mask[q, k]`` as in ``attention_allowed``."""
    return kernels.attention_mask(len(example.part_a), len(example.part_b))


HEADER_FORMAT = "glm-blank-filling/1"


def write_examples(path, examples: Iterable[CorruptedExample], vocab_size: int, sentinels: Sentinels) -> int:
    count = 0
    with open(path, "w", encoding="utf-8") as f:
        header = {
            "format": HEADER_FORMAT,
            "vocab_size": vocab_size,
            "mask_id": sentinels.mask,
            "start_id": sentinels.start,
            "end_id": sentinels.end,
        }
        f.write(json.dumps(header, sort_keys=True) + "\n")
        for ex in examples:
            f.write(json.dumps(ex.to_dict(), separators=(",", ":")) + "\n")
            count += 1
    return count


def read_examples(path) -> tuple[dict, list[CorruptedExample]]:
    with open(path, encoding="utf-8") as f:
        first = f.readline()
        try:
            header = json.loads(first)
        except json.JSONDecodeError:
            raise DataParseError(f"{path}: missing header line")
        if header.get("format") != HEADER_FORMAT:
            raise DataParseError(f"{path}: unexpected format {header.get('format')!r}")
        sentinels = Sentinels(header["mask_id"], header["start_id"], header["end_id"])
        examples = [CorruptedExample.from_dict(json.loads(line), sentinels) for line in f if line.strip()]
    return header, examples


def iter_token_file(path) -> Iterator[tuple[str, list[int]]]:
    """Yield ``(id, tokens)`` from JSONL lines of the form ``{"id": ..., "tokens": [...]}``."""
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                tokens = [int(t) for t in d["tokens"]]
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DataParseError(f"{path}:{lineno}: {exc}")
            yield str(d.get("id", lineno)), tokens
