"""Minimum-perplexity option selection.

Each option is appended to the rendered question stem and only the option
tokens are scored. PPL is ``exp(-mean(logprob))`` in natural log, so options
of different token length are compared per token.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Mapping

from .backend import Backend
from .corpus import McqRecord
from .errors import MedadaptError, ValidationError
from .prompting import base_slots, render

DEFAULT_STEM = "{{contexts}}\nQUESTION: {{question}}\nANSWER:"
NORMALIZATION = "per-token-mean-nll"


class RankingError(MedadaptError):
    def __init__(self, record_id: str, cause: Exception):
        super().__init__(f"record {record_id!r}: {cause}")
        self.record_id = record_id
        self.cause = cause


def ppl_from_logprobs(logprobs) -> float:
    logprobs = list(logprobs)
    if not logprobs:
        raise ValidationError("no log-probabilities to aggregate")
    return math.exp(-math.fsum(logprobs) / len(logprobs))


def option_ppl(backend: Backend, stem: str, option_text: str, separator: str = " ") -> tuple[float, int]:
    if not option_text:
        raise ValidationError("option text must be non-empty")
    logprobs = backend.score_tokens(stem, separator + option_text)
    return ppl_from_logprobs(logprobs), len(logprobs)


@dataclass(frozen=True)
class PplResult:
    per_option: Mapping[str, tuple[float, int]]
    chosen: str

    def to_dict(self, record_id: str | None = None, label: str | None = None) -> dict:
        d = {
            "per_option": {k: {"ppl": p, "token_count": m} for k, (p, m) in self.per_option.items()},
            "chosen": self.chosen,
            "normalization": NORMALIZATION,
        }
        if record_id is not None:
            d["id"] = record_id
        if label is not None:
            d["label"] = label
        return d


def rank_options(
    backend: Backend,
    record: McqRecord,
    stem_template: str = DEFAULT_STEM,
    *,
    separator: str = " ",
    concurrency: int = 1,
) -> PplResult:
    """Score every option; the lowest PPL wins, ties go to the earlier option."""
    if not record.options:
        raise ValidationError("record has no options")
    stem = render(stem_template, base_slots(record))
    score = lambda opt: option_ppl(backend, stem, opt[1], separator)
    try:
        if concurrency > 1:
            with ThreadPoolExecutor(max_workers=concurrency) as pool:
                scored = list(pool.map(score, record.options))
        else:
            scored = [score(o) for o in record.options]
    except Exception as exc:
        raise RankingError(record.id, exc) from exc

    per_option = {k: s for (k, _), s in zip(record.options, scored)}
    chosen = record.options[0][0]
    best = per_option[chosen][0]
    for k, _ in record.options[1:]:
        if per_option[k][0] < best:
            chosen, best = k, per_option[k][0]
    return PplResult(per_option, chosen)
