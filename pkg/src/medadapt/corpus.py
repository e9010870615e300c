"""Multi-choice QA records, PubMedQA ingestion, and the small transforms the
pipeline runs over its corpora (stats, stratified splits, triplet verbalization)."""

from __future__ import annotations

import json
import math
import random
import re
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

from .errors import DataParseError, TemplateError, ValidationError

SUBSET_TAGS = ("PQA-L", "PQA-U", "PQA-A", "other")
PUBMEDQA_LABELS = ("yes", "no", "maybe")
# Option layout used for every PubMedQA record: "A) yes  B) no  C) maybe".
PUBMEDQA_OPTIONS = (("A", "yes"), ("B", "no"), ("C", "maybe"))
_LABEL_TO_KEY = {text: key for key, text in PUBMEDQA_OPTIONS}


@dataclass(frozen=True)
class McqRecord:
    """One multi-choice item.

    ``gold`` is an option *key*; ``gold_label`` gives the option text, which for
    PubMedQA records is the yes/no/maybe label.
    """

    id: str
    question: str
    contexts: tuple[str, ...]
    options: tuple[tuple[str, str], ...]
    gold: str | None = None
    long_answer: str | None = None
    subset_tag: str = "other"
    pseudo_source: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "contexts", tuple(self.contexts))
        object.__setattr__(self, "options", tuple((str(k), str(t)) for k, t in self.options))
        if not self.options:
            raise ValidationError("record has no options", self.id)
        keys = self.option_keys
        if len(set(keys)) != len(keys):
            raise ValidationError(f"duplicate option keys {keys} in record {self.id!r}")
        if self.gold is not None and self.gold not in keys:
            raise ValidationError(f"gold {self.gold!r} is not an option key of record {self.id!r}")
        if self.subset_tag not in SUBSET_TAGS:
            raise ValidationError(f"unknown subset tag {self.subset_tag!r}")
        if self.subset_tag == "PQA-U":
            if self.long_answer is None:
                raise ValidationError(f"PQA-U record {self.id!r} has no long answer")
            # a PQA-U record only carries a label once it has been pseudo-labeled
            if self.gold is not None and self.pseudo_source is None:
                raise ValidationError(f"PQA-U record {self.id!r} carries a gold label")

    @property
    def option_keys(self) -> tuple[str, ...]:
        return tuple(k for k, _ in self.options)

    def option_text(self, key: str) -> str:
        for k, text in self.options:
            if k == key:
                return text
        raise KeyError(key)

    def key_for_text(self, text: str) -> str:
        for k, t in self.options:
            if t == text:
                return k
        raise KeyError(text)

    @property
    def gold_label(self) -> str | None:
        return None if self.gold is None else self.option_text(self.gold)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["contexts"] = list(self.contexts)
        d["options"] = [list(o) for o in self.options]
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "McqRecord":
        try:
            return cls(
                id=str(d["id"]),
                question=d["question"],
                contexts=tuple(d.get("contexts") or ()),
                options=tuple(tuple(o) for o in d["options"]),
                gold=d.get("gold"),
                long_answer=d.get("long_answer"),
                subset_tag=d.get("subset_tag", "other"),
                pseudo_source=d.get("pseudo_source"),
            )
        except (KeyError, TypeError) as exc:
            raise DataParseError(f"malformed record: {exc}", str(d.get("id")) if isinstance(d, Mapping) else None)


def dump_line(obj) -> str:
    """Canonical one-line JSON; used for every newline-delimited output so runs are byte-comparable."""
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


class Dataset(Sequence[McqRecord]):
    """Immutable ordered collection of records with unique ids."""

    def __init__(self, records: Iterable[McqRecord], subset_tag: str | None = None):
        self._records = tuple(records)
        self._index = {}
        for i, rec in enumerate(self._records):
            if rec.id in self._index:
                raise ValidationError(f"duplicate record id {rec.id!r}")
            self._index[rec.id] = i
        self.subset_tag = subset_tag

    def __len__(self) -> int:
        return len(self._records)

    def __getitem__(self, i):
        return self._records[i]

    def __iter__(self) -> Iterator[McqRecord]:
        return iter(self._records)

    def __eq__(self, other) -> bool:
        return isinstance(other, Dataset) and self._records == other._records

    def __repr__(self) -> str:
        return f"Dataset(n={len(self)}, subset_tag={self.subset_tag!r})"

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(r.id for r in self._records)

    def get(self, record_id: str) -> McqRecord:
        return self._records[self._index[record_id]]

    def __contains__(self, record_id) -> bool:
        return record_id in self._index

    def to_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for rec in self._records:
                f.write(dump_line(rec.to_dict()) + "\n")

    @classmethod
    def from_jsonl(cls, path) -> "Dataset":
        records = []
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                if not line.strip():
                    continue
                try:
                    d = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise DataParseError(f"{path}:{lineno}: {exc.msg}")
                records.append(McqRecord.from_dict(d))
        tags = {r.subset_tag for r in records}
        return cls(records, subset_tag=tags.pop() if len(tags) == 1 else None)


def load_pubmedqa(path, subset_tag: str) -> Dataset:
    """Load an official PubMedQA file (a JSON map of id -> record)."""
    if subset_tag not in ("PQA-L", "PQA-U", "PQA-A"):
        raise ValidationError(f"not a PubMedQA subset tag: {subset_tag!r}")
    text = Path(path).read_text(encoding="utf-8")
    if not text.strip():
        raise DataParseError(f"{path}: empty file")
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DataParseError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}")
    if not isinstance(raw, dict):
        raise DataParseError(f"{path}: top level must be a map of record id to record")
    if not raw:
        raise DataParseError(f"{path}: no records")

    records = []
    for rid, item in raw.items():
        if not isinstance(item, dict):
            raise DataParseError("record is not an object", rid)
        question = item.get("QUESTION")
        contexts = item.get("CONTEXTS")
        if not isinstance(question, str) or not isinstance(contexts, list):
            raise DataParseError("missing QUESTION or CONTEXTS", rid)
        if not all(isinstance(c, str) for c in contexts):
            raise DataParseError("CONTEXTS must be a list of strings", rid)
        long_answer = item.get("LONG_ANSWER")
        if long_answer is not None and not isinstance(long_answer, str):
            raise DataParseError("LONG_ANSWER must be a string", rid)

        gold = None
        decision = item.get("final_decision")
        if subset_tag == "PQA-U":
            if decision is not None:
                raise ValidationError(f"PQA-U record {rid!r} carries final_decision {decision!r}")
        else:
            if decision not in _LABEL_TO_KEY:
                raise ValidationError(f"record {rid!r}: final_decision {decision!r} not in {PUBMEDQA_LABELS}")
            gold = _LABEL_TO_KEY[decision]
        records.append(
            McqRecord(
                id=str(rid),
                question=question,
                contexts=tuple(contexts),
                options=PUBMEDQA_OPTIONS,
                gold=gold,
                long_answer=long_answer,
                subset_tag=subset_tag,
            )
        )
    return Dataset(records, subset_tag=subset_tag)


def load_records(path, subset_tag: str | None = None) -> Dataset:
    """Load either newline-delimited records or an official PubMedQA map."""
    path = Path(path)
    if path.suffix == ".jsonl":
        return Dataset.from_jsonl(path)
    return load_pubmedqa(path, subset_tag or "PQA-L")


def dump_pubmedqa(dataset: Dataset, path) -> None:
    """Write records back in the official map format (PubMedQA-shaped records only)."""
    out = {}
    for rec in dataset:
        item = {"QUESTION": rec.question, "CONTEXTS": list(rec.contexts)}
        if rec.long_answer is not None:
            item["LONG_ANSWER"] = rec.long_answer
        if rec.gold is not None:
            item["final_decision"] = rec.gold_label
        out[rec.id] = item
    Path(path).write_text(json.dumps(out, ensure_ascii=False, indent=1), encoding="utf-8")


@dataclass(frozen=True)
class StatsReport:
    record_count: int
    label_proportions: dict[str, float]
    avg_question_len: float
    avg_context_len: float
    avg_long_answer_len: float
    labeled_count: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def _ntok(text: str) -> int:
    return len(text.split())


def dataset_stats(dataset: Dataset) -> StatsReport:
    """Record count, label proportions (labeled records only) and mean
    whitespace-token lengths.

    Question and context means run over all records; the long-answer mean runs
    over records that have one (0.0 when none do).
    """
    n = len(dataset)
    if n == 0:
        raise ValidationError("cannot summarize an empty dataset")
    labels = Counter(r.gold_label for r in dataset if r.gold is not None)
    labeled = sum(labels.values())
    proportions = {label: count / labeled for label, count in labels.items()} if labeled else {}
    long_answers = [_ntok(r.long_answer) for r in dataset if r.long_answer is not None]
    return StatsReport(
        record_count=n,
        label_proportions=proportions,
        avg_question_len=sum(_ntok(r.question) for r in dataset) / n,
        avg_context_len=sum(sum(_ntok(c) for c in r.contexts) for r in dataset) / n,
        avg_long_answer_len=sum(long_answers) / len(long_answers) if long_answers else 0.0,
        labeled_count=labeled,
    )


def split(dataset: Dataset, fractions: Sequence[float], seed: int) -> tuple[Dataset, ...]:
    """Deterministic partition, stratified by gold label.

    Each stratum (one per gold label, plus one for unlabeled records) is
    shuffled and cut at ``round(cumsum(fractions) * size)``; partitions keep
    the input order of their records.
    """
    fractions = [float(f) for f in fractions]
    if not fractions or any(not (f > 0) for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValidationError(f"fractions must be positive and sum to 1, got {fractions}")

    strata = defaultdict(list)
    for i, rec in enumerate(dataset):
        strata[rec.gold_label].append(i)

    rng = random.Random(seed)
    assignment = {}
    bounds = []
    acc = 0.0
    for f in fractions:
        acc += f
        bounds.append(acc)
    # sort strata keys so the rng stream does not depend on dict order
    for label in sorted(strata, key=lambda x: (x is None, x or "")):
        idx = strata[label][:]
        rng.shuffle(idx)
        start = 0
        for part, b in enumerate(bounds):
            stop = len(idx) if part == len(bounds) - 1 else int(math.floor(b * len(idx) + 0.5))
            for i in idx[start:stop]:
                assignment[i] = part
            start = stop

    parts = [[] for _ in fractions]
    for i, rec in enumerate(dataset):
        parts[assignment[i]].append(rec)
    return tuple(Dataset(p, subset_tag=dataset.subset_tag) for p in parts)


@dataclass(frozen=True)
class Triplet:
    subject: str
    predicate: str
    object: str

    def __post_init__(self):
        if not (self.subject and self.predicate and self.object):
            raise ValidationError(f"triplet fields must be non-empty: {self}")


def load_triplets(path) -> list[Triplet]:
    """Read triplets from a tab-separated file or JSONL with subject/predicate/object."""
    triplets = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if line.lstrip().startswith("{"):
                d = json.loads(line)
                try:
                    triplets.append(Triplet(d["subject"], d["predicate"], d["object"]))
                except KeyError as exc:
                    raise DataParseError(f"{path}:{lineno}: missing field {exc}")
            else:
                cols = line.split("\t")
                if len(cols) != 3:
                    raise DataParseError(f"{path}:{lineno}: expected 3 tab-separated fields")
                triplets.append(Triplet(*cols))
    return triplets


def sample_subgraph(triplets: Sequence[Triplet], k: int, seed) -> list[Triplet]:
    """``k`` distinct triplets (by position), deterministic under ``seed``."""
    if k < 0 or k > len(triplets):
        raise ValidationError(f"cannot sample {k} of {len(triplets)} triplets")
    return random.Random(seed).sample(list(triplets), k)


_SLOT = re.compile(r"\{(\w+)\}")


def fill_slots(template: str, values: Mapping[str, str], required: Iterable[str]) -> str:
    missing = [name for name in required if "{" + name + "}" not in template]
    if missing:
        raise TemplateError(f"template {template!r} lacks slot(s) {missing}")
    return _SLOT.sub(lambda m: values[m.group(1)] if m.group(1) in values else m.group(0), template)


def kg_to_text(triplets: Iterable[Triplet], template: str) -> list[str]:
    """One sentence per triplet by substituting ``{s}``, ``{p}``, ``{o}``."""
    for slot in ("s", "p", "o"):
        if "{" + slot + "}" not in template:
            raise TemplateError(f"template {template!r} lacks slot {{{slot}}}")
    return [fill_slots(template, {"s": t.subject, "p": t.predicate, "o": t.object}, ()) for t in triplets]


def exam_to_text(items: Iterable[Mapping[str, str]], template: str) -> list[str]:
    """Rewrite exam items (question/answer/explanation) into knowledge-point text."""
    required = ("question", "answer", "explanation")
    fill_slots(template, {}, required)
    return [fill_slots(template, item, required) for item in items]


def with_extra_context(record: McqRecord, block: str) -> McqRecord:
    return replace(record, contexts=record.contexts + (block,))
