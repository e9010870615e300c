"""Pseudo-labeling of unlabeled PubMedQA records from their long answers.

Two modes: ``long_answer_only`` asks one direct question with the long answer
added as an extra context block; ``long_answer_plus_voc`` runs the full VoC
pipeline over the same augmented record. Replies that cannot be parsed leave
the record unannotated; nothing is defaulted.
"""

from __future__ import annotations

import json
import logging
import os
from collections import Counter
from concurrent.futures import FIRST_EXCEPTION, ThreadPoolExecutor, wait
from dataclasses import dataclass, replace
from pathlib import Path

from .backend import Backend
from .corpus import Dataset, McqRecord, dump_line, with_extra_context
from .errors import ValidationError
from .prompting import ChoiceParseError, Strategy, Transcript, run_strategy

log = logging.getLogger(__name__)

MODES = ("long_answer_only", "long_answer_plus_voc")
LONG_ANSWER_PREFIX = "LONG ANSWER. "


@dataclass(frozen=True)
class PseudoLabel:
    """``label`` is the option text (yes/no/maybe), or None when unannotated."""

    record_id: str
    label: str | None
    source: str
    transcript_ref: str | None = None
    judgment: str | None = None

    @property
    def annotated(self) -> bool:
        return self.label is not None


def _check_pre(record: McqRecord, mode: str) -> None:
    if mode not in MODES:
        raise ValidationError(f"unknown annotation mode {mode!r}; expected one of {MODES}")
    if record.long_answer is None:
        raise ValidationError(f"record {record.id!r} has no long answer")
    if record.gold is not None:
        raise ValidationError(f"record {record.id!r} already has a gold label")


def annotate_record(
    record: McqRecord,
    backend: Backend,
    mode: str = "long_answer_plus_voc",
    *,
    templates=None,
    temperature: float = 0.0,
    max_tokens: int = 512,
    transcript_ref: str | None = None,
) -> tuple[PseudoLabel, Transcript]:
    _check_pre(record, mode)
    augmented = with_extra_context(record, LONG_ANSWER_PREFIX + record.long_answer)
    strategy = Strategy("VoC" if mode == "long_answer_plus_voc" else "Direct", templates or {})
    try:
        decision, transcript = run_strategy(strategy, augmented, backend, temperature=temperature, max_tokens=max_tokens)
    except ChoiceParseError as exc:
        log.info("record %s left unannotated: %s", record.id, exc)
        return PseudoLabel(record.id, None, mode, transcript_ref, exc.transcript.verification), exc.transcript
    label = record.option_text(decision.choice)
    return PseudoLabel(record.id, label, mode, transcript_ref, transcript.verification), transcript


def _paths(out_path) -> dict[str, Path]:
    out = Path(out_path)
    return {
        "out": out,
        "summary": out.with_name(out.name + ".summary.json"),
        "transcripts": out.with_name(out.name + ".transcripts.jsonl"),
        "checkpoint": out.with_name(out.name + ".ckpt.jsonl"),
    }


def _atomic_write(path: Path, lines) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as f:
        for line in lines:
            f.write(line + "\n")
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def _read_checkpoint(path: Path) -> dict[str, dict]:
    if not path.exists():
        return {}
    entries = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                entry = json.loads(line)
                entries[entry["id"]] = entry
    return entries


def _entry(pl: PseudoLabel, transcript: Transcript) -> dict:
    return {
        "id": pl.record_id,
        "label": pl.label,
        "source": pl.source,
        "judgment": pl.judgment,
        "transcript": transcript.to_dict(),
    }


def annotate_corpus(
    dataset: Dataset,
    backend: Backend,
    mode: str,
    concurrency_limit: int,
    out_path,
    *,
    templates=None,
    temperature: float = 0.0,
    max_tokens: int = 512,
    checkpoint_every: int = 32,
) -> dict:
    """Annotate every record and write the pseudo-labeled set, transcripts and summary.

    Progress is checkpointed to ``<out>.ckpt.jsonl`` (write-then-rename); a
    rerun skips every id already in the checkpoint, so an interrupted run can
    be resumed and a finished one costs no backend calls. Outputs are sorted by
    record id and serialized canonically, making them byte-stable.
    """
    for rec in dataset:
        _check_pre(rec, mode)
    paths = _paths(out_path)
    transcripts_name = paths["transcripts"].name
    done = _read_checkpoint(paths["checkpoint"])
    todo = sorted((r for r in dataset if r.id not in done), key=lambda r: r.id)
    log.info("annotating %d records (%d already checkpointed)", len(todo), len(done))

    def flush():
        _atomic_write(paths["checkpoint"], (dump_line(done[k]) for k in sorted(done)))

    def work(rec: McqRecord):
        return annotate_record(
            rec, backend, mode, templates=templates, temperature=temperature, max_tokens=max_tokens,
            transcript_ref=f"{transcripts_name}#{rec.id}",
        )

    since_flush = 0
    if todo:
        with ThreadPoolExecutor(max_workers=max(1, concurrency_limit)) as pool:
            futures = {pool.submit(work, rec): rec for rec in todo}
            pending = set(futures)
            try:
                while pending:
                    finished, pending = wait(pending, return_when=FIRST_EXCEPTION)
                    failure = None
                    for fut in finished:
                        if fut.exception() is not None:
                            failure = failure or fut.exception()
                            continue
                        pl, transcript = fut.result()
                        done[pl.record_id] = _entry(pl, transcript)
                        since_flush += 1
                    if failure is not None:
                        for fut in pending:
                            fut.cancel()
                        raise failure
                    if since_flush >= checkpoint_every:
                        flush()
                        since_flush = 0
            finally:
                # completed work survives an abort
                if since_flush:
                    flush()
    elif not paths["checkpoint"].exists():
        flush()

    ids = sorted(r.id for r in dataset)
    records_out, transcripts_out = [], []
    labels = Counter()
    unannotated = []
    for rid in ids:
        entry = done[rid]
        transcripts_out.append(dump_line(entry["transcript"]))
        if entry["label"] is None:
            unannotated.append(rid)
            continue
        rec = dataset.get(rid)
        labeled = replace(rec, gold=rec.key_for_text(entry["label"]), pseudo_source=entry["source"])
        d = labeled.to_dict()
        d["pseudo"] = {
            "label": entry["label"],
            "source": entry["source"],
            "transcript_ref": f"{transcripts_name}#{rid}",
            "judgment": entry["judgment"],
        }
        records_out.append(dump_line(d))
        labels[entry["label"]] += 1

    summary = {
        "mode": mode,
        "total": len(ids),
        "annotated": len(records_out),
        "unannotated": len(unannotated),
        "unannotated_ids": unannotated,
        "label_distribution": dict(sorted(labels.items())),
    }
    _atomic_write(paths["out"], records_out)
    _atomic_write(paths["transcripts"], transcripts_out)
    _atomic_write(paths["summary"], [json.dumps(summary, sort_keys=True, indent=2)])
    return {**summary, "processed_this_run": len(todo)}


def merge_pseudo(labeled: Dataset, pseudo: Dataset) -> Dataset:
    """Union of gold-labeled and pseudo-labeled records; ids must not collide."""
    collisions = sorted(set(labeled.ids) & set(pseudo.ids))
    if collisions:
        shown = ", ".join(collisions[:20]) + (" ..." if len(collisions) > 20 else "")
        raise ValidationError(f"{len(collisions)} id collision(s): {shown}")
    tagged = [r if r.pseudo_source else replace(r, pseudo_source="pseudo") for r in pseudo]
    return Dataset(list(labeled) + tagged)
