"""Accuracy scoring, plain-text reports, and the three stage training recipes."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

import yaml

from .corpus import Dataset, dump_line
from .errors import DataParseError, ValidationError

MISSING = "<missing>"


@dataclass(frozen=True)
class EvalReport:
    accuracy: float
    n: int
    per_label: dict[str, tuple[int, int]]
    labels: tuple[str, ...]
    confusion: tuple[tuple[int, ...], ...]  # rows: gold label, columns: predicted label

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "n": self.n,
            "per_label": {k: {"correct": c, "total": t} for k, (c, t) in self.per_label.items()},
            "labels": list(self.labels),
            "confusion": [list(r) for r in self.confusion],
        }


def load_predictions(path) -> dict[str, str]:
    preds = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                rid, label = str(d["id"]), d["label"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DataParseError(f"{path}:{lineno}: {exc}")
            if rid in preds:
                raise DataParseError(f"{path}:{lineno}: duplicate prediction", rid)
            preds[rid] = label
    return preds


def write_predictions(path, predictions: Mapping[str, str]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for rid in sorted(predictions):
            f.write(dump_line({"id": rid, "label": predictions[rid]}) + "\n")


def score(predictions: Mapping[str, str], gold: Dataset, allow_missing: bool = False) -> EvalReport:
    """Compare predicted labels with the gold labels of every labeled record.

    A gold id without a prediction is an error unless ``allow_missing``, in
    which case it counts as wrong (column ``<missing>`` of the confusion matrix).
    """
    labeled = [r for r in gold if r.gold is not None]
    if not labeled:
        raise ValidationError("gold set has no labeled records")
    missing = [r.id for r in labeled if r.id not in predictions]
    if missing and not allow_missing:
        shown = ", ".join(missing[:20]) + (" ..." if len(missing) > 20 else "")
        raise ValidationError(f"{len(missing)} gold record(s) lack a prediction: {shown}")

    labels: list[str] = []
    for rec in labeled:
        for _, text in rec.options:
            if text not in labels:
                labels.append(text)
    extra = sorted({predictions[r.id] for r in labeled if r.id in predictions} - set(labels))
    labels += extra
    if missing:
        labels.append(MISSING)
    col = {label: i for i, label in enumerate(labels)}

    confusion = [[0] * len(labels) for _ in labels]
    per_label: dict[str, list[int]] = {}
    correct_total = 0
    for rec in labeled:
        g = rec.gold_label
        p = predictions.get(rec.id, MISSING)
        confusion[col[g]][col[p]] += 1
        stats = per_label.setdefault(g, [0, 0])
        stats[1] += 1
        if p == g:
            stats[0] += 1
            correct_total += 1
    return EvalReport(
        accuracy=correct_total / len(labeled),
        n=len(labeled),
        per_label={k: (c, t) for k, (c, t) in per_label.items()},
        labels=tuple(labels),
        confusion=tuple(tuple(r) for r in confusion),
    )


def _check_accuracy(acc: float, what: str) -> None:
    if not (0.0 <= acc <= 1.0):
        raise ValidationError(f"{what}: accuracy {acc} outside [0, 1]")


def render_stage_report(stage_results: Sequence[tuple[str, float]]) -> str:
    """Table of per-stage accuracy; a stage that scores below its predecessor is flagged."""
    if not stage_results:
        raise ValidationError("no stage results to report")
    for name, acc in stage_results:
        _check_accuracy(acc, name)
    width = max(5, *(len(name) for name, _ in stage_results))
    lines = [f"{'stage':<{width}}  {'accuracy':>8}  {'change':>7}  flag"]
    prev = None
    for name, acc in stage_results:
        change = "" if prev is None else f"{100 * (acc - prev):+.1f}"
        flag = "DECREASE" if prev is not None and acc < prev else ""
        lines.append(f"{name:<{width}}  {100 * acc:>7.1f}%  {change:>7}  {flag}".rstrip())
        prev = acc
    return "\n".join(lines)


def load_reference(name: str) -> dict:
    return json.loads(resources.files("medadapt.data").joinpath(name).read_text(encoding="utf-8"))


def reference_stage_results() -> list[tuple[str, float]]:
    return [(s["stage"], s["accuracy"]) for s in load_reference("stage_reference.json")["stages"]]


def render_leaderboard(reference_rows: Sequence[Mapping] | None = None, our_row: Mapping | None = None) -> str:
    """Leaderboard sorted by accuracy (descending). Reference rows carry percent
    accuracies; ``our_row`` carries a fraction in [0, 1] and is marked ``measured``."""
    if reference_rows is None:
        reference_rows = load_reference("leaderboard.json")["rows"]
    rows = [(r["model"], str(r.get("size", "NA")), float(r["accuracy"]), "reported") for r in reference_rows]
    if our_row is not None:
        acc = float(our_row["accuracy"])
        _check_accuracy(acc, our_row.get("model", "ours"))
        rows.append((our_row.get("model", "ours"), str(our_row.get("size", "NA")), 100 * acc, "measured"))
    rows.sort(key=lambda r: -r[2])
    mw = max(5, *(len(r[0]) for r in rows))
    sw = max(4, *(len(r[1]) for r in rows))
    lines = [f"{'#':>2}  {'model':<{mw}}  {'size':<{sw}}  {'accuracy':>8}  source"]
    for i, (model, size, acc, source) in enumerate(rows, 1):
        lines.append(f"{i:>2}  {model:<{mw}}  {size:<{sw}}  {acc:>8.1f}  {source}")
    return "\n".join(lines)


STAGES = ("knowledge_injection", "instruction_tuning", "task_adaptation")


@dataclass(frozen=True)
class StageRecipe:
    """Training hyperparameters of one stage. ``None`` marks a value that was never stated."""

    stage: str
    optimizer: str | None
    learning_rate: float
    schedule: str
    beta1: float | None = None
    beta2: float | None = None
    weight_decay: float | None = None
    grad_clip: float | None = None
    batch_size: int | None = None
    epochs: int | None = None
    warmup_ratio: float | None = None
    min_lr_ratio: float | None = None
    adapters: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValidationError(f"unknown stage {self.stage!r}")
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, (int, float)) and not isinstance(v, bool) and v <= 0:
                raise ValidationError(f"{f.name} must be positive, got {v}")

    def to_dict(self) -> dict:
        return asdict(self)


_RECIPES = {
    "knowledge_injection": dict(
        optimizer="adam", learning_rate=7e-6, schedule="cosine", min_lr_ratio=0.1,
        beta1=0.9, beta2=0.95, weight_decay=0.1, grad_clip=1.0, batch_size=256,
    ),
    "instruction_tuning": dict(
        optimizer=None, learning_rate=6e-6, schedule="cosine", weight_decay=0.1, grad_clip=1.0, batch_size=360,
    ),
    "task_adaptation": dict(
        optimizer="adamw", learning_rate=5e-5, schedule="linear", weight_decay=0.01, warmup_ratio=0.06,
        batch_size=12, epochs=10,
        adapters={"lora": {"rank": 8}, "cpoly": {"shared": 4, "task_specific": 1, "rank": 4}},
    ),
}


def emit_recipe(stage: str) -> StageRecipe:
    if stage not in _RECIPES:
        raise ValidationError(f"unknown stage {stage!r}; expected one of {STAGES}")
    return StageRecipe(stage=stage, **_RECIPES[stage])


def write_recipe(recipe: StageRecipe, path) -> None:
    Path(path).write_text(yaml.safe_dump(recipe.to_dict(), sort_keys=False), encoding="utf-8")


def read_recipe(path) -> StageRecipe:
    data = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    if not isinstance(data, dict):
        raise DataParseError(f"{path}: not a recipe mapping")
    return StageRecipe(**data)
