"""Prompt pipelines for multi-choice questions: Direct, CoT, CoVe and
Verification-of-Choice (VoC).

Templates use double-brace slots (``{{question}}``). Rendering is a pure
function of the strategy and the record, so prompts are byte-stable across
runs. Every backend call is kept in the transcript in issue order.
"""

from __future__ import annotations

import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from .backend import Backend, BackendError, BackendRequest, Completion
from .corpus import McqRecord
from .errors import MedadaptError, TemplateError, ValidationError

STRATEGY_KINDS = ("Direct", "CoT", "CoVe", "VoC")
PUBMEDQA_LABELS = ("yes", "no", "maybe")

_ANSWER_FORMAT = 'Reply in the form "Answer: <letter>".'
_STEM = "{{contexts}}\nQUESTION: {{question}}\n{{options}}"

DEFAULT_TEMPLATES: dict[str, str] = {
    "direct": _STEM + "\n\n" + _ANSWER_FORMAT,
    "cot": _STEM + "\n\nLet's think step by step. After your reasoning, " + _ANSWER_FORMAT[0].lower() + _ANSWER_FORMAT[1:],
    "cove_plan": _STEM
    + "\n\nDraft response:\n{{draft}}\n\nPlan verification questions to fact-check the draft response. Write one question per line.",
    "cove_verify": "{{contexts}}\nQUESTION: {{verification_question}}\nAnswer concisely.",
    "cove_final": _STEM
    + "\n\nDraft response:\n{{draft}}\n\nVerification:\n{{verification}}\n\nRevise the draft in light of the verification. "
    + _ANSWER_FORMAT,
    "voc_plan": _STEM + "\n\nThink about why the answer is {{option}}.",
    "voc_execute": _STEM
    + "\n\n{{explanations}}\n\nPlease judge the {{labels}} thinking process according to its logical completeness and context.",
    "voc_final": _STEM + "\n\n{{explanations}}\n\n{{verification}}\n\nGenerate the final response. " + _ANSWER_FORMAT,
}

_SLOT = re.compile(r"\{\{\s*(\w+)\s*\}\}")


def render(template: str, slots: Mapping[str, str]) -> str:
    missing = sorted({m.group(1) for m in _SLOT.finditer(template)} - set(slots))
    if missing:
        raise TemplateError(f"template references unsupplied slot(s): {missing}")
    return _SLOT.sub(lambda m: slots[m.group(1)], template)


def load_templates(directory) -> dict[str, str]:
    """Read ``<name>.txt`` overrides from a templates directory."""
    out = {}
    for path in sorted(Path(directory).glob("*.txt")):
        if path.stem not in DEFAULT_TEMPLATES:
            raise TemplateError(f"unknown template name {path.stem!r} in {directory}")
        out[path.stem] = path.read_text(encoding="utf-8").rstrip("\n")
    return out


@dataclass(frozen=True)
class Strategy:
    kind: str = "VoC"
    templates: Mapping[str, str] = field(default_factory=dict)
    max_verification_questions: int = 5

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ValidationError(f"unknown strategy {self.kind!r}; expected one of {STRATEGY_KINDS}")
        unknown = set(self.templates) - set(DEFAULT_TEMPLATES)
        if unknown:
            raise TemplateError(f"unknown template names {sorted(unknown)}")

    def template(self, name: str) -> str:
        return self.templates.get(name, DEFAULT_TEMPLATES[name])


@dataclass(frozen=True)
class Decision:
    choice: str
    normalized_label: str | None
    parse_confidence: str

    def to_dict(self) -> dict:
        return {"choice": self.choice, "normalized_label": self.normalized_label, "parse_confidence": self.parse_confidence}

    @classmethod
    def from_dict(cls, d) -> "Decision":
        return cls(d["choice"], d.get("normalized_label"), d["parse_confidence"])


@dataclass(frozen=True)
class Exchange:
    step: str
    prompt: str
    completion: Completion

    def to_dict(self) -> dict:
        return {"step": self.step, "prompt": self.prompt, "completion": self.completion.to_dict()}

    @classmethod
    def from_dict(cls, d) -> "Exchange":
        return cls(d["step"], d["prompt"], Completion.from_dict(d["completion"]))


@dataclass
class Transcript:
    """Audit trail of one strategy run. ``plan`` and ``verification`` are the VoC
    step-1 explanations (per option key) and step-2 judgment."""

    record_id: str
    strategy: str
    plan: dict[str, str] = field(default_factory=dict)
    verification: str | None = None
    final: Decision | None = None
    raw_exchanges: list[Exchange] = field(default_factory=list)
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "record_id": self.record_id,
            "strategy": self.strategy,
            "plan": dict(self.plan),
            "verification": self.verification,
            "final": None if self.final is None else self.final.to_dict(),
            "raw_exchanges": [e.to_dict() for e in self.raw_exchanges],
            "extras": dict(self.extras),
        }

    @classmethod
    def from_dict(cls, d) -> "Transcript":
        return cls(
            record_id=d["record_id"],
            strategy=d["strategy"],
            plan=dict(d.get("plan") or {}),
            verification=d.get("verification"),
            final=None if d.get("final") is None else Decision.from_dict(d["final"]),
            raw_exchanges=[Exchange.from_dict(e) for e in d.get("raw_exchanges", ())],
            extras=dict(d.get("extras") or {}),
        )


VocTranscript = Transcript


class PromptingError(MedadaptError):
    def __init__(self, message: str, transcript: Transcript | None = None):
        super().__init__(message)
        self.transcript = transcript


class ChoiceParseError(PromptingError):
    category = "parse"


# -- rendering ------------------------------------------------------------


def format_option(key: str, text: str) -> str:
    return f"{key}) {text}"


def base_slots(record: McqRecord) -> dict[str, str]:
    return {
        "question": record.question,
        "contexts": "\n".join(record.contexts),
        "options": "  ".join(format_option(k, t) for k, t in record.options),
        "labels": "/".join(t for _, t in record.options),
    }


def render_voc_plan(record: McqRecord, strategy: Strategy | None = None) -> list[str]:
    """One step-1 prompt per option, in option order."""
    strategy = strategy or Strategy("VoC")
    if not record.options:
        raise ValidationError("record has no options")
    slots = base_slots(record)
    template = strategy.template("voc_plan")
    return [render(template, {**slots, "option": format_option(k, t)}) for k, t in record.options]


def render_explanations(record: McqRecord, plan: Mapping[str, str]) -> str:
    missing = [k for k in record.option_keys if k not in plan]
    if missing:
        raise ValidationError(f"plan lacks explanations for option(s) {missing}")
    extra = sorted(set(plan) - set(record.option_keys))
    if extra:
        raise ValidationError(f"plan has explanations for unknown option(s) {extra}")
    blocks = [f"Think about why the answer is {format_option(k, t)}.\n\n{plan[k]}" for k, t in record.options]
    return "\n\n".join(blocks)


def render_voc_execute(record: McqRecord, plan: Mapping[str, str], strategy: Strategy | None = None) -> str:
    strategy = strategy or Strategy("VoC")
    slots = {**base_slots(record), "explanations": render_explanations(record, plan)}
    return render(strategy.template("voc_execute"), slots)


def render_voc_final(record: McqRecord, plan: Mapping[str, str], verification: str, strategy: Strategy | None = None) -> str:
    strategy = strategy or Strategy("VoC")
    slots = {**base_slots(record), "explanations": render_explanations(record, plan), "verification": verification}
    return render(strategy.template("voc_final"), slots)


# -- parsing --------------------------------------------------------------


def _normalized(text: str) -> str | None:
    label = text.strip().strip(".").lower()
    return label if label in PUBMEDQA_LABELS else None


def parse_choice(text: str, options: Sequence[tuple[str, str]]) -> Decision:
    """Map a free-text reply onto an option.

    Tried in order: a reply that is just a key, or an explicit ``Answer: X``
    (last one wins), both with confidence ``exact``; ``X)`` or ``answer is X``
    forms (``pattern``); a unique option text occurring as a whole word
    (``fallback``). Keys match case-sensitively except directly after ``Answer:``.
    """
    options = [(str(k), str(t)) for k, t in options]
    if not options:
        raise ValidationError("options must be non-empty")
    texts = dict(options)
    keys = sorted(texts, key=len, reverse=True)
    alt = "|".join(re.escape(k) for k in keys)

    def decide(key: str, confidence: str) -> Decision:
        return Decision(key, _normalized(texts[key]), confidence)

    bare = text.strip().rstrip(".")
    if bare in texts:
        return decide(bare, "exact")

    # after an explicit "Answer:" a lowercase key is accepted when keys stay distinct
    folded = {k.lower(): k for k in keys}
    if len(folded) == len(keys):
        exact = re.findall(rf"(?i:answer)\**\s*[:：]\s*\**\s*\(?\s*((?i:{alt}))(?![A-Za-z0-9])", text)
        exact = [folded[k.lower()] for k in exact]
    else:
        exact = re.findall(rf"(?i:answer)\**\s*[:：]\s*\**\s*\(?\s*({alt})(?![A-Za-z0-9])", text)
    if exact:
        return decide(exact[-1], "exact")

    stated = re.findall(rf"(?i:answer\s+is)\s*:?\s*\(?({alt})(?![A-Za-z0-9(])", text)
    if stated:
        return decide(stated[-1], "pattern")
    paren = set(re.findall(rf"(?<![A-Za-z0-9])\(?({alt})\)", text))
    if len(paren) == 1:
        return decide(paren.pop(), "pattern")

    hits = [
        k for k, t in options
        if t.strip() and re.search(rf"(?<![A-Za-z0-9]){re.escape(t.strip())}(?![A-Za-z0-9])", text, re.IGNORECASE)
    ]
    if len(hits) == 1:
        return decide(hits[0], "fallback")
    why = "ambiguous" if hits else "no option found"
    raise ChoiceParseError(f"cannot parse a choice ({why}) from {text[:80]!r}")


# -- execution ------------------------------------------------------------


def _call(backend: Backend, transcript: Transcript, step: str, prompt: str, temperature: float, max_tokens: int) -> str:
    completion = backend.complete(BackendRequest(prompt=prompt, max_tokens=max_tokens, temperature=temperature))
    transcript.raw_exchanges.append(Exchange(step, prompt, completion))
    return completion.text


def _finish(transcript: Transcript, text: str, record: McqRecord) -> Decision:
    try:
        decision = parse_choice(text, record.options)
    except ChoiceParseError as exc:
        exc.transcript = transcript
        raise
    transcript.final = decision
    return decision


def _run_voc(strategy, record, backend, transcript, temperature, max_tokens, concurrency):
    prompts = render_voc_plan(record, strategy)
    request = lambda p: backend.complete(BackendRequest(prompt=p, max_tokens=max_tokens, temperature=temperature))

    # step-1 calls are independent; results are recorded in option order
    if concurrency > 1 and len(prompts) > 1:
        with ThreadPoolExecutor(max_workers=min(concurrency, len(prompts))) as pool:
            futures = [pool.submit(request, p) for p in prompts]
            results = []
            for f in futures:
                try:
                    results.append(f.result())
                except BackendError as exc:
                    results.append(exc)
    else:
        results = []
        for p in prompts:
            try:
                results.append(request(p))
            except BackendError as exc:
                results.append(exc)
                break
    for (key, _), prompt, result in zip(record.options, prompts, results):
        if isinstance(result, BaseException):
            raise result
        transcript.raw_exchanges.append(Exchange(f"plan:{key}", prompt, result))
        transcript.plan[key] = result.text

    judgment = _call(backend, transcript, "execute", render_voc_execute(record, transcript.plan, strategy), temperature, max_tokens)
    transcript.verification = judgment
    reply = _call(
        backend, transcript, "final", render_voc_final(record, transcript.plan, judgment, strategy), temperature, max_tokens
    )
    return _finish(transcript, reply, record)


_QUESTION_PREFIX = re.compile(r"^\s*(?:[-*•]|\(?\d+[.)]|Q\d*[:.])\s*")


def _verification_questions(text: str, limit: int) -> list[str]:
    questions = []
    for line in text.splitlines():
        q = _QUESTION_PREFIX.sub("", line).strip()
        if q:
            questions.append(q)
    return questions[:limit]


def _run_cove(strategy, record, backend, transcript, temperature, max_tokens):
    slots = base_slots(record)
    draft = _call(backend, transcript, "draft", render(strategy.template("cot"), slots), temperature, max_tokens)
    plan_text = _call(
        backend, transcript, "plan", render(strategy.template("cove_plan"), {**slots, "draft": draft}), temperature, max_tokens
    )
    questions = _verification_questions(plan_text, strategy.max_verification_questions)
    answers = []
    # each verification question sees only the source contexts, never the draft
    for i, q in enumerate(questions):
        prompt = render(strategy.template("cove_verify"), {**slots, "verification_question": q})
        answers.append(_call(backend, transcript, f"verify:{i}", prompt, temperature, max_tokens))
    verification = "\n".join(f"Q: {q}\nA: {a}" for q, a in zip(questions, answers)) or "(no verification questions)"
    transcript.verification = verification
    transcript.extras.update(draft=draft, questions=questions)
    reply = _call(
        backend,
        transcript,
        "final",
        render(strategy.template("cove_final"), {**slots, "draft": draft, "verification": verification}),
        temperature,
        max_tokens,
    )
    return _finish(transcript, reply, record)


def run_strategy(
    strategy: Strategy,
    record: McqRecord,
    backend: Backend,
    *,
    temperature: float = 0.0,
    max_tokens: int = 512,
    concurrency: int = 1,
) -> tuple[Decision, Transcript]:
    """Run one strategy on one record.

    Backend errors propagate with the partial transcript attached as
    ``exc.transcript``; an unparseable final reply raises ``ChoiceParseError``.
    """
    if not record.options:
        raise ValidationError("record has no options")
    transcript = Transcript(record_id=record.id, strategy=strategy.kind)
    try:
        if strategy.kind == "VoC":
            decision = _run_voc(strategy, record, backend, transcript, temperature, max_tokens, concurrency)
        elif strategy.kind == "CoVe":
            decision = _run_cove(strategy, record, backend, transcript, temperature, max_tokens)
        else:
            name = "direct" if strategy.kind == "Direct" else "cot"
            reply = _call(backend, transcript, name, render(strategy.template(name), base_slots(record)), temperature, max_tokens)
            decision = _finish(transcript, reply, record)
    except BackendError as exc:
        exc.transcript = transcript
        raise
    return decision, transcript
