import json
from pathlib import Path

import pytest

from medadapt.corpus import PUBMEDQA_OPTIONS, Dataset, McqRecord

DATA = Path(__file__).parent / "data"


def pubmedqa_item(label=None, question="Is it true?", contexts=("Some context here.",), long_answer="It is."):
    item = {"QUESTION": question, "CONTEXTS": list(contexts), "LONG_ANSWER": long_answer}
    if label is not None:
        item["final_decision"] = label
    return item


def write_pubmedqa(path, labels, long_answer="It is.", first_id=10000):
    """Official-format file; ``labels`` holds one final_decision (or None) per record."""
    data = {str(first_id + i): pubmedqa_item(label, question=f"Question number {i}?", long_answer=long_answer)
            for i, label in enumerate(labels)}
    Path(path).write_text(json.dumps(data), encoding="utf-8")
    return path


def labeled(rid, label, subset="PQA-L"):
    key = dict((t, k) for k, t in PUBMEDQA_OPTIONS)[label]
    return McqRecord(rid, f"question {rid}?", (f"context for {rid}.",), PUBMEDQA_OPTIONS, key, f"long {rid}", subset)


def unlabeled(rid, long_answer="The finding holds."):
    return McqRecord(rid, f"question {rid}?", (f"context for {rid}.",), PUBMEDQA_OPTIONS, None, long_answer, "PQA-U")


@pytest.fixture
def golden():
    return json.loads((DATA / "voc_golden.json").read_text(encoding="utf-8"))


@pytest.fixture
def pqal_1000():
    labels = ["yes"] * 552 + ["no"] * 338 + ["maybe"] * 110
    return Dataset([labeled(f"r{i:04d}", l) for i, l in enumerate(labels)], "PQA-L")


LABEL_KEYS = {"yes": "A", "no": "B", "maybe": "C"}


def annotation_script(records, labels, unparseable=()):
    """Mock script answering every record of a PQA-U corpus in both annotation modes.

    Rules are record-specific through text each step embeds from the previous
    one: the final prompt quotes the step-2 judgment, the step-2 prompt quotes
    the last explanation. Finals come first because later prompts quote the
    earlier directives.
    """
    from medadapt.backend import MockScript

    finals, judges, plans, directs = [], [], [], []
    for rec, label in zip(records, labels):
        reply = "I cannot decide" if rec.id in unparseable else f"Answer: {LABEL_KEYS[label]}"
        judgment = f"Judgment for {rec.id}: the {label} reasoning is complete."
        finals.append({"match": f"{judgment}\n\nGenerate the final response.", "reply": reply})
        last_key, last_text = rec.options[-1]
        judges.append({"match": f"Explanation {last_key} for {rec.id}.\n\nPlease judge the", "reply": judgment})
        stem = f"QUESTION: {rec.question}\n" + "  ".join(f"{k}) {t}" for k, t in rec.options)
        for k, t in rec.options:
            plans.append({"match": f"{stem}\n\nThink about why the answer is {k}) {t}.", "reply": f"Explanation {k} for {rec.id}."})
        directs.append({"match": f"{stem}\n\nReply in the form", "reply": reply})
    return MockScript.from_dict({"rules": finals + judges + plans + directs})


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
