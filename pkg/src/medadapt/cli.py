"""``medadapt`` command line.

Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 invalid input.
Failures print one line ``error: <category>: <message>`` on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import annotator, corpus, cpoly, evalharness, glm_prep, ppl_ranker, prompting
from .backend import build_backend
from .errors import MedadaptError, ValidationError

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_VALIDATION = 0, 1, 2, 3
COMMANDS = (
    "ingest", "stats", "split", "prep-glm", "voc-run", "ppl-rank",
    "annotate", "merge", "score", "report", "cpoly-check", "emit-recipe",
)
CPOLY_TOLERANCE = 1e-4

log = logging.getLogger("medadapt")


class UsageError(MedadaptError):
    category = "usage"


@dataclass
class RunConfig:
    backend: dict = field(default_factory=dict)
    paths: dict = field(default_factory=dict)
    strategy: dict = field(default_factory=dict)
    seed: int | None = None
    base_dir: Path = Path(".")

    @classmethod
    def load(cls, path: str | None) -> "RunConfig":
        if path is None:
            return cls()
        p = Path(path)
        if not p.exists():
            raise ValidationError(f"config file {path} does not exist")
        data = yaml.safe_load(p.read_text(encoding="utf-8")) or {}
        if not isinstance(data, dict):
            raise ValidationError(f"config file {path} must hold a mapping")
        unknown = set(data) - {"backend", "paths", "strategy", "seed"}
        if unknown:
            raise ValidationError(f"unknown config section(s): {sorted(unknown)}")
        cfg = cls(
            backend=dict(data.get("backend") or {}),
            paths=dict(data.get("paths") or {}),
            strategy=dict(data.get("strategy") or {}),
            seed=data.get("seed"),
            base_dir=p.parent,
        )
        if cfg.backend and bool(cfg.backend.get("endpoint")) == bool(cfg.backend.get("mock")):
            raise ValidationError("backend section needs exactly one of 'endpoint' or 'mock'")
        return cfg


# -- helpers --------------------------------------------------------------


def _path(args, cfg: RunConfig, flag: str, key: str, required: bool = True) -> Path | None:
    value = getattr(args, flag, None) or cfg.paths.get(key)
    if value is None and required:
        raise UsageError(f"missing --{flag.replace('_', '-')} (or paths.{key} in the config)")
    return None if value is None else Path(value)


def _input(args, cfg, flag="input", key="data_in") -> Path:
    p = _path(args, cfg, flag, key)
    if not p.exists():
        raise ValidationError(f"input {p} does not exist")
    return p


def _seed(args, cfg: RunConfig) -> int:
    seed = args.seed if args.seed is not None else cfg.seed
    if seed is None:
        raise UsageError("this command samples; give --seed or a 'seed' in the config")
    return int(seed)


def _backend(args, cfg: RunConfig):
    section = dict(cfg.backend)
    if args.mock:
        section.pop("endpoint", None)
        section["mock"] = str(Path(args.mock).resolve())
    if args.endpoint:
        section.pop("mock", None)
        section["endpoint"] = args.endpoint
    if not section:
        raise UsageError("no backend configured (use --mock/--endpoint or a backend section)")
    if bool(section.get("endpoint")) == bool(section.get("mock")):
        raise ValidationError("backend needs exactly one of endpoint or mock")
    if args.dry_run and section.get("endpoint"):
        return None  # no network during a dry run
    return build_backend(section, base_dir=cfg.base_dir)


def _templates(cfg: RunConfig) -> dict:
    templates = {}
    tdir = cfg.paths.get("templates_dir")
    if tdir:
        templates.update(prompting.load_templates(tdir))
    templates.update(cfg.strategy.get("templates") or {})
    return templates


def _temperature(args, cfg) -> float:
    return float(args.temperature if getattr(args, "temperature", None) is not None else cfg.strategy.get("temperature", 0.0))


def _concurrency(args, cfg) -> int:
    if getattr(args, "concurrency", None) is not None:
        return args.concurrency
    return int(cfg.backend.get("concurrency", 1))


def _write_lines(path: Path, lines) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for line in lines:
            f.write(line + "\n")


def _dry(args, what: str) -> int:
    print(f"dry-run: {what}; nothing written")
    return EXIT_OK


# -- commands -------------------------------------------------------------


def cmd_ingest(args, cfg):
    src = _input(args, cfg)
    out = _path(args, cfg, "output", "data_out")
    if args.kind == "triplets":
        triplets = corpus.load_triplets(src)
        if args.sample is not None:
            triplets = corpus.sample_subgraph(triplets, args.sample, _seed(args, cfg))
        sentences = corpus.kg_to_text(triplets, args.template)
        if args.dry_run:
            return _dry(args, f"{len(sentences)} sentences from {src}")
        _write_lines(out, sentences)
        print(f"wrote {len(sentences)} sentences to {out}")
        return EXIT_OK
    ds = corpus.load_records(src, args.subset)
    if args.dry_run:
        return _dry(args, f"{len(ds)} valid records in {src}")
    out.parent.mkdir(parents=True, exist_ok=True)
    ds.to_jsonl(out)
    print(f"wrote {len(ds)} records to {out}")
    return EXIT_OK


def _format_stats(report: corpus.StatsReport) -> str:
    lines = [f"records: {report.record_count}", f"labeled: {report.labeled_count}"]
    order = [l for l in corpus.PUBMEDQA_LABELS if l in report.label_proportions]
    order += sorted(set(report.label_proportions) - set(order))
    for label in order:
        lines.append(f"{label} {100 * report.label_proportions[label]:.1f}%")
    lines += [
        f"avg question length: {report.avg_question_len:.1f}",
        f"avg context length: {report.avg_context_len:.1f}",
        f"avg long answer length: {report.avg_long_answer_len:.1f}",
    ]
    return "\n".join(lines)


def cmd_stats(args, cfg):
    ds = corpus.load_records(_input(args, cfg), args.subset)
    report = corpus.dataset_stats(ds)
    print(_format_stats(report))
    if args.json_out and not args.dry_run:
        Path(args.json_out).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True), encoding="utf-8")
    return EXIT_OK


def cmd_split(args, cfg):
    ds = corpus.load_records(_input(args, cfg), args.subset)
    fractions = [float(f) for f in args.fractions.split(",")]
    parts = corpus.split(ds, fractions, _seed(args, cfg))
    out = _path(args, cfg, "output", "data_out")
    names = [out.with_name(f"{out.name}.part{i}.jsonl") for i in range(len(parts))]
    if args.dry_run:
        return _dry(args, "split sizes " + ", ".join(str(len(p)) for p in parts))
    out.parent.mkdir(parents=True, exist_ok=True)
    for name, part in zip(names, parts):
        part.to_jsonl(name)
        print(f"{name}: {len(part)} records")
    return EXIT_OK


def cmd_prep_glm(args, cfg):
    src = _input(args, cfg)
    out = _path(args, cfg, "output", "data_out")
    seed = _seed(args, cfg)
    sentinels = glm_prep.Sentinels.for_vocab(args.vocab_size)
    examples = []
    for i, (_, tokens) in enumerate(glm_prep.iter_token_file(src)):
        if any(t < 0 or t >= args.vocab_size for t in tokens):
            raise ValidationError(f"sequence {i} has token ids outside [0, {args.vocab_size})")
        spans = glm_prep.sample_spans(len(tokens), args.mask_ratio, args.mean_span_len, [seed, i])
        examples.append(glm_prep.corrupt(tokens, spans, sentinels))
    if args.dry_run:
        return _dry(args, f"{len(examples)} examples prepared ({glm_prep.IMPLEMENTATION} kernels)")
    out.parent.mkdir(parents=True, exist_ok=True)
    n = glm_prep.write_examples(out, examples, args.vocab_size, sentinels)
    print(f"wrote {n} examples to {out} ({glm_prep.IMPLEMENTATION} kernels)")
    return EXIT_OK


def _select(ds: corpus.Dataset, ids) -> list[corpus.McqRecord]:
    if not ids:
        return list(ds)
    missing = [i for i in ids if i not in ds]
    if missing:
        raise ValidationError(f"unknown record id(s): {missing}")
    return [ds.get(i) for i in ids]


def cmd_voc_run(args, cfg):
    ds = corpus.load_records(_input(args, cfg), args.subset)
    records = _select(ds, args.id)
    strategy = prompting.Strategy(args.strategy or cfg.strategy.get("kind", "VoC"), _templates(cfg))
    backend = _backend(args, cfg)
    out = _path(args, cfg, "output", "data_out")
    tdir = cfg.paths.get("transcripts_dir")
    transcripts_path = Path(args.transcripts) if args.transcripts else (
        Path(tdir) / f"{out.stem}.transcripts.jsonl" if tdir else out.with_name(out.name + ".transcripts.jsonl")
    )
    if args.dry_run:
        for rec in records:
            prompting.render_voc_plan(rec, strategy)
        return _dry(args, f"{len(records)} records would be run with {strategy.kind}")

    predictions, transcripts, failures = {}, [], 0
    for rec in records:
        try:
            decision, transcript = prompting.run_strategy(
                strategy, rec, backend, temperature=_temperature(args, cfg), concurrency=_concurrency(args, cfg)
            )
        except prompting.ChoiceParseError as exc:
            failures += 1
            transcripts.append(exc.transcript)
            print(f"{rec.id}: unparseable final answer")
            continue
        predictions[rec.id] = decision.normalized_label or rec.option_text(decision.choice)
        transcripts.append(transcript)
        print(f"{rec.id}: {decision.choice} ({predictions[rec.id]}) [{decision.parse_confidence}]")
    out.parent.mkdir(parents=True, exist_ok=True)
    evalharness.write_predictions(out, predictions)
    _write_lines(transcripts_path, (corpus.dump_line(t.to_dict()) for t in transcripts))
    print(f"parsed {len(predictions)}/{len(records)}; predictions -> {out}; transcripts -> {transcripts_path}")
    return EXIT_OK


def cmd_ppl_rank(args, cfg):
    ds = corpus.load_records(_input(args, cfg), args.subset)
    records = _select(ds, args.id)
    backend = _backend(args, cfg)
    out = _path(args, cfg, "output", "data_out")
    stem = args.stem_template or cfg.strategy.get("ppl_stem", ppl_ranker.DEFAULT_STEM)
    if args.dry_run:
        return _dry(args, f"{len(records)} records would be ranked")
    lines, correct, labeled = [], 0, 0
    for rec in records:
        result = ppl_ranker.rank_options(backend, rec, stem, concurrency=_concurrency(args, cfg))
        label = rec.option_text(result.chosen)
        lines.append(corpus.dump_line(result.to_dict(rec.id, label)))
        if rec.gold is not None:
            labeled += 1
            correct += result.chosen == rec.gold
    _write_lines(out, lines)
    print(f"ranked {len(records)} records -> {out}")
    if labeled:
        print(f"accuracy: {correct / labeled:.4f} ({correct}/{labeled})")
    return EXIT_OK


def cmd_annotate(args, cfg):
    ds = corpus.load_records(_input(args, cfg), "PQA-U")
    mode = args.mode or cfg.strategy.get("annotation_mode", "long_answer_plus_voc")
    if mode not in annotator.MODES:
        raise ValidationError(f"unknown mode {mode!r}")
    for rec in ds:
        annotator._check_pre(rec, mode)
    backend = _backend(args, cfg)
    out = _path(args, cfg, "output", "data_out")
    if args.dry_run:
        return _dry(args, f"{len(ds)} records would be annotated in mode {mode}")
    out.parent.mkdir(parents=True, exist_ok=True)
    summary = annotator.annotate_corpus(
        ds, backend, mode, _concurrency(args, cfg), out, templates=_templates(cfg), temperature=_temperature(args, cfg)
    )
    print(
        f"annotated {summary['annotated']}, unannotated {summary['unannotated']} "
        f"(processed this run: {summary['processed_this_run']}); labels {summary['label_distribution']}"
    )
    return EXIT_OK


def cmd_merge(args, cfg):
    labeled = corpus.load_records(_input(args, cfg, "labeled", "labeled"), "PQA-L")
    pseudo = corpus.load_records(_input(args, cfg, "pseudo", "pseudo"))
    merged = annotator.merge_pseudo(labeled, pseudo)
    out = _path(args, cfg, "output", "data_out")
    if args.dry_run:
        return _dry(args, f"merge would hold {len(merged)} records")
    out.parent.mkdir(parents=True, exist_ok=True)
    merged.to_jsonl(out)
    print(f"wrote {len(merged)} records ({len(labeled)} labeled + {len(pseudo)} pseudo) to {out}")
    return EXIT_OK


def _format_eval(report: evalharness.EvalReport) -> str:
    lines = [f"accuracy: {report.accuracy:.4f} ({sum(c for c, _ in report.per_label.values())}/{report.n})"]
    for label, (c, t) in report.per_label.items():
        lines.append(f"  {label}: {c}/{t}")
    width = max(len(l) for l in report.labels)
    lines.append("confusion (rows gold, columns predicted):")
    lines.append(" " * (width + 2) + " ".join(f"{l:>{width}}" for l in report.labels))
    for label, row in zip(report.labels, report.confusion):
        lines.append(f"  {label:<{width}}" + " ".join(f"{v:>{width}}" for v in row))
    return "\n".join(lines)


def cmd_score(args, cfg):
    preds = evalharness.load_predictions(_input(args, cfg, "predictions", "predictions"))
    gold = corpus.load_records(_input(args, cfg, "gold", "gold"), "PQA-L")
    report = evalharness.score(preds, gold, allow_missing=args.allow_missing)
    print(_format_eval(report))
    if args.summary_out and not args.dry_run:
        Path(args.summary_out).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True), encoding="utf-8")
    return EXIT_OK


def _parse_stage(text: str) -> tuple[str, float]:
    name, sep, acc = text.rpartition("=")
    if not sep or not name:
        raise UsageError(f"--stage expects NAME=ACCURACY, got {text!r}")
    return name, float(acc)


def cmd_report(args, cfg):
    if args.stages_file:
        stages = [tuple(s) for s in json.loads(Path(args.stages_file).read_text(encoding="utf-8"))]
    elif args.stage:
        stages = [_parse_stage(s) for s in args.stage]
    else:
        stages = evalharness.reference_stage_results()
    text = evalharness.render_stage_report(stages)
    if args.leaderboard:
        ours = None if args.ours is None else {"model": args.ours_name, "accuracy": args.ours, "size": args.ours_size}
        text += "\n\n" + evalharness.render_leaderboard(None, ours)
    print(text)
    if args.output and not args.dry_run:
        Path(args.output).write_text(text + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_cpoly_check(args, cfg):
    seed = args.seed if args.seed is not None else (cfg.seed if cfg.seed is not None else 0)
    rng = np.random.default_rng(seed)
    config = cpoly.random_config(rng, args.tasks, args.shared, args.dim, rank=args.rank, tau=args.tau)
    x = rng.standard_normal(args.dim)
    upstream = rng.standard_normal(args.dim)
    worst = 0.0
    for t in range(config.T):
        errors = cpoly.check_all_gradients(config, t, x, upstream, eps=args.eps, mode=args.mode, seed=[seed, t])
        for name, err in errors.items():
            log.debug("task %d %s: %.3e", t, name, err)
        task_worst = max(errors.values())
        print(f"task {t}: max relative gradient error {task_worst:.3e} over {len(errors)} parameter classes")
        worst = max(worst, task_worst)
    ok = worst <= CPOLY_TOLERANCE
    print(f"max gradient error: {worst:.3e} (tolerance {CPOLY_TOLERANCE:.0e}) {'OK' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_RUNTIME


def cmd_emit_recipe(args, cfg):
    recipe = evalharness.emit_recipe(args.stage)
    if args.output and not args.dry_run:
        evalharness.write_recipe(recipe, args.output)
        print(f"wrote {args.stage} recipe to {args.output}")
    else:
        print(yaml.safe_dump(recipe.to_dict(), sort_keys=False).rstrip())
    return EXIT_OK


# -- parser ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="medadapt", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run config")
    common.add_argument("--dry-run", action="store_true", help="validate inputs only; no writes, no network")
    common.add_argument("--seed", type=int)

    backend_opts = argparse.ArgumentParser(add_help=False)
    backend_opts.add_argument("--mock", help="mock script (JSON/YAML); overrides the config backend")
    backend_opts.add_argument("--endpoint", help="chat-completion URL; overrides the config backend")
    backend_opts.add_argument("--concurrency", type=int)
    backend_opts.add_argument("--temperature", type=float)

    io = argparse.ArgumentParser(add_help=False)
    io.add_argument("--in", dest="input")
    io.add_argument("--out", dest="output")
    io.add_argument("--subset", choices=("PQA-L", "PQA-U", "PQA-A"), help="subset tag for official PubMedQA files")

    def add(name, fn, parents, help_):
        p = sub.add_parser(name, parents=parents, help=help_)
        p.set_defaults(func=fn)
        return p

    p = add("ingest", cmd_ingest, [common, io], "validate a PubMedQA file (or triplets) and write records")
    p.add_argument("--kind", choices=("pubmedqa", "triplets"), default="pubmedqa")
    p.add_argument("--template", default="{s} {p} {o}.")
    p.add_argument("--sample", type=int)

    p = add("stats", cmd_stats, [common, io], "record count, label proportions and mean lengths")
    p.add_argument("--json-out")

    p = add("split", cmd_split, [common, io], "stratified deterministic split")
    p.add_argument("--fractions", default="0.5,0.5")

    p = add("prep-glm", cmd_prep_glm, [common, io], "build blank-filling examples from token-id sequences")
    p.add_argument("--vocab-size", type=int, required=True)
    p.add_argument("--mask-ratio", type=float, default=0.15)
    p.add_argument("--mean-span-len", type=float, default=3.0)

    p = add("voc-run", cmd_voc_run, [common, io, backend_opts], "run a prompting strategy over records")
    p.add_argument("--strategy", choices=prompting.STRATEGY_KINDS)
    p.add_argument("--id", action="append", help="restrict to these record ids")
    p.add_argument("--transcripts")

    p = add("ppl-rank", cmd_ppl_rank, [common, io, backend_opts], "choose options by minimum perplexity")
    p.add_argument("--id", action="append")
    p.add_argument("--stem-template")

    p = add("annotate", cmd_annotate, [common, io, backend_opts], "pseudo-label PQA-U records (resumable)")
    p.add_argument("--mode", choices=annotator.MODES)

    p = add("merge", cmd_merge, [common], "merge labeled and pseudo-labeled records")
    p.add_argument("--labeled")
    p.add_argument("--pseudo")
    p.add_argument("--out", dest="output")

    p = add("score", cmd_score, [common], "accuracy of a predictions file against gold labels")
    p.add_argument("--predictions")
    p.add_argument("--gold")
    p.add_argument("--allow-missing", action="store_true", help="count missing predictions as wrong")
    p.add_argument("--summary-out")

    p = add("report", cmd_report, [common], "stage table and leaderboard")
    p.add_argument("--stage", action="append", help="NAME=ACCURACY (fraction), repeatable")
    p.add_argument("--stages-file", help="JSON list of [name, accuracy]")
    p.add_argument("--leaderboard", action="store_true")
    p.add_argument("--ours", type=float, help="our accuracy as a fraction")
    p.add_argument("--ours-name", default="ours")
    p.add_argument("--ours-size", default="NA")
    p.add_argument("--out", dest="output")

    p = add("cpoly-check", cmd_cpoly_check, [common], "finite-difference check of the adapter mixture gradients")
    p.add_argument("--tasks", type=int, default=3)
    p.add_argument("--shared", type=int, default=4)
    p.add_argument("--rank", type=int, default=4)
    p.add_argument("--dim", type=int, default=8)
    p.add_argument("--tau", type=float, default=1.0)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--mode", choices=cpoly.MODES, default="raw")

    p = add("emit-recipe", cmd_emit_recipe, [common], "write a stage training recipe")
    p.add_argument("--stage", required=True, choices=evalharness.STAGES)
    p.add_argument("--out", dest="output")
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = RunConfig.load(args.config)
        return args.func(args, cfg)
    except UsageError as exc:
        print(f"error: usage: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValidationError as exc:
        print(f"error: {exc.category}: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (MedadaptError, OSError) as exc:
        category = getattr(exc, "category", "io")
        print(f"error: {category}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
