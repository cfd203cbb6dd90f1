"""Command-line entry point.

Usage::

    aimem ingest --corpus notes.jsonl
    aimem haystack --corpus notes.jsonl --tokens 8000 --out haystack.txt
    aimem niah plan --spec niah.yaml
    aimem niah run --spec niah.yaml [--resume]
    aimem niah report --run runs/niah-<id>
    aimem memory extract -c cfg.yaml --corpus notes.jsonl --kinds summary,tags,preferences,social,bio
    aimem memory rollup -c cfg.yaml
    aimem memory trend -c cfg.yaml --tag running --since 2024-05-01
    aimem rag index -c cfg.yaml --corpus notes.jsonl --out index.json
    aimem rag query -c cfg.yaml --index index.json --q "where did I go in May?"
    aimem lpm gen-data -c cfg.yaml --corpus notes.jsonl --out lpm/
    aimem lpm manifest -c cfg.yaml
    aimem bench run -c cfg.yaml --method rag --questions questions.jsonl --corpus notes.jsonl
    aimem bench report --results runs/bench-*/result.json --out bench/

Tables go to stdout as CSV; figures are written next to them as SVG.
Exit codes: 0 ok, 1 user error, 2 provider or transport failure, 3 internal.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from datetime import date
from pathlib import Path
from typing import Sequence

from . import __version__
from .config import AppConfig, build_provider, load_config
from .corpus import COUNTERS, assemble_haystack, ingest
from .errors import AimemError, ConfigError, UserError
from .runstore import RunStore, file_sha256, resume

log = logging.getLogger("aimem")


def _csv_out(rows: Sequence[Sequence], fh=None) -> None:
    writer = csv.writer(fh or sys.stdout, lineterminator="\n")
    writer.writerows(rows)


def _require(cfg: AppConfig, section: str):
    value = getattr(cfg, section)
    if value is None:
        raise ConfigError(f"{section}: section is required for this command")
    return value


def _input_hashes(paths: Sequence[Path | None]) -> dict:
    return {str(p): file_sha256(p) for p in paths if p is not None and p.exists()}


def _open_run(cfg: AppConfig, command: str, inputs: Sequence[Path | None], args) -> RunStore:
    snapshot = {"config": cfg.snapshot(), "inputs": _input_hashes(inputs)}
    parent = cfg.path(cfg.output_dir)
    store = RunStore.create(parent, command, snapshot, getattr(args, "run_dir", None))
    if store.log.entries and not args.resume:
        raise UserError(
            f"{store.root} already has {len(store.log.entries)} logged calls; pass --resume to continue"
        )
    return store


def cmd_ingest(args) -> int:
    corpus = ingest(args.corpus)
    counter = COUNTERS[args.counter]
    from .corpus import render_item

    tokens = sum(counter(render_item(i)) for i in corpus.items)
    notes = sum(1 for i in corpus.items if i.kind == "note")
    rows = [
        ["field", "value"],
        ["user_id", corpus.user_id],
        ["items", len(corpus.items)],
        ["notes", notes],
        ["chats", len(corpus.items) - notes],
        ["first", corpus.items[0].timestamp.isoformat() if corpus.items else ""],
        ["last", corpus.items[-1].timestamp.isoformat() if corpus.items else ""],
        ["tokens", tokens],
    ]
    _csv_out(rows)
    return 0


def cmd_haystack(args) -> int:
    corpus = ingest(args.corpus)
    hs = assemble_haystack(corpus, args.tokens, COUNTERS[args.counter])
    if args.out:
        Path(args.out).write_text(hs.rendered_text, encoding="utf-8")
    _csv_out([
        ["items", "token_length", "target_length", "first_item", "last_item"],
        [len(hs.items), hs.token_length, hs.target_length, hs.items[0].item_id, hs.items[-1].item_id],
    ])
    return 0


# ---- niah ------------------------------------------------------------------

def _niah_inputs(cfg: AppConfig):
    from .fixtures import fixture_pairs, synthetic_corpora
    from .needles import load_pairs

    n = _require(cfg, "niah")
    pairs_path = cfg.path(n.pairs)
    pairs = load_pairs(pairs_path) if pairs_path else fixture_pairs()
    corpus_paths = [cfg.path(p) for p in n.corpora]
    corpora = [ingest(p) for p in corpus_paths]
    if n.synthetic_corpora:
        corpora += synthetic_corpora(n.synthetic_corpora, n.synthetic_items, seed=cfg.seed)
    if not corpora:
        raise ConfigError("niah: give corpora or synthetic_corpora")
    return pairs, corpora, [pairs_path, *corpus_paths]


def _niah_spec(cfg: AppConfig, run_log=None, resume_run: bool = False):
    from .niah import RunSpec

    n = cfg.niah
    pairs, corpora, inputs = _niah_inputs(cfg)
    providers = [build_provider(cfg, p, run_log, resume_run) for p in n.providers]
    judge = build_provider(cfg, n.judge, run_log, resume_run)
    spec = RunSpec(providers, judge, pairs, corpora, n.context_lengths, n.modes, cfg.seed,
                   COUNTERS[cfg.counter])
    return spec, inputs


def cmd_niah_plan(args) -> int:
    cfg = load_config(args.spec)
    spec, _ = _niah_spec(cfg)
    per_cell = len(spec.pairs) * len(spec.corpora)
    rows = [["provider", "mode", "context_length", "records", "status"]]
    for p, mode, length in spec.cells():
        status = "skipped" if p.config.max_context_tokens < length else "planned"
        rows.append([p.name, mode, length, per_cell, status])
    _csv_out(rows)
    return 0


def _write_niah_outputs(records, out_dir: Path) -> list[Path]:
    from .niah import aggregate
    from .report import report

    out_dir.mkdir(parents=True, exist_ok=True)
    rec_path = out_dir / "records.jsonl"
    with open(rec_path, "w", encoding="utf-8") as fh:
        for r in sorted(records, key=lambda r: r.sort_key):
            fh.write(json.dumps(r.to_dict(), ensure_ascii=False, sort_keys=True) + "\n")
    files = report(aggregate(records), out_dir)
    sys.stdout.write(files[0].read_text(encoding="utf-8"))
    return [rec_path, *files]


def cmd_niah_run(args) -> int:
    from .niah import run

    cfg = load_config(args.spec)
    _, _, inputs = _niah_inputs(cfg)
    store = _open_run(cfg, "niah", inputs, args)
    spec, _ = _niah_spec(cfg, store.log, args.resume)
    before = sum(p.network_calls for p in {id(p): p for p in [*spec.providers, spec.judge]}.values())
    records = run(spec)
    calls = sum(p.network_calls for p in {id(p): p for p in [*spec.providers, spec.judge]}.values())
    outputs = _write_niah_outputs(records, store.root)
    store.finish(outputs)
    failed = sum(r.status == "failed" for r in records)
    log.info("run %s: %d records, %d failed, %d provider calls", store.record.run_id,
             len(records), failed, calls - before)
    print(f"# run_dir={store.root} provider_calls={calls - before}", file=sys.stderr)
    return 0


def cmd_niah_report(args) -> int:
    from .niah import ScoredRecord

    store = resume(args.run)
    rec_path = store.root / "records.jsonl"
    if not rec_path.exists():
        raise UserError(f"{args.run} has no records.jsonl")
    with open(rec_path, encoding="utf-8") as fh:
        records = [ScoredRecord.from_dict(json.loads(line)) for line in fh if line.strip()]
    out = Path(args.out) if args.out else store.root
    outputs = _write_niah_outputs(records, out)
    if out.resolve() == store.root.resolve():
        store.finish(outputs, status=store.record.status)
    return 0


# ---- memory ----------------------------------------------------------------

MEMORY_KINDS = ("summary", "tags", "preferences", "social", "bio")


def _memory_setup(args):
    from .memory import MemoryStore

    cfg = load_config(args.config)
    m = _require(cfg, "memory")
    root = Path(args.store) if args.store else cfg.path(m.store)
    return cfg, m, MemoryStore(root), build_provider(cfg, m.provider)


def cmd_memory_extract(args) -> int:
    from .memory import build_global, extract_fine_tags, extract_preferences, extract_social
    from .memory import summarize_interaction, topic_items

    kinds = [k.strip() for k in args.kinds.split(",") if k.strip()]
    unknown = [k for k in kinds if k not in MEMORY_KINDS]
    if unknown or not kinds:
        raise UserError(f"--kinds must be a subset of {','.join(MEMORY_KINDS)}; got {args.kinds!r}")
    cfg, m, store, provider = _memory_setup(args)
    corpus = ingest(args.corpus)
    counts = {k: 0 for k in kinds}
    for item in corpus.items:
        if "summary" in kinds:
            counts["summary"] += store.add(summarize_interaction(item, provider))
        if "tags" in kinds:
            tags = extract_fine_tags(item, provider, store.taxonomy)
            counts["tags"] += store.add(topic_items(item, tags))
        if "preferences" in kinds:
            counts["preferences"] += store.add(extract_preferences(item, provider))
    if "social" in kinds:
        counts["social"] += store.add(extract_social(corpus.items, provider))
    if "bio" in kinds:
        counts["bio"] += store.add([build_global(store.items, provider)])
    store.save_taxonomy()
    _csv_out([["kind", "added"], *[[k, counts[k]] for k in kinds]])
    return 0


def cmd_memory_rollup(args) -> int:
    from .errors import CycleRejected
    from .memory import propose_parent, rollup_tag

    cfg, m, store, provider = _memory_setup(args)
    levels = m.max_levels if args.max_levels is None else args.max_levels
    tags = [args.tag] if args.tag else sorted(t for t in store.taxonomy.parents if store.taxonomy.level(t) == 0)
    rows = [["tag", "rollup"]]
    for tag in tags:
        current = tag
        for _ in range(levels):
            if store.taxonomy.parents.get(current) is None:
                try:
                    propose_parent(current, store.taxonomy, provider)
                except CycleRejected as exc:
                    log.warning("%s stays a root: %s", current, exc)
                    break
            current = store.taxonomy.parents[current]
            if current is None:
                break
        rows.append([tag, " > ".join(rollup_tag(tag, store.taxonomy, levels))])
    store.save_taxonomy()
    _csv_out(rows)
    return 0


def cmd_memory_trend(args) -> int:
    from .memory import mine_trend

    cfg, m, store, provider = _memory_setup(args)
    item = mine_trend(args.tag, (args.since, args.until), store, provider)
    store.add([item])
    _csv_out([["id", "tag", "evidence", "text"],
              [item.id, args.tag, len(item.details.get("evidence", [])), item.text]])
    return 0


# ---- rag -------------------------------------------------------------------

def cmd_rag_index(args) -> int:
    from .rag import build_index

    cfg = load_config(args.config)
    r = _require(cfg, "rag")
    index = build_index(ingest(args.corpus), build_provider(cfg, r.generator), r.k1, r.b)
    index.save(args.out)
    missing = sum(d.summary_missing for d in index.docs)
    _csv_out([["docs", "summary_missing", "avgdl"], [len(index), missing, f"{index.avgdl:.3f}"]])
    return 0


def cmd_rag_query(args) -> int:
    from .rag import BM25Index, RagPlusPlus

    cfg = load_config(args.config)
    r = _require(cfg, "rag")
    index = BM25Index.load(args.index)
    pipeline = RagPlusPlus(
        index, build_provider(cfg, r.generator),
        build_provider(cfg, r.embedder) if r.embedder else None,
        r.initial_k, r.final_k, r.rewrite_hits,
    )
    trace = pipeline.run(args.q)
    rows = [["rank", "doc_id", "lexical_score", "embedding_score"]]
    for h in trace.final:
        emb = "" if h.embedding_score is None else f"{h.embedding_score:.6f}"
        rows.append([h.rank, h.doc_id, f"{h.lexical_score:.6f}", emb])
    _csv_out(rows)
    print()
    if trace.rewrite is not None:
        print(f"# rewritten: {trace.rewrite.text}")
    if trace.degraded:
        print("# generation failed; showing retrieved context")
    print(trace.answer)
    return 0


# ---- lpm -------------------------------------------------------------------

def _lpm_manifest(cfg: AppConfig):
    from .lpmdata import FinetuneManifest

    lp = _require(cfg, "lpm")
    return FinetuneManifest(
        base_model=lp.base_model, lora_rank=lp.lora_rank, epochs=lp.epochs,
        lr_schedule=lp.lr_schedule, max_learning_rate=lp.max_learning_rate,
        decode_temperature=lp.decode_temperature,
    )


def _load_instructions(path: str | None) -> list[tuple[str, str]]:
    if not path:
        return []
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            rec = json.loads(line)
            if "prompt" not in rec or "response" not in rec:
                raise UserError(f"{path}:{lineno}: instruction needs prompt and response")
            out.append((rec["prompt"], rec["response"]))
    return out


def cmd_lpm_gen_data(args) -> int:
    from .lpmdata import Chunker, DatasetConfig, emit_dataset, generate_dataset

    cfg = load_config(args.config)
    lp = _require(cfg, "lpm")
    corpus = ingest(args.corpus)
    provider = build_provider(cfg, lp.generator)
    now = date.fromisoformat(args.now) if args.now else None
    examples = generate_dataset(
        corpus, provider, now, Chunker(lp.chunk_window, lp.chunk_overlap),
        _load_instructions(args.instructions),
    )
    manifest = emit_dataset(
        examples, corpus, args.out,
        DatasetConfig(lp.max_skeleton_share, lp.min_gate_size, lp.size_multiplier),
        _lpm_manifest(cfg), COUNTERS[cfg.counter],
    )
    _csv_out([["stat", "value"], *[[k, json.dumps(v) if isinstance(v, dict) else v]
                                   for k, v in manifest.stats.items()]])
    return 0


def cmd_lpm_manifest(args) -> int:
    cfg = load_config(args.config)
    manifest = _lpm_manifest(cfg)
    if args.dataset:
        existing = Path(args.dataset) / "manifest.json"
        if existing.exists():
            manifest.stats = json.loads(existing.read_text(encoding="utf-8")).get("stats", {})
    text = json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return 0


# ---- bench -----------------------------------------------------------------

def cmd_bench_run(args) -> int:
    from .bench import load_criteria, load_questions, run_bench, summarize, table_rows, truncate_for_context
    from .fixtures import data_path
    from .rag import RagPlusPlus, build_index, long_context_adapter

    cfg = load_config(args.config)
    b = _require(cfg, "bench")
    if args.method not in b.methods:
        raise ConfigError(f"bench.methods: no method named {args.method!r}")
    method = b.methods[args.method]
    criteria_path = cfg.path(b.criteria) or data_path("bench_criteria.json")
    questions = load_questions(args.questions, load_criteria(criteria_path))
    corpus_path = Path(args.corpus) if args.corpus else cfg.path(b.corpus)
    if corpus_path is None:
        raise UserError("bench run needs --corpus or bench.corpus")
    corpus = ingest(corpus_path)
    store = _open_run(cfg, f"bench {args.method}", [Path(args.questions), corpus_path, criteria_path], args)
    generator = build_provider(cfg, method.generator, store.log, args.resume)
    judge = build_provider(cfg, b.judge, store.log, args.resume)
    unanswerable: frozenset[str] = frozenset()
    if method.type == "ragpp":
        embedder = build_provider(cfg, method.embedder, store.log, args.resume) if method.embedder else None
        index = build_index(corpus, generator)
        adapter = RagPlusPlus(index, generator, embedder).adapter(args.method)
    else:
        reserve = 512
        adapter = long_context_adapter(corpus, generator, args.method, COUNTERS[cfg.counter], reserve)
        trunc = truncate_for_context(
            corpus, generator.config.max_context_tokens - reserve, questions, COUNTERS[cfg.counter]
        )
        unanswerable = trunc.unanswerable
    scores = run_bench(adapter, questions, judge, unanswerable, b.max_parallel)
    result = summarize(scores, questions)
    result.label = method.label or args.method
    scores_path = store.root / "scores.jsonl"
    with open(scores_path, "w", encoding="utf-8") as fh:
        for s in scores:
            fh.write(json.dumps(s.to_dict(), ensure_ascii=False, sort_keys=True) + "\n")
    result_path = store.root / "result.json"
    result_path.write_text(json.dumps(result.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    store.finish([scores_path, result_path])
    _csv_out(table_rows([result]))
    print(f"# run_dir={store.root}", file=sys.stderr)
    return 0


def cmd_bench_report(args) -> int:
    from .bench import CATEGORIES, MethodResult, footnotes, table_rows
    from .report import bench_bar_chart

    results = []
    for path in args.results:
        p = Path(path)
        if p.is_dir():
            p = p / "result.json"
        if not p.exists():
            raise UserError(f"{path}: no result.json")
        results.append(MethodResult.from_dict(json.loads(p.read_text(encoding="utf-8"))))
    rows = table_rows(results)
    notes = footnotes(results)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "bench_table.csv", "w", encoding="utf-8", newline="") as fh:
        _csv_out(rows, fh)
    (out / "bench_notes.txt").write_text("".join(n + "\n" for n in notes), encoding="utf-8")
    bench_bar_chart(results, out / "bench.svg", CATEGORIES)
    _csv_out(rows)
    for n in notes:
        print(f"# {n}")
    return 0


# ---- parser ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aimem", description="Personal memory evaluation and data toolkit.")
    parser.add_argument("--version", action="version", version=f"aimem {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p, required=True):
        p.add_argument("-c", "--config", required=required, help="YAML config file")
        return p

    p = sub.add_parser("ingest", help="validate a corpus file and summarize it")
    p.add_argument("--corpus", required=True)
    p.add_argument("--counter", default="wordpunct", choices=sorted(COUNTERS))
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("haystack", help="assemble the newest items that fit a token budget")
    p.add_argument("--corpus", required=True)
    p.add_argument("--tokens", type=int, required=True)
    p.add_argument("--out")
    p.add_argument("--counter", default="wordpunct", choices=sorted(COUNTERS))
    p.set_defaults(func=cmd_haystack)

    niah = sub.add_parser("niah", help="needle/reasoning-in-a-haystack evaluation").add_subparsers(
        dest="niah_command", required=True)
    p = niah.add_parser("plan", help="list the cells a spec would run")
    p.add_argument("--spec", required=True)
    p.set_defaults(func=cmd_niah_plan)
    p = niah.add_parser("run", help="run a spec and write records, scores.csv and heatmaps")
    p.add_argument("--spec", required=True)
    p.add_argument("--resume", action="store_true", help="serve logged calls from the run log")
    p.add_argument("--run-dir", help="run directory (default: <output_dir>/niah-<run id>)")
    p.set_defaults(func=cmd_niah_run)
    p = niah.add_parser("report", help="re-render scores.csv and heatmaps from a run")
    p.add_argument("--run", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_niah_report)

    mem = sub.add_parser("memory", help="natural-language memory store").add_subparsers(
        dest="memory_command", required=True)
    p = with_config(mem.add_parser("extract", help="extract memory items from a corpus"))
    p.add_argument("--corpus", required=True)
    p.add_argument("--kinds", default=",".join(MEMORY_KINDS))
    p.add_argument("--store")
    p.set_defaults(func=cmd_memory_extract)
    p = with_config(mem.add_parser("rollup", help="grow the tag taxonomy and print roll-ups"))
    p.add_argument("--tag")
    p.add_argument("--max-levels", type=int)
    p.add_argument("--store")
    p.set_defaults(func=cmd_memory_rollup)
    p = with_config(mem.add_parser("trend", help="summarize memories about a tag over a window"))
    p.add_argument("--tag", required=True)
    p.add_argument("--since", required=True)
    p.add_argument("--until")
    p.add_argument("--store")
    p.set_defaults(func=cmd_memory_trend)

    rag = sub.add_parser("rag", help="summary-augmented BM25 retrieval").add_subparsers(
        dest="rag_command", required=True)
    p = with_config(rag.add_parser("index", help="build a BM25 index with generated summaries"))
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rag_index)
    p = with_config(rag.add_parser("query", help="answer a question over an index"))
    p.add_argument("--index", required=True)
    p.add_argument("--q", required=True)
    p.set_defaults(func=cmd_rag_query)

    lpm = sub.add_parser("lpm", help="personal-model training data").add_subparsers(
        dest="lpm_command", required=True)
    p = with_config(lpm.add_parser("gen-data", help="synthesize dataset.jsonl and manifest.json"))
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--now", help="reference date for relative periods (YYYY-MM-DD)")
    p.add_argument("--instructions", help="JSONL of {prompt, response} pairs to rephrase")
    p.set_defaults(func=cmd_lpm_gen_data)
    p = with_config(lpm.add_parser("manifest", help="print the fine-tuning manifest"))
    p.add_argument("--dataset", help="dataset directory whose stats to include")
    p.add_argument("--out")
    p.set_defaults(func=cmd_lpm_manifest)

    bench = sub.add_parser("bench", help="four-category pilot benchmark").add_subparsers(
        dest="bench_command", required=True)
    p = with_config(bench.add_parser("run", help="answer and judge every question with one method"))
    p.add_argument("--method", required=True)
    p.add_argument("--questions", required=True)
    p.add_argument("--corpus")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--run-dir")
    p.set_defaults(func=cmd_bench_run)
    p = bench.add_parser("report", help="comparison table and bar chart over method results")
    p.add_argument("--results", nargs="+", required=True, help="result.json files or run dirs")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench_report)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except AimemError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"error: internal: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
