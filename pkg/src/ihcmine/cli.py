"""Pipeline orchestration: one subcommand per stage.

Exit codes: 0 success, 1 usage error, 2 stage failure. Each stage reads
the previous stage's output from the run directory and writes its own;
a missing upstream file fails with the subcommand that produces it.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from fractions import Fraction
from pathlib import Path
from typing import Any

from . import classify as classify_mod
from . import landscape as landscape_mod
from . import normalize as normalize_mod
from . import table_eval
from .config import PipelineConfig, build_config
from .domain import AbstractRecord, ClassificationLabel, format_percent, round_percent
from .errors import GatewayError, PipelineError, TableNotFoundError, ValidationError
from .gateway import LlmGateway, prompt_template_hashes
from .pubmed import EntrezClient, build_query, dedup_merge
from .store import RunLock, RunStore
from .tables import ProfileTable, extract_table, parse_markdown_table

logger = logging.getLogger(__name__)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse default exits 2; we reserve 2 for stage failures
        raise UsageError(f"{self.prog}: {message}")


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="flat key = value config file")
    parser.add_argument("--run-dir", dest="run_dir", help="run directory (default: derived under --runs-root)")
    parser.add_argument("--runs-root", dest="runs_root", help="root for auto-created run directories")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")


def _add_gateway_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--llm-base", dest="llm_base_url", help="chat-completions base URL")
    parser.add_argument("--llm-model", dest="llm_model")
    parser.add_argument("--llm-key", dest="llm_api_key")
    parser.add_argument("--emb-base", dest="emb_base_url", help="embeddings base URL")
    parser.add_argument("--emb-model", dest="emb_model")
    parser.add_argument("--concurrency", dest="llm_concurrency", type=int)
    parser.add_argument("--retries", dest="retries", type=int)
    parser.add_argument("--backoff", dest="backoff_base", type=float)
    parser.add_argument("--timeout", dest="timeout", type=float)


def build_parser() -> _Parser:
    parser = _Parser(prog="ihcmine", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fetch", help="search PubMed per marker and build the deduplicated corpus")
    _add_common(p)
    p.add_argument("--markers", dest="markers_path", help="file with one marker name per line")
    p.add_argument("--cap", dest="cap", type=int, help="max abstracts per marker (<= 9999)")
    p.add_argument("--entrez-base", dest="entrez_base_url")
    p.add_argument("--ncbi-key", dest="ncbi_api_key")
    p.add_argument("--rps", dest="requests_per_second", type=float, help="request budget per second")
    p.add_argument("--page-size", dest="esearch_page_size", type=int)
    p.add_argument("--batch-size", dest="efetch_batch_size", type=int)
    p.add_argument("--retries", dest="retries", type=int)
    p.add_argument("--backoff", dest="backoff_base", type=float)
    p.add_argument("--timeout", dest="timeout", type=float)

    p = sub.add_parser("classify", help="label corpus abstracts Include/Exclude via the LLM")
    _add_common(p)
    _add_gateway_flags(p)
    p.add_argument("--retry-quarantined", action="store_true", help="reprocess quarantined PMIDs")

    p = sub.add_parser("extract", help="extract a profile table per Include abstract")
    _add_common(p)
    _add_gateway_flags(p)

    p = sub.add_parser("normalize", help="map tumour/marker surfaces to dictionary concepts")
    _add_common(p)
    _add_gateway_flags(p)
    p.add_argument("--dictionary", dest="dictionary_path", help="concept dictionary TSV")
    p.add_argument("--max-dist", dest="max_distance", type=float, help="flag mappings beyond this distance")

    p = sub.add_parser("aggregate", help="sum positives/cohorts per (marker, tumour)")
    _add_common(p)
    p.add_argument("--split-qualifiers", dest="split_qualifiers", action="store_const", const=True)

    p = sub.add_parser("compare", help="compare aggregated rates against the curated reference")
    _add_common(p)
    p.add_argument("--reference", dest="reference_path", help="reference CSV (marker,tumour,kind,low,high)")
    p.add_argument("--top-k", dest="top_k_tumours", type=int)
    p.add_argument("--positive-min", dest="positive_concordant_min", type=int)
    p.add_argument("--negative-max", dest="negative_concordant_max", type=int)
    p.add_argument("--near-band", dest="near_band_points", type=int)

    p = sub.add_parser("report", help="write marker totals and comparison report files")
    _add_common(p)

    p = sub.add_parser("eval-classify", help="score predictions against gold Include/Exclude labels")
    _add_common(p)
    p.add_argument("--gold", required=True, help="gold JSONL with pmid and label fields")
    p.add_argument("--pred", help="predictions JSONL (default: run's classified.jsonl)")

    p = sub.add_parser("eval-tables", help="score predicted tables against gold tables")
    _add_common(p)
    p.add_argument("--gold", required=True, help="gold tables JSONL")
    p.add_argument("--pred", help="predicted tables JSONL (default: run's tables_parsed.jsonl)")
    p.add_argument("--abstracts", help="corpus JSONL for percent-tolerance context (default: run's corpus.jsonl)")
    p.add_argument("--wrong-f1", dest="wrong_f1_threshold", type=float)
    p.add_argument("--row-sim", dest="row_similarity_threshold", type=float)

    return parser


def _config_from_args(args: argparse.Namespace) -> PipelineConfig:
    flag_values = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
    return build_config(flag_values=flag_values, config_path=args.config)


def _resolve_run_dir(config: PipelineConfig) -> Path:
    if config.run_dir:
        return Path(config.run_dir)
    root = Path(config.runs_root)
    config_hash = config.hash()
    if root.exists():
        candidates = sorted(d for d in root.iterdir() if (d / "manifest.json").exists())
        for candidate in reversed(candidates):
            manifest = json.loads((candidate / "manifest.json").read_text(encoding="utf-8"))
            if manifest.get("config_hash") == config_hash:
                return candidate
    return root / f"run-{time.strftime('%Y%m%d-%H%M%S')}-{config_hash[:6]}"


def _check_prompt_hashes(store: RunStore) -> None:
    recorded = store.manifest.prompt_template_hashes
    current = prompt_template_hashes()
    if recorded and recorded != current:
        raise PipelineError(
            "prompt templates changed since this run was created; results would not be "
            "attributable to one prompt version. Use a new run directory."
        )


def _require_stage(store: RunStore, stage: str, producer: str) -> None:
    if not store.path(stage).exists():
        raise PipelineError(f"{stage}.jsonl not found; run {producer}")


def _make_gateway(config: PipelineConfig) -> LlmGateway:
    return LlmGateway(
        llm_base_url=config.llm_base_url,
        model_id=config.llm_model,
        emb_base_url=config.emb_base_url,
        emb_model_id=config.emb_model,
        api_key=config.llm_api_key,
        max_in_flight=config.llm_concurrency,
        retries=config.retries,
        backoff_base=config.backoff_base,
        timeout=config.timeout,
    )


def _write_json(path: Path, payload: dict[str, Any]) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# -- stage commands -----------------------------------------------------------


def cmd_fetch(config: PipelineConfig, store: RunStore, args: argparse.Namespace) -> int:
    if store.stage_done("corpus"):
        print("corpus stage already done; skipping")
        return 0
    markers_file = Path(config.markers_path)
    if not markers_file.exists():
        raise PipelineError(f"markers file not found: {markers_file}")
    markers = [line.strip() for line in markers_file.read_text(encoding="utf-8").splitlines()]
    markers = [m for m in markers if m and not m.startswith("#")]
    if not markers:
        raise PipelineError(f"markers file {markers_file} is empty")

    client = EntrezClient(
        base_url=config.entrez_base_url,
        api_key=config.ncbi_api_key,
        requests_per_second=config.requests_per_second,
        page_size=config.esearch_page_size,
        batch_size=config.efetch_batch_size,
        retries=config.retries,
        backoff_base=config.backoff_base,
        timeout=config.timeout,
    )
    batches = []
    total_skipped = 0
    for marker in markers:
        query = build_query(marker)
        pmids = client.search_pmids(query, cap=config.cap)
        logger.info("marker %s: %d PMIDs", marker, len(pmids))
        if pmids:
            records, skipped = client.fetch_abstracts(pmids, marker)
            total_skipped += len(skipped)
            if skipped:
                logger.info("marker %s: %d PMIDs had no abstract", marker, len(skipped))
        else:
            records = []
        batches.append((marker, records))
    corpus, stats = dedup_merge(batches)
    _write_json(store.run_dir / "corpus_stats.json", stats.to_dict())
    count = store.write_stage_atomic(
        "corpus", (record.to_dict() for record in corpus), note=f"skipped_no_abstract={total_skipped}"
    )
    print(f"fetched {count} unique abstracts across {len(markers)} markers")
    return 0


def cmd_classify(config: PipelineConfig, store: RunStore, args: argparse.Namespace) -> int:
    _require_stage(store, "corpus", "fetch")
    retry = getattr(args, "retry_quarantined", False)
    store.repair_tail("quarantine")
    quarantined_entries = [classify_mod.QuarantineEntry.from_dict(d) for d in store.iter_records("quarantine")]
    retryable = [q for q in quarantined_entries if q.stage == "classify"]
    if store.stage_done("classified"):
        if not (retry and retryable):
            print("classified stage already done; skipping")
            return 0
        store.reopen_stage("classified", note="retry-quarantined")
    store.start_stage("classified")

    if retry:
        keep = [q for q in quarantined_entries if q.stage != "classify"]
        store.write_aux_atomic("quarantine", (q.to_dict() for q in keep))
        quarantined_entries = keep
    processed = store.processed_ids("classified") | {
        q.pmid for q in quarantined_entries if q.stage == "classify"
    }
    pending = [
        AbstractRecord.from_dict(d)
        for d in store.iter_records("corpus")
        if d["pmid"] not in processed
    ]
    gateway = _make_gateway(config)
    for result in classify_mod.iter_classified(pending, gateway, max_workers=config.llm_concurrency):
        stage = "quarantine" if isinstance(result, classify_mod.QuarantineEntry) else "classified"
        store.append(stage, result.to_dict())
    counts = {"include": 0, "exclude": 0, "quarantined": 0}
    for record in store.iter_records("classified"):
        counts["include" if record["label"] == "Include" else "exclude"] += 1
    counts["quarantined"] = sum(1 for q in store.iter_records("quarantine") if q["stage"] == "classify")
    store.mark_done("classified", note=json.dumps(counts, sort_keys=True))
    print(f"classified: {counts['include']} Include, {counts['exclude']} Exclude, {counts['quarantined']} quarantined")
    return 0


def cmd_extract(config: PipelineConfig, store: RunStore, args: argparse.Namespace) -> int:
    _require_stage(store, "classified", "classify")
    corpus = {d["pmid"]: AbstractRecord.from_dict(d) for d in store.iter_records("corpus")}
    include_pmids = [
        d["pmid"] for d in store.iter_records("classified") if d["label"] == ClassificationLabel.INCLUDE.value
    ]
    gateway = _make_gateway(config)

    if not store.stage_done("tables_raw"):
        store.start_stage("tables_raw")
        store.repair_tail("quarantine")
        quarantined = {
            q["pmid"] for q in store.iter_records("quarantine") if q["stage"] == "extract"
        }
        done_raw = store.processed_ids("tables_raw")
        for pmid in include_pmids:
            if pmid in done_raw or pmid in quarantined:
                continue
            record = corpus.get(pmid)
            if record is None:
                logger.warning("pmid %s classified but missing from corpus", pmid)
                continue
            try:
                markdown = extract_table(record, gateway)
            except GatewayError as exc:
                store.append(
                    "quarantine",
                    classify_mod.QuarantineEntry(pmid=pmid, stage="extract", reason=f"gateway: {exc}").to_dict(),
                )
                continue
            store.append("tables_raw", {"pmid": pmid, "markdown": markdown})
        store.mark_done("tables_raw")

    if not store.stage_done("tables_parsed"):
        store.start_stage("tables_parsed")
        done_parsed = store.processed_ids("tables_parsed") | {
            q["pmid"] for q in store.iter_records("quarantine") if q["stage"] == "parse"
        }
        for raw in store.read_records("tables_raw"):
            if raw["pmid"] in done_parsed:
                continue
            try:
                table = parse_markdown_table(raw["markdown"], pmid=raw["pmid"])
            except TableNotFoundError as exc:
                store.append(
                    "quarantine",
                    classify_mod.QuarantineEntry(
                        pmid=raw["pmid"], stage="parse", reason=str(exc), raw_output=raw["markdown"]
                    ).to_dict(),
                )
                continue
            store.append("tables_parsed", table.to_dict())
        store.mark_done("tables_parsed")
    parsed = store.stage_info("tables_parsed").count or 0
    print(f"extracted {parsed} profile tables from {len(include_pmids)} Include abstracts")
    return 0


def cmd_normalize(config: PipelineConfig, store: RunStore, args: argparse.Namespace) -> int:
    _require_stage(store, "tables_parsed", "extract")
    if store.stage_done("normalized"):
        print("normalized stage already done; skipping")
        return 0
    if not config.dictionary_path:
        raise PipelineError("normalize needs --dictionary (concept dictionary TSV)")
    index = normalize_mod.load_index(config.dictionary_path)
    normalizer = normalize_mod.TermNormalizer(_make_gateway(config), index, max_distance=config.max_distance)

    def generate():
        for d in store.iter_records("tables_parsed"):
            table = ProfileTable.from_dict(d)
            for record in normalize_mod.normalize_table(table, normalizer):
                yield record.to_dict()

    count = store.write_stage_atomic("normalized", generate())
    print(f"normalized {count} marker-cell records against {len(index)} dictionary entries")
    return 0


def cmd_aggregate(config: PipelineConfig, store: RunStore, args: argparse.Namespace) -> int:
    _require_stage(store, "normalized", "normalize")
    if store.stage_done("aggregates"):
        print("aggregates stage already done; skipping")
        return 0
    records = [normalize_mod.NormalizedRecord.from_dict(d) for d in store.iter_records("normalized")]
    usable = []
    dropped = {"invalid_count": 0, "unmapped": 0}
    for record in records:
        if "invalid_count" in record.flags:
            dropped["invalid_count"] += 1
        elif record.marker_cui is None or record.tumour_type_cui is None:
            dropped["unmapped"] += 1
        else:
            usable.append(record)
    if any(dropped.values()):
        logger.warning(
            "aggregate: dropped %d invalid-count and %d unmapped records",
            dropped["invalid_count"],
            dropped["unmapped"],
        )
    aggregates = landscape_mod.aggregate(usable, split_qualifiers=config.split_qualifiers)
    count = store.write_stage_atomic(
        "aggregates", (a.to_dict() for a in aggregates), note=json.dumps(dropped, sort_keys=True)
    )
    print(f"aggregated into {count} (marker, tumour) pairs")
    return 0


def cmd_compare(config: PipelineConfig, store: RunStore, args: argparse.Namespace) -> int:
    _require_stage(store, "aggregates", "aggregate")
    reference_path = Path(config.reference_path)
    if not reference_path.exists():
        raise PipelineError(f"reference file not found: {reference_path}")
    references = landscape_mod.load_reference_csv(reference_path)
    aggregates = [landscape_mod.MarkerTumourAggregate.from_dict(d) for d in store.iter_records("aggregates")]
    markers: dict[str, str] = {}
    for agg in aggregates:
        markers.setdefault(agg.marker_cui, agg.marker_name)
    results = []
    for marker_cui in sorted(markers, key=lambda cui: markers[cui]):
        top = landscape_mod.top_tumours(marker_cui, aggregates, k=config.top_k_tumours)
        if not top:
            continue
        chosen, entry = landscape_mod.select_reference_tumour(top, references)
        results.append(
            landscape_mod.compare(
                chosen.rate,
                entry,
                positive_min=config.positive_concordant_min,
                negative_max=config.negative_concordant_max,
                near_band=config.near_band_points,
            )
        )
    report = landscape_mod.summary_report(results)
    _write_json(store.run_dir / "landscape_report.json", report)
    landscape_mod.write_comparison_csv(results, store.run_dir / "comparison_report.csv")
    print(f"compared {len(results)} markers: " + json.dumps(report["histogram"], sort_keys=True))
    return 0


def cmd_report(config: PipelineConfig, store: RunStore, args: argparse.Namespace) -> int:
    _require_stage(store, "aggregates", "aggregate")
    if not (store.run_dir / "comparison_report.csv").exists():
        raise PipelineError("comparison_report.csv not found; run compare")
    aggregates = [landscape_mod.MarkerTumourAggregate.from_dict(d) for d in store.iter_records("aggregates")]
    records = [normalize_mod.NormalizedRecord.from_dict(d) for d in store.iter_records("normalized")]
    totals = landscape_mod.marker_totals(aggregates, records=records)
    out = store.run_dir / "marker_report.csv"
    with out.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["marker", "n_abstracts", "positives", "cohort", "positive_rate_percent"])
        for t in totals:
            writer.writerow([t.marker_name, t.n_abstracts, t.positives, t.total, round_percent(t.rate, 1)])
    print(f"wrote {out} ({len(totals)} markers) and comparison_report.csv")
    return 0


def cmd_eval_classify(config: PipelineConfig, store: RunStore, args: argparse.Namespace) -> int:
    gold_path = Path(args.gold)
    if not gold_path.exists():
        raise PipelineError(f"gold file not found: {gold_path}")
    pred_path = Path(args.pred) if args.pred else store.path("classified")
    if not pred_path.exists():
        raise PipelineError(f"{pred_path.name} not found; run classify")
    golds = {}
    for line in gold_path.read_text(encoding="utf-8").splitlines():
        if line.strip():
            d = json.loads(line)
            golds[d["pmid"]] = ClassificationLabel(d["label"])
    preds = {}
    for line in pred_path.read_text(encoding="utf-8").splitlines():
        if line.strip():
            d = json.loads(line)
            preds[d["pmid"]] = ClassificationLabel(d["label"])
    missing = sorted(set(golds) - set(preds))
    if missing:
        raise ValidationError(f"{len(missing)} gold PMIDs have no prediction (first: {missing[:5]})")
    ordered = sorted(golds)
    metrics = classify_mod.evaluate([preds[p] for p in ordered], [golds[p] for p in ordered])
    payload = {
        "n": metrics.n,
        "tp": metrics.tp,
        "fp": metrics.fp,
        "fn": metrics.fn,
        "tn": metrics.tn,
        "accuracy_percent": format_percent(metrics.accuracy * 100, 1),
        "precision_percent": format_percent(metrics.precision * 100, 1),
        "recall_percent": format_percent(metrics.recall * 100, 1),
        "f1_percent": format_percent(metrics.f1 * 100, 1),
    }
    _write_json(store.run_dir / "metrics.json", payload)
    print(
        f"n={metrics.n} accuracy={payload['accuracy_percent']}% f1={payload['f1_percent']} "
        f"(tp={metrics.tp} fp={metrics.fp} fn={metrics.fn} tn={metrics.tn})"
    )
    return 0


def cmd_eval_tables(config: PipelineConfig, store: RunStore, args: argparse.Namespace) -> int:
    gold_path = Path(args.gold)
    if not gold_path.exists():
        raise PipelineError(f"gold file not found: {gold_path}")
    pred_path = Path(args.pred) if args.pred else store.path("tables_parsed")
    if not pred_path.exists():
        raise PipelineError(f"{pred_path.name} not found; run extract")

    def load_tables(path: Path) -> dict[str, ProfileTable]:
        tables = {}
        for line in path.read_text(encoding="utf-8").splitlines():
            if line.strip():
                table = ProfileTable.from_dict(json.loads(line))
                tables[table.pmid] = table
        return tables

    golds = load_tables(gold_path)
    preds = load_tables(pred_path)
    missing = sorted(set(golds) - set(preds))
    if missing:
        raise ValidationError(f"{len(missing)} gold PMIDs have no predicted table (first: {missing[:5]})")

    texts: dict[str, str] = {}
    abstracts_path = Path(args.abstracts) if args.abstracts else store.path("corpus")
    if abstracts_path.exists():
        for line in abstracts_path.read_text(encoding="utf-8").splitlines():
            if line.strip():
                d = json.loads(line)
                texts[d["pmid"]] = d["abstract_text"]

    pairs = [(golds[p], preds[p]) for p in sorted(golds)]
    summary = table_eval.evaluate_set(
        pairs,
        source_texts=texts,
        wrong_threshold=Fraction(config.wrong_f1_threshold).limit_denominator(10**6),
        row_threshold=config.row_similarity_threshold,
    )
    _write_json(store.run_dir / "eval_report.json", summary.to_dict())
    print(
        f"pairs={summary.count} " + " ".join(f"{k}={summary.percents[k]}%" for k in summary.percents)
    )
    return 0


_COMMANDS = {
    "fetch": cmd_fetch,
    "classify": cmd_classify,
    "extract": cmd_extract,
    "normalize": cmd_normalize,
    "aggregate": cmd_aggregate,
    "compare": cmd_compare,
    "report": cmd_report,
    "eval-classify": cmd_eval_classify,
    "eval-tables": cmd_eval_tables,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        config = _config_from_args(args)
        run_dir = _resolve_run_dir(config)
        lock = RunLock(run_dir)
        lock.acquire()
        try:
            store = RunStore.open_or_create(run_dir, config.hash(), prompt_template_hashes())
            if args.command in ("classify", "extract"):
                _check_prompt_hashes(store)
            with store:
                return _COMMANDS[args.command](config, store, args)
        finally:
            lock.release()
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
