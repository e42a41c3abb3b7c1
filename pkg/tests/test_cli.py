"""Subcommand wiring: exit codes, stage ordering errors, artifacts, config handling."""

import csv
import json
from pathlib import Path

import pytest

from ihcmine.cli import main
from ihcmine.config import build_config, load_config_file
from ihcmine.errors import ConfigError


def read_jsonl(path: Path) -> list[dict]:
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


class TestExitCodes:
    def test_unknown_command_is_usage_error(self, capsys):
        assert main(["flarb"]) == 1

    def test_missing_required_flag_is_usage_error(self):
        assert main(["eval-classify"]) == 1

    def test_extract_before_classify_names_the_producer(self, demo_env, capsys, tmp_path):
        run_dir = tmp_path / "run"
        assert main(demo_env.extract_args(run_dir)) == 2
        assert "classified.jsonl not found; run classify" in capsys.readouterr().err

    def test_normalize_before_extract(self, demo_env, capsys, tmp_path):
        run_dir = tmp_path / "run"
        assert main(demo_env.fetch_args(run_dir)) == 0
        assert main(demo_env.classify_args(run_dir)) == 0
        assert main(demo_env.normalize_args(run_dir)) == 2
        assert "tables_parsed.jsonl not found; run extract" in capsys.readouterr().err

    def test_report_requires_compare(self, demo_env, tmp_path, capsys):
        run_dir = tmp_path / "run"
        for args in demo_env.all_stage_args(run_dir)[:5]:
            assert main(args) == 0
        assert main(demo_env.report_args(run_dir)) == 2
        assert "comparison_report.csv not found; run compare" in capsys.readouterr().err


class TestFetch:
    def test_corpus_and_stats(self, demo_env, tmp_path):
        run_dir = tmp_path / "run"
        assert main(demo_env.fetch_args(run_dir)) == 0
        corpus = read_jsonl(run_dir / "corpus.jsonl")
        assert len(corpus) == 50
        stats = json.loads((run_dir / "corpus_stats.json").read_text())
        assert stats["total_unique"] == 50
        assert sum(stats["per_marker_counts"].values()) > 50  # overlap across markers
        overlapping = [r for r in corpus if len(r["source_markers"]) > 1]
        assert overlapping, "expected at least one abstract retrieved by two markers"

    def test_rerun_skips_done_stage(self, demo_env, tmp_path, capsys):
        run_dir = tmp_path / "run"
        assert main(demo_env.fetch_args(run_dir)) == 0
        requests_before = len(demo_env.entrez_state.requests)
        assert main(demo_env.fetch_args(run_dir)) == 0
        assert len(demo_env.entrez_state.requests) == requests_before
        assert "already done" in capsys.readouterr().out


class TestFullChain:
    def test_artifacts_exist_and_are_consistent(self, demo_env, tmp_path):
        run_dir = tmp_path / "run"
        for args in demo_env.all_stage_args(run_dir):
            assert main(args) == 0, args

        classified = read_jsonl(run_dir / "classified.jsonl")
        corpus = read_jsonl(run_dir / "corpus.jsonl")
        assert {c["pmid"] for c in classified} == {c["pmid"] for c in corpus}
        include = [c for c in classified if c["label"] == "Include"]
        assert include and len(include) < len(classified)

        tables = read_jsonl(run_dir / "tables_parsed.jsonl")
        assert {t["pmid"] for t in tables} == {c["pmid"] for c in include}

        normalized = read_jsonl(run_dir / "normalized.jsonl")
        assert all(r["marker_cui"] and r["tumour_type_cui"] for r in normalized)

        aggregates = read_jsonl(run_dir / "aggregates.jsonl")
        assert sum(a["positives"] for a in aggregates) == sum(r["positives"] for r in normalized)

        with (run_dir / "comparison_report.csv").open() as handle:
            rows = list(csv.DictReader(handle))
        assert {row["marker"] for row in rows} == {"ER", "PR", "CD34"}
        by_marker = {row["marker"]: row for row in rows}
        assert by_marker["CD34"]["category"] == "NoReference"

        with (run_dir / "marker_report.csv").open() as handle:
            marker_rows = list(csv.DictReader(handle))
        assert [int(r["n_abstracts"]) for r in marker_rows] == sorted(
            (int(r["n_abstracts"]) for r in marker_rows), reverse=True
        )

        manifest = json.loads((run_dir / "manifest.json").read_text())
        for stage in ("corpus", "classified", "tables_raw", "tables_parsed", "normalized", "aggregates"):
            info = manifest["stages"][stage]
            assert info["status"] == "done"
            assert info["count"] == len(read_jsonl(run_dir / f"{stage}.jsonl"))

    def test_quarantine_relabel_is_idempotent(self, demo_env, tmp_path):
        run_dir = tmp_path / "run"
        # make one abstract unparseable at classification time
        victim = "8000001"
        original_fn = demo_env.llm_state.classify_fn
        demo_env.llm_state.classify_fn = lambda content: "maybe" if victim in content else original_fn(content)
        assert main(demo_env.fetch_args(run_dir)) == 0
        assert main(demo_env.classify_args(run_dir)) == 0
        quarantine = read_jsonl(run_dir / "quarantine.jsonl")
        assert [q["pmid"] for q in quarantine] == [victim]

        # operator relabels the quarantined record by appending a corrected line
        manifest = json.loads((run_dir / "manifest.json").read_text())
        manifest["stages"]["classified"]["status"] = "running"
        (run_dir / "manifest.json").write_text(json.dumps(manifest))
        before = (run_dir / "classified.jsonl").read_text()
        fixed = dict(read_jsonl(run_dir / "classified.jsonl")[0])
        fixed.update({"pmid": victim, "label": "Exclude", "raw_output": "Exclude (manual)"})
        (run_dir / "classified.jsonl").open("a").write(json.dumps(fixed) + "\n")

        demo_env.llm_state.classify_fn = original_fn
        calls_before = len(demo_env.llm_state.requests)
        assert main(demo_env.classify_args(run_dir)) == 0
        assert len(demo_env.llm_state.requests) == calls_before  # nothing reprocessed
        after = (run_dir / "classified.jsonl").read_text()
        assert after.startswith(before)  # previously classified lines untouched

    def test_retry_quarantined_reprocesses_after_done(self, demo_env, tmp_path):
        run_dir = tmp_path / "run"
        victim = "8000001"
        original_fn = demo_env.llm_state.classify_fn
        demo_env.llm_state.classify_fn = lambda content: "maybe" if victim in content else original_fn(content)
        assert main(demo_env.fetch_args(run_dir)) == 0
        assert main(demo_env.classify_args(run_dir)) == 0
        assert [q["pmid"] for q in read_jsonl(run_dir / "quarantine.jsonl")] == [victim]

        # plain rerun leaves the quarantined record alone
        assert main(demo_env.classify_args(run_dir)) == 0
        assert [q["pmid"] for q in read_jsonl(run_dir / "quarantine.jsonl")] == [victim]

        demo_env.llm_state.classify_fn = original_fn
        assert main([*demo_env.classify_args(run_dir), "--retry-quarantined"]) == 0
        assert read_jsonl(run_dir / "quarantine.jsonl") == []
        classified = read_jsonl(run_dir / "classified.jsonl")
        assert victim in {c["pmid"] for c in classified}
        assert len(classified) == 50


class TestRunDirResolution:
    def test_same_config_reuses_directory_new_config_forces_new_one(self, demo_env, tmp_path):
        runs_root = tmp_path / "runs"
        fetch = [a for a in demo_env.fetch_args(tmp_path / "ignored") if a != "--run-dir" and a != str(tmp_path / "ignored")]
        assert main([*fetch, "--runs-root", str(runs_root)]) == 0
        dirs = sorted(runs_root.iterdir())
        assert len(dirs) == 1

        # same hashed config: classify lands in the same run directory
        classify = [a for a in demo_env.classify_args(tmp_path / "ignored") if a != "--run-dir" and a != str(tmp_path / "ignored")]
        assert main([*classify, "--runs-root", str(runs_root)]) == 0
        assert sorted(runs_root.iterdir()) == dirs
        assert (dirs[0] / "classified.jsonl").exists()

        # changing a results-affecting setting forces a fresh directory
        assert main([*fetch, "--runs-root", str(runs_root), "--cap", "25"]) == 0
        assert len(list(runs_root.iterdir())) == 2


class TestConfigFile:
    def test_values_loaded_and_flags_win(self, tmp_path):
        config_file = tmp_path / "pipeline.conf"
        config_file.write_text("cap = 50\nllm_model = local-model\n# comment\n", encoding="utf-8")
        config = build_config(flag_values={"cap": 25}, config_path=config_file, env={})
        assert config.cap == 25  # flag wins
        assert config.llm_model == "local-model"

    def test_env_below_config_file(self, tmp_path):
        config_file = tmp_path / "pipeline.conf"
        config_file.write_text("llm_model = from-file\n", encoding="utf-8")
        config = build_config(config_path=config_file, env={"LLM_MODEL": "from-env"})
        assert config.llm_model == "from-file"
        config = build_config(env={"LLM_MODEL": "from-env"})
        assert config.llm_model == "from-env"

    def test_unknown_key_rejected(self, tmp_path):
        config_file = tmp_path / "pipeline.conf"
        config_file.write_text("caps = 50\n", encoding="utf-8")
        with pytest.raises(ConfigError, match="unknown config key"):
            load_config_file(config_file)

    def test_validation_bounds(self):
        with pytest.raises(ConfigError):
            build_config(flag_values={"cap": 10_000}, env={})
        with pytest.raises(ConfigError):
            build_config(flag_values={"wrong_f1_threshold": 1.5}, env={})

    def test_boolean_coercion(self, tmp_path):
        config_file = tmp_path / "pipeline.conf"
        config_file.write_text("split_qualifiers = true\n", encoding="utf-8")
        assert build_config(config_path=config_file, env={}).split_qualifiers is True


class TestEvalCommands:
    def fabricate_predictions(self, gold_path: Path, out_path: Path, flip_include: int, flip_exclude: int):
        """Copy gold labels, flipping the first N of each class."""
        records = read_jsonl(gold_path)
        flipped = []
        include_seen = exclude_seen = 0
        for record in records:
            label = record["label"]
            if label == "Include" and include_seen < flip_include:
                label, include_seen = "Exclude", include_seen + 1
            elif label == "Exclude" and exclude_seen < flip_exclude:
                label, exclude_seen = "Include", exclude_seen + 1
            flipped.append({"pmid": record["pmid"], "label": label, "raw_output": label, "model_id": "m", "prompt_hash": "h"})
        out_path.write_text("".join(json.dumps(r) + "\n" for r in flipped), encoding="utf-8")

    def test_eval_classify_reproduces_reported_metrics(self, tmp_path):
        gold = Path(__file__).parent.parent / "data" / "gold_eval.jsonl"
        preds = tmp_path / "preds.jsonl"
        self.fabricate_predictions(gold, preds, flip_include=8, flip_exclude=9)
        run_dir = tmp_path / "run"
        exit_code = main(
            ["eval-classify", "--run-dir", str(run_dir), "--gold", str(gold), "--pred", str(preds)]
        )
        assert exit_code == 0
        metrics = json.loads((run_dir / "metrics.json").read_text())
        assert metrics["accuracy_percent"] == "91.5"
        assert metrics["f1_percent"] == "91.4"
        assert (metrics["tp"], metrics["fp"], metrics["fn"], metrics["tn"]) == (90, 9, 8, 93)

    def test_eval_classify_missing_prediction_fails(self, tmp_path):
        gold = tmp_path / "gold.jsonl"
        gold.write_text('{"pmid": "1", "label": "Include"}\n', encoding="utf-8")
        preds = tmp_path / "preds.jsonl"
        preds.write_text("", encoding="utf-8")
        assert main(["eval-classify", "--run-dir", str(tmp_path / "r"), "--gold", str(gold), "--pred", str(preds)]) == 2

    def test_eval_tables_on_fixture_pair(self, tmp_path):
        fixtures = Path(__file__).parent / "data" / "renal_s100a4"
        from ihcmine.tables import parse_markdown_table

        gold_table = parse_markdown_table((fixtures / "gold.md").read_text(), pmid="21691200")
        pred_table = parse_markdown_table((fixtures / "pred_correct.md").read_text(), pmid="21691200")
        gold_path = tmp_path / "gold.jsonl"
        pred_path = tmp_path / "pred.jsonl"
        gold_path.write_text(json.dumps(gold_table.to_dict()) + "\n", encoding="utf-8")
        pred_path.write_text(json.dumps(pred_table.to_dict()) + "\n", encoding="utf-8")
        abstracts = tmp_path / "corpus.jsonl"
        abstracts.write_text(
            json.dumps(
                {
                    "pmid": "21691200",
                    "title": "t",
                    "abstract_text": (fixtures / "abstract.txt").read_text(),
                    "source_markers": ["S100"],
                    "retrieved_at": "",
                }
            )
            + "\n",
            encoding="utf-8",
        )
        run_dir = tmp_path / "run"
        exit_code = main(
            [
                "eval-tables",
                "--run-dir",
                str(run_dir),
                "--gold",
                str(gold_path),
                "--pred",
                str(pred_path),
                "--abstracts",
                str(abstracts),
            ]
        )
        assert exit_code == 0
        report = json.loads((run_dir / "eval_report.json").read_text())
        assert report["histogram"]["Correct"] == 1
        assert report["scores"][0]["exact"] is True
