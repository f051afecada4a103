from __future__ import annotations

import csv
import json
from dataclasses import replace

import pytest

from recipebench.dataset import EvalSet
from recipebench.judge import JudgeFailure, judge_offline
from recipebench.metrics import LogProbRecord
from recipebench.parsing import parse_generated
from recipebench.report import (
    FormatStats,
    Provenance,
    ReportError,
    ScoreInputs,
    assemble_report,
    build_ingredient_pairs,
    build_procedure_pairs,
    compute_format_stats,
    emit,
    load_report,
    report_from_obj,
    report_to_obj,
)
from recipebench.traindata import render_recipe_text

from .conftest import make_recipe


def _provenance():
    return Provenance(
        tokenizer_id="fallback",
        judge_source_mix={},
        excluded_verdicts=0,
        excluded_sample_ids=(),
        seeds={"split": 0, "sample": 0, "pattern": 0, "audit": 0},
        config_hash="deadbeef",
    )


def _mini_run(rng, templates, n_per_category=4, categories=("カテゴリA", "カテゴリB")):
    """Synthetic evalset + parsed outputs with one refusal and one bad text."""
    samples = []
    texts = {}
    counter = 0
    for category in categories:
        for i in range(n_per_category):
            recipe = replace(make_recipe(rng, f"g{counter:03d}"), eval_category=category)
            samples.append(recipe)
            if counter == 1:
                texts[recipe.id] = templates.refusal_apology + "\n画像の説明: 犬。"
            elif counter == 2:
                texts[recipe.id] = "タイトル: 謎\n材料:\n- 何か: 少々"  # no procedures
            else:
                texts[recipe.id] = render_recipe_text(recipe, templates)
            counter += 1
    evalset = EvalSet(tuple(samples), {}, n_per_category, 0)
    parsed = {k: parse_generated(v, templates) for k, v in texts.items()}
    return evalset, parsed


def _assemble(rng, templates, logprobs=None, drop_verdict_for=None):
    evalset, parsed = _mini_run(rng, templates)
    pairs = build_ingredient_pairs(evalset, parsed)
    outcomes = []
    for pair in pairs:
        if drop_verdict_for and pair.sample_id in drop_verdict_for:
            outcomes.append(JudgeFailure(pair.sample_id, "boom", 4))
        else:
            outcomes.append(judge_offline(pair))
    scores = ScoreInputs(
        build_procedure_pairs(evalset, parsed, "fallback"),
        logprobs,
    )
    return evalset, parsed, outcomes, assemble_report(
        evalset, parsed, outcomes, scores, "test-model", _provenance()
    )


# ---------------------------------------------------------------------------
# compute_format_stats
# ---------------------------------------------------------------------------

def test_format_stats_counts(templates, rng):
    clean = [
        parse_generated(render_recipe_text(make_recipe(rng, f"c{i}"), templates), templates)
        for i in range(5)
    ]
    refusal = parse_generated(templates.refusal_apology, templates)
    stats = compute_format_stats(clean + [refusal])
    assert stats == FormatStats(5, 1, 0, 0, 0, 6)


def test_format_stats_multi_error_counted_per_element(templates):
    one = parse_generated("ほげほげ", templates)  # all three errors
    stats = compute_format_stats([one])
    assert stats.completed == 1
    assert (stats.error_title, stats.error_ingredients, stats.error_procedures) == (1, 1, 1)


def test_format_stats_invariants():
    with pytest.raises(ReportError):
        FormatStats(completed=1, refusal=1, error_title=0, error_ingredients=0,
                    error_procedures=0, total=3)
    with pytest.raises(ReportError):
        FormatStats(completed=1, refusal=0, error_title=2, error_ingredients=0,
                    error_procedures=0, total=1)


def test_format_stats_all_clean_row_shape(templates, rng):
    outputs = [
        parse_generated(render_recipe_text(make_recipe(rng, f"p{i}"), templates), templates)
        for i in range(10)
    ]
    stats = compute_format_stats(outputs)
    assert (stats.completed, stats.refusal, stats.error_title,
            stats.error_ingredients, stats.error_procedures) == (10, 0, 0, 0, 0)


# ---------------------------------------------------------------------------
# assemble_report
# ---------------------------------------------------------------------------

def test_assemble_per_category_counts_sum_to_overall(templates, rng):
    _, _, _, result = _assemble(rng, templates)
    summed = None
    for block in result.per_category.values():
        summed = block.format_stats if summed is None else summed + block.format_stats
    assert summed == result.format_stats
    for scope in ("all", "seasoning", "non_seasoning"):
        overall = result.set_metrics.scopes[scope]
        assert overall.tp == sum(
            b.set_metrics.scopes[scope].tp for b in result.per_category.values()
        )
        assert overall.fp == sum(
            b.set_metrics.scopes[scope].fp for b in result.per_category.values()
        )
        assert overall.fn == sum(
            b.set_metrics.scopes[scope].fn for b in result.per_category.values()
        )


def test_assemble_counts_excluded_verdicts(templates, rng):
    _, _, _, result = _assemble(rng, templates, drop_verdict_for={"g003"})
    assert result.provenance.excluded_verdicts == 1
    assert result.provenance.excluded_sample_ids == ("g003",)
    assert result.provenance.judge_source_mix == {"offline": 7}


def test_assemble_includes_perplexity_when_given(templates, rng):
    logprobs = tuple(
        LogProbRecord(f"g{i:03d}", (-0.5, -0.25)) for i in range(8)
    )
    _, _, _, result = _assemble(rng, templates, logprobs=logprobs)
    assert result.perplexity is not None
    _, _, _, without = _assemble(rng, templates)
    assert without.perplexity is None


def test_assemble_missing_parsed_sample_is_an_error(templates, rng):
    evalset, parsed = _mini_run(rng, templates)
    pairs = build_ingredient_pairs(evalset, parsed)
    outcomes = [judge_offline(p) for p in pairs]
    scores = ScoreInputs(build_procedure_pairs(evalset, parsed, "fallback"))
    short = dict(parsed)
    short.popitem()
    with pytest.raises(ReportError):
        assemble_report(evalset, short, outcomes, scores, "x", _provenance())


def test_assemble_unknown_sample_is_an_error(templates, rng):
    evalset, parsed = _mini_run(rng, templates)
    pairs = build_ingredient_pairs(evalset, parsed)
    outcomes = [judge_offline(p) for p in pairs]
    scores = ScoreInputs(build_procedure_pairs(evalset, parsed, "fallback"))
    extra = dict(parsed)
    extra["ghost"] = next(iter(parsed.values()))
    with pytest.raises(ReportError):
        assemble_report(evalset, extra, outcomes, scores, "x", _provenance())


def test_assemble_zero_verdicts_still_reports(templates, rng):
    evalset, parsed = _mini_run(rng, templates)
    scores = ScoreInputs(build_procedure_pairs(evalset, parsed, "fallback"))
    result = assemble_report(evalset, parsed, [], scores, "x", _provenance())
    assert result.set_metrics.overall.degenerate
    assert result.provenance.excluded_verdicts == len(evalset)


def test_aggregation_additivity(templates, rng):
    evalset, parsed = _mini_run(rng, templates)
    pairs = build_ingredient_pairs(evalset, parsed)
    outcomes = [judge_offline(p) for p in pairs]
    scores = ScoreInputs(build_procedure_pairs(evalset, parsed, "fallback"))
    whole = assemble_report(evalset, parsed, outcomes, scores, "x", _provenance())

    ids_a = {r.id for r in evalset.samples[:4]}
    def subset(ids):
        sub_eval = EvalSet(
            tuple(r for r in evalset.samples if r.id in ids), {}, 4, 0
        )
        sub_parsed = {k: v for k, v in parsed.items() if k in ids}
        sub_outcomes = [o for o in outcomes if o.sample_id in ids]
        sub_scores = ScoreInputs(
            {k: v for k, v in scores.procedure_pairs.items() if k in ids}
        )
        return assemble_report(sub_eval, sub_parsed, sub_outcomes, sub_scores, "x", _provenance())

    part_a = subset(ids_a)
    part_b = subset({r.id for r in evalset.samples} - ids_a)
    assert part_a.format_stats + part_b.format_stats == whole.format_stats
    for scope in ("all", "seasoning", "non_seasoning"):
        merged_tp = part_a.set_metrics.scopes[scope].tp + part_b.set_metrics.scopes[scope].tp
        merged_fp = part_a.set_metrics.scopes[scope].fp + part_b.set_metrics.scopes[scope].fp
        merged_fn = part_a.set_metrics.scopes[scope].fn + part_b.set_metrics.scopes[scope].fn
        overall = whole.set_metrics.scopes[scope]
        assert (merged_tp, merged_fp, merged_fn) == (overall.tp, overall.fp, overall.fn)
        if merged_tp + merged_fp:
            assert overall.precision == merged_tp / (merged_tp + merged_fp)


# ---------------------------------------------------------------------------
# Emission
# ---------------------------------------------------------------------------

def test_emit_json_round_trip(tmp_path, templates, rng):
    _, _, _, result = _assemble(rng, templates)
    path = tmp_path / "report.json"
    emit(result, "json", path)
    assert load_report(path) == result


def test_report_obj_round_trip(templates, rng):
    logprobs = tuple(LogProbRecord(f"g{i:03d}", (-0.1,)) for i in range(8))
    _, _, _, result = _assemble(rng, templates, logprobs=logprobs)
    assert report_from_obj(json.loads(json.dumps(report_to_obj(result)))) == result


def test_emit_markdown_columns(tmp_path, templates, rng):
    _, _, _, result = _assemble(rng, templates)
    path = tmp_path / "report.md"
    emit(result, "markdown", path)
    text = path.read_text(encoding="utf-8")
    assert "| Model name | Perplexity | Completed | Refusal | Error title | Error ingredients | Error procedures |" in text
    assert "| Model name | micro F1 | micro Precision | micro Recall | BLEU | ROUGE-L |" in text
    assert "test-model" in text
    # three-decimal rendering
    assert f"{result.bleu:.3f}" in text


def test_emit_csv_rows(tmp_path, templates, rng):
    _, _, _, result = _assemble(rng, templates)
    path = tmp_path / "report.csv"
    emit(result, "csv", path)
    with open(path, encoding="utf-8", newline="") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 1 + len(result.per_category)
    assert rows[0]["category"] == "overall"
    assert rows[0]["total"] == str(result.format_stats.total)


def test_emit_unknown_format(tmp_path, templates, rng):
    _, _, _, result = _assemble(rng, templates)
    with pytest.raises(ReportError):
        emit(result, "xml", tmp_path / "report.xml")
