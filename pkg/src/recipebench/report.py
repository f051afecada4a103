"""Aggregation of parser, judge, and metric results into evaluation reports.

The report nests one overall block plus one block per evaluation category;
count columns are additive (per-category counts sum to the overall counts)
while ratio metrics are recomputed from pooled counts per block. JSON
emission is canonical and loss-free; markdown and CSV render floats with
three decimals.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

from .dataset import EvalSet
from .judge import (
    IngredientSetPair,
    JudgeFailure,
    JudgeOutcome,
    JudgeVerdict,
    counts_from_verdict,
)
from .metrics import (
    SCOPES,
    LogProbRecord,
    ScopeMetrics,
    SetMetricsReport,
    TokenSequence,
    corpus_bleu,
    corpus_perplexity,
    micro_set_metrics,
    rouge_l,
    tokenize,
)
from .parsing import COMPLETED, REFUSAL, ElementError, ParsedOutput, element_or_empty


class ReportError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Format statistics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FormatStats:
    completed: int
    refusal: int
    error_title: int
    error_ingredients: int
    error_procedures: int
    total: int

    def __post_init__(self) -> None:
        if self.completed + self.refusal != self.total:
            raise ReportError("completed + refusal must equal total")
        for count in (self.error_title, self.error_ingredients, self.error_procedures):
            if count > self.completed:
                raise ReportError("element error counts cannot exceed completed")

    def __add__(self, other: FormatStats) -> FormatStats:
        return FormatStats(
            self.completed + other.completed,
            self.refusal + other.refusal,
            self.error_title + other.error_title,
            self.error_ingredients + other.error_ingredients,
            self.error_procedures + other.error_procedures,
            self.total + other.total,
        )


def compute_format_stats(parsed: Sequence[ParsedOutput]) -> FormatStats:
    completed = refusal = e_title = e_ing = e_proc = 0
    for output in parsed:
        if output.classification == REFUSAL:
            refusal += 1
            continue
        if output.classification != COMPLETED:
            raise ReportError(f"unknown classification {output.classification!r}")
        completed += 1
        if ElementError.TITLE in output.element_errors:
            e_title += 1
        if ElementError.INGREDIENTS in output.element_errors:
            e_ing += 1
        if ElementError.PROCEDURES in output.element_errors:
            e_proc += 1
    return FormatStats(completed, refusal, e_title, e_ing, e_proc, len(parsed))


# ---------------------------------------------------------------------------
# Score inputs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ProcedurePair:
    sample_id: str
    candidate: TokenSequence
    reference: TokenSequence


@dataclass(frozen=True)
class ScoreInputs:
    procedure_pairs: dict[str, ProcedurePair]
    logprob_records: tuple[LogProbRecord, ...] | None = None


def build_procedure_pairs(
    evalset: EvalSet,
    parsed: Mapping[str, ParsedOutput],
    tokenizer_id: str,
) -> dict[str, ProcedurePair]:
    """Tokenize generated vs ground-truth procedures, one pair per sample.

    An errored or refused generation contributes an empty candidate, never
    a dropped sample.
    """
    pairs: dict[str, ProcedurePair] = {}
    for recipe in evalset.samples:
        candidate_text = element_or_empty(parsed[recipe.id], ElementError.PROCEDURES)
        reference_text = "\n".join(recipe.steps)
        pairs[recipe.id] = ProcedurePair(
            sample_id=recipe.id,
            candidate=tokenize(candidate_text, tokenizer_id),
            reference=tokenize(reference_text, tokenizer_id),
        )
    return pairs


def build_ingredient_pairs(
    evalset: EvalSet,
    parsed: Mapping[str, ParsedOutput],
) -> list[IngredientSetPair]:
    pairs = []
    for recipe in evalset.samples:
        output = parsed[recipe.id]
        if (
            output.classification == COMPLETED
            and ElementError.INGREDIENTS not in output.element_errors
        ):
            generated = [entry.name for entry in output.ingredients or ()]
        else:
            generated = []
        truth = [entry.name for entry in recipe.ingredients]
        pairs.append(IngredientSetPair.from_lists(recipe.id, generated, truth))
    return pairs


# ---------------------------------------------------------------------------
# Report structure
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Provenance:
    tokenizer_id: str
    judge_source_mix: dict[str, int]
    excluded_verdicts: int
    excluded_sample_ids: tuple[str, ...]
    seeds: dict[str, int]
    config_hash: str
    run_metadata: dict[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class CategoryBlock:
    format_stats: FormatStats
    set_metrics: SetMetricsReport
    bleu: float
    rouge_l: float
    perplexity: float | None


@dataclass(frozen=True)
class EvaluationReport:
    model_label: str
    format_stats: FormatStats
    set_metrics: SetMetricsReport
    bleu: float
    rouge_l: float
    perplexity: float | None
    per_category: dict[str, CategoryBlock]
    provenance: Provenance


def _rouge_macro(pairs: Sequence[ProcedurePair]) -> float:
    if not pairs:
        return 0.0
    total = math.fsum(rouge_l(p.candidate, p.reference).f for p in pairs)
    return 100.0 * total / len(pairs)


def _block_scores(
    pairs: Sequence[ProcedurePair],
    logprobs: Sequence[LogProbRecord] | None,
) -> tuple[float, float, float | None]:
    bleu = corpus_bleu([(p.candidate, p.reference) for p in pairs]) if pairs else 0.0
    rouge = _rouge_macro(pairs)
    perplexity = None
    if logprobs:
        perplexity = corpus_perplexity(logprobs)
    return bleu, rouge, perplexity


def assemble_report(
    evalset: EvalSet,
    parsed: Mapping[str, ParsedOutput],
    judge_outcomes: Sequence[JudgeOutcome],
    scores: ScoreInputs,
    label: str,
    provenance: Provenance,
) -> EvaluationReport:
    """Aggregate per-sample results into the full report.

    Every evalset sample must be present in `parsed` and in the procedure
    pairs; judge failures (and samples with no judge outcome at all) are
    counted as excluded verdicts, never silently dropped.
    """
    sample_ids = [recipe.id for recipe in evalset.samples]
    id_set = set(sample_ids)

    missing = sorted(id_set - set(parsed))
    if missing:
        raise ReportError(f"parsed outputs missing for samples: {missing[:5]}")
    unknown = sorted(set(parsed) - id_set)
    if unknown:
        raise ReportError(f"parsed outputs for unknown samples: {unknown[:5]}")
    missing_pairs = sorted(id_set - set(scores.procedure_pairs))
    if missing_pairs:
        raise ReportError(f"procedure pairs missing for samples: {missing_pairs[:5]}")

    verdicts: dict[str, JudgeVerdict] = {}
    failures: dict[str, JudgeFailure] = {}
    for outcome in judge_outcomes:
        if outcome.sample_id not in id_set:
            raise ReportError(f"judge outcome for unknown sample {outcome.sample_id!r}")
        if isinstance(outcome, JudgeVerdict):
            verdicts[outcome.sample_id] = outcome
        else:
            failures[outcome.sample_id] = outcome

    excluded_ids = sorted(
        set(failures) | (id_set - set(verdicts) - set(failures))
    )
    source_mix: dict[str, int] = {}
    for verdict in verdicts.values():
        source_mix[verdict.source] = source_mix.get(verdict.source, 0) + 1

    logprobs_by_id: dict[str, LogProbRecord] = {}
    if scores.logprob_records is not None:
        for record in scores.logprob_records:
            if record.sample_id not in id_set:
                raise ReportError(f"logprobs for unknown sample {record.sample_id!r}")
            logprobs_by_id[record.sample_id] = record

    def safe_set_metrics(ids: Sequence[str]) -> SetMetricsReport:
        counts = [
            c for i in ids if i in verdicts for c in counts_from_verdict(verdicts[i])
        ]
        if not counts:
            return SetMetricsReport(
                scopes={
                    scope: ScopeMetrics(0, 0, 0, 0.0, 0.0, 0.0, 0.0, True)
                    for scope in SCOPES
                }
            )
        return micro_set_metrics(counts)

    def build_block(ids: Sequence[str]) -> CategoryBlock:
        outputs = [parsed[i] for i in ids]
        pairs = [scores.procedure_pairs[i] for i in ids]
        logprobs = [logprobs_by_id[i] for i in ids if i in logprobs_by_id]
        bleu, rouge, perplexity = _block_scores(pairs, logprobs or None)
        return CategoryBlock(
            format_stats=compute_format_stats(outputs),
            set_metrics=safe_set_metrics(ids),
            bleu=bleu,
            rouge_l=rouge,
            perplexity=perplexity,
        )

    overall = build_block(sample_ids)

    by_category: dict[str, list[str]] = {}
    for recipe in evalset.samples:
        by_category.setdefault(recipe.eval_category or "(uncategorized)", []).append(
            recipe.id
        )
    per_category = {
        category: build_block(ids) for category, ids in sorted(by_category.items())
    }

    return EvaluationReport(
        model_label=label,
        format_stats=overall.format_stats,
        set_metrics=overall.set_metrics,
        bleu=overall.bleu,
        rouge_l=overall.rouge_l,
        perplexity=overall.perplexity,
        per_category=per_category,
        provenance=Provenance(
            tokenizer_id=provenance.tokenizer_id,
            judge_source_mix=dict(sorted(source_mix.items())),
            excluded_verdicts=len(excluded_ids),
            excluded_sample_ids=tuple(excluded_ids),
            seeds=dict(sorted(provenance.seeds.items())),
            config_hash=provenance.config_hash,
            run_metadata=provenance.run_metadata,
        ),
    )


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def _format_stats_to_obj(stats: FormatStats) -> dict:
    return {
        "completed": stats.completed,
        "refusal": stats.refusal,
        "error_title": stats.error_title,
        "error_ingredients": stats.error_ingredients,
        "error_procedures": stats.error_procedures,
        "total": stats.total,
    }


def _set_metrics_to_obj(metrics: SetMetricsReport) -> dict:
    return {
        scope: {
            "tp": m.tp,
            "fp": m.fp,
            "fn": m.fn,
            "precision": m.precision,
            "recall": m.recall,
            "f1": m.f1,
            "iou": m.iou,
            "degenerate": m.degenerate,
        }
        for scope, m in metrics.scopes.items()
    }


def _block_to_obj(block: CategoryBlock) -> dict:
    obj = {
        "format_stats": _format_stats_to_obj(block.format_stats),
        "set_metrics": _set_metrics_to_obj(block.set_metrics),
        "bleu": block.bleu,
        "rouge_l": block.rouge_l,
    }
    if block.perplexity is not None:
        obj["perplexity"] = block.perplexity
    return obj


def report_to_obj(report: EvaluationReport) -> dict:
    obj = {
        "model_label": report.model_label,
        "format_stats": _format_stats_to_obj(report.format_stats),
        "set_metrics": _set_metrics_to_obj(report.set_metrics),
        "bleu": report.bleu,
        "rouge_l": report.rouge_l,
        "per_category": {
            category: _block_to_obj(block)
            for category, block in report.per_category.items()
        },
        "provenance": {
            "tokenizer_id": report.provenance.tokenizer_id,
            "judge_source_mix": report.provenance.judge_source_mix,
            "excluded_verdicts": report.provenance.excluded_verdicts,
            "excluded_sample_ids": list(report.provenance.excluded_sample_ids),
            "seeds": report.provenance.seeds,
            "config_hash": report.provenance.config_hash,
            "run_metadata": report.provenance.run_metadata,
        },
    }
    if report.perplexity is not None:
        obj["perplexity"] = report.perplexity
    return obj


def _format_stats_from_obj(obj: dict) -> FormatStats:
    return FormatStats(
        completed=int(obj["completed"]),
        refusal=int(obj["refusal"]),
        error_title=int(obj["error_title"]),
        error_ingredients=int(obj["error_ingredients"]),
        error_procedures=int(obj["error_procedures"]),
        total=int(obj["total"]),
    )


def _set_metrics_from_obj(obj: dict) -> SetMetricsReport:
    return SetMetricsReport(
        scopes={
            scope: ScopeMetrics(
                tp=int(m["tp"]),
                fp=int(m["fp"]),
                fn=int(m["fn"]),
                precision=float(m["precision"]),
                recall=float(m["recall"]),
                f1=float(m["f1"]),
                iou=float(m["iou"]),
                degenerate=bool(m["degenerate"]),
            )
            for scope, m in obj.items()
        }
    )


def _block_from_obj(obj: dict) -> CategoryBlock:
    return CategoryBlock(
        format_stats=_format_stats_from_obj(obj["format_stats"]),
        set_metrics=_set_metrics_from_obj(obj["set_metrics"]),
        bleu=float(obj["bleu"]),
        rouge_l=float(obj["rouge_l"]),
        perplexity=float(obj["perplexity"]) if "perplexity" in obj else None,
    )


def report_from_obj(obj: dict) -> EvaluationReport:
    prov = obj["provenance"]
    return EvaluationReport(
        model_label=str(obj["model_label"]),
        format_stats=_format_stats_from_obj(obj["format_stats"]),
        set_metrics=_set_metrics_from_obj(obj["set_metrics"]),
        bleu=float(obj["bleu"]),
        rouge_l=float(obj["rouge_l"]),
        perplexity=float(obj["perplexity"]) if "perplexity" in obj else None,
        per_category={
            category: _block_from_obj(block)
            for category, block in obj["per_category"].items()
        },
        provenance=Provenance(
            tokenizer_id=str(prov["tokenizer_id"]),
            judge_source_mix={k: int(v) for k, v in prov["judge_source_mix"].items()},
            excluded_verdicts=int(prov["excluded_verdicts"]),
            excluded_sample_ids=tuple(prov["excluded_sample_ids"]),
            seeds={k: int(v) for k, v in prov["seeds"].items()},
            config_hash=str(prov["config_hash"]),
            run_metadata=dict(prov.get("run_metadata", {})),
        ),
    )


def load_report(path: str | Path) -> EvaluationReport:
    with open(path, encoding="utf-8") as f:
        return report_from_obj(json.load(f))


# ---------------------------------------------------------------------------
# Emission
# ---------------------------------------------------------------------------

def _fmt(value: float | None) -> str:
    return "" if value is None else f"{value:.3f}"


def _triple(metrics: SetMetricsReport, field_name: str) -> str:
    values = [
        getattr(metrics.scopes[scope], field_name)
        for scope in ("all", "non_seasoning", "seasoning")
    ]
    return f"{values[0]:.3f} ({values[1]:.3f}/{values[2]:.3f})"


def _markdown(report: EvaluationReport) -> str:
    lines = [
        f"# Evaluation report: {report.model_label}",
        "",
        "## Recipe format",
        "",
        "| Model name | Perplexity | Completed | Refusal | Error title | Error ingredients | Error procedures |",
        "|---|---|---|---|---|---|---|",
        "| {label} | {ppl} | {c} | {r} | {et} | {ei} | {ep} |".format(
            label=report.model_label,
            ppl=_fmt(report.perplexity) or "---",
            c=report.format_stats.completed,
            r=report.format_stats.refusal,
            et=report.format_stats.error_title,
            ei=report.format_stats.error_ingredients,
            ep=report.format_stats.error_procedures,
        ),
        "",
        "## Ingredients and procedures",
        "",
        "Ingredient scores read overall (non-seasoning/seasoning).",
        "",
        "| Model name | micro F1 | micro Precision | micro Recall | BLEU | ROUGE-L |",
        "|---|---|---|---|---|---|",
        "| {label} | {f1} | {p} | {r} | {bleu} | {rouge} |".format(
            label=report.model_label,
            f1=_triple(report.set_metrics, "f1"),
            p=_triple(report.set_metrics, "precision"),
            r=_triple(report.set_metrics, "recall"),
            bleu=_fmt(report.bleu),
            rouge=_fmt(report.rouge_l),
        ),
        "",
        "## Per-category breakdown",
        "",
        "| Category | Samples | Completed | Refusal | micro F1 | BLEU | ROUGE-L |",
        "|---|---|---|---|---|---|---|",
    ]
    for category, block in report.per_category.items():
        lines.append(
            "| {cat} | {n} | {c} | {r} | {f1} | {bleu} | {rouge} |".format(
                cat=category,
                n=block.format_stats.total,
                c=block.format_stats.completed,
                r=block.format_stats.refusal,
                f1=_triple(block.set_metrics, "f1"),
                bleu=_fmt(block.bleu),
                rouge=_fmt(block.rouge_l),
            )
        )
    lines.extend(
        [
            "",
            "## Provenance",
            "",
            f"- tokenizer: {report.provenance.tokenizer_id}",
            f"- judge sources: {report.provenance.judge_source_mix}",
            f"- excluded verdicts: {report.provenance.excluded_verdicts}",
            f"- seeds: {report.provenance.seeds}",
            f"- config hash: {report.provenance.config_hash}",
            "",
        ]
    )
    return "\n".join(lines)


_CSV_FIELDS = [
    "model_label",
    "category",
    "total",
    "completed",
    "refusal",
    "error_title",
    "error_ingredients",
    "error_procedures",
    "precision_all",
    "recall_all",
    "f1_all",
    "iou_all",
    "precision_seasoning",
    "recall_seasoning",
    "f1_seasoning",
    "iou_seasoning",
    "precision_non_seasoning",
    "recall_non_seasoning",
    "f1_non_seasoning",
    "iou_non_seasoning",
    "bleu",
    "rouge_l",
    "perplexity",
]


def _csv_row(label: str, category: str, block: CategoryBlock) -> dict:
    row = {
        "model_label": label,
        "category": category,
        "total": block.format_stats.total,
        "completed": block.format_stats.completed,
        "refusal": block.format_stats.refusal,
        "error_title": block.format_stats.error_title,
        "error_ingredients": block.format_stats.error_ingredients,
        "error_procedures": block.format_stats.error_procedures,
        "bleu": _fmt(block.bleu),
        "rouge_l": _fmt(block.rouge_l),
        "perplexity": _fmt(block.perplexity),
    }
    for scope in SCOPES:
        metrics = block.set_metrics.scopes[scope]
        row[f"precision_{scope}"] = _fmt(metrics.precision)
        row[f"recall_{scope}"] = _fmt(metrics.recall)
        row[f"f1_{scope}"] = _fmt(metrics.f1)
        row[f"iou_{scope}"] = _fmt(metrics.iou)
    return row


def emit(report: EvaluationReport, format: str, path: str | Path) -> None:
    """Write the report as canonical JSON, flattened CSV, or markdown tables."""
    path = Path(path)
    if format == "json":
        with open(path, "w", encoding="utf-8") as f:
            json.dump(report_to_obj(report), f, ensure_ascii=False, sort_keys=True, indent=2)
            f.write("\n")
    elif format == "markdown":
        path.write_text(_markdown(report), encoding="utf-8")
    elif format == "csv":
        overall = CategoryBlock(
            format_stats=report.format_stats,
            set_metrics=report.set_metrics,
            bleu=report.bleu,
            rouge_l=report.rouge_l,
            perplexity=report.perplexity,
        )
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=_CSV_FIELDS)
            writer.writeheader()
            writer.writerow(_csv_row(report.model_label, "overall", overall))
            for category, block in report.per_category.items():
                writer.writerow(_csv_row(report.model_label, category, block))
    else:
        raise ReportError(f"unknown emit format {format!r}")
