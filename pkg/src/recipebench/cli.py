"""Command-line pipeline orchestration.

Exit codes: 0 success, 1 runtime failure, 2 configuration error (bad or
missing config values, unreadable input paths, missing credentials).
"""

from __future__ import annotations

import json
import sys
from contextlib import contextmanager
from pathlib import Path

import click

from . import dataset, judge, metrics, parsing, report, traindata
from .config import ConfigError, RunConfig, load_lexicon_words, load_synonyms, load_templates
from .textnorm import IngredientNormalizer


@contextmanager
def _exit_codes():
    try:
        yield
    except (ConfigError, judge.MissingCredentialError) as exc:
        click.echo(f"configuration error: {exc}", err=True)
        sys.exit(2)
    except Exception as exc:  # noqa: BLE001 - uniform runtime failure exit
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)


def _require_file(path: str | None, what: str) -> Path:
    if path is None:
        raise ConfigError(f"{what} path is not configured")
    resolved = Path(path)
    if not resolved.is_file():
        raise ConfigError(f"{what} file not found: {resolved}")
    return resolved


def _load_config(config_path: str, seed: int | None, out_dir: str | None) -> RunConfig:
    config = RunConfig.from_file(_require_file(config_path, "config"))
    if seed is not None:
        config.seed = seed
    if out_dir is not None:
        config.out_dir = out_dir
    return config


def _load_judge_assets(config: RunConfig):
    if config.lexicon_path is not None:
        _require_file(config.lexicon_path, "lexicon")
    if config.synonyms_path is not None:
        _require_file(config.synonyms_path, "synonyms")
    normalizer = IngredientNormalizer(synonyms=load_synonyms(config.synonyms_path))
    lexicon = judge.SeasoningLexicon.from_words(
        load_lexicon_words(config.lexicon_path), normalizer
    )
    return normalizer, lexicon


def _load_template_config(config: RunConfig):
    if config.templates_path is not None:
        _require_file(config.templates_path, "templates")
    return load_templates(config.templates_path)


@click.group()
def main() -> None:
    """Benchmark pipeline for Japanese image-to-recipe generation models."""


# ---------------------------------------------------------------------------
# prepare
# ---------------------------------------------------------------------------

@main.command()
@click.option("--config", "config_path", required=True, help="Run configuration file.")
@click.option("--seed", type=int, default=None, help="Override the master seed.")
@click.option("--out", "out_dir", default=None, help="Override the output directory.")
def prepare(config_path: str, seed: int | None, out_dir: str | None) -> None:
    """Split corpora, exclude broken images, and sample the balanced eval set."""
    with _exit_codes():
        config = _load_config(config_path, seed, out_dir)
        out = Path(config.out_dir)
        out.mkdir(parents=True, exist_ok=True)

        recipes_path = _require_file(config.recipes_path, "recipes corpus")
        if config.taxonomy_path is not None:
            _require_file(config.taxonomy_path, "taxonomy")
            taxonomy = dataset.load_taxonomy(config.taxonomy_path)
        else:
            from .config import default_taxonomy_path

            taxonomy = dataset.load_taxonomy(default_taxonomy_path())

        corpus = dataset.load_recipes(recipes_path, config.recipes_format)
        summary: dict = {
            "loaded": len(corpus),
            "rejected": len(corpus.rejects),
            "reject_reasons": [r.reason for r in corpus.rejects],
        }

        train, test = dataset.split_by_category(
            corpus, config.test_fraction, config.seed_for("split")
        )
        summary["split"] = {"train": len(train), "test": len(test)}

        excluded_train: list = []
        excluded_test: list = []
        if config.image_root is not None:
            train, excluded_train = dataset.exclude_broken_images(train, config.image_root)
            test, excluded_test = dataset.exclude_broken_images(test, config.image_root)
        summary["excluded_images"] = {
            "train": len(excluded_train),
            "test": len(excluded_test),
        }
        summary["after_exclusion"] = {"train": len(train), "test": len(test)}

        test, unmapped = dataset.assign_eval_categories(test, taxonomy)
        summary["unmapped_categories"] = unmapped

        evalset = dataset.sample_balanced(
            test, config.per_category, config.seed_for("sample")
        )
        summary["evalset"] = {
            "size": len(evalset),
            "categories": len(evalset.categories()),
            "shortfalls": dict(sorted(evalset.shortfalls.items())),
        }

        nonfood_count = None
        if config.captions_path is not None:
            captions = dataset.load_captions(_require_file(config.captions_path, "captions"))
            nonfood = dataset.filter_nonfood_captions(
                captions, set(config.excluded_supercategories)
            )
            nonfood_count = len(nonfood)
            with open(out / "nonfood.jsonl", "w", encoding="utf-8") as f:
                for record in nonfood:
                    f.write(
                        json.dumps(
                            {
                                "image_id": record.image_id,
                                "captions": list(record.captions),
                                "supercategories": sorted(record.supercategories),
                            },
                            ensure_ascii=False,
                        )
                        + "\n"
                    )
            summary["nonfood"] = {"loaded": len(captions), "kept": nonfood_count}

        dataset.write_recipes(train, out / "train.jsonl")
        dataset.write_recipes(test, out / "test.jsonl")
        dataset.write_evalset(evalset, out / "evalset.json")
        with open(out / "prepare_summary.json", "w", encoding="utf-8") as f:
            json.dump(summary, f, ensure_ascii=False, sort_keys=True, indent=2)
            f.write("\n")

        click.echo(f"split: {len(train)} train / {len(test)} test")
        if nonfood_count is not None:
            click.echo(f"non-food captions kept: {nonfood_count}")
        click.echo(f"eval set: {len(evalset)} samples in {len(evalset.categories())} categories")
        click.echo(f"outputs written to {out}")


# ---------------------------------------------------------------------------
# build-traindata
# ---------------------------------------------------------------------------

@main.command("build-traindata")
@click.option("--config", "config_path", required=True)
@click.option("--seed", type=int, default=None)
@click.option("--out", "out_dir", default=None)
@click.option(
    "--regimes",
    default=None,
    help="Comma-separated regimes to build (default: from config).",
)
def build_traindata(
    config_path: str, seed: int | None, out_dir: str | None, regimes: str | None
) -> None:
    """Emit instruction-tuning JSONL files for the selected regimes."""
    with _exit_codes():
        config = _load_config(config_path, seed, out_dir)
        selected = regimes.split(",") if regimes else list(config.regimes)
        unknown = sorted(set(selected) - set(traindata.REGIMES))
        if unknown:
            raise ConfigError(f"unknown regimes: {unknown}")

        out = Path(config.out_dir)
        templates = _load_template_config(config)
        corpus = dataset.load_recipes(
            _require_file(str(out / "train.jsonl"), "prepared train corpus")
        )

        nonfood: list[dataset.CaptionRecord] = []
        needs_nonfood = any(r in selected for r in (traindata.REGIME_RNF, traindata.REGIME_RMQ))
        if needs_nonfood:
            nonfood = dataset.load_captions(
                _require_file(str(out / "nonfood.jsonl"), "prepared non-food captions")
            )

        for regime in selected:
            if regime == traindata.REGIME_R:
                examples = traindata.build_regime_r(corpus, templates)
            elif regime == traindata.REGIME_RNF:
                examples = traindata.build_regime_rnf(corpus, nonfood, templates)
            else:
                examples = traindata.build_regime_rmq(
                    corpus, nonfood, config.seed_for("pattern"), templates
                )
            path = out / f"train_{regime}.jsonl"
            count = traindata.write_examples(examples, path, templates)
            click.echo(f"{regime}: {count} examples -> {path}")


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

def _judge_pairs(
    config: RunConfig,
    pairs: list[judge.IngredientSetPair],
    judge_mode: str,
    templates,
    normalizer: IngredientNormalizer,
    lexicon: judge.SeasoningLexicon,
) -> list[judge.JudgeOutcome]:
    if judge_mode == "offline":
        return list(judge.judge_offline_batch(pairs, normalizer, lexicon))
    if judge_mode == "remote":
        judge_config = config.judge
        if judge_config.cache_dir is None and config.cache_dir is not None:
            judge_config.cache_dir = config.cache_dir
        return judge.judge_remote(
            pairs,
            judge_config,
            templates.judge_prompt,
            templates.empty_list_marker,
            lexicon,
        )
    raise ConfigError(f"unknown judge mode {judge_mode!r}")


@main.command()
@click.option("--config", "config_path", required=True)
@click.option("--generated", "generated_path", required=True, help="Generated texts JSONL.")
@click.option("--logprobs", "logprobs_path", default=None, help="Token log-probability JSONL.")
@click.option(
    "--judge-mode",
    type=click.Choice(["remote", "offline"]),
    default="offline",
    show_default=True,
)
@click.option("--tokenizer", "tokenizer_id", default=None, help="Override tokenizer id.")
@click.option("--label", default="model", show_default=True, help="Model label for the report.")
@click.option("--seed", type=int, default=None)
@click.option("--out", "out_dir", default=None)
def evaluate(
    config_path: str,
    generated_path: str,
    logprobs_path: str | None,
    judge_mode: str,
    tokenizer_id: str | None,
    label: str,
    seed: int | None,
    out_dir: str | None,
) -> None:
    """Parse generated outputs, judge ingredients, compute metrics, emit reports."""
    with _exit_codes():
        config = _load_config(config_path, seed, out_dir)
        if tokenizer_id is not None:
            config.tokenizer_id = tokenizer_id
        out = Path(config.out_dir)
        out.mkdir(parents=True, exist_ok=True)

        evalset_path = config.evalset_path or str(out / "evalset.json")
        evalset = dataset.load_evalset(_require_file(evalset_path, "eval set manifest"))
        templates = _load_template_config(config)
        normalizer, lexicon = _load_judge_assets(config)

        texts = parsing.read_generated_batch(_require_file(generated_path, "generated outputs"))
        sample_ids = [r.id for r in evalset.samples]
        missing = sorted(set(sample_ids) - set(texts))
        if missing:
            raise ValueError(f"generated outputs missing for samples: {missing[:5]}")

        parsed = {
            sample_id: parsing.parse_generated(
                texts[sample_id],
                templates,
                config.repetition_min_repeats,
                config.repetition_window_tokens,
                config.tokenizer_id,
            )
            for sample_id in sample_ids
        }

        pairs = report.build_ingredient_pairs(evalset, parsed)
        outcomes = _judge_pairs(config, pairs, judge_mode, templates, normalizer, lexicon)
        judge.write_outcomes(outcomes, out / f"verdicts_{label}.jsonl")

        procedure_pairs = report.build_procedure_pairs(evalset, parsed, config.tokenizer_id)
        logprob_records = None
        if logprobs_path is not None:
            logprob_records = tuple(
                metrics.read_logprob_records(_require_file(logprobs_path, "logprobs"))
            )

        provenance = report.Provenance(
            tokenizer_id=config.tokenizer_id,
            judge_source_mix={},
            excluded_verdicts=0,
            excluded_sample_ids=(),
            seeds={p: config.seed_for(p) for p in ("split", "sample", "pattern", "audit")},
            config_hash=config.config_hash(),
            run_metadata=config.run_metadata,
        )
        result = report.assemble_report(
            evalset,
            parsed,
            outcomes,
            report.ScoreInputs(procedure_pairs, logprob_records),
            label,
            provenance,
        )

        for fmt, suffix in (("json", "json"), ("markdown", "md"), ("csv", "csv")):
            report.emit(result, fmt, out / f"report_{label}.{suffix}")

        stats = result.format_stats
        click.echo(
            f"format: {stats.completed} completed / {stats.refusal} refusal "
            f"(errors: title {stats.error_title}, ingredients {stats.error_ingredients}, "
            f"procedures {stats.error_procedures})"
        )
        overall = result.set_metrics.overall
        click.echo(
            f"ingredients micro F1 {overall.f1:.3f} "
            f"(P {overall.precision:.3f} / R {overall.recall:.3f}, IoU {overall.iou:.3f})"
        )
        click.echo(f"procedures BLEU {result.bleu:.3f}, ROUGE-L {result.rouge_l:.3f}")
        if result.perplexity is not None:
            click.echo(f"perplexity {result.perplexity:.3f}")
        click.echo(f"report written to {out / f'report_{label}.json'}")


# ---------------------------------------------------------------------------
# judge
# ---------------------------------------------------------------------------

@main.command("judge")
@click.option("--config", "config_path", required=True)
@click.option("--pairs", "pairs_path", required=True, help="Ingredient pair JSONL.")
@click.option(
    "--judge-mode",
    type=click.Choice(["remote", "offline"]),
    default="offline",
    show_default=True,
)
@click.option("--out", "out_path", required=True, help="Verdict JSONL output path.")
def judge_cmd(config_path: str, pairs_path: str, judge_mode: str, out_path: str) -> None:
    """Judge a standalone file of {sample_id, generated, truth} pairs."""
    with _exit_codes():
        config = _load_config(config_path, None, None)
        templates = _load_template_config(config)
        normalizer, lexicon = _load_judge_assets(config)

        pairs = []
        with open(_require_file(pairs_path, "pairs"), encoding="utf-8") as f:
            for line in f:
                line = line.strip()
                if not line:
                    continue
                obj = json.loads(line)
                pairs.append(
                    judge.IngredientSetPair.from_lists(
                        str(obj["sample_id"]), obj["generated"], obj["truth"]
                    )
                )

        outcomes = _judge_pairs(config, pairs, judge_mode, templates, normalizer, lexicon)
        count = judge.write_outcomes(outcomes, out_path)
        failures = sum(1 for o in outcomes if isinstance(o, judge.JudgeFailure))
        click.echo(f"judged {count} pairs ({failures} failures) -> {out_path}")


# ---------------------------------------------------------------------------
# audit
# ---------------------------------------------------------------------------

@main.command()
@click.option("--config", "config_path", required=True)
@click.option("--verdicts", "verdicts_path", required=True, help="Verdict JSONL from evaluate/judge.")
@click.option("--seed", type=int, default=None)
@click.option("--out", "out_dir", default=None)
def audit(config_path: str, verdicts_path: str, seed: int | None, out_dir: str | None) -> None:
    """Write a category-balanced audit sheet for manual verdict checking."""
    with _exit_codes():
        config = _load_config(config_path, seed, out_dir)
        out = Path(config.out_dir)
        out.mkdir(parents=True, exist_ok=True)

        evalset_path = config.evalset_path or str(out / "evalset.json")
        evalset = dataset.load_evalset(_require_file(evalset_path, "eval set manifest"))
        outcomes = judge.read_outcomes(_require_file(verdicts_path, "verdicts"))
        verdicts = [o for o in outcomes if isinstance(o, judge.JudgeVerdict)]

        sheet = judge.sample_audit(
            verdicts, evalset, config.audit_per_category, config.seed_for("audit")
        )
        sheet_path = out / "audit_sheet.md"
        sheet_path.write_text(sheet.to_markdown(), encoding="utf-8")
        click.echo(f"audit sheet with {len(sheet)} samples -> {sheet_path}")


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

@main.command("report")
@click.option("--report", "report_path", required=True, help="Report JSON produced by evaluate.")
@click.option(
    "--format",
    "fmt",
    type=click.Choice(["json", "csv", "markdown"]),
    required=True,
)
@click.option("--out", "out_path", required=True)
def report_cmd(report_path: str, fmt: str, out_path: str) -> None:
    """Re-emit a stored report in another format."""
    with _exit_codes():
        loaded = report.load_report(_require_file(report_path, "report"))
        report.emit(loaded, fmt, out_path)
        click.echo(f"{fmt} report -> {out_path}")


if __name__ == "__main__":
    main()
