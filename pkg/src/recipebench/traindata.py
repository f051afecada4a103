"""Canonical recipe/refusal rendering and instruction-data builders.

Three regimes are supported: R (recipes only, empty query), R_NF (recipes
plus all-caption refusals for non-food images), and R_MQ (the same data
under six query/answer patterns, with single-caption refusals). Builders
are pure; stochastic choices derive from (seed, record id).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

from .config import QUERY_PATTERN_IDS, TemplateConfig
from .dataset import CaptionRecord, Recipe, RecipeCorpus
from .seeding import derive_rng

REGIME_R = "R"
REGIME_RNF = "R_NF"
REGIME_RMQ = "R_MQ"
REGIMES = (REGIME_R, REGIME_RNF, REGIME_RMQ)

EMPTY_QUERY_PATTERN = "EMPTY_FULL"

# Patterns usable for non-food records: all except the one interpolating a
# recipe title, which non-food images do not have.
_NONFOOD_PATTERNS = tuple(p for p in QUERY_PATTERN_IDS if p != "TITLE_GIVEN_FULL")

ALL_FIVE = "ALL_FIVE"
SINGLE = "SINGLE"


@dataclass(frozen=True)
class TrainingExample:
    image_ref: str
    query: str
    answer: str
    regime: str
    pattern: str
    is_food: bool

    def __post_init__(self) -> None:
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}")
        if self.pattern not in QUERY_PATTERN_IDS:
            raise ValueError(f"unknown pattern {self.pattern!r}")
        if not self.answer:
            raise ValueError("answer must be non-empty")
        if (self.query == "") != (self.pattern == EMPTY_QUERY_PATTERN):
            raise ValueError("query must be empty exactly for the empty-query pattern")
        if self.regime == REGIME_R and not self.is_food:
            raise ValueError("regime R contains food examples only")


@dataclass(frozen=True)
class QueryPattern:
    id: str
    query_template: str
    answer_selector: Callable[[Recipe, TemplateConfig], str]

    def render_query(self, recipe: Recipe) -> str:
        return self.query_template.replace("{title}", recipe.title)

    def render_answer(self, recipe: Recipe, templates: TemplateConfig) -> str:
        return self.answer_selector(recipe, templates)


# ---------------------------------------------------------------------------
# Canonical serialization
# ---------------------------------------------------------------------------

def render_title_line(recipe: Recipe, templates: TemplateConfig) -> str:
    return f"{templates.title_header}: {recipe.title}"


def render_ingredients_section(recipe: Recipe, templates: TemplateConfig) -> str:
    lines = [f"{templates.ingredients_header}:"]
    for entry in recipe.ingredients:
        if entry.quantity:
            lines.append(f"{templates.ingredient_bullet} {entry.name}: {entry.quantity}")
        else:
            lines.append(f"{templates.ingredient_bullet} {entry.name}")
    return "\n".join(lines)


def render_procedures_section(recipe: Recipe, templates: TemplateConfig) -> str:
    lines = [f"{templates.procedures_header}:"]
    for n, step in enumerate(recipe.steps, start=1):
        lines.append(f"{n}. {step}")
    return "\n".join(lines)


def render_recipe_text(recipe: Recipe, templates: TemplateConfig) -> str:
    """Serialize a recipe into the canonical line-oriented text.

    The output round-trips through the generated-text parser as long as
    titles and ingredient names do not themselves contain the section
    separators (": " or a line-leading step number).
    """
    return "\n".join(
        [
            render_title_line(recipe, templates),
            render_ingredients_section(recipe, templates),
            render_procedures_section(recipe, templates),
        ]
    )


def render_refusal(
    captions: Sequence[str],
    mode: str,
    seed: int,
    templates: TemplateConfig,
    record_id: str = "",
) -> str:
    """Apology text embedding all five captions (ALL_FIVE) or one (SINGLE)."""
    if not captions:
        raise ValueError("refusal needs at least one caption")
    if mode == ALL_FIVE:
        if len(captions) != 5:
            raise ValueError(f"ALL_FIVE requires exactly 5 captions, got {len(captions)}")
        lines = [templates.refusal_apology, templates.caption_intro]
        lines.extend(f"{templates.caption_bullet}{c}" for c in captions)
        return "\n".join(lines)
    if mode == SINGLE:
        rng = derive_rng(seed, "refusal", record_id)
        caption = captions[rng.randrange(len(captions))]
        return f"{templates.refusal_apology}\n{templates.caption_intro} {caption}"
    raise ValueError(f"unknown refusal mode {mode!r}")


# ---------------------------------------------------------------------------
# Query patterns
# ---------------------------------------------------------------------------

def build_query_patterns(templates: TemplateConfig) -> dict[str, QueryPattern]:
    selectors: dict[str, Callable[[Recipe, TemplateConfig], str]] = {
        "EMPTY_FULL": render_recipe_text,
        "ASK_FULL": render_recipe_text,
        "ASK_TITLE": render_title_line,
        "ASK_INGREDIENTS": render_ingredients_section,
        "ASK_PROCEDURES": render_procedures_section,
        "TITLE_GIVEN_FULL": render_recipe_text,
    }
    patterns = {
        pattern_id: QueryPattern(
            id=pattern_id,
            query_template=templates.queries[pattern_id],
            answer_selector=selectors[pattern_id],
        )
        for pattern_id in QUERY_PATTERN_IDS
    }
    assert len(patterns) == 6
    return patterns


def assign_pattern(seed: int, record_id: str, choices: Sequence[str]) -> str:
    rng = derive_rng(seed, "pattern", record_id)
    return choices[rng.randrange(len(choices))]


# ---------------------------------------------------------------------------
# Regime builders
# ---------------------------------------------------------------------------

def build_regime_r(
    corpus: RecipeCorpus,
    templates: TemplateConfig,
) -> list[TrainingExample]:
    if not corpus.recipes:
        raise ValueError("empty corpus")
    return [
        TrainingExample(
            image_ref=recipe.image_ref,
            query="",
            answer=render_recipe_text(recipe, templates),
            regime=REGIME_R,
            pattern=EMPTY_QUERY_PATTERN,
            is_food=True,
        )
        for recipe in sorted(corpus.recipes, key=lambda r: r.id)
    ]


def build_regime_rnf(
    corpus: RecipeCorpus,
    nonfood: Sequence[CaptionRecord],
    templates: TemplateConfig,
) -> list[TrainingExample]:
    if not corpus.recipes or not nonfood:
        raise ValueError("both recipe and non-food inputs must be non-empty")
    examples = [
        TrainingExample(
            image_ref=recipe.image_ref,
            query="",
            answer=render_recipe_text(recipe, templates),
            regime=REGIME_RNF,
            pattern=EMPTY_QUERY_PATTERN,
            is_food=True,
        )
        for recipe in sorted(corpus.recipes, key=lambda r: r.id)
    ]
    examples.extend(
        TrainingExample(
            image_ref=record.image_id,
            query="",
            answer=render_refusal(record.captions, ALL_FIVE, 0, templates),
            regime=REGIME_RNF,
            pattern=EMPTY_QUERY_PATTERN,
            is_food=False,
        )
        for record in sorted(nonfood, key=lambda c: c.image_id)
    )
    return examples


def build_regime_rmq(
    corpus: RecipeCorpus,
    nonfood: Sequence[CaptionRecord],
    seed: int,
    templates: TemplateConfig,
) -> list[TrainingExample]:
    if not corpus.recipes or not nonfood:
        raise ValueError("both recipe and non-food inputs must be non-empty")
    patterns = build_query_patterns(templates)

    examples = []
    for recipe in sorted(corpus.recipes, key=lambda r: r.id):
        pattern = patterns[assign_pattern(seed, recipe.id, QUERY_PATTERN_IDS)]
        examples.append(
            TrainingExample(
                image_ref=recipe.image_ref,
                query=pattern.render_query(recipe),
                answer=pattern.render_answer(recipe, templates),
                regime=REGIME_RMQ,
                pattern=pattern.id,
                is_food=True,
            )
        )
    for record in sorted(nonfood, key=lambda c: c.image_id):
        pattern = patterns[assign_pattern(seed, record.image_id, _NONFOOD_PATTERNS)]
        examples.append(
            TrainingExample(
                image_ref=record.image_id,
                query=pattern.query_template,
                answer=render_refusal(
                    record.captions, SINGLE, seed, templates, record.image_id
                ),
                regime=REGIME_RMQ,
                pattern=pattern.id,
                is_food=False,
            )
        )
    return examples


# ---------------------------------------------------------------------------
# Conversation JSONL
# ---------------------------------------------------------------------------

def example_to_obj(example: TrainingExample, templates: TemplateConfig) -> dict:
    return {
        "image": example.image_ref,
        "conversations": [
            {"role": "user", "text": f"{templates.image_token} {example.query}"},
            {"role": "assistant", "text": example.answer},
        ],
        "meta": {
            "regime": example.regime,
            "pattern": example.pattern,
            "is_food": example.is_food,
        },
    }


def example_from_obj(obj: dict, templates: TemplateConfig) -> TrainingExample:
    user, assistant = obj["conversations"]
    prefix = f"{templates.image_token} "
    text = user["text"]
    if not text.startswith(prefix):
        raise ValueError(f"user text does not start with the image token: {text!r}")
    return TrainingExample(
        image_ref=obj["image"],
        query=text[len(prefix):],
        answer=assistant["text"],
        regime=obj["meta"]["regime"],
        pattern=obj["meta"]["pattern"],
        is_food=bool(obj["meta"]["is_food"]),
    )


def write_examples(
    examples: Iterable[TrainingExample],
    path: str | Path,
    templates: TemplateConfig,
) -> int:
    count = 0
    with open(path, "w", encoding="utf-8") as f:
        for example in examples:
            f.write(
                json.dumps(example_to_obj(example, templates), ensure_ascii=False)
                + "\n"
            )
            count += 1
    return count


def read_examples(path: str | Path, templates: TemplateConfig) -> list[TrainingExample]:
    examples = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                examples.append(example_from_obj(json.loads(line), templates))
    return examples
