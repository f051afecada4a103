"""Classification and decomposition of model-generated recipe text.

Every input string maps to exactly one outcome: a Refusal (apology prefix
match) or a Completed output whose title/ingredients/procedures are
extracted independently, each either present or flagged as an element
error. Repetition loops are truncated to their first occurrence before
extraction so that a looped tail does not poison earlier elements.
"""

from __future__ import annotations

import enum
import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

from .config import TemplateConfig
from .dataset import IngredientEntry
from .metrics import FALLBACK_TOKENIZER, segment
from .textnorm import nfkc

COMPLETED = "completed"
REFUSAL = "refusal"

DEFAULT_MIN_REPEATS = 3
DEFAULT_WINDOW_TOKENS = 64

_STEP_LINE = re.compile(r"^(\d+)\s*[.．)）]\s*(.*)$")


class ElementError(enum.Enum):
    TITLE = "error_title"
    INGREDIENTS = "error_ingredients"
    PROCEDURES = "error_procedures"


@dataclass(frozen=True)
class RepetitionDiagnostic:
    loop_detected: bool
    period_tokens: int
    salvage_boundary: int


@dataclass(frozen=True)
class ParsedOutput:
    classification: str
    title: str | None
    ingredients: tuple[IngredientEntry, ...] | None
    steps: tuple[str, ...] | None
    element_errors: frozenset[ElementError]
    repetition: RepetitionDiagnostic | None
    raw: str

    def __post_init__(self) -> None:
        if self.classification == REFUSAL:
            if (
                self.title is not None
                or self.ingredients is not None
                or self.steps is not None
                or self.element_errors
            ):
                raise ValueError("a refusal carries no elements and no element errors")


# ---------------------------------------------------------------------------
# Repetition detection
# ---------------------------------------------------------------------------

def detect_repetition(
    text: str,
    min_repeats: int = DEFAULT_MIN_REPEATS,
    window_tokens: int = DEFAULT_WINDOW_TOKENS,
    tokenizer_id: str = FALLBACK_TOKENIZER,
) -> RepetitionDiagnostic:
    """Scan for the earliest token block repeating consecutively.

    Returns the earliest position i (smallest period p on ties) where the
    block tokens[i:i+p], p <= window_tokens, occurs at least min_repeats
    times back to back. The salvage boundary is the character offset of the
    second occurrence, i.e. content up to and including the first occurrence
    is kept.
    """
    if min_repeats < 2:
        raise ValueError("min_repeats must be at least 2")
    spans = segment(text, tokenizer_id)
    tokens = [t for t, _, _ in spans]
    n = len(tokens)
    for i in range(n):
        max_period = min(window_tokens, (n - i) // min_repeats)
        for p in range(1, max_period + 1):
            block = tokens[i : i + p]
            repeats = 1
            j = i + p
            while repeats < min_repeats and tokens[j : j + p] == block:
                repeats += 1
                j += p
            if repeats >= min_repeats:
                boundary = spans[i + p][1]
                return RepetitionDiagnostic(True, p, boundary)
    return RepetitionDiagnostic(False, 0, len(text))


# ---------------------------------------------------------------------------
# Extraction helpers
# ---------------------------------------------------------------------------

def strip_code_fences(text: str) -> str:
    stripped = text.strip()
    if not stripped.startswith("```"):
        return text
    lines = stripped.splitlines()
    if len(lines) >= 2 and lines[-1].strip().startswith("```"):
        return "\n".join(lines[1:-1])
    return "\n".join(lines[1:])


def _header_value(line: str, header: str) -> str | None:
    """Value after 'header:' allowing whitespace and full-width colons."""
    line = line.strip()
    if not line.startswith(header):
        return None
    rest = line[len(header):].lstrip()
    if not rest or rest[0] not in (":", "："):
        return None
    return rest[1:].strip()


def _is_section_header(line: str, templates: TemplateConfig) -> bool:
    for header in (
        templates.title_header,
        templates.ingredients_header,
        templates.procedures_header,
    ):
        if _header_value(line, header) is not None:
            return True
    return False


def _section_lines(lines: list[str], start: int, templates: TemplateConfig) -> list[str]:
    collected = []
    for line in lines[start:]:
        if _is_section_header(line, templates):
            break
        collected.append(line)
    return collected


def _extract_title(lines: list[str], templates: TemplateConfig) -> str | None:
    for line in lines:
        value = _header_value(line, templates.title_header)
        if value is not None:
            return value if value else None
    return None


def _split_ingredient(content: str) -> IngredientEntry | None:
    for separator in (": ", "："):
        idx = content.find(separator)
        if idx > 0:
            name = content[:idx].strip()
            quantity = content[idx + len(separator):].strip()
            if name:
                return IngredientEntry(name, quantity)
            return None
    idx = content.find(":")
    if idx > 0:
        name = content[:idx].strip()
        quantity = content[idx + 1 :].strip()
        return IngredientEntry(name, quantity) if name else None
    name = content.strip()
    return IngredientEntry(name, "") if name else None


def _extract_ingredients(
    lines: list[str], templates: TemplateConfig
) -> tuple[IngredientEntry, ...] | None:
    bullet = templates.ingredient_bullet
    for idx, line in enumerate(lines):
        value = _header_value(line, templates.ingredients_header)
        if value is None or value != "":
            continue
        entries: list[IngredientEntry] = []
        for body_line in _section_lines(lines, idx + 1, templates):
            stripped = body_line.strip()
            if not stripped.startswith(bullet):
                continue
            entry = _split_ingredient(stripped[len(bullet):].lstrip())
            if entry is not None:
                entries.append(entry)
        return tuple(entries) if entries else None
    return None


def _extract_steps(lines: list[str], templates: TemplateConfig) -> tuple[str, ...] | None:
    for idx, line in enumerate(lines):
        value = _header_value(line, templates.procedures_header)
        if value is None or value != "":
            continue
        steps: list[str] = []
        for body_line in _section_lines(lines, idx + 1, templates):
            stripped = body_line.strip()
            if not stripped:
                continue
            match = _STEP_LINE.match(stripped)
            if match:
                steps.append(match.group(2))
            elif steps:
                # Unnumbered line inside the section continues the last step.
                steps[-1] = f"{steps[-1]}\n{stripped}"
        return tuple(steps) if steps else None
    return None


# ---------------------------------------------------------------------------
# parse_generated and element access
# ---------------------------------------------------------------------------

def parse_generated(
    text: str,
    templates: TemplateConfig,
    min_repeats: int = DEFAULT_MIN_REPEATS,
    window_tokens: int = DEFAULT_WINDOW_TOKENS,
    tokenizer_id: str = FALLBACK_TOKENIZER,
) -> ParsedOutput:
    """Classify one generated text; never raises on any input string."""
    body = strip_code_fences(text)

    normalized = nfkc(body.strip())
    for prefix in templates.refusal_prefixes:
        if normalized.startswith(nfkc(prefix)):
            return ParsedOutput(
                classification=REFUSAL,
                title=None,
                ingredients=None,
                steps=None,
                element_errors=frozenset(),
                repetition=None,
                raw=text,
            )

    diagnostic = detect_repetition(body, min_repeats, window_tokens, tokenizer_id)
    salvaged = body[: diagnostic.salvage_boundary] if diagnostic.loop_detected else body

    lines = salvaged.splitlines()
    title = _extract_title(lines, templates)
    ingredients = _extract_ingredients(lines, templates)
    steps = _extract_steps(lines, templates)

    errors = set()
    if title is None:
        errors.add(ElementError.TITLE)
    if ingredients is None:
        errors.add(ElementError.INGREDIENTS)
    if steps is None:
        errors.add(ElementError.PROCEDURES)

    return ParsedOutput(
        classification=COMPLETED,
        title=title,
        ingredients=ingredients,
        steps=steps,
        element_errors=frozenset(errors),
        repetition=diagnostic,
        raw=text,
    )


def serialize_ingredients(ingredients: Iterable[IngredientEntry]) -> str:
    lines = []
    for entry in ingredients:
        if entry.quantity:
            lines.append(f"{entry.name}: {entry.quantity}")
        else:
            lines.append(entry.name)
    return "\n".join(lines)


def element_or_empty(parsed: ParsedOutput, element: ElementError) -> str:
    """Serialized element text, or "" for refusals and errored elements."""
    if parsed.classification == REFUSAL or element in parsed.element_errors:
        return ""
    if element is ElementError.TITLE:
        return parsed.title or ""
    if element is ElementError.INGREDIENTS:
        return serialize_ingredients(parsed.ingredients or ())
    if element is ElementError.PROCEDURES:
        return "\n".join(parsed.steps or ())
    raise ValueError(f"unknown element {element!r}")


# ---------------------------------------------------------------------------
# Batch serialization
# ---------------------------------------------------------------------------

def parsed_to_obj(parsed: ParsedOutput) -> dict:
    obj: dict = {
        "classification": parsed.classification,
        "element_errors": sorted(e.value for e in parsed.element_errors),
        "raw": parsed.raw,
    }
    if parsed.title is not None:
        obj["title"] = parsed.title
    if parsed.ingredients is not None:
        obj["ingredients"] = [
            {"name": e.name, "quantity": e.quantity} for e in parsed.ingredients
        ]
    if parsed.steps is not None:
        obj["steps"] = list(parsed.steps)
    if parsed.repetition is not None:
        obj["repetition"] = {
            "loop_detected": parsed.repetition.loop_detected,
            "period_tokens": parsed.repetition.period_tokens,
            "salvage_boundary": parsed.repetition.salvage_boundary,
        }
    return obj


def read_generated_batch(path: str | Path) -> dict[str, str]:
    """Read {sample_id, generated_text} JSONL into an ordered mapping."""
    texts: dict[str, str] = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            texts[str(obj["sample_id"])] = str(obj["generated_text"])
    return texts


def write_parsed_batch(parsed_by_id: dict[str, ParsedOutput], path: str | Path) -> int:
    count = 0
    with open(path, "w", encoding="utf-8") as f:
        for sample_id, parsed in parsed_by_id.items():
            obj = {"sample_id": sample_id, **parsed_to_obj(parsed)}
            f.write(json.dumps(obj, ensure_ascii=False) + "\n")
            count += 1
    return count
