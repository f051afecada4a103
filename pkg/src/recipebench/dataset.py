"""Recipe and caption corpus ingestion, splitting, and sampling.

All operations are pure functions of (input, seed): category splits and
balanced sampling derive their shuffle order from (seed, category), so
adding one category never reorders another, and reruns are byte-identical.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Callable, Iterable, Sequence

from .seeding import derive_rng

JSONL_FORMAT = "jsonl"
CSV_FORMAT = "csv"

# Header probes for the broken-image check; a full decode is never attempted.
_IMAGE_MAGICS = (
    b"\xff\xd8\xff",       # JPEG
    b"\x89PNG\r\n\x1a\n",  # PNG
    b"GIF87a",
    b"GIF89a",
    b"BM",                 # BMP
)


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class IngredientEntry:
    name: str
    quantity: str = ""

    def __post_init__(self) -> None:
        if not self.name.strip():
            raise CorpusError("ingredient name is empty")


@dataclass(frozen=True)
class Recipe:
    id: str
    title: str
    ingredients: tuple[IngredientEntry, ...]
    steps: tuple[str, ...]
    image_ref: str
    category_path: tuple[str, ...]
    eval_category: str | None = None

    @property
    def top_category(self) -> str:
        return self.category_path[0] if self.category_path else ""

    @property
    def source_category(self) -> str:
        """Top-two-level category key used for taxonomy lookups."""
        return "/".join(self.category_path[:2])


@dataclass(frozen=True)
class RejectedRecord:
    line_no: int
    reason: str
    raw: str


@dataclass(frozen=True)
class RecipeCorpus:
    recipes: tuple[Recipe, ...]
    rejects: tuple[RejectedRecord, ...] = ()

    def __len__(self) -> int:
        return len(self.recipes)

    def ids(self) -> set[str]:
        return {r.id for r in self.recipes}


@dataclass(frozen=True)
class CaptionRecord:
    image_id: str
    captions: tuple[str, ...]
    supercategories: frozenset[str]

    def __post_init__(self) -> None:
        if len(self.captions) != 5:
            raise CorpusError(
                f"caption record {self.image_id!r} has {len(self.captions)} "
                "captions, expected exactly 5"
            )


@dataclass(frozen=True)
class CategoryTaxonomy:
    """Mapping from source top-two-level categories onto 50 eval categories."""

    category_names: tuple[str, ...]
    mapping: dict[str, str]

    def __post_init__(self) -> None:
        if len(self.category_names) != 50 or len(set(self.category_names)) != 50:
            raise CorpusError(
                f"taxonomy must list exactly 50 distinct category names, "
                f"got {len(self.category_names)}"
            )
        unknown = sorted(set(self.mapping.values()) - set(self.category_names))
        if unknown:
            raise CorpusError(f"mapping targets outside the category list: {unknown}")


@dataclass(frozen=True)
class EvalSet:
    samples: tuple[Recipe, ...]
    shortfalls: dict[str, int]
    per_category: int
    seed: int

    def __len__(self) -> int:
        return len(self.samples)

    def categories(self) -> list[str]:
        return sorted({r.eval_category for r in self.samples if r.eval_category})


# ---------------------------------------------------------------------------
# Corpus readers
# ---------------------------------------------------------------------------

def _recipe_from_obj(obj: dict) -> Recipe:
    for key in ("id", "title", "ingredients", "steps", "image", "category"):
        if key not in obj:
            raise CorpusError(f"missing {key}")
    title = str(obj["title"]).strip()
    if not title:
        raise CorpusError("missing title")
    steps = tuple(str(s) for s in obj["steps"])
    if not steps:
        raise CorpusError("empty steps")
    ingredients = tuple(
        IngredientEntry(name=str(i["name"]), quantity=str(i.get("quantity", "")))
        for i in obj["ingredients"]
    )
    return Recipe(
        id=str(obj["id"]),
        title=title,
        ingredients=ingredients,
        steps=steps,
        image_ref=str(obj["image"]),
        category_path=tuple(str(c) for c in obj["category"]),
    )


def _read_jsonl(path: Path) -> tuple[list[Recipe], list[RejectedRecord]]:
    recipes: list[Recipe] = []
    rejects: list[RejectedRecord] = []
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                recipes.append(_recipe_from_obj(json.loads(line)))
            except (json.JSONDecodeError, CorpusError, KeyError, TypeError) as exc:
                rejects.append(RejectedRecord(line_no, str(exc), line))
    return recipes, rejects


def _read_csv(path: Path) -> tuple[list[Recipe], list[RejectedRecord]]:
    """CSV layout: id,title,ingredients,steps,image,category with the
    ingredients/steps/category cells holding embedded JSON."""
    recipes: list[Recipe] = []
    rejects: list[RejectedRecord] = []
    with open(path, encoding="utf-8", newline="") as f:
        for line_no, row in enumerate(csv.DictReader(f), start=2):
            try:
                obj = {
                    "id": row["id"],
                    "title": row["title"],
                    "ingredients": json.loads(row["ingredients"]),
                    "steps": json.loads(row["steps"]),
                    "image": row["image"],
                    "category": json.loads(row["category"]),
                }
                recipes.append(_recipe_from_obj(obj))
            except (json.JSONDecodeError, CorpusError, KeyError, TypeError) as exc:
                rejects.append(RejectedRecord(line_no, str(exc), json.dumps(row)))
    return recipes, rejects


_READERS: dict[str, Callable[[Path], tuple[list[Recipe], list[RejectedRecord]]]] = {
    JSONL_FORMAT: _read_jsonl,
    CSV_FORMAT: _read_csv,
}


def register_reader(
    format_id: str,
    reader: Callable[[Path], tuple[list[Recipe], list[RejectedRecord]]],
) -> None:
    _READERS[format_id] = reader


def load_recipes(path: str | Path, format: str = JSONL_FORMAT) -> RecipeCorpus:
    if format not in _READERS:
        raise CorpusError(f"unknown corpus format: {format!r}")
    path = Path(path)
    if not path.is_file():
        raise CorpusError(f"corpus file not readable: {path}")
    recipes, rejects = _READERS[format](path)
    if not recipes:
        raise CorpusError(f"no valid records in {path}")
    return RecipeCorpus(tuple(recipes), tuple(rejects))


def write_recipes(corpus: RecipeCorpus, path: str | Path) -> int:
    with open(path, "w", encoding="utf-8") as f:
        for r in corpus.recipes:
            f.write(json.dumps(recipe_to_obj(r), ensure_ascii=False, sort_keys=True) + "\n")
    return len(corpus.recipes)


def recipe_to_obj(recipe: Recipe) -> dict:
    obj = {
        "id": recipe.id,
        "title": recipe.title,
        "ingredients": [
            {"name": i.name, "quantity": i.quantity} for i in recipe.ingredients
        ],
        "steps": list(recipe.steps),
        "image": recipe.image_ref,
        "category": list(recipe.category_path),
    }
    if recipe.eval_category is not None:
        obj["eval_category"] = recipe.eval_category
    return obj


def recipe_from_obj(obj: dict) -> Recipe:
    recipe = _recipe_from_obj(obj)
    if "eval_category" in obj:
        recipe = replace(recipe, eval_category=str(obj["eval_category"]))
    return recipe


def load_captions(path: str | Path) -> list[CaptionRecord]:
    records = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            records.append(
                CaptionRecord(
                    image_id=str(obj["image_id"]),
                    captions=tuple(str(c) for c in obj["captions"]),
                    supercategories=frozenset(
                        str(s) for s in obj.get("supercategories", [])
                    ),
                )
            )
    return records


def load_taxonomy(path: str | Path) -> CategoryTaxonomy:
    path = Path(path)
    if not path.is_file():
        raise CorpusError(f"taxonomy file not readable: {path}")
    with open(path, encoding="utf-8") as f:
        obj = json.load(f)
    return CategoryTaxonomy(
        category_names=tuple(obj["category_names"]),
        mapping={str(k): str(v) for k, v in obj.get("mapping", {}).items()},
    )


# ---------------------------------------------------------------------------
# Splitting, exclusion, assignment, sampling
# ---------------------------------------------------------------------------

def round_half_up(value: Fraction) -> int:
    return int(value + Fraction(1, 2))


def split_by_category(
    corpus: RecipeCorpus,
    test_fraction: float = 0.2,
    seed: int = 0,
) -> tuple[RecipeCorpus, RecipeCorpus]:
    """Stratified train/test split by top-level category.

    Per category the test size is round-half-up(n * test_fraction); shuffle
    order derives from (seed, category) so categories are independent.
    """
    if not corpus.recipes:
        raise CorpusError("cannot split an empty corpus")
    if not 0 < test_fraction < 1:
        raise CorpusError(f"test_fraction must be in (0, 1), got {test_fraction}")
    fraction = Fraction(test_fraction)

    by_category: dict[str, list[Recipe]] = {}
    for recipe in corpus.recipes:
        by_category.setdefault(recipe.top_category, []).append(recipe)

    test_ids: set[str] = set()
    for category in sorted(by_category):
        members = by_category[category]
        k = round_half_up(len(members) * fraction)
        k = max(0, min(k, len(members)))
        order = list(range(len(members)))
        derive_rng(seed, "split", category).shuffle(order)
        test_ids.update(members[i].id for i in order[:k])

    train = tuple(r for r in corpus.recipes if r.id not in test_ids)
    test = tuple(r for r in corpus.recipes if r.id in test_ids)
    return RecipeCorpus(train), RecipeCorpus(test)


def probe_image(path: Path) -> str | None:
    """Return an exclusion reason, or None when the file looks like an image."""
    if not path.is_file():
        return "missing file"
    if path.stat().st_size == 0:
        return "empty file"
    with open(path, "rb") as f:
        head = f.read(16)
    if head.startswith(b"RIFF") and head[8:12] == b"WEBP":
        return None
    if any(head.startswith(magic) for magic in _IMAGE_MAGICS):
        return None
    return "unrecognized image header"


def exclude_broken_images(
    corpus: RecipeCorpus,
    image_root: str | Path,
) -> tuple[RecipeCorpus, list[tuple[str, str]]]:
    image_root = Path(image_root)
    if not image_root.is_dir():
        raise CorpusError(f"image root not readable: {image_root}")
    kept: list[Recipe] = []
    excluded: list[tuple[str, str]] = []
    for recipe in corpus.recipes:
        reason = probe_image(image_root / recipe.image_ref)
        if reason is None:
            kept.append(recipe)
        else:
            excluded.append((recipe.id, reason))
    return RecipeCorpus(tuple(kept), corpus.rejects), excluded


def assign_eval_categories(
    corpus: RecipeCorpus,
    taxonomy: CategoryTaxonomy,
) -> tuple[RecipeCorpus, list[str]]:
    assigned: list[Recipe] = []
    unmapped: set[str] = set()
    for recipe in corpus.recipes:
        name = taxonomy.mapping.get(recipe.source_category)
        if name is None:
            unmapped.add(recipe.source_category)
            assigned.append(recipe)
        else:
            assigned.append(replace(recipe, eval_category=name))
    return RecipeCorpus(tuple(assigned), corpus.rejects), sorted(unmapped)


def sample_balanced(
    test_corpus: RecipeCorpus,
    per_category: int = 100,
    seed: int = 0,
) -> EvalSet:
    """Sample min(per_category, available) recipes per eval category."""
    by_category: dict[str, list[Recipe]] = {}
    for recipe in test_corpus.recipes:
        if recipe.eval_category is not None:
            by_category.setdefault(recipe.eval_category, []).append(recipe)
    if not by_category:
        raise CorpusError("no recipe carries an eval_category")

    samples: list[Recipe] = []
    shortfalls: dict[str, int] = {}
    for category in sorted(by_category):
        members = by_category[category]
        k = min(per_category, len(members))
        if k < per_category:
            shortfalls[category] = per_category - k
        order = list(range(len(members)))
        derive_rng(seed, "sample", category).shuffle(order)
        chosen = sorted(order[:k])
        samples.extend(members[i] for i in chosen)
    return EvalSet(tuple(samples), shortfalls, per_category, seed)


def filter_nonfood_captions(
    captions: Iterable[CaptionRecord],
    excluded_supercategories: frozenset[str] | set[str] = frozenset({"kitchen", "food"}),
) -> list[CaptionRecord]:
    excluded = frozenset(excluded_supercategories)
    return [c for c in captions if c.supercategories.isdisjoint(excluded)]


# ---------------------------------------------------------------------------
# EvalSet manifest
# ---------------------------------------------------------------------------

def write_evalset(evalset: EvalSet, path: str | Path) -> None:
    obj = {
        "per_category": evalset.per_category,
        "seed": evalset.seed,
        "shortfalls": dict(sorted(evalset.shortfalls.items())),
        "samples": [recipe_to_obj(r) for r in evalset.samples],
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, ensure_ascii=False, sort_keys=True, indent=2)
        f.write("\n")


def load_evalset(path: str | Path) -> EvalSet:
    with open(path, encoding="utf-8") as f:
        obj = json.load(f)
    return EvalSet(
        samples=tuple(recipe_from_obj(o) for o in obj["samples"]),
        shortfalls={str(k): int(v) for k, v in obj.get("shortfalls", {}).items()},
        per_category=int(obj["per_category"]),
        seed=int(obj["seed"]),
    )
