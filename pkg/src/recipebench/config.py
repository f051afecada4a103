"""Run configuration, canonical templates, and bundled data files.

Templates, the 50-category taxonomy, the seasoning lexicon, and the
synonym table are all data, not code: the bundled copies are defaults
that any run configuration can replace with edited files.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import yaml

from .judge import JudgeConfig, RetryPolicy


class ConfigError(ValueError):
    pass


def _data_text(name: str) -> str:
    return (resources.files("recipebench") / "data" / name).read_text(encoding="utf-8")


# ---------------------------------------------------------------------------
# Templates
# ---------------------------------------------------------------------------

QUERY_PATTERN_IDS = (
    "EMPTY_FULL",
    "ASK_FULL",
    "ASK_TITLE",
    "ASK_INGREDIENTS",
    "ASK_PROCEDURES",
    "TITLE_GIVEN_FULL",
)


@dataclass(frozen=True)
class TemplateConfig:
    """Strings that define the canonical recipe/refusal serialization."""

    image_token: str
    title_header: str
    ingredients_header: str
    procedures_header: str
    ingredient_bullet: str
    refusal_apology: str
    refusal_prefixes: tuple[str, ...]
    caption_intro: str
    caption_bullet: str
    empty_list_marker: str
    queries: dict[str, str]
    judge_prompt: str

    def __post_init__(self) -> None:
        missing = [p for p in QUERY_PATTERN_IDS if p not in self.queries]
        if missing:
            raise ConfigError(f"query templates missing patterns: {missing}")
        if self.queries["EMPTY_FULL"] != "":
            raise ConfigError("the EMPTY_FULL query template must be empty")
        if "{title}" not in self.queries["TITLE_GIVEN_FULL"]:
            raise ConfigError("TITLE_GIVEN_FULL query must interpolate {title}")
        if not self.refusal_prefixes:
            raise ConfigError("at least one refusal prefix is required")


def _templates_from_dict(obj: dict[str, Any]) -> TemplateConfig:
    try:
        return TemplateConfig(
            image_token=obj["image_token"],
            title_header=obj["title_header"],
            ingredients_header=obj["ingredients_header"],
            procedures_header=obj["procedures_header"],
            ingredient_bullet=obj["ingredient_bullet"],
            refusal_apology=obj["refusal_apology"],
            refusal_prefixes=tuple(obj["refusal_prefixes"]),
            caption_intro=obj["caption_intro"],
            caption_bullet=obj["caption_bullet"],
            empty_list_marker=obj["empty_list_marker"],
            queries=dict(obj["queries"]),
            judge_prompt=obj["judge_prompt"],
        )
    except KeyError as exc:
        raise ConfigError(f"template config missing key: {exc}") from exc


def load_templates(path: str | Path | None = None) -> TemplateConfig:
    if path is None:
        text = _data_text("templates.json")
    else:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"template file not readable: {path}")
        text = path.read_text(encoding="utf-8")
    return _templates_from_dict(json.loads(text))


# ---------------------------------------------------------------------------
# Lexicon and synonyms
# ---------------------------------------------------------------------------

def load_lexicon_words(path: str | Path | None = None) -> list[str]:
    if path is None:
        text = _data_text("seasoning_lexicon.txt")
    else:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"lexicon file not readable: {path}")
        text = path.read_text(encoding="utf-8")
    words = []
    for line in text.splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            words.append(line)
    return words


def load_synonyms(path: str | Path | None = None) -> dict[str, str]:
    if path is None:
        text = _data_text("synonyms.json")
    else:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"synonym file not readable: {path}")
        text = path.read_text(encoding="utf-8")
    obj = json.loads(text)
    return {str(k): str(v) for k, v in obj.items()}


def default_taxonomy_path() -> Path:
    return Path(str(resources.files("recipebench") / "data" / "taxonomy.json"))


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------

def _judge_to_dict(judge: JudgeConfig) -> dict[str, Any]:
    return {
        "endpoint": judge.endpoint,
        "model": judge.model,
        "temperature": judge.temperature,
        "max_parallel": judge.max_parallel,
        "max_attempts": judge.retry.max_attempts,
        "backoff_base": judge.retry.backoff_base,
        "backoff_factor": judge.retry.backoff_factor,
        "timeout": judge.timeout,
        "credential_env": judge.credential_env,
        "cache_dir": judge.cache_dir,
        "requests_per_second": judge.requests_per_second,
    }


_JUDGE_KEYS = {
    "endpoint",
    "model",
    "temperature",
    "max_parallel",
    "max_attempts",
    "backoff_base",
    "backoff_factor",
    "timeout",
    "credential_env",
    "cache_dir",
    "requests_per_second",
}


def _judge_from_dict(obj: dict[str, Any]) -> JudgeConfig:
    unknown = sorted(set(obj) - _JUDGE_KEYS)
    if unknown:
        raise ConfigError(f"unknown judge config keys: {unknown}")
    retry_kwargs = {
        key: obj.pop(key)
        for key in ("max_attempts", "backoff_base", "backoff_factor")
        if key in obj
    }
    return JudgeConfig(retry=RetryPolicy(**retry_kwargs), **obj)


_SEED_PURPOSES = ("split", "sample", "pattern", "audit")


@dataclass
class RunConfig:
    out_dir: str = "out"
    recipes_path: str | None = None
    recipes_format: str = "jsonl"
    captions_path: str | None = None
    taxonomy_path: str | None = None
    templates_path: str | None = None
    lexicon_path: str | None = None
    synonyms_path: str | None = None
    evalset_path: str | None = None
    image_root: str | None = None
    cache_dir: str | None = None
    seed: int = 0
    seeds: dict[str, int] = field(default_factory=dict)
    test_fraction: float = 0.2
    per_category: int = 100
    audit_per_category: int = 2
    excluded_supercategories: list[str] = field(default_factory=lambda: ["kitchen", "food"])
    regimes: list[str] = field(default_factory=lambda: ["R", "R_NF", "R_MQ"])
    tokenizer_id: str = "fallback"
    bleu_max_n: int = 4
    repetition_window_tokens: int = 64
    repetition_min_repeats: int = 3
    judge: JudgeConfig = field(default_factory=JudgeConfig)
    run_metadata: dict[str, Any] = field(default_factory=dict)

    def seed_for(self, purpose: str) -> int:
        if purpose not in _SEED_PURPOSES:
            raise ConfigError(f"unknown seed purpose: {purpose!r}")
        return self.seeds.get(purpose, self.seed)

    def to_dict(self) -> dict[str, Any]:
        return {
            "out_dir": self.out_dir,
            "recipes_path": self.recipes_path,
            "recipes_format": self.recipes_format,
            "captions_path": self.captions_path,
            "taxonomy_path": self.taxonomy_path,
            "templates_path": self.templates_path,
            "lexicon_path": self.lexicon_path,
            "synonyms_path": self.synonyms_path,
            "evalset_path": self.evalset_path,
            "image_root": self.image_root,
            "cache_dir": self.cache_dir,
            "seed": self.seed,
            "seeds": dict(sorted(self.seeds.items())),
            "test_fraction": self.test_fraction,
            "per_category": self.per_category,
            "audit_per_category": self.audit_per_category,
            "excluded_supercategories": list(self.excluded_supercategories),
            "regimes": list(self.regimes),
            "tokenizer_id": self.tokenizer_id,
            "bleu_max_n": self.bleu_max_n,
            "repetition_window_tokens": self.repetition_window_tokens,
            "repetition_min_repeats": self.repetition_min_repeats,
            "judge": _judge_to_dict(self.judge),
            "run_metadata": self.run_metadata,
        }

    def config_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), ensure_ascii=False, sort_keys=True)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    @classmethod
    def from_dict(cls, obj: dict[str, Any]) -> RunConfig:
        known = {f for f in cls.__dataclass_fields__}
        unknown = sorted(set(obj) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        obj = dict(obj)
        judge_obj = obj.pop("judge", None)
        config = cls(**obj)
        if judge_obj is not None:
            config.judge = _judge_from_dict(dict(judge_obj))
        bad_seed_keys = sorted(set(config.seeds) - set(_SEED_PURPOSES))
        if bad_seed_keys:
            raise ConfigError(f"unknown seed purposes: {bad_seed_keys}")
        return config

    @classmethod
    def from_file(cls, path: str | Path) -> RunConfig:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not readable: {path}")
        text = path.read_text(encoding="utf-8")
        if path.suffix in (".yaml", ".yml"):
            obj = yaml.safe_load(text)
        else:
            obj = json.loads(text)
        if not isinstance(obj, dict):
            raise ConfigError(f"config root must be a mapping: {path}")
        return cls.from_dict(obj)
