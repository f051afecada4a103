"""Ingredient-set comparison: remote LLM judge and deterministic offline judge.

A verdict partitions the two input lists into matched pairs and one-sided
leftovers, each item flagged as seasoning or not. Partition identities
(|matched| + |generated_only| = |S1|, |matched| + |truth_only| = |S2|) are
enforced on every verdict; responses that cannot be repaired into a valid
partition are rejected, never patched with invented items.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

import requests

from .dataset import EvalSet
from .metrics import (
    SCOPE_ALL,
    SCOPE_NON_SEASONING,
    SCOPE_SEASONING,
    SetCounts,
)
from .seeding import derive_rng
from .textnorm import IngredientNormalizer, nfkc

SOURCE_REMOTE = "remote"
SOURCE_OFFLINE = "offline"
SOURCE_CACHE = "cache"


class JudgeError(Exception):
    pass


class VerdictError(JudgeError):
    def __init__(self, message: str, raw_response: str):
        super().__init__(message)
        self.raw_response = raw_response


class AuthenticationError(JudgeError):
    pass


class MissingCredentialError(JudgeError):
    pass


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class IngredientSetPair:
    """One (generated, ground-truth) ingredient list pair.

    Items are whitespace-trimmed; empty items are dropped and exact
    duplicates removed, with the removed counts recorded.
    """

    sample_id: str
    generated: tuple[str, ...]
    truth: tuple[str, ...]
    generated_duplicates: int = 0
    truth_duplicates: int = 0

    @classmethod
    def from_lists(
        cls, sample_id: str, generated: Iterable[str], truth: Iterable[str]
    ) -> IngredientSetPair:
        def clean(items: Iterable[str]) -> tuple[tuple[str, ...], int]:
            seen: list[str] = []
            removed = 0
            for item in items:
                item = item.strip()
                if not item:
                    continue
                if item in seen:
                    removed += 1
                else:
                    seen.append(item)
            return tuple(seen), removed

        gen, gen_removed = clean(generated)
        tru, tru_removed = clean(truth)
        return cls(sample_id, gen, tru, gen_removed, tru_removed)


@dataclass(frozen=True)
class MatchedPair:
    generated: str
    truth: str
    seasoning: bool


@dataclass(frozen=True)
class FlaggedItem:
    item: str
    seasoning: bool


@dataclass(frozen=True)
class JudgeVerdict:
    sample_id: str
    matched: tuple[MatchedPair, ...]
    generated_only: tuple[FlaggedItem, ...]
    truth_only: tuple[FlaggedItem, ...]
    source: str
    raw_response: str = ""
    attempts: int = 1
    repairs: tuple[str, ...] = ()


@dataclass(frozen=True)
class JudgeFailure:
    sample_id: str
    error: str
    attempts: int
    raw_response: str = ""


JudgeOutcome = JudgeVerdict | JudgeFailure


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 4
    backoff_base: float = 0.5
    backoff_factor: float = 2.0
    retry_statuses: tuple[int, ...] = (429, 500, 502, 503, 504)

    def delay(self, attempt: int) -> float:
        return self.backoff_base * self.backoff_factor ** (attempt - 1)


@dataclass
class JudgeConfig:
    endpoint: str = "https://api.openai.com/v1/chat/completions"
    model: str = "gpt-4o-2024-05-13"
    temperature: float = 0.0
    max_parallel: int = 8
    retry: RetryPolicy = field(default_factory=RetryPolicy)
    cache_dir: str | None = None
    credential_env: str = "OPENAI_API_KEY"
    timeout: float = 60.0
    requests_per_second: float | None = None


# ---------------------------------------------------------------------------
# Seasoning lexicon
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SeasoningLexicon:
    keys: frozenset[str]
    normalizer: IngredientNormalizer

    @classmethod
    def from_words(
        cls, words: Iterable[str], normalizer: IngredientNormalizer
    ) -> SeasoningLexicon:
        return cls(frozenset(normalizer.key(w) for w in words), normalizer)

    def is_seasoning(self, item: str) -> bool:
        return self.normalizer.key(item) in self.keys

    def has_key(self, key: str) -> bool:
        return key in self.keys


@lru_cache(maxsize=1)
def default_lexicon() -> SeasoningLexicon:
    from .config import load_lexicon_words, load_synonyms

    normalizer = IngredientNormalizer(synonyms=load_synonyms())
    return SeasoningLexicon.from_words(load_lexicon_words(), normalizer)


# ---------------------------------------------------------------------------
# Prompt construction
# ---------------------------------------------------------------------------

def build_judge_prompt(
    pair: IngredientSetPair,
    template: str,
    empty_list_marker: str = "(none)",
) -> str:
    """Fill the judge prompt template with both ingredient lists."""

    def block(items: Sequence[str]) -> str:
        if not items:
            return empty_list_marker
        return "\n".join(f"- {item}" for item in items)

    # Plain replacement: the template legitimately contains JSON braces.
    return template.replace("{generated_block}", block(pair.generated)).replace(
        "{truth_block}", block(pair.truth)
    )


# ---------------------------------------------------------------------------
# Verdict parsing and repair
# ---------------------------------------------------------------------------

def _strip_fences(text: str) -> str:
    stripped = text.strip()
    if not stripped.startswith("```"):
        return stripped
    lines = stripped.splitlines()
    if len(lines) >= 2 and lines[-1].strip().startswith("```"):
        return "\n".join(lines[1:-1]).strip()
    return "\n".join(lines[1:]).strip()


class _ItemPool:
    """Input items still unclaimed by response entries, keyed by NFKC trim."""

    def __init__(self, items: Sequence[str]):
        self.order = list(items)
        self.unused: dict[str, list[str]] = {}
        for item in items:
            self.unused.setdefault(nfkc(item).strip(), []).append(item)

    def claim_exact(self, response_item: str) -> str | None:
        key = nfkc(response_item).strip()
        bucket = self.unused.get(key)
        if bucket:
            return bucket.pop(0)
        return None

    def claim_fuzzy(self, response_item: str) -> str | None:
        """Unique containment match against the unclaimed items, else None."""
        key = nfkc(response_item).strip()
        candidates = []
        for bucket_key, bucket in self.unused.items():
            if bucket and (key in bucket_key or bucket_key in key):
                candidates.append(bucket_key)
        if len(candidates) != 1:
            return None
        return self.unused[candidates[0]].pop(0)

    def remaining(self) -> list[str]:
        # Input lists are deduplicated, so value membership is unambiguous.
        unclaimed = {x for bucket in self.unused.values() for x in bucket}
        return [item for item in self.order if item in unclaimed]


def parse_verdict(
    response: str,
    pair: IngredientSetPair,
    lexicon: SeasoningLexicon | None = None,
    source: str = SOURCE_REMOTE,
    attempts: int = 1,
) -> JudgeVerdict:
    """Parse a judge response into a verdict with partition identities enforced.

    Response items are mapped back onto the input lists (exact NFKC-trim
    match, then one fuzzy-containment repair pass); input items the response
    never mentioned are repaired into the one-sided buckets with a seasoning
    flag from the lexicon. Anything else raises VerdictError.
    """
    if lexicon is None:
        lexicon = default_lexicon()

    try:
        obj = json.loads(_strip_fences(response))
    except json.JSONDecodeError as exc:
        raise VerdictError(f"unparseable JSON: {exc}", response) from exc
    if not isinstance(obj, dict):
        raise VerdictError("response JSON is not an object", response)

    gen_pool = _ItemPool(pair.generated)
    truth_pool = _ItemPool(pair.truth)
    repairs: list[str] = []

    def claim(pool: _ItemPool, response_item: str, slot: str) -> str:
        item = pool.claim_exact(response_item)
        if item is not None:
            return item
        item = pool.claim_fuzzy(response_item)
        if item is not None:
            repairs.append(f"fuzzy-matched {slot} item {response_item!r} -> {item!r}")
            return item
        raise VerdictError(
            f"cannot map {slot} item {response_item!r} onto the input list",
            response,
        )

    def entries(key: str) -> list[dict]:
        value = obj.get(key, [])
        if not isinstance(value, list):
            raise VerdictError(f"field {key!r} is not a list", response)
        return value

    matched: list[MatchedPair] = []
    for entry in entries("common"):
        try:
            gen_item = claim(gen_pool, str(entry["generated"]), "generated")
            truth_item = claim(truth_pool, str(entry["truth"]), "truth")
            seasoning = bool(entry.get("seasoning", False))
        except (KeyError, TypeError) as exc:
            raise VerdictError(f"malformed common entry: {entry!r}", response) from exc
        matched.append(MatchedPair(gen_item, truth_item, seasoning))

    generated_only: list[FlaggedItem] = []
    for entry in entries("only_generated"):
        try:
            item = claim(gen_pool, str(entry["item"]), "generated")
            seasoning = bool(entry.get("seasoning", False))
        except (KeyError, TypeError) as exc:
            raise VerdictError(f"malformed only_generated entry: {entry!r}", response) from exc
        generated_only.append(FlaggedItem(item, seasoning))

    truth_only: list[FlaggedItem] = []
    for entry in entries("only_truth"):
        try:
            item = claim(truth_pool, str(entry["item"]), "truth")
            seasoning = bool(entry.get("seasoning", False))
        except (KeyError, TypeError) as exc:
            raise VerdictError(f"malformed only_truth entry: {entry!r}", response) from exc
        truth_only.append(FlaggedItem(item, seasoning))

    # Items the response never mentioned land in the one-sided buckets.
    for item in gen_pool.remaining():
        repairs.append(f"unmentioned generated item {item!r} placed in generated_only")
        generated_only.append(FlaggedItem(item, lexicon.is_seasoning(item)))
    for item in truth_pool.remaining():
        repairs.append(f"unmentioned truth item {item!r} placed in truth_only")
        truth_only.append(FlaggedItem(item, lexicon.is_seasoning(item)))

    verdict = JudgeVerdict(
        sample_id=pair.sample_id,
        matched=tuple(matched),
        generated_only=tuple(generated_only),
        truth_only=tuple(truth_only),
        source=source,
        raw_response=response,
        attempts=attempts,
        repairs=tuple(repairs),
    )
    validate_partition(verdict, pair, response)
    return verdict


def validate_partition(
    verdict: JudgeVerdict, pair: IngredientSetPair, raw_response: str = ""
) -> None:
    gen_items = sorted([m.generated for m in verdict.matched] + [i.item for i in verdict.generated_only])
    truth_items = sorted([m.truth for m in verdict.matched] + [i.item for i in verdict.truth_only])
    if gen_items != sorted(pair.generated):
        raise VerdictError(
            f"partition identity violated on the generated side for {pair.sample_id}",
            raw_response,
        )
    if truth_items != sorted(pair.truth):
        raise VerdictError(
            f"partition identity violated on the truth side for {pair.sample_id}",
            raw_response,
        )


# ---------------------------------------------------------------------------
# Offline judge
# ---------------------------------------------------------------------------

def judge_offline(
    pair: IngredientSetPair,
    normalizer: IngredientNormalizer | None = None,
    lexicon: SeasoningLexicon | None = None,
) -> JudgeVerdict:
    """Deterministic judge: exact match on normalized keys, lexicon seasoning."""
    if lexicon is None:
        lexicon = default_lexicon()
    if normalizer is None:
        normalizer = lexicon.normalizer

    truth_by_key: dict[str, list[str]] = {}
    for item in pair.truth:
        truth_by_key.setdefault(normalizer.key(item), []).append(item)

    matched: list[MatchedPair] = []
    generated_only: list[FlaggedItem] = []
    for item in pair.generated:
        key = normalizer.key(item)
        bucket = truth_by_key.get(key)
        if bucket:
            matched.append(MatchedPair(item, bucket.pop(0), lexicon.has_key(key)))
        else:
            generated_only.append(FlaggedItem(item, lexicon.is_seasoning(item)))

    matched_truth = {m.truth for m in matched}
    truth_only = [
        FlaggedItem(item, lexicon.is_seasoning(item))
        for item in pair.truth
        if item not in matched_truth
    ]

    verdict = JudgeVerdict(
        sample_id=pair.sample_id,
        matched=tuple(matched),
        generated_only=tuple(generated_only),
        truth_only=tuple(truth_only),
        source=SOURCE_OFFLINE,
    )
    validate_partition(verdict, pair)
    return verdict


def judge_offline_batch(
    pairs: Iterable[IngredientSetPair],
    normalizer: IngredientNormalizer | None = None,
    lexicon: SeasoningLexicon | None = None,
) -> list[JudgeVerdict]:
    return [judge_offline(pair, normalizer, lexicon) for pair in pairs]


# ---------------------------------------------------------------------------
# Response cache and rate limiting
# ---------------------------------------------------------------------------

class ResponseCache:
    """Content-addressed store of raw judge responses, keyed by prompt+model."""

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    @staticmethod
    def key(prompt: str, model: str) -> str:
        material = prompt + "\x00" + model
        return hashlib.sha256(material.encode("utf-8")).hexdigest()

    def _path(self, key: str) -> Path:
        return self.directory / f"{key}.json"

    def get(self, prompt: str, model: str) -> str | None:
        path = self._path(self.key(prompt, model))
        if not path.is_file():
            return None
        with open(path, encoding="utf-8") as f:
            return json.load(f)["response"]

    def put(self, prompt: str, model: str, response: str) -> None:
        key = self.key(prompt, model)
        path = self._path(key)
        payload = json.dumps(
            {"key": key, "model": model, "response": response}, ensure_ascii=False
        )
        with self._lock:
            tmp = path.with_suffix(".tmp")
            tmp.write_text(payload, encoding="utf-8")
            os.replace(tmp, path)


class _RateLimiter:
    def __init__(self, requests_per_second: float | None):
        self.interval = 1.0 / requests_per_second if requests_per_second else 0.0
        self._lock = threading.Lock()
        self._next_allowed = 0.0

    def acquire(self) -> None:
        if self.interval <= 0:
            return
        with self._lock:
            now = time.monotonic()
            wait = self._next_allowed - now
            self._next_allowed = max(now, self._next_allowed) + self.interval
        if wait > 0:
            time.sleep(wait)


# ---------------------------------------------------------------------------
# Remote judge
# ---------------------------------------------------------------------------

_thread_local = threading.local()


def _session() -> requests.Session:
    if not hasattr(_thread_local, "session"):
        _thread_local.session = requests.Session()
    return _thread_local.session


def _post_chat(
    prompt: str, config: JudgeConfig, api_key: str, limiter: _RateLimiter
) -> str:
    """Single chat-completions request; raises on transport or HTTP trouble."""
    limiter.acquire()
    response = _session().post(
        config.endpoint,
        json={
            "model": config.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": config.temperature,
        },
        headers={"Authorization": f"Bearer {api_key}"},
        timeout=config.timeout,
    )
    if response.status_code in (401, 403):
        raise AuthenticationError(f"judge endpoint rejected credentials ({response.status_code})")
    if response.status_code != 200:
        raise _TransientHTTPError(response.status_code)
    body = response.json()
    try:
        content = body["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError) as exc:
        raise _TransientHTTPError(200, f"malformed completion body: {body!r}") from exc
    if not isinstance(content, str):
        raise _TransientHTTPError(200, "completion content is not a string")
    return content


class _TransientHTTPError(Exception):
    def __init__(self, status: int, message: str = ""):
        super().__init__(message or f"HTTP {status}")
        self.status = status


def _judge_one_remote(
    pair: IngredientSetPair,
    config: JudgeConfig,
    template: str,
    empty_list_marker: str,
    lexicon: SeasoningLexicon,
    api_key: str,
    cache: ResponseCache | None,
    limiter: _RateLimiter,
) -> JudgeOutcome:
    prompt = build_judge_prompt(pair, template, empty_list_marker)

    if cache is not None:
        cached = cache.get(prompt, config.model)
        if cached is not None:
            try:
                return parse_verdict(cached, pair, lexicon, source=SOURCE_CACHE, attempts=0)
            except VerdictError:
                pass  # stale or corrupt cache entry, fall through to the network

    last_error = "no attempt made"
    last_response = ""
    attempt = 0
    for attempt in range(1, config.retry.max_attempts + 1):
        try:
            content = _post_chat(prompt, config, api_key, limiter)
        except _TransientHTTPError as exc:
            last_error = str(exc)
            retryable = exc.status in config.retry.retry_statuses or exc.status == 200
            if not retryable:
                return JudgeFailure(pair.sample_id, last_error, attempt)
        except (requests.ConnectionError, requests.Timeout) as exc:
            last_error = f"transport error: {exc}"
        else:
            last_response = content
            try:
                verdict = parse_verdict(
                    content, pair, lexicon, source=SOURCE_REMOTE, attempts=attempt
                )
            except VerdictError as exc:
                last_error = f"verdict rejected: {exc}"
            else:
                if cache is not None:
                    cache.put(prompt, config.model, content)
                return verdict
        if attempt < config.retry.max_attempts:
            time.sleep(config.retry.delay(attempt))
    return JudgeFailure(pair.sample_id, last_error, attempt, last_response)


def judge_remote(
    pairs: Sequence[IngredientSetPair],
    config: JudgeConfig,
    template: str,
    empty_list_marker: str = "(none)",
    lexicon: SeasoningLexicon | None = None,
) -> list[JudgeOutcome]:
    """Judge all pairs against the remote endpoint.

    Bounded parallelism, shared rate limiter, per-pair retries with
    exponential backoff, and a warm-start response cache. Every input pair
    yields exactly one outcome, in input order; pairs that exhaust their
    retries come back as JudgeFailure, never as a fabricated verdict.
    """
    if lexicon is None:
        lexicon = default_lexicon()
    api_key = os.environ.get(config.credential_env)
    if not api_key:
        raise MissingCredentialError(
            f"environment variable {config.credential_env} is not set"
        )
    cache = ResponseCache(config.cache_dir) if config.cache_dir else None
    limiter = _RateLimiter(config.requests_per_second)

    outcomes: list[JudgeOutcome | None] = [None] * len(pairs)
    with ThreadPoolExecutor(max_workers=config.max_parallel) as executor:
        futures = {
            executor.submit(
                _judge_one_remote,
                pair,
                config,
                template,
                empty_list_marker,
                lexicon,
                api_key,
                cache,
                limiter,
            ): index
            for index, pair in enumerate(pairs)
        }
        for future, index in futures.items():
            outcomes[index] = future.result()
    return [outcome for outcome in outcomes if outcome is not None]


# ---------------------------------------------------------------------------
# Metrics bridge
# ---------------------------------------------------------------------------

def counts_from_verdict(verdict: JudgeVerdict) -> tuple[SetCounts, SetCounts, SetCounts]:
    tp_s = sum(1 for m in verdict.matched if m.seasoning)
    fp_s = sum(1 for i in verdict.generated_only if i.seasoning)
    fn_s = sum(1 for i in verdict.truth_only if i.seasoning)
    tp = len(verdict.matched)
    fp = len(verdict.generated_only)
    fn = len(verdict.truth_only)
    return (
        SetCounts(tp, fp, fn, SCOPE_ALL),
        SetCounts(tp_s, fp_s, fn_s, SCOPE_SEASONING),
        SetCounts(tp - tp_s, fp - fp_s, fn - fn_s, SCOPE_NON_SEASONING),
    )


# ---------------------------------------------------------------------------
# Audit sampling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AuditEntry:
    sample_id: str
    category: str
    verdict: JudgeVerdict


@dataclass(frozen=True)
class AuditSheet:
    entries: tuple[AuditEntry, ...]
    per_category: int
    seed: int

    def __len__(self) -> int:
        return len(self.entries)

    def to_markdown(self) -> str:
        lines = [
            "# Judge audit sheet",
            "",
            f"{len(self.entries)} samples, up to {self.per_category} per category "
            f"(seed {self.seed}). Mark each judged item correct or incorrect.",
            "",
        ]
        for entry in self.entries:
            lines.append(f"## {entry.category} — sample {entry.sample_id}")
            lines.append("")
            lines.append("| kind | generated | truth | seasoning | correct? |")
            lines.append("|------|-----------|-------|-----------|----------|")
            v = entry.verdict
            for m in v.matched:
                lines.append(f"| matched | {m.generated} | {m.truth} | {m.seasoning} | |")
            for i in v.generated_only:
                lines.append(f"| generated-only | {i.item} | | {i.seasoning} | |")
            for i in v.truth_only:
                lines.append(f"| truth-only | | {i.item} | {i.seasoning} | |")
            lines.append("")
        return "\n".join(lines)


def sample_audit(
    verdicts: Sequence[JudgeVerdict],
    evalset: EvalSet,
    per_category: int = 2,
    seed: int = 0,
) -> AuditSheet:
    """Seeded, category-balanced subset of verdicts for manual checking."""
    category_by_id = {
        r.id: r.eval_category for r in evalset.samples if r.eval_category
    }
    by_category: dict[str, list[JudgeVerdict]] = {}
    for verdict in verdicts:
        category = category_by_id.get(verdict.sample_id)
        if category is not None:
            by_category.setdefault(category, []).append(verdict)

    entries: list[AuditEntry] = []
    for category in sorted(by_category):
        members = sorted(by_category[category], key=lambda v: v.sample_id)
        order = list(range(len(members)))
        derive_rng(seed, "audit", category).shuffle(order)
        take = min(per_category, len(members))
        for i in sorted(order[:take]):
            entries.append(AuditEntry(members[i].sample_id, category, members[i]))
    return AuditSheet(tuple(entries), per_category, seed)


# ---------------------------------------------------------------------------
# Verdict serialization
# ---------------------------------------------------------------------------

def outcome_to_obj(outcome: JudgeOutcome) -> dict:
    if isinstance(outcome, JudgeFailure):
        return {
            "sample_id": outcome.sample_id,
            "error": outcome.error,
            "attempts": outcome.attempts,
            "raw_response": outcome.raw_response,
        }
    return {
        "sample_id": outcome.sample_id,
        "matched": [
            {"generated": m.generated, "truth": m.truth, "seasoning": m.seasoning}
            for m in outcome.matched
        ],
        "generated_only": [
            {"item": i.item, "seasoning": i.seasoning} for i in outcome.generated_only
        ],
        "truth_only": [
            {"item": i.item, "seasoning": i.seasoning} for i in outcome.truth_only
        ],
        "source": outcome.source,
        "attempts": outcome.attempts,
        "repairs": list(outcome.repairs),
        "raw_response": outcome.raw_response,
    }


def outcome_from_obj(obj: dict) -> JudgeOutcome:
    if "error" in obj:
        return JudgeFailure(
            sample_id=str(obj["sample_id"]),
            error=str(obj["error"]),
            attempts=int(obj.get("attempts", 0)),
            raw_response=str(obj.get("raw_response", "")),
        )
    return JudgeVerdict(
        sample_id=str(obj["sample_id"]),
        matched=tuple(
            MatchedPair(str(m["generated"]), str(m["truth"]), bool(m["seasoning"]))
            for m in obj["matched"]
        ),
        generated_only=tuple(
            FlaggedItem(str(i["item"]), bool(i["seasoning"]))
            for i in obj["generated_only"]
        ),
        truth_only=tuple(
            FlaggedItem(str(i["item"]), bool(i["seasoning"]))
            for i in obj["truth_only"]
        ),
        source=str(obj.get("source", SOURCE_REMOTE)),
        attempts=int(obj.get("attempts", 1)),
        repairs=tuple(str(r) for r in obj.get("repairs", [])),
        raw_response=str(obj.get("raw_response", "")),
    )


def write_outcomes(outcomes: Iterable[JudgeOutcome], path: str | Path) -> int:
    count = 0
    with open(path, "w", encoding="utf-8") as f:
        for outcome in outcomes:
            f.write(json.dumps(outcome_to_obj(outcome), ensure_ascii=False) + "\n")
            count += 1
    return count


def read_outcomes(path: str | Path) -> list[JudgeOutcome]:
    outcomes = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                outcomes.append(outcome_from_obj(json.loads(line)))
    return outcomes
