"""Tokenization and numeric metrics for generated-recipe scoring.

Everything here is pure and deterministic. Sequence metrics (corpus BLEU,
ROUGE-L) operate on pre-tokenized input and refuse to compare sequences
produced by different tokenizers. Set metrics pool integer counts over a
batch before taking ratios (micro averaging).
"""

from __future__ import annotations

import json
import math
import unicodedata
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

# Floor applied to a pooled n-gram precision whose numerator or denominator
# is zero, so the geometric mean stays finite on tiny batches.
BLEU_EPSILON = 1e-9

FALLBACK_TOKENIZER = "fallback"
MECAB_TOKENIZER = "mecab-ipadic"

Span = tuple[str, int, int]  # (token, start offset, end offset)


class UnknownTokenizerError(ValueError):
    pass


@dataclass(frozen=True)
class TokenSequence:
    tokens: tuple[str, ...]
    tokenizer_id: str

    def __len__(self) -> int:
        return len(self.tokens)


# ---------------------------------------------------------------------------
# Tokenizers
# ---------------------------------------------------------------------------

_HIRAGANA = "hiragana"
_KATAKANA = "katakana"
_KANJI = "kanji"
_ALPHA = "alpha"
_DIGIT = "digit"
_OTHER = "other"
_SPACE = "space"


def _char_class(ch: str) -> str:
    code = ord(ch)
    if ch.isspace():
        return _SPACE
    if 0x3041 <= code <= 0x309F:
        return _HIRAGANA
    if 0x30A0 <= code <= 0x30FF or 0x31F0 <= code <= 0x31FF or 0xFF66 <= code <= 0xFF9D:
        return _KATAKANA
    if 0x4E00 <= code <= 0x9FFF or 0x3400 <= code <= 0x4DBF or code == 0x3005:
        return _KANJI
    category = unicodedata.category(ch)
    if category.startswith("L"):
        return _ALPHA
    if category == "Nd":
        return _DIGIT
    return _OTHER


def fallback_segment(text: str) -> list[Span]:
    """Split on whitespace and on script-class transitions.

    Runs of the same class (hiragana, katakana, kanji, latin letters,
    digits, punctuation) form one token each, so 豚肉をフライパンで焼く
    becomes 豚肉 / を / フライパン / で / 焼 / く.
    """
    spans: list[Span] = []
    start = 0
    current: str | None = None
    for i, ch in enumerate(text):
        cls = _char_class(ch)
        if cls != current:
            if current not in (None, _SPACE):
                spans.append((text[start:i], start, i))
            start = i
            current = cls
    if current not in (None, _SPACE):
        spans.append((text[start:], start, len(text)))
    return spans


def _build_mecab_segmenter() -> Callable[[str], list[Span]]:
    try:
        import fugashi  # type: ignore
        import ipadic  # type: ignore
    except ImportError as exc:  # pragma: no cover - depends on environment
        raise UnknownTokenizerError(
            f"tokenizer '{MECAB_TOKENIZER}' needs the optional fugashi and "
            "ipadic packages"
        ) from exc

    tagger = fugashi.GenericTagger(ipadic.MECAB_ARGS)

    def segment(text: str) -> list[Span]:
        spans: list[Span] = []
        cursor = 0
        for word in tagger(text):
            surface = word.surface
            start = text.index(surface, cursor)
            end = start + len(surface)
            spans.append((surface, start, end))
            cursor = end
        return spans

    return segment


_SEGMENTERS: dict[str, Callable[[str], list[Span]]] = {
    FALLBACK_TOKENIZER: fallback_segment,
}
_LAZY_SEGMENTERS: dict[str, Callable[[], Callable[[str], list[Span]]]] = {
    MECAB_TOKENIZER: _build_mecab_segmenter,
}


def register_tokenizer(tokenizer_id: str, segmenter: Callable[[str], list[Span]]) -> None:
    _SEGMENTERS[tokenizer_id] = segmenter


def get_segmenter(tokenizer_id: str) -> Callable[[str], list[Span]]:
    if tokenizer_id in _SEGMENTERS:
        return _SEGMENTERS[tokenizer_id]
    if tokenizer_id in _LAZY_SEGMENTERS:
        segmenter = _LAZY_SEGMENTERS[tokenizer_id]()
        _SEGMENTERS[tokenizer_id] = segmenter
        return segmenter
    raise UnknownTokenizerError(f"unregistered tokenizer id: {tokenizer_id!r}")


def segment(text: str, tokenizer_id: str = FALLBACK_TOKENIZER) -> list[Span]:
    return get_segmenter(tokenizer_id)(text)


def tokenize(text: str, tokenizer_id: str = FALLBACK_TOKENIZER) -> TokenSequence:
    spans = segment(text, tokenizer_id)
    return TokenSequence(tuple(token for token, _, _ in spans), tokenizer_id)


def _check_same_tokenizer(a: TokenSequence, b: TokenSequence) -> None:
    if a.tokenizer_id != b.tokenizer_id:
        raise ValueError(
            f"tokenizer mismatch: {a.tokenizer_id!r} vs {b.tokenizer_id!r}"
        )


# ---------------------------------------------------------------------------
# Corpus BLEU
# ---------------------------------------------------------------------------

def _ngram_counts(tokens: Sequence[str], n: int) -> dict[tuple[str, ...], int]:
    counts: dict[tuple[str, ...], int] = {}
    for i in range(len(tokens) - n + 1):
        gram = tuple(tokens[i : i + n])
        counts[gram] = counts.get(gram, 0) + 1
    return counts


def corpus_bleu(
    pairs: Sequence[tuple[TokenSequence, TokenSequence]],
    max_n: int = 4,
) -> float:
    """Corpus-level BLEU in [0, 100].

    Clipped n-gram matches and candidate n-gram totals are pooled over all
    pairs, the geometric mean is taken over orders 1..max_n, and the result
    is multiplied by the brevity penalty exp(1 - r/c) when c < r. No
    smoothing is applied beyond flooring a zero pooled precision at
    BLEU_EPSILON.
    """
    if not pairs:
        raise ValueError("corpus_bleu needs at least one pair")
    for candidate, reference in pairs:
        _check_same_tokenizer(candidate, reference)

    candidate_len = sum(len(c) for c, _ in pairs)
    reference_len = sum(len(r) for _, r in pairs)
    if candidate_len == 0 and reference_len == 0:
        raise ValueError("all candidates and references are empty")
    if candidate_len == 0:
        return 0.0

    matched = [0] * max_n
    total = [0] * max_n
    for candidate, reference in pairs:
        for n in range(1, max_n + 1):
            cand_counts = _ngram_counts(candidate.tokens, n)
            if not cand_counts:
                continue
            ref_counts = _ngram_counts(reference.tokens, n)
            total[n - 1] += sum(cand_counts.values())
            matched[n - 1] += sum(
                min(count, ref_counts.get(gram, 0))
                for gram, count in cand_counts.items()
            )

    log_sum = 0.0
    for n in range(max_n):
        if total[n] > 0 and matched[n] > 0:
            precision = matched[n] / total[n]
        else:
            precision = BLEU_EPSILON
        log_sum += math.log(precision)

    brevity = 1.0
    if candidate_len < reference_len:
        brevity = math.exp(1.0 - reference_len / candidate_len)
    return 100.0 * brevity * math.exp(log_sum / max_n)


# ---------------------------------------------------------------------------
# LCS and ROUGE-L
# ---------------------------------------------------------------------------

def lcs_length(a: TokenSequence | Sequence[str], b: TokenSequence | Sequence[str]) -> int:
    """Longest common subsequence length, O(|a|*|b|) time, linear memory."""
    xs = a.tokens if isinstance(a, TokenSequence) else tuple(a)
    ys = b.tokens if isinstance(b, TokenSequence) else tuple(b)
    if not xs or not ys:
        return 0
    if len(ys) > len(xs):
        xs, ys = ys, xs
    previous = [0] * (len(ys) + 1)
    for x in xs:
        current = [0] * (len(ys) + 1)
        for j, y in enumerate(ys, start=1):
            if x == y:
                current[j] = previous[j - 1] + 1
            else:
                current[j] = max(previous[j], current[j - 1])
        previous = current
    return previous[-1]


@dataclass(frozen=True)
class RougeScore:
    precision: float
    recall: float
    f: float


def rouge_l(
    candidate: TokenSequence,
    reference: TokenSequence,
    beta: float = 1.0,
) -> RougeScore:
    """ROUGE-L precision/recall/F over token LCS; empty input scores zeros."""
    _check_same_tokenizer(candidate, reference)
    if len(candidate) == 0 or len(reference) == 0:
        return RougeScore(0.0, 0.0, 0.0)
    lcs = lcs_length(candidate, reference)
    precision = lcs / len(candidate)
    recall = lcs / len(reference)
    denominator = recall + beta * beta * precision
    f = (1 + beta * beta) * precision * recall / denominator if denominator > 0 else 0.0
    return RougeScore(precision, recall, f)


# ---------------------------------------------------------------------------
# Perplexity
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LogProbRecord:
    sample_id: str
    token_logprobs: tuple[float, ...]


def corpus_perplexity(records: Iterable[LogProbRecord]) -> float:
    """exp(-mean log-probability), token-weighted over the whole corpus."""
    total = 0
    logprobs: list[float] = []
    for record in records:
        for lp in record.token_logprobs:
            if lp > 0:
                raise ValueError(
                    f"positive log-probability {lp} in sample {record.sample_id!r}"
                )
            logprobs.append(lp)
            total += 1
    if total == 0:
        raise ValueError("no tokens to compute perplexity over")
    return math.exp(-math.fsum(logprobs) / total)


def read_logprob_records(path: str | Path) -> list[LogProbRecord]:
    records = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            records.append(
                LogProbRecord(
                    sample_id=str(obj["sample_id"]),
                    token_logprobs=tuple(float(x) for x in obj["token_logprobs"]),
                )
            )
    return records


def write_logprob_records(records: Iterable[LogProbRecord], path: str | Path) -> int:
    count = 0
    with open(path, "w", encoding="utf-8") as f:
        for record in records:
            f.write(
                json.dumps(
                    {
                        "sample_id": record.sample_id,
                        "token_logprobs": list(record.token_logprobs),
                    },
                    ensure_ascii=False,
                )
                + "\n"
            )
            count += 1
    return count


# ---------------------------------------------------------------------------
# Micro set metrics
# ---------------------------------------------------------------------------

SCOPE_ALL = "all"
SCOPE_SEASONING = "seasoning"
SCOPE_NON_SEASONING = "non_seasoning"
SCOPES = (SCOPE_ALL, SCOPE_SEASONING, SCOPE_NON_SEASONING)


@dataclass(frozen=True)
class SetCounts:
    """Per-sample intersection/difference sizes for one seasoning scope."""

    tp: int
    fp: int
    fn: int
    scope: str = SCOPE_ALL

    def __post_init__(self) -> None:
        if self.scope not in SCOPES:
            raise ValueError(f"unknown scope {self.scope!r}")
        if min(self.tp, self.fp, self.fn) < 0:
            raise ValueError(f"negative count in {self}")


@dataclass(frozen=True)
class ScopeMetrics:
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float
    iou: float
    degenerate: bool


@dataclass(frozen=True)
class SetMetricsReport:
    scopes: dict[str, ScopeMetrics]

    @property
    def overall(self) -> ScopeMetrics:
        return self.scopes[SCOPE_ALL]


def _scope_metrics(tp: int, fp: int, fn: int) -> ScopeMetrics:
    degenerate = False
    if tp + fp > 0:
        precision = tp / (tp + fp)
    else:
        precision, degenerate = 0.0, True
    if tp + fn > 0:
        recall = tp / (tp + fn)
    else:
        recall, degenerate = 0.0, True
    if precision + recall > 0:
        f1 = 2 * precision * recall / (precision + recall)
    else:
        f1, degenerate = 0.0, True
    if tp + fp + fn > 0:
        iou = tp / (tp + fp + fn)
    else:
        iou, degenerate = 0.0, True
    return ScopeMetrics(tp, fp, fn, precision, recall, f1, iou, degenerate)


def micro_set_metrics(counts: Iterable[SetCounts]) -> SetMetricsReport:
    """Pool counts per scope, then take precision/recall/F1/IoU ratios."""
    pooled = {scope: [0, 0, 0] for scope in SCOPES}
    seen = False
    for count in counts:
        seen = True
        bucket = pooled[count.scope]
        bucket[0] += count.tp
        bucket[1] += count.fp
        bucket[2] += count.fn
    if not seen:
        raise ValueError("micro_set_metrics needs at least one count")
    return SetMetricsReport(
        scopes={scope: _scope_metrics(*pooled[scope]) for scope in SCOPES}
    )
