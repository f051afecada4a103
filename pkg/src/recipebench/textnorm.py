"""Japanese-aware text normalization used for ingredient matching.

The normalization chain is deliberately conservative: NFKC, casefold,
whitespace removal, katakana-to-hiragana folding, and an editable synonym
table. Original strings are never mutated in place; callers keep the raw
text and use the normalized form only as a matching key.
"""

from __future__ import annotations

import unicodedata
from dataclasses import dataclass, field

_KATAKANA_START = 0x30A1  # ァ
_KATAKANA_END = 0x30F6  # ヶ
_KANA_FOLD_OFFSET = 0x60  # katakana block sits 0x60 above hiragana

# Katakana iteration marks map onto their hiragana counterparts.
_EXTRA_KANA_FOLDS = {0x30FD: "ゝ", 0x30FE: "ゞ"}


def nfkc(text: str) -> str:
    return unicodedata.normalize("NFKC", text)


def fold_katakana(text: str) -> str:
    """Map katakana codepoints onto hiragana (ゴハン -> ごはん).

    The prolonged sound mark ー has no hiragana counterpart and is kept.
    """
    out = []
    for ch in text:
        code = ord(ch)
        if _KATAKANA_START <= code <= _KATAKANA_END:
            out.append(chr(code - _KANA_FOLD_OFFSET))
        elif code in _EXTRA_KANA_FOLDS:
            out.append(_EXTRA_KANA_FOLDS[code])
        else:
            out.append(ch)
    return "".join(out)


def strip_whitespace(text: str) -> str:
    """Remove all whitespace, including internal runs."""
    return "".join(text.split())


@dataclass(frozen=True)
class NormalizerConfig:
    """Switches for each normalization step, all on by default."""

    apply_nfkc: bool = True
    apply_casefold: bool = True
    apply_whitespace_strip: bool = True
    apply_kana_fold: bool = True


@dataclass
class IngredientNormalizer:
    """Produces canonical matching keys for free-form ingredient names."""

    config: NormalizerConfig = field(default_factory=NormalizerConfig)
    synonyms: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        # Synonym keys must themselves be in pre-synonym normal form,
        # otherwise lookups silently miss.
        self.synonyms = {
            self._base_key(variant): self._base_key(canonical)
            for variant, canonical in self.synonyms.items()
        }

    def _base_key(self, text: str) -> str:
        if self.config.apply_nfkc:
            text = nfkc(text)
        if self.config.apply_casefold:
            text = text.casefold()
        if self.config.apply_whitespace_strip:
            text = strip_whitespace(text)
        else:
            text = text.strip()
        if self.config.apply_kana_fold:
            text = fold_katakana(text)
        return text

    def key(self, text: str) -> str:
        base = self._base_key(text)
        return self.synonyms.get(base, base)
