"""Normalization and mixed Han/Latin tokenization for error-rate scoring.

Han characters are scored one per token (CER units) and everything else is
scored per whitespace/script-delimited word (WER units), which together give
the mixed units that MER is computed over.
"""

from __future__ import annotations

import re
import unicodedata
from dataclasses import dataclass
from enum import Enum

PUNCTUATION = frozenset(".,?!;:\"'()[]<>#。，？！、；：")

# CJK Unified Ideographs + Extension A
_HAN_RANGES = "\u3400-\u4dbf\u4e00-\u9fff"
_TOKEN_RE = re.compile(f"([{_HAN_RANGES}])|([^\\s{_HAN_RANGES}]+)")
_UNIT_RE = re.compile(f"[{_HAN_RANGES}]|[^\\s{_HAN_RANGES}]+")
_PUNCT_TABLE = str.maketrans({ch: " " for ch in PUNCTUATION})


class Script(str, Enum):
    HAN = "Han"
    LATIN = "Latin"


@dataclass(frozen=True)
class Token:
    surface: str
    script: Script


def is_han(ch: str) -> bool:
    return len(ch) == 1 and (0x4E00 <= ord(ch) <= 0x9FFF or 0x3400 <= ord(ch) <= 0x4DBF)


def _fold(text: str) -> str:
    # lower() can un-normalize a few characters, so repeat until stable
    for _ in range(4):
        folded = unicodedata.normalize("NFKC", unicodedata.normalize("NFKC", text).lower())
        if folded == text:
            break
        text = folded
    return text


def normalize(text: str) -> str:
    """NFKC, lower-case, blank out punctuation and collapse whitespace.

    >>> normalize("hello,  WORLD!")
    'hello world'
    """
    text = _fold(text)
    text = text.translate(_PUNCT_TABLE)
    return " ".join(text.split())


def tokenize_mixed(text: str) -> list[Token]:
    """Split into Han characters and maximal non-Han, non-space runs.

    >>> [t.surface for t in tokenize_mixed("去google一下")]
    ['去', 'google', '一', '下']
    """
    text = normalize(text)
    return [
        Token(m.group(), Script.HAN if m.lastindex == 1 else Script.LATIN)
        for m in _TOKEN_RE.finditer(text)
    ]


def detokenize(tokens: list[Token] | list[str]) -> str:
    """Join tokens: a single space between consecutive Latin tokens, nothing around Han."""
    out: list[str] = []
    prev_latin = False
    for tok in tokens:
        surface = tok.surface if isinstance(tok, Token) else tok
        latin = not is_han(surface)
        if out and latin and prev_latin:
            out.append(" ")
        out.append(surface)
        prev_latin = latin
    return "".join(out)


def char_units(text: str) -> list[str]:
    """CER units: every non-space character of the normalized text."""
    return [ch for ch in normalize(text) if not ch.isspace()]


def word_units(text: str) -> list[str]:
    """WER units: whitespace-delimited words of the normalized text."""
    return normalize(text).split()


def mixed_units(text: str) -> list[str]:
    """MER units: the token surfaces of :func:`tokenize_mixed`."""
    return _UNIT_RE.findall(normalize(text))
