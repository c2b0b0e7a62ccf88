"""Levenshtein alignment and CER / WER / MER scoring."""

from __future__ import annotations

from collections.abc import Iterable, Sequence
from dataclasses import asdict, dataclass
from enum import Enum
from typing import Any

from .textnorm import Token, char_units, mixed_units, word_units


class Mode(str, Enum):
    CER = "CER"
    WER = "WER"
    MER = "MER"

    def __str__(self) -> str:
        return self.value


class Op(str, Enum):
    HIT = "hit"
    SUB = "sub"
    DEL = "del"
    INS = "ins"


@dataclass(frozen=True)
class Alignment:
    hits: int = 0
    subs: int = 0
    dels: int = 0
    ins: int = 0

    @property
    def errors(self) -> int:
        return self.subs + self.dels + self.ins

    @property
    def ref_len(self) -> int:
        return self.hits + self.subs + self.dels

    @property
    def hyp_len(self) -> int:
        return self.hits + self.subs + self.ins

    def __add__(self, other: Alignment) -> Alignment:
        return Alignment(
            self.hits + other.hits,
            self.subs + other.subs,
            self.dels + other.dels,
            self.ins + other.ins,
        )


@dataclass(frozen=True)
class ErrorRate:
    errors: int
    ref_len: int
    rate: float


def _units(seq: Sequence[Any]) -> list[Any]:
    return [t.surface if isinstance(t, Token) else t for t in seq]


def align_ops(ref: Sequence[Any], hyp: Sequence[Any]) -> list[tuple[Op, Any, Any]]:
    """Minimal-cost edit script from ``ref`` to ``hyp``.

    Returns ``(op, ref_token, hyp_token)`` triples in order; the missing side is
    ``None`` for deletions and insertions. Among equal-cost paths the backtrace
    prefers the diagonal (hit/substitution), then deletion, then insertion.
    """
    r = _units(ref)
    h = _units(hyp)
    if r == h:
        return [(Op.HIT, t, t) for t in r]
    m, n = len(r), len(h)
    # full table is needed for the backtrace
    d = [[0] * (n + 1) for _ in range(m + 1)]
    for j in range(n + 1):
        d[0][j] = j
    for i in range(1, m + 1):
        row, prev = d[i], d[i - 1]
        row[0] = i
        ri = r[i - 1]
        for j in range(1, n + 1):
            diag = prev[j - 1] + (ri != h[j - 1])
            up = prev[j] + 1
            left = row[j - 1] + 1
            row[j] = diag if diag <= up and diag <= left else (up if up <= left else left)

    ops: list[tuple[Op, Any, Any]] = []
    i, j = m, n
    while i > 0 or j > 0:
        cur = d[i][j]
        if i > 0 and j > 0:
            same = r[i - 1] == h[j - 1]
            if d[i - 1][j - 1] + (not same) == cur:
                ops.append((Op.HIT if same else Op.SUB, r[i - 1], h[j - 1]))
                i -= 1
                j -= 1
                continue
        if i > 0 and d[i - 1][j] + 1 == cur:
            ops.append((Op.DEL, r[i - 1], None))
            i -= 1
        else:
            ops.append((Op.INS, None, h[j - 1]))
            j -= 1
    ops.reverse()
    return ops


def align(ref: Sequence[Any], hyp: Sequence[Any]) -> Alignment:
    counts = {op: 0 for op in Op}
    for op, _, _ in align_ops(ref, hyp):
        counts[op] += 1
    return Alignment(counts[Op.HIT], counts[Op.SUB], counts[Op.DEL], counts[Op.INS])


_UNITS = {Mode.CER: char_units, Mode.WER: word_units, Mode.MER: mixed_units}


def units(text: str, mode: Mode | str) -> list[str]:
    return _UNITS[Mode(mode)](text)


def rate_from_alignment(alignment: Alignment) -> ErrorRate:
    ref_len = alignment.ref_len
    if ref_len == 0:
        # empty reference: errors = hyp length, rate fixed at 1.0 (0.0 if both empty)
        errors = alignment.hyp_len
        return ErrorRate(errors, 0, 1.0 if errors else 0.0)
    return ErrorRate(alignment.errors, ref_len, alignment.errors / ref_len)


def text_alignment(ref_text: str, hyp_text: str, mode: Mode | str) -> Alignment:
    return align(units(ref_text, mode), units(hyp_text, mode))


def error_rate(ref_text: str, hyp_text: str, mode: Mode | str = Mode.MER) -> ErrorRate:
    """Error rate of ``hyp_text`` against ``ref_text`` after normalization.

    Rates are not clipped and may exceed 1.0 when the hypothesis has many
    insertions.
    """
    return rate_from_alignment(text_alignment(ref_text, hyp_text, mode))


def corpus_error_rate(pairs: Iterable[tuple[str, str]], mode: Mode | str = Mode.MER) -> ErrorRate:
    """Pooled error rate: total errors over total reference units."""
    total = Alignment()
    for ref_text, hyp_text in pairs:
        total = total + text_alignment(ref_text, hyp_text, mode)
    return rate_from_alignment(total)


@dataclass(frozen=True)
class CorrectionQualityReport:
    n_utts: int
    frac_greedy_exact: float
    frac_llm_exact: float
    frac_not_worse: float
    frac_more_accurate: float

    def to_record(self) -> dict[str, Any]:
        return asdict(self)


def correction_quality(entries: Iterable[Any], mode: Mode | str = Mode.WER) -> CorrectionQualityReport:
    """Summarize how LLM corrections compare to greedy output against the reference.

    Every fraction uses the total number of scored utterances as denominator.

    Raises:
        ValueError: if ``entries`` is empty or an entry lacks one of
            ``ref_text``, ``greedy_text``, ``corrected_text``.
    """
    n = greedy_exact = llm_exact = not_worse = better = 0
    for entry in entries:
        for attr in ("ref_text", "greedy_text", "corrected_text"):
            if getattr(entry, attr, None) is None:
                raise ValueError(f"{entry.utt_id}: missing {attr}")
        g = error_rate(entry.ref_text, entry.greedy_text, mode).rate
        c = error_rate(entry.ref_text, entry.corrected_text, mode).rate
        n += 1
        greedy_exact += g == 0
        llm_exact += c == 0
        not_worse += c <= g
        better += c < g
    if n == 0:
        raise ValueError("correction_quality needs at least one utterance")
    return CorrectionQualityReport(n, greedy_exact / n, llm_exact / n, not_worse / n, better / n)


def format_quality_report(report: CorrectionQualityReport, label: str = "ALL") -> str:
    header = (
        "# fractions over all scored utterances\n"
        f"{'Dataset':<12}{'#Utts':>8}{'Greedy=0(%)':>14}{'LLM=0(%)':>11}"
        f"{'NotWorse(%)':>14}{'MoreAcc(%)':>13}\n"
    )
    row = (
        f"{label:<12}{report.n_utts:>8}{100 * report.frac_greedy_exact:>14.1f}"
        f"{100 * report.frac_llm_exact:>11.1f}{100 * report.frac_not_worse:>14.1f}"
        f"{100 * report.frac_more_accurate:>13.1f}\n"
    )
    return header + row
