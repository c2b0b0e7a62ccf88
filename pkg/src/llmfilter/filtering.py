"""Pseudo-label selection by greedy-vs-corrected discrepancy (Hypo-MER)."""

from __future__ import annotations

import dataclasses
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from fractions import Fraction

from .manifest import ManifestEntry
from .metrics import Mode, error_rate

DEFAULT_THRESHOLD = 0.1


@dataclass(frozen=True)
class FilterConfig:
    threshold: float = DEFAULT_THRESHOLD
    metric_mode: Mode = Mode.MER
    # which text is the reference side of the discrepancy: "corrected" or "greedy"
    reference: str = "corrected"

    def __post_init__(self) -> None:
        if not self.threshold >= 0:
            raise ValueError(f"threshold must be >= 0, got {self.threshold!r}")
        if self.reference not in ("corrected", "greedy"):
            raise ValueError(f"reference must be 'corrected' or 'greedy', got {self.reference!r}")
        object.__setattr__(self, "metric_mode", Mode(self.metric_mode))


@dataclass(frozen=True)
class FilterDecision:
    utt_id: str
    hypo_mer: float
    kept: bool


def hypo_mer(
    greedy_text: str,
    corrected_text: str,
    mode: Mode | str = Mode.MER,
    reference: str = "corrected",
) -> float:
    """Error rate between the greedy hypothesis and its LLM correction.

    By default the corrected text is the reference and the greedy text the
    hypothesis; ``reference="greedy"`` swaps them.
    """
    if reference == "greedy":
        return error_rate(greedy_text, corrected_text, mode).rate
    return error_rate(corrected_text, greedy_text, mode).rate


def apply_filter(
    entries: Iterable[ManifestEntry], config: FilterConfig = FilterConfig()
) -> tuple[list[ManifestEntry], list[ManifestEntry], list[FilterDecision]]:
    """Score every entry and split it into kept / dropped.

    Returned entries are copies with ``hypo_mer`` and ``kept`` filled in; the
    input entries are not modified. Order is preserved in all three lists.

    Raises:
        ValueError: if an entry has no greedy_text or corrected_text.
    """
    kept: list[ManifestEntry] = []
    dropped: list[ManifestEntry] = []
    decisions: list[FilterDecision] = []
    for entry in entries:
        if entry.greedy_text is None or entry.corrected_text is None:
            raise ValueError(f"{entry.utt_id}: filtering needs greedy_text and corrected_text")
        score = hypo_mer(entry.greedy_text, entry.corrected_text, config.metric_mode, config.reference)
        keep = score <= config.threshold
        decisions.append(FilterDecision(entry.utt_id, score, keep))
        (kept if keep else dropped).append(dataclasses.replace(entry, hypo_mer=score, kept=keep))
    return kept, dropped, decisions


def _trim_to(entries: Sequence[ManifestEntry], budget: Fraction) -> list[ManifestEntry]:
    ranked = sorted(entries, key=lambda e: (e.hypo_mer if e.hypo_mer is not None else float("inf"), e.utt_id))
    chosen: set[str] = set()
    acc = Fraction(0)
    for entry in ranked:
        nxt = acc + Fraction(entry.duration_s)
        if nxt > budget:
            break
        acc = nxt
        chosen.add(entry.utt_id)
    return [e for e in entries if e.utt_id in chosen]


def balance_durations(
    zh: Sequence[ManifestEntry], en: Sequence[ManifestEntry]
) -> tuple[list[ManifestEntry], list[ManifestEntry]]:
    """Trim the longer language down to the shorter one's total duration.

    The trimmed side keeps its lowest-``hypo_mer`` entries (ties by utt_id)
    until the next one would overshoot; the shorter side is returned as is.
    Both outputs keep input order.
    """
    zh_total = sum((Fraction(e.duration_s) for e in zh), Fraction(0))
    en_total = sum((Fraction(e.duration_s) for e in en), Fraction(0))
    if zh_total > en_total:
        return _trim_to(zh, en_total), list(en)
    if en_total > zh_total:
        return list(zh), _trim_to(en, zh_total)
    return list(zh), list(en)
