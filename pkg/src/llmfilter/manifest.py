"""Utterance manifests: one JSON record per line.

Field order on disk is fixed so that writes are byte-deterministic::

    utt_id, audio_filepath, duration, lang, text, greedy_text,
    corrected_text, hypo_mer, kept, source, <unknown fields in read order>
"""

from __future__ import annotations

import json
import logging
import math
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any

logger = logging.getLogger(__name__)


class Lang(str, Enum):
    ZH = "ZH"
    EN = "EN"
    CS = "CS"

    def __str__(self) -> str:
        return self.value


class ManifestError(ValueError):
    """Raised for malformed or invalid manifest content."""

    def __init__(self, message: str, line: int | None = None, utt_id: str | None = None):
        self.line = line
        self.utt_id = utt_id
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


# on-disk key -> attribute name
_KEYS = {
    "utt_id": "utt_id",
    "audio_filepath": "audio_ref",
    "duration": "duration_s",
    "lang": "lang",
    "text": "ref_text",
    "greedy_text": "greedy_text",
    "corrected_text": "corrected_text",
    "hypo_mer": "hypo_mer",
    "kept": "kept",
    "source": "source",
}
_REQUIRED = ("utt_id", "audio_filepath", "duration", "lang")


@dataclass
class ManifestEntry:
    utt_id: str
    audio_ref: str
    duration_s: float
    lang: Lang
    ref_text: str | None = None
    greedy_text: str | None = None
    corrected_text: str | None = None
    hypo_mer: float | None = None
    kept: bool | None = None
    source: str = ""
    extra: dict[str, Any] = field(default_factory=dict)

    def validate(self) -> None:
        if not isinstance(self.duration_s, (int, float)) or isinstance(self.duration_s, bool):
            raise ManifestError(f"{self.utt_id}: duration must be a number", utt_id=self.utt_id)
        if not math.isfinite(self.duration_s) or self.duration_s < 0:
            raise ManifestError(
                f"{self.utt_id}: duration must be finite and >= 0, got {self.duration_s!r}",
                utt_id=self.utt_id,
            )
        if self.kept is not None and self.hypo_mer is None:
            raise ManifestError(f"{self.utt_id}: 'kept' set without 'hypo_mer'", utt_id=self.utt_id)
        if self.hypo_mer is not None:
            if self.greedy_text is None or self.corrected_text is None:
                raise ManifestError(
                    f"{self.utt_id}: 'hypo_mer' requires greedy_text and corrected_text",
                    utt_id=self.utt_id,
                )
            if not (self.hypo_mer >= 0) or math.isinf(self.hypo_mer):
                raise ManifestError(f"{self.utt_id}: hypo_mer must be finite and >= 0", utt_id=self.utt_id)

    def to_record(self) -> dict[str, Any]:
        rec: dict[str, Any] = {
            "utt_id": self.utt_id,
            "audio_filepath": self.audio_ref,
            "duration": self.duration_s,
            "lang": self.lang.value,
        }
        for key in ("text", "greedy_text", "corrected_text", "hypo_mer", "kept"):
            value = getattr(self, _KEYS[key])
            if value is not None:
                rec[key] = value
        if self.source:
            rec["source"] = self.source
        for key, value in self.extra.items():
            rec[key] = value
        return rec

    @classmethod
    def from_record(cls, rec: Mapping[str, Any]) -> ManifestEntry:
        missing = [k for k in _REQUIRED if k not in rec]
        if missing:
            raise ManifestError(f"missing required field(s): {', '.join(missing)}")
        try:
            lang = Lang(rec["lang"])
        except ValueError:
            raise ManifestError(f"unknown lang {rec['lang']!r}") from None
        kwargs: dict[str, Any] = {"lang": lang}
        for key, attr in _KEYS.items():
            if key in rec and key != "lang":
                kwargs[attr] = rec[key]
        if kwargs.get("source") is None:
            kwargs["source"] = ""
        extra = {k: v for k, v in rec.items() if k not in _KEYS}
        entry = cls(**kwargs, extra=extra)
        if not isinstance(entry.utt_id, str) or not entry.utt_id:
            raise ManifestError("utt_id must be a non-empty string")
        return entry


@dataclass
class Manifest:
    entries: list[ManifestEntry] = field(default_factory=list)
    name: str = ""

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def validate(self) -> None:
        seen: set[str] = set()
        for entry in self.entries:
            entry.validate()
            if entry.utt_id in seen:
                raise ManifestError(f"duplicate utt_id {entry.utt_id!r}", utt_id=entry.utt_id)
            seen.add(entry.utt_id)


def read_manifest(path: str | Path) -> Manifest:
    """Read a JSON-lines manifest, preserving entry order and unknown fields.

    Raises:
        ManifestError: on a malformed line, an invalid entry, or a duplicate
            ``utt_id`` (the error carries the 1-based line number).
    """
    path = Path(path)
    entries: list[ManifestEntry] = []
    seen: dict[str, int] = {}
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"malformed JSON ({exc.msg})", line=lineno) from None
            if not isinstance(rec, dict):
                raise ManifestError("record is not a JSON object", line=lineno)
            try:
                entry = ManifestEntry.from_record(rec)
                entry.validate()
            except ManifestError as exc:
                raise ManifestError(str(exc), line=lineno, utt_id=exc.utt_id) from None
            if entry.utt_id in seen:
                raise ManifestError(
                    f"duplicate utt_id {entry.utt_id!r} (first seen on line {seen[entry.utt_id]})",
                    line=lineno,
                    utt_id=entry.utt_id,
                )
            seen[entry.utt_id] = lineno
            if entry.duration_s == 0:
                logger.warning("%s: line %d (%s) has zero duration", path, lineno, entry.utt_id)
            entries.append(entry)
    return Manifest(entries=entries, name=path.stem)


def dumps_manifest(manifest: Manifest) -> str:
    manifest.validate()
    return "".join(
        json.dumps(entry.to_record(), ensure_ascii=False) + "\n" for entry in manifest.entries
    )


def write_manifest(manifest: Manifest, path: str | Path) -> None:
    """Validate then write ``manifest``; output is byte-identical for equal input."""
    text = dumps_manifest(manifest)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def total_duration(entries: Iterable[ManifestEntry]) -> float:
    """Correctly rounded sum of durations in seconds."""
    return math.fsum(e.duration_s for e in entries)


def partition_by_lang(manifest: Manifest | Iterable[ManifestEntry]) -> dict[Lang, list[ManifestEntry]]:
    buckets: dict[Lang, list[ManifestEntry]] = {lang: [] for lang in Lang}
    for entry in manifest:
        buckets[entry.lang].append(entry)
    return buckets
