"""One noisy-student iteration on the data side.

Greedy hypotheses in, LLM corrections, Hypo-MER filtering and ZH/EN duration
balancing, then a training manifest, a per-utterance decisions manifest and
the iteration statistics out.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, NamedTuple

import yaml

from .filtering import DEFAULT_THRESHOLD, FilterConfig, apply_filter, balance_durations
from .llm_correct import (
    DEFAULT_BATCH_SIZE,
    DEFAULT_MAX_ATTEMPTS,
    BatchDropped,
    ChatClient,
    EndpointSettings,
    RetryPolicy,
    correct_batches,
    load_template,
    make_batches,
)
from .manifest import Lang, Manifest, ManifestEntry, total_duration
from .metrics import Mode, corpus_error_rate
from .textnorm import normalize

logger = logging.getLogger(__name__)

CONFIG_KEYS = (
    "iteration",
    "batch_size",
    "max_attempts",
    "threshold",
    "metric",
    "reference",
    "parallelism",
    "seed",
    "languages",
    "balance",
    "endpoint",
)
ENDPOINT_KEYS = ("url", "model", "timeout_s")

# per-utterance outcome recorded in the decisions manifest
OUTCOME_TRAIN = "train"
OUTCOME_BALANCED_OUT = "balanced_out"
OUTCOME_FILTERED_OUT = "filtered_out"
OUTCOME_EMPTY_LABEL = "empty_label"
OUTCOME_BATCH_DROPPED = "batch_dropped"


class ConfigError(ValueError):
    pass


@dataclass
class IterationConfig:
    iteration_index: int = 1
    batch_size: int = DEFAULT_BATCH_SIZE
    retry: RetryPolicy = field(default_factory=RetryPolicy)
    filter: FilterConfig = field(default_factory=FilterConfig)
    languages: tuple[Lang, ...] = (Lang.ZH, Lang.EN)
    parallelism: int = 1
    rng_seed: int = 0
    balance: bool = True
    endpoint: EndpointSettings = field(default_factory=EndpointSettings)

    def __post_init__(self) -> None:
        if self.iteration_index < 1:
            raise ConfigError("iteration must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.parallelism < 1:
            raise ConfigError("parallelism must be >= 1")
        self.languages = tuple(Lang(lang) for lang in self.languages)
        if any(lang not in (Lang.ZH, Lang.EN) for lang in self.languages):
            raise ConfigError("languages must be drawn from ZH, EN")

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any] | None) -> IterationConfig:
        """Build a config from a parsed document; absent keys take protocol defaults.

        Dotted keys (``endpoint.url``) and a nested ``endpoint`` section are
        both accepted.
        """
        data = dict(data or {})
        endpoint = dict(data.pop("endpoint", None) or {})
        for key in list(data):
            if key.startswith("endpoint."):
                endpoint[key.split(".", 1)[1]] = data.pop(key)
        unknown = sorted(set(data) - set(CONFIG_KEYS))
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        bad_endpoint = sorted(set(endpoint) - set(ENDPOINT_KEYS))
        if bad_endpoint:
            raise ConfigError(f"unknown endpoint key(s): {', '.join(bad_endpoint)}")
        for key, default in (
            ("batch_size", DEFAULT_BATCH_SIZE),
            ("max_attempts", DEFAULT_MAX_ATTEMPTS),
            ("threshold", DEFAULT_THRESHOLD),
            ("metric", Mode.MER.value),
        ):
            if key not in data:
                logger.info("config: %s not set, using default %s", key, default)
        try:
            return cls(
                iteration_index=int(data.get("iteration", 1)),
                batch_size=int(data.get("batch_size", DEFAULT_BATCH_SIZE)),
                retry=RetryPolicy(int(data.get("max_attempts", DEFAULT_MAX_ATTEMPTS))),
                filter=FilterConfig(
                    threshold=float(data.get("threshold", DEFAULT_THRESHOLD)),
                    metric_mode=Mode(str(data.get("metric", Mode.MER.value)).upper()),
                    reference=str(data.get("reference", "corrected")),
                ),
                languages=tuple(data.get("languages", ("ZH", "EN"))),
                parallelism=int(data.get("parallelism", 1)),
                rng_seed=int(data.get("seed", 0)),
                balance=bool(data.get("balance", True)),
                endpoint=EndpointSettings(
                    url=str(endpoint.get("url", "")),
                    model=str(endpoint.get("model", "")),
                    timeout_s=float(endpoint.get("timeout_s", 60.0)),
                ),
            )
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None


def load_config(path: str | Path | None) -> IterationConfig:
    if path is None:
        return IterationConfig.from_mapping({})
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from None
    if data is not None and not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return IterationConfig.from_mapping(data)


@dataclass
class IterationStats:
    iteration_index: int
    total_hours: float
    filtered_hours: float
    filtered_ratio: float
    dropped_batch_hours: float
    greedy_err: float | None = None
    filtered_err: float | None = None
    train_hours: float = 0.0
    metric: str = Mode.MER.value

    def to_record(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_record(cls, rec: Mapping[str, Any]) -> IterationStats:
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in rec.items() if k in names})


class IterationResult(NamedTuple):
    train_manifest: Manifest
    stats: IterationStats
    decisions_manifest: Manifest


def _hours(entries: Sequence[ManifestEntry]) -> float:
    return total_duration(entries) / 3600.0


def _with_outcome(entry: ManifestEntry, outcome: str) -> ManifestEntry:
    return dataclasses.replace(entry, extra={**entry.extra, "outcome": outcome})


def run_iteration(
    hyp_manifests: Mapping[Lang | str, Manifest],
    config: IterationConfig,
    endpoint: ChatClient,
) -> IterationResult:
    """Correct, filter and balance one round of pseudo labels.

    Batches are formed per language in manifest order. Utterances of a batch
    that exhausted its retries are excluded from ``total_hours`` and reported
    in ``dropped_batch_hours`` instead.

    Raises:
        ValueError: an entry lacks greedy_text or sits under the wrong language.
        EndpointConfigError: the endpoint is unusable; nothing is produced.
    """
    manifests = {Lang(k): v for k, v in hyp_manifests.items()}
    metric = config.filter.metric_mode

    succeeded_all: list[ManifestEntry] = []
    dropped_batch: list[ManifestEntry] = []
    kept_by_lang: dict[Lang, list[ManifestEntry]] = {}
    outcome: dict[str, str] = {}
    scored: dict[str, ManifestEntry] = {}
    order: list[ManifestEntry] = []

    for lang in config.languages:
        entries = list(manifests.get(lang, Manifest()).entries)
        for e in entries:
            if e.lang != lang:
                raise ValueError(f"{e.utt_id}: lang {e.lang} found in the {lang} manifest")
            if e.greedy_text is None:
                raise ValueError(f"{e.utt_id}: no greedy_text to correct")
            if e.utt_id in outcome:
                raise ValueError(f"duplicate utt_id {e.utt_id!r} across input manifests")
            outcome[e.utt_id] = ""
        order.extend(entries)
        batches = make_batches(
            [e.utt_id for e in entries],
            [e.greedy_text for e in entries],
            [e.duration_s for e in entries],
            config.batch_size,
        )
        results = correct_batches(
            endpoint, load_template(lang), batches, config.retry, config.parallelism
        )
        succeeded: list[ManifestEntry] = []
        pos = 0
        for batch, result in zip(batches, results):
            chunk = entries[pos : pos + len(batch)]
            pos += len(batch)
            if isinstance(result, BatchDropped):
                dropped_batch.extend(chunk)
                for e in chunk:
                    outcome[e.utt_id] = OUTCOME_BATCH_DROPPED
                continue
            succeeded.extend(dataclasses.replace(e, corrected_text=c) for e, c in zip(chunk, result))
        kept, dropped, _ = apply_filter(succeeded, config.filter)
        for e in kept + dropped:
            scored[e.utt_id] = e
        for e in dropped:
            outcome[e.utt_id] = OUTCOME_FILTERED_OUT
        succeeded_all.extend(succeeded)
        kept_by_lang[lang] = kept

    filtered = [e for lang in config.languages for e in kept_by_lang[lang]]
    present = [lang for lang in config.languages if manifests.get(lang) is not None and len(manifests[lang])]
    if config.balance and set(present) >= {Lang.ZH, Lang.EN}:
        kept_by_lang[Lang.ZH], kept_by_lang[Lang.EN] = balance_durations(
            kept_by_lang[Lang.ZH], kept_by_lang[Lang.EN]
        )
    elif config.balance:
        logger.warning("balancing skipped: need both ZH and EN input, got %s", [str(x) for x in present])

    train_entries: list[ManifestEntry] = []
    balanced_ids = {e.utt_id for lang in config.languages for e in kept_by_lang[lang]}
    for e in filtered:
        if e.utt_id not in balanced_ids:
            outcome[e.utt_id] = OUTCOME_BALANCED_OUT
        elif not normalize(e.corrected_text):
            outcome[e.utt_id] = OUTCOME_EMPTY_LABEL
        else:
            outcome[e.utt_id] = OUTCOME_TRAIN
            train_entries.append(dataclasses.replace(e, ref_text=e.corrected_text))

    decisions = [_with_outcome(scored.get(e.utt_id, e), outcome[e.utt_id]) for e in order]

    total_h = _hours(succeeded_all)
    filtered_h = _hours(filtered)
    with_ref = [e for e in succeeded_all if e.ref_text is not None]
    kept_ref = [e for e in filtered if e.ref_text is not None]
    stats = IterationStats(
        iteration_index=config.iteration_index,
        total_hours=total_h,
        filtered_hours=filtered_h,
        filtered_ratio=filtered_h / total_h if total_h > 0 else 0.0,
        dropped_batch_hours=_hours(dropped_batch),
        greedy_err=(
            corpus_error_rate(((e.ref_text, e.greedy_text) for e in with_ref), metric).rate
            if with_ref
            else None
        ),
        filtered_err=(
            corpus_error_rate(((e.ref_text, e.corrected_text) for e in kept_ref), metric).rate
            if kept_ref
            else None
        ),
        train_hours=_hours(train_entries),
        metric=metric.value,
    )
    return IterationResult(
        Manifest(train_entries, name="train"),
        stats,
        Manifest(decisions, name="decisions"),
    )


_COLUMNS = (
    ("Iter", 6),
    ("Total hours", 13),
    ("Filtered hours", 16),
    ("Filtered ratio", 16),
    ("Greedy {m}(%)", 15),
    ("Filtered {m}(%)", 17),
    ("Dropped hours", 15),
    ("Train hours", 13),
)


def _pct(value: float | None) -> str:
    return "-" if value is None else f"{100 * value:.2f}"


def report(stats_list: Sequence[IterationStats]) -> str:
    """Aligned plain-text table, one row per iteration; two decimals throughout."""
    metric = stats_list[0].metric if stats_list else Mode.MER.value
    header = "".join(
        (title.format(m=metric).ljust(width) if i == 0 else title.format(m=metric).rjust(width))
        for i, (title, width) in enumerate(_COLUMNS)
    )
    lines = [header.rstrip()]
    for s in stats_list:
        cells = (
            str(s.iteration_index),
            f"{s.total_hours:.2f}",
            f"{s.filtered_hours:.2f}",
            f"{s.filtered_ratio:.2f}",
            _pct(s.greedy_err),
            _pct(s.filtered_err),
            f"{s.dropped_batch_hours:.2f}",
            f"{s.train_hours:.2f}",
        )
        row = "".join(
            cell.ljust(width) if i == 0 else cell.rjust(width)
            for i, (cell, (_, width)) in enumerate(zip(cells, _COLUMNS))
        )
        lines.append(row.rstrip())
    return "\n".join(lines) + "\n"


def stats_json(stats_list: Sequence[IterationStats]) -> str:
    return json.dumps([s.to_record() for s in stats_list], indent=2, ensure_ascii=False) + "\n"


def stats_csv(stats_list: Sequence[IterationStats]) -> str:
    names = [f.name for f in dataclasses.fields(IterationStats)]
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=names, lineterminator="\n")
    writer.writeheader()
    for s in stats_list:
        writer.writerow({k: ("" if v is None else v) for k, v in s.to_record().items()})
    return buf.getvalue()


def read_stats(path: str | Path) -> list[IterationStats]:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if isinstance(data, dict):
        data = [data]
    return [IterationStats.from_record(rec) for rec in data]

