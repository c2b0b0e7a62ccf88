"""Offline simulation of the pseudo-labelling loop.

Synthetic ZH/EN corpora are corrupted by a token-level ASR error model and
"corrected" by an oracle that reverts each error with some probability. The
oracle is served through the normal chat-client interface, so the real
correction, filtering and balancing code runs unchanged.

Randomness is keyed per utterance by hashing ``(seed, utt_id, purpose)``, so
results do not depend on processing order or parallelism.
"""

from __future__ import annotations

import dataclasses
import hashlib
import logging
import random
import string
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .llm_correct import MockEndpoint, TransportError, make_batches, render_payload
from .manifest import Lang, Manifest, ManifestEntry
from .metrics import Op, align_ops, error_rate
from .orchestrator import ConfigError, IterationConfig, IterationResult, IterationStats, run_iteration
from .textnorm import detokenize, mixed_units

logger = logging.getLogger(__name__)

_HAN_FIRST, _HAN_LAST = 0x4E00, 0x9FFF


def _seed_int(*keys: Any) -> int:
    digest = hashlib.sha256("\x1f".join(map(str, keys)).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def keyed_random(*keys: Any) -> random.Random:
    return random.Random(_seed_int(*keys))


@dataclass(frozen=True)
class AsrErrorModel:
    sub_p: float = 0.0
    del_p: float = 0.0
    ins_p: float = 0.0
    rng_seed: int = 0

    def __post_init__(self) -> None:
        for name in ("sub_p", "del_p", "ins_p"):
            p = getattr(self, name)
            if not 0 <= p < 1:
                raise ValueError(f"{name} must be in [0, 1), got {p}")
        if self.sub_p + self.del_p + self.ins_p >= 1:
            raise ValueError("sub_p + del_p + ins_p must be < 1")

    @property
    def rate(self) -> float:
        return self.sub_p + self.del_p + self.ins_p

    @classmethod
    def from_rate(
        cls, rate: float, mix: Sequence[float] = (0.6, 0.2, 0.2), rng_seed: int = 0
    ) -> AsrErrorModel:
        """Split a total per-token error rate into sub/del/ins by ``mix``."""
        total = float(sum(mix))
        sub, dele, ins = (rate * m / total for m in mix)
        return cls(sub, dele, ins, rng_seed)


@dataclass(frozen=True)
class OracleCorrector:
    fix_p: float = 1.0
    rng_seed: int = 0
    # fix_p shrinks linearly with the greedy error rate when > 0
    decay_k: float = 0.0

    def __post_init__(self) -> None:
        if not 0 <= self.fix_p <= 1:
            raise ValueError(f"fix_p must be in [0, 1], got {self.fix_p}")
        if self.decay_k < 0:
            raise ValueError("decay_k must be >= 0")


def make_vocab(lang: Lang | str, size: int, seed: int = 0) -> tuple[str, ...]:
    """``size`` distinct Han characters (ZH) or lower-case pseudo-words (EN)."""
    lang = Lang(lang)
    if size < 2:
        raise ValueError("vocab_size must be >= 2")
    rng = keyed_random(seed, "vocab", lang.value)
    if lang is Lang.ZH:
        if size > _HAN_LAST - _HAN_FIRST + 1:
            raise ValueError("vocab_size exceeds the CJK Unified Ideographs block")
        return tuple(chr(c) for c in rng.sample(range(_HAN_FIRST, _HAN_LAST + 1), size))
    words: list[str] = []
    seen: set[str] = set()
    while len(words) < size:
        w = "".join(rng.choices(string.ascii_lowercase, k=rng.randint(2, 9)))
        if w not in seen:
            seen.add(w)
            words.append(w)
    return tuple(words)


def gen_corpus(
    n_utts: int,
    lang: Lang | str,
    mean_len: float = 12,
    vocab_size: int = 500,
    mean_dur_s: float = 4.0,
    seed: int = 0,
    source: str = "sim",
) -> Manifest:
    """Synthetic utterances with reference text, ids ``sim-{lang}-{i}``.

    Token counts are ``1 + Poisson(mean_len - 1)`` and durations are
    ``n_tokens * mean_dur_s / mean_len`` scaled by U(0.8, 1.2), so the
    expected duration is exactly ``mean_dur_s``.
    """
    lang = Lang(lang)
    if n_utts < 1:
        raise ValueError("n_utts must be >= 1")
    if mean_len < 1:
        raise ValueError("mean_len must be >= 1")
    if lang not in (Lang.ZH, Lang.EN):
        raise ValueError("simulated corpora are ZH or EN")
    vocab = make_vocab(lang, vocab_size, seed)
    per_token_s = mean_dur_s / mean_len
    entries = []
    for i in range(n_utts):
        utt_id = f"sim-{lang.value.lower()}-{i}"
        rng = np.random.default_rng(_seed_int(seed, "corpus", utt_id))
        n_tok = 1 + int(rng.poisson(mean_len - 1))
        tokens = [vocab[k] for k in rng.integers(0, len(vocab), n_tok)]
        duration = round(float(n_tok * per_token_s * rng.uniform(0.8, 1.2)), 3)
        entries.append(
            ManifestEntry(
                utt_id=utt_id,
                audio_ref=f"sim://{lang.value.lower()}/{i}.wav",
                duration_s=duration,
                lang=lang,
                ref_text=detokenize(tokens),
                source=source,
            )
        )
    return Manifest(entries, name=f"sim-{lang.value.lower()}")


def corrupt(ref_text: str, model: AsrErrorModel, vocab: Sequence[str], key: str = "") -> str:
    """Simulated greedy output for ``ref_text``.

    Each reference token is substituted (by a different vocabulary token) with
    probability ``sub_p``, deleted with ``del_p``, and independently followed
    by a random inserted token with ``ins_p``.
    """
    if len(vocab) < 2 and model.sub_p > 0:
        raise ValueError("substitution needs at least two vocabulary tokens")
    rng = keyed_random(model.rng_seed, "corrupt", key, ref_text)
    out: list[str] = []
    for tok in mixed_units(ref_text):
        u = rng.random()
        if u < model.sub_p:
            repl = tok
            while repl == tok:
                repl = vocab[rng.randrange(len(vocab))]
            out.append(repl)
        elif u >= model.sub_p + model.del_p:
            out.append(tok)
        if rng.random() < model.ins_p:
            out.append(vocab[rng.randrange(len(vocab))])
    return detokenize(out)


def oracle_correct(greedy_text: str, ref_text: str, oracle: OracleCorrector, key: str = "") -> str:
    """Revert each greedy error against the reference with probability ``fix_p``.

    >>> oracle_correct("rocket blas delay", "rocket blasts delay", OracleCorrector(1.0))
    'rocket blasts delay'
    """
    fix_p = oracle.fix_p
    if oracle.decay_k > 0:
        greedy_rate = error_rate(ref_text, greedy_text).rate
        fix_p *= max(0.0, 1.0 - oracle.decay_k * greedy_rate)
    if fix_p <= 0:
        return greedy_text
    if fix_p >= 1:
        return ref_text
    rng = keyed_random(oracle.rng_seed, "oracle", key, greedy_text, ref_text)
    out: list[str] = []
    for op, ref_tok, hyp_tok in align_ops(mixed_units(ref_text), mixed_units(greedy_text)):
        if op is Op.HIT:
            out.append(hyp_tok)
            continue
        fix = rng.random() < fix_p
        if op is Op.SUB:
            out.append(ref_tok if fix else hyp_tok)
        elif op is Op.DEL:
            if fix:
                out.append(ref_tok)
        elif not fix:
            out.append(hyp_tok)
    return detokenize(out)


def lookup_endpoint(responses: Mapping[str, str]) -> MockEndpoint:
    """Mock client answering by exact payload line (the prompt's last line)."""

    def respond(prompt: str) -> str:
        payload = prompt.rsplit("\n", 1)[-1]
        try:
            return responses[payload]
        except KeyError:
            raise TransportError("no scripted response for payload") from None

    return MockEndpoint(respond)


_SIM_KEYS = {
    "n_utts": int,
    "mean_len": float,
    "vocab_size": int,
    "mean_dur_s": float,
    "error_mix": tuple,
    "fix_p": float,
    "decay_k": float,
}


@dataclass
class Scenario:
    n_utts: int = 10000
    mean_len: float = 12.0
    vocab_size: int = 500
    mean_dur_s: float = 4.0
    error_rates: tuple[float, ...] = (0.30, 0.20, 0.15)
    error_mix: tuple[float, ...] = (0.6, 0.2, 0.2)
    fix_p: float = 0.6
    decay_k: float = 0.0
    seed: int = 0
    config: IterationConfig = field(default_factory=IterationConfig)

    def __post_init__(self) -> None:
        self.error_rates = tuple(float(r) for r in self.error_rates)
        self.error_mix = tuple(float(m) for m in self.error_mix)
        if not self.error_rates:
            raise ConfigError("scenario needs at least one iteration")
        if self.n_utts < 1:
            raise ConfigError("n_utts must be >= 1")
        if len(self.error_mix) != 3 or min(self.error_mix) < 0 or sum(self.error_mix) <= 0:
            raise ConfigError("error_mix must be three non-negative weights")
        for rate in self.error_rates:
            if not 0 <= rate < 1:
                raise ConfigError(f"error rate {rate} outside [0, 1)")
        if not 0 <= self.fix_p <= 1:
            raise ConfigError("fix_p must be in [0, 1]")

    @property
    def iterations(self) -> int:
        return len(self.error_rates)

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any] | None) -> Scenario:
        data = dict(data or {})
        sim = dict(data.pop("sim", None) or {})
        unknown = sorted(set(sim) - set(_SIM_KEYS) - {"error_rates", "iterations"})
        if unknown:
            raise ConfigError(f"unknown sim key(s): {', '.join(unknown)}")
        rates = sim.pop("error_rates", cls.error_rates)
        if isinstance(rates, (int, float)):
            rates = [rates]
        rates = list(rates)
        if "iterations" in sim:
            iterations = int(sim.pop("iterations"))
            if iterations < 1:
                raise ConfigError("iterations must be >= 1")
            if len(rates) == 1:
                rates = rates * iterations
            elif len(rates) != iterations:
                raise ConfigError(f"iterations={iterations} but {len(rates)} error_rates given")
        config = IterationConfig.from_mapping(data)
        try:
            return cls(
                error_rates=tuple(rates),
                seed=config.rng_seed,
                config=config,
                **{k: _SIM_KEYS[k](v) for k, v in sim.items()},
            )
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from None


def load_scenario(path: str | Path | None = None) -> Scenario:
    """Parse a scenario file; ``None`` loads the bundled default scenario."""
    if path is None:
        text = resources.files("llmfilter").joinpath("scenarios", "default.yaml").read_text("utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"scenario is not valid YAML ({exc})") from None
    if data is not None and not isinstance(data, dict):
        raise ConfigError("scenario top level must be a mapping")
    return Scenario.from_mapping(data)


def _response(corrections: Sequence[str]) -> str:
    return "#".join(f"<{c}>" for c in corrections)


def simulate_round(
    corpora: Mapping[Lang, Manifest],
    vocabs: Mapping[Lang, Sequence[str]],
    model: AsrErrorModel,
    oracle: OracleCorrector,
    config: IterationConfig,
) -> IterationResult:
    """Corrupt, oracle-correct and push one round through :func:`run_iteration`."""
    tag = f"iter{config.iteration_index}"
    hyp: dict[Lang, Manifest] = {}
    responses: dict[str, str] = {}
    for lang, corpus in corpora.items():
        entries = []
        corrections = []
        for e in corpus.entries:
            key = f"{e.utt_id}/{tag}"
            greedy = corrupt(e.ref_text, model, vocabs[lang], key=key)
            corrections.append(oracle_correct(greedy, e.ref_text, oracle, key=key))
            entries.append(dataclasses.replace(e, greedy_text=greedy))
        hyp[lang] = Manifest(entries, name=corpus.name)
        batches = make_batches(
            [e.utt_id for e in entries],
            [e.greedy_text for e in entries],
            [e.duration_s for e in entries],
            config.batch_size,
        )
        pos = 0
        for batch in batches:
            payload = render_payload(batch)
            # first writer wins on the (practically impossible) payload collision
            responses.setdefault(payload, _response(corrections[pos : pos + len(batch)]))
            pos += len(batch)
    return run_iteration(hyp, config, lookup_endpoint(responses))


def run_simulation(scenario: Scenario) -> list[IterationStats]:
    return [result.stats for result in iter_simulation(scenario)]


def iter_simulation(scenario: Scenario):
    """Yield one :class:`IterationResult` per scenario iteration."""
    langs = scenario.config.languages
    corpora = {
        lang: gen_corpus(
            scenario.n_utts,
            lang,
            scenario.mean_len,
            scenario.vocab_size,
            scenario.mean_dur_s,
            scenario.seed,
        )
        for lang in langs
    }
    vocabs = {lang: make_vocab(lang, scenario.vocab_size, scenario.seed) for lang in langs}
    oracle = OracleCorrector(scenario.fix_p, scenario.seed, scenario.decay_k)
    for i, rate in enumerate(scenario.error_rates, start=1):
        model = AsrErrorModel.from_rate(rate, scenario.error_mix, scenario.seed)
        config = dataclasses.replace(scenario.config, iteration_index=i)
        logger.info("simulating iteration %d (error rate %.2f)", i, rate)
        yield simulate_round(corpora, vocabs, model, oracle, config)
