"""Command-line entry point: ``llmfilter <command> ...``.

Exit codes: 0 success, 1 validation error, 2 I/O error, 3 endpoint error.
Logs go to stderr; data goes to files (and result tables to stdout).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import shutil
import sys
from collections import defaultdict
from pathlib import Path

from . import __version__
from .filtering import apply_filter, balance_durations
from .llm_correct import (
    BatchDropped,
    EndpointConfigError,
    correct_batches,
    load_template,
    make_batches,
    mock_endpoint,
)
from .manifest import (
    Lang,
    Manifest,
    ManifestError,
    dumps_manifest,
    partition_by_lang,
    read_manifest,
    write_manifest,
)
from .metrics import Mode, correction_quality, corpus_error_rate, format_quality_report
from .orchestrator import (
    ConfigError,
    IterationConfig,
    load_config,
    read_stats,
    report,
    run_iteration,
    stats_csv,
    stats_json,
)

logger = logging.getLogger("llmfilter")

EXIT_OK, EXIT_INVALID, EXIT_IO, EXIT_ENDPOINT = 0, 1, 2, 3


class CommandError(Exception):
    def __init__(self, message: str, exit_code: int = EXIT_INVALID):
        super().__init__(message)
        self.exit_code = exit_code


def _endpoint(mock: str | None, config: IterationConfig):
    if mock is None:
        return config.endpoint.client()
    kind, _, arg = mock.partition(":")
    if kind == "echo":
        return mock_endpoint("echo")
    if kind == "malformed":
        return mock_endpoint("malformed")
    if kind == "failing":
        return mock_endpoint("failing", k=int(arg or 0))
    if kind == "scripted":
        if not arg:
            raise CommandError("--mock scripted needs a file: scripted:FILE")
        text = Path(arg).read_text(encoding="utf-8")
        try:
            responses = json.loads(text)
        except json.JSONDecodeError:
            responses = text.splitlines()
        if not isinstance(responses, list) or not all(isinstance(r, str) for r in responses):
            raise CommandError(f"{arg}: scripted responses must be a JSON list of strings")
        return mock_endpoint("scripted", responses=responses)
    raise CommandError(f"unknown --mock value {mock!r}")


def _config(args) -> IterationConfig:
    config = load_config(getattr(args, "config", None))
    updates = {}
    if getattr(args, "batch_size", None) is not None:
        updates["batch_size"] = args.batch_size
    if getattr(args, "seed", None) is not None:
        updates["rng_seed"] = args.seed
    if getattr(args, "threshold", None) is not None:
        updates["filter"] = dataclasses.replace(config.filter, threshold=args.threshold)
    if getattr(args, "lang", None):
        updates["languages"] = (Lang(args.lang),)
    return dataclasses.replace(config, **updates) if updates else config


def _read_all(paths) -> list:
    entries = []
    seen = set()
    for path in paths:
        for e in read_manifest(path).entries:
            if e.utt_id in seen:
                raise ManifestError(f"{path}: utt_id {e.utt_id!r} repeats an earlier manifest")
            seen.add(e.utt_id)
            entries.append(e)
    return entries


def cmd_score(args) -> int:
    ref = {e.utt_id: e for e in read_manifest(args.ref)}
    hyp = {e.utt_id: e for e in read_manifest(args.hyp)}
    offenders = sorted(set(ref) ^ set(hyp))
    if offenders:
        shown = ", ".join(offenders[:10])
        more = f" (+{len(offenders) - 10} more)" if len(offenders) > 10 else ""
        raise CommandError(f"utt_id mismatch between manifests: {shown}{more}")
    mode = Mode(args.mode.upper())
    rows = []
    scored = []
    for utt_id, r in ref.items():
        h = hyp[utt_id]
        if r.ref_text is None:
            raise CommandError(f"{utt_id}: reference manifest entry has no text")
        greedy = h.greedy_text if h.greedy_text is not None else h.ref_text
        if greedy is None:
            raise CommandError(f"{utt_id}: hypothesis manifest entry has no greedy_text or text")
        scored.append((r.source or "ALL", utt_id, r.ref_text, greedy, h.corrected_text))
    by_corpus = defaultdict(list)
    for item in scored:
        by_corpus[item[0]].append(item)
    groups = sorted(by_corpus.items())
    if len(groups) > 1:
        groups.append(("ALL", scored))
    has_corr = all(item[4] is not None for item in scored) and bool(scored)
    out_records = []
    lines = [f"{'Corpus':<12}{'#Utts':>8}{'Greedy ' + mode.value + '(%)':>16}"
             + (f"{'LLM ' + mode.value + '(%)':>14}" if has_corr else "")]
    for name, items in groups:
        g = corpus_error_rate(((i[2], i[3]) for i in items), mode)
        rec = {"corpus": name, "n_utts": len(items), "mode": mode.value,
               "greedy_rate": g.rate, "greedy_errors": g.errors, "ref_len": g.ref_len}
        line = f"{name:<12}{len(items):>8}{100 * g.rate:>16.2f}"
        if has_corr:
            c = corpus_error_rate(((i[2], i[4]) for i in items), mode)
            rec["corrected_rate"] = c.rate
            line += f"{100 * c.rate:>14.2f}"
            q = correction_quality(
                (_Scored(i[1], i[2], i[3], i[4]) for i in items), mode
            )
            rec["quality"] = q.to_record()
            rows.append((name, q))
        out_records.append(rec)
        lines.append(line)
    print("\n".join(lines))
    for name, q in rows:
        print()
        print(format_quality_report(q, label=name), end="")
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps(out_records, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
    return EXIT_OK


@dataclasses.dataclass
class _Scored:
    utt_id: str
    ref_text: str
    greedy_text: str
    corrected_text: str


def cmd_correct(args) -> int:
    config = _config(args)
    endpoint = _endpoint(args.mock, config)
    entries = _read_all([args.manifest])
    groups: dict[Lang, list] = defaultdict(list)
    for e in entries:
        lang = Lang(args.lang) if args.lang else e.lang
        if lang not in (Lang.ZH, Lang.EN):
            raise CommandError(f"{e.utt_id}: no prompt for lang {lang}; pass --lang ZH or EN")
        if e.greedy_text is None:
            raise CommandError(f"{e.utt_id}: no greedy_text")
        groups[lang].append(e)
    corrected: dict[str, object] = {}
    for lang, group in groups.items():
        batches = make_batches([e.utt_id for e in group], [e.greedy_text for e in group],
                               [e.duration_s for e in group], config.batch_size)
        results = correct_batches(endpoint, load_template(lang), batches, config.retry, config.parallelism)
        for batch, result in zip(batches, results):
            if isinstance(result, BatchDropped):
                for u in batch.utt_ids:
                    corrected[u] = None
            else:
                corrected.update(zip(batch.utt_ids, result))
    out = []
    for e in entries:
        c = corrected[e.utt_id]
        if c is None:
            out.append(dataclasses.replace(e, extra={**e.extra, "outcome": "batch_dropped"}))
        else:
            out.append(dataclasses.replace(e, corrected_text=c))
    write_manifest(Manifest(out, name="corrected"), args.out)
    dropped = sum(1 for v in corrected.values() if v is None)
    logger.info("corrected %d utterances, %d in dropped batches", len(out) - dropped, dropped)
    return EXIT_OK


def cmd_filter(args) -> int:
    config = _config(args)
    entries = [e for e in _read_all([args.manifest]) if e.corrected_text is not None]
    kept, dropped, _ = apply_filter(entries, config.filter)
    kept_ids = {e.utt_id for e in kept}
    by_id = {e.utt_id: e for e in kept + dropped}
    write_manifest(Manifest([by_id[e.utt_id] for e in entries], name="decisions"), args.out)
    if args.kept:
        write_manifest(Manifest(kept, name="kept"), args.kept)
    logger.info("kept %d of %d utterances at threshold %g", len(kept_ids), len(entries),
                config.filter.threshold)
    return EXIT_OK


def cmd_balance(args) -> int:
    entries = [e for e in _read_all(args.manifests) if e.kept is not False]
    for e in entries:
        if e.hypo_mer is None:
            raise CommandError(f"{e.utt_id}: balance needs filtered entries (hypo_mer missing)")
    buckets = partition_by_lang(entries)
    if not (buckets[Lang.ZH] and buckets[Lang.EN]):
        # same rule as run_iteration: trimming against an absent language would drop everything
        logger.warning("balancing skipped: need both ZH and EN entries")
        zh, en = buckets[Lang.ZH], buckets[Lang.EN]
    else:
        zh, en = balance_durations(buckets[Lang.ZH], buckets[Lang.EN])
    write_manifest(Manifest(zh + en, name="balanced"), args.out)
    return EXIT_OK


def _write_atomic_dir(target: Path, files: dict[str, str | bytes]) -> None:
    tmp = target.with_name(f".{target.name}.tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    try:
        tmp.mkdir(parents=True)
        for name, content in files.items():
            if isinstance(content, bytes):
                (tmp / name).write_bytes(content)
            else:
                with (tmp / name).open("w", encoding="utf-8", newline="\n") as fh:
                    fh.write(content)
        if target.exists():
            shutil.rmtree(target)
        tmp.rename(target)
    finally:
        if tmp.exists():
            shutil.rmtree(tmp)


def cmd_iterate(args) -> int:
    config = _config(args)
    if args.iteration is not None:
        config = dataclasses.replace(config, iteration_index=args.iteration)
    entries = _read_all(args.manifests)
    buckets = partition_by_lang(entries)
    if buckets[Lang.CS]:
        raise CommandError(f"{buckets[Lang.CS][0].utt_id}: CS entries cannot be pseudo-labelled")
    endpoint = _endpoint(args.mock, config)
    hyp = {lang: Manifest(buckets[lang], name=str(lang)) for lang in config.languages}
    result = run_iteration(hyp, config, endpoint)
    out_dir = Path(args.out) / f"iter_{config.iteration_index}"
    table = report([result.stats])
    _write_atomic_dir(out_dir, {
        "train.manifest": dumps_manifest(result.train_manifest),
        "decisions.manifest": dumps_manifest(result.decisions_manifest),
        "stats.txt": table,
        "stats.json": stats_json([result.stats]),
        "stats.csv": stats_csv([result.stats]),
    })
    print(table, end="")
    logger.info("wrote %s", out_dir)
    return EXIT_OK


def _write_summary(out: Path, stats_list, stem: str) -> str:
    from .plots import plot_iteration_stats

    out.mkdir(parents=True, exist_ok=True)
    table = report(stats_list)
    (out / f"{stem}.txt").write_text(table, encoding="utf-8")
    (out / f"{stem}.json").write_text(stats_json(stats_list), encoding="utf-8")
    (out / f"{stem}.csv").write_text(stats_csv(stats_list), encoding="utf-8")
    plot_iteration_stats(stats_list, out / f"{stem}.png")
    return table


def cmd_simulate(args) -> int:
    from .sim import iter_simulation, load_scenario

    scenario = load_scenario(args.scenario)
    if args.seed is not None:
        scenario = dataclasses.replace(
            scenario, seed=args.seed, config=dataclasses.replace(scenario.config, rng_seed=args.seed)
        )
    if args.iterations is not None:
        if args.iterations < 1:
            raise CommandError("iterations must be >= 1")
        # extra iterations repeat the last configured error rate
        rates = scenario.error_rates
        rates = rates[: args.iterations] + rates[-1:] * (args.iterations - len(rates))
        scenario = dataclasses.replace(scenario, error_rates=rates)
    out = Path(args.out)
    stats_list = []
    for result in iter_simulation(scenario):
        stats_list.append(result.stats)
        files = {
            "stats.txt": report([result.stats]),
            "stats.json": stats_json([result.stats]),
        }
        if args.write_manifests:
            files["train.manifest"] = dumps_manifest(result.train_manifest)
            files["decisions.manifest"] = dumps_manifest(result.decisions_manifest)
        _write_atomic_dir(out / f"iter_{result.stats.iteration_index}", files)
    print(_write_summary(out, stats_list, "summary"), end="")
    return EXIT_OK


def cmd_report(args) -> int:
    stats_list = []
    for path in args.stats:
        try:
            stats_list.extend(read_stats(path))
        except (json.JSONDecodeError, TypeError) as exc:
            raise CommandError(f"{path}: not a stats file ({exc})") from None
    if args.out:
        print(_write_summary(Path(args.out), stats_list, "report"), end="")
    else:
        print(report(stats_list), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="llmfilter",
        description="LLM-corrected pseudo-label filtering for noisy student training.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-q", "--quiet", action="store_true", help="only log warnings and errors")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, *, config=True, mock=False, threshold=False, batch=False, lang=False, seed=False):
        if config:
            p.add_argument("--config", help="YAML config file")
        if mock:
            p.add_argument("--mock", metavar="echo|scripted:FILE|failing:K|malformed",
                           help="use an offline mock endpoint instead of HTTP")
        if threshold:
            p.add_argument("--threshold", type=float, help="Hypo-MER threshold (default 0.1)")
        if batch:
            p.add_argument("--batch-size", type=int, help="hypotheses per LLM request (default 40)")
        if lang:
            p.add_argument("--lang", choices=["ZH", "EN"], help="restrict to / force one language")
        if seed:
            p.add_argument("--seed", type=int, help="random seed")

    p = sub.add_parser("score", help="error rates and correction quality of hypotheses")
    p.add_argument("ref", help="reference manifest (text field)")
    p.add_argument("hyp", help="hypothesis manifest (greedy_text / corrected_text)")
    p.add_argument("--mode", default="MER", type=str.upper, choices=[m.value for m in Mode])
    p.add_argument("--out", help="write machine-readable results (JSON)")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("correct", help="LLM correction stage only")
    p.add_argument("manifest")
    p.add_argument("--out", required=True, help="output manifest")
    common(p, mock=True, batch=True, lang=True)
    p.set_defaults(func=cmd_correct)

    p = sub.add_parser("filter", help="compute Hypo-MER and keep/drop decisions")
    p.add_argument("manifest")
    p.add_argument("--out", required=True, help="decisions manifest")
    p.add_argument("--kept", help="also write kept entries to this manifest")
    common(p, threshold=True)
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("balance", help="equalize ZH/EN durations of kept entries")
    p.add_argument("manifests", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_balance)

    p = sub.add_parser("iterate", help="run one full data iteration")
    p.add_argument("manifests", nargs="+", help="greedy-hypothesis manifests")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--iteration", type=int, help="iteration index (overrides config)")
    common(p, mock=True, threshold=True, batch=True, lang=True, seed=True)
    p.set_defaults(func=cmd_iterate)

    p = sub.add_parser("simulate", help="offline simulation of several iterations")
    p.add_argument("scenario", nargs="?", help="scenario YAML (default: bundled scenario)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--iterations", type=int, help="override number of iterations")
    p.add_argument("--write-manifests", action="store_true", help="also write per-iteration manifests")
    common(p, config=False, seed=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("report", help="render stats files as a table and figure")
    p.add_argument("stats", nargs="+", help="stats.json files")
    p.add_argument("--out", help="directory for report.{txt,json,csv,png}")
    p.set_defaults(func=cmd_report)
    return parser


def _setup_logging(quiet: bool) -> None:
    # replace the handler from an earlier main() call so repeated in-process
    # invocations neither duplicate lines nor write to a stale stderr
    for handler in [h for h in logger.handlers if getattr(h, "_llmfilter_cli", False)]:
        logger.removeHandler(handler)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    handler._llmfilter_cli = True
    logger.addHandler(handler)
    logger.setLevel(logging.WARNING if quiet else logging.INFO)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging(args.quiet)
    try:
        return args.func(args)
    except CommandError as exc:
        logger.error("%s", exc)
        return exc.exit_code
    except EndpointConfigError as exc:
        logger.error("endpoint error: %s", exc)
        return EXIT_ENDPOINT
    except OSError as exc:
        logger.error("I/O error: %s", exc)
        return EXIT_IO
    except (ManifestError, ConfigError, ValueError) as exc:
        logger.error("invalid input: %s", exc)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
