from __future__ import annotations

import time
from pathlib import Path

import pytest

from llmfilter.cli import main
from llmfilter.manifest import Lang, Manifest, ManifestEntry

FIXTURES = Path(__file__).parent / "fixtures"

_acceptance: dict[str, str] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    if report.when == "call" or report.outcome != "passed":
        _acceptance[name] = report.outcome.upper()


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_acceptance):
        terminalreporter.write_line(f"{_acceptance[name]:<7} {name}")


def entry(utt_id, lang=Lang.EN, duration=1.0, **kw) -> ManifestEntry:
    return ManifestEntry(utt_id=utt_id, audio_ref=f"/audio/{utt_id}.wav", duration_s=duration, lang=lang, **kw)


@pytest.fixture
def make_entry():
    return entry


@pytest.fixture
def small_manifest() -> Manifest:
    return Manifest(
        [
            entry("u1", Lang.ZH, 2.5, ref_text="打开地图", greedy_text="打开地图", source="ASL-2"),
            entry("u2", Lang.EN, 3.0, ref_text="nice to meet you", greedy_text="nice to meat you",
                  corrected_text="nice to meet you", hypo_mer=0.25, kept=False, source="LS860"),
            entry("u3", Lang.EN, 1.25, greedy_text="hello word", extra={"speaker": "spk7", "snr": 12.5}),
        ],
        name="small",
    )


@pytest.fixture(scope="session")
def default_simulation(tmp_path_factory):
    """Run the bundled default scenario once through the CLI; shared by several tests."""
    out = tmp_path_factory.mktemp("default_sim")
    start = time.perf_counter()
    code = main(["-q", "simulate", "--out", str(out)])
    elapsed = time.perf_counter() - start
    return out, code, elapsed
