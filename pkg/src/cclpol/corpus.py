"""The verification corpus: seven safe and seven unsafe programs.

``corpus/manifest`` records each program's expected verdict. Running the
corpus verifies everything, compares with the manifest, and fuzzes every
accepted program under the checked interpreter.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

from ._data import DATA_DIR
from .isa import Hook, load_file
from .verifier import RejectClass, Verdict, VerifierConfig, verify
from .vm import execute_checked_fuzz

CORPUS_DIR = DATA_DIR / "corpus"
POLICY_DIR = DATA_DIR / "policies"


def corpus_path(rel: str) -> Path:
    return CORPUS_DIR / rel


@dataclass(frozen=True)
class CorpusEntry:
    path: Path
    expected: RejectClass | None  # None means ACCEPT
    hook: Hook
    description: str

    @property
    def name(self) -> str:
        return self.path.stem

    @property
    def expected_label(self) -> str:
        return "ACCEPT" if self.expected is None else f"REJECT:{self.expected.name}"


def corpus_manifest(manifest: Path | None = None) -> list[CorpusEntry]:
    manifest = manifest or CORPUS_DIR / "manifest"
    entries = []
    for line in manifest.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        rel, verdict, hook, desc = line.split(None, 3)
        expected = None if verdict == "ACCEPT" else RejectClass[verdict.split(":", 1)[1]]
        entries.append(CorpusEntry(manifest.parent / rel, expected, Hook(hook), desc))
    return entries


@dataclass
class EntryResult:
    entry: CorpusEntry
    verdict: Verdict | None
    faults: int | None = None
    error: str = ""

    @property
    def actual_label(self) -> str:
        if self.verdict is None:
            return "ERROR"
        if self.verdict.accepted:
            return "ACCEPT"
        return f"REJECT:{self.verdict.rejection_class.name}"

    @property
    def matches(self) -> bool:
        return (self.verdict is not None and self.actual_label == self.entry.expected_label
                and not self.faults)


@dataclass
class CorpusReport:
    results: list[EntryResult] = field(default_factory=list)
    trials: int = 0
    verify_s: float = 0.0
    fuzz_s: float = 0.0

    def _count(self, safe: bool) -> tuple[int, int]:
        rs = [r for r in self.results if (r.entry.expected is None) == safe]
        return sum(r.matches for r in rs), len(rs)

    @property
    def mismatches(self) -> list[EntryResult]:
        return [r for r in self.results if not r.matches]

    @property
    def total_faults(self) -> int:
        return sum(r.faults or 0 for r in self.results)

    @property
    def ok(self) -> bool:
        return not self.mismatches

    def summary(self) -> str:
        sa, sn = self._count(True)
        ua, un = self._count(False)
        return (f"{sa + ua}/{sn + un} match: {sa}/{sn} safe accepted, {ua}/{un} unsafe rejected; "
                f"{self.total_faults} checked-mode faults in {self.trials} trials per accepted "
                f"program")

    def lines(self) -> list[str]:
        out = []
        for r in self.results:
            mark = "ok  " if r.matches else "FAIL"
            extra = f"  faults={r.faults}" if r.faults is not None else ""
            ms = f"{r.verdict.elapsed_ms:6.2f} ms" if r.verdict is not None else "      --"
            out.append(f"{mark} {r.entry.name:<20} {r.entry.expected_label:<26} "
                       f"{r.actual_label:<26} {ms}{extra}")
            if r.error:
                out.append(f"     {r.error}")
        out.append(self.summary())
        return out


def run_corpus(config: VerifierConfig | None = None, trials: int = 10_000, seed: int = 0,
               entries: list[CorpusEntry] | None = None) -> CorpusReport:
    config = config or VerifierConfig()
    report = CorpusReport(trials=trials)
    for e in entries if entries is not None else corpus_manifest():
        t0 = time.perf_counter()
        try:
            prog = load_file(e.path)
        except (OSError, ValueError) as exc:
            report.results.append(EntryResult(e, None, error=str(exc)))
            continue
        v = verify(prog, config)
        t1 = time.perf_counter()
        report.verify_s += t1 - t0
        res = EntryResult(e, v)
        if prog.hook is not e.hook:
            res.error = f"manifest says hook {e.hook.value}, program declares {prog.hook.value}"
            res.verdict = None
        elif v.accepted and trials:
            res.faults = execute_checked_fuzz(prog, trials, seed, config)
            report.fuzz_s += time.perf_counter() - t1
        elif not v.accepted:
            res.error = v.message
        report.results.append(res)
    return report
