from cclpol.corpus import CorpusEntry, corpus_manifest, corpus_path, run_corpus
from cclpol.isa import Hook, load_file
from cclpol.verifier import RejectClass, verify

from conftest import policy_path


def test_manifest_shape(manifest):
    assert len(manifest) == 14
    assert sum(e.expected is None for e in manifest) == 7
    rejects = {e.expected for e in manifest if e.expected is not None}
    assert len(rejects) == 7 and RejectClass.MALFORMED not in rejects
    assert all(e.path.is_file() for e in manifest)


def test_run_small():
    rep = run_corpus(trials=20)
    assert rep.ok and rep.total_faults == 0
    assert rep.summary().startswith("14/14 match: 7/7 safe accepted, 7/7 unsafe rejected")
    assert len(rep.lines()) == 14 + 7 + 1  # rows, rejection messages, summary


def test_removed_null_check_is_detected(tmp_path):
    src = corpus_path("safe/record_latency.cclpol").read_text()
    broken = src.replace("    jeq r0, 0, out              ; if (!st) return 0\n", "")
    assert broken != src
    path = tmp_path / "record_latency.cclpol"
    path.write_text(broken)
    entry = CorpusEntry(path, None, Hook.PROFILER, "null check removed")
    rep = run_corpus(trials=5, entries=[entry])
    assert not rep.ok
    assert rep.mismatches[0].actual_label == "REJECT:NULL_DEREF"


def test_hook_mismatch_reported():
    e = corpus_manifest()[0]
    wrong = CorpusEntry(e.path, e.expected, Hook.PROFILER, "")
    rep = run_corpus(trials=0, entries=[wrong])
    assert not rep.ok and "hook" in rep.results[0].error


def test_missing_file_reported(tmp_path):
    rep = run_corpus(trials=0, entries=[CorpusEntry(tmp_path / "gone.cclpol", None,
                                                    Hook.TUNER, "")])
    assert rep.results[0].actual_label == "ERROR" and not rep.ok


def test_bad_channels_passes_verifier():
    assert verify(load_file(policy_path("bad_channels"))).accepted


def test_shipped_policies_verify():
    for name in ("bad_channels", "force_ring", "net_byte_counter", "nvlink_ring_mid_v2",
                 "size_aware_adaptive"):
        assert verify(load_file(policy_path(name))).accepted, name
