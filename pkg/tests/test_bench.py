import pytest

from cclpol.bench import (BenchResult, LADDER, bench_interleaved, bench_native, bench_policy,
                          fit_overhead_model, format_table1, helper_counts, ladder_programs,
                          warm_path_counts)


def result(name, p50, nl, nu):
    return BenchResult(name, 1, p50, p50, p50, nl, nu)


def test_synthetic_fit_is_exact_ols():
    rows = [result("a", 80, 0, 0), result("b", 110, 1, 0), result("c", 120, 1, 1),
            result("d", 130, 2, 1)]
    fit = fit_overhead_model(rows)
    assert (fit.base_ns, fit.per_lookup_ns, fit.per_update_ns) == pytest.approx((85, 20, 10))
    assert fit.predict(1, 1) == pytest.approx(115)
    assert 0.9 < fit.r2 < 1.0


def test_baseline_subtracted():
    rows = [result("a", 180, 0, 0), result("b", 210, 1, 0), result("c", 220, 1, 1),
            result("d", 230, 2, 1)]
    assert fit_overhead_model(rows, baseline_p50=100).base_ns == pytest.approx(85)


def test_identical_results_give_zero_slopes():
    rows = [result("a", 100, 0, 0), result("b", 100, 1, 0), result("c", 100, 1, 1),
            result("d", 100, 2, 1)]
    fit = fit_overhead_model(rows)
    assert fit.per_lookup_ns == pytest.approx(0, abs=1e-9)
    assert fit.per_update_ns == pytest.approx(0, abs=1e-9)


def test_degenerate_design_rejected():
    rows = [result(str(i), 100 + i, 1, 0) for i in range(4)]
    with pytest.raises(ValueError):
        fit_overhead_model(rows)
    with pytest.raises(ValueError):
        fit_overhead_model(rows[:3])


def test_ladder_helper_counts():
    progs = {p.name: p for p in ladder_programs()}
    assert list(progs) == list(LADDER)
    assert helper_counts(progs["noop"]) == (0, 0)
    assert warm_path_counts(progs["noop"]) == (0, 0)
    assert warm_path_counts(progs["lookup_only"]) == (1, 0)
    assert warm_path_counts(progs["lookup_update"]) == (1, 1)
    assert warm_path_counts(progs["slo_enforcer"]) == (2, 1)


def test_small_real_run():
    native = bench_native(20_000)
    progs = {p.name: p for p in ladder_programs()}
    noop, lookup = (bench_policy(progs[n], 20_000) for n in ("noop", "lookup_only"))
    assert native.p50_ns < noop.p50_ns
    assert noop.p50_ns <= lookup.p50_ns
    assert native.p99_ns >= native.p50_ns
    text = format_table1(native, [noop, lookup, noop, lookup],
                         fit_overhead_model([result("a", 1, 0, 0), result("b", 2, 1, 0),
                                             result("c", 3, 1, 1), result("d", 4, 2, 1)]))
    assert "native baseline" in text and "R^2" in text


def test_interleaved_rounds():
    progs = {p.name: p for p in ladder_programs()}
    native, rows = bench_interleaved([progs["noop"], progs["slo_enforcer"]], calls=4000, rounds=4)
    assert native.calls == rows[0].calls == 4000
    assert [r.policy_name for r in rows] == ["noop", "slo_enforcer"]
    assert rows[1].n_lookup == 2 and rows[1].p50_ns > native.p50_ns
