import math

import pytest

from metasim.errors import DomainError
from metasim.harness import (
    MethodId,
    MethodOutcome,
    all_method_ids,
    analyze_dataset,
    apply_method,
    coverage,
    run_scenario,
)
from metasim.simgen import Design, ScenarioSpec
from metasim.tables import Measure, MetaDataset, TwoByTwoTable

DEMO = (
    TwoByTwoTable(12, 50, 8, 50),
    TwoByTwoTable(30, 120, 22, 120),
    TwoByTwoTable(7, 40, 11, 40),
)


def small_spec(**kw):
    base = dict(
        measure=Measure.OR,
        design=Design.EQUAL,
        n_per_arm=100,
        k=2,
        p0=0.7,
        i_squared=0.25,
        reps=8,
        seed=3,
    )
    base.update(kw)
    return ScenarioSpec(**base)


class TestMethodId:
    def test_parse_canonical_forms(self):
        assert MethodId.parse("NN-DL/WALD") == MethodId("NN-DL", "WALD")
        assert MethodId.parse("nn-eb/mhksj") == MethodId("NN-EB", "MHKSJ")
        assert MethodId.parse("BAYES-HN05") == MethodId("BAYES-HN05", "HPD")
        assert MethodId.parse("bayes-hn10/hpd") == MethodId("BAYES-HN10", "HPD")
        assert MethodId.parse("UM.FS/T") == MethodId("UM.FS", "T")
        assert MethodId.parse("PN-PL/NORMAL") == MethodId("PN-PL", "NORMAL")

    @pytest.mark.parametrize(
        "bad",
        ["", "NN-DL", "NN-DL/HPD", "BAYES-HN05/WALD", "UM.FS/HKSJ", "PN-PL/WALD", "XX/YY"],
    )
    def test_parse_rejects_unknown(self, bad):
        with pytest.raises(DomainError):
            MethodId.parse(bad)

    def test_str_roundtrip(self):
        for m in all_method_ids():
            assert MethodId.parse(str(m)) == m

    def test_registry_complete(self):
        ids = all_method_ids()
        assert len(ids) == 24
        assert len(set(map(str, ids))) == 24

    def test_measure_support(self):
        assert MethodId.parse("UM.FS/WALD").supports(Measure.OR)
        assert not MethodId.parse("UM.FS/WALD").supports(Measure.RR)
        assert MethodId.parse("PN-PL/T").supports(Measure.RR)
        assert not MethodId.parse("PN-PL/T").supports(Measure.OR)
        assert MethodId.parse("NN-DL/WALD").supports(Measure.RR)
        assert MethodId.parse("BAYES-HN05").supports(Measure.OR)


class TestApplyMethod:
    def test_nn_outcome_matches_module(self):
        out = apply_method(DEMO, Measure.OR, MethodId.parse("NN-DL/WALD"))
        assert out.converged
        assert out.lower < out.est_log < out.upper
        assert out.tau is not None and out.tau >= 0

    def test_pl_bounds_are_logged(self):
        out = apply_method(DEMO, Measure.RR, MethodId.parse("PN-PL/NORMAL"))
        assert out.converged
        # log-scale bounds bracket the log point estimate symmetrically
        assert out.upper - out.est_log == pytest.approx(out.est_log - out.lower, abs=1e-9)

    def test_measure_mismatch_is_recorded(self):
        out = apply_method(DEMO, Measure.RR, MethodId.parse("UM.FS/WALD"))
        assert not out.converged
        assert "measure" in out.note

    def test_domain_failure_is_recorded(self):
        single = (TwoByTwoTable(5, 10, 4, 10),)
        out = apply_method(single, Measure.OR, MethodId.parse("NN-DL/WALD"))
        assert not out.converged
        assert out.note != ""

    def test_bayes_single_study_works(self):
        single = (TwoByTwoTable(5, 10, 4, 10),)
        out = apply_method(single, Measure.OR, MethodId.parse("BAYES-HN05"))
        assert out.converged


class TestCoverage:
    def test_counts_converged_hits(self):
        outs = [
            MethodOutcome(0.0, -1.0, 1.0, 0.0, True),
            MethodOutcome(0.5, 0.2, 1.0, 0.0, True),
            MethodOutcome(None, None, None, None, False),
        ]
        assert coverage(outs, 0.0) == pytest.approx(0.5)

    def test_all_failed_raises(self):
        with pytest.raises(DomainError):
            coverage([MethodOutcome(None, None, None, None, False)])


class TestRunScenario:
    def test_stub_runner_full_coverage(self):
        def always_cover(tables, measure, method, level):
            return MethodOutcome(0.0, -math.inf, math.inf, 0.0, True)

        res = run_scenario(small_spec(), [MethodId.parse("NN-DL/WALD")], runner=always_cover)
        agg = res.methods["NN-DL/WALD"]
        assert agg.coverage == 1.0
        assert math.isinf(agg.mean_length)
        assert agg.nonconvergence_rate == 0.0
        assert agg.effective_reps == 8

    def test_stub_runner_all_failed(self):
        def never(tables, measure, method, level):
            return MethodOutcome(None, None, None, None, False)

        res = run_scenario(small_spec(), [MethodId.parse("NN-DL/WALD")], runner=never)
        agg = res.methods["NN-DL/WALD"]
        assert agg.effective_reps == 0
        assert agg.nonconvergence_rate == 1.0
        assert math.isnan(agg.coverage)

    def test_real_run_is_deterministic(self):
        mids = [MethodId.parse("NN-DL/WALD"), MethodId.parse("NN-DL/HKSJ")]
        a = run_scenario(small_spec(), mids)
        b = run_scenario(small_spec(), mids)
        assert a.methods == b.methods
        assert a.tau == b.tau

    def test_worker_count_invariance(self):
        mids = [MethodId.parse("NN-DL/WALD")]
        seq = run_scenario(small_spec(reps=12), mids, workers=1)
        par = run_scenario(small_spec(reps=12), mids, workers=3)
        assert seq.methods == par.methods

    def test_incompatible_method_rejected(self):
        with pytest.raises(DomainError):
            run_scenario(small_spec(), [MethodId.parse("PN-PL/NORMAL")])

    def test_empty_methods_rejected(self):
        with pytest.raises(DomainError):
            run_scenario(small_spec(), [])

    def test_bad_worker_count_rejected(self):
        with pytest.raises(DomainError):
            run_scenario(small_spec(), [MethodId.parse("NN-DL/WALD")], workers=0)


class TestAnalyzeDataset:
    def test_one_row_per_method(self):
        ds = MetaDataset(id="d", studies=DEMO)
        mids = [MethodId.parse(t) for t in ("NN-DL/WALD", "NN-EB/HKSJ", "BAYES-HN05")]
        rows = analyze_dataset(ds, Measure.OR, mids)
        assert [r.method for r in rows] == ["NN-DL", "NN-EB", "BAYES-HN05"]
        assert all(r.meta_id == "d" and r.k == 3 for r in rows)

    def test_baseline_ratio_is_one_for_dl(self):
        ds = MetaDataset(id="d", studies=DEMO)
        rows = analyze_dataset(ds, Measure.OR, [MethodId.parse("NN-DL/WALD")])
        assert rows[0].ratio_vs_dl == pytest.approx(1.0, abs=1e-12)
        assert rows[0].est_ratio == pytest.approx(math.exp(rows[0].est_log), abs=1e-12)

    def test_failed_method_row_is_inert(self):
        ds = MetaDataset(id="d", studies=DEMO)
        rows = analyze_dataset(ds, Measure.RR, [MethodId.parse("UM.FS/WALD")])
        r = rows[0]
        assert not r.converged
        assert r.est_log is None and r.ratio_vs_dl is None
        assert r.note != ""

    def test_single_study_dataset(self):
        ds = MetaDataset(id="solo", studies=(TwoByTwoTable(5, 10, 4, 10),))
        mids = [MethodId.parse("NN-DL/WALD"), MethodId.parse("BAYES-HN05")]
        rows = analyze_dataset(ds, Measure.OR, mids)
        assert not rows[0].converged
        assert rows[1].converged
        # no moment baseline exists with one study
        assert rows[1].ratio_vs_dl is None
