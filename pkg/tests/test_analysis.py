import math

import numpy as np
import pytest

from dagcd.analysis import (
    AnalysisRecord,
    ReportTable,
    cross_domain_matrix,
    emit_report,
    gap_by_rank,
    head_importance_report,
    parse_report,
    rank_histogram,
    spearman_report,
    train_size_curve,
    uncertainty_report,
)
from dagcd.detector import TrainConfig, evaluate, train
from dagcd.errors import DegenerateLabels, InvalidInput
from dagcd.toy import synth_attention_dataset


def rec(i, correct=True, entropy=0.5, msp=0.5, rank=1, gap=0.0, f1=1.0):
    return AnalysisRecord(str(i), correct, entropy, msp, rank, gap, f1)


class TestAnalysisRecord:
    def test_bounds(self):
        with pytest.raises(InvalidInput):
            rec(0, entropy=1.5)
        with pytest.raises(InvalidInput):
            rec(0, msp=0.0)
        with pytest.raises(InvalidInput):
            rec(0, rank=0)


class TestUncertaintyReport:
    def test_single_partition(self):
        t = uncertainty_report([rec(i, correct=True, entropy=0.2) for i in range(5)])
        assert t.columns["partition"] == ["correct"]
        assert t.columns["ne_mean"][0] == pytest.approx(0.2)

    def test_means_match_brute_force(self):
        rng = np.random.default_rng(0)
        records = [
            rec(i, correct=bool(i % 2), entropy=float(rng.uniform(0, 1)),
                msp=float(rng.uniform(0.1, 1)))
            for i in range(40)
        ]
        t = uncertainty_report(records)
        for row, flag in ((0, True), (1, False)):
            part = [r for r in records if r.correct == flag]
            name = "correct" if flag else "wrong"
            idx = t.columns["partition"].index(name)
            assert t.columns["ne_mean"][idx] == pytest.approx(
                sum(r.entropy for r in part) / len(part)
            )

    def test_reference_footnote_present(self):
        t = uncertainty_report([rec(0)])
        assert t.metadata["reference"]["ne_mean_wrong"] == 0.36


class TestRankHistogram:
    def test_all_rank_one(self):
        t = rank_histogram([rec(i, rank=1) for i in range(4)])
        assert t.columns["share"][0] == 1.0

    def test_counting(self):
        t = rank_histogram([rec(i, rank=r) for i, r in enumerate([2, 3, 4, 11])])
        shares = dict(zip(t.columns["bin"], t.columns["share"]))
        assert shares["2-4"] == pytest.approx(0.75)
        assert shares["11-30"] == pytest.approx(0.25)

    def test_shares_sum_to_one(self):
        rng = np.random.default_rng(1)
        t = rank_histogram([rec(i, rank=int(rng.integers(1, 100))) for i in range(50)])
        assert sum(t.columns["share"]) == pytest.approx(1.0, abs=1e-12)


class TestGapByRank:
    def test_single_record(self):
        t = gap_by_rank([rec(0, rank=3, gap=0.14)])
        means = dict(zip(t.columns["bin"], t.columns["gap_mean"]))
        assert means["2-4"] == pytest.approx(0.14)
        assert math.isnan(means["1"])

    def test_means_match_brute_force(self):
        records = [rec(i, rank=r, gap=g) for i, (r, g) in
                   enumerate([(2, 0.1), (3, 0.3), (40, 0.5), (50, 0.7)])]
        t = gap_by_rank(records)
        means = dict(zip(t.columns["bin"], t.columns["gap_mean"]))
        assert means["2-4"] == pytest.approx(0.2)
        assert means[">30"] == pytest.approx(0.6)


class TestSpearmanReport:
    def test_antitone(self):
        t = spearman_report([1.0, 0.8, 0.5, 0.2], [0.1, 0.2, 0.3, 0.4])
        assert t.columns["spearman"][0] == pytest.approx(-1.0)
        assert t.columns["p_value"][0] == 0.0

    def test_small_sample_flag(self):
        t = spearman_report([1, 2, 3], [3, 1, 2])
        assert t.columns["small_sample"][0] is True

    def test_p_value_reasonable(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=100)
        t = spearman_report(list(x), list(rng.normal(size=100)))
        assert 0.0 <= t.columns["p_value"][0] <= 1.0


class TestCrossDomain:
    def test_planted_separation(self):
        fams = {
            "A": synth_attention_dataset(100, "A", seed=0),
            "B": synth_attention_dataset(100, "B", seed=1),
        }
        t = cross_domain_matrix(fams, TrainConfig(seed=0))
        for col in ("auc_on_A", "auc_on_B"):
            assert all(v >= 0.95 for v in t.columns[col])
        # train-domain advantage on planted data
        for i, fam in enumerate(t.columns["train_family"]):
            assert t.columns[f"auc_on_{fam}"][i] >= t.columns["off_diagonal_mean"][i] - 1e-9

    def test_identical_families_consistent(self):
        fams = {
            "A1": synth_attention_dataset(80, "A", seed=0),
            "A2": synth_attention_dataset(80, "A", seed=0),
        }
        t = cross_domain_matrix(fams, TrainConfig(seed=0))
        assert t.columns["auc_on_A1"] == t.columns["auc_on_A2"]

    def test_needs_two_families(self):
        with pytest.raises(InvalidInput):
            cross_domain_matrix({"A": synth_attention_dataset(10, "A", seed=0)})

    def test_single_class_family(self):
        fams = {
            "A": synth_attention_dataset(20, "A", seed=0),
            "B": [e for e in synth_attention_dataset(20, "B", seed=0) if e.label == 1] * 2,
        }
        with pytest.raises(DegenerateLabels):
            cross_domain_matrix(fams)


class TestTrainSizeCurve:
    def test_curve_non_degrading(self):
        pool = synth_attention_dataset(200, "A", seed=0)
        eval_set = synth_attention_dataset(200, "A", seed=1)
        t = train_size_curve([20, 50, 100, 200], pool, eval_set, TrainConfig(seed=0))
        aucs = t.columns["auc"]
        assert all(b >= a - 0.02 for a, b in zip(aucs, aucs[1:]))

    def test_full_pool_matches_single_train(self):
        pool = synth_attention_dataset(60, "A", seed=0)
        eval_set = synth_attention_dataset(60, "A", seed=1)
        t = train_size_curve([60], pool, eval_set, TrainConfig(seed=0))
        pos = [e for e in pool if e.label == 1]
        neg = [e for e in pool if e.label == 0]
        det = train(pos[:30] + neg[:30], TrainConfig(seed=0))
        assert t.columns["auc"][0] == evaluate(det, eval_set)["auc"]

    def test_size_exceeds_pool(self):
        pool = synth_attention_dataset(20, "A", seed=0)
        with pytest.raises(InvalidInput):
            train_size_curve([50], pool, pool)


class TestHeadImportance:
    def test_designated_heads_rank_first(self):
        train_set = synth_attention_dataset(200, "A", seed=0, num_layers=2, num_heads=2)
        eval_set = synth_attention_dataset(200, "A", seed=1, num_layers=2, num_heads=2)
        det = train(train_set, TrainConfig(seed=0))
        t = head_importance_report(det, train_set, eval_set, ks=(1, 2), config=TrainConfig(seed=0))
        ranking = t.metadata["ranking"]
        # strong heads are the first half in layer-major order: (0,0), (0,1)
        top_two = {(ranking["layer"][0], ranking["head"][0]),
                   (ranking["layer"][1], ranking["head"][1])}
        assert top_two == {(0, 0), (0, 1)}

    def test_k_all_matches_full(self):
        train_set = synth_attention_dataset(100, "A", seed=0)
        eval_set = synth_attention_dataset(100, "A", seed=1)
        det = train(train_set, TrainConfig(seed=0))
        t = head_importance_report(det, train_set, eval_set, ks=(1,), config=TrainConfig(seed=0))
        k_all = t.columns["k"].index(len(det.head_order))
        assert t.columns["top_k_auc"][k_all] == pytest.approx(t.metadata["full_auc"], abs=1e-9)


class TestEmitReport:
    def table(self):
        return ReportTable("demo", {"a": [1, 2], "b,c": ["x,y", "plain"]}, {"seed": 0})

    def test_round_trip_csv(self, tmp_path):
        p = tmp_path / "r.csv"
        emit_report(self.table(), p, "csv")
        back = parse_report(p)
        assert back.columns == self.table().columns
        assert back.metadata == self.table().metadata

    def test_round_trip_json(self, tmp_path):
        p = tmp_path / "r.json"
        emit_report(self.table(), p, "json")
        back = parse_report(p)
        assert back.columns == self.table().columns

    def test_comma_quoted(self, tmp_path):
        p = tmp_path / "r.csv"
        emit_report(self.table(), p, "csv")
        assert '"x,y"' in p.read_text()

    def test_deterministic(self, tmp_path):
        p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
        emit_report(self.table(), p1, "csv")
        emit_report(self.table(), p2, "csv")
        assert p1.read_bytes() == p2.read_bytes()

    def test_unknown_format(self, tmp_path):
        with pytest.raises(InvalidInput):
            emit_report(self.table(), tmp_path / "r.xml", "xml")

    def test_rectangular_enforced(self):
        with pytest.raises(InvalidInput):
            ReportTable("bad", {"a": [1], "b": [1, 2]})
