import json

import numpy as np
import pytest

from biasclf.data import gen_synthetic, load_builtin_digits
from biasclf.metrics import (
    EvalReport,
    accuracy,
    accuracy_table,
    attack_table,
    correctly_classified,
    l0_budgets,
    linf_budgets,
    r1_rate,
    r2_rate,
    random_rate_table,
)
from biasclf.net import Dense, Network, make_mlp
from biasclf.randomized import estimate_random_rate
from biasclf.train import TrainConfig, train


def constant_net(n, m, winner=0):
    b = np.zeros(m)
    b[winner] = 1.0
    return Network([Dense(np.zeros((m, n)), b)], (n,), m)


@pytest.fixture(scope="module")
def digits_net():
    ds = load_builtin_digits("train", seed=0)
    net = make_mlp((64,), [48, 24], 10, seed=1)
    train(net, ds, TrainConfig(epochs=10, mode="normal", seed=2))
    return net, load_builtin_digits("test", seed=0)


class TestAccuracy:
    def test_constant_on_balanced_set(self):
        x = np.random.default_rng(0).uniform(0, 1, (100, 4))
        y = np.tile(np.arange(10), 10)
        from biasclf.data import LabeledDataset

        ds = LabeledDataset(x, y, "balanced", 10)
        assert accuracy(constant_net(4, 10), ds, "full") == pytest.approx(0.10)

    def test_empty_rejected(self):
        from biasclf.data import LabeledDataset

        ds = LabeledDataset(np.zeros((0, 3)), np.zeros(0, dtype=int), "e", 2)
        with pytest.raises(ValueError):
            accuracy(constant_net(3, 2), ds)

    def test_full_vs_bias_gap_reported(self, digits_net):
        net, test = digits_net
        full = accuracy(net, test, "full")
        bias = accuracy(net, test, "bias")
        w = accuracy(net, test, "w")
        assert full >= 0.9      # normally trained digits baseline
        assert 0 <= bias <= 1 and 0 <= w <= 1

    def test_correct_subset_is_correct(self, digits_net):
        net, test = digits_net
        sub = correctly_classified(net, test, "full")
        assert accuracy(net, sub, "full") == 1.0


class TestRandomRates:
    def test_r1_zero_pixels(self, digits_net):
        net, test = digits_net
        assert r1_rate(net, test.take(100), pixels=0, trials=2, seed=1).estimate == 0.0

    def test_r2_zero_amplitude(self, digits_net):
        net, test = digits_net
        assert r2_rate(net, test.take(100), amplitude=0.0, trials=2, seed=1).estimate == 0.0

    def test_r1_monotone_in_pixels(self, digits_net):
        net, test = digits_net
        rates = [r1_rate(net, test, pixels=p, trials=3, seed=3).estimate for p in (2, 8, 24, 48)]
        assert rates == sorted(rates)

    def test_r2_matches_random_rate_estimator(self, digits_net):
        # same distribution, independent implementations
        net, test = digits_net
        sub = correctly_classified(net, test, "bias")
        a = r2_rate(net, test, amplitude=0.15, trials=4, seed=5, classifier="bias")
        b = estimate_random_rate(net, 0.15, sub.inputs, num_directions=4, seed=17)
        assert abs(a.estimate - b.estimate) <= a.ci95 + b.ci95

    def test_seed_determinism(self, digits_net):
        net, test = digits_net
        a = r1_rate(net, test, pixels=10, trials=2, seed=9)
        b = r1_rate(net, test, pixels=10, trials=2, seed=9)
        assert a == b

    def test_constant_classifier_never_flips(self):
        ds = gen_synthetic("blobs", 6, 2, 100, seed=1)
        net = constant_net(6, 2)
        # denominator: only samples the constant classifier labels correctly
        r = r2_rate(net, ds, amplitude=0.3, trials=3, seed=2, classifier="full")
        assert r.estimate == 0.0


class TestBudgets:
    def test_linf_grid(self):
        grid = linf_budgets()
        assert [g[0] for g in grid] == ["1-1", "1-2", "1-3"]
        assert [g[1] for g in grid] == pytest.approx([0.1, 0.2, 0.3])
        assert [g[3] for g in grid] == [10, 20, 30]

    def test_l0_grid_scales_with_n(self):
        monster = l0_budgets(784)
        assert [b for _, b in monster] == [40, 60, 80]
        small = l0_budgets(64)
        assert [b for _, b in small] == [3, 5, 7]
        assert all(b >= 1 for _, b in l0_budgets(4))


class TestReports:
    def test_report_roundtrip_and_csv(self):
        from biasclf.randomized import RateEstimate

        rep = EvalReport("bias", "toy", 0.9, seed=3, config={"x": 1})
        rep.add_row("pgd", "1-1", RateEstimate.from_counts(3, 100))
        doc = json.loads(rep.to_json())
        assert doc["classifier_id"] == "bias" and doc["rows"][0]["attack"] == "pgd"
        lines = rep.to_csv().strip().splitlines()
        assert lines[0].startswith("classifier_id")
        assert len(lines) == 2

    def test_file_stem_embeds_hash_and_seed(self):
        rep = EvalReport("full", "toy", 0.5, seed=11, config={"a": 2})
        stem = rep.file_stem()
        assert stem.endswith("_s11") and len(stem.split("_")) == 3

    def test_accuracy_table_shape(self, digits_net):
        net, test = digits_net
        rep = accuracy_table({"normal": net}, test.take(200))
        assert len(rep.rows) == 3
        rules = {r["attack"] for r in rep.rows}
        assert rules == {"accuracy[w]", "accuracy[bias]", "accuracy[full]"}

    def test_attack_table_deterministic(self, digits_net):
        net, test = digits_net
        a = attack_table(net, test.take(40), "full", seed=5, include_l0=False)
        b = attack_table(net, test.take(40), "full", seed=5, include_l0=False)
        assert a.to_json() == b.to_json()
        assert [r["budget"] for r in a.rows] == ["1-1", "1-2", "1-3"]

    def test_empty_grid_accuracy_only(self, digits_net):
        net, test = digits_net
        rep = attack_table(net, test.take(30), "full", include_linf=False, include_l0=False)
        assert rep.rows == [] and 0 <= rep.accuracy <= 1

    def test_random_rate_table(self, digits_net):
        net, test = digits_net
        rep = random_rate_table(net, test.take(150), seed=2, trials=2)
        assert [r["attack"] for r in rep.rows] == ["R1", "R2"]
        assert all(0 <= r["rate"] <= 1 and r["ci"] > 0 for r in rep.rows)
