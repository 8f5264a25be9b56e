import json
import math

import numpy as np
import pytest

from dphead import accountant
from dphead.data_io import ConfigError, FeatureDataset, _class_means, gen_synthetic
from dphead.grad_engine import LinearHead
from dphead.trainer import (
    PrivacyConfig,
    SweepGrid,
    TrainConfig,
    TrainingAborted,
    config_items,
    evaluate,
    format_config,
    init_head,
    metrics_jsonl,
    parse_key_values,
    random_chance,
    run_sweep,
    train,
    with_overrides,
)


@pytest.fixture(scope="module")
def small():
    return gen_synthetic(600, 8, 4, separation=4.0, noise_std=0.5, seed=2)


def nonprivate(**kw):
    base = TrainConfig(clip_norm=None, privacy=PrivacyConfig(enabled=False))
    return with_overrides(base, kw)


class TestInitHead:
    def test_zero(self):
        head = init_head(5, 3)
        assert np.linalg.norm(head.W) == 0.0
        assert head.b.tolist() == [-10.0] * 3

    def test_gaussian_zero_stddev_is_zero(self):
        a = init_head(5, 3, "gaussian", 0.0, seed=4)
        b = init_head(5, 3, "zero", seed=4)
        assert np.array_equal(a.W, b.W) and np.array_equal(a.b, b.b)

    def test_gaussian_stddev(self):
        head = init_head(100, 100, "gaussian", 0.05, seed=1)
        assert head.W.std() == pytest.approx(0.05, rel=0.05)
        assert abs(head.W.mean()) < 0.005


class TestEvaluate:
    def test_all_ties_pick_class_zero(self):
        ds = FeatureDataset(np.ones((10, 2)), np.array([0, 1, 0, 2, 0, 1, 1, 2, 0, 0]), 3)
        head = LinearHead(np.zeros((3, 2)), np.full(3, -10.0))
        assert evaluate(head, ds) == 0.5

    def test_centroid_head_noise_free(self):
        ds = gen_synthetic(300, 6, 5, separation=2.0, noise_std=0.0, seed=0)
        means = _class_means(6, 5, 2.0, np.random.default_rng(0))
        # w_c = mu_c, b_c = -|mu_c|^2 / 2 is the nearest-mean rule
        head = LinearHead(means, -0.5 * np.sum(means**2, axis=1))
        assert evaluate(head, ds) == 1.0

    def test_hand_built(self):
        ds = FeatureDataset(np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]), np.array([0, 0, 1]), 2)
        head = LinearHead(np.array([[2.0, 0.0], [0.0, 1.0]]), np.zeros(2))
        # logits: (2,0)->0, (0,1)->1, (2,1)->0 ; correct: yes, no, no
        assert evaluate(head, ds) == pytest.approx(1 / 3)


class TestTrain:
    def test_nonprivate_sgd_separates(self, small):
        cfg = nonprivate(lr=0.5, steps=100, **{"optimizer.kind": "sgd", "init.bias": 0.0})
        cfg = with_overrides(cfg, {"clip_norm": 1e12})
        result = train(cfg, small)
        assert len(result.metrics) == 100
        assert result.final_accuracy >= 0.99
        assert result.report is None

    def test_sigma_zero_matches_clipped_nonprivate(self, small):
        common = {"lr": 0.1, "steps": 20, "clip_norm": 0.5, "batch.mode": "shuffle",
                  "batch.size": 100, "optimizer.kind": "momentum", "seed": 9}
        clipped = train(nonprivate(**common), small)
        dp = train(with_overrides(TrainConfig(), {**common, "privacy.noise_multiplier": 0.0}),
                   small)
        assert dp.head.W.tobytes() == clipped.head.W.tobytes()
        assert metrics_jsonl(dp.metrics) == metrics_jsonl(clipped.metrics)
        assert dp.metrics[0].clipped_fraction > 0

    def test_single_step(self, small):
        cfg = with_overrides(TrainConfig(), {"single_step": True, "epochs": 5,
                                             "batch.mode": "poisson", "batch.q": 0.1})
        result = train(cfg, small)
        assert len(result.metrics) == 1
        assert result.metrics[0].batch_size == small.n
        assert result.report.steps == 1 and result.report.sampling_rate == 1.0

    def test_report_matches_execution(self, small):
        cfg = with_overrides(TrainConfig(), {"epochs": 2, "batch.mode": "shuffle",
                                             "batch.size": 150, "privacy.epsilon": 3.0,
                                             "privacy.delta": 1e-4})
        result = train(cfg, small)
        assert len(result.metrics) == result.report.steps == 8
        assert result.report.sampling_rate == 150 / 600
        assert result.report.epsilon <= 3.0
        assert [r.step for r in result.metrics] == list(range(1, 9))

    def test_poisson_training(self, small):
        cfg = with_overrides(TrainConfig(), {"steps": 10, "batch.mode": "poisson",
                                             "batch.q": 0.05, "privacy.delta": 1e-4,
                                             "lr": 0.01, "optimizer.kind": "adam"})
        result = train(cfg, small)
        assert len({r.batch_size for r in result.metrics}) > 1
        assert result.report.sampling_rate == 0.05

    def test_eval_cadence(self, small):
        cfg = with_overrides(TrainConfig(), {"epochs": 3, "batch.mode": "shuffle",
                                             "batch.size": 200, "privacy.delta": 1e-4})
        rows = train(cfg, small).metrics
        evaluated = [r.step for r in rows if r.eval_accuracy is not None]
        assert evaluated == [3, 6, 9]

    def test_metrics_fields(self, small):
        row = train(TrainConfig(single_step=True, privacy=PrivacyConfig(delta=1e-4)), small).metrics[0]
        assert 0.0 <= row.clipped_fraction <= 1.0
        assert row.loss > 0 and row.grad_norm > 0

    def test_deterministic(self, small):
        cfg = with_overrides(TrainConfig(), {"steps": 5, "batch.mode": "poisson", "batch.q": 0.2,
                                             "privacy.delta": 1e-4, "seed": 3})
        a, b = train(cfg, small), train(cfg, small)
        assert a.head.W.tobytes() == b.head.W.tobytes()
        assert metrics_jsonl(a.metrics) == metrics_jsonl(b.metrics)

    def test_grad_workers_do_not_change_result(self):
        ds = gen_synthetic(10_000, 8, 4, seed=1)
        cfg = with_overrides(TrainConfig(), {"steps": 3, "privacy.delta": 1e-5})
        a = train(cfg, ds)
        b = train(with_overrides(cfg, {"grad_workers": 4}), ds)
        assert a.head.W.tobytes() == b.head.W.tobytes()

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nan_aborts(self, small):
        cfg = nonprivate(lr=1e308, steps=5, **{"optimizer.kind": "sgd", "init.bias": 0.0})
        with pytest.raises(TrainingAborted) as info:
            train(with_overrides(cfg, {"clip_norm": None}),
                  FeatureDataset(small.features * 1e30, small.labels, small.k))
        assert info.value.metrics
        assert math.isnan(info.value.metrics[-1].loss) or not np.isfinite(
            info.value.metrics[-1].grad_norm)

    def test_privacy_requires_clip(self, small):
        with pytest.raises(ConfigError):
            train(with_overrides(TrainConfig(), {"clip_norm": None}), small)

    def test_unattainable_budget_propagates(self, small):
        cfg = with_overrides(TrainConfig(), {"steps": 500, "batch.mode": "full",
                                             "privacy.epsilon": 1e-4})
        with pytest.raises(accountant.BracketError):
            train(cfg, small)

    def test_zero_init_lr_invariance(self, small):
        accs = set()
        for lr in (1e-4, 1e-3, 1e-2, 1e-1):
            cfg = with_overrides(TrainConfig(), {"single_step": True, "lr": lr,
                                                 "privacy.noise_multiplier": 0.0,
                                                 "optimizer.kind": "adam"})
            accs.add(train(cfg, small).final_accuracy)
        assert len(accs) == 1


@pytest.fixture(scope="module")
def run():
    """Non-private logistic training on the s=4, noise_std=1, d=64, k=10 set."""
    ds = gen_synthetic(50_000, 64, 10, 4.0, 1.0, seed=7)
    cfg = nonprivate(lr=0.05, steps=300, **{"optimizer.kind": "adam", "init.bias": 0.0})
    means = _class_means(64, 10, 4.0, np.random.default_rng(7))
    nearest = np.argmin(((ds.features[:, None, :] - means[None]) ** 2).sum(-1), axis=1)
    return train(cfg, ds).final_accuracy, float(np.mean(nearest == ds.labels))


class TestNonPrivateOracle:
    def test_reaches_bayes_rate(self, run):
        accuracy, bayes = run
        assert accuracy >= bayes - 0.005

    @pytest.mark.xfail(strict=True, reason=(
        "the nearest-true-mean (Bayes) rule scores ~98.2% on this data: class means "
        "4*sqrt(2) apart under unit noise overlap, so 99% train accuracy is out of reach"))
    def test_ninety_nine_percent(self, run):
        assert run[0] >= 0.99


class TestConfig:
    def test_overrides_coerce(self):
        cfg = with_overrides(TrainConfig(), {"lr": "0.5", "optimizer.kind": "adam",
                                             "privacy.enabled": "false", "steps": "7",
                                             "clip_norm": "none"})
        assert cfg.lr == 0.5 and cfg.optimizer.kind == "adam"
        assert cfg.privacy.enabled is False and cfg.steps == 7 and cfg.clip_norm is None

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            with_overrides(TrainConfig(), {"optimizer.nope": "1"})
        with pytest.raises(ConfigError):
            with_overrides(TrainConfig(), {"bogus": "1"})

    def test_bad_value(self):
        with pytest.raises(ValueError):
            with_overrides(TrainConfig(), {"optimizer.kind": "lars"})
        with pytest.raises(ValueError):
            with_overrides(TrainConfig(), {"steps": "2.5"})

    def test_format_round_trip(self):
        cfg = with_overrides(TrainConfig(), {"lr": 0.123, "optimizer.kind": "lamb",
                                             "init.stddev": 1e-4, "batch.q": 0.3})
        again = with_overrides(TrainConfig(), parse_key_values(format_config(cfg)))
        assert again == cfg

    def test_parse_rejects_garbage(self):
        with pytest.raises(ConfigError, match="line 2"):
            parse_key_values("a=1\nnot a pair\n")


class TestSweep:
    def test_three_lrs(self, small):
        grid = SweepGrid([("lr", [1e-3, 1e-2, 1e-1])])
        base = TrainConfig(single_step=True, privacy=PrivacyConfig(delta=1e-4))
        result = run_sweep(grid, base, small)
        assert len(result.rows) == 3
        assert [r.axis_values["lr"] for r in result.rows] == [1e-3, 1e-2, 1e-1]
        assert all(r.status == "ok" for r in result.rows)

    def test_epsilon_axis_sigma_decreasing(self, small):
        eps = [0.25, 0.5, 1, 2, 4, 8, 10]
        grid = SweepGrid([("privacy.epsilon", eps)])
        base = TrainConfig(single_step=True, privacy=PrivacyConfig(delta=1e-5))
        sigmas = [r.sigma for r in run_sweep(grid, base, small).rows]
        assert len(sigmas) == 7
        assert all(a > b for a, b in zip(sigmas, sigmas[1:]))

    def test_repeats_and_seeds(self, small):
        grid = SweepGrid([("lr", [0.01, 0.1]), ("init.stddev", [0.0, 0.1])], repeats=3)
        base = TrainConfig(single_step=True, privacy=PrivacyConfig(delta=1e-4))
        result = run_sweep(grid, base, small, workers=3)
        assert len(result.rows) == len(grid) == 12
        assert len({r.seed for r in result.rows}) == 12
        summary = result.cell_summary()
        assert len(summary) == 4 and all(s["runs"] == 3 for s in summary)
        again = run_sweep(grid, base, small, workers=1)
        assert result.to_csv() == again.to_csv()

    def test_failed_cell_recorded(self, small):
        grid = SweepGrid([("privacy.epsilon", [1e-4, 1.0])])
        base = TrainConfig(steps=500, privacy=PrivacyConfig(delta=1e-4))
        rows = run_sweep(grid, base, small).rows
        assert rows[0].status == "failed" and "BracketError" in rows[0].error
        assert rows[1].status == "ok"

    def test_init_trend(self):
        ds = gen_synthetic(4000, 16, 5, 4.0, 1.0, seed=0)
        grid = SweepGrid([("init.stddev", [0.0, 1e-4, 1e-3, 1e-2, 1e-1])], repeats=2)
        base = with_overrides(TrainConfig(), {"single_step": True, "lr": 1e-3,
                                              "init.kind": "gaussian",
                                              "optimizer.kind": "adam",
                                              "privacy.epsilon": 1.0, "privacy.delta": 1e-5})
        means = [s["mean_accuracy"] for s in run_sweep(grid, base, ds).cell_summary()]
        assert means[0] - means[-1] > 0.3
        assert abs(means[-1] - random_chance(5)) < 0.1
        assert all(b <= a + 0.02 for a, b in zip(means, means[1:]))

    def test_grid_parse(self):
        grid = SweepGrid.parse("privacy.epsilon = 1, 2\nrepeats = 4\n# comment\n")
        assert grid.axes == [("privacy.epsilon", ["1", "2"])] and grid.repeats == 4

    def test_empty_grid(self):
        with pytest.raises(ConfigError):
            SweepGrid.parse("# nothing\n")

    def test_unknown_axis(self):
        with pytest.raises(ConfigError):
            SweepGrid.parse("learning_rate = 1\n")


def test_config_items_cover_every_section():
    keys = config_items(TrainConfig())
    assert {"optimizer.kind", "privacy.epsilon", "init.bias", "batch.mode",
            "schedule.kind", "lr", "seed"} <= set(keys)


def test_report_serializes(small):
    result = train(TrainConfig(single_step=True, privacy=PrivacyConfig(delta=1e-4)), small)
    doc = json.loads(result.report.to_json())
    assert doc["steps"] == 1 and doc["sigma"] == result.sigma
