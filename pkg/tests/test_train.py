import math

import numpy as np
import pytest

import oracles
from longtail_lab.data import Dataset, LongTailSpec, generate, partition_by_count
from longtail_lab.losses import LossKind, LossSpec, compute_loss
from longtail_lab.model import CosineClassifier, forward, init_classifier
from longtail_lab.train import (
    TRACE_COLUMNS,
    ConfigError,
    DivergenceError,
    TraceLog,
    TrainConfig,
    evaluate,
    train,
)


def small_data(seed=3, C=6):
    spec = LongTailSpec(C, 150, 5, 5, 0.3, [(0, 1, 0.4)], 8, seed)
    return generate(spec)


def ce_spec(s=1.0):
    return LossSpec(kind=LossKind.CE, scale_s=s)


class TestConfig:
    @pytest.mark.parametrize("kw", [
        dict(epochs=0), dict(batch_size=0), dict(lr=-0.1), dict(momentum=1.0),
        dict(weight_decay=-1e-3), dict(seed=-1),
    ])
    def test_rejects(self, kw):
        with pytest.raises(ConfigError):
            TrainConfig(**kw)

    def test_dict_round_trip(self):
        cfg = TrainConfig(epochs=3, lr_decay_epochs=[1, 2], loss=ce_spec(4.0))
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg

    def test_unknown_field(self):
        with pytest.raises(ConfigError):
            TrainConfig.from_dict({"epochz": 3})

    def test_step_schedule(self):
        cfg = TrainConfig(lr=1.0, lr_decay_epochs=(2, 4), lr_decay_factor=0.5)
        assert [cfg.lr_at(e) for e in range(6)] == [1.0, 1.0, 0.5, 0.5, 0.25, 0.25]


class TestTrain:
    def test_lr_zero_keeps_weights(self):
        tr, _ = small_data()
        m0 = init_classifier(tr.feature_dim, tr.num_classes, seed=1)
        m1, log = train(tr, m0, TrainConfig(epochs=2, lr=0.0, batch_size=16))
        assert np.array_equal(m1.class_weights, m0.class_weights)
        assert len(log) == 2

    def test_input_model_untouched(self):
        tr, _ = small_data()
        m0 = init_classifier(tr.feature_dim, tr.num_classes, seed=1)
        before = m0.class_weights.copy()
        train(tr, m0, TrainConfig(epochs=1, lr=0.5, batch_size=16))
        assert np.array_equal(m0.class_weights, before)

    @pytest.mark.parametrize("hidden", [None, 7])
    @pytest.mark.parametrize("kind", [LossKind.CE, LossKind.LDAM, LossKind.FOCAL])
    def test_single_full_batch_step(self, hidden, kind):
        tr, _ = small_data()
        m0 = init_classifier(tr.feature_dim, tr.num_classes, hidden, seed=5)
        spec = LossSpec(kind=kind, scale_s=4.0)
        lr = 0.3
        cfg = TrainConfig(epochs=1, batch_size=len(tr), lr=lr, momentum=0.0,
                          weight_decay=0.0, loss=spec)
        m1, _ = train(tr, m0, cfg)
        for name, p0 in m0.parameters().items():
            def mean_loss(p, name=name):
                trial = m0.copy()
                getattr(trial, name)[...] = p
                return compute_loss(spec, forward(trial, tr.features), tr.labels, tr.counts).loss

            want = p0 - lr * oracles.central_diff(mean_loss, p0, 1e-5)
            got = getattr(m1, name)
            assert oracles.rel_err(got - p0, want - p0) < 1e-6

    def test_momentum_and_decay_two_steps(self):
        # hand-stepped: v1 = g0 + wd w0; w1 = w0 - lr v1; v2 = mu v1 + g1 + wd w1
        tr, _ = small_data()
        m0 = init_classifier(tr.feature_dim, tr.num_classes, seed=2)
        spec, lr, mu, wd = ce_spec(3.0), 0.2, 0.9, 0.01
        cfg = TrainConfig(epochs=2, batch_size=len(tr), lr=lr, momentum=mu,
                          weight_decay=wd, loss=spec)
        m2, _ = train(tr, m0, cfg)

        def grad(W):
            f = lambda p: compute_loss(spec, forward(CosineClassifier(p), tr.features),
                                       tr.labels, tr.counts).loss
            return oracles.central_diff(f, W, 1e-5)

        w0 = m0.class_weights
        v1 = grad(w0) + wd * w0
        w1 = w0 - lr * v1
        v2 = mu * v1 + grad(w1) + wd * w1
        w2 = w1 - lr * v2
        assert oracles.rel_err(m2.class_weights - w0, w2 - w0) < 1e-6

    def test_deterministic(self):
        tr, _ = small_data()
        m0 = init_classifier(tr.feature_dim, tr.num_classes, seed=1)
        cfg = TrainConfig(epochs=3, batch_size=32, lr=0.05)
        a, la = train(tr, m0, cfg)
        b, lb = train(tr, m0, cfg)
        assert a.class_weights.tobytes() == b.class_weights.tobytes()
        assert la.to_csv() == lb.to_csv()

    def test_seed_changes_shuffle(self):
        tr, _ = small_data()
        m0 = init_classifier(tr.feature_dim, tr.num_classes, seed=1)
        a, _ = train(tr, m0, TrainConfig(epochs=1, batch_size=32, lr=0.05, seed=0))
        b, _ = train(tr, m0, TrainConfig(epochs=1, batch_size=32, lr=0.05, seed=1))
        assert not np.array_equal(a.class_weights, b.class_weights)

    def test_trace_shape_and_sign(self):
        tr, _ = small_data()
        m0 = init_classifier(tr.feature_dim, tr.num_classes, seed=1)
        _, log = train(tr, m0, TrainConfig(epochs=4, batch_size=50, lr=0.05))
        assert len(log) == 4 and len(log.df_all) == 4
        for k in ("many", "medium", "few", "all"):
            assert len(log.adj[k]) == 4
            assert all(v >= 0 for v in log.adj[k])
        assert all(0 <= a <= 1 for a in log.acc)

    def test_ala_few_above_many_at_start(self):
        tr, _ = small_data()
        m0 = init_classifier(tr.feature_dim, tr.num_classes, seed=1)
        _, log = train(tr, m0, TrainConfig(epochs=1, batch_size=32, lr=0.01))
        assert log.adj["few"][0] > log.adj["many"][0]

    def test_ce_trace_adjustment_zero(self):
        tr, _ = small_data()
        m0 = init_classifier(tr.feature_dim, tr.num_classes, seed=1)
        _, log = train(tr, m0, TrainConfig(epochs=1, batch_size=32, loss=ce_spec()))
        assert log.adj["all"] == [0.0]

    def test_empty_subset_is_nan(self):
        tr, _ = small_data()
        part = partition_by_count(tr.counts, many_threshold=10_000)
        m0 = init_classifier(tr.feature_dim, tr.num_classes, seed=1)
        _, log = train(tr, m0, TrainConfig(epochs=1, batch_size=32), part)
        assert math.isnan(log.adj["many"][0])

    def test_separable_two_class_ce(self):
        rng = np.random.default_rng(0)
        X = np.vstack([rng.normal([3, 0.5], 0.4, (40, 2)), rng.normal([-3, 0.5], 0.4, (40, 2))])
        y = np.repeat([0, 1], 40)
        ds = Dataset(X, y, np.array([40, 40]), np.array([[1.0, 0.0], [-1.0, 0.0]]))
        m0 = init_classifier(2, 2, seed=4)
        cfg = TrainConfig(epochs=50, batch_size=16, lr=0.1, loss=ce_spec(10.0))
        _, log = train(ds, m0, cfg)
        assert max(log.acc) == 1.0

    def test_last_partial_batch_kept(self):
        # 61 samples, batch 60, lr 0: the epoch loss must average all 61 samples
        tr, _ = small_data()
        ds = Dataset(tr.features[:61], tr.labels[:61], tr.counts, tr.prototypes)
        m0 = init_classifier(ds.feature_dim, ds.num_classes, seed=1)
        cfg = TrainConfig(epochs=1, batch_size=60, lr=0.0, loss=ce_spec())
        _, log = train(ds, m0, cfg)
        logits = forward(m0, ds.features)
        want = np.mean([oracles.ce(logits[i], ds.labels[i], 1.0) for i in range(61)])
        assert log.loss[0] == pytest.approx(want, abs=1e-12)

    def test_dimension_mismatch(self):
        tr, _ = small_data()
        with pytest.raises(ConfigError):
            train(tr, init_classifier(tr.feature_dim + 1, tr.num_classes), TrainConfig(epochs=1))
        with pytest.raises(ConfigError):
            train(tr, init_classifier(tr.feature_dim, tr.num_classes + 1), TrainConfig(epochs=1))

    def test_batch_larger_than_data(self):
        tr, _ = small_data()
        with pytest.raises(ConfigError):
            train(tr, init_classifier(tr.feature_dim, tr.num_classes),
                  TrainConfig(epochs=1, batch_size=len(tr) + 1))

    def test_divergence_reports_position(self):
        tr, _ = small_data()
        m0 = init_classifier(tr.feature_dim, tr.num_classes, seed=1)
        cfg = TrainConfig(epochs=5, batch_size=32, lr=1e300, momentum=0.0, loss=ce_spec())
        with np.errstate(over="ignore", invalid="ignore"), pytest.raises(DivergenceError) as err:
            train(tr, m0, cfg)
        assert err.value.epoch == 0 and err.value.batch >= 0


class TestTraceCsv:
    def test_round_trip(self):
        tr, _ = small_data()
        m0 = init_classifier(tr.feature_dim, tr.num_classes, seed=1)
        _, log = train(tr, m0, TrainConfig(epochs=2, batch_size=32, lr=0.05))
        text = log.to_csv("config_hash=abc seed=0")
        assert text.startswith("# config_hash=abc seed=0\n")
        assert text.splitlines()[1] == ",".join(TRACE_COLUMNS)
        back = TraceLog.from_csv(text)
        assert back.loss == log.loss and back.adj == log.adj and back.df_all == log.df_all


class TestEvaluate:
    def test_aligned_model_is_perfect(self):
        spec = LongTailSpec(4, 30, 3, 6, 0.0, (), 5, 2)
        _, te = generate(spec)
        ev = evaluate(CosineClassifier(te.prototypes.copy()), te)
        assert np.array_equal(ev.predictions, te.labels)

    def test_uniform_logits(self):
        C = 5
        W = np.tile([1.0, 0.0], (C, 1))
        ds = Dataset(np.array([[1.0, 2.0], [0.0, 1.0]]), np.array([0, 3]), np.ones(C, int), W)
        ev = evaluate(CosineClassifier(W), ds)
        np.testing.assert_allclose(ev.target_probability, 1 / C, atol=1e-15)

    def test_matches_independent_argmax(self):
        _, te = small_data()
        m = init_classifier(te.feature_dim, te.num_classes, seed=8)
        ev = evaluate(m, te, LossSpec(scale_s=10.0))
        for i in range(len(te)):
            cos = oracles.cosine_logits(m.class_weights, te.features[i])
            assert ev.predictions[i] == int(np.argmax(cos))
            exps = [math.exp(10.0 * c) for c in cos]
            assert ev.target_probability[i] == pytest.approx(exps[te.labels[i]] / sum(exps), abs=1e-12)

    def test_dimension_mismatch(self):
        _, te = small_data()
        with pytest.raises(ConfigError):
            evaluate(init_classifier(te.feature_dim + 2, te.num_classes), te)
