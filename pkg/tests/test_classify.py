import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from isorobust import nn
from isorobust.attacks import PgdConfig
from isorobust.classify import (Architecture, ConstantClassifier, HalfspaceClassifier, NetworkClassifier,
                                TrainConfig, grad_input, init_network, load_classifier, loss_and_logit_grad,
                                loss_value, save_classifier, train, training_loss)
from isorobust.container import ModelFormatError
from isorobust.gaussian import RngStream
from isorobust.genmodel import make_synthetic
from isorobust.risk import estimate_adv_risk, estimate_risk


def random_net(seed, sizes=(4, 6, 5, 3), act="tanh"):
    gen = np.random.default_rng(seed)
    return NetworkClassifier(nn.random_stack(sizes, act, gen))


def central_diff(fn, x, h=1e-6):
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (fn(x + e) - fn(x - e)) / (2 * h)
    return g


class TestPredict:
    def test_halfspace_positive_side(self):
        assert HalfspaceClassifier([1.0, 0.0]).predict([2.0, 5.0]) == 0

    def test_halfspace_negative_side(self):
        assert HalfspaceClassifier([1.0, 0.0]).predict([-2.0, 5.0]) == 1

    def test_halfspace_boundary_is_class0(self):
        assert HalfspaceClassifier([1.0, 0.0], b=-1.0).predict([1.0, 3.0]) == 0

    def test_halfspace_zero_normal(self):
        with pytest.raises(ValueError):
            HalfspaceClassifier([0.0, 0.0])

    def test_constant(self):
        f = ConstantClassifier(2, 3, 4)
        X = np.random.default_rng(0).normal(size=(50, 4))
        assert np.all(f.predict(X) == 2)

    def test_constant_label_range(self):
        with pytest.raises(ValueError):
            ConstantClassifier(3, 3, 2)

    def test_zero_final_layer_ties_to_lowest(self):
        net = random_net(0)
        last = net.layers[-1]
        f = NetworkClassifier(net.layers[:-1] + (nn.Affine(np.zeros_like(last.weight), np.zeros(3), last.activation),))
        X = np.random.default_rng(1).normal(size=(20, 4))
        assert np.all(f.predict(X) == 0)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            HalfspaceClassifier([1.0, 0.0]).predict([1.0, 2.0, 3.0])
        with pytest.raises(ValueError):
            random_net(0).logits(np.zeros(3))

    def test_batch_matches_single(self):
        f = random_net(2)
        X = np.random.default_rng(3).normal(size=(10, 4))
        assert list(f.predict(X)) == [f.predict(x) for x in X]

    @given(arrays(float, 4, elements=st.floats(-5, 5)), st.floats(-100, 100))
    def test_argmax_shift_invariant(self, x, c):
        f = random_net(4)
        logits = f.logits(x)
        assert int(np.argmax(logits + c)) == f.predict(x)


class TestGradInput:
    @pytest.mark.parametrize("kind", ["cross-entropy", "cw-margin"])
    def test_halfspace_collinear(self, kind):
        w = np.array([0.6, -0.8, 2.0])
        f = HalfspaceClassifier(w, 0.3)
        g = grad_input(f, [0.1, 0.2, -0.4], 0, kind)
        cos = g @ w / (np.linalg.norm(g) * np.linalg.norm(w))
        assert abs(abs(cos) - 1) <= 1e-12

    @pytest.mark.parametrize("seed", range(5))
    @pytest.mark.parametrize("kind", ["cross-entropy", "cw-margin"])
    def test_finite_difference(self, seed, kind):
        f = random_net(seed)
        gen = np.random.default_rng(100 + seed)
        x = gen.normal(size=4)
        y = int(gen.integers(3))
        g = grad_input(f, x, y, kind)
        fd = central_diff(lambda v: loss_value(f, v, y, kind), x)
        assert np.linalg.norm(g - fd) <= 1e-4 * max(np.linalg.norm(fd), 1e-8)

    def test_batched_rows_match(self):
        f = random_net(7)
        X = np.random.default_rng(8).normal(size=(6, 4))
        G = grad_input(f, X, 1)
        for x, g in zip(X, G):
            assert np.allclose(grad_input(f, x, 1), g, rtol=0, atol=1e-14)

    def test_symmetric_net_zero_input(self):
        # both input coordinates enter identically, so the gradient coordinates are equal
        W1 = np.array([[1.0, 1.0], [0.5, 0.5], [-2.0, -2.0]])
        layers = (nn.Affine(W1, np.array([0.1, -0.2, 0.3]), "tanh"),
                  nn.Affine(np.array([[1.0, -1.0, 0.5], [0.2, 0.3, -0.4]]), np.zeros(2), "identity"))
        g = grad_input(NetworkClassifier(layers), np.zeros(2), 0)
        assert g[0] == g[1]

    def test_constant_gradient_zero(self):
        assert np.all(grad_input(ConstantClassifier(0, 2, 3), np.ones(3), 1) == 0)

    def test_unknown_loss(self):
        with pytest.raises(ValueError):
            loss_and_logit_grad(np.zeros((1, 2)), [0], "hinge")

    def test_cw_margin_sign(self):
        loss, _ = loss_and_logit_grad(np.array([[3.0, 1.0, 2.0]]), [0], "cw-margin")
        assert loss[0] == 1.0


class TestTraining:
    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(lr=0)
        with pytest.raises(ValueError):
            TrainConfig(method="trades")
        with pytest.raises(ValueError):
            TrainConfig(method="adv-train", eps_train=0)

    def test_architecture_parse(self):
        assert Architecture.parse("linear") == Architecture()
        assert Architecture.parse("mlp:16,8:tanh") == Architecture((16, 8), "tanh")
        with pytest.raises(ValueError):
            Architecture.parse("cnn:3")

    def test_zero_epochs_returns_init(self):
        m = make_synthetic("shifted-identity")
        f = train(Architecture((5,)), m, TrainConfig(epochs=0, seed=3))
        assert f.same_as(init_network(Architecture((5,)), 2, 2, 3))

    def test_deterministic(self):
        m = make_synthetic("shifted-identity")
        cfg = TrainConfig(epochs=3, train_size=300, seed=5)
        assert train(Architecture((4,)), m, cfg).same_as(train(Architecture((4,)), m, cfg))

    def test_erm_near_bayes_risk(self):
        # the Bayes risk for means at -e1 and +e1 is Phi(-1) = 0.1587
        m = make_synthetic("shifted-identity", c=1.0, d=2)
        f = train(Architecture(), m, TrainConfig(epochs=20, seed=0))
        est = estimate_risk(f, m, 20000, RngStream(99))
        assert est.value <= 0.1787

    def test_full_batch_loss_non_increasing(self):
        m = make_synthetic("shifted-identity", c=1.0, d=2)
        hist = []
        train(Architecture(), m, TrainConfig(lr=0.1, epochs=30, batch_size=0, train_size=500, seed=1), hist)
        assert all(b <= a + 1e-12 for a, b in zip(hist, hist[1:]))

    def test_history_matches_training_loss_at_init(self):
        m = make_synthetic("shifted-identity")
        cfg = TrainConfig(lr=0.1, epochs=1, batch_size=0, train_size=200, seed=2)
        hist = []
        train(Architecture(), m, cfg, hist)
        init = init_network(Architecture(), 2, 2, 2)
        assert hist[0] == pytest.approx(training_loss(init, m, cfg), rel=1e-12)

    def test_divergence_raises(self):
        from isorobust.classify import TrainingDiverged

        m = make_synthetic("scaled-identity", c=1e200, d=2, K=2)
        with pytest.raises(TrainingDiverged):
            with np.errstate(all="ignore"):
                train(Architecture((4,)), m, TrainConfig(epochs=2, train_size=50, seed=0))

    @pytest.mark.slow
    def test_adv_train_beats_erm(self):
        m = make_synthetic("shifted-identity", c=1.0, d=2)
        eps = 0.5
        wins = 0
        for seed in range(5):
            common = dict(epochs=10, train_size=1000, seed=seed, eps_train=eps, pgd_step=0.1, pgd_steps=10)
            erm = train(Architecture((8,)), m, TrainConfig(method="erm", **common))
            adv = train(Architecture((8,)), m, TrainConfig(method="adv-train", **common))
            pgd = PgdConfig(eps, 0.05, 100)
            r_erm = estimate_adv_risk(erm, m, eps, pgd, 2000, RngStream(1000 + seed)).value
            r_adv = estimate_adv_risk(adv, m, eps, pgd, 2000, RngStream(1000 + seed)).value
            wins += r_adv <= r_erm
        assert wins >= 4


class TestSerialization:
    def test_network_round_trip(self, tmp_path):
        f = random_net(11)
        save_classifier(f, tmp_path / "f.bin")
        g = load_classifier(tmp_path / "f.bin")
        assert g.same_as(f)
        X = np.random.default_rng(0).normal(size=(5, 4))
        assert np.array_equal(f.logits(X), g.logits(X))

    def test_trained_round_trip(self, tmp_path):
        m = make_synthetic("shifted-identity")
        f = train(Architecture((3,)), m, TrainConfig(epochs=2, train_size=100, seed=0))
        save_classifier(f, tmp_path / "t.bin")
        assert load_classifier(tmp_path / "t.bin").same_as(f)

    def test_halfspace_round_trip(self, tmp_path):
        f = HalfspaceClassifier([0.1, -0.7], 0.25)
        save_classifier(f, tmp_path / "h.bin")
        g = load_classifier(tmp_path / "h.bin")
        assert np.array_equal(g.w, f.w) and g.b == f.b

    def test_constant_round_trip(self, tmp_path):
        save_classifier(ConstantClassifier(1, 3, 2), tmp_path / "c.bin")
        g = load_classifier(tmp_path / "c.bin")
        assert (g.label, g.num_classes, g.input_dim) == (1, 3, 2)

    def test_wrong_magic(self, tmp_path):
        from isorobust.genmodel import save_model

        save_model(make_synthetic("shifted-identity"), tmp_path / "m.bin")
        with pytest.raises(ModelFormatError):
            load_classifier(tmp_path / "m.bin")
