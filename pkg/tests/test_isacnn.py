import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from isaclab import metrics
from isaclab.isacnn import (Adam, TrainConfig, build_fcnn, build_isacnn, build_network,
                            loss, loss_grad_sigma, predict, predict_batch, train)
from isaclab.isacnn.checkpoint import load_checkpoint, save_checkpoint
from isaclab.isacnn.layers import BatchNorm, Conv1D, Dense, ReLU, Sigmoid
from isaclab.isacnn.network import lambda_backward, lambda_forward
from isaclab.scene import SystemConfig, build_features, generate_dataset

from conftest import DESK, random_scene


def fd_layer(layer, x, h=1e-6):
    """Check input and parameter gradients of ``sum(c * layer(x))``."""
    rng = np.random.default_rng(0)
    c = rng.standard_normal(layer.forward(x, train=True, update_stats=False).shape)

    def f():
        return float(np.sum(c * layer.forward(x, train=True, update_stats=False)))

    f()
    gx = layer.backward(c)
    worst = 0.0
    targets = [("x", x)] + [(k, v) for k, v in layer.params.items()]
    grads = {"x": gx, **layer.grads}
    for name, arr in targets:
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            up = f()
            arr[idx] = old - h
            dn = f()
            arr[idx] = old
            fd = (up - dn) / (2 * h)
            an = grads[name][idx]
            worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-7))
    return worst


class TestLayers:
    @pytest.mark.parametrize("make,shape", [
        (lambda r: Conv1D(2, 3, 5, r), (4, 2, 9)),
        (lambda r: Conv1D(1, 2, 3, r), (3, 1, 6)),
        (lambda r: Dense(5, 3, r), (4, 5)),
        (lambda r: BatchNorm((2, 5)), (6, 2, 5)),
        (lambda r: BatchNorm(4), (5, 4)),
        (lambda r: Sigmoid(), (3, 4)),
    ])
    def test_finite_differences(self, make, shape):
        rng = np.random.default_rng(1)
        layer = make(rng)
        if "gamma" in layer.params:
            layer.params["gamma"] = rng.uniform(0.5, 2, layer.params["gamma"].shape)
            layer.params["beta"] = rng.standard_normal(layer.params["beta"].shape)
        x = rng.standard_normal(shape)
        assert fd_layer(layer, x) < 1e-6

    def test_relu(self):
        r = ReLU()
        y = r.forward(np.array([[-1.0, 2.0]]), train=True)
        assert y.tolist() == [[0.0, 2.0]]
        assert r.backward(np.array([[5.0, 5.0]])).tolist() == [[0.0, 5.0]]

    def test_conv_same_padding_matches_numpy(self):
        rng = np.random.default_rng(2)
        conv = Conv1D(1, 1, 3, rng)
        x = rng.standard_normal((1, 1, 7))
        w = conv.params["weight"][0, 0]
        ref = np.correlate(np.pad(x[0, 0], 1), w, mode="valid")
        assert conv.forward(x)[0, 0] == pytest.approx(ref, rel=1e-12)

    def test_dense_outer_product(self):
        d = Dense(3, 2)
        x = np.array([[1.0, 2.0, 3.0]])
        g = np.array([[0.5, -1.0]])
        d.forward(x, train=True)
        d.backward(g)
        assert np.array_equal(d.grads["weight"], np.outer(x[0], g[0]))
        assert np.array_equal(d.grads["bias"], g[0])

    def test_sigmoid_extremes(self):
        y = Sigmoid().forward(np.array([[-1000.0, 0.0, 1000.0]]))
        assert y.tolist() == [[0.0, 0.5, 1.0]]

    def test_batchnorm_running_stats(self):
        bn = BatchNorm(2, momentum=0.9)
        x = np.array([[1.0, 2.0], [3.0, 6.0]])
        bn.forward(x, train=True)
        assert bn.buffers["mean"] == pytest.approx([0.2, 0.4])
        assert bn.buffers["var"] == pytest.approx([0.9 + 0.1, 0.9 + 0.4])
        y = bn.forward(x, train=True, update_stats=False)
        assert y.mean(axis=0) == pytest.approx([0, 0], abs=1e-12)

    def test_backward_without_forward(self):
        with pytest.raises(RuntimeError):
            Dense(2, 2).backward(np.ones((1, 2)))
        d = Dense(2, 2)
        d.forward(np.ones((1, 2)))  # inference mode keeps no cache
        with pytest.raises(RuntimeError):
            d.backward(np.ones((1, 2)))


class TestLambda:
    def test_hand_example(self):
        sigma, _ = lambda_forward([[0.2, 0.5, 0.3]], [0.5], 10.0)
        assert sigma[0] == pytest.approx([2.5, 1.5, 1.0], abs=1e-15)

    def test_ties_are_stable(self):
        sigma, cache = lambda_forward([[0.3, 0.3, 0.4]], [1.0], 1.0)
        assert cache[2][0].tolist() == [2, 0, 1]
        assert sigma[0] == pytest.approx([0.4, 0.3, 0.3])

    def test_backward_finite_differences(self):
        rng = np.random.default_rng(3)
        theta = rng.uniform(0.05, 1, (4, 5))
        eta = rng.uniform(0.05, 1, 4)
        budget = rng.uniform(1, 10, 4)
        c = rng.standard_normal((4, 5))
        _, cache = lambda_forward(theta, eta, budget)
        g_theta, g_eta = lambda_backward(c, cache)
        h = 1e-7
        for idx in np.ndindex(theta.shape):
            t1, t2 = theta.copy(), theta.copy()
            t1[idx] += h
            t2[idx] -= h
            fd = (np.sum(c * lambda_forward(t1, eta, budget)[0])
                  - np.sum(c * lambda_forward(t2, eta, budget)[0])) / (2 * h)
            assert fd == pytest.approx(g_theta[idx], rel=1e-6, abs=1e-8)
        for i in range(4):
            e1, e2 = eta.copy(), eta.copy()
            e1[i] += h
            e2[i] -= h
            fd = (np.sum(c * lambda_forward(theta, e1, budget)[0])
                  - np.sum(c * lambda_forward(theta, e2, budget)[0])) / (2 * h)
            assert fd == pytest.approx(g_eta[i], rel=1e-6)

    @settings(max_examples=200, deadline=None)
    @given(theta=st.lists(st.floats(1e-300, 1.0), min_size=1, max_size=8),
           eta=st.floats(0.0, 1.0), budget=st.floats(1e-6, 1e12))
    def test_feasible(self, theta, eta, budget):
        sigma, _ = lambda_forward([theta], [eta], budget)
        assert np.all(sigma >= 0)
        assert np.all(np.diff(sigma[0]) <= 0)
        assert sigma.sum() <= budget


class TestNetwork:
    def test_output_shape_and_feasibility(self):
        net = build_isacnn(12, 4, np.random.default_rng(0))
        X = np.random.default_rng(1).standard_normal((7, 12))
        out = net.forward(X, np.full(7, 5.0))
        assert out.sigma_pred.shape == (7, 4) and out.theta.shape == (7, 4)
        assert np.all(out.sigma_pred.sum(1) <= 5.0)
        assert np.all(np.diff(out.sigma_pred, axis=1) <= 0)

    def test_determinism(self):
        a = build_isacnn(12, 4, np.random.default_rng(5))
        b = build_isacnn(12, 4, np.random.default_rng(5))
        X = np.random.default_rng(1).standard_normal((3, 12))
        assert a.forward(X, 1.0).sigma_pred.tobytes() == b.forward(X, 1.0).sigma_pred.tobytes()

    def test_zero_upstream_gives_zero_grads(self):
        net = build_isacnn(12, 4, np.random.default_rng(0))
        X = np.random.default_rng(1).standard_normal((5, 12))
        out = net.forward(X, 1.0, mode="train")
        net.backward(np.zeros_like(out.sigma_pred))
        assert np.all(net.flat_grads() == 0)

    def test_backward_needs_train_forward(self):
        net = build_fcnn(12, 4)
        net.forward(np.ones((2, 12)), 1.0)
        with pytest.raises(RuntimeError):
            net.backward(np.ones((2, 4)))

    def test_architecture(self):
        net = build_isacnn(176, 16)
        kinds = [l.kind for l in net.trunk]
        assert kinds == ["batch_norm", "conv1d", "relu"] * 3 + ["flatten"]
        assert [(l.c_out, l.kernel) for l in net.trunk if l.kind == "conv1d"] == [(2, 5), (4, 3), (8, 3)]
        assert [l.kind for l in net.head_theta] == ["batch_norm", "fully_connected", "sigmoid"]
        assert net.head_theta[1].d_out == 16 and net.head_eta[1].d_out == 1
        fc = build_fcnn(176, 16)
        assert [l.d_out for l in fc.trunk if l.kind == "fully_connected"] == [128, 64, 32]

    def test_flat_round_trip(self):
        net = build_network("fcnn", 12, 4, np.random.default_rng(0))
        other = build_network("fcnn", 12, 4, np.random.default_rng(1))
        other.set_flat(net.get_flat())
        other.set_buffers(net.get_buffers())
        X = np.random.default_rng(2).standard_normal((3, 12))
        assert np.array_equal(net.forward(X, 1.0).sigma_pred, other.forward(X, 1.0).sigma_pred)
        with pytest.raises(ValueError):
            other.set_flat(np.zeros(3))
        with pytest.raises(ValueError):
            build_network("rnn", 12, 4)

    def test_input_length_checked(self):
        with pytest.raises(ValueError):
            build_isacnn(12, 4).forward(np.ones((1, 11)), 1.0)


@pytest.fixture(scope="module")
def scenes():
    return [random_scene(40, i) for i in range(4)]


class TestLoss:
    def test_corners(self, scenes):
        zero = np.zeros((4, 4))
        assert loss(zero, scenes, 0.0) == pytest.approx(-1.0, abs=1e-14)
        assert loss(zero, scenes, 1.0) == 0.0

    def test_single_sample_matches_metrics(self, scenes):
        s = np.full(4, scenes[0].sense_power / 5)
        assert loss(s, scenes[:1], 0.4) == pytest.approx(-metrics.wsnr(s, scenes[0], 0.4).wsnr,
                                                         rel=1e-12)

    def test_sensing_only_gradient_sign(self, scenes):
        s = np.full(4, scenes[0].sense_power / 5)
        assert np.all(loss_grad_sigma(s, scenes[0], 1.0) < 0)

    def test_stationary_at_interior_optimum(self):
        from isaclab.solvers import projected_gradient
        sc = random_scene(41, n_tx=2, wave_len=4)
        s = projected_gradient(sc, 0.7, steps=5000).values
        g = -loss_grad_sigma(s, sc, 0.7)
        if s.sum() < sc.sense_power * (1 - 1e-6):
            active = s > 0
            assert np.max(np.abs(g[active])) * sc.sense_power < 1e-5


def test_network_gradients_finite_differences():
    from isaclab.harness.verify import fd_check_network
    worst, n = fd_check_network(np.random.default_rng(17))
    assert n > 1000
    assert worst < 1e-4


class TestAdam:
    def test_first_step(self):
        adam = Adam([(2,)], lr=0.1)
        (p,) = adam.step([np.array([1.0, -1.0])], [np.array([0.5, -2.0])])
        # Bias correction makes the first step lr * sign(g) up to eps.
        assert p == pytest.approx([0.9, -0.9], abs=1e-7)

    def test_matches_reference_loop(self):
        rng = np.random.default_rng(0)
        gs = rng.standard_normal((5, 3))
        adam = Adam([(3,)], lr=0.01)
        p = np.zeros(3)
        m = v = np.zeros(3)
        q = np.zeros(3)
        for t, g in enumerate(gs, 1):
            (p,) = adam.step([p], [g])
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            q = q - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        assert p == pytest.approx(q, rel=1e-12)


@pytest.fixture(scope="module")
def tiny_data():
    return generate_dataset(SystemConfig(**DESK, seed=2), 200)


class TestTraining:
    def test_tiny_run_and_checkpoint(self, tiny_data, tmp_path):
        tc = TrainConfig(max_epochs=5, seed=3)
        net, run = train(tiny_data, tc)
        assert run.epoch == 5 and len(run.history) == 5
        best = [r[3] for r in run.log_rows()]
        assert all(b2 <= b1 for b1, b2 in zip(best, best[1:]))
        assert run.best_val == min(r[2] for r in run.history)
        save_checkpoint(tmp_path / "n.ckpt", net, run)
        net2, run2 = load_checkpoint(tmp_path / "n.ckpt")
        X = np.stack([build_features(s) for s in tiny_data.samples[:5]])
        assert net.forward(X, 1.0).sigma_pred.tobytes() == net2.forward(X, 1.0).sigma_pred.tobytes()
        assert run2.history == run.history and run2.adam.t == run.adam.t

    def test_inference_only_checkpoint(self, tmp_path):
        net = build_isacnn(12, 4)
        save_checkpoint(tmp_path / "a.ckpt", net)
        back, run = load_checkpoint(tmp_path / "a.ckpt")
        assert run is None and np.array_equal(back.get_flat(), net.get_flat())
        (tmp_path / "b.ckpt").write_bytes(b"NOTACKPT" + bytes(16))
        with pytest.raises(ValueError):
            load_checkpoint(tmp_path / "b.ckpt")

    @pytest.mark.parametrize("arch", ["isacnn", "fcnn"])
    def test_resume_is_bit_exact(self, tiny_data, tmp_path, arch):
        tc = TrainConfig(max_epochs=6, seed=4)
        _, full = train(tiny_data, tc, arch=arch)
        _, part = train(tiny_data, tc, arch=arch, max_new_epochs=3)
        save_checkpoint(tmp_path / "p.ckpt", part.best_network(), part)
        _, resumed = load_checkpoint(tmp_path / "p.ckpt")
        assert resumed.epoch == 3
        _, resumed = train(tiny_data, run=resumed)
        assert resumed.epoch == 6
        assert resumed.net.get_flat().tobytes() == full.net.get_flat().tobytes()
        assert resumed.history == full.history
        for a, b in zip(resumed.adam.m + resumed.adam.v, full.adam.m + full.adam.v):
            assert a.tobytes() == b.tobytes()

    def test_plateau_and_early_stop(self, tiny_data):
        tc = TrainConfig(max_epochs=200, lr_init=1e-9, plateau_patience=2,
                         early_stop_patience=4, min_delta=1.0, seed=1)
        _, run = train(tiny_data, tc)
        # Nothing improves by min_delta after the first epoch.
        assert run.stopped and run.epoch == 5
        assert run.history[-1][3] == pytest.approx(1e-9 * 0.33)

    def test_best_network_returned(self, tiny_data):
        _, run = train(tiny_data, TrainConfig(max_epochs=4, seed=2))
        best = run.best_network()
        va = tiny_data.train_val()[1]
        R = metrics.BatchRates(va)
        w = R.wsnr(predict_batch(best, va), tiny_data.config.alpha)
        assert -w.mean() == pytest.approx(run.best_val, rel=1e-12)

    def test_predict_pipeline(self, tiny_data):
        net = build_isacnn(tiny_data.config.feature_len, 4, np.random.default_rng(0))
        sc = tiny_data.samples[0]
        spec, S, beams, rates = predict(net, sc, 0.5)
        assert spec.total <= sc.sense_power
        assert rates.wsnr == pytest.approx(metrics.wsnr(spec, sc, 0.5).wsnr, abs=1e-12)
        assert beams.distortionless_residual(sc) < 1e-10
        assert S.power == pytest.approx(spec.total, rel=1e-10)
        with pytest.raises(ValueError):
            predict(build_isacnn(12, 4), sc, 0.5)

    def test_mixed_dimensions_rejected(self):
        a = generate_dataset(SystemConfig(**DESK), 5)
        b = generate_dataset(SystemConfig(**{**DESK, "n_rx": 3}), 5)
        with pytest.raises(ValueError):
            train(dataclasses.replace(a, samples=a.samples + b.samples), TrainConfig(max_epochs=1))


def test_lambda_all_zero_row():
    sigma, cache = lambda_forward([[0.0, 0.0, 0.0], [0.1, 0.0, 0.3]], [0.6, 1.0], 3.0)
    assert sigma[0] == pytest.approx([0.6, 0.6, 0.6])
    g_theta, g_eta = lambda_backward(np.ones((2, 3)), cache)
    assert np.all(g_theta[0] == 0) and np.all(np.isfinite(g_theta))
    assert g_eta[0] == pytest.approx(3.0)
