import numpy as np
import pytest

from conftest import rel_err, unit_rows
from protoseg import encoder, trainer
from protoseg.clustering import Assignment
from protoseg.encoder import MlpEncoder, SgdConfig
from protoseg.errors import FormatError, InvalidShape, StaleCache
from protoseg.losses import LossWeights, loss_total


def param_fd(enc, f, h=1e-6):
    """Central differences of ``f(enc)`` w.r.t. every weight and bias entry."""
    out = []
    for arrs in (enc.weights, enc.biases):
        grads = []
        for a in arrs:
            g = np.zeros_like(a)
            for idx in np.ndindex(a.shape):
                old = a[idx]
                a[idx] = old + h
                fp = f(enc)
                a[idx] = old - h
                fm = f(enc)
                a[idx] = old
                g[idx] = (fp - fm) / (2 * h)
            grads.append(g)
        out.append(grads)
    return list(zip(*out))


def flat(grads):
    return np.concatenate([np.concatenate([w.ravel(), b.ravel()]) for w, b in grads])


class TestForward:
    def test_identity_network(self, rng):
        enc = MlpEncoder.from_params([np.eye(5)], [np.zeros(5)])
        x = rng.standard_normal((7, 5))
        np.testing.assert_allclose(enc(x), x / np.linalg.norm(x, axis=1, keepdims=True), atol=1e-15)

    def test_deterministic(self, rng):
        x = rng.standard_normal((10, 8))
        a = MlpEncoder([8, 64, 64, 16], seed=3)(x)
        b = MlpEncoder([8, 64, 64, 16], seed=3)(x)
        assert np.array_equal(a, b)

    def test_unit_rows(self, rng):
        out = MlpEncoder([8, 64, 64, 16], seed=1)(rng.standard_normal((50, 8)) * 5)
        np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-9)

    def test_shape_mismatch(self, rng):
        with pytest.raises(InvalidShape):
            MlpEncoder([4, 3], seed=0)(rng.standard_normal((2, 5)))

    def test_init_bound(self):
        enc = MlpEncoder([12, 30, 4], seed=0)
        for w in enc.weights:
            assert np.max(np.abs(w)) <= np.sqrt(3.0 / w.shape[0])
        assert all(np.all(b == 0) for b in enc.biases)


class TestBackward:
    def test_zero_upstream(self, rng):
        enc = MlpEncoder([6, 10, 4], seed=0)
        out, cache = enc.forward(rng.standard_normal((5, 6)))
        for dw, db in enc.backward(cache, np.zeros_like(out)):
            assert np.all(dw == 0) and np.all(db == 0)

    def test_linear_closed_form(self, rng):
        enc = MlpEncoder([5, 3], seed=2, normalize_output=False)
        x = rng.standard_normal((8, 5))
        g = rng.standard_normal((8, 3))
        _, cache = enc.forward(x)
        [(dw, db)] = enc.backward(cache, g)
        np.testing.assert_allclose(dw, x.T @ g, atol=1e-14)
        np.testing.assert_allclose(db, g.sum(axis=0), atol=1e-14)

    def test_linear_normalized_closed_form(self, rng):
        enc = MlpEncoder([5, 3], seed=2)
        x = rng.standard_normal((8, 5))
        g = rng.standard_normal((8, 3))
        z = x @ enc.weights[0]
        r = np.linalg.norm(z, axis=1, keepdims=True)
        u = z / r
        gz = (g - np.sum(g * u, axis=1, keepdims=True) * u) / r
        _, cache = enc.forward(x)
        [(dw, db)] = enc.backward(cache, g)
        np.testing.assert_allclose(dw, x.T @ gz, atol=1e-13)
        np.testing.assert_allclose(db, gz.sum(axis=0), atol=1e-13)

    @pytest.mark.parametrize("seed", range(5))
    def test_end_to_end_against_fd(self, seed):
        rng = np.random.default_rng(seed)
        enc = MlpEncoder([4, 8, 6], seed=seed)
        x = rng.standard_normal((3, 4))
        protos = unit_rows(rng, 2, 2, 6)
        y = np.array([0, 1, 1])
        a = Assignment(y.copy(), rng.integers(0, 2, 3))
        w = LossWeights(0.5, 0.5, 0.1)

        def f(model):
            return loss_total(model(x), y, a, protos, weights=w).total

        e, cache = enc.forward(x)
        grads = enc.backward(cache, loss_total(e, y, a, protos, weights=w).grad)
        assert rel_err(flat(grads), flat(param_fd(enc, f))) < 1e-4

    def test_stale_cache(self, rng):
        enc = MlpEncoder([3, 4, 2], seed=0)
        out, cache = enc.forward(rng.standard_normal((2, 3)))
        grads = enc.backward(cache, np.ones_like(out))
        enc.sgd_step(grads, 0.1)
        with pytest.raises(StaleCache):
            enc.backward(cache, np.ones_like(out))


class TestSgdStep:
    def test_zero_lr(self, rng):
        enc = MlpEncoder([3, 4, 2], seed=0)
        before = enc.copy()
        out, cache = enc.forward(rng.standard_normal((4, 3)))
        enc.sgd_step(enc.backward(cache, np.ones_like(out)), 0.0)
        for (w0, b0), (w1, b1) in zip(before.params, enc.params):
            assert np.array_equal(w0, w1) and np.array_equal(b0, b1)

    def test_quadratic_descent(self, rng):
        enc = MlpEncoder([4, 6, 3], seed=1, normalize_output=False)
        x, t = rng.standard_normal((10, 4)), rng.standard_normal((10, 3))
        f = lambda m: 0.5 * np.sum((m(x) - t) ** 2)
        before = f(enc)
        out, cache = enc.forward(x)
        enc.sgd_step(enc.backward(cache, out - t), 1e-3)
        assert f(enc) < before

    def test_linear_objective_steps_add(self, rng):
        # for f = sum(G * out) on a linear net the gradient is parameter-independent
        a = MlpEncoder([3, 2], seed=4, normalize_output=False)
        b = a.copy()
        x, G = rng.standard_normal((5, 3)), rng.standard_normal((5, 2))
        for _ in range(2):
            _, cache = a.forward(x)
            a.sgd_step(a.backward(cache, G), 0.1)
        _, cache = b.forward(x)
        b.sgd_step(b.backward(cache, 2 * G), 0.1)
        for (wa, ba), (wb, bb) in zip(a.params, b.params):
            np.testing.assert_allclose(wa, wb, atol=1e-14)
            np.testing.assert_allclose(ba, bb, atol=1e-14)

    def test_shape_mismatch(self):
        enc = MlpEncoder([3, 2], seed=0)
        with pytest.raises(InvalidShape):
            enc.sgd_step([(np.zeros((2, 2)), np.zeros(2))], 0.1)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            SgdConfig(learning_rate=0.0)


class TestCheckpoint:
    def test_round_trip(self, tmp_path, rng):
        enc = MlpEncoder([8, 64, 64, 16], seed=5)
        path = tmp_path / "enc.txt"
        encoder.save(enc, path)
        back = encoder.load(path)
        assert back.sizes == enc.sizes
        x = rng.standard_normal((4, 8))
        assert np.array_equal(back(x), enc(x))

    def test_truncated(self, tmp_path):
        enc = MlpEncoder([2, 3], seed=0)
        path = tmp_path / "enc.txt"
        encoder.save(enc, path)
        lines = path.read_text().splitlines()
        path.write_text("\n".join(lines[:-1]) + "\n")
        with pytest.raises(FormatError) as exc:
            encoder.load(path)
        assert exc.value.line == len(lines)


def test_separable_toy_fits():
    rng = np.random.default_rng(0)
    n = 200
    X = np.concatenate([rng.normal(-2.0, 0.5, (n, 2)), rng.normal(2.0, 0.5, (n, 2))])
    y = np.repeat([0, 1], n)
    cfg = trainer.TrainConfig(sgd=SgdConfig(iterations=500, batch_size=64))
    state = trainer.init_state(cfg, 2, 2)
    sampler = trainer.StratifiedSampler(y, 64, np.random.default_rng(1))
    for _ in range(500):
        idx = sampler.next()
        trainer.train_iteration(state, X[idx], y[idx])
    assert np.mean(trainer.predict(state, X) == y) >= 0.99
