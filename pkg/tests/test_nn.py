"""Network engine: forward, Gaussian head, gradients, optimizers, checkpoints."""
import hashlib
import math

import numpy as np
import pytest

from bumps.errors import ConfigError, DataIntegrityError, ShapeError, TrainingFault
from bumps.nn import (
    DEFAULT_LOG_STD_INIT,
    LOG_STD_MAX,
    LOG_STD_MIN,
    Gradients,
    MlpSpec,
    backward,
    decay_learning_rate,
    effective_log_std,
    forward,
    forward_cache,
    gaussian_entropy,
    gaussian_log_prob,
    gaussian_log_prob_backward,
    gaussian_weighted_log_prob_backward,
    init_optimizer,
    init_params,
    load_checkpoint,
    optimizer_step,
    preset_hidden_layers,
    save_checkpoint,
)


def small_policy(seed=0, input_dim=2, hidden=(3,), output_dim=2, log_std_init=-0.5):
    spec = MlpSpec(input_dim=input_dim, hidden_layers=hidden, output_dim=output_dim)
    rng = np.random.default_rng(seed)
    return init_params(spec, rng, with_log_std=True, log_std_init=log_std_init)


class TestForward:
    def test_zero_params_zero_output(self):
        spec = MlpSpec(2, (4, 4), 3)
        params = init_params(spec, np.random.default_rng(0))
        for w in params.weights:
            w[:] = 0.0
        np.testing.assert_array_equal(forward(params, [1.0, -2.0]), np.zeros(3))

    def test_identity_linear_layer(self):
        spec = MlpSpec(3, (), 3)
        params = init_params(spec, np.random.default_rng(0))
        params.weights[0][:] = np.eye(3)
        x = np.array([0.3, -1.2, 2.0])
        np.testing.assert_allclose(forward(params, x), x)

    def test_hand_computed_2_2_1(self):
        # independent scalar evaluation of a fixed 2-2-1 network
        spec = MlpSpec(2, (2,), 1)
        params = init_params(spec, np.random.default_rng(0))
        params.weights[0][:] = [[0.1, -0.2], [0.3, 0.4]]
        params.biases[0][:] = [0.05, -0.05]
        params.weights[1][:] = [[0.5], [-0.6]]
        params.biases[1][:] = [0.2]
        x = [1.0, -1.0]
        z0 = 1.0 * 0.1 + (-1.0) * 0.3 + 0.05
        z1 = 1.0 * (-0.2) + (-1.0) * 0.4 + (-0.05)
        h0, h1 = math.tanh(z0), math.tanh(z1)
        expected = h0 * 0.5 + h1 * (-0.6) + 0.2
        assert forward(params, x)[0] == pytest.approx(expected, abs=1e-15)

    def test_batch_matches_single(self):
        params = small_policy(3)
        xs = np.random.default_rng(1).normal(size=(5, 2))
        batch = forward(params, xs)
        for i in range(5):
            np.testing.assert_allclose(batch[i], forward(params, xs[i]))

    def test_shape_mismatch(self):
        params = small_policy()
        with pytest.raises(ShapeError):
            forward(params, np.zeros(7))

    def test_hidden_activations_bounded(self):
        spec = MlpSpec(2, (8, 8), 2)
        params = init_params(spec, np.random.default_rng(2))
        xs = np.random.default_rng(3).normal(scale=2.0, size=(20, 2))
        _, cache = forward_cache(params, xs)
        for hidden in cache["inputs"][1:]:
            assert (np.abs(hidden) < 1.0).all()
        # extreme inputs saturate in float64 but never exceed the bound
        _, cache = forward_cache(params, np.full((1, 2), 1e6))
        for hidden in cache["inputs"][1:]:
            assert (np.abs(hidden) <= 1.0).all()


class TestGaussianHead:
    def test_log_prob_at_mean_unit_sigma(self):
        spec = MlpSpec(1, (), 6)
        params = init_params(spec, np.random.default_rng(0), with_log_std=True,
                             log_std_init=0.0)
        obs = np.array([0.4])
        mean = forward(params, obs)
        lp = gaussian_log_prob(params, obs, mean)
        assert lp == pytest.approx(-3.0 * math.log(2.0 * math.pi), abs=1e-12)

    def test_one_sigma_offset(self):
        params = small_policy(log_std_init=0.0)
        obs = np.array([0.1, -0.2])
        mean = forward(params, obs)
        base = gaussian_log_prob(params, obs, mean)
        off = mean.copy()
        off[0] += 1.0
        assert gaussian_log_prob(params, obs, off) == pytest.approx(base - 0.5, abs=1e-12)

    def test_matches_brute_force_density(self):
        params = small_policy(seed=9, log_std_init=-0.3)
        rng = np.random.default_rng(4)
        obs = rng.normal(size=2)
        action = rng.normal(size=2)
        mean = forward(params, obs)
        sigma = np.exp(effective_log_std(params))
        expected = 0.0
        for d in range(2):
            expected += math.log(
                1.0 / (sigma[d] * math.sqrt(2.0 * math.pi))
                * math.exp(-((action[d] - mean[d]) ** 2) / (2.0 * sigma[d] ** 2)))
        assert gaussian_log_prob(params, obs, action) == pytest.approx(expected, abs=1e-10)

    def test_log_std_clipped(self):
        params = small_policy()
        params.log_std[:] = [-100.0, 100.0]
        np.testing.assert_array_equal(effective_log_std(params), [LOG_STD_MIN, LOG_STD_MAX])

    def test_entropy_value(self):
        # k/2 * (log 2 pi + 1) at unit sigma
        assert gaussian_entropy(np.zeros(6)) == pytest.approx(
            3.0 * (math.log(2.0 * math.pi) + 1.0), abs=1e-12)


class TestBackward:
    def test_constant_loss_zero_gradients(self):
        params = small_policy()
        x = np.array([0.5, -0.5])
        _, cache = forward_cache(params, x)
        grads = backward(params, cache, np.zeros(2))
        for arr in grads.arrays():
            np.testing.assert_array_equal(arr, 0.0)

    def test_log_std_gradient_at_mean(self):
        # d/d log_std of log N(a=mu) = -1 per dimension
        params = small_policy(log_std_init=-0.4)
        obs = np.array([0.3, 0.7])
        mean = forward(params, obs)
        _, grads = gaussian_log_prob_backward(params, obs, mean)
        np.testing.assert_allclose(grads.log_std, -np.ones(2), atol=1e-12)

    def test_clipped_log_std_gradient_frozen(self):
        params = small_policy()
        params.log_std[:] = [LOG_STD_MIN - 1.0, 0.0]
        obs = np.array([0.3, 0.7])
        action = forward(params, obs) + 0.5
        _, grads = gaussian_log_prob_backward(params, obs, action)
        assert grads.log_std[0] == 0.0
        assert grads.log_std[1] != 0.0

    def test_finite_differences_2_3_2(self):
        # central differences over every coordinate, h = 1e-5
        spec = MlpSpec(2, (3,), 2)
        rng = np.random.default_rng(12)
        params = init_params(spec, rng, with_log_std=True, log_std_init=-0.2)
        obs = rng.normal(size=(4, 2))
        actions = rng.normal(size=(4, 2))
        weights = rng.uniform(0.5, 1.5, size=4)

        def loss_value():
            mean = forward(params, obs)
            sigma = np.exp(effective_log_std(params))
            z = (actions - mean) / sigma
            lp = (-0.5 * z * z - np.log(sigma)).sum(axis=1) - math.log(2 * math.pi)
            return float((weights * lp).sum())

        _, grads = gaussian_weighted_log_prob_backward(params, obs, actions, weights)
        h = 1e-5
        worst = 0.0
        for p_arr, g_arr in zip(params.arrays(), grads.arrays()):
            flat_p = p_arr.ravel()
            flat_g = g_arr.ravel()
            for i in range(flat_p.size):
                orig = flat_p[i]
                flat_p[i] = orig + h
                up = loss_value()
                flat_p[i] = orig - h
                down = loss_value()
                flat_p[i] = orig
                fd = (up - down) / (2 * h)
                denom = max(abs(fd), abs(flat_g[i]), 1e-6)
                worst = max(worst, abs(fd - flat_g[i]) / denom)
        assert worst < 1e-4

    def test_gradient_linearity_in_batch(self):
        params = small_policy(seed=5)
        rng = np.random.default_rng(6)
        obs = rng.normal(size=(3, 2))
        act = rng.normal(size=(3, 2))
        _, g1 = gaussian_log_prob_backward(params, obs, act)
        _, g2 = gaussian_log_prob_backward(params, np.vstack([obs, obs]), np.vstack([act, act]))
        for a, b in zip(g1.arrays(), g2.arrays()):
            np.testing.assert_allclose(2.0 * a, b, atol=1e-12)


class TestOptimizers:
    def one_param_net(self):
        spec = MlpSpec(1, (), 1)
        params = init_params(spec, np.random.default_rng(0))
        params.weights[0][:] = 1.0
        return params

    def unit_gradient(self, params):
        return Gradients(weights=[np.ones_like(params.weights[0])],
                         biases=[np.zeros_like(params.biases[0])])

    def test_sgd_single_step(self):
        params = self.one_param_net()
        opt = init_optimizer(params, "sgd", learning_rate=0.1)
        optimizer_step(params, self.unit_gradient(params), opt)
        assert params.weights[0][0, 0] == pytest.approx(0.9, abs=1e-15)

    def test_zero_gradient_fixed_point(self):
        for algorithm in ("sgd", "adam"):
            params = self.one_param_net()
            opt = init_optimizer(params, algorithm, learning_rate=0.1)
            zero = Gradients(weights=[np.zeros((1, 1))], biases=[np.zeros(1)])
            optimizer_step(params, zero, opt)
            assert params.weights[0][0, 0] == 1.0

    def test_adam_first_step_magnitude(self):
        params = self.one_param_net()
        opt = init_optimizer(params, "adam", learning_rate=0.01)
        optimizer_step(params, self.unit_gradient(params), opt)
        # bias correction makes the first step ~ lr * g / (|g| + eps)
        assert params.weights[0][0, 0] == pytest.approx(1.0 - 0.01, rel=1e-6)

    def test_non_finite_gradient_faults(self):
        params = self.one_param_net()
        opt = init_optimizer(params, "adam", learning_rate=0.01)
        bad = Gradients(weights=[np.array([[np.nan]])], biases=[np.zeros(1)])
        with pytest.raises(TrainingFault):
            optimizer_step(params, bad, opt)

    def test_adam_converges_on_quadratic(self):
        # minimize (w - 3)^2 in the single weight
        params = self.one_param_net()
        opt = init_optimizer(params, "adam", learning_rate=0.1)
        for _ in range(500):
            g = Gradients(weights=[2.0 * (params.weights[0] - 3.0)],
                          biases=[np.zeros(1)])
            optimizer_step(params, g, opt)
        assert params.weights[0][0, 0] == pytest.approx(3.0, abs=1e-3)

    def test_decay(self):
        params = self.one_param_net()
        opt = init_optimizer(params, "sgd", learning_rate=3e-6, decay_factor=0.8)
        decay_learning_rate(opt)
        assert opt.learning_rate == pytest.approx(2.4e-6)
        decay_learning_rate(opt)
        assert opt.learning_rate == pytest.approx(3e-6 * 0.64)

    def test_decay_identity_factor(self):
        params = self.one_param_net()
        opt = init_optimizer(params, "sgd", learning_rate=0.5, decay_factor=1.0)
        decay_learning_rate(opt)
        assert opt.learning_rate == 0.5

    def test_invalid_configs(self):
        params = self.one_param_net()
        with pytest.raises(ConfigError):
            init_optimizer(params, "rmsprop")
        with pytest.raises(ConfigError):
            init_optimizer(params, "sgd", learning_rate=-1.0)
        with pytest.raises(ConfigError):
            init_optimizer(params, "sgd", learning_rate=0.1, decay_factor=0.0)


class TestInit:
    def test_glorot_bounds_and_zero_biases(self):
        spec = MlpSpec(10, (20,), 5)
        params = init_params(spec, np.random.default_rng(0))
        limit0 = math.sqrt(6.0 / (10 + 20))
        limit1 = math.sqrt(6.0 / (20 + 5))
        assert (np.abs(params.weights[0]) <= limit0).all()
        assert (np.abs(params.weights[1]) <= limit1).all()
        np.testing.assert_array_equal(params.biases[0], 0.0)
        np.testing.assert_array_equal(params.biases[1], 0.0)

    def test_default_log_std(self):
        params = small_policy(log_std_init=DEFAULT_LOG_STD_INIT)
        np.testing.assert_allclose(params.log_std, math.log(0.1))

    def test_seeded_determinism(self):
        a = small_policy(seed=7)
        b = small_policy(seed=7)
        for x, y in zip(a.arrays(), b.arrays()):
            np.testing.assert_array_equal(x, y)

    def test_presets(self):
        assert preset_hidden_layers("4x256") == (256, 256, 256, 256)
        assert preset_hidden_layers("11x128") == (128,) * 11
        with pytest.raises(ConfigError):
            preset_hidden_layers("2x32")

    def test_spec_validation(self):
        with pytest.raises(ConfigError):
            MlpSpec(0, (4,), 2)
        with pytest.raises(ConfigError):
            MlpSpec(2, (4,), 2, activation="relu")


class TestCheckpoints:
    def test_round_trip_bit_exact(self, tmp_path):
        params = small_policy(seed=21, hidden=(5, 4))
        path = tmp_path / "net.ckpt"
        save_checkpoint(path, params)
        loaded = load_checkpoint(path)
        assert loaded.spec == params.spec
        for a, b in zip(params.arrays(), loaded.arrays()):
            np.testing.assert_array_equal(a, b)
        x = np.random.default_rng(1).normal(size=2)
        assert forward(params, x).tobytes() == forward(loaded, x).tobytes()

    def test_round_trip_without_log_std(self, tmp_path):
        spec = MlpSpec(3, (4,), 2)
        params = init_params(spec, np.random.default_rng(0))
        path = tmp_path / "v.ckpt"
        save_checkpoint(path, params)
        loaded = load_checkpoint(path)
        assert loaded.log_std is None

    def test_golden_file_hash(self, tmp_path):
        # byte layout is part of the format contract; freeze it
        spec = MlpSpec(2, (3,), 2)
        params = init_params(spec, np.random.default_rng(123), with_log_std=True)
        path = tmp_path / "golden.ckpt"
        save_checkpoint(path, params)
        digest = hashlib.sha256(path.read_bytes()).hexdigest()
        assert digest == "631c32a5e54e54f9b2035f84f892d5c179b7b4506b9b3beb10e6d1cb8c2d3cce"

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOTMAGIC" + b"\x00" * 64)
        with pytest.raises(DataIntegrityError):
            load_checkpoint(path)

    def test_truncated(self, tmp_path):
        params = small_policy()
        path = tmp_path / "net.ckpt"
        save_checkpoint(path, params)
        blob = path.read_bytes()
        path.write_bytes(blob[:-8])
        with pytest.raises(DataIntegrityError):
            load_checkpoint(path)
