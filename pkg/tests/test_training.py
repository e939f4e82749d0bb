import numpy as np
import pytest

from blockunfold.blockcore import MMVProblem, kron_lift
from blockunfold.training import (
    AdamState,
    TrainConfig,
    TrainData,
    adam_step,
    batch_nmse_ratios,
    empirical_risk,
    layerwise_train,
    mean_nmse_db,
    nmse_db,
    nmse_ratio,
    write_history_csv,
)
from blockunfold.unfolding import (
    NetworkVariant,
    backward,
    forward,
    get_param,
    init_from_bista,
)

from conftest import unit_column_matrix


def toy_data(rng, m=4, n=6, d=2, n_train=40, n_val=16):
    K = unit_column_matrix(m, n, rng)
    D = kron_lift(MMVProblem(K, d))
    def draw(count):
        X = np.zeros((count, n * d))
        for i in range(count):
            active = rng.random(n) < 0.25
            vals = rng.standard_normal((n, d))
            vals[~active] = 0.0
            if not active.any():
                vals[0] = rng.standard_normal(d)
            X[i] = vals.reshape(-1)
        return X, X @ D.data.T
    X_train, Y_train = draw(n_train)
    X_val, Y_val = draw(n_val)
    return D, TrainData(X_train, Y_train, X_val, Y_val)


class TestMetrics:
    def test_exact_match_sentinel(self):
        x = np.array([1.0, 2.0])
        assert nmse_ratio(x, x) == 0.0
        assert nmse_db(x, x) == -300.0

    def test_zero_estimate(self):
        x = np.array([1.0, 2.0])
        assert nmse_db(np.zeros(2), x) == pytest.approx(0.0, abs=1e-12)

    def test_scale_invariance(self, rng):
        x_hat = rng.standard_normal(6)
        x = rng.standard_normal(6)
        a = nmse_db(x_hat, x)
        b = nmse_db(3.7 * x_hat, 3.7 * x)
        assert a == pytest.approx(b, abs=1e-12)

    def test_zero_reference_rejected(self):
        with pytest.raises(ValueError):
            nmse_ratio(np.ones(3), np.zeros(3))

    def test_batch_skips_zero_rows(self, rng):
        X_star = np.vstack([np.zeros(4), rng.standard_normal(4)])
        X_hat = rng.standard_normal((2, 4))
        ratios = batch_nmse_ratios(X_hat, X_star)
        assert ratios.shape == (1,)

    def test_mean_db_is_energy_mean(self, rng):
        X_star = rng.standard_normal((5, 6))
        X_hat = X_star + 0.1 * rng.standard_normal((5, 6))
        manual = 10 * np.log10(
            np.mean(
                [nmse_ratio(X_hat[i], X_star[i]) for i in range(5)]
            )
        )
        assert mean_nmse_db(X_hat, X_star) == pytest.approx(manual, rel=1e-12)


class TestEmpiricalRisk:
    def test_perfect_predictions(self, rng):
        X = rng.standard_normal((4, 6))
        assert empirical_risk(X, X) == 0.0

    def test_single_sample(self, rng):
        x = rng.standard_normal(6)
        assert empirical_risk(x, np.zeros(6)) == pytest.approx(
            0.5 * x @ x, rel=1e-14
        )

    def test_matches_mean_of_per_sample_losses(self, rng):
        X_hat = rng.standard_normal((7, 5))
        X_star = rng.standard_normal((7, 5))
        per_sample = [0.5 * np.sum((X_hat[i] - X_star[i]) ** 2) for i in range(7)]
        assert empirical_risk(X_hat, X_star) == pytest.approx(
            np.mean(per_sample), rel=1e-12
        )

    def test_empty_batch_rejected(self):
        with pytest.raises(ValueError):
            empirical_risk(np.zeros((0, 3)), np.zeros((0, 3)))


class TestAdam:
    def test_zero_gradient_no_update(self, rng):
        D, data = toy_data(rng)
        params = init_from_bista(NetworkVariant.ALBISTA, D, 2, B_analytic=D.data.copy())
        fp = forward(params, data.Y_train)
        grads = backward(params, fp, fp.iterates[-1])
        before = params.alphas.copy()
        adam_step(params, grads, AdamState(), 0.1, ["alpha.0", "alpha.1"])
        np.testing.assert_array_equal(params.alphas, before)

    def test_first_step_is_sign_scaled(self, rng):
        # single-step hand oracle: update = -lr * g / (|g| + eps)
        D, data = toy_data(rng)
        params = init_from_bista(NetworkVariant.ALBISTA, D, 1, B_analytic=D.data.copy())
        fp = forward(params, data.Y_train)
        grads = backward(params, fp, data.X_train)
        g = float(grads.dalphas[0])
        assert g != 0.0
        before = float(params.alphas[0])
        adam_step(params, grads, AdamState(), 1e-3, ["alpha.0"])
        expected = before - 1e-3 * g / (abs(g) + 1e-8)
        assert float(params.alphas[0]) == pytest.approx(expected, rel=1e-9)

    def test_two_steps_reduce_scalar_quadratic(self):
        # scalar toy: loss(theta) = (theta - 3)^2 / 2 via direct gradients
        theta = np.array([0.0])
        state = AdamState()
        lr = 0.5

        class P:
            pass

        losses = []
        for _ in range(2):
            g = theta[0] - 3.0
            losses.append(0.5 * g * g)
            state.t += 1
            if "x" not in state.m:
                state.m["x"] = 0.0
                state.v["x"] = 0.0
            state.m["x"] = state.beta1 * state.m["x"] + (1 - state.beta1) * g
            state.v["x"] = state.beta2 * state.v["x"] + (1 - state.beta2) * g * g
            m_hat = state.m["x"] / (1 - state.beta1**state.t)
            v_hat = state.v["x"] / (1 - state.beta2**state.t)
            theta[0] -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
        final_loss = 0.5 * (theta[0] - 3.0) ** 2
        assert final_loss < losses[0]

    def test_non_finite_gradient_rejected(self, rng):
        D, data = toy_data(rng)
        params = init_from_bista(NetworkVariant.ALBISTA, D, 1, B_analytic=D.data.copy())
        fp = forward(params, data.Y_train)
        grads = backward(params, fp, data.X_train)
        grads.dalphas[0] = np.nan
        with pytest.raises(ValueError, match="non-finite"):
            adam_step(params, grads, AdamState(), 1e-3, ["alpha.0"])


class TestLayerwiseTraining:
    def test_zero_learning_rate_keeps_init(self, rng):
        D, data = toy_data(rng)
        params = init_from_bista(NetworkVariant.ALBISTA, D, 2, B_analytic=D.data.copy())
        cfg = TrainConfig(
            learning_rate=1e-30,
            patience_iters=2,
            n_train=40,
            n_validation=16,
            batch_size=8,
            max_iters_per_layer=30,
            seed=3,
            eval_every=5,
        )
        trained, history = layerwise_train(params, data, cfg)
        np.testing.assert_allclose(trained.alphas, params.alphas, atol=1e-25)
        np.testing.assert_allclose(trained.gammas, params.gammas, atol=1e-25)
        assert len(history.layer_boundaries) == 2

    def test_single_layer_toy_improves(self, rng):
        D, data = toy_data(rng, n_train=60)
        params = init_from_bista(NetworkVariant.ALBISTA, D, 1, B_analytic=D.data.copy())
        before = float(batch_nmse_ratios(
            forward(params, data.Y_val).iterates[-1], data.X_val
        ).max())
        cfg = TrainConfig(
            learning_rate=0.02,
            patience_iters=10,
            n_train=60,
            n_validation=16,
            batch_size=20,
            max_iters_per_layer=300,
            seed=4,
            eval_every=5,
        )
        trained, history = layerwise_train(params, data, cfg)
        after = float(batch_nmse_ratios(
            forward(trained, data.Y_val).iterates[-1], data.X_val
        ).max())
        assert after <= before + 1e-12

    def test_determinism(self, rng):
        D, data = toy_data(rng)
        cfg = TrainConfig(
            learning_rate=0.01,
            patience_iters=5,
            n_train=40,
            n_validation=16,
            batch_size=10,
            max_iters_per_layer=40,
            seed=11,
            eval_every=5,
        )
        results = []
        for _ in range(2):
            params = init_from_bista(
                NetworkVariant.ALBISTA, D, 2, B_analytic=D.data.copy()
            )
            trained, history = layerwise_train(params, data, cfg)
            results.append((trained, history))
        a, b = results
        np.testing.assert_array_equal(a[0].alphas, b[0].alphas)
        np.testing.assert_array_equal(a[0].gammas, b[0].gammas)
        assert a[1].train_losses == b[1].train_losses
        assert a[1].val_nmse_db == b[1].val_nmse_db

    def test_frozen_layers_untouched(self, rng):
        # training layer 2 must not move layer 1's parameters
        D, data = toy_data(rng)
        params = init_from_bista(NetworkVariant.ALBISTA, D, 2, B_analytic=D.data.copy())
        cfg = TrainConfig(
            learning_rate=0.05,
            patience_iters=3,
            n_train=40,
            n_validation=16,
            batch_size=10,
            max_iters_per_layer=25,
            seed=5,
            eval_every=5,
        )
        trained, history = layerwise_train(params, data, cfg)
        boundary = history.layer_boundaries[0]
        # re-run the first stage alone: identical because stage 2 cannot
        # touch stage 1 parameters
        params1 = init_from_bista(NetworkVariant.ALBISTA, D, 1, B_analytic=D.data.copy())
        cfg1 = TrainConfig(
            learning_rate=0.05,
            patience_iters=3,
            n_train=40,
            n_validation=16,
            batch_size=10,
            max_iters_per_layer=25,
            seed=5,
            eval_every=5,
        )
        trained1, _ = layerwise_train(params1, data, cfg1)
        assert trained.alphas[0] == trained1.alphas[0]
        assert trained.gammas[0] == trained1.gammas[0]

    def test_alpha_positivity_clamp(self, rng):
        D, data = toy_data(rng)
        params = init_from_bista(NetworkVariant.ALBISTA, D, 1, B_analytic=D.data.copy())
        params.alphas[:] = 1e-8
        cfg = TrainConfig(
            learning_rate=0.5,
            patience_iters=3,
            n_train=40,
            n_validation=16,
            batch_size=10,
            max_iters_per_layer=30,
            seed=6,
            eval_every=5,
        )
        trained, _ = layerwise_train(params, data, cfg)
        assert np.all(trained.alphas >= 1e-8)

    def test_history_csv(self, tmp_path, rng):
        D, data = toy_data(rng)
        params = init_from_bista(NetworkVariant.ALBISTA, D, 2, B_analytic=D.data.copy())
        cfg = TrainConfig(
            learning_rate=0.01,
            patience_iters=2,
            n_train=40,
            n_validation=16,
            batch_size=10,
            max_iters_per_layer=20,
            seed=7,
            eval_every=5,
        )
        _, history = layerwise_train(params, data, cfg)
        path = tmp_path / "history.csv"
        write_history_csv(path, history)
        lines = path.read_text().splitlines()
        assert lines[0] == "# blockunfold-csv v1 history"
        assert lines[1] == "step,layer,train_loss,val_nmse_db"
        assert len(lines) == 2 + len(history.steps)
        assert all(
            b > a
            for a, b in zip(history.layer_boundaries, history.layer_boundaries[1:])
        )
