import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ddpc.errors import ConfigError
from ddpc.mfapc import (MFAPC, MFAPCConfig, PPDEstimator, PPDForecaster, control_increment,
                        estimate_ppd, forecast_ppd, ppd_violates, prediction_matrix,
                        step_direction_guard, update_forecaster)


def run_first_order(lam, steps=200, ref=1.0, a=0.9, b=0.5):
    """Closed loop on y+ = a*y + b*u."""
    ctrl = MFAPC(MFAPCConfig(lam=lam))
    y = 0.0
    ctrl.reset(y)
    errors = []
    for _ in range(steps):
        u, _ = ctrl.step(np.full(ctrl.N, ref))
        y = a * y + b * float(u[0])
        ctrl.observe(u, y)
        errors.append(ref - y)
    return np.array(errors), ctrl


class TestConfig:
    def test_table_values_are_defaults(self):
        cfg = MFAPCConfig()
        assert (cfg.horizon, cfg.lam, cfg.rho, cfg.mu, cfg.eta) == (5, 0.37, 1.0, 1.0, 1.0)
        assert (cfg.epsilon, cfg.delta, cfg.phi0, cfg.n_m) == (1e-5, 0.5, 0.1, 4)
        assert cfg.theta0 == (0.175,) * 4
        assert cfg.M == pytest.approx(10 * 0.35 + 1)

    @pytest.mark.parametrize("kwargs, key", [
        ({"n_m": 9, "theta0": (0.1,) * 9}, "n_m"),
        ({"n_m": 1, "theta0": (0.1,)}, "n_m"),
        ({"eta": 2.5}, "eta"),
        ({"eta": 0.0}, "eta"),
        ({"lam": 0.0}, "lambda"),
        ({"mu": -1.0}, "mu"),
        ({"epsilon": 0.0}, "epsilon"),
        ({"delta": 0.0}, "delta"),
        ({"phi0": 0.0}, "phi0"),
        ({"theta0": (0.1, 0.1)}, "theta0"),
        ({"M": 0.1}, "M"),
        ({"N": 0.01}, "N"),
    ])
    def test_rejects(self, kwargs, key):
        with pytest.raises(ConfigError) as err:
            MFAPCConfig(**kwargs)
        assert err.value.key == key

    def test_n_m_message_cites_range(self):
        with pytest.raises(ConfigError, match=r"\[2, 7\]"):
            MFAPCConfig(n_m=9, theta0=(0.1,) * 9)


def primed(phi=0.1, n_m=4, prev_y=0.0, prev_du=0.0):
    est = PPDEstimator(phi, n_m)
    est.prev_y = prev_y
    est.prev_du = prev_du
    return est


class TestEstimator:
    def test_small_mu_limit_is_secant(self):
        est = primed(prev_du=0.5)
        estimate_ppd(est, 1.5, mu=1e-14, eta=1.0, epsilon=1e-5)
        assert est.phi_hat == pytest.approx(3.0, rel=1e-10)

    def test_zero_increment_resets(self):
        est = primed(phi=0.1, prev_du=0.0)
        est.phi_hat = 0.7
        estimate_ppd(est, 2.0, 1.0, 1.0, 1e-5)
        assert est.phi_hat == 0.1
        assert est.reset_fired and not est.guard_fired

    def test_sign_flip_resets_and_guards(self):
        est = primed(prev_du=1.0)
        estimate_ppd(est, -3.0, 1.0, 1.0, 1e-5)
        assert est.raw < 0
        assert est.phi_hat == 0.1
        assert step_direction_guard(est)

    def test_guard_examples(self):
        assert ppd_violates(-0.3, 0.1, 1e-5)
        assert not ppd_violates(0.2, 0.1, 1e-5)
        assert ppd_violates(1e-6, 0.1, 1e-5)

    def test_history_shifts(self):
        est = primed(prev_du=1.0)
        estimate_ppd(est, 0.5, 1.0, 1.0, 1e-5)
        assert est.history[0] == est.phi_hat
        assert np.all(est.history[1:] == 0.1)

    @pytest.mark.parametrize("gain", [0.5, 2.0, 5.0])
    def test_converges_to_static_gain(self, gain):
        rng = np.random.default_rng(1)
        est = primed(prev_y=0.0)
        u_prev, y = 0.0, 0.0
        for _ in range(50):
            u = rng.uniform(-1, 1)
            est.prev_du = u - u_prev
            y += gain * (u - u_prev)
            u_prev = u
            estimate_ppd(est, y, 1.0, 1.0, 1e-5)
        assert abs(est.phi_hat - gain) / gain < 1e-2

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.tuples(st.floats(-5, 5), st.floats(-5, 5)), min_size=1, max_size=30))
    def test_sign_and_magnitude_always_hold(self, steps):
        est = primed()
        y = 0.0
        for du, dy in steps:
            est.prev_du = du
            y += dy
            estimate_ppd(est, y, 1.0, 1.0, 1e-5)
            assert abs(est.phi_hat) >= 1e-5
            assert np.sign(est.phi_hat) == np.sign(est.phi1)


class TestForecaster:
    def test_zero_regressor_leaves_theta(self):
        fc = PPDForecaster.from_initial([0.2, 0.3], 10.0)
        update_forecaster(fc, np.zeros(2), 1.0, 0.5)
        assert fc.theta.tolist() == [0.2, 0.3]

    def test_scalar_step(self):
        fc = PPDForecaster(np.zeros(1), np.zeros(1), 10.0)
        update_forecaster(fc, np.ones(1), 1.0, 0.5)
        assert fc.theta[0] == pytest.approx(2.0 / 3.0, abs=1e-15)

    def test_reset_on_bound(self):
        fc = PPDForecaster.from_initial([0.175] * 4, 0.5)
        update_forecaster(fc, np.ones(4), 10.0, 0.5)
        assert fc.theta.tolist() == [0.175] * 4

    def test_constant_history_drives_prediction_error_down(self):
        c = 0.8
        fc = PPDForecaster.from_initial([0.175] * 4, 100.0)
        gaps = []
        for _ in range(20):
            update_forecaster(fc, np.full(4, c), c, 0.5)
            gaps.append(abs(c * fc.theta.sum() - c))
        assert all(b <= a for a, b in zip(gaps, gaps[1:]))
        assert gaps[-1] < 1e-6

    def test_shift_operator_forecast(self):
        fc = PPDForecaster.from_initial([1.0, 0.0, 0.0, 0.0], 10.0)
        out = forecast_ppd(fc, np.array([0.4, 0.4, 0.4, 0.4, 0.4]), 5, 0.1, 1e-5)
        assert out.tolist() == [0.4] * 4

    def test_table_values_forecast(self):
        fc = PPDForecaster.from_initial([0.175] * 4, 10.0)
        out = forecast_ppd(fc, np.ones(5), 4, 0.1, 1e-5)
        assert out[0] == pytest.approx(0.7, abs=1e-15)
        assert out[1] == pytest.approx(0.175 * (0.7 + 3.0), abs=1e-15)
        assert out[2] == pytest.approx(0.175 * (out[1] + 0.7 + 2.0), abs=1e-15)

    def test_sign_flipping_forecast_is_reset(self):
        fc = PPDForecaster.from_initial([-1.0, 0.0, 0.0, 0.0], 10.0)
        out = forecast_ppd(fc, np.ones(4), 3, 0.1, 1e-5)
        assert out[0] == 0.1


class TestControlLaw:
    def test_horizon_one(self):
        phi, lam, r, y = 0.6, 0.37, 1.2, 0.2
        dU = control_increment(prediction_matrix([phi]), y, np.array([r]), lam)
        assert dU[0] == pytest.approx(phi * (r - y) / (lam + phi**2), rel=1e-14)

    def test_at_reference_no_move(self):
        A = prediction_matrix([0.3, 0.5, 0.2])
        assert np.all(control_increment(A, 0.7, np.full(3, 0.7), 0.37) == 0.0)

    def test_two_by_two_closed_form(self):
        a, b, lam, y = 0.4, 0.9, 0.37, 0.1
        ys = np.array([1.0, 1.5])
        A = prediction_matrix([a, b])
        assert A.tolist() == [[a, 0.0], [a, b]]
        M = A.T @ A + lam * np.eye(2)
        det = M[0, 0] * M[1, 1] - M[0, 1] * M[1, 0]
        inv = np.array([[M[1, 1], -M[0, 1]], [-M[1, 0], M[0, 0]]]) / det
        expected = inv @ (A.T @ (ys - y))
        assert np.allclose(control_increment(A, y, ys, lam), expected, rtol=1e-13)

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.floats(0.05, 3.0), min_size=1, max_size=6), st.floats(-2, 2),
           st.floats(0.01, 2.0), st.floats(1.0, 10.0))
    def test_larger_lambda_smaller_first_move(self, phis, err, lam, factor):
        A = prediction_matrix(phis)
        ys = np.full(len(phis), err)
        small = control_increment(A, 0.0, ys, lam)
        big = control_increment(A, 0.0, ys, lam * factor)
        assert np.linalg.norm(big) <= np.linalg.norm(small) + 1e-12

    def test_solve_residual(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            A = prediction_matrix(rng.uniform(0.05, 2, 5))
            ys, y, lam = rng.standard_normal(5), rng.standard_normal(), 0.37
            dU = control_increment(A, y, ys, lam)
            res = (A.T @ A + lam * np.eye(5)) @ dU - A.T @ (ys - y)
            assert np.linalg.norm(res) < 1e-10


class TestClosedLoop:
    @pytest.mark.parametrize("lam", [0.1, 0.37, 1.0])
    def test_regulates_first_order_plant(self, lam):
        errors, _ = run_first_order(lam)
        assert np.max(np.abs(errors[180:])) < 1e-3

    def test_rho_scales_increment(self):
        ctrl = MFAPC(MFAPCConfig(rho=0.5))
        ctrl.reset(0.0)
        u, diag = ctrl.step(np.ones(5))
        full = MFAPC(MFAPCConfig())
        full.reset(0.0)
        u_full, _ = full.step(np.ones(5))
        assert u[0] == pytest.approx(0.5 * u_full[0])
        assert diag["delta_u"] == pytest.approx(u[0])

    def test_diagnostics_keys(self):
        _, ctrl = run_first_order(0.37, steps=3)
        _, diag = ctrl.step(np.ones(5))
        assert set(diag) == {"phi_hat", "guard_fired", "norm_theta", "delta_u", "compute_time_s"}

    def test_step_is_fast(self):
        ctrl = MFAPC(MFAPCConfig())
        ctrl.reset(0.0)
        times = []
        for _ in range(200):
            u, d = ctrl.step(np.ones(5))
            ctrl.observe(u, 0.5)
            times.append(d["compute_time_s"])
        assert np.median(times) < 1e-3

    def test_step_before_reset(self):
        with pytest.raises(RuntimeError):
            MFAPC(MFAPCConfig()).step(np.ones(5))

    def test_wrong_window_length(self):
        ctrl = MFAPC(MFAPCConfig())
        ctrl.reset(0.0)
        with pytest.raises(ValueError, match="N = 5"):
            ctrl.step(np.ones(4))
