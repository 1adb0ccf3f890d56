import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ddpc.errors import ConfigError, PersistencyError
from ddpc.harness import Reference, offline_excitation, run_closed_loop
from ddpc.koopman import WKPC, Lifter, WKPCConfig, delay_embedding, lift, make_lifter, rbf
from ddpc.plants import Pendulum, PendulumParams
from ddpc.qpsolve import QPProblem, kkt_solve
from ddpc.signals import DimensionError, Trajectory

from loops import DT, lti_setup, regulate, steady_error

LINEAR = dict(Tini=0.3, N=1.0, Q=1.0, R=0.0, lambda_g=1e-6, u_box=None)


def lti_wkpc(seed=0, **overrides):
    plant, u, y, x = lti_setup(3, seed)
    return plant, WKPC(WKPCConfig(**{**LINEAR, **overrides}), u, y, x), x.data[-1]


def origin_lifter(n=2):
    return Lifter(np.zeros((1, n)))


class TestLift:
    def test_at_center(self):
        assert lift(origin_lifter(), [0.0, 0.0])[0] == 0.0

    def test_unit_distance(self):
        assert lift(origin_lifter(), [0.6, 0.8])[0] == 0.0

    def test_distance_ten(self):
        assert lift(origin_lifter(), [6.0, 8.0])[0] == pytest.approx(10.0, abs=1e-14)

    @pytest.mark.parametrize("r", [1e-12, 1e-6])
    def test_continuous_near_center(self, r):
        z = lift(origin_lifter(1), [r])[0]
        assert abs(z) <= r * abs(np.log10(r)) * (1 + 1e-12)
        assert abs(z) < 1e-5

    def test_batch_matches_single(self):
        lifter = Lifter(np.array([[0.0, 1.0], [2.0, -1.0], [0.5, 0.5]]))
        X = np.random.default_rng(0).standard_normal((6, 2))
        assert np.array_equal(lift(lifter, X), np.array([lift(lifter, x) for x in X]))

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            lift(origin_lifter(2), [1.0, 2.0, 3.0])

    @settings(max_examples=50, deadline=None)
    @given(st.floats(1e-9, 1e3))
    def test_rbf_sign(self, r):
        z = rbf(np.array([r]))[0]
        assert (z < 0) == (r < 1)


class TestLifter:
    def test_deterministic(self):
        data = np.random.default_rng(2).standard_normal((50, 2))
        assert np.array_equal(make_lifter(data, 10, seed=3).centers,
                              make_lifter(data, 10, seed=3).centers)

    def test_centers_inside_bounding_box(self):
        plant = Pendulum(PendulumParams(k=0.5))
        _, _, x = offline_excitation(plant, 20.0, 3.5, seed=1)
        lifter = make_lifter(x, 10)
        assert lifter.centers.shape == (10, 2)
        assert np.all(lifter.centers >= x.data.min(axis=0))
        assert np.all(lifter.centers <= x.data.max(axis=0))

    def test_single_point_is_jittered(self):
        p = np.array([[0.3, -0.2]])
        lifter = make_lifter(p, 4)
        assert len({tuple(c) for c in lifter.centers}) == 4
        assert np.all(np.abs(lifter.centers - p) <= 1e-6)

    def test_zero_centers(self):
        with pytest.raises(ValueError, match="n_p"):
            make_lifter(np.zeros((3, 2)), 0)


class TestDelayEmbedding:
    def test_example(self):
        emb = delay_embedding(np.array([1.0, 2.0, 3.0]), 2)
        assert emb.tolist() == [[1.0, 1.0], [2.0, 1.0], [3.0, 2.0]]

    def test_depth_one_is_identity(self):
        y = np.arange(4.0).reshape(-1, 1)
        assert np.array_equal(delay_embedding(y, 1), y)


class TestConfig:
    def test_table_row_dimensions(self):
        cfg = WKPCConfig()
        assert (cfg.n_data, cfg.n_ini, cfg.n_pred, cfg.depth, cfg.g_dim) == (200, 2, 5, 7, 194)

    def test_data_of_exactly_depth(self):
        assert WKPCConfig(T=0.7).g_dim == 1

    @pytest.mark.parametrize("kwargs, key", [
        ({"lambda_g": 0.0}, "lambda_g"),
        ({"n_p": 0}, "n_p"),
        ({"Q": -1.0}, "Q"),
        ({"T": 0.5}, "T"),
        ({"lift_source": "output"}, "lift_source"),
        ({"u_s": "auto"}, "u_s"),
    ])
    def test_rejects(self, kwargs, key):
        with pytest.raises(ConfigError) as err:
            WKPCConfig(**kwargs)
        assert err.value.key == key

    def test_constant_input_fails_excitation(self):
        u = Trajectory(np.ones((200, 1)), DT)
        y = Trajectory(np.linspace(0, 1, 200).reshape(-1, 1), DT)
        x = Trajectory(np.hstack([y.data, y.data]), DT)
        with pytest.raises(PersistencyError, match="order 1 < required 17"):
            WKPC(WKPCConfig(), u, y, x)

    def test_state_lifting_needs_states(self):
        _, u, y, _ = lti_setup(3, 0)
        with pytest.raises(ValueError, match="state trajectory"):
            WKPC(WKPCConfig(**LINEAR), u, y)


class TestStep:
    def test_equilibrium_is_fixed_point(self):
        plant, ctrl, _ = lti_wkpc()
        u_eq = 0.4
        x_eq, y_eq = plant.equilibrium(u_eq)
        ctrl.recent_u = np.full((ctrl.n_ini, 1), u_eq)
        ctrl.recent_y = np.full((ctrl.n_ini, 1), y_eq[0])
        ctrl.recent_extra["s"] = np.tile(x_eq, (ctrl.n_ini, 1))
        u, _ = ctrl.step(np.full(ctrl.n_pred, y_eq[0]))
        assert u[0] == pytest.approx(u_eq, abs=1e-6)

    def test_matches_kkt_when_bounds_inactive(self):
        _, ctrl, _ = lti_wkpc(R=0.1, lambda_g=0.1, u_box=(-100.0, 100.0))
        ref = np.full(ctrl.n_pred, 0.5)
        for _ in range(5):
            problem, _ = ctrl.build_qp(ref)
            u, _ = ctrl.step(ref)
            x = ctrl.last_solution.x
            assert np.all(np.abs(x[ctrl.layout()["u"]]) < 100)
            free = QPProblem(problem.P, problem.q, problem.A_eq, problem.b_eq)
            assert np.max(np.abs(kkt_solve(free).x - x)) < 1e-6
            ctrl.observe(u, ctrl.recent_y[-1], ctrl.recent_extra["s"][-1])

    def test_zero_input_weight_ignores_setpoint(self):
        ref = np.full(10, 0.8)
        _, a, _ = lti_wkpc(u_s=0.0)
        _, b, _ = lti_wkpc(u_s=3.0)
        ua, _ = a.step(ref)
        ub, _ = b.step(ref)
        assert ua[0] == pytest.approx(ub[0], abs=1e-9)

    def test_free_setpoint_adds_variable(self):
        _, fixed, _ = lti_wkpc(R=0.1)
        _, free, _ = lti_wkpc(R=0.1, u_s="free")
        assert free.layout()["n"] == fixed.layout()["n"] + 1

    def test_future_lifted_rows(self):
        _, ctrl, _ = lti_wkpc(future_z=True)
        assert ctrl.layout()["z"].stop - ctrl.layout()["z"].start == ctrl.n_pred * 10
        u, diag = ctrl.step(np.full(ctrl.n_pred, 0.2))
        assert diag["status"] == "optimal"

    def test_diagnostics_schema(self):
        _, ctrl, _ = lti_wkpc()
        _, diag = ctrl.step(np.zeros(ctrl.n_pred))
        for key in ("objective", "norm_g", "norm_sigma", "solve_time_s", "status"):
            assert key in diag


class TestClosedLoop:
    @pytest.mark.parametrize("seed", range(3))
    def test_regulates_lti(self, seed):
        plant, ctrl, x_end = lti_wkpc(seed)
        result = regulate(plant, ctrl, x_end)
        assert result.ok
        assert steady_error(result, 5.0) < 1e-3

    def test_delay_lifting_regulates_lti(self):
        plant, u, y, x = lti_setup(3, 0)
        ctrl = WKPC(WKPCConfig(**LINEAR, lift_source="delay"), u, y)
        result = regulate(plant, ctrl, x.data[-1])
        assert result.ok and steady_error(result, 5.0) < 1e-3

    def test_run_is_bit_reproducible(self):
        runs = []
        for _ in range(2):
            plant, ctrl, x_end = lti_wkpc(1, resample_centers=True)
            runs.append(regulate(plant, ctrl, x_end, duration_s=2.0).u_applied)
        assert np.array_equal(*runs)

    def test_pendulum_saturates_at_box(self):
        plant = Pendulum(PendulumParams(k=0.5))
        u, y, x = offline_excitation(plant, 20.0, 3.5, seed=1, u_box=(-3.5, 3.5))
        ctrl = WKPC(WKPCConfig(u_s="free"), u, y, x)
        result = run_closed_loop(Pendulum(PendulumParams(k=0.5)), ctrl, Reference(), 5.0, DT)
        assert result.ok
        assert np.max(np.abs(result.u_applied)) == 3.5


class TestObserve:
    def test_frozen_keeps_hankels(self):
        _, ctrl, _ = lti_wkpc()
        before = [H.copy() for H in ctrl.buffer_hankels()]
        ctrl.observe(0.3, 0.2, np.zeros(3))
        assert all(np.array_equal(a, b) for a, b in zip(before, ctrl.buffer_hankels()))
        assert np.array_equal(ctrl.recent_extra["s"][-1], np.zeros(3))

    def test_rolling_fifo(self):
        _, ctrl, _ = lti_wkpc(buffer_mode="rolling")
        first = ctrl.buffer.u[1].copy()
        ctrl.observe(0.3, 0.2, np.ones(3))
        assert np.array_equal(ctrl.buffer.u[0], first)
        assert ctrl.buffer.u[-1, 0] == 0.3
        assert np.array_equal(ctrl.buffer.extras["s"][-1], np.ones(3))

    def test_state_required(self):
        _, ctrl, _ = lti_wkpc()
        with pytest.raises(ValueError, match="x_measured"):
            ctrl.observe(0.3, 0.2)
