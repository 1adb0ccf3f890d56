import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ddpc.plants import Pendulum, PendulumParams, make_random_stable_lti
from ddpc.signals import (BufferModeError, DataBuffer, DimensionError, Trajectory,
                          behavioral_residual, build_hankel, hankel_matrix,
                          is_persistently_exciting, lstsq_residual, persistent_excitation_order,
                          stacked_hankel)

from oracles import brute_force_pe_order, naive_hankel, simulate_lti


def traj(values, dt=0.1):
    return Trajectory.from_samples(values, dt)


class TestTrajectory:
    def test_read_only(self):
        w = traj([1.0, 2.0])
        with pytest.raises(ValueError):
            w.data[0, 0] = 5.0

    def test_rejects_bad_dt(self):
        with pytest.raises(ValueError):
            Trajectory(np.zeros((3, 1)), 0.0)

    def test_csv_round_trip(self, tmp_path):
        rng = np.random.default_rng(3)
        w = Trajectory(rng.standard_normal((7, 2)), 0.1)
        path = tmp_path / "w.csv"
        w.to_csv(path)
        assert path.read_text().splitlines()[0] == "t,ch0,ch1"
        back = Trajectory.from_csv(path)
        assert np.array_equal(back.data, w.data)
        assert back.dt == pytest.approx(0.1)


class TestHankel:
    def test_scalar_depth_two(self):
        H = build_hankel(traj([1, 2, 3, 4]), 2).matrix
        assert H.tolist() == [[1, 2, 3], [2, 3, 4]]

    def test_single_sample(self):
        assert build_hankel(traj([5]), 1).matrix.tolist() == [[5]]

    def test_two_channels_against_naive(self):
        w = np.arange(12, dtype=float).reshape(6, 2) ** 1.5
        H = build_hankel(Trajectory(w, 1.0), 3)
        assert H.matrix.shape == (6, 4)
        assert np.array_equal(H.matrix, naive_hankel(w, 3))
        for j in range(4):
            assert np.array_equal(H.matrix[:, j], w[j:j + 3].ravel())

    def test_too_short_names_both_lengths(self):
        with pytest.raises(DimensionError, match="3.*5"):
            build_hankel(traj([1, 2, 3]), 5)

    def test_split(self):
        H = build_hankel(traj(np.arange(10.0)), 4, past=1)
        assert H.past_rows.shape == (1, 7)
        assert H.future_rows.shape == (3, 7)
        assert H.block(2, 3)[0] == 5.0

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 30), st.integers(1, 3), st.data())
    def test_anti_diagonal(self, T, c, data):
        L = data.draw(st.integers(1, T))
        w = np.random.default_rng(T * 7 + c).standard_normal((T, c))
        H = hankel_matrix(w, L)
        for i in range(1, L):
            for j in range(H.shape[1] - 1):
                assert np.array_equal(H[i * c:(i + 1) * c, j], H[(i - 1) * c:i * c, j + 1])


class TestPersistentExcitation:
    def test_zero_series(self):
        assert persistent_excitation_order(traj(np.zeros(10))) == 0

    def test_constant_series(self):
        assert persistent_excitation_order(traj(np.ones(10))) == 1

    def test_random_series_reaches_feasibility_cap(self):
        w = np.random.default_rng(0).uniform(-1, 1, 40)
        assert persistent_excitation_order(traj(w)) == 20
        assert brute_force_pe_order(w) == 20

    def test_periodic_series(self):
        # period-3 pattern: Hankel rank is 3
        w = np.tile([1.0, -2.0, 4.0], 8)
        assert persistent_excitation_order(traj(w)) == 3 == brute_force_pe_order(w)

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.integers(-3, 3), min_size=1, max_size=24))
    def test_matches_brute_force_on_integer_series(self, values):
        w = np.array(values, dtype=float)
        assert persistent_excitation_order(traj(w)) == brute_force_pe_order(w)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(2, 40), st.integers(0, 2**16))
    def test_monotone(self, T, seed):
        w = traj(np.random.default_rng(seed).integers(-1, 2, T).astype(float))
        order = persistent_excitation_order(w)
        for L in range(1, order + 1):
            assert is_persistently_exciting(w, L)


def lti_data(order, T, seed, n_inputs=1):
    plant = make_random_stable_lti(order, seed=seed, n_inputs=n_inputs)
    rng = np.random.default_rng(seed + 1000)
    u = rng.uniform(-1, 1, (T, n_inputs))
    x0 = rng.standard_normal(order)
    y, _ = simulate_lti(plant.A, plant.B, plant.C, x0, u)
    return plant, Trajectory(u), Trajectory(y)


class TestBehavioralResidual:
    def test_hankel_column_is_explained(self):
        rng = np.random.default_rng(1)
        u, y = Trajectory(rng.standard_normal((30, 1))), Trajectory(rng.standard_normal((30, 1)))
        L = 4
        H = stacked_hankel([u, y], L)
        col = H[:, 7]
        probe_u, probe_y = Trajectory(col[:L]), Trajectory(col[L:])
        assert behavioral_residual(u, y, probe_u, probe_y, L) < 1e-12

    def test_sum_of_columns_is_explained(self):
        rng = np.random.default_rng(2)
        u, y = Trajectory(rng.standard_normal((30, 1))), Trajectory(rng.standard_normal((30, 1)))
        L = 4
        H = stacked_hankel([u, y], L)
        col = H[:, 3] + H[:, 11]
        assert behavioral_residual(u, y, Trajectory(col[:L]), Trajectory(col[L:]), L) < 1e-12

    def test_fresh_lti_trajectory(self):
        L = 6
        plant, u, y = lti_data(2, 60, seed=4)
        assert persistent_excitation_order(u) >= L + 2
        rng = np.random.default_rng(99)
        pu = rng.uniform(-1, 1, (L, 1))
        py, _ = simulate_lti(plant.A, plant.B, plant.C, rng.standard_normal(2), pu)
        assert behavioral_residual(u, y, Trajectory(pu), Trajectory(py), L) < 1e-8

    def test_foreign_trajectory_is_not_explained(self):
        L = 6
        plant, u, y = lti_data(2, 60, seed=4)
        pu = np.ones((L, 1))
        py = np.arange(L, dtype=float).reshape(L, 1) ** 2
        assert behavioral_residual(u, y, Trajectory(pu), Trajectory(py), L) > 1e-3

    def test_channel_mismatch(self):
        u, y = Trajectory(np.zeros((20, 1))), Trajectory(np.zeros((20, 1)))
        with pytest.raises(DimensionError, match="input channels"):
            behavioral_residual(u, y, Trajectory(np.zeros((3, 2))), Trajectory(np.zeros((3, 1))), 3)

    def test_invariant_under_column_reordering(self):
        plant, u, y = lti_data(3, 50, seed=8)
        L = 5
        H = stacked_hankel([u, y], L)
        w = np.random.default_rng(5).standard_normal(2 * L)
        perm = np.random.default_rng(6).permutation(H.shape[1])
        assert abs(lstsq_residual(H, w) - lstsq_residual(H[:, perm], w)) < 1e-10


class TestDataBuffer:
    def test_fifo_eviction(self):
        buf = DataBuffer(3, [[1.0], [2.0], [3.0]], [[10.0], [20.0], [30.0]], "rolling")
        buf.append(4.0, 40.0)
        assert buf.u.ravel().tolist() == [2.0, 3.0, 4.0]
        assert buf.y.ravel().tolist() == [20.0, 30.0, 40.0]

    def test_grows_until_capacity(self):
        buf = DataBuffer(3, [[1.0], [2.0]], [[1.0], [2.0]], "rolling")
        buf.append(3.0, 3.0)
        assert len(buf) == 3

    def test_frozen_rejects(self):
        buf = DataBuffer(3, [[1.0]], [[1.0]], "frozen")
        with pytest.raises(BufferModeError):
            buf.append(2.0, 2.0)

    def test_extras_follow_samples(self):
        buf = DataBuffer(2, [[1.0], [2.0]], [[1.0], [2.0]], "rolling", extras={"x": [[1, 1], [2, 2]]})
        buf.append(3.0, 3.0, x=[3.0, 3.0])
        assert buf.extra("x").data.tolist() == [[2.0, 2.0], [3.0, 3.0]]
        with pytest.raises(DimensionError):
            buf.append(4.0, 4.0)

    def test_streamed_pendulum_run_keeps_last_window(self):
        plant = Pendulum(PendulumParams(k=0.5))
        rng = np.random.default_rng(0)
        state = plant.reset()
        us, ys = [], []
        buf = DataBuffer(200, np.zeros((1, 1)), np.zeros((1, 1)), "rolling")
        for _ in range(350):
            u = rng.uniform(-2, 2)
            state, y = plant.sample_step(state, u, 0.1)
            us.append(u)
            ys.append(y[0])
            buf.append(u, y)
            assert len(buf) <= 200
        assert np.array_equal(buf.u.ravel(), np.array(us[-200:]))
        assert np.array_equal(buf.y.ravel(), np.array(ys[-200:]))
