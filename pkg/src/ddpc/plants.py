"""Simulated plants: the torque-driven pendulum and discrete LTI test systems.

Continuous plants are integrated with classical RK4 under a zero-order-hold
input; a controller period ``dt`` is split into ``substeps`` RK4 steps.
Scenario hooks scale the input (direction flip, slow gain drift) and add
seeded Gaussian output noise.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import scipy.linalg as sla


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class PendulumParams:
    m: float = 1.0
    r: float = 0.2
    grav: float = 9.81
    k: float = 0.1  # viscous friction, N*m*s/rad

    def __post_init__(self):
        if self.m <= 0 or self.r <= 0:
            raise ValueError(f"pendulum mass and radius must be positive, got m={self.m}, r={self.r}")
        if self.k < 0:
            raise ValueError(f"friction coefficient must be >= 0, got k={self.k}")


@dataclass(frozen=True)
class GainDrift:
    """Input gain ramping linearly from 1 at ``start`` to ``final_gain`` at ``end``."""

    start: float
    end: float
    final_gain: float

    def __post_init__(self):
        if self.end < self.start:
            raise ValueError("gain drift must end after it starts")

    def gain(self, t: float) -> float:
        if t <= self.start:
            return 1.0
        if t >= self.end or self.end == self.start:
            return self.final_gain
        frac = (t - self.start) / (self.end - self.start)
        return 1.0 + frac * (self.final_gain - 1.0)


@dataclass(frozen=True)
class Scenario:
    direction_flip_time: Optional[float] = None
    gain_drift: Optional[GainDrift] = None
    noise_std: float = 0.0

    def __post_init__(self):
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")

    def input_gain(self, t: float) -> float:
        g = 1.0 if self.gain_drift is None else self.gain_drift.gain(t)
        if self.direction_flip_time is not None and t >= self.direction_flip_time - 1e-12:
            g = -g
        return g

    def check_horizon(self, duration: float) -> None:
        times = [self.direction_flip_time]
        if self.gain_drift is not None:
            times += [self.gain_drift.start, self.gain_drift.end]
        for t in times:
            if t is not None and not 0 <= t <= duration:
                raise ValueError(f"scenario time {t} s lies outside the run [0, {duration}] s")


@dataclass
class PlantState:
    x: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float).ravel()
        if not np.all(np.isfinite(self.x)):
            raise DivergenceError(f"non-finite plant state {self.x} at t={self.t:.6g} s")


def pendulum_deriv(params: PendulumParams, x: np.ndarray, tau: float) -> np.ndarray:
    m, r, g, k = params.m, params.r, params.grav, params.k
    return np.array([x[1], -(g / r) * np.sin(x[0]) - (k / (m * r)) * x[1] + tau / (m * r)])


def pendulum_energy(params: PendulumParams, x: np.ndarray) -> float:
    m, r, g = params.m, params.r, params.grav
    return 0.5 * m * r**2 * x[1] ** 2 + m * g * r * (1.0 - np.cos(x[0]))


def rk4_step(deriv: Callable, x: np.ndarray, u, h: float) -> np.ndarray:
    """One classical Runge-Kutta step of ``x' = deriv(x, u)`` with ``u`` held."""
    if h <= 0:
        raise ValueError("RK4 step size must be positive")
    k1 = deriv(x, u)
    k2 = deriv(x + 0.5 * h * k1, u)
    k3 = deriv(x + 0.5 * h * k2, u)
    k4 = deriv(x + h * k3, u)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


class Plant:
    """Common stepping logic; subclasses provide ``_advance`` and ``output``."""

    n_states: int
    n_inputs: int = 1
    n_outputs: int = 1

    def __init__(self, scenario: Optional[Scenario] = None, seed: int = 0,
                 x0=None):
        self.scenario = scenario or Scenario()
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self.x0 = np.zeros(self.n_states) if x0 is None else np.asarray(x0, dtype=float)

    def reset(self, seed: Optional[int] = None) -> PlantState:
        if seed is not None:
            self.seed = seed
        self.rng = np.random.default_rng(self.seed)
        return PlantState(self.x0.copy(), 0.0)

    def output(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _advance(self, x: np.ndarray, u: np.ndarray, dt: float,
                 substeps: Optional[int]) -> np.ndarray:
        raise NotImplementedError

    def measure(self, x: np.ndarray) -> np.ndarray:
        y = self.output(x)
        if self.scenario.noise_std > 0:
            y = y + self.scenario.noise_std * self.rng.standard_normal(y.shape)
        return y

    def sample_step(self, state: PlantState, u, dt: float,
                    substeps: Optional[int] = None) -> tuple[PlantState, np.ndarray]:
        """Advance one controller period under held input ``u``.

        Returns the new state and the measured output at the end of the period.
        """
        u = np.atleast_1d(np.asarray(u, dtype=float))
        u_eff = self.scenario.input_gain(state.t) * u
        x = self._advance(state.x, u_eff, dt, substeps)
        t = state.t + dt
        if not np.all(np.isfinite(x)):
            raise DivergenceError(f"plant diverged at t={t:.6g} s: state {x}")
        return PlantState(x, t), self.measure(x)


class Pendulum(Plant):
    n_states = 2

    def __init__(self, params: Optional[PendulumParams] = None,
                 scenario: Optional[Scenario] = None, substeps: int = 40,
                 seed: int = 0, x0=None):
        if substeps < 1:
            raise ValueError("substeps must be >= 1")
        self.params = params or PendulumParams()
        self.substeps = substeps
        super().__init__(scenario, seed, x0)

    def deriv(self, x: np.ndarray, u) -> np.ndarray:
        return pendulum_deriv(self.params, x, float(np.asarray(u).ravel()[0]))

    def output(self, x: np.ndarray) -> np.ndarray:
        return np.array([x[0]])

    def _advance(self, x, u, dt, substeps):
        n = substeps or self.substeps
        h = dt / n
        for _ in range(n):
            x = rk4_step(self.deriv, x, u, h)
        return x


class LTIPlant(Plant):
    """Discrete-time ``x+ = A x + B u``, ``y = C x`` sampled at ``dt``."""

    def __init__(self, A, B, C, dt: float = 1.0,
                 scenario: Optional[Scenario] = None, seed: int = 0, x0=None):
        self.A = np.atleast_2d(np.asarray(A, dtype=float))
        n = self.A.shape[0]
        self.B = np.asarray(B, dtype=float).reshape(n, -1)
        self.C = np.asarray(C, dtype=float).reshape(-1, n)
        if self.A.shape != (n, n):
            raise ValueError(f"A must be square, got {self.A.shape}")
        self.n_states = n
        self.n_inputs = self.B.shape[1]
        self.n_outputs = self.C.shape[0]
        self.dt = dt
        super().__init__(scenario, seed, x0)

    def output(self, x: np.ndarray) -> np.ndarray:
        return self.C @ x

    def _advance(self, x, u, dt, substeps):
        if abs(dt - self.dt) > 1e-12 * max(1.0, self.dt):
            raise ValueError(f"LTI plant sampled at {self.dt} s cannot step by {dt} s")
        return self.A @ x + self.B @ u

    def equilibrium(self, u_eq) -> tuple[np.ndarray, np.ndarray]:
        """Steady state and output for a constant input (requires 1 not an eigenvalue)."""
        u_eq = np.atleast_1d(np.asarray(u_eq, dtype=float))
        x = np.linalg.solve(np.eye(self.n_states) - self.A, self.B @ u_eq)
        return x, self.C @ x


def make_lti(A, B, C, seed: int = 0, dt: float = 1.0, continuous: bool = False,
             scenario: Optional[Scenario] = None, x0=None) -> LTIPlant:
    """LTI plant; continuous-time matrices are discretized exactly (ZOH)."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    n = A.shape[0]
    B = np.asarray(B, dtype=float).reshape(n, -1)
    C = np.asarray(C, dtype=float).reshape(-1, n)
    if A.shape != (n, n):
        raise ValueError(f"A must be square, got {A.shape}")
    if continuous:
        m = B.shape[1]
        M = np.zeros((n + m, n + m))
        M[:n, :n] = A
        M[:n, n:] = B
        E = sla.expm(M * dt)
        A, B = E[:n, :n], E[:n, n:]
    return LTIPlant(A, B, C, dt=dt, scenario=scenario, seed=seed, x0=x0)


def controllability_matrix(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    blocks = [B]
    for _ in range(A.shape[0] - 1):
        blocks.append(A @ blocks[-1])
    return np.hstack(blocks)


def make_random_stable_lti(order: int, seed: int = 0, n_inputs: int = 1,
                           n_outputs: int = 1, radius: tuple[float, float] = (0.3, 0.9),
                           dt: float = 1.0, scenario: Optional[Scenario] = None) -> LTIPlant:
    """Random controllable, observable discrete LTI with spectral radius in ``radius``."""
    if not 1 <= order <= 6:
        raise ValueError(f"order must lie in [1, 6], got {order}")
    rng = np.random.default_rng(seed)
    for _ in range(100):
        M = rng.standard_normal((order, order))
        rho = max(np.abs(np.linalg.eigvals(M)))
        A = M * (rng.uniform(*radius) / rho)
        B = rng.standard_normal((order, n_inputs))
        C = rng.standard_normal((n_outputs, order))
        ctrb = controllability_matrix(A, B)
        obsv = controllability_matrix(A.T, C.T)
        if (np.linalg.matrix_rank(ctrb, tol=1e-6) == order
                and np.linalg.matrix_rank(obsv, tol=1e-6) == order):
            return LTIPlant(A, B, C, dt=dt, scenario=scenario, seed=seed)
    raise RuntimeError("could not draw a controllable random system")
