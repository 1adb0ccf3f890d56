"""Model-free adaptive predictive control with compact-form dynamic linearization.

The plant is treated as ``dy[k+1] = phi[k] * du[k]`` with a time-varying
pseudo partial derivative (PPD) ``phi``. Each sample the PPD estimate is
updated by a projection rule, future PPDs are forecast with an adaptive
autoregressive model, and the input increment follows from a regularized
least-squares tracking problem over the horizon. SISO only.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError
from .signals import seconds_to_samples


@dataclass
class MFAPCConfig:
    N: float = 0.5
    lam: float = 0.37
    rho: float = 1.0
    mu: float = 1.0
    eta: float = 1.0
    epsilon: float = 1e-5
    delta: float = 0.5
    phi0: float = 0.1
    theta0: Sequence[float] = (0.175, 0.175, 0.175, 0.175)
    n_m: int = 4
    M: Optional[float] = None
    dt: float = 0.1

    def __post_init__(self):
        self.theta0 = tuple(float(v) for v in self.theta0)
        if self.dt <= 0:
            raise ConfigError("dt", "must be > 0")
        if self.horizon < 1:
            raise ConfigError("N", f"horizon must be at least one sample (got {self.N} s at dt = {self.dt} s)")
        if self.lam <= 0:
            raise ConfigError("lambda", "must be > 0")
        if self.mu <= 0:
            raise ConfigError("mu", "must be > 0")
        if not 0 < self.eta <= 2:
            raise ConfigError("eta", "step factor must lie in (0, 2]")
        if self.epsilon <= 0:
            raise ConfigError("epsilon", "must be > 0")
        if self.delta <= 0:
            raise ConfigError("delta", "must be > 0")
        if self.phi0 == 0 or abs(self.phi0) < self.epsilon:
            raise ConfigError("phi0", "initial PPD must be nonzero with |phi0| >= epsilon")
        if not 2 <= self.n_m <= 7:
            raise ConfigError("n_m", "forecaster order must lie in [2, 7]")
        if len(self.theta0) != self.n_m:
            raise ConfigError("theta0", f"needs n_m = {self.n_m} entries, got {len(self.theta0)}")
        if self.M is None:
            self.M = 10.0 * float(np.linalg.norm(self.theta0)) + 1.0
        if self.M <= 0:
            raise ConfigError("M", "must be > 0")
        if np.linalg.norm(self.theta0) >= self.M:
            raise ConfigError("M", "must exceed the norm of theta0")

    @property
    def horizon(self) -> int:
        return seconds_to_samples(self.N, self.dt, "N")


def ppd_violates(phi: float, phi1: float, epsilon: float) -> bool:
    """True when ``phi`` breaks the sign/magnitude assumption on the PPD."""
    return abs(phi) < epsilon or np.sign(phi) != np.sign(phi1)


@dataclass
class PPDEstimator:
    phi1: float
    n_m: int
    phi_hat: float = field(init=False)
    history: np.ndarray = field(init=False)  # [phi_k, phi_{k-1}, ..., phi_{k-n_m}]
    prev_u: float = 0.0
    prev_y: Optional[float] = None
    prev_du: float = 0.0
    raw: float = field(init=False)
    guard_fired: bool = False
    reset_fired: bool = False

    def __post_init__(self):
        self.phi_hat = self.phi1
        self.raw = self.phi1
        self.history = np.full(self.n_m + 1, float(self.phi1))


def estimate_ppd(est: PPDEstimator, y_k: float, mu: float, eta: float,
                 epsilon: float) -> PPDEstimator:
    """Projection update of the PPD estimate from the newest output sample."""
    if est.prev_y is None:
        est.prev_y = y_k
        return est
    dy = y_k - est.prev_y
    du = est.prev_du
    phi = est.phi_hat
    raw = phi + eta * du / (mu + du * du) * (dy - phi * du)
    est.raw = raw
    est.guard_fired = ppd_violates(raw, est.phi1, epsilon)
    est.reset_fired = est.guard_fired or abs(du) <= epsilon
    est.phi_hat = est.phi1 if est.reset_fired else raw
    est.history = np.concatenate([[est.phi_hat], est.history[:-1]])
    est.prev_y = y_k
    return est


def step_direction_guard(est: PPDEstimator) -> bool:
    """Whether the last raw estimate violated the sign/magnitude assumption."""
    return est.guard_fired


@dataclass
class PPDForecaster:
    theta: np.ndarray
    theta1: np.ndarray
    M: float

    @classmethod
    def from_initial(cls, theta0: Sequence[float], M: float) -> "PPDForecaster":
        t = np.asarray(theta0, dtype=float)
        return cls(t.copy(), t.copy(), M)


def update_forecaster(fc: PPDForecaster, phi_history: np.ndarray, phi_now: float,
                      delta: float) -> PPDForecaster:
    """Normalized-gradient update of the forecast coefficients.

    ``phi_history`` holds ``[phi_{k-1}, ..., phi_{k-n_m}]``.
    """
    h = np.asarray(phi_history, dtype=float)
    fc.theta = fc.theta + h / (delta + h @ h) * (phi_now - h @ fc.theta)
    if np.linalg.norm(fc.theta) >= fc.M:
        fc.theta = fc.theta1.copy()
    return fc


def forecast_ppd(fc: PPDForecaster, phi_history: np.ndarray, N: int, phi1: float,
                 epsilon: float) -> np.ndarray:
    """Forecast ``phi_{k+1} .. phi_{k+N-1}`` from ``[phi_k, phi_{k-1}, ...]``."""
    n_m = fc.theta.size
    window = list(np.asarray(phi_history, dtype=float)[:n_m])
    if len(window) < n_m:
        raise ValueError(f"forecasting needs {n_m} past estimates, got {len(window)}")
    out = np.empty(max(N - 1, 0))
    for j in range(out.size):
        v = float(np.dot(fc.theta, window))
        if ppd_violates(v, phi1, epsilon):
            v = phi1
        out[j] = v
        window = [v] + window[:-1]
    return out


def prediction_matrix(phis: np.ndarray) -> np.ndarray:
    """Lower-triangular ``A`` with ``A[i, j] = phis[j]`` for ``j <= i``."""
    phis = np.asarray(phis, dtype=float)
    return np.tril(np.broadcast_to(phis, (phis.size, phis.size)))


def control_increment(A: np.ndarray, y_k: float, y_star: np.ndarray, lam: float) -> np.ndarray:
    """Minimize ||y* - (y_k + A dU)||^2 + lam ||dU||^2 over the increments dU."""
    rhs = A.T @ (np.asarray(y_star, dtype=float) - y_k)
    return np.linalg.solve(A.T @ A + lam * np.eye(A.shape[1]), rhs)


class MFAPC:
    """Closed-loop MFAPC-CFDL controller.

    Protocol: ``reset(y0)`` once, then per sample ``step(reference)`` followed
    by ``observe(u_applied, y_next)``.
    """

    def __init__(self, config: MFAPCConfig):
        self.config = config
        self.N = config.horizon
        self.estimator = PPDEstimator(config.phi0, config.n_m)
        self.forecaster = PPDForecaster.from_initial(config.theta0, config.M)
        self.y = None

    def reset(self, y0, x0=None) -> None:
        self.estimator = PPDEstimator(self.config.phi0, self.config.n_m)
        self.forecaster = PPDForecaster.from_initial(self.config.theta0, self.config.M)
        self.y = float(np.asarray(y0).ravel()[0])
        self.estimator.prev_y = self.y

    def step(self, reference) -> tuple[np.ndarray, dict]:
        if self.y is None:
            raise RuntimeError("MFAPC.step called before reset()")
        cfg = self.config
        t0 = time.perf_counter()
        r = np.asarray(reference, dtype=float).ravel()
        if r.size != self.N:
            raise ValueError(f"reference window must have N = {self.N} samples, got {r.size}")
        est = self.estimator
        phis = np.empty(self.N)
        phis[0] = est.phi_hat
        phis[1:] = forecast_ppd(self.forecaster, est.history, self.N, cfg.phi0, cfg.epsilon)
        A = prediction_matrix(phis)
        dU = control_increment(A, self.y, r, cfg.lam)
        u = est.prev_u + cfg.rho * dU[0]
        diag = {
            "phi_hat": est.phi_hat,
            "guard_fired": est.guard_fired,
            "norm_theta": float(np.linalg.norm(self.forecaster.theta)),
            "delta_u": float(cfg.rho * dU[0]),
            "compute_time_s": time.perf_counter() - t0,
        }
        return np.array([u]), diag

    def observe(self, u_applied, y_measured, x_measured=None) -> None:
        cfg = self.config
        est = self.estimator
        u = float(np.asarray(u_applied).ravel()[0])
        y = float(np.asarray(y_measured).ravel()[0])
        est.prev_du = u - est.prev_u
        est.prev_u = u
        estimate_ppd(est, y, cfg.mu, cfg.eta, cfg.epsilon)
        update_forecaster(self.forecaster, est.history[1:], est.history[0], cfg.delta)
        self.y = y
