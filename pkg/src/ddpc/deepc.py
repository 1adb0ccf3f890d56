"""Data-enabled predictive control with slack and an optimized artificial setpoint.

Each step solves, over ``(g, u, y, sigma, u_s, y_s)``::

    min  sum_k |y_k - y_s|_Q^2 + |r_k - y_s|_S^2 + |u_k - u_s|_R^2
         + lambda_g |g|^2 + lambda_sigma |sigma|^2
    s.t. [Up; Yp; Uf; Yf] g = [u_ini; y_ini + sigma; u; y]
         last Tini predicted (u, y) samples equal (u_s, y_s)
         u_k in U, y_k in Y

and applies the first predicted input.

Data alignment: sample ``k`` pairs the input applied over ``[k, k+1)`` with
the output measured at the end of that period. After measuring the newest
output, the past window therefore already contains it and the prediction
starts with the next output.
"""

from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .errors import ConfigError, ControllerError, PersistencyError
from .qpsolve import INFEASIBLE, QPProblem, QPSolver, QPSolution
from .signals import (DataBuffer, DimensionError, Trajectory, hankel_matrix,
                      is_persistently_exciting, persistent_excitation_order,
                      seconds_to_samples)

log = logging.getLogger(__name__)

Weight = Union[float, Sequence[Sequence[float]], np.ndarray]


def weight_matrix(w: Weight, dim: int, name: str) -> np.ndarray:
    """Broadcast a scalar weight to ``w * I``; validate matrix weights."""
    W = np.asarray(w, dtype=float)
    if W.ndim == 0:
        if W < 0:
            raise ConfigError(name, "weight must be >= 0")
        return float(W) * np.eye(dim)
    if W.shape != (dim, dim):
        raise ConfigError(name, f"weight must be a scalar or a {dim}x{dim} matrix")
    if not np.allclose(W, W.T) or np.linalg.eigvalsh(W)[0] < -1e-12:
        raise ConfigError(name, "weight matrix must be symmetric positive semidefinite")
    return W


def box_bounds(box, dim: int, horizon: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-variable bounds for a horizon of ``dim``-vectors from an interval box."""
    if box is None:
        return np.full(dim * horizon, -np.inf), np.full(dim * horizon, np.inf)
    arr = np.asarray(box, dtype=float)
    if arr.shape == (2,):
        lo, hi = np.full(dim, arr[0]), np.full(dim, arr[1])
    elif arr.shape == (dim, 2):
        lo, hi = arr[:, 0], arr[:, 1]
    else:
        raise ConfigError("box", f"expected [lo, hi] or a {dim}x2 array, got shape {arr.shape}")
    lo = np.where(np.isnan(lo), -np.inf, lo)
    hi = np.where(np.isnan(hi), np.inf, hi)
    if np.any(lo > hi):
        raise ConfigError("box", "lower bound exceeds upper bound")
    return np.tile(lo, horizon), np.tile(hi, horizon)


@dataclass
class DeePCConfig:
    T: float = 20.0
    Tini: float = 0.3
    N: float = 0.5
    Q: Weight = 100.0
    S: Weight = 300.0
    R: Weight = 10.0
    lambda_g: float = 50.0
    lambda_sigma: float = 1e7
    u_box: Optional[Sequence] = (-3.5, 3.5)
    y_box: Optional[Sequence] = None
    dt: float = 0.1
    order_bound: Optional[int] = None
    buffer_mode: str = "frozen"
    slack_on_future: bool = False
    tol: float = 1e-8
    max_iter: int = 20000

    def __post_init__(self):
        if self.dt <= 0:
            raise ConfigError("dt", "must be > 0")
        if self.lambda_g <= 0 or self.lambda_sigma <= 0:
            raise ConfigError("lambda_g" if self.lambda_g <= 0 else "lambda_sigma",
                              "regularizers must satisfy λ_g, λ_σ > 0")
        for name in ("Q", "S", "R"):
            if np.any(np.linalg.eigvalsh(np.atleast_2d(np.asarray(getattr(self, name), float))) < -1e-12):
                raise ConfigError(name, "weight must be >= 0")
        if self.n_ini < 1:
            raise ConfigError("Tini", "initialization window must be at least one sample")
        if self.n_pred < 1:
            raise ConfigError("N", "prediction horizon must be at least one sample")
        if self.n_data < self.depth:
            raise ConfigError("T", f"offline data ({self.n_data} samples) must cover "
                                   f"Tini + N = {self.depth} samples")
        if self.buffer_mode not in ("frozen", "rolling"):
            raise ConfigError("buffer_mode", "must be 'frozen' or 'rolling'")

    @property
    def n_data(self) -> int:
        return seconds_to_samples(self.T, self.dt, "T")

    @property
    def n_ini(self) -> int:
        return seconds_to_samples(self.Tini, self.dt, "Tini")

    @property
    def n_pred(self) -> int:
        return seconds_to_samples(self.N, self.dt, "N")

    @property
    def depth(self) -> int:
        return self.n_ini + self.n_pred

    @property
    def g_dim(self) -> int:
        return self.n_data - self.depth + 1


def check_excitation(u: Trajectory, depth: int, extra: Optional[int], what: str) -> int:
    """Verify the offline input is PE of order ``depth + extra``; return that order."""
    if extra is None:
        warnings.warn(f"no {what} declared; checking persistency of excitation of "
                      f"order {depth} only", stacklevel=3)
        required = depth
    else:
        required = depth + extra
    if not is_persistently_exciting(u, required):
        raise PersistencyError(persistent_excitation_order(u), required)
    return required


class HankelPredictor:
    """Shared machinery for Hankel-based predictive controllers: data buffer,
    past windows, QP solver and warm starts."""

    def __init__(self, n_ini: int, n_pred: int, n_data: int, u: Trajectory,
                 y: Trajectory, buffer_mode: str, tol: float, max_iter: int,
                 **extras: Trajectory):
        if len(u) != len(y) or any(len(v) != len(u) for v in extras.values()):
            raise DimensionError("offline trajectories must have equal length")
        depth = n_ini + n_pred
        if len(u) < max(n_data, depth):
            raise DimensionError(f"offline data has {len(u)} samples, "
                                 f"needs {max(n_data, depth)}")
        tail = slice(len(u) - n_data, None)
        self.n_ini, self.n_pred = n_ini, n_pred
        self.m, self.p = u.channels, y.channels
        self.buffer = DataBuffer(n_data, u.data[tail], y.data[tail], buffer_mode, u.dt,
                                 {k: v.data[tail] for k, v in extras.items()})
        self.recent_u = u.data[-n_ini:].copy()
        self.recent_y = y.data[-n_ini:].copy()
        self.recent_extra = {k: v.data[-n_ini:].copy() for k, v in extras.items()}
        self.solver = QPSolver(tol=tol, max_iter=max_iter)
        self.last_solution: Optional[QPSolution] = None
        self.step_timer = 0.0
        self._hankels = None

    @property
    def depth(self) -> int:
        return self.n_ini + self.n_pred

    def hankel(self, data: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        H = hankel_matrix(data, self.depth)
        c = data.shape[1]
        return H[: self.n_ini * c], H[self.n_ini * c:]

    def shift_windows(self, u, y, **extra) -> None:
        u = np.atleast_1d(np.asarray(u, dtype=float)).reshape(1, -1)
        y = np.atleast_1d(np.asarray(y, dtype=float)).reshape(1, -1)
        if u.shape[1] != self.m or y.shape[1] != self.p:
            raise DimensionError(f"expected {self.m} input(s) and {self.p} output(s), "
                                 f"got {u.shape[1]} and {y.shape[1]}")
        self.recent_u = np.vstack([self.recent_u[1:], u])
        self.recent_y = np.vstack([self.recent_y[1:], y])
        for k, v in extra.items():
            v = np.atleast_1d(np.asarray(v, dtype=float)).reshape(1, -1)
            self.recent_extra[k] = np.vstack([self.recent_extra[k][1:], v])
        if self.buffer.mode == "rolling":
            self.buffer.append(u, y, **extra)
            self._hankels = None

    def warm_start(self, n: int, time_blocks: Sequence[tuple[int, int, int]]) -> Optional[np.ndarray]:
        """Previous solution with every time-indexed block shifted one sample
        and zeros appended."""
        prev = self.last_solution
        if prev is None or prev.status == INFEASIBLE or prev.x.size != n:
            return None
        x = prev.x.copy()
        for start, width, stride in time_blocks:
            blk = x[start:start + width].copy()
            x[start:start + width] = np.concatenate([blk[stride:], np.zeros(stride)])
        return x

    def solve(self, problem: QPProblem, time_blocks) -> QPSolution:
        x0 = self.warm_start(problem.n, time_blocks)
        t0 = time.perf_counter()
        sol = self.solver.solve(problem, x0)
        self.step_timer = time.perf_counter() - t0
        if sol.status == INFEASIBLE:
            raise ControllerError("predictive-control QP is infeasible", problem.to_text())
        if sol.status != "optimal":
            log.warning("QP stopped with status %s (primal %.2e, dual %.2e)",
                        sol.status, sol.primal_residual, sol.dual_residual)
        self.last_solution = sol
        return sol


class DeePC(HankelPredictor):
    """DeePC controller.

    Protocol: ``step(reference)`` with the next ``N`` reference samples, then
    ``observe(u_applied, y_measured)`` once the plant responded.
    """

    def __init__(self, config: DeePCConfig, offline_u: Trajectory, offline_y: Trajectory):
        self.config = config
        if len(offline_u) < config.n_data:
            raise DimensionError(f"offline data has {len(offline_u)} samples, "
                                 f"T = {config.T} s needs {config.n_data}")
        u_used = offline_u.window(len(offline_u) - config.n_data, len(offline_u))
        self.required_pe_order = check_excitation(u_used, config.depth, config.order_bound,
                                                  "system order bound")
        super().__init__(config.n_ini, config.n_pred, config.n_data, offline_u, offline_y,
                         config.buffer_mode, config.tol, config.max_iter)
        m, p = self.m, self.p
        self.Q = weight_matrix(config.Q, p, "Q")
        self.S = weight_matrix(config.S, p, "S")
        self.R = weight_matrix(config.R, m, "R")
        self.u_lo, self.u_hi = box_bounds(config.u_box, m, self.n_pred)
        self.y_lo, self.y_hi = box_bounds(config.y_box, p, self.n_pred)
        self._structure = None

    def reset(self, y0=None, x0=None) -> None:
        """Past windows stay primed from the tail of the offline data."""

    # -- QP assembly --------------------------------------------------------

    def layout(self) -> dict:
        ng = self.buffer_hankels()[0].shape[1]
        m, p, N, Ti = self.m, self.p, self.n_pred, self.n_ini
        n_sigma = (Ti + N) * p if self.config.slack_on_future else Ti * p
        sizes = [("g", ng), ("u", N * m), ("y", N * p), ("sigma", n_sigma),
                 ("us", m), ("ys", p)]
        out, start = {}, 0
        for name, size in sizes:
            out[name] = slice(start, start + size)
            start += size
        out["n"] = start
        return out

    def buffer_hankels(self):
        if self._hankels is None:
            Up, Uf = self.hankel(self.buffer.u)
            Yp, Yf = self.hankel(self.buffer.y)
            self._hankels = (Up, Yp, Uf, Yf)
            self._structure = None
        return self._hankels

    def _static_structure(self):
        """Cost Hessian, reference-independent linear term pieces and the
        equality matrix; rebuilt only when the Hankel matrices change."""
        if self._structure is not None:
            return self._structure
        Up, Yp, Uf, Yf = self.buffer_hankels()
        lay = self.layout()
        n, m, p, N, Ti = lay["n"], self.m, self.p, self.n_pred, self.n_ini
        cfg = self.config
        P = np.zeros((n, n))
        gi, ui, yi, si = lay["g"], lay["u"], lay["y"], lay["sigma"]
        usi, ysi = lay["us"], lay["ys"]
        P[gi, gi] += 2 * cfg.lambda_g * np.eye(gi.stop - gi.start)
        P[si, si] += 2 * cfg.lambda_sigma * np.eye(si.stop - si.start)
        for k in range(N):
            yk = slice(yi.start + k * p, yi.start + (k + 1) * p)
            uk = slice(ui.start + k * m, ui.start + (k + 1) * m)
            for a, b, W in ((yk, ysi, self.Q), (uk, usi, self.R)):
                P[a, a] += 2 * W
                P[b, b] += 2 * W
                P[a, b] -= 2 * W
                P[b, a] -= 2 * W
            P[ysi, ysi] += 2 * self.S

        n_term = min(Ti, N)
        rows = []
        nrow = Ti * m + Ti * p + N * m + N * p + n_term * (m + p)
        A = np.zeros((nrow, n))
        r = 0
        A[r:r + Ti * m, gi] = Up
        r += Ti * m
        A[r:r + Ti * p, gi] = Yp
        A[r:r + Ti * p, si.start:si.start + Ti * p] = -np.eye(Ti * p)
        rows.append(("y_ini", r, r + Ti * p))
        r += Ti * p
        A[r:r + N * m, gi] = Uf
        A[r:r + N * m, ui] = -np.eye(N * m)
        r += N * m
        A[r:r + N * p, gi] = Yf
        A[r:r + N * p, yi] = -np.eye(N * p)
        if cfg.slack_on_future:
            A[r:r + N * p, si.start + Ti * p:si.stop] = -np.eye(N * p)
        r += N * p
        for k in range(N - n_term, N):
            A[r:r + m, ui.start + k * m:ui.start + (k + 1) * m] = np.eye(m)
            A[r:r + m, usi] = -np.eye(m)
            r += m
            A[r:r + p, yi.start + k * p:yi.start + (k + 1) * p] = np.eye(p)
            A[r:r + p, ysi] = -np.eye(p)
            r += p
        lower = np.full(n, -np.inf)
        upper = np.full(n, np.inf)
        lower[ui], upper[ui] = self.u_lo, self.u_hi
        lower[yi], upper[yi] = self.y_lo, self.y_hi
        self._structure = (lay, P, A, lower, upper)
        return self._structure

    def build_qp(self, reference) -> tuple[QPProblem, float]:
        """Assemble the step QP; also returns the constant part of the cost."""
        lay, P, A, lower, upper = self._static_structure()
        N, p = self.n_pred, self.p
        r = np.asarray(reference, dtype=float).reshape(N, p)
        q = np.zeros(lay["n"])
        q[lay["ys"]] = -2 * self.S @ r.sum(axis=0)
        const = float(sum(rk @ self.S @ rk for rk in r))
        b = np.zeros(A.shape[0])
        Ti, m = self.n_ini, self.m
        b[:Ti * m] = self.recent_u.ravel()
        b[Ti * m:Ti * m + Ti * p] = self.recent_y.ravel()
        return QPProblem(P, q, A, b, lower, upper), const

    # -- control loop -------------------------------------------------------

    def step(self, reference) -> tuple[np.ndarray, dict]:
        r = np.asarray(reference, dtype=float)
        if r.size != self.n_pred * self.p:
            raise ValueError(f"reference window must hold N = {self.n_pred} samples")
        problem, const = self.build_qp(r)
        lay = self.layout()
        sol = self.solve(problem, [(lay["u"].start, self.n_pred * self.m, self.m),
                                   (lay["y"].start, self.n_pred * self.p, self.p)])
        x = sol.x
        u = np.clip(x[lay["u"]][: self.m], self.u_lo[: self.m], self.u_hi[: self.m])
        diag = {
            "objective": sol.objective + const,
            "norm_g": float(np.linalg.norm(x[lay["g"]])),
            "norm_sigma": float(np.linalg.norm(x[lay["sigma"]])),
            "solve_time_s": self.step_timer,
            "status": sol.status,
            "iterations": sol.iterations,
            "u_s": x[lay["us"]].copy(),
            "y_s": x[lay["ys"]].copy(),
            "y_pred": x[lay["y"]].copy(),
        }
        return u, diag

    def observe(self, u_applied, y_measured, x_measured=None) -> None:
        self.shift_windows(u_applied, y_measured)
