"""Willems-Koopman predictive control (WKPC).

Plant states are lifted through thin-plate radial basis functions
``psi_i(x) = r_i log10(r_i)``, ``r_i = |x - c_i|``. The lifted states join the
input and output Hankel matrices, and each step solves::

    min  sum_k |y_k - r_k|_Q^2 + |u_k - u_s|_R^2 + lambda_g |g|^2
    s.t. [Zp; Up; Yp; Uf; Yf] g = [z_ini; u_ini; y_ini; u; y],  u in U, y in Y

Lifted samples are aligned with outputs: ``z[k]`` lifts the state at which
``y[k]`` was measured.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .deepc import (HankelPredictor, Weight, box_bounds, check_excitation,
                    weight_matrix)
from .errors import ConfigError
from .qpsolve import QPProblem
from .signals import DimensionError, Trajectory, seconds_to_samples

log = logging.getLogger(__name__)

# centre draws allowed before falling back to jittered duplicates
MAX_CENTER_DRAWS = 1000
JITTER = 1e-6


@dataclass(frozen=True)
class Lifter:
    centers: np.ndarray  # (n_p, state_dim)
    seed: int = 0

    @property
    def n_p(self) -> int:
        return self.centers.shape[0]

    @property
    def state_dim(self) -> int:
        return self.centers.shape[1]


def make_lifter(state_data: Trajectory, n_p: int, seed: int = 0) -> Lifter:
    """Draw ``n_p`` distinct centres uniformly from the bounding box of the states."""
    if n_p < 1:
        raise ValueError(f"lifted dimension n_p must be >= 1, got {n_p}")
    X = np.asarray(state_data.data if isinstance(state_data, Trajectory) else state_data, float)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("state data must be a non-empty (T, n) array")
    rng = np.random.default_rng(seed)
    lo, hi = X.min(axis=0), X.max(axis=0)
    centers: list[np.ndarray] = []
    draws = 0
    while len(centers) < n_p and draws < MAX_CENTER_DRAWS:
        c = rng.uniform(lo, hi)
        draws += 1
        if all(np.any(c != other) for other in centers):
            centers.append(c)
    if len(centers) < n_p:
        # degenerate box: spread the remaining centres over a tiny neighbourhood
        log.warning("state bounding box is degenerate; jittering RBF centres by %g", JITTER)
        while len(centers) < n_p:
            c = rng.uniform(lo - JITTER, hi + JITTER)
            if all(np.any(c != other) for other in centers):
                centers.append(c)
    return Lifter(np.array(centers), seed)


def rbf(r: np.ndarray) -> np.ndarray:
    """``r log10(r)``, extended by continuity with 0 at ``r = 0``."""
    r = np.asarray(r, dtype=float)
    out = np.zeros_like(r)
    pos = r > 0
    out[pos] = r[pos] * np.log10(r[pos])
    return out


def lift(lifter: Lifter, x) -> np.ndarray:
    """Lift one state (shape ``(n,)``) or a batch (shape ``(T, n)``)."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != lifter.state_dim:
        raise DimensionError(f"state dimension {x.shape[-1]} does not match "
                             f"lifter centres of dimension {lifter.state_dim}")
    r = np.linalg.norm(x[..., None, :] - lifter.centers, axis=-1)
    return rbf(r)


def delay_embedding(y: np.ndarray, d: int) -> np.ndarray:
    """Rows ``[y_k, y_{k-1}, ..., y_{k-d+1}]``; the first rows repeat ``y_0``."""
    y = np.asarray(y, dtype=float).reshape(len(y), -1)
    padded = np.vstack([np.repeat(y[:1], d - 1, axis=0), y])
    return np.hstack([padded[d - 1 - i: len(padded) - i] for i in range(d)])


@dataclass
class WKPCConfig:
    T: float = 20.0
    Tini: float = 0.2
    N: float = 0.5
    Q: Weight = 1.0
    R: Weight = 0.1
    lambda_g: float = 0.1
    n_p: int = 10
    u_s: Union[float, Sequence[float], str] = 0.0
    u_box: Optional[Sequence] = (-3.5, 3.5)
    y_box: Optional[Sequence] = None
    dt: float = 0.1
    lift_source: str = "state"
    delay: int = 2
    future_z: bool = False
    resample_centers: bool = False
    seed: int = 0
    buffer_mode: str = "frozen"
    tol: float = 1e-8
    max_iter: int = 20000

    def __post_init__(self):
        if self.dt <= 0:
            raise ConfigError("dt", "must be > 0")
        if self.lambda_g <= 0:
            raise ConfigError("lambda_g", "must be > 0")
        for name in ("Q", "R"):
            if np.any(np.linalg.eigvalsh(np.atleast_2d(np.asarray(getattr(self, name), float))) < -1e-12):
                raise ConfigError(name, "weight must be >= 0")
        if self.n_p < 1:
            raise ConfigError("n_p", "lifted dimension must be >= 1")
        if self.n_ini < 1 or self.n_pred < 1:
            raise ConfigError("Tini" if self.n_ini < 1 else "N", "must span at least one sample")
        if self.n_data < self.depth:
            raise ConfigError("T", f"offline data ({self.n_data} samples) must cover "
                                   f"Tini + N = {self.depth} samples")
        if self.lift_source not in ("state", "delay"):
            raise ConfigError("lift_source", "must be 'state' or 'delay'")
        if self.delay < 1:
            raise ConfigError("delay", "must be >= 1")
        if isinstance(self.u_s, str) and self.u_s != "free":
            raise ConfigError("u_s", "must be a number, a vector or 'free'")
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


class WKPC(HankelPredictor):
    """WKPC controller; ``observe`` needs the measured state when lifting states."""

    def __init__(self, config: WKPCConfig, offline_u: Trajectory, offline_y: Trajectory,
                 offline_x: Optional[Trajectory] = None, lifter: Optional[Lifter] = None):
        self.config = config
        if len(offline_u) < config.n_data:
            raise DimensionError(f"offline data has {len(offline_u)} samples, "
                                 f"T = {config.T} s needs {config.n_data}")
        if config.lift_source == "state":
            if offline_x is None:
                raise ValueError("state lifting needs the offline state trajectory")
            source = offline_x
        else:
            source = Trajectory(delay_embedding(offline_y.data, config.delay), offline_y.dt)
        u_used = offline_u.window(len(offline_u) - config.n_data, len(offline_u))
        self.required_pe_order = check_excitation(u_used, config.depth, config.n_p,
                                                  "lifted dimension")
        super().__init__(config.n_ini, config.n_pred, config.n_data, offline_u, offline_y,
                         config.buffer_mode, config.tol, config.max_iter, s=source)
        self.lifter = lifter or make_lifter(self.buffer.extras["s"], config.n_p, config.seed)
        if self.lifter.n_p != config.n_p:
            raise ConfigError("n_p", f"lifter has {self.lifter.n_p} centres, config says {config.n_p}")
        self._rng = np.random.default_rng(config.seed + 1)
        m, p = self.m, self.p
        self.Q = weight_matrix(config.Q, p, "Q")
        self.R = weight_matrix(config.R, m, "R")
        self.free_us = config.u_s == "free" and np.any(self.R)
        if config.u_s == "free":
            self.u_s = np.zeros(m)
        else:
            self.u_s = np.broadcast_to(np.asarray(config.u_s, float), (m,)).copy()
        self.u_lo, self.u_hi = box_bounds(config.u_box, m, self.n_pred)
        self.y_lo, self.y_hi = box_bounds(config.y_box, p, self.n_pred)
        self._structure = None

    def reset(self, y0=None, x0=None) -> None:
        """Past windows stay primed from the tail of the offline data."""

    def _lifting_sample(self, y, x):
        if self.config.lift_source == "state":
            if x is None:
                raise ValueError("WKPC lifting from states needs x_measured")
            return np.asarray(x, dtype=float).ravel()
        prev = self.recent_extra["s"][-1]
        y = np.atleast_1d(np.asarray(y, dtype=float)).ravel()
        return np.concatenate([y, prev[: prev.size - y.size]])

    # -- QP assembly --------------------------------------------------------

    def buffer_hankels(self):
        if self._hankels is None:
            Z = lift(self.lifter, self.buffer.extras["s"])
            Zp, Zf = self.hankel(Z)
            Up, Uf = self.hankel(self.buffer.u)
            Yp, Yf = self.hankel(self.buffer.y)
            self._hankels = (Zp, Zf, Up, Yp, Uf, Yf)
            self._structure = None
        return self._hankels

    def layout(self) -> dict:
        ng = self.buffer_hankels()[0].shape[1]
        m, p, N = self.m, self.p, self.n_pred
        sizes = [("g", ng), ("u", N * m), ("y", N * p),
                 ("z", N * self.config.n_p if self.config.future_z else 0),
                 ("us", m if self.free_us else 0)]
        out, start = {}, 0
        for name, size in sizes:
            out[name] = slice(start, start + size)
            start += size
        out["n"] = start
        return out

    def _static_structure(self):
        if self._structure is not None:
            return self._structure
        Zp, Zf, Up, Yp, Uf, Yf = self.buffer_hankels()
        lay = self.layout()
        n, m, p, N = lay["n"], self.m, self.p, self.n_pred
        gi, ui, yi, zi, usi = lay["g"], lay["u"], lay["y"], lay["z"], lay["us"]
        P = np.zeros((n, n))
        P[gi, gi] += 2 * self.config.lambda_g * np.eye(gi.stop - gi.start)
        for k in range(N):
            yk = slice(yi.start + k * p, yi.start + (k + 1) * p)
            uk = slice(ui.start + k * m, ui.start + (k + 1) * m)
            P[yk, yk] += 2 * self.Q
            P[uk, uk] += 2 * self.R
            if self.free_us:
                P[usi, usi] += 2 * self.R
                P[uk, usi] -= 2 * self.R
                P[usi, uk] -= 2 * self.R
        blocks = [(Zp, None), (Up, None), (Yp, None), (Uf, ui), (Yf, yi)]
        if self.config.future_z:
            blocks.append((Zf, zi))
        A = np.zeros((sum(H.shape[0] for H, _ in blocks), n))
        r = 0
        for H, var in blocks:
            A[r:r + H.shape[0], gi] = H
            if var is not None:
                A[r:r + H.shape[0], var] = -np.eye(H.shape[0])
            r += H.shape[0]
        lower = np.full(n, -np.inf)
        upper = np.full(n, np.inf)
        lower[ui], upper[ui] = self.u_lo, self.u_hi
        lower[yi], upper[yi] = self.y_lo, self.y_hi
        self._structure = (lay, P, A, lower, upper)
        return self._structure

    def build_qp(self, reference) -> tuple[QPProblem, float]:
        """Assemble the step QP; also returns the constant part of the cost."""
        lay, P, A, lower, upper = self._static_structure()
        N, m, p = self.n_pred, self.m, self.p
        r = np.asarray(reference, dtype=float).reshape(N, p)
        q = np.zeros(lay["n"])
        const = 0.0
        for k in range(N):
            q[lay["y"].start + k * p: lay["y"].start + (k + 1) * p] = -2 * self.Q @ r[k]
            const += float(r[k] @ self.Q @ r[k])
            if not self.free_us:
                q[lay["u"].start + k * m: lay["u"].start + (k + 1) * m] = -2 * self.R @ self.u_s
                const += float(self.u_s @ self.R @ self.u_s)
        z_ini = lift(self.lifter, self.recent_extra["s"])
        b = np.zeros(A.shape[0])
        head = np.concatenate([z_ini.ravel(), self.recent_u.ravel(), self.recent_y.ravel()])
        b[:head.size] = head
        return QPProblem(P, q, A, b, lower, upper), const

    # -- control loop -------------------------------------------------------

    def step(self, reference) -> tuple[np.ndarray, dict]:
        r = np.asarray(reference, dtype=float)
        if r.size != self.n_pred * self.p:
            raise ValueError(f"reference window must hold N = {self.n_pred} samples")
        if self.config.resample_centers:
            seed = int(self._rng.integers(2**31))
            self.lifter = make_lifter(self.buffer.extras["s"], self.config.n_p, seed)
            self._hankels = None
        problem, const = self.build_qp(r)
        lay = self.layout()
        sol = self.solve(problem, [(lay["u"].start, self.n_pred * self.m, self.m),
                                   (lay["y"].start, self.n_pred * self.p, self.p)])
        x = sol.x
        u = np.clip(x[lay["u"]][: self.m], self.u_lo[: self.m], self.u_hi[: self.m])
        diag = {
            "objective": sol.objective + const,
            "norm_g": float(np.linalg.norm(x[lay["g"]])),
            "norm_sigma": 0.0,
            "solve_time_s": self.step_timer,
            "status": sol.status,
            "iterations": sol.iterations,
            "u_s": x[lay["us"]].copy() if self.free_us else self.u_s.copy(),
            "y_pred": x[lay["y"]].copy(),
        }
        return u, diag

    def observe(self, u_applied, y_measured, x_measured=None) -> None:
        self.shift_windows(u_applied, y_measured, s=self._lifting_sample(y_measured, x_measured))
