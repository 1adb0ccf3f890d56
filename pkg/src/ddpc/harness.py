"""Closed-loop experiment runner, benchmark metrics and result files.

Loop convention for step ``k`` (time ``k*dt``): the controller sees the
current measurement ``y_k`` and the reference window ``r_{k+1..k+N}``,
returns ``u_k``; the actuator clamps it, the plant advances one period and
the controller observes ``(u_k, y_{k+1})``. Recorded rows are
``(t_k, r_k, u_requested_k, u_applied_k, y_k)``.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ControllerError
from .plants import DivergenceError, Plant, PlantState, Scenario
from .qpsolve import DegenerateProblemError
from .signals import DimensionError, Trajectory, behavioral_residual, seconds_to_samples

log = logging.getLogger(__name__)

METRIC_LABELS = {
    "abs_integral_error_deg": "Absolute integral error (deg)",
    "min_abs_error_deg": "Minimum absolute error (deg)",
    "max_abs_input_Nm": "Maximum absolute input (Nm)",
    "mean_opt_time_s": "Optimization time (s)",
}


# -- reference signals --------------------------------------------------------

@dataclass(frozen=True)
class Reference:
    """Reference trajectory.

    ``kind`` is ``step`` (``initial`` before ``switch_time``, ``value`` from then
    on), ``constant`` (``value``) or ``piecewise`` (``points`` = ``[(t, v), ...]``,
    each value held from its time on). Values are in ``unit`` (``deg`` or
    ``rad``); ``value_at`` always returns radians. For non-angular outputs use
    ``rad``, which is passed through unchanged.
    """

    kind: str = "step"
    value: float = 20.0
    initial: float = 0.0
    switch_time: float = 0.0
    points: tuple = ()
    unit: str = "deg"

    def __post_init__(self):
        if self.kind not in ("step", "constant", "piecewise"):
            raise ValueError(f"unknown reference kind {self.kind!r}")
        if self.unit not in ("deg", "rad"):
            raise ValueError(f"reference unit must be 'deg' or 'rad', got {self.unit!r}")
        if self.kind == "piecewise":
            pts = tuple((float(t), float(v)) for t, v in self.points)
            if not pts:
                raise ValueError("piecewise reference needs at least one point")
            if any(b[0] < a[0] for a, b in zip(pts, pts[1:])):
                raise ValueError("piecewise reference times must be non-decreasing")
            object.__setattr__(self, "points", pts)

    def _raw(self, t: float) -> float:
        if self.kind == "constant":
            return self.value
        if self.kind == "step":
            return self.value if t >= self.switch_time - 1e-12 else self.initial
        v = self.points[0][1]
        for tp, vp in self.points:
            if t >= tp - 1e-12:
                v = vp
        return v

    def value_at(self, t: float) -> float:
        v = self._raw(t)
        return math.radians(v) if self.unit == "deg" else v

    def sample(self, k: int, dt: float) -> float:
        return self.value_at(k * dt)

    def window(self, k: int, N: int, dt: float) -> np.ndarray:
        """``r_{k+1} .. r_{k+N}`` in radians."""
        return np.array([self.sample(k + j, dt) for j in range(1, N + 1)])


# -- metrics ------------------------------------------------------------------

@dataclass(frozen=True)
class Metrics:
    abs_integral_error_deg: float
    min_abs_error_deg: float
    max_abs_input_Nm: float
    mean_opt_time_s: float
    aie_dt: float

    def __post_init__(self):
        for name, v in asdict(self).items():
            if not v >= 0:
                raise ValueError(f"metric {name} must be >= 0, got {v}")

    def table_rows(self) -> list[tuple[str, float]]:
        return [(METRIC_LABELS[k], getattr(self, k)) for k in METRIC_LABELS]


def steady_window_start(K: int) -> int:
    """First index of the final quarter of a ``K``-sample run."""
    return (3 * K) // 4


def compute_metrics(r, y, u, solve_times, dt: float, to_degrees: bool = True) -> Metrics:
    """Table-3-style metrics.

    AIE is the plain sum of ``|r_k - y_k|`` over samples, ``aie_dt`` the same
    sum times ``dt``. The minimum absolute error is taken over the final 25%
    of the run. Sums use ``math.fsum`` so the result does not depend on
    summation order.
    """
    r = np.asarray(r, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    u = np.asarray(u, dtype=float)
    times = np.asarray(solve_times, dtype=float).ravel()
    K = r.size
    if K == 0:
        raise ValueError("metrics need at least one sample")
    if y.size != K or u.shape[0] != K or times.size != K:
        raise DimensionError(f"series lengths differ: r {K}, y {y.size}, "
                             f"u {u.shape[0]}, solve times {times.size}")
    err = np.abs(r - y)
    if to_degrees:
        err = err * (180.0 / math.pi)
    aie = math.fsum(err.tolist())
    return Metrics(
        abs_integral_error_deg=aie,
        min_abs_error_deg=float(np.min(err[steady_window_start(K):])),
        max_abs_input_Nm=float(np.max(np.abs(u))),
        mean_opt_time_s=math.fsum(times.tolist()) / K,
        aie_dt=aie * dt,
    )


# -- closed loop ---------------------------------------------------------------

@dataclass
class RunResult:
    name: str
    dt: float
    t: np.ndarray
    r: np.ndarray
    u_requested: np.ndarray
    u_applied: np.ndarray
    y: np.ndarray
    x: np.ndarray
    solve_time: np.ndarray
    clamped: np.ndarray
    diagnostics: list = field(default_factory=list)
    metrics: Optional[Metrics] = None
    seed: int = 0
    error: Optional[str] = None
    to_degrees: bool = True

    def __post_init__(self):
        n = len(self.t)
        for name in ("r", "u_requested", "u_applied", "y", "solve_time", "clamped"):
            if len(getattr(self, name)) != n:
                raise DimensionError(f"RunResult.{name} has {len(getattr(self, name))} rows, expected {n}")

    @property
    def ok(self) -> bool:
        return self.error is None

    @property
    def error_series(self) -> np.ndarray:
        e = self.r - self.y[:, 0]
        return np.degrees(e) if self.to_degrees else e

    def trajectories(self) -> dict[str, Trajectory]:
        return {"u": Trajectory(self.u_applied, self.dt), "y": Trajectory(self.y, self.dt),
                "r": Trajectory(self.r, self.dt)}


def controller_horizon(controller) -> int:
    for attr in ("n_pred", "N"):
        if hasattr(controller, attr):
            return int(getattr(controller, attr))
    raise AttributeError(f"{type(controller).__name__} exposes no prediction horizon")


def run_closed_loop(plant: Plant, controller, reference: Reference, duration_s: float,
                    dt: float, scenario: Optional[Scenario] = None, seed: int = 0,
                    u_box: Optional[Sequence[float]] = (-3.5, 3.5), name: str = "run",
                    to_degrees: bool = True, initial_state=None) -> RunResult:
    """Simulate ``controller`` on ``plant``; errors end the run early with a partial result.

    The plant starts from its ``x0`` unless ``initial_state`` is given (for
    example the final state of the offline experiment, so that a rolling
    data buffer continues without a seam).
    """
    K = seconds_to_samples(duration_s, dt, "duration")
    if K < 1:
        raise ValueError("run must last at least one sample")
    if scenario is not None:
        scenario.check_horizon(duration_s)
        plant.scenario = scenario
    N = controller_horizon(controller)
    lo, hi = (-np.inf, np.inf) if u_box is None else (float(u_box[0]), float(u_box[1]))

    state = plant.reset(seed)
    if initial_state is not None:
        state = PlantState(np.asarray(initial_state, dtype=float), 0.0)
    y = plant.measure(state.x)
    controller.reset(y, state.x)
    m = plant.n_inputs
    rows_r, rows_ur, rows_ua, rows_y, rows_x, rows_t, rows_c = [], [], [], [], [], [], []
    diags = []
    error = None
    for k in range(K):
        window = reference.window(k, N, dt)
        try:
            t0 = time.perf_counter()
            u_req, diag = controller.step(window)
            elapsed = time.perf_counter() - t0
        except (ControllerError, DegenerateProblemError, ArithmeticError,
                np.linalg.LinAlgError) as exc:
            error = f"controller failed at step {k} (t = {k * dt:.3f} s): {exc}"
            break
        u_req = np.atleast_1d(np.asarray(u_req, dtype=float)).reshape(m)
        u_app = np.clip(u_req, lo, hi)
        clamped = bool(np.any(u_app != u_req))
        if clamped:
            log.debug("step %d: input %s clamped to %s", k, u_req, u_app)
        rows_t.append(k * dt)
        rows_r.append(reference.sample(k, dt))
        rows_ur.append(u_req)
        rows_ua.append(u_app)
        rows_y.append(np.asarray(y, dtype=float).ravel())
        rows_x.append(state.x.copy())
        rows_c.append(clamped)
        diags.append({"step": k, "solve_time_s": elapsed, **diag})
        try:
            state, y = plant.sample_step(state, u_app, dt)
        except DivergenceError as exc:
            error = f"plant diverged after step {k}: {exc}"
            break
        controller.observe(u_app, y, state.x)

    n = len(rows_t)
    result = RunResult(
        name=name, dt=dt, t=np.array(rows_t), r=np.array(rows_r),
        u_requested=np.array(rows_ur).reshape(n, m), u_applied=np.array(rows_ua).reshape(n, m),
        y=np.array(rows_y).reshape(n, -1), x=np.array(rows_x).reshape(n, -1),
        solve_time=np.array([d["solve_time_s"] for d in diags]), clamped=np.array(rows_c, dtype=bool),
        diagnostics=diags, seed=seed, error=error, to_degrees=to_degrees)
    if error:
        log.error("%s: %s", name, error)
    if n:
        result.metrics = compute_metrics(result.r, result.y[:, 0], result.u_applied,
                                         result.solve_time, dt, to_degrees)
    return result


def offline_excitation(plant: Plant, length_s: float, amplitude: float, seed: int = 0,
                       dt: float = 0.1, u_box: Optional[Sequence[float]] = None
                       ) -> tuple[Trajectory, Trajectory, Trajectory]:
    """Drive ``plant`` with seeded uniform random input held over each sample.

    Returns ``(u, y, x)`` where ``y[k]`` and ``x[k]`` are measured at the end
    of the period during which ``u[k]`` was applied.
    """
    if amplitude < 0:
        raise ValueError("excitation amplitude must be >= 0")
    if u_box is not None and not (u_box[0] <= -amplitude and amplitude <= u_box[1]):
        raise ValueError(f"excitation amplitude {amplitude} exceeds the input box {tuple(u_box)}")
    T = seconds_to_samples(length_s, dt, "length")
    rng = np.random.default_rng(seed)
    u = rng.uniform(-amplitude, amplitude, size=(T, plant.n_inputs))
    state = plant.reset(seed)
    ys, xs = [], []
    for k in range(T):
        state, y = plant.sample_step(state, u[k], dt)
        ys.append(y)
        xs.append(state.x)
    return Trajectory(u, dt), Trajectory(np.array(ys), dt), Trajectory(np.array(xs), dt)


# -- output files -------------------------------------------------------------

def atomic_write_text(path, text: str) -> None:
    """Write via a temporary file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv_text(header: Sequence[str], rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


TIMING_COLUMNS = ("solve_time", "solve_time_s")


def run_csv(result: RunResult) -> str:
    m = result.u_applied.shape[1]
    sfx = [""] if m == 1 else [f"_{i}" for i in range(m)]
    header = (["t", "r"] + [f"u_requested{s}" for s in sfx] + [f"u_applied{s}" for s in sfx]
              + ["y", "e", "clamped", "solve_time"])
    e = result.error_series
    rows = []
    for k in range(len(result.t)):
        rows.append([_fmt(result.t[k]), _fmt(result.r[k])]
                    + [_fmt(v) for v in result.u_requested[k]] + [_fmt(v) for v in result.u_applied[k]]
                    + [_fmt(result.y[k, 0]), _fmt(e[k]), _fmt(result.clamped[k]),
                       _fmt(result.solve_time[k])])
    return _csv_text(header, rows)


DIAG_COLUMNS = ("step", "objective", "norm_g", "norm_sigma", "solve_time_s", "status",
                "phi_hat", "guard_fired", "norm_theta", "delta_u")


def diagnostics_csv(result: RunResult) -> str:
    present = [c for c in DIAG_COLUMNS if any(c in d for d in result.diagnostics)]
    rows = [[_fmt(d.get(c, "")) for c in present] for d in result.diagnostics]
    return _csv_text(present, rows)


def metrics_record(result: RunResult) -> dict:
    rec = {"name": result.name, "seed": result.seed, "status": "ok" if result.ok else "failed",
           "error": result.error, "samples": len(result.t),
           "clamped_steps": int(result.clamped.sum()),
           "min_abs_error_window": "final 25% of the run",
           "aie_note": "abs_integral_error_deg is the per-sample sum; aie_dt multiplies it by dt"}
    if result.metrics is not None:
        for key, val in asdict(result.metrics).items():
            rec[key] = val
        rec["labels"] = dict(METRIC_LABELS)
    return rec


def write_run(result: RunResult, out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    paths = {"run": out / f"{result.name}_run.csv",
             "diagnostics": out / f"{result.name}_diagnostics.csv",
             "metrics": out / f"{result.name}_metrics.json"}
    atomic_write_text(paths["run"], run_csv(result))
    atomic_write_text(paths["diagnostics"], diagnostics_csv(result))
    atomic_write_text(paths["metrics"], json.dumps(metrics_record(result), indent=2, sort_keys=True) + "\n")
    return paths


def strip_timing(csv_text: str) -> str:
    """Drop wall-clock columns from CSV text (for reproducibility checks)."""
    rows = list(csv.reader(io.StringIO(csv_text)))
    if not rows:
        return ""
    keep = [i for i, h in enumerate(rows[0]) if h not in TIMING_COLUMNS and not h.endswith("_time_s")]
    return _csv_text([rows[0][i] for i in keep], ([r[i] for i in keep] for r in rows[1:]))


# -- direction-flip study ------------------------------------------------------

def flipped_probes(plant_factory, n_probes: int, length: int, amplitude: float,
                   dt: float, seed: int = 0) -> list[tuple[Trajectory, Trajectory]]:
    """Short input/output records of the plant with its input direction reversed.

    ``plant_factory(scenario, seed)`` must build a fresh plant.
    """
    rng = np.random.default_rng(seed)
    probes = []
    for i in range(n_probes):
        plant = plant_factory(Scenario(direction_flip_time=0.0), seed + i)
        state = plant.reset()
        u = rng.uniform(-amplitude, amplitude, size=(length, plant.n_inputs))
        ys = []
        for k in range(length):
            state, y = plant.sample_step(state, u[k], dt)
            ys.append(y)
        probes.append((Trajectory(u, dt), Trajectory(np.array(ys), dt)))
    return probes


def probe_residuals(buffer_u: Trajectory, buffer_y: Trajectory, probes, depth: int) -> float:
    """Mean relative behavioral residual of ``probes`` against the buffer data."""
    vals = []
    for pu, py in probes:
        res = behavioral_residual(buffer_u, buffer_y, pu, py, depth)
        vals.append(res / max(np.linalg.norm(np.concatenate([pu.flat(), py.flat()])), 1e-300))
    return float(np.mean(vals))


@dataclass
class FlipStudy:
    times: np.ndarray
    residual: np.ndarray
    guard_fired: np.ndarray
    result: RunResult


def direction_flip_study(plant: Plant, controller, reference: Reference, duration_s: float,
                         dt: float, flip_time: float, probes=None, seed: int = 0,
                         u_box=(-3.5, 3.5), initial_state=None) -> FlipStudy:
    """Run with the input direction reversed at ``flip_time``.

    For Hankel controllers with a rolling buffer, records after every step
    the residual of ``probes`` (records of the reversed plant) against the
    current buffer. For MFAPC, records whether the PPD sign guard fired.
    """
    K = seconds_to_samples(duration_s, dt, "duration")
    residual = np.full(K, np.nan)
    guard = np.zeros(K, dtype=bool)
    buffer = getattr(controller, "buffer", None)
    inner_observe = controller.observe
    counter = {"k": 0}

    def observe(u, y, x=None):
        inner_observe(u, y, x)
        k = counter["k"]
        if k < K:
            if buffer is not None and probes:
                bu, by = buffer.trajectories()
                residual[k] = probe_residuals(bu, by, probes, controller.depth)
            est = getattr(controller, "estimator", None)
            if est is not None:
                guard[k] = est.guard_fired
        counter["k"] = k + 1

    controller.observe = observe
    try:
        result = run_closed_loop(plant, controller, reference, duration_s, dt,
                                 Scenario(direction_flip_time=flip_time), seed, u_box,
                                 name="flip_study", initial_state=initial_state)
    finally:
        controller.observe = inner_observe
    return FlipStudy(np.arange(K) * dt, residual, guard, result)
