"""Trajectory containers, block-Hankel matrices and persistency of excitation.

Samples are stored row-wise: a trajectory of ``T`` samples with ``c`` channels
is a ``(T, c)`` array. Hankel matrices interleave channels inside each block
row, so column ``j`` of a depth-``L`` Hankel is ``w[j:j+L].ravel()``.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

# Singular values below RANK_RTOL * sigma_max count as zero.
RANK_RTOL = 1e-9

log = logging.getLogger(__name__)


class DimensionError(ValueError):
    """Raised when array shapes or lengths are incompatible."""


class BufferModeError(RuntimeError):
    """Raised when appending to a frozen data buffer."""


def seconds_to_samples(value: float, dt: float, name: str = "duration") -> int:
    """Convert a time span to a sample count, rounding to nearest."""
    n = int(round(value / dt))
    if abs(n * dt - value) > 1e-9 * max(1.0, abs(value)):
        log.info("%s = %g s rounded to %d samples at dt = %g s", name, value, n, dt)
    return n


def _as_samples(values, channels: Optional[int] = None) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(-1, 1) if channels in (None, 1) else arr.reshape(1, -1)
    if arr.ndim != 2:
        raise DimensionError(f"expected a (T, channels) array, got shape {arr.shape}")
    if channels is not None and arr.shape[1] != channels:
        raise DimensionError(
            f"expected {channels} channel(s), got {arr.shape[1]}")
    return arr


@dataclass(frozen=True)
class Trajectory:
    """A sampled multichannel time series with a fixed sampling period.

    ``data`` has shape ``(T, channels)`` and is made read-only on
    construction.
    """

    data: np.ndarray
    dt: float = 1.0

    def __post_init__(self):
        arr = _as_samples(self.data)
        if not (np.isfinite(self.dt) and self.dt > 0):
            raise ValueError(f"dt must be strictly positive, got {self.dt}")
        arr = np.array(arr, dtype=float, copy=True)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "dt", float(self.dt))

    @classmethod
    def from_samples(cls, samples: Sequence, dt: float = 1.0,
                     channels: Optional[int] = None) -> "Trajectory":
        if len(samples) == 0:
            return cls(np.zeros((0, channels or 1)), dt)
        return cls(_as_samples(samples, channels), dt)

    def __len__(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[1]

    @property
    def times(self) -> np.ndarray:
        return np.arange(len(self)) * self.dt

    def window(self, start: int, stop: int) -> "Trajectory":
        return Trajectory(self.data[start:stop], self.dt)

    def flat(self) -> np.ndarray:
        """Samples stacked into a single vector, sample-major."""
        return self.data.ravel()

    def to_csv(self, path: Union[str, Path]) -> None:
        header = ["t"] + [f"ch{i}" for i in range(self.channels)]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for k, row in enumerate(self.data):
                writer.writerow([repr(k * self.dt)] + [repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, path: Union[str, Path]) -> "Trajectory":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        if not header or header[0] != "t":
            raise ValueError(f"{path}: first column must be 't'")
        channels = len(header) - 1
        if not body:
            return cls(np.zeros((0, channels)), 1.0)
        t = np.array([float(r[0]) for r in body])
        data = np.array([[float(v) for v in r[1:]] for r in body])
        dt = float(t[1] - t[0]) if len(t) > 1 else 1.0
        return cls(data, dt)


@dataclass(frozen=True)
class HankelView:
    """Depth-``L`` block-Hankel arrangement of a trajectory.

    ``matrix`` has ``depth * channels`` rows and ``T - depth + 1`` columns.
    If ``past`` is set, the first ``past`` block rows form the past partition
    and the remaining ``depth - past`` block rows the future partition.
    """

    matrix: np.ndarray
    depth: int
    channels: int
    past: Optional[int] = None

    @property
    def columns(self) -> int:
        return self.matrix.shape[1]

    def block(self, i: int, j: int) -> np.ndarray:
        c = self.channels
        return self.matrix[i * c:(i + 1) * c, j]

    def split(self, past: int) -> "HankelView":
        if not 0 <= past <= self.depth:
            raise DimensionError(
                f"past rows {past} must lie in [0, depth={self.depth}]")
        return HankelView(self.matrix, self.depth, self.channels, past)

    @property
    def past_rows(self) -> np.ndarray:
        if self.past is None:
            raise ValueError("HankelView has no past/future split")
        return self.matrix[:self.past * self.channels]

    @property
    def future_rows(self) -> np.ndarray:
        if self.past is None:
            raise ValueError("HankelView has no past/future split")
        return self.matrix[self.past * self.channels:]


def hankel_matrix(data: np.ndarray, depth: int) -> np.ndarray:
    """Block-Hankel matrix of a ``(T, c)`` sample array, as a plain array."""
    data = _as_samples(data)
    T, c = data.shape
    if depth < 1:
        raise DimensionError(f"Hankel depth must be >= 1, got {depth}")
    if T < depth:
        raise DimensionError(
            f"trajectory length {T} is shorter than Hankel depth {depth}")
    windows = np.lib.stride_tricks.sliding_window_view(data, depth, axis=0)
    # windows: (cols, c, depth) -> (cols, depth, c) -> (cols, depth * c)
    cols = windows.shape[0]
    return np.ascontiguousarray(windows.transpose(0, 2, 1).reshape(cols, depth * c).T)


def build_hankel(w: Trajectory, L: int, past: Optional[int] = None) -> HankelView:
    """Build the depth-``L`` Hankel view of ``w``."""
    view = HankelView(hankel_matrix(w.data, L), L, w.channels)
    return view.split(past) if past is not None else view


def numerical_rank(M: np.ndarray, rtol: float = RANK_RTOL) -> int:
    if M.size == 0:
        return 0
    s = np.linalg.svd(M, compute_uv=False)
    if s[0] == 0.0:
        return 0
    return int(np.sum(s > rtol * s[0]))


def is_persistently_exciting(w: Trajectory, L: int, rtol: float = RANK_RTOL) -> bool:
    T = len(w)
    if L < 1 or T < L:
        return False
    H = hankel_matrix(w.data, L)
    if H.shape[1] < H.shape[0]:
        return False
    return numerical_rank(H, rtol) == H.shape[0]


def persistent_excitation_order(w: Trajectory, rtol: float = RANK_RTOL) -> int:
    """Largest ``L`` for which the depth-``L`` Hankel of ``w`` has full row rank.

    Only depths with ``T - L >= L - 1`` are considered. Returns 0 if even
    ``L = 1`` fails.
    """
    T = len(w)
    order = 0
    for L in range(1, (T + 1) // 2 + 1):
        if not is_persistently_exciting(w, L, rtol):
            break
        order = L
    return order


def stacked_hankel(trajs: Sequence[Trajectory], L: int) -> np.ndarray:
    """Row-stack the depth-``L`` Hankels of several equal-length trajectories."""
    lengths = {len(t) for t in trajs}
    if len(lengths) != 1:
        raise DimensionError(f"trajectories differ in length: {sorted(lengths)}")
    return np.vstack([hankel_matrix(t.data, L) for t in trajs])


def lstsq_residual(H: np.ndarray, w: np.ndarray) -> float:
    """``min_g ||H g - w||_2``."""
    g, *_ = np.linalg.lstsq(H, w, rcond=None)
    return float(np.linalg.norm(H @ g - w))


def behavioral_residual(data_u: Trajectory, data_y: Trajectory,
                        probe_u: Trajectory, probe_y: Trajectory, L: int) -> float:
    """Least-squares distance of a length-``L`` probe from the data span.

    Near zero means the probe is a linear combination of the columns of
    ``[H_L(u); H_L(y)]``, i.e. the data explains it.
    """
    if data_u.channels != probe_u.channels:
        raise DimensionError(
            f"input channels differ: data {data_u.channels}, probe {probe_u.channels}")
    if data_y.channels != probe_y.channels:
        raise DimensionError(
            f"output channels differ: data {data_y.channels}, probe {probe_y.channels}")
    if len(probe_u) != L or len(probe_y) != L:
        raise DimensionError(
            f"probe length must equal L={L}, got {len(probe_u)} and {len(probe_y)}")
    H = stacked_hankel([data_u, data_y], L)
    w = np.concatenate([probe_u.flat(), probe_y.flat()])
    return lstsq_residual(H, w)


@dataclass
class DataBuffer:
    """Input/output data store backing the Hankel matrices of a controller.

    In ``rolling`` mode appending past ``capacity`` evicts the oldest sample;
    ``frozen`` buffers reject appends. Extra aligned channel groups (such as
    plant states for lifting) can be carried in ``extras``.
    """

    capacity: int
    u: np.ndarray
    y: np.ndarray
    mode: str = "frozen"
    dt: float = 1.0
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in ("frozen", "rolling"):
            raise ValueError(f"buffer mode must be 'frozen' or 'rolling', got {self.mode!r}")
        self.u = _as_samples(self.u).copy()
        self.y = _as_samples(self.y).copy()
        self.extras = {k: _as_samples(v).copy() for k, v in self.extras.items()}
        n = len(self.u)
        if len(self.y) != n or any(len(v) != n for v in self.extras.values()):
            raise DimensionError("buffer channel groups must have equal length")
        if self.capacity < 1:
            raise ValueError("buffer capacity must be >= 1")
        if n > self.capacity:
            self.u = self.u[-self.capacity:]
            self.y = self.y[-self.capacity:]
            self.extras = {k: v[-self.capacity:] for k, v in self.extras.items()}

    @classmethod
    def from_trajectories(cls, u: Trajectory, y: Trajectory, mode: str = "frozen",
                          capacity: Optional[int] = None, **extras: Trajectory) -> "DataBuffer":
        return cls(capacity or len(u), u.data, y.data, mode, u.dt,
                   {k: v.data for k, v in extras.items()})

    def __len__(self) -> int:
        return len(self.u)

    def append(self, u_sample, y_sample, **extra_samples) -> "DataBuffer":
        if self.mode == "frozen":
            raise BufferModeError("cannot append to a frozen data buffer")
        u_row = _as_samples(np.atleast_1d(u_sample).reshape(1, -1), self.u.shape[1])
        y_row = _as_samples(np.atleast_1d(y_sample).reshape(1, -1), self.y.shape[1])
        if set(extra_samples) != set(self.extras):
            raise DimensionError(
                f"expected extra channel groups {sorted(self.extras)}, got {sorted(extra_samples)}")
        rows = {k: _as_samples(np.atleast_1d(v).reshape(1, -1), self.extras[k].shape[1])
                for k, v in extra_samples.items()}
        drop = 1 if len(self) >= self.capacity else 0
        self.u = np.vstack([self.u[drop:], u_row])
        self.y = np.vstack([self.y[drop:], y_row])
        for k, row in rows.items():
            self.extras[k] = np.vstack([self.extras[k][drop:], row])
        return self

    def trajectories(self) -> tuple[Trajectory, Trajectory]:
        return Trajectory(self.u, self.dt), Trajectory(self.y, self.dt)

    def extra(self, name: str) -> Trajectory:
        return Trajectory(self.extras[name], self.dt)
