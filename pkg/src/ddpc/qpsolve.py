"""Dense convex QP with equality constraints and box bounds.

Solves::

    minimize    0.5 x'Px + q'x
    subject to  A_eq x = b_eq
                lower <= x <= upper

with an operator-splitting method: every iterate is projected onto the affine
set {A_eq x = b_eq} through a cached KKT factorization, and onto the box by
clipping. Only coordinates that actually carry a finite bound take part in
the splitting, so equality-only problems are solved in a single KKT solve.
Once the active bounds settle, the iterate is polished by solving the KKT
system of the guessed active set directly.

``kkt_solve`` is an independent direct solver for equality-only problems and
is used as a verification oracle.
"""

from __future__ import annotations

import hashlib
import io
import warnings
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg as sla

OPTIMAL = "optimal"
MAX_ITER = "max_iter"
INFEASIBLE = "infeasible"


class DegenerateProblemError(ValueError):
    """The KKT matrix is singular: the problem is not strictly convex on the
    equality-constraint nullspace, or the constraints are degenerate."""


def _vec(v, n: int, fill: float) -> np.ndarray:
    if v is None:
        return np.full(n, fill)
    out = np.asarray(v, dtype=float).ravel()
    if out.shape != (n,):
        raise ValueError(f"expected a vector of length {n}, got shape {out.shape}")
    return out


@dataclass
class QPProblem:
    P: np.ndarray
    q: np.ndarray
    A_eq: Optional[np.ndarray] = None
    b_eq: Optional[np.ndarray] = None
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None

    def __post_init__(self):
        self.P = np.atleast_2d(np.asarray(self.P, dtype=float))
        self.q = np.asarray(self.q, dtype=float).ravel()
        n = self.q.shape[0]
        if self.P.shape != (n, n):
            raise ValueError(f"P must be {n}x{n}, got {self.P.shape}")
        if not np.allclose(self.P, self.P.T, rtol=1e-10, atol=1e-12 * max(1.0, np.abs(self.P).max())):
            raise ValueError("P must be symmetric")
        if self.A_eq is None:
            self.A_eq = np.zeros((0, n))
        self.A_eq = np.asarray(self.A_eq, dtype=float).reshape(-1, n) if np.size(self.A_eq) else np.zeros((0, n))
        m = self.A_eq.shape[0]
        self.b_eq = _vec(self.b_eq, m, 0.0) if m else np.zeros(0)
        self.lower = _vec(self.lower, n, -np.inf)
        self.upper = _vec(self.upper, n, np.inf)
        if np.any(np.isnan(self.lower)) or np.any(np.isnan(self.upper)):
            raise ValueError("bounds must not be NaN; use +/-inf for unbounded")

    @property
    def n(self) -> int:
        return self.q.shape[0]

    @property
    def m(self) -> int:
        return self.A_eq.shape[0]

    @property
    def has_bounds(self) -> bool:
        return bool(np.any(np.isfinite(self.lower)) or np.any(np.isfinite(self.upper)))

    def objective(self, x: np.ndarray) -> float:
        return float(0.5 * x @ self.P @ x + self.q @ x)

    def to_text(self) -> str:
        """Plain-text dump: dimensions, then row-major matrices in full precision."""
        buf = io.StringIO()
        buf.write(f"QPProblem n={self.n} m={self.m}\n")

        def emit(name, arr):
            arr = np.atleast_2d(arr)
            buf.write(f"{name} {arr.shape[0]} {arr.shape[1]}\n")
            for row in arr:
                buf.write(" ".join(repr(float(v)) for v in row) + "\n")

        emit("P", self.P)
        emit("q", self.q.reshape(1, -1))
        emit("A_eq", self.A_eq)
        emit("b_eq", self.b_eq.reshape(1, -1))
        emit("lower", self.lower.reshape(1, -1))
        emit("upper", self.upper.reshape(1, -1))
        return buf.getvalue()

    @classmethod
    def from_text(cls, text: str) -> "QPProblem":
        lines = text.splitlines()
        head = lines[0].split()
        if head[0] != "QPProblem":
            raise ValueError("not a QPProblem dump")
        n = int(head[1].split("=")[1])
        blocks = {}
        i = 1
        while i < len(lines):
            name, rows, cols = lines[i].split()
            rows, cols = int(rows), int(cols)
            body = [[float(v) for v in lines[i + 1 + r].split()] for r in range(rows)]
            arr = np.array(body, dtype=float).reshape(rows, cols)
            blocks[name] = arr
            i += 1 + rows
        A = blocks["A_eq"]
        return cls(blocks["P"], blocks["q"].ravel(),
                   A if A.size else np.zeros((0, n)),
                   blocks["b_eq"].ravel(),
                   blocks["lower"].ravel(), blocks["upper"].ravel())


@dataclass
class QPSolution:
    x: np.ndarray
    objective: float
    iterations: int
    primal_residual: float
    dual_residual: float
    status: str
    eq_multipliers: np.ndarray = field(default_factory=lambda: np.zeros(0))
    bound_multipliers: np.ndarray = field(default_factory=lambda: np.zeros(0))
    polished: bool = False


def kkt_residuals(problem: QPProblem, x: np.ndarray, nu: np.ndarray,
                  mu: np.ndarray) -> tuple[float, float]:
    """Primal (equality + bound violation) and stationarity residuals, inf-norm."""
    prim = 0.0
    if problem.m:
        prim = float(np.max(np.abs(problem.A_eq @ x - problem.b_eq)))
    viol = np.maximum(problem.lower - x, 0.0) + np.maximum(x - problem.upper, 0.0)
    if viol.size:
        prim = max(prim, float(np.max(viol)))
    grad = problem.P @ x + problem.q + mu
    if problem.m:
        grad = grad + problem.A_eq.T @ nu
    dual = float(np.max(np.abs(grad))) if grad.size else 0.0
    return prim, dual


def kkt_solve(problem: QPProblem) -> QPSolution:
    """Solve an equality-constrained QP through its KKT system directly."""
    if problem.has_bounds:
        raise ValueError("kkt_solve only handles problems without finite bounds")
    n, m = problem.n, problem.m
    K = np.zeros((n + m, n + m))
    K[:n, :n] = problem.P
    K[:n, n:] = problem.A_eq.T
    K[n:, :n] = problem.A_eq
    rhs = np.concatenate([-problem.q, problem.b_eq])
    if np.linalg.cond(K) > 1e14:
        raise DegenerateProblemError(
            "singular KKT matrix: P is not positive definite on the nullspace "
            "of A_eq, or A_eq is rank deficient")
    sol = np.linalg.solve(K, rhs)
    x, nu = sol[:n], sol[n:]
    prim, dual = kkt_residuals(problem, x, nu, np.zeros(n))
    return QPSolution(x, problem.objective(x), 1, prim, dual, OPTIMAL, nu, np.zeros(n))


def reduced_hessian_min_eig(problem: QPProblem) -> float:
    """Smallest eigenvalue of P restricted to the nullspace of A_eq."""
    if problem.m:
        Z = sla.null_space(problem.A_eq)
        if Z.shape[1] == 0:
            return np.inf
        H = Z.T @ problem.P @ Z
    else:
        H = problem.P
    return float(np.linalg.eigvalsh(H)[0])


def _digest(*arrays) -> bytes:
    h = hashlib.blake2b(digest_size=16)
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.digest()


class QPSolver:
    """Operator-splitting QP solver with a small factorization cache.

    One instance is meant to be owned by a single control loop; repeated
    problems with the same ``P``, ``A_eq`` and bound pattern reuse the
    factorization and the last tuned penalty.
    """

    def __init__(self, tol: float = 1e-8, max_iter: int = 20000,
                 relaxation: float = 1.6, check_every: int = 10,
                 polish: bool = True, cache_size: int = 8):
        if tol <= 0:
            raise ValueError("tol must be positive")
        if not 0 < relaxation < 2:
            raise ValueError("relaxation must lie in (0, 2)")
        self.tol = tol
        self.max_iter = max_iter
        self.relaxation = relaxation
        self.check_every = check_every
        self.polish = polish
        self._cache: OrderedDict = OrderedDict()
        self._cache_size = cache_size

    # -- constraint preprocessing -------------------------------------------

    def _structure(self, problem: QPProblem, bounded: np.ndarray):
        key = _digest(problem.P, problem.A_eq, bounded.astype(np.int8))
        entry = self._cache.get(key)
        if entry is None:
            A = problem.A_eq
            if A.shape[0]:
                U, s, Vt = np.linalg.svd(A, full_matrices=False)
                r = int(np.sum(s > 1e-12 * s[0])) if s.size and s[0] > 0 else 0
            else:
                U, s, Vt, r = np.zeros((0, 0)), np.zeros(0), np.zeros((0, problem.n)), 0
            entry = {"U": U, "s": s, "Vt": Vt, "rank": r, "factors": {}, "rho": None}
            self._check_convexity(problem, r)
            self._cache[key] = entry
            while len(self._cache) > self._cache_size:
                self._cache.popitem(last=False)
        else:
            self._cache.move_to_end(key)
        return entry

    @staticmethod
    def _check_convexity(problem: QPProblem, rank: int):
        P, A = problem.P, problem.A_eq
        if A.shape[0] and rank:
            Z = np.linalg.svd(A, full_matrices=True)[2][rank:].T
        else:
            Z = np.eye(problem.n)
        if Z.shape[1] == 0:
            return
        lam = np.linalg.eigvalsh(Z.T @ P @ Z)[0]
        # roundoff floor of the eigensolver, relative to the Hessian scale
        if lam <= 10 * np.finfo(float).eps * max(1.0, float(np.max(np.abs(P)))):
            raise DegenerateProblemError(
                f"P is not positive definite on the equality-constraint nullspace "
                f"(smallest reduced eigenvalue {lam:.3e})")

    def _reduced_equalities(self, problem: QPProblem, entry):
        """Return a full-row-rank (A, b) equivalent to A_eq x = b_eq, or None
        when the equalities are inconsistent."""
        A, b = problem.A_eq, problem.b_eq
        r = entry["rank"]
        if r == A.shape[0]:
            return A, b
        U, s, Vt = entry["U"], entry["s"], entry["Vt"]
        Ur = U[:, :r]
        proj = Ur @ (Ur.T @ b)
        scale = max(1.0, float(np.max(np.abs(b)))) if b.size else 1.0
        if np.max(np.abs(b - proj)) > max(self.tol, 1e-10) * scale * 10:
            return None
        return s[:r, None] * Vt[:r], Ur.T @ b

    def _factor(self, entry, P: np.ndarray, A: np.ndarray, bounded: np.ndarray, rho: float):
        cached = entry["factors"].get(rho)
        if cached is not None:
            return cached
        n, m = P.shape[0], A.shape[0]
        K = np.zeros((n + m, n + m))
        K[:n, :n] = P
        K[np.flatnonzero(bounded), np.flatnonzero(bounded)] += rho
        K[:n, n:] = A.T
        K[n:, :n] = A
        with warnings.catch_warnings():
            warnings.simplefilter("error", sla.LinAlgWarning)
            try:
                lu = sla.lu_factor(K, check_finite=False)
            except (np.linalg.LinAlgError, sla.LinAlgWarning) as exc:
                raise DegenerateProblemError(
                    f"KKT matrix is singular ({exc}); the problem is not strictly "
                    "convex on the equality-constraint nullspace") from exc
        if len(entry["factors"]) > 6:
            entry["factors"].clear()
        entry["factors"][rho] = lu
        return lu

    # -- polishing ---------------------------------------------------------

    def _polish(self, problem: QPProblem, A: np.ndarray, b: np.ndarray,
                at_lower: np.ndarray, at_upper: np.ndarray):
        n = problem.n
        P, q = problem.P, problem.q
        fixed = at_lower | at_upper
        free = ~fixed
        xf = np.where(at_lower, problem.lower, np.where(at_upper, problem.upper, 0.0))
        F = np.flatnonzero(free)
        nf, m = F.size, A.shape[0]
        K = np.zeros((nf + m, nf + m))
        K[:nf, :nf] = P[np.ix_(F, F)]
        K[:nf, nf:] = A[:, F].T
        K[nf:, :nf] = A[:, F]
        rhs = np.concatenate([-q[F] - P[F][:, fixed] @ xf[fixed], b - A[:, fixed] @ xf[fixed]])
        sol = None
        if nf >= m and nf + m > 0:
            with warnings.catch_warnings(), np.errstate(all="ignore"):
                warnings.simplefilter("error", sla.LinAlgWarning)
                try:
                    sol = sla.solve(K, rhs, check_finite=False)
                    sol = sol + sla.solve(K, rhs - K @ sol, check_finite=False)
                except (np.linalg.LinAlgError, sla.LinAlgWarning):
                    sol = None
        if sol is None or not np.all(np.isfinite(sol)):
            sol, *_ = np.linalg.lstsq(K, rhs, rcond=None)
        x = xf.copy()
        x[F] = sol[:nf]
        nu = sol[nf:]
        g = P @ x + q + A.T @ nu
        mu = np.zeros(n)
        mu[fixed] = -g[fixed]
        tol = self.tol
        both = at_lower & at_upper
        ok = (np.all(mu[at_upper & ~both] >= -tol) and np.all(mu[at_lower & ~both] <= tol))
        if not ok:
            return None
        x = np.clip(x, problem.lower, problem.upper)
        return x, nu, mu

    # -- main loop ---------------------------------------------------------

    def solve(self, problem: QPProblem, warm_start=None) -> QPSolution:
        n = problem.n
        lo, up = problem.lower, problem.upper
        if np.any(lo > up):
            return self._infeasible(problem, 0)
        bounded = np.isfinite(lo) | np.isfinite(up)
        Bi = np.flatnonzero(bounded)
        entry = self._structure(problem, bounded)
        reduced = self._reduced_equalities(problem, entry)
        if reduced is None:
            return self._infeasible(problem, 0)
        A, b = reduced
        m = A.shape[0]
        P, q = problem.P, problem.q
        lB, uB = lo[Bi], up[Bi]
        fixed_B = lB == uB

        if Bi.size == 0:
            lu = self._factor(entry, P, A, bounded, 0.0)
            sol = sla.lu_solve(lu, np.concatenate([-q, b]), check_finite=False)
            x, nu = sol[:n], sol[n:]
            mu = np.zeros(n)
            prim, dual = kkt_residuals(problem, x, self._lift_nu(problem, A, nu, x, mu), mu)
            return QPSolution(x, problem.objective(x), 1, prim, dual, OPTIMAL,
                              self._lift_nu(problem, A, nu, x, mu), mu)

        rho = entry["rho"]
        if rho is None:
            d = np.abs(np.diag(P))[Bi]
            rho = float(np.mean(d)) if np.mean(d) > 0 else float(np.linalg.norm(P, 2)) / n
            rho = rho if rho > 0 else 1.0
        rho = float(np.clip(rho, 1e-6, 1e8))

        if warm_start is None:
            x0 = np.zeros(n)
        elif isinstance(warm_start, QPSolution):
            x0 = warm_start.x
        else:
            x0 = np.asarray(warm_start, dtype=float).ravel()
        z = np.clip(x0[Bi], lB, uB)
        w = np.zeros(Bi.size)
        alpha = self.relaxation
        lu = self._factor(entry, P, A, bounded, rho)

        best = None
        last_guess = None
        last_adapt = 0
        stall_ref = np.inf
        x = x0.copy()
        nu = np.zeros(m)
        rhs = np.empty(n + m)
        rhs[n:] = b
        for it in range(1, self.max_iter + 1):
            rhs[:n] = -q
            rhs[Bi] += rho * (z - w)
            sol = sla.lu_solve(lu, rhs, check_finite=False)
            x, nu = sol[:n], sol[n:]
            xh = alpha * x[Bi] + (1.0 - alpha) * z
            z_prev = z
            z = np.clip(xh + w, lB, uB)
            w = w + xh - z

            if it % self.check_every and it != self.max_iter:
                continue
            xr = x.copy()
            xr[Bi] = z
            mu = np.zeros(n)
            mu[Bi] = rho * w
            nu_full = self._lift_nu(problem, A, nu, xr, mu)
            prim, dual = kkt_residuals(problem, xr, nu_full, mu)
            prim = max(prim, float(np.max(np.abs(x[Bi] - z))))
            if best is None or max(prim, dual) < max(best[3], best[4]):
                best = (xr, nu_full, mu, prim, dual)
            if prim <= self.tol and dual <= self.tol:
                return QPSolution(xr, problem.objective(xr), it, prim, dual, OPTIMAL,
                                  nu_full, mu)

            if self.polish:
                at_up = np.zeros(n, dtype=bool)
                at_lo = np.zeros(n, dtype=bool)
                at_up[Bi] = (z >= uB) & ((w > 0) | fixed_B)
                at_lo[Bi] = (z <= lB) & ((w < 0) | fixed_B)
                guess = (at_lo.tobytes(), at_up.tobytes())
                if guess != last_guess:
                    last_guess = guess
                    pol = self._polish(problem, A, b, at_lo, at_up)
                    if pol is not None:
                        xp, nup, mup = pol
                        nu_p = self._lift_nu(problem, A, nup, xp, mup)
                        pp, dp = kkt_residuals(problem, xp, nu_p, mup)
                        if pp <= self.tol and dp <= self.tol:
                            entry["rho"] = rho
                            return QPSolution(xp, problem.objective(xp), it, pp, dp,
                                              OPTIMAL, nu_p, mup, polished=True)

            # penalty adaptation from the balance of scaled residuals
            if it - last_adapt >= 5 * self.check_every:
                p_scale = max(np.max(np.abs(A @ x)) if m else 0.0,
                              np.max(np.abs(b)) if m else 0.0,
                              np.max(np.abs(z)), 1e-12)
                d_scale = max(np.max(np.abs(P @ x)), np.max(np.abs(q)),
                              np.max(np.abs(mu)), 1e-12)
                dres = max(float(np.max(np.abs(rho * (z - z_prev)))), 1e-30)
                pres = max(float(np.max(np.abs(x[Bi] - z))), 1e-30)
                ratio = np.sqrt((pres / p_scale) / (dres / d_scale))
                if ratio > 5.0 or ratio < 0.2:
                    new_rho = float(np.clip(rho * ratio, 1e-6, 1e8))
                    if new_rho != rho:
                        w = w * (rho / new_rho)
                        rho = new_rho
                        lu = self._factor(entry, P, A, bounded, rho)
                last_adapt = it

            # infeasibility: the primal gap stops shrinking while the dual grows
            if it % 1000 == 0:
                if prim > 0.5 * stall_ref and self._infeasible_gap(problem, A, b):
                    return self._infeasible(problem, it)
                stall_ref = prim

        entry["rho"] = rho
        if self._infeasible_gap(problem, A, b):
            return self._infeasible(problem, self.max_iter)
        xr, nu_full, mu, prim, dual = best
        return QPSolution(xr, problem.objective(xr), self.max_iter, prim, dual,
                          MAX_ITER, nu_full, mu)

    def _lift_nu(self, problem, A, nu, x, mu):
        """Equality multipliers expressed against the original A_eq rows."""
        if not problem.m:
            return np.zeros(0)
        if A is problem.A_eq:
            return nu
        g = problem.P @ x + problem.q + mu
        return np.linalg.lstsq(problem.A_eq.T, -g, rcond=None)[0]

    def _infeasible_gap(self, problem, A, b, iters: int = 5000) -> bool:
        """Alternating projections between the affine set and the box; a
        persistent gap certifies that their intersection is empty."""
        lo, up = problem.lower, problem.upper
        if A.shape[0]:
            pinv = np.linalg.pinv(A)
            project_affine = lambda v: v - pinv @ (A @ v - b)  # noqa: E731
        else:
            project_affine = lambda v: v  # noqa: E731
        v = project_affine(np.clip(np.zeros(problem.n), lo, up))
        gap_prev = np.inf
        for _ in range(iters):
            zc = np.clip(v, lo, up)
            gap = float(np.linalg.norm(v - zc))
            if gap < 1e-9:
                return False
            if gap_prev - gap < 1e-12 * max(1.0, gap):
                break
            gap_prev = gap
            v = project_affine(zc)
        scale = max(1.0, float(np.max(np.abs(b))) if b.size else 1.0)
        return gap > 1e-6 * scale

    def _infeasible(self, problem: QPProblem, it: int) -> QPSolution:
        x = np.full(problem.n, np.nan)
        return QPSolution(x, np.nan, it, np.inf, np.inf, INFEASIBLE)


def solve(problem: QPProblem, tol: float = 1e-8, max_iter: int = 20000,
          warm_start=None) -> QPSolution:
    """Solve ``problem`` with a fresh :class:`QPSolver`."""
    return QPSolver(tol=tol, max_iter=max_iter).solve(problem, warm_start)
