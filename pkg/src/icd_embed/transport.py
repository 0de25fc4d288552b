"""Discrete optimal transport between a disease set and a procedure set.

The solver is a proximal point method: each outer step solves

    T_j = argmin_{T in Pi(mu_row, mu_col)} <C, T> + beta * KL(T || T_{j-1})

which is an entropic problem with kernel ``exp(-C / beta) * T_{j-1}``, handled
by Sinkhorn-Knopp scaling.  Costs are cosine distances in [0, 2], so with
beta = 0.5 the Gibbs kernel never drops below exp(-4) and plain (not
log-domain) scaling is safe.

``brute_force_ot`` is an exact LP oracle for desk-sized problems; it exists
for testing only.
"""

from __future__ import annotations

import functools
import os
from dataclasses import dataclass, field

import numpy as np

from icd_embed.errors import NumericalError

try:
    from numba import njit
except ImportError:  # pragma: no cover
    njit = None

TINY = 1e-300
CHECK_EVERY = 5
# "numba" runs the scaling loop compiled and without the GIL; "numpy" is the
# pure-numpy fallback.  ICD_EMBED_BACKEND overrides the choice.
BACKEND = os.environ.get("ICD_EMBED_BACKEND", "numba" if njit is not None else "numpy")


@dataclass(frozen=True)
class OtConfig:
    beta: float = 0.5
    outer_max: int = 100
    inner_max: int = 10000
    inner_tol: float = 1e-9
    outer_tol: float = 1e-6
    epsilon_guard: float = 1e-16

    def __post_init__(self):
        for name in ("beta", "outer_max", "inner_max", "inner_tol", "outer_tol", "epsilon_guard"):
            if not getattr(self, name) > 0:
                raise ValueError(f"OtConfig.{name} must be positive, got {getattr(self, name)!r}")


@dataclass
class OtDiagnostics:
    outer_iterations: int = 0
    inner_iterations: int = 0
    inner_failures: int = 0
    converged: bool = False
    row_violation: float = 0.0
    col_violation: float = 0.0
    objective_trace: list[float] = field(default_factory=list)


@dataclass
class TransportPlan:
    T: np.ndarray
    row_marginal: np.ndarray
    col_marginal: np.ndarray
    diagnostics: OtDiagnostics | None = None

    @property
    def shape(self):
        return self.T.shape

    def violation(self) -> float:
        """Max-norm violation of the two marginal constraints."""
        rows = np.abs(self.T.sum(axis=1) - self.row_marginal).max()
        cols = np.abs(self.T.sum(axis=0) - self.col_marginal).max()
        return float(max(rows, cols))

    def to_dict(self, row_codes=None, col_codes=None) -> dict:
        n, m = self.T.shape
        return {
            "rows": list(row_codes) if row_codes is not None else list(range(n)),
            "cols": list(col_codes) if col_codes is not None else list(range(m)),
            "row_marginal": self.row_marginal.tolist(),
            "col_marginal": self.col_marginal.tolist(),
            "matrix": self.T.tolist(),
        }


def cost_matrix(U_D, V_P, epsilon_guard=1e-16):
    """Cosine distances ``1 - cos(u_d, v_p)`` between columns, clamped to [0, 2]."""
    U_D = np.asarray(U_D, dtype=float)
    V_P = np.asarray(V_P, dtype=float)
    nu = np.linalg.norm(U_D, axis=0)
    nv = np.linalg.norm(V_P, axis=0)
    denom = np.maximum(np.outer(nu, nv), epsilon_guard)
    C = 1.0 - (U_D.T @ V_P) / denom
    return np.clip(C, 0.0, 2.0)


def ot_objective(C, T) -> float:
    if isinstance(T, TransportPlan):
        T = T.T
    C = np.asarray(C, dtype=float)
    T = np.asarray(T, dtype=float)
    if C.shape != T.shape:
        raise ValueError(f"shape mismatch: cost {C.shape} vs plan {T.shape}")
    return float(np.sum(C * T))


def _scale_numpy(K, mu_row, mu_col, a, inner_max, inner_tol, check_every):
    Kta = K.T @ a
    b = np.ones(K.shape[1])
    viol = np.inf
    it = 0
    for it in range(1, inner_max + 1):
        b = mu_col / Kta
        a = mu_row / (K @ b)
        Kta = K.T @ a
        if it % check_every and it != inner_max:
            continue
        viol = float(np.abs(b * Kta - mu_col).max())
        if not np.isfinite(viol):
            return a, b, it, viol, it
        if viol <= inner_tol:
            break
    return a, b, it, viol, 0


if njit is not None:

    @njit(cache=True, nogil=True, error_model="numpy")
    def _scale_jit(K, mu_row, mu_col, a, inner_max, inner_tol, check_every):  # pragma: no cover - compiled
        n, m = K.shape
        b = np.ones(m)
        Kta = np.zeros(m)
        for i in range(n):
            for j in range(m):
                Kta[j] += K[i, j] * a[i]
        viol = np.inf
        it = 0
        for it in range(1, inner_max + 1):
            for j in range(m):
                b[j] = mu_col[j] / Kta[j]
            for i in range(n):
                s = 0.0
                for j in range(m):
                    s += K[i, j] * b[j]
                a[i] = mu_row[i] / s
            for j in range(m):
                Kta[j] = 0.0
            for i in range(n):
                for j in range(m):
                    Kta[j] += K[i, j] * a[i]
            if it % check_every != 0 and it != inner_max:
                continue
            viol = 0.0
            for j in range(m):
                v = abs(b[j] * Kta[j] - mu_col[j])
                if not np.isfinite(v):
                    return a, b, it, np.inf, it
                if v > viol:
                    viol = v
            if viol <= inner_tol:
                break
        return a, b, it, viol, 0

else:  # pragma: no cover
    _scale_jit = None


def _scale(K, mu_row, mu_col, inner_max, inner_tol, a0=None, check_every=CHECK_EVERY, backend=None):
    """Sinkhorn loop returning ``(a, b, iterations, column_violation)``.

    Row marginals are exact after each a-update, so only columns are
    checked.  A non-finite scaling poisons the violation, so the scalar
    check catches it.
    """
    a = np.ones(K.shape[0]) if a0 is None else np.array(a0, dtype=float)
    backend = backend or BACKEND
    fn = _scale_jit if backend == "numba" else _scale_numpy
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        a, b, it, viol, bad = fn(
            np.ascontiguousarray(K, dtype=float), np.ascontiguousarray(mu_row, dtype=float),
            np.ascontiguousarray(mu_col, dtype=float), a, int(inner_max), float(inner_tol), int(check_every),
        )
    if bad:
        raise NumericalError(f"non-finite Sinkhorn scaling at iteration {bad}")
    return a, b, it, float(viol)


def sinkhorn(K_kernel, mu_row, mu_col, inner_max=200, inner_tol=1e-6):
    """Sinkhorn-Knopp scalings ``(a, b)`` so that ``diag(a) K diag(b)`` has the given marginals.

    Alternates ``b = mu_col / (K^T a)`` and ``a = mu_row / (K b)`` starting from
    ``a = 1``, stopping once the column-marginal violation is within
    ``inner_tol`` or after ``inner_max`` rounds.
    """
    K = np.asarray(K_kernel, dtype=float)
    if K.ndim != 2 or np.any(~(K > 0)):
        raise ValueError("Sinkhorn kernel must be a strictly positive matrix")
    a, b, _, _ = _scale(K, np.asarray(mu_row, float), np.asarray(mu_col, float), inner_max, inner_tol)
    return a, b


def solve_ot(C, mu_row, mu_col, cfg: OtConfig | None = None) -> TransportPlan:
    """Approximate the optimal plan for cost ``C`` with the proximal point method."""
    cfg = cfg or OtConfig()
    C = np.asarray(C, dtype=float)
    mu_row = np.asarray(mu_row, dtype=float)
    mu_col = np.asarray(mu_col, dtype=float)
    n, m = C.shape
    if mu_row.shape != (n,) or mu_col.shape != (m,):
        raise ValueError(f"marginal shapes {mu_row.shape}, {mu_col.shape} do not match cost {C.shape}")

    eps = cfg.epsilon_guard
    G = np.exp(-C / cfg.beta)
    T = np.outer(mu_row, mu_col)
    a = np.ones(n)
    diag = OtDiagnostics(objective_trace=[float(np.sum(C * T))])
    for _ in range(cfg.outer_max):
        K = np.maximum(G * T, eps)
        a, b, it, viol = _scale(K, mu_row, mu_col, cfg.inner_max, cfg.inner_tol, a0=a)
        diag.inner_iterations += it
        if viol > cfg.inner_tol:
            diag.inner_failures += 1
        T_new = a[:, None] * K * b[None, :]
        T_new[T_new < TINY] = eps
        change = float(np.abs(T_new - T).max())
        T = T_new
        diag.outer_iterations += 1
        diag.objective_trace.append(float(np.sum(C * T)))
        if change <= cfg.outer_tol:
            diag.converged = True
            break

    diag.row_violation = float(np.abs(T.sum(axis=1) - mu_row).max())
    diag.col_violation = float(np.abs(T.sum(axis=0) - mu_col).max())
    return TransportPlan(T, mu_row, mu_col, diag)


def brute_force_ot(C, mu_row, mu_col, max_cells=25):
    """Exact LP optimum of ``min <C, T>`` over the transportation polytope.

    Every vertex of the polytope can be built by repeatedly saturating one
    (row, column) pair: ship ``min(r_i, c_j)`` and retire whichever side is
    exhausted.  A memoised search over all such peel sequences therefore
    visits every vertex, and the best one is the LP optimum.

    Returns ``(objective, TransportPlan)``.
    """
    C = np.asarray(C, dtype=float)
    n, m = C.shape
    if n * m > max_cells:
        raise ValueError(f"brute_force_ot limited to {max_cells} cells, got {n}x{m}")
    r0 = tuple(float(x) for x in mu_row)
    c0 = tuple(float(x) for x in mu_col)
    cost = C.tolist()

    @functools.lru_cache(maxsize=None)
    def best(rk, ck):
        rows = [i for i, v in enumerate(rk) if v is not None]
        cols = [j for j, v in enumerate(ck) if v is not None]
        if len(rows) == 1:
            i = rows[0]
            edges = tuple((i, j, ck[j]) for j in cols)
            return sum(cost[i][j] * x for _, j, x in edges), edges
        if len(cols) == 1:
            j = cols[0]
            edges = tuple((i, j, rk[i]) for i in rows)
            return sum(cost[i][j] * x for i, _, x in edges), edges
        top = (np.inf, ())
        for i in rows:
            for j in cols:
                rr, cc = list(rk), list(ck)
                if rk[i] <= ck[j]:
                    x = rk[i]
                    rr[i] = None
                    cc[j] = ck[j] - x
                else:
                    x = ck[j]
                    cc[j] = None
                    rr[i] = rk[i] - x
                sub, edges = best(tuple(rr), tuple(cc))
                value = cost[i][j] * x + sub
                if value < top[0]:
                    top = (value, ((i, j, x),) + edges)
        return top

    value, edges = best(r0, c0)
    T = np.zeros((n, m))
    for i, j, x in edges:
        T[i, j] += x
    return float(value), TransportPlan(T, np.asarray(mu_row, float), np.asarray(mu_col, float))
