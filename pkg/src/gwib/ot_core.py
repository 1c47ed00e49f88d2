"""Exact discrete optimal transport on dense matrices.

Matrices are plain ``float64`` numpy arrays. Plans couple two discrete
measures; the Gromov-Wasserstein objectives use the factorized form

    <C_AB - 2 A T B^T, T>,   C_AB = (A*A) p 1^T + 1 q^T (B*B)^T,

which equals the quadruple sum over T_mn T_kl (A_mk - B_nl)^2 for any plan
with marginals (p, q).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from ._simplex import STATUS_OPTIMAL, transport_simplex
from .errors import InvalidInput, SolverFailure

MARGINAL_ATOL = 1e-9
DEFAULT_CG_MAX_ITER = 200
DEFAULT_CG_TOL = 1e-7


def as_matrix(data, name: str = "matrix") -> np.ndarray:
    """Return ``data`` as a finite 2-D float64 array or raise InvalidInput."""
    arr = np.array(data, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] == 0 or arr.shape[1] == 0:
        raise InvalidInput(f"{name} must be a nonempty 2-D matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInput(f"{name} contains NaN or Inf")
    return arr


def _as_points(points, name: str) -> np.ndarray:
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise InvalidInput(f"{name} must be a nonempty list of vectors")
    if not np.all(np.isfinite(arr)):
        raise InvalidInput(f"{name} contains NaN or Inf")
    return arr


@dataclass(frozen=True)
class DiscreteMeasure:
    weights: np.ndarray

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64).ravel()
        if w.size == 0:
            raise InvalidInput("measure needs at least one atom")
        if not np.all(np.isfinite(w)) or np.any(w < 0):
            raise InvalidInput("measure weights must be finite and nonnegative")
        if abs(w.sum() - 1.0) > 1e-12:
            raise InvalidInput(f"measure weights sum to {w.sum()!r}, expected 1")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @classmethod
    def uniform(cls, n: int) -> "DiscreteMeasure":
        if n < 1:
            raise InvalidInput("uniform measure needs n >= 1")
        return cls(np.full(n, 1.0 / n))

    def __len__(self):
        return self.weights.size


@dataclass(frozen=True)
class TransportPlan:
    plan: np.ndarray
    source: DiscreteMeasure
    target: DiscreteMeasure

    def __post_init__(self):
        p = as_matrix(self.plan, "plan")
        if p.shape != (len(self.source), len(self.target)):
            raise InvalidInput(
                f"plan shape {p.shape} does not match measures "
                f"({len(self.source)}, {len(self.target)})"
            )
        if np.any(p < 0):
            raise InvalidInput("plan has negative entries")
        if np.abs(p.sum(axis=1) - self.source.weights).max() > MARGINAL_ATOL:
            raise InvalidInput("plan row sums do not match the source measure")
        if np.abs(p.sum(axis=0) - self.target.weights).max() > MARGINAL_ATOL:
            raise InvalidInput("plan column sums do not match the target measure")
        p.setflags(write=False)
        object.__setattr__(self, "plan", p)

    @property
    def shape(self):
        return self.plan.shape

    @property
    def T(self) -> "TransportPlan":
        return TransportPlan(self.plan.T.copy(), self.target, self.source)

    @classmethod
    def product(cls, mu: DiscreteMeasure, nu: DiscreteMeasure) -> "TransportPlan":
        return cls(np.outer(mu.weights, nu.weights), mu, nu)

    @classmethod
    def uniform_product(cls, n0: int, n1: int) -> "TransportPlan":
        return cls.product(DiscreteMeasure.uniform(n0), DiscreteMeasure.uniform(n1))

    @classmethod
    def from_permutation(cls, perm: Sequence[int]) -> "TransportPlan":
        """Scaled permutation matrix: sample ``m`` is sent to ``perm[m]``."""
        n = len(perm)
        p = np.zeros((n, n))
        p[np.arange(n), np.asarray(perm)] = 1.0 / n
        mu = DiscreteMeasure.uniform(n)
        return cls(p, mu, mu)


@dataclass(frozen=True)
class FusedProblem:
    """Lower-level problem coupling group 0 (rows) with group 1 (columns).

    ``d_x*`` and ``d_z*`` are intra-group covariate / latent distance matrices
    and ``d_z01`` is the cross-group latent cost; ``beta`` weighs the latent
    structure term against the latent feature term.
    """

    d_x0: np.ndarray
    d_x1: np.ndarray
    d_z0: np.ndarray
    d_z1: np.ndarray
    d_z01: np.ndarray
    beta: float

    def __post_init__(self):
        mats = {}
        for name in ("d_x0", "d_x1", "d_z0", "d_z1", "d_z01"):
            mats[name] = as_matrix(getattr(self, name), name)
        n0 = mats["d_z01"].shape[0]
        n1 = mats["d_z01"].shape[1]
        for name, size in (("d_x0", n0), ("d_z0", n0), ("d_x1", n1), ("d_z1", n1)):
            m = mats[name]
            if m.shape != (size, size):
                raise InvalidInput(f"{name} must be {size}x{size}, got {m.shape}")
            _check_distance_matrix(m, name)
        if not 0.0 <= float(self.beta) <= 1.0:
            raise InvalidInput(f"beta must lie in [0, 1], got {self.beta}")
        for name, m in mats.items():
            m.setflags(write=False)
            object.__setattr__(self, name, m)
        object.__setattr__(self, "beta", float(self.beta))

    @property
    def n0(self) -> int:
        return self.d_z01.shape[0]

    @property
    def n1(self) -> int:
        return self.d_z01.shape[1]


@dataclass
class CgReport:
    iterations: int
    objective_trace: list = field(default_factory=list)
    converged: bool = False
    final_objective: float = 0.0

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "objective_trace": [float(v) for v in self.objective_trace],
            "converged": self.converged,
            "final_objective": float(self.final_objective),
        }


def _check_distance_matrix(m: np.ndarray, name: str):
    atol = 1e-9 * max(1.0, float(np.abs(m).max()))
    if np.abs(m - m.T).max() > atol:
        raise InvalidInput(f"{name} is not symmetric")
    if np.abs(np.diag(m)).max() > atol:
        raise InvalidInput(f"{name} has a nonzero diagonal")


# ---------------------------------------------------------------------------
# distances


def pairwise_sq_dist(points_a, points_b) -> np.ndarray:
    """Squared Euclidean distances ``||a_m - b_n||^2``."""
    a = _as_points(points_a, "points_a")
    b = _as_points(points_b, "points_b")
    if a.shape[1] != b.shape[1]:
        raise InvalidInput(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("mnd,mnd->mn", diff, diff)


def pairwise_dist(points_a, points_b) -> np.ndarray:
    """Euclidean distances ``||a_m - b_n||``."""
    return np.sqrt(pairwise_sq_dist(points_a, points_b))


# ---------------------------------------------------------------------------
# linear OT


_NO_BASIS = (np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64))


def _emd_array(cost: np.ndarray, a: np.ndarray, b: np.ndarray, basis=None):
    """Vertex-optimal plan for uniform or general marginals.

    With ``basis`` (a list, possibly empty) the simplex is warm-started from
    the tree stored in it and the final tree is written back; the tree stays
    feasible as long as ``a`` and ``b`` do not change.
    """
    m, n = cost.shape
    if m == 1 or n == 1:
        return np.outer(a, b)
    scale = float(m * n)
    supply = a * scale
    demand = b * scale
    r_supply, r_demand = np.round(supply), np.round(demand)
    if np.allclose(supply, r_supply, rtol=0, atol=1e-9) and np.allclose(demand, r_demand, rtol=0, atol=1e-9):
        supply, demand = r_supply, r_demand
        # dyadic perturbation keeps every flow exactly representable
        delta = 2.0 ** -math.ceil(math.log2(m + 2))
    else:
        pos = np.concatenate([supply[supply > 0], demand[demand > 0]])
        delta = 1e-9 * float(pos.min()) / (m + 1)
    pert_supply = supply + delta
    pert_demand = demand.copy()
    pert_demand[-1] += m * delta
    tol = 1e-11 * max(float(np.abs(cost).max()), 1e-300)
    warm = tuple(basis) if basis else _NO_BASIS
    plan, status, _, basis_r, basis_c = transport_simplex(
        np.ascontiguousarray(cost), supply, demand, pert_supply, pert_demand,
        100 * (m + n), tol, warm[0], warm[1],
    )
    if status != STATUS_OPTIMAL:
        raise SolverFailure(f"network simplex exceeded {100 * (m + n)} pivots")
    if basis is not None:
        basis[:] = [basis_r, basis_c]
    return plan / scale


def solve_emd(cost, mu: DiscreteMeasure, nu: DiscreteMeasure) -> TransportPlan:
    """Exact minimizer of ``<cost, T>`` over couplings of ``mu`` and ``nu``.

    Runs a network simplex on the bipartite transport graph and returns a
    vertex of the transportation polytope.
    """
    c = as_matrix(cost, "cost")
    if c.shape != (len(mu), len(nu)):
        raise InvalidInput(f"cost shape {c.shape} does not match measures ({len(mu)}, {len(nu)})")
    plan = _emd_array(c, mu.weights, nu.weights)
    return TransportPlan(plan, mu, nu)


def emd_objective(cost, mu: DiscreteMeasure, nu: DiscreteMeasure) -> float:
    c = as_matrix(cost, "cost")
    return float(np.sum(c * solve_emd(c, mu, nu).plan))


# ---------------------------------------------------------------------------
# quadratic objectives


class _QuadraticTransport:
    """Objective ``<L, T> - 2 sum_i w_i <A_i T B_i, T>`` over Pi(p, q).

    Every block has symmetric ``A_i`` (rows) and ``B_i`` (columns).
    """

    def __init__(self, linear, blocks, p, q):
        self.linear = linear
        self.blocks = [(w, a, b) for (w, a, b) in blocks if w != 0.0]
        self.p = p
        self.q = q

    def _bilinear(self, t):
        out = np.zeros_like(self.linear)
        for w, a, b in self.blocks:
            out += w * (a @ t @ b)
        return out

    def objective(self, t) -> float:
        return float(np.sum((self.linear - 2.0 * self._bilinear(t)) * t))

    def gradient(self, t) -> np.ndarray:
        return self.linear - 4.0 * self._bilinear(t)

    def step_coefficients(self, t, delta):
        """(a, b) such that objective(t + s*delta) = objective(t) + b s + a s^2."""
        q_dd = np.sum(self._bilinear(delta) * delta)
        q_td = np.sum(self._bilinear(t) * delta)
        a = -2.0 * q_dd
        b = float(np.sum(self.linear * delta)) - 4.0 * q_td
        return float(a), float(b)


def _gw_constant(d_a, d_b, p, q) -> np.ndarray:
    return np.outer((d_a * d_a) @ p, np.ones(q.size)) + np.outer(np.ones(p.size), (d_b * d_b) @ q)


def _gw_program(d_a, d_b, p, q) -> _QuadraticTransport:
    return _QuadraticTransport(_gw_constant(d_a, d_b, p, q), [(1.0, d_a, d_b)], p, q)


def _fused_program(prob: FusedProblem, p, q) -> _QuadraticTransport:
    beta = prob.beta
    linear = (
        _gw_constant(prob.d_x0, prob.d_z1, p, q)
        + _gw_constant(prob.d_x1, prob.d_z0, q, p).T
        + (1.0 - beta) * prob.d_z01
        + beta * _gw_constant(prob.d_z0, prob.d_z1, p, q)
    )
    blocks = [
        (1.0, prob.d_x0, prob.d_z1),
        (1.0, prob.d_z0, prob.d_x1),
        (beta, prob.d_z0, prob.d_z1),
    ]
    return _QuadraticTransport(linear, blocks, p, q)


def _fgw_program(d_z0, d_z1, d_z01, beta, p, q) -> _QuadraticTransport:
    linear = (1.0 - beta) * d_z01 + beta * _gw_constant(d_z0, d_z1, p, q)
    return _QuadraticTransport(linear, [(beta, d_z0, d_z1)], p, q)


def _check_plan_for(plan: TransportPlan, n0: int, n1: int):
    if not isinstance(plan, TransportPlan):
        raise InvalidInput("expected a TransportPlan")
    if plan.shape != (n0, n1):
        raise InvalidInput(f"plan shape {plan.shape} does not match problem ({n0}, {n1})")


def wasserstein_term(d_z01, plan: TransportPlan) -> float:
    """``<d_z01, T>`` (squared-cost inner product, no square root)."""
    d = as_matrix(d_z01, "d_z01")
    _check_plan_for(plan, *d.shape)
    return float(np.sum(d * plan.plan))


def gw_objective(d_a, d_b, plan: TransportPlan) -> float:
    """Gromov-Wasserstein objective of ``plan`` between two distance matrices."""
    a = as_matrix(d_a, "d_a")
    b = as_matrix(d_b, "d_b")
    if a.shape[0] != a.shape[1] or b.shape[0] != b.shape[1]:
        raise InvalidInput("distance matrices must be square")
    _check_plan_for(plan, a.shape[0], b.shape[0])
    prog = _gw_program(a, b, plan.source.weights, plan.target.weights)
    return prog.objective(plan.plan)


def fused_objective(prob: FusedProblem, plan: TransportPlan) -> float:
    _check_plan_for(plan, prob.n0, prob.n1)
    return _fused_program(prob, plan.source.weights, plan.target.weights).objective(plan.plan)


def fused_gradient(prob: FusedProblem, plan: TransportPlan) -> np.ndarray:
    """Gradient in T of the fused lower-level objective (marginal terms held fixed)."""
    _check_plan_for(plan, prob.n0, prob.n1)
    return _fused_program(prob, plan.source.weights, plan.target.weights).gradient(plan.plan)


def quadratic_step(a: float, b: float) -> float:
    """Minimizer over [0, 1] of ``a s^2 + b s``."""
    if a > 0:
        return min(1.0, max(0.0, -b / (2.0 * a)))
    return 1.0 if a + b < 0 else 0.0


def line_search(prob: FusedProblem, t_cur: TransportPlan, t_dir: TransportPlan) -> float:
    """Exact step toward ``t_dir`` from ``t_cur`` for the fused objective."""
    _check_plan_for(t_cur, prob.n0, prob.n1)
    _check_plan_for(t_dir, prob.n0, prob.n1)
    prog = _fused_program(prob, t_cur.source.weights, t_cur.target.weights)
    a, b = prog.step_coefficients(t_cur.plan, t_dir.plan - t_cur.plan)
    return quadratic_step(a, b)


def _run_cg(prog: _QuadraticTransport, t0: np.ndarray, max_iter: int, tol: float):
    p, q = prog.p, prog.q
    t = t0
    f = prog.objective(t)
    trace = [f]
    if p.size == 1 or q.size == 1:
        # singleton marginal: the polytope is a single point
        return t, CgReport(0, trace, True, f)
    converged = False
    it = 0
    basis = []
    # the bilinear map is linear in T, so it is carried along with the iterate
    bt = prog._bilinear(t)
    linear = prog.linear
    while it < max_iter:
        it += 1
        direction = _emd_array(linear - 4.0 * bt, p, q, basis)
        delta = direction - t
        bd = prog._bilinear(delta)
        a = -2.0 * float(np.sum(bd * delta))
        b = float(np.sum(linear * delta)) - 4.0 * float(np.sum(bt * delta))
        step = quadratic_step(a, b)
        if step > 0:
            t_new = t + step * delta
            bt_new = bt + step * bd
        else:
            t_new, bt_new = t, bt
        f_new = float(np.sum((linear - 2.0 * bt_new) * t_new))
        if f_new > f:
            # rounding pushed the exact step uphill; keep the current iterate
            trace.append(f)
            converged = True
            break
        decrease = f - f_new
        t, f, bt = t_new, f_new, bt_new
        trace.append(f)
        if decrease <= tol * max(abs(f), 1e-12):
            converged = True
            break
    return t, CgReport(it, trace, converged, f)


def conditional_gradient(
    prob: FusedProblem,
    t_init: Optional[TransportPlan] = None,
    max_iter: int = DEFAULT_CG_MAX_ITER,
    tol: float = DEFAULT_CG_TOL,
) -> tuple[TransportPlan, CgReport]:
    """Frank-Wolfe on the fused problem with exact line search.

    Starts from the product coupling unless ``t_init`` is given and stops when
    the relative objective decrease drops below ``tol`` or after ``max_iter``
    iterations.
    """
    if max_iter < 1:
        raise InvalidInput("max_iter must be >= 1")
    if tol <= 0:
        raise InvalidInput("tol must be positive")
    if t_init is None:
        t_init = TransportPlan.uniform_product(prob.n0, prob.n1)
    _check_plan_for(t_init, prob.n0, prob.n1)
    prog = _fused_program(prob, t_init.source.weights, t_init.target.weights)
    t, report = _run_cg(prog, np.array(t_init.plan), max_iter, tol)
    return _finalize(t, t_init.source, t_init.target), report


def fused_solve(
    prob: FusedProblem, restarts: int = 0, *, seed: int = 0,
    max_iter: int = DEFAULT_CG_MAX_ITER, tol: float = DEFAULT_CG_TOL,
) -> tuple[TransportPlan, CgReport]:
    """Multi-start :func:`conditional_gradient`: product start plus ``restarts`` vertices."""
    mu = DiscreteMeasure.uniform(prob.n0)
    nu = DiscreteMeasure.uniform(prob.n1)
    prog = _fused_program(prob, mu.weights, nu.weights)
    starts = [np.outer(mu.weights, nu.weights)] + vertex_inits(prob.n0, prob.n1, restarts, seed)
    _, t, report = _multistart(prog, starts, max_iter, tol)
    return _finalize(t, mu, nu), report


def _finalize(t: np.ndarray, mu: DiscreteMeasure, nu: DiscreteMeasure) -> TransportPlan:
    return TransportPlan(np.maximum(t, 0.0), mu, nu)


def vertex_inits(n0: int, n1: int, restarts: int, seed: int = 0) -> list[np.ndarray]:
    """Starting vertices for multi-start CG.

    Square problems use scaled permutations (identity first; all of them when
    ``restarts >= n!``). Rectangular problems use random polytope vertices.
    """
    if restarts <= 0:
        return []
    rng = np.random.default_rng(seed)
    out = []
    if n0 == n1:
        if n0 <= 8 and restarts >= math.factorial(n0):
            perms = itertools.permutations(range(n0))
        else:
            perms = [np.arange(n0)] + [rng.permutation(n0) for _ in range(restarts - 1)]
        for perm in perms:
            t = np.zeros((n0, n0))
            t[np.arange(n0), np.asarray(perm)] = 1.0 / n0
            out.append(t)
    else:
        p = np.full(n0, 1.0 / n0)
        q = np.full(n1, 1.0 / n1)
        for _ in range(restarts):
            out.append(_emd_array(rng.random((n0, n1)), p, q))
    return out


def _multistart(prog, inits, max_iter, tol):
    best_t, best_f, best_report = None, np.inf, None
    for t0 in inits:
        t, report = _run_cg(prog, np.array(t0), max_iter, tol)
        if report.final_objective < best_f:
            best_t, best_f, best_report = t, report.final_objective, report
    return best_f, best_t, best_report


def gw_discrepancy(
    d_a,
    d_b,
    restarts: int = 1,
    *,
    inits: Optional[Sequence] = None,
    seed: int = 0,
    max_iter: int = DEFAULT_CG_MAX_ITER,
    tol: float = DEFAULT_CG_TOL,
) -> tuple[float, TransportPlan]:
    """Squared GW discrepancy between uniform measures on two metric samples.

    CG is started from the product coupling and from ``restarts`` polytope
    vertices (see :func:`vertex_inits`) plus any explicit ``inits``; the
    smallest objective found is returned together with its plan.
    """
    plan, report = gw_solve(d_a, d_b, restarts, inits=inits, seed=seed, max_iter=max_iter, tol=tol)
    return report.final_objective, plan


def _extra_starts(inits):
    return [e.plan if isinstance(e, TransportPlan) else np.asarray(e, dtype=float) for e in inits or ()]


def gw_solve(
    d_a,
    d_b,
    restarts: int = 1,
    *,
    inits: Optional[Sequence] = None,
    seed: int = 0,
    max_iter: int = DEFAULT_CG_MAX_ITER,
    tol: float = DEFAULT_CG_TOL,
    product_start: bool = True,
) -> tuple[TransportPlan, CgReport]:
    """Like :func:`gw_discrepancy` but returns the best run's plan and CG report.

    ``restarts=0`` runs CG from the product coupling only;
    ``product_start=False`` drops that start.
    """
    a = as_matrix(d_a, "d_a")
    b = as_matrix(d_b, "d_b")
    if a.shape[0] != a.shape[1] or b.shape[0] != b.shape[1]:
        raise InvalidInput("distance matrices must be square")
    _check_distance_matrix(a, "d_a")
    _check_distance_matrix(b, "d_b")
    mu = DiscreteMeasure.uniform(a.shape[0])
    nu = DiscreteMeasure.uniform(b.shape[0])
    prog = _gw_program(a, b, mu.weights, nu.weights)
    starts = [np.outer(mu.weights, nu.weights)] if product_start else []
    starts += vertex_inits(len(mu), len(nu), restarts, seed)
    starts += _extra_starts(inits)
    if not starts:
        raise InvalidInput("no CG starting points")
    _, t, report = _multistart(prog, starts, max_iter, tol)
    return _finalize(t, mu, nu), report


def fgw_discrepancy(
    d_z0, d_z1, d_z01, beta: float, restarts: int = 1, *, inits=None, seed: int = 0,
    max_iter: int = DEFAULT_CG_MAX_ITER, tol: float = DEFAULT_CG_TOL,
) -> tuple[float, TransportPlan]:
    """Squared fused GW objective minimized by multi-start CG."""
    plan, report = fgw_solve(d_z0, d_z1, d_z01, beta, restarts, inits=inits, seed=seed,
                             max_iter=max_iter, tol=tol)
    return report.final_objective, plan


def fgw_solve(
    d_z0, d_z1, d_z01, beta: float, restarts: int = 1, *, inits=None, seed: int = 0,
    max_iter: int = DEFAULT_CG_MAX_ITER, tol: float = DEFAULT_CG_TOL,
) -> tuple[TransportPlan, CgReport]:
    """Like :func:`fgw_discrepancy` but returns the best run's plan and CG report."""
    a = as_matrix(d_z0, "d_z0")
    b = as_matrix(d_z1, "d_z1")
    c = as_matrix(d_z01, "d_z01")
    if c.shape != (a.shape[0], b.shape[0]):
        raise InvalidInput("d_z01 shape does not match d_z0/d_z1")
    if not 0.0 <= beta <= 1.0:
        raise InvalidInput(f"beta must be in [0, 1], got {beta}")
    mu = DiscreteMeasure.uniform(a.shape[0])
    nu = DiscreteMeasure.uniform(b.shape[0])
    prog = _fgw_program(a, b, c, float(beta), mu.weights, nu.weights)
    starts = [np.outer(mu.weights, nu.weights)] + vertex_inits(len(mu), len(nu), restarts, seed)
    starts += _extra_starts(inits)
    _, t, report = _multistart(prog, starts, max_iter, tol)
    return _finalize(t, mu, nu), report


GwSolver = Callable[[np.ndarray, np.ndarray], "tuple[float, TransportPlan]"]


# ---------------------------------------------------------------------------
# CSV debugging format: first line "rows,cols", then one row per line


def write_matrix_csv(path, matrix) -> None:
    m = as_matrix(matrix)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{m.shape[0]},{m.shape[1]}\n")
        for row in m:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def read_matrix_csv(path) -> np.ndarray:
    with open(path, encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines:
        raise InvalidInput(f"{path}: empty matrix file")
    try:
        rows, cols = (int(v) for v in lines[0].split(","))
        data = [[float(v) for v in ln.split(",")] for ln in lines[1:]]
    except ValueError as exc:
        raise InvalidInput(f"{path}: malformed matrix file ({exc})") from None
    if len(data) != rows or any(len(r) != cols for r in data):
        raise InvalidInput(f"{path}: header says {rows}x{cols} but body disagrees")
    return as_matrix(data, str(path))
