"""Brute-force reference computations for small transport problems.

These share no code path with the factorized objectives or the simplex in
:mod:`gwib.ot_core`, so they serve as independent checks (tests, ``--oracle``).
"""

from __future__ import annotations

import itertools
import math

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import InvalidInput

MAX_BRUTE_FORCE_N = 8


def permutation_plans(n: int):
    """Yield every scaled permutation matrix of size ``n`` (Birkhoff vertices)."""
    for perm in itertools.permutations(range(n)):
        t = np.zeros((n, n))
        t[np.arange(n), perm] = 1.0 / n
        yield t


def quadruple_sum_gw(d_a, d_b, plan) -> float:
    """sum_{m,n,k,l} T_mn T_kl (d_a[m,k] - d_b[n,l])^2 evaluated term by term."""
    a = np.asarray(d_a, dtype=float)
    b = np.asarray(d_b, dtype=float)
    t = np.asarray(plan, dtype=float)
    # index order (m, n, k, l)
    diff = a[:, None, :, None] - b[None, :, None, :]
    weight = t[:, :, None, None] * t[None, None, :, :]
    return float(np.sum(weight * diff**2))


def quadruple_sum_fused(d_x0, d_x1, d_z0, d_z1, d_z01, beta, plan) -> float:
    t = np.asarray(plan, dtype=float)
    return (
        quadruple_sum_gw(d_x0, d_z1, t)
        + quadruple_sum_gw(d_x1, d_z0, t.T)
        + (1.0 - beta) * float(np.sum(np.asarray(d_z01) * t))
        + beta * quadruple_sum_gw(d_z0, d_z1, t)
    )


def _check_small(n):
    if n > MAX_BRUTE_FORCE_N:
        raise InvalidInput(f"brute force limited to n <= {MAX_BRUTE_FORCE_N}, got {n}")


def brute_force_emd(cost) -> tuple[float, np.ndarray]:
    """Minimum of <cost, T> over the n! vertices of the uniform Birkhoff polytope."""
    c = np.asarray(cost, dtype=float)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise InvalidInput("permutation brute force needs a square cost")
    _check_small(c.shape[0])
    best, best_t = math.inf, None
    for t in permutation_plans(c.shape[0]):
        v = float(np.sum(c * t))
        if v < best:
            best, best_t = v, t
    return best, best_t


def assignment_emd(cost) -> float:
    """Uniform-marginal OT value via a Hungarian solve on the lcm-replicated cost.

    Splitting row masses into lcm/n0 copies and column masses into lcm/n1
    copies turns the transport LP into an assignment problem.
    """
    c = np.asarray(cost, dtype=float)
    n0, n1 = c.shape
    size = n0 * n1 // math.gcd(n0, n1)
    big = np.repeat(np.repeat(c, size // n0, axis=0), size // n1, axis=1)
    rows, cols = linear_sum_assignment(big)
    return float(big[rows, cols].sum() / size)


def brute_force_gw(d_a, d_b) -> tuple[float, np.ndarray]:
    """Minimum quadruple-sum GW value over all permutation plans."""
    a = np.asarray(d_a, dtype=float)
    b = np.asarray(d_b, dtype=float)
    if a.shape != b.shape:
        raise InvalidInput("permutation brute force needs equal sample sizes")
    _check_small(a.shape[0])
    best, best_t = math.inf, None
    for t in permutation_plans(a.shape[0]):
        v = quadruple_sum_gw(a, b, t)
        if v < best:
            best, best_t = v, t
    return best, best_t


def brute_force_fused(d_x0, d_x1, d_z0, d_z1, d_z01, beta) -> tuple[float, np.ndarray]:
    n = np.asarray(d_z01).shape[0]
    if np.asarray(d_z01).shape != (n, n):
        raise InvalidInput("permutation brute force needs equal group sizes")
    _check_small(n)
    best, best_t = math.inf, None
    for t in permutation_plans(n):
        v = quadruple_sum_fused(d_x0, d_x1, d_z0, d_z1, d_z01, beta, t)
        if v < best:
            best, best_t = v, t
    return best, best_t


def brute_force_fgw(d_z0, d_z1, d_z01, beta) -> tuple[float, np.ndarray]:
    """Minimum of (1 - beta) <d_z01, T> + beta * GW(d_z0, d_z1; T) over permutations."""
    c = np.asarray(d_z01, dtype=float)
    n = c.shape[0]
    if c.shape != (n, n):
        raise InvalidInput("permutation brute force needs equal group sizes")
    _check_small(n)
    best, best_t = math.inf, None
    for t in permutation_plans(n):
        v = (1.0 - beta) * float(np.sum(c * t)) + beta * quadruple_sum_gw(d_z0, d_z1, t)
        if v < best:
            best, best_t = v, t
    return best, best_t
