"""Treatment-effect error metrics and the GW information-loss diagnostic."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .cfr_model import CfrParams, covariate_distances, encode, predict
from .data_io import Cohort
from .errors import InvalidInput
from .kmi_bound import EXACT_RESTART_MAX_N
from .ot_core import gw_solve

SCOPES = ("in_sample", "out_sample")


@dataclass
class EvalReport:
    eps_ate: float
    eps_pehe: float
    eps_pehe_root: float
    n: int
    scope: str
    factual_mse: float = float("nan")

    def to_dict(self) -> dict:
        return asdict(self)


def ite_errors(mu0, mu1, y0_hat, y1_hat) -> tuple[float, float]:
    """(eps_ATE, eps_PEHE) from true and predicted potential outcomes."""
    true_ite = np.asarray(mu1, dtype=float) - np.asarray(mu0, dtype=float)
    est_ite = np.asarray(y1_hat, dtype=float) - np.asarray(y0_hat, dtype=float)
    if true_ite.shape != est_ite.shape or true_ite.size == 0:
        raise InvalidInput("need matching, nonempty outcome arrays")
    err = true_ite - est_ite
    n = err.size
    eps_ate = abs(float(np.sum(err))) / n
    eps_pehe = float(np.sum(err * err)) / n
    return eps_ate, eps_pehe


def eval_ite(params: CfrParams, samples: Cohort, scope: str = "out_sample") -> EvalReport:
    """Eval-mode ITE errors on samples carrying ground-truth potential outcomes."""
    if scope not in SCOPES:
        raise InvalidInput(f"scope must be one of {SCOPES}")
    if len(samples) == 0:
        raise InvalidInput("no samples to evaluate")
    if not samples.has_truth:
        raise InvalidInput("evaluation needs mu0 and mu1 for every sample")
    y0, y1 = predict(params, samples.x)
    eps_ate, eps_pehe = ite_errors(samples.mu0, samples.mu1, y0, y1)
    factual = np.where(samples.t == 1, y1, y0)
    mse = float(np.mean((factual - samples.y_factual) ** 2))
    return EvalReport(eps_ate, eps_pehe, math.sqrt(eps_pehe), len(samples), scope, mse)


def gw_information_loss_arrays(x, z, squared_gw_costs: bool = False, restarts=None,
                               product_start: bool = True) -> float:
    """Squared GW discrepancy between covariates ``x`` and their latents ``z``.

    Small samples (N <= 6) enumerate every permutation start; larger ones use
    the product and identity starts.
    """
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    if n == 0:
        raise InvalidInput("group is empty")
    dx = covariate_distances(x, squared_gw_costs)
    dz = covariate_distances(z, squared_gw_costs)
    if restarts is None:
        restarts = math.factorial(n) if n <= EXACT_RESTART_MAX_N else 1
    _, report = gw_solve(dx, dz, restarts=restarts, product_start=product_start)
    return report.final_objective


def gw_information_loss(params: CfrParams, samples: Cohort, group: int,
                        squared_gw_costs: bool = False) -> float:
    """GW(X_t, phi(X_t)) for treatment group ``group`` of ``samples``."""
    if group not in (0, 1):
        raise InvalidInput(f"group must be 0 or 1, got {group}")
    x = samples.x[samples.t == group]
    if x.shape[0] == 0:
        raise InvalidInput(f"group {group} is empty")
    return gw_information_loss_arrays(x, encode(params, x), squared_gw_costs)
