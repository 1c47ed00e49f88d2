"""Bi-level training loop: per-epoch plan solve, then mini-batch updates."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np

from . import cfr_model as cm
from .data_io import Cohort, SplitSpec, Standardizer, split
from .errors import InvalidInput, NumericalError
from .metrics_eval import EvalReport, eval_ite, gw_information_loss, gw_information_loss_arrays
from .ot_core import (
    CgReport,
    FusedProblem,
    conditional_gradient,
    emd_objective,
    fgw_solve,
    gw_solve,
    pairwise_sq_dist,
    solve_emd,
    DiscreteMeasure,
)

VARIANTS = ("gwib", "gwib_fgw", "gwib_rt", "gwib_gw", "gwib_gap", "gwib_opt", "tarnet", "cfr_wass")
ABLATIONS = ("gwib", "gwib_fgw", "gwib_rt", "gwib_gw", "gwib_gap", "gwib_opt")
BATCH_SIZES = (16, 32, 64, 128)
DIVERGENCE_LIMIT = 1e12


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 32
    lam: float = 0.1
    beta: float = 0.5
    d_phi: tuple = (32, 16)
    d_h: int = 16
    epochs: int = 200
    patience: int = 30
    cg_max_iter: int = 200
    cg_tol: float = 1e-7
    seed: int = 0
    variant: str = "gwib"
    squared_gw_costs: bool = False
    plan_scope: str = "full_epoch"
    optimizer: str = "adam"
    dropout_rate: float = 0.1
    bounded_latent: bool = False
    max_reg_samples: int = 512

    def __post_init__(self):
        self.d_phi = tuple(int(v) for v in self.d_phi)
        if not 1e-5 <= self.lr <= 1e-1:
            raise InvalidInput(f"lr must be in [1e-5, 1e-1], got {self.lr}")
        if self.batch_size not in BATCH_SIZES:
            raise InvalidInput(f"batch_size must be one of {BATCH_SIZES}, got {self.batch_size}")
        if not (self.lam == 0.0 or 1e-4 <= self.lam <= 1.0):
            raise InvalidInput(f"lambda must be 0 or in [1e-4, 1], got {self.lam}")
        if not 0.1 <= self.beta <= 0.9:
            raise InvalidInput(f"beta must be in [0.1, 0.9], got {self.beta}")
        if len(self.d_phi) != 2 or min(self.d_phi) < 1 or self.d_h < 1:
            raise InvalidInput("d_phi needs two positive widths and d_h must be positive")
        if self.epochs < 1 or self.patience < 1:
            raise InvalidInput("epochs and patience must be positive")
        if self.cg_max_iter < 1 or not self.cg_tol > 0:
            raise InvalidInput("cg_max_iter must be >= 1 and cg_tol > 0")
        if self.variant not in VARIANTS:
            raise InvalidInput(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.plan_scope != "full_epoch":
            raise InvalidInput("plan_scope must be 'full_epoch'")
        if self.optimizer not in ("adam", "sgd"):
            raise InvalidInput("optimizer must be 'adam' or 'sgd'")
        if self.max_reg_samples < 1:
            raise InvalidInput("max_reg_samples must be positive")

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainConfig":
        """Build from string values (config file); ``lambda`` maps to ``lam``."""
        kinds = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            name = "lam" if key == "lambda" else key
            if name not in kinds:
                raise InvalidInput(f"unknown config key {key!r}")
            kwargs[name] = _coerce(name, raw, kinds[name])
        return cls(**kwargs)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["d_phi"] = list(self.d_phi)
        return out

    def replace(self, **changes) -> "TrainConfig":
        values = asdict(self)
        values.update(changes)
        return TrainConfig(**values)


def _coerce(name, raw, kind):
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if kind == "bool":
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "tuple":
            return tuple(int(v) for v in text.strip("[]()").replace(",", " ").split())
    except ValueError:
        raise InvalidInput(f"config key {name}: cannot parse {raw!r}") from None
    return text


def apply_variant(cfg: TrainConfig) -> cm.Recipe:
    """Regularizer recipe for ``cfg.variant``."""
    v = cfg.variant
    if v == "gwib":
        return cm.Recipe("gwib")
    if v == "gwib_fgw":
        return cm.Recipe(v, use_fgw=False)
    if v == "gwib_rt":
        return cm.Recipe(v, use_rt=False)
    if v == "gwib_gw":
        return cm.Recipe(v, use_gw=False)
    if v == "gwib_gap":
        return cm.Recipe(v, kind="gap", shared_plan=False)
    if v == "gwib_opt":
        return cm.Recipe(v, shared_plan=False)
    if v == "cfr_wass":
        return cm.Recipe(v, kind="wass", shared_plan=False)
    if v == "tarnet":
        return cm.Recipe(v, kind="none")
    raise InvalidInput(f"unknown variant {v!r}")


def effective_lambda(cfg: TrainConfig) -> float:
    return 0.0 if cfg.variant == "tarnet" else cfg.lam


# ---------------------------------------------------------------------------
# plans


def _latent_mats(z0, z1, squared):
    return (
        cm.covariate_distances(z0, squared),
        cm.covariate_distances(z1, squared),
        pairwise_sq_dist(z0, z1),
    )


def solve_plans(recipe: cm.Recipe, z0, z1, dx0, dx1, cfg: TrainConfig):
    """Plans for one epoch; returns ``(PlanSet, [CgReport, ...])``."""
    dz0, dz1, d01 = _latent_mats(z0, z1, cfg.squared_gw_costs)
    n0, n1 = d01.shape
    it, tol = cfg.cg_max_iter, cfg.cg_tol
    if recipe.kind == "gwib" and recipe.shared_plan:
        prob = FusedProblem(dx0, dx1, dz0, dz1, d01, cfg.beta)
        plan, report = conditional_gradient(prob, None, it, tol)
        return cm.PlanSet.shared(plan), [report]
    if recipe.kind == "gwib":
        fused, r_f = fgw_solve(dz0, dz1, d01, cfg.beta, restarts=0, max_iter=it, tol=tol)
        cross0, r_0 = gw_solve(dx0, dz1, restarts=0, max_iter=it, tol=tol)
        cross1, r_1 = gw_solve(dx1, dz0, restarts=0, max_iter=it, tol=tol)
        return cm.PlanSet(fused=fused.plan, cross0=cross0.plan, cross1=cross1.plan), [r_f, r_0, r_1]
    if recipe.kind == "gap":
        # own within-group plans; identity start keeps GW <= R_t^2
        self0, r_0 = gw_solve(dx0, dz0, restarts=1, max_iter=it, tol=tol)
        self1, r_1 = gw_solve(dx1, dz1, restarts=1, max_iter=it, tol=tol)
        return cm.PlanSet(self0=self0.plan, self1=self1.plan), [r_0, r_1]
    if recipe.kind == "wass":
        mu, nu = DiscreteMeasure.uniform(n0), DiscreteMeasure.uniform(n1)
        plan = solve_emd(d01, mu, nu)
        value = float(np.sum(d01 * plan.plan))
        return cm.PlanSet(wass=plan.plan), [CgReport(0, [value], True, value)]
    return cm.PlanSet(), []


def wasserstein_latent(z0, z1) -> float:
    """Rooted empirical W2 between two latent groups (EMD on squared costs)."""
    d01 = pairwise_sq_dist(z0, z1)
    n0, n1 = d01.shape
    return math.sqrt(max(emd_objective(d01, DiscreteMeasure.uniform(n0), DiscreteMeasure.uniform(n1)), 0.0))


# ---------------------------------------------------------------------------
# optimizers


class Adam:
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {}
        self.v = {}
        self.step_count = 0

    def step(self, params: cm.CfrParams, grads: dict):
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for k, g in grads.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g
            params.tensors[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


class Sgd:
    def __init__(self, lr):
        self.lr = lr

    def step(self, params: cm.CfrParams, grads: dict):
        for k, g in grads.items():
            params.tensors[k] -= self.lr * g


def make_optimizer(cfg: TrainConfig):
    return Adam(cfg.lr) if cfg.optimizer == "adam" else Sgd(cfg.lr)


# ---------------------------------------------------------------------------
# training


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    regularizer: Optional[cm.RegularizerBreakdown]
    cg_report: Optional[CgReport]
    gw_diag_0: float
    gw_diag_1: float
    aux_cg_reports: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "train_loss": self.train_loss,
            "val_loss": self.val_loss,
            "regularizer": None if self.regularizer is None else self.regularizer.to_dict(),
            "cg_report": None if self.cg_report is None else self.cg_report.to_dict(),
            "aux_cg_reports": [r.to_dict() for r in self.aux_cg_reports],
            "gw_diag_0": self.gw_diag_0,
            "gw_diag_1": self.gw_diag_1,
        }


def _validation_loss(params: cm.CfrParams, val: Cohort) -> float:
    return cm.factual_loss(params, val.x, val.t, val.y_factual)


def _check_finite(value, what, epoch):
    if not math.isfinite(value) or abs(value) > DIVERGENCE_LIMIT:
        raise NumericalError(f"{what} diverged at epoch {epoch}: {value}", epoch=epoch)


def _reg_indices(n, cap, rng):
    if n <= cap:
        return np.arange(n)
    return np.sort(rng.choice(n, size=cap, replace=False))


def _diagnostics(params, x0, x1, squared):
    # identity-start CG: cheap, and never above R_t^2
    return tuple(
        gw_information_loss_arrays(x, cm.encode(params, x), squared, restarts=1, product_start=False)
        for x in (x0, x1)
    )


def train(train_set: Cohort, val_set: Cohort, cfg: TrainConfig):
    """Fit a two-head network; returns ``(best_params, records)``.

    Each epoch: latents of the (capped) training groups -> plan(s) by CG ->
    ceil(N / batch_size) optimizer steps on the mini-batch factual loss plus
    lam times the full-group regularizer at the fixed plan(s).
    """
    for name, part in (("training", train_set), ("validation", val_set)):
        if len(part) == 0:
            raise InvalidInput(f"{name} split is empty")
    for group in (0, 1):
        if not np.any(train_set.t == group):
            raise InvalidInput(f"training split has no samples with t = {group}")
    recipe = apply_variant(cfg)
    lam = effective_lambda(cfg)
    use_reg = lam != 0.0 and recipe.kind != "none"

    params = cm.CfrParams.init(train_set.dim, cfg.d_phi, cfg.d_h, seed=cfg.seed,
                               dropout_rate=cfg.dropout_rate, bounded_latent=cfg.bounded_latent)
    opt = make_optimizer(cfg)
    rng = np.random.default_rng([cfg.seed, 1])
    sub_rng = np.random.default_rng([cfg.seed, 2])

    x0_all = train_set.x[train_set.t == 0]
    x1_all = train_set.x[train_set.t == 1]
    x0 = x0_all[_reg_indices(x0_all.shape[0], cfg.max_reg_samples, sub_rng)]
    x1 = x1_all[_reg_indices(x1_all.shape[0], cfg.max_reg_samples, sub_rng)]
    if use_reg:
        dx0 = cm.covariate_distances(x0, cfg.squared_gw_costs)
        dx1 = cm.covariate_distances(x1, cfg.squared_gw_costs)

    n = len(train_set)
    n_batches = math.ceil(n / cfg.batch_size)
    best_val, best_params, wait = math.inf, params.copy(), 0
    records = []
    for epoch in range(1, cfg.epochs + 1):
        breakdown, report, aux = None, None, []
        if use_reg:
            z0, z1 = cm.encode(params, x0), cm.encode(params, x1)
            plans, reports = solve_plans(recipe, z0, z1, dx0, dx1, cfg)
            report, aux = (reports[0], reports[1:]) if reports else (None, [])
            breakdown = cm.regularizer_from_latents(z0, z1, dx0, dx1, plans, cfg.beta, recipe,
                                                    cfg.squared_gw_costs)[0]
            _check_finite(breakdown.total, "regularizer", epoch)
        perm = rng.permutation(n)
        for b in range(n_batches):
            idx = perm[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            loss, grads = cm.loss_and_grad(params, train_set.x[idx], train_set.t[idx],
                                           train_set.y_factual[idx], rng=rng)
            _check_finite(loss, "training loss", epoch)
            if use_reg:
                _, rgrads = cm.regularizer_and_grad(params, x0, x1, plans, cfg.beta, recipe,
                                                    cfg.squared_gw_costs, dx0, dx1)
                for k in grads:
                    grads[k] += lam * rgrads[k]
            opt.step(params, grads)
            for k, v in params.tensors.items():
                if not np.all(np.isfinite(v)):
                    raise NumericalError(f"parameter {k} became non-finite at epoch {epoch}", epoch=epoch)
        train_loss = cm.factual_loss(params, train_set.x, train_set.t, train_set.y_factual)
        val_loss = _validation_loss(params, val_set)
        _check_finite(train_loss, "training loss", epoch)
        _check_finite(val_loss, "validation loss", epoch)
        improved = val_loss < best_val
        if improved:
            best_val, best_params, wait = val_loss, params.copy(), 0
        else:
            wait += 1
        stop = wait >= cfg.patience or epoch == cfg.epochs
        diag0, diag1 = _diagnostics(params, x0, x1, cfg.squared_gw_costs)
        records.append(EpochRecord(epoch, train_loss, val_loss, breakdown, report, diag0, diag1, aux))
        if stop:
            break
    return best_params, records


@dataclass
class RunResult:
    params: cm.CfrParams
    records: list
    in_sample: Optional[EvalReport]
    out_sample: Optional[EvalReport]
    gw_loss: tuple
    standardizer: Standardizer


def fit_and_evaluate(cohort: Cohort, cfg: TrainConfig, split_seed: Optional[int] = None) -> RunResult:
    """Split (seeded), standardize on train, train, then evaluate.

    In-sample scope is train + val, out-sample is the test split. ITE metrics
    need ground truth; the GW information loss is measured on the training
    split per group.
    """
    seed = cfg.seed if split_seed is None else split_seed
    tr, va, te = split(cohort, SplitSpec(seed=seed))
    scaler = Standardizer.fit(tr.x)
    tr, va, te = scaler.apply(tr), scaler.apply(va), scaler.apply(te)
    params, records = train(tr, va, cfg)
    in_rep = out_rep = None
    if cohort.has_truth:
        in_rep = eval_ite(params, Cohort.concat(tr, va), "in_sample")
        out_rep = eval_ite(params, te, "out_sample")
    gw = tuple(gw_information_loss(params, tr, g, cfg.squared_gw_costs) for g in (0, 1))
    return RunResult(params, records, in_rep, out_rep, gw, scaler)
