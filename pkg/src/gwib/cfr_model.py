"""Two-head counterfactual regression network with hand-written backprop.

Encoder phi: two affine+ELU layers (tanh on the last one when
``bounded_latent``), dropout after each. Heads h0/h1: affine+ELU+dropout, then
a linear scalar output. The balancing regularizer is evaluated at fixed
transport plans and differentiated into the encoder only.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .errors import InvalidInput, NumericalError
from .ot_core import TransportPlan, pairwise_sq_dist

SQRT_EPS = 1e-12
CHECKPOINT_FORMAT = "gwib-cfr-params"
CHECKPOINT_VERSION = 1

ENCODER_LAYERS = ("enc.0", "enc.1")
HEAD_LAYERS = {0: ("h0.0", "h0.out"), 1: ("h1.0", "h1.out")}
LAYERS = ENCODER_LAYERS + HEAD_LAYERS[0] + HEAD_LAYERS[1]


def elu(a):
    return np.where(a > 0, a, np.expm1(np.minimum(a, 0.0)))


def elu_grad(a):
    return np.where(a > 0, 1.0, np.exp(np.minimum(a, 0.0)))


# ---------------------------------------------------------------------------
# parameters


@dataclass
class CfrParams:
    """Named weight (fan_in x fan_out) and bias tensors plus layer options."""

    tensors: dict
    dropout_rate: float = 0.1
    bounded_latent: bool = False

    def __post_init__(self):
        if not 0.0 <= self.dropout_rate < 1.0:
            raise InvalidInput(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        self.tensors = {k: np.asarray(v, dtype=np.float64) for k, v in self.tensors.items()}
        expected = {f"{layer}.{kind}" for layer in LAYERS for kind in ("W", "b")}
        if set(self.tensors) != expected:
            raise InvalidInput(f"parameter names must be {sorted(expected)}")
        chain = [("enc.0", "enc.1"), ("enc.1", "h0.0"), ("enc.1", "h1.0"),
                 ("h0.0", "h0.out"), ("h1.0", "h1.out")]
        for layer in LAYERS:
            w, b = self.tensors[f"{layer}.W"], self.tensors[f"{layer}.b"]
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise InvalidInput(f"layer {layer}: weight {w.shape} and bias {b.shape} disagree")
        for src, dst in chain:
            if self.tensors[f"{src}.W"].shape[1] != self.tensors[f"{dst}.W"].shape[0]:
                raise InvalidInput(f"layer {src} does not feed {dst}")
        for head in ("h0.out", "h1.out"):
            if self.tensors[f"{head}.W"].shape[1] != 1:
                raise InvalidInput("heads must end in a scalar output")

    @classmethod
    def init(cls, d_in: int, d_phi=(32, 16), d_h: int = 16, seed: int = 0,
             dropout_rate: float = 0.1, bounded_latent: bool = False) -> "CfrParams":
        """He-style uniform fan-in initialization, zero biases."""
        if d_in < 1 or len(d_phi) != 2 or min(d_phi) < 1 or d_h < 1:
            raise InvalidInput("layer widths must be positive (two encoder widths)")
        rng = np.random.default_rng(seed)
        sizes = {
            "enc.0": (d_in, d_phi[0]),
            "enc.1": (d_phi[0], d_phi[1]),
            "h0.0": (d_phi[1], d_h),
            "h0.out": (d_h, 1),
            "h1.0": (d_phi[1], d_h),
            "h1.out": (d_h, 1),
        }
        tensors = {}
        for layer in LAYERS:
            fan_in, fan_out = sizes[layer]
            bound = math.sqrt(6.0 / fan_in)
            tensors[f"{layer}.W"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            tensors[f"{layer}.b"] = np.zeros(fan_out)
        return cls(tensors, dropout_rate, bounded_latent)

    @property
    def d_in(self) -> int:
        return self.tensors["enc.0.W"].shape[0]

    @property
    def d_latent(self) -> int:
        return self.tensors["enc.1.W"].shape[1]

    def names(self) -> list:
        return [f"{layer}.{kind}" for layer in LAYERS for kind in ("W", "b")]

    def copy(self) -> "CfrParams":
        return CfrParams({k: v.copy() for k, v in self.tensors.items()},
                         self.dropout_rate, self.bounded_latent)

    def zeros_like(self) -> dict:
        return {k: np.zeros_like(v) for k, v in self.tensors.items()}

    def check_finite(self):
        for k, v in self.tensors.items():
            if not np.all(np.isfinite(v)):
                raise NumericalError(f"parameter {k} contains non-finite values")

    def to_json_dict(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "activation": "elu",
            "dropout_rate": self.dropout_rate,
            "bounded_latent": self.bounded_latent,
            "tensors": [
                {"name": k, "shape": list(self.tensors[k].shape),
                 "data": [float(v) for v in self.tensors[k].ravel()]}
                for k in self.names()
            ],
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "CfrParams":
        if obj.get("format") != CHECKPOINT_FORMAT:
            raise InvalidInput("not a parameter checkpoint")
        if obj.get("version") != CHECKPOINT_VERSION:
            raise InvalidInput(f"unsupported checkpoint version {obj.get('version')}")
        try:
            tensors = {
                t["name"]: np.asarray(t["data"], dtype=np.float64).reshape(t["shape"])
                for t in obj["tensors"]
            }
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidInput(f"malformed checkpoint: {exc}") from None
        return cls(tensors, float(obj["dropout_rate"]), bool(obj["bounded_latent"]))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(), fh)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "CfrParams":
        with open(path, encoding="utf-8") as fh:
            try:
                obj = json.load(fh)
            except json.JSONDecodeError as exc:
                raise InvalidInput(f"{path}: not JSON ({exc})") from None
        return cls.from_json_dict(obj)


# ---------------------------------------------------------------------------
# forward / backward


def _mask(rng, shape, rate):
    if rng is None or rate == 0.0:
        return None
    keep = 1.0 - rate
    return (rng.random(shape) < keep) / keep


def _encode(params: CfrParams, x, rng=None):
    p = params.tensors
    a1 = x @ p["enc.0.W"] + p["enc.0.b"]
    h1 = elu(a1)
    m1 = _mask(rng, h1.shape, params.dropout_rate)
    h1d = h1 if m1 is None else h1 * m1
    a2 = h1d @ p["enc.1.W"] + p["enc.1.b"]
    h2 = np.tanh(a2) if params.bounded_latent else elu(a2)
    m2 = _mask(rng, h2.shape, params.dropout_rate)
    z = h2 if m2 is None else h2 * m2
    return z, (x, a1, m1, h1d, a2, h2, m2)


def _encode_backward(params: CfrParams, cache, dz, grads):
    x, a1, m1, h1d, a2, h2, m2 = cache
    p = params.tensors
    if m2 is not None:
        dz = dz * m2
    da2 = dz * (1.0 - h2 * h2) if params.bounded_latent else dz * elu_grad(a2)
    grads["enc.1.W"] += h1d.T @ da2
    grads["enc.1.b"] += da2.sum(axis=0)
    dh1 = da2 @ p["enc.1.W"].T
    if m1 is not None:
        dh1 = dh1 * m1
    da1 = dh1 * elu_grad(a1)
    grads["enc.0.W"] += x.T @ da1
    grads["enc.0.b"] += da1.sum(axis=0)


def _head(params: CfrParams, t: int, z, rng=None):
    hidden, out = HEAD_LAYERS[t]
    p = params.tensors
    a = z @ p[f"{hidden}.W"] + p[f"{hidden}.b"]
    h = elu(a)
    m = _mask(rng, h.shape, params.dropout_rate)
    hd = h if m is None else h * m
    y = (hd @ p[f"{out}.W"] + p[f"{out}.b"])[:, 0]
    return y, (z, a, m, hd)


def _head_backward(params: CfrParams, t: int, cache, dy, grads):
    hidden, out = HEAD_LAYERS[t]
    z, a, m, hd = cache
    p = params.tensors
    dy = dy[:, None]
    grads[f"{out}.W"] += hd.T @ dy
    grads[f"{out}.b"] += dy.sum(axis=0)
    dh = dy @ p[f"{out}.W"].T
    if m is not None:
        dh = dh * m
    da = dh * elu_grad(a)
    grads[f"{hidden}.W"] += z.T @ da
    grads[f"{hidden}.b"] += da.sum(axis=0)
    return da @ p[f"{hidden}.W"].T


def _as_inputs(params: CfrParams, x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != params.d_in:
        raise InvalidInput(f"inputs must have {params.d_in} columns, got shape {arr.shape}")
    return arr


def forward(params: CfrParams, x, t: int, train_mode: bool = False, rng_seed=None):
    """Single-sample ``(z, y_hat)`` with ``y_hat = h_t(phi(x))``.

    With ``train_mode`` dropout masks are drawn from ``rng_seed`` (inverted
    scaling); otherwise the map is deterministic.
    """
    params.check_finite()
    if t not in (0, 1):
        raise InvalidInput(f"treatment must be 0 or 1, got {t}")
    xs = _as_inputs(params, x)
    if xs.shape[0] != 1:
        raise InvalidInput("forward takes a single covariate vector")
    rng = np.random.default_rng(rng_seed) if train_mode else None
    z, _ = _encode(params, xs, rng)
    y, _ = _head(params, t, z, rng)
    return z[0], float(y[0])


def encode(params: CfrParams, x) -> np.ndarray:
    """Eval-mode latents for a batch of rows."""
    return _encode(params, _as_inputs(params, x))[0]


def predict(params: CfrParams, x) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode predictions of both heads."""
    params.check_finite()
    z = encode(params, x)
    return _head(params, 0, z)[0], _head(params, 1, z)[0]


def _check_batch(params, x, t, y):
    xs = _as_inputs(params, x)
    ts = np.asarray(t).reshape(-1)
    ys = np.asarray(y, dtype=np.float64).reshape(-1)
    if xs.shape[0] == 0:
        raise InvalidInput("empty batch")
    if ts.shape[0] != xs.shape[0] or ys.shape[0] != xs.shape[0]:
        raise InvalidInput("x, t, y lengths differ")
    if not np.all((ts == 0) | (ts == 1)):
        raise InvalidInput("treatment values must be 0 or 1")
    return xs, ts.astype(np.int64), ys


def factual_loss(params: CfrParams, x, t, y) -> float:
    """Sum over present groups of the group-mean squared factual residual."""
    return loss_and_grad(params, x, t, y, need_grad=False)[0]


def loss_and_grad(params: CfrParams, x, t, y, rng=None, need_grad: bool = True):
    """Factual loss and its gradient; dropout is active iff ``rng`` is given."""
    params.check_finite()
    xs, ts, ys = _check_batch(params, x, t, y)
    z, enc_cache = _encode(params, xs, rng)
    grads = params.zeros_like() if need_grad else None
    dz = np.zeros_like(z) if need_grad else None
    loss = 0.0
    for group in (0, 1):
        idx = np.flatnonzero(ts == group)
        if idx.size == 0:
            continue
        pred, cache = _head(params, group, z[idx], rng)
        resid = pred - ys[idx]
        loss += float(np.sum(resid * resid)) / idx.size
        if need_grad:
            dz[idx] += _head_backward(params, group, cache, 2.0 * resid / idx.size, grads)
    if need_grad:
        _encode_backward(params, enc_cache, dz, grads)
    return loss, grads


# ---------------------------------------------------------------------------
# balancing regularizer at fixed plans


@dataclass(frozen=True)
class Recipe:
    """Which regularizer terms are active.

    kind "gwib": sum_t (R_t + FGW / beta)^2 - GW(X_t, Z_{1-t}), each of the
    three term families switchable; "gap": sum_t R_t^2 - GW(X_t, Z_t);
    "wass": rooted Wasserstein between latent groups; "none": zero.
    ``shared_plan`` means one fused plan serves every term.
    """

    name: str = "gwib"
    kind: str = "gwib"
    use_rt: bool = True
    use_fgw: bool = True
    use_gw: bool = True
    shared_plan: bool = True

    def __post_init__(self):
        if self.kind not in ("gwib", "gap", "wass", "none"):
            raise InvalidInput(f"unknown regularizer kind {self.kind!r}")


GWIB = Recipe()


@dataclass
class PlanSet:
    """Fixed plans consumed by the regularizer.

    fused: N0 x N1 (FGW term); cross0: N0 x N1 for GW(X_0, Z_1); cross1:
    N1 x N0 for GW(X_1, Z_0); self0/self1: within-group plans (gap kind);
    wass: N0 x N1 (wass kind).
    """

    fused: Optional[np.ndarray] = None
    cross0: Optional[np.ndarray] = None
    cross1: Optional[np.ndarray] = None
    self0: Optional[np.ndarray] = None
    self1: Optional[np.ndarray] = None
    wass: Optional[np.ndarray] = None

    @classmethod
    def shared(cls, plan) -> "PlanSet":
        t = plan.plan if isinstance(plan, TransportPlan) else np.asarray(plan, dtype=float)
        return cls(fused=t, cross0=t, cross1=t.T)


@dataclass
class RegularizerBreakdown:
    """Per-term values; ``total`` is recomposed from them by :meth:`recompose`.

    For kind "gap" the gw fields hold GW(X_t, Z_t) at the within-group plans;
    for kind "wass" ``fgw_at_plan`` holds the rooted Wasserstein value.
    """

    r0: float
    r1: float
    fgw_at_plan: float
    gw0_at_plan: float
    gw1_at_plan: float
    total: float
    beta: float
    kind: str = "gwib"
    use_rt: bool = True
    use_fgw: bool = True
    use_gw: bool = True

    def recompose(self) -> float:
        return _compose(self.r0, self.r1, self.fgw_at_plan, self.gw0_at_plan, self.gw1_at_plan,
                        self.beta, self.kind, self.use_rt, self.use_fgw, self.use_gw)

    def to_dict(self) -> dict:
        return asdict(self)


def _compose(r0, r1, fgw, gw0, gw1, beta, kind, use_rt, use_fgw, use_gw) -> float:
    if kind == "gwib":
        total = 0.0
        for r, gw in ((r0, gw0), (r1, gw1)):
            s = (r if use_rt else 0.0) + (fgw / beta if use_fgw else 0.0)
            total += s * s - (gw if use_gw else 0.0)
        return total
    if kind == "gap":
        return (r0 * r0 - gw0) + (r1 * r1 - gw1)
    if kind == "wass":
        return fgw
    return 0.0


def _gw_value_grad(a, b, t, need_grad):
    """GW objective of plan ``t`` and its partials in ``a`` and ``b``."""
    p = t.sum(axis=1)
    q = t.sum(axis=0)
    tb = t @ b
    value = float(p @ (a * a) @ p + q @ (b * b) @ q - 2.0 * np.sum((a @ tb) * t))
    if not need_grad:
        return value, None, None
    ga = 2.0 * a * np.outer(p, p) - 2.0 * tb @ t.T
    gb = 2.0 * b * np.outer(q, q) - 2.0 * t.T @ a @ t
    return value, ga, gb


def _self_dist(z, squared):
    sq = pairwise_sq_dist(z, z)
    return sq if squared else np.sqrt(sq), sq


def _self_dist_backward(z, sq, g, squared):
    s = g + g.T
    if squared:
        s = 2.0 * s
    else:
        s = s / np.sqrt(sq + SQRT_EPS)
    np.fill_diagonal(s, 0.0)
    return s.sum(axis=1)[:, None] * z - s @ z


def _cross_sq_backward(z0, z1, g):
    g0 = 2.0 * (g.sum(axis=1)[:, None] * z0 - g @ z1)
    g1 = 2.0 * (g.sum(axis=0)[:, None] * z1 - g.T @ z0)
    return g0, g1


def _require(plan, shape, name):
    if plan is None:
        raise InvalidInput(f"regularizer needs the {name} plan")
    plan = np.asarray(plan, dtype=float)
    if plan.shape != shape:
        raise InvalidInput(f"{name} plan has shape {plan.shape}, expected {shape}")
    return plan


def regularizer_from_latents(z0, z1, dx0, dx1, plans: PlanSet, beta: float,
                             recipe: Recipe = GWIB, squared_gw_costs: bool = False,
                             need_grad: bool = False):
    """Regularizer breakdown from latents and covariate distance matrices.

    Returns ``(breakdown, grad_z0, grad_z1)``; the gradients are ``None``
    unless ``need_grad``. Square roots are guarded by ``SQRT_EPS`` only in the
    gradient path.
    """
    kind = recipe.kind
    if kind == "gwib" and not 0.0 < beta <= 1.0:
        raise InvalidInput(f"beta must be in (0, 1], got {beta}")
    z0 = np.asarray(z0, dtype=float)
    z1 = np.asarray(z1, dtype=float)
    n0, n1 = z0.shape[0], z1.shape[0]
    if n0 == 0 or n1 == 0:
        raise InvalidInput("both groups must be nonempty")
    dz0, sq0 = _self_dist(z0, squared_gw_costs)
    dz1, sq1 = _self_dist(z1, squared_gw_costs)
    d01 = pairwise_sq_dist(z0, z1)
    e0 = dx0 - dz0
    e1 = dx1 - dz1
    ss0 = float(np.sum(e0 * e0))
    ss1 = float(np.sum(e1 * e1))
    r0 = math.sqrt(ss0) / n0
    r1 = math.sqrt(ss1) / n1
    g_dz0 = np.zeros_like(dz0)
    g_dz1 = np.zeros_like(dz1)
    g_d01 = np.zeros_like(d01)
    fgw = gw0 = gw1 = 0.0

    if kind == "gwib":
        tf = _require(plans.fused, (n0, n1), "fused")
        tc0 = _require(plans.cross0, (n0, n1), "cross0")
        tc1 = _require(plans.cross1, (n1, n0), "cross1")
        w01 = float(np.sum(d01 * tf))
        gzz, ga_f, gb_f = _gw_value_grad(dz0, dz1, tf, need_grad)
        fgw_sq = max((1.0 - beta) * w01 + beta * gzz, 0.0)
        fgw = math.sqrt(fgw_sq)
        gw0, _, gb0 = _gw_value_grad(dx0, dz1, tc0, need_grad)
        gw1, _, gb1 = _gw_value_grad(dx1, dz0, tc1, need_grad)
        if need_grad:
            s = [
                (r if recipe.use_rt else 0.0) + (fgw / beta if recipe.use_fgw else 0.0)
                for r in (r0, r1)
            ]
            if recipe.use_rt:
                for t, (ss, e, n, g) in enumerate(((ss0, e0, n0, g_dz0), (ss1, e1, n1, g_dz1))):
                    rg = math.sqrt(ss / n**2 + SQRT_EPS)
                    g -= (2.0 * s[t] / (n * n * rg)) * e
            if recipe.use_fgw:
                coef = 2.0 * (s[0] + s[1]) / beta / (2.0 * math.sqrt(fgw_sq + SQRT_EPS))
                g_d01 += coef * (1.0 - beta) * tf
                g_dz0 += coef * beta * ga_f
                g_dz1 += coef * beta * gb_f
            if recipe.use_gw:
                g_dz1 -= gb0
                g_dz0 -= gb1
    elif kind == "gap":
        ts0 = _require(plans.self0, (n0, n0), "self0")
        ts1 = _require(plans.self1, (n1, n1), "self1")
        gw0, _, gb0 = _gw_value_grad(dx0, dz0, ts0, need_grad)
        gw1, _, gb1 = _gw_value_grad(dx1, dz1, ts1, need_grad)
        if need_grad:
            g_dz0 += -2.0 * e0 / n0**2 - gb0
            g_dz1 += -2.0 * e1 / n1**2 - gb1
    elif kind == "wass":
        tw = _require(plans.wass, (n0, n1), "wass")
        w01 = max(float(np.sum(d01 * tw)), 0.0)
        fgw = math.sqrt(w01)
        if need_grad:
            g_d01 += tw / (2.0 * math.sqrt(w01 + SQRT_EPS))

    total = _compose(r0, r1, fgw, gw0, gw1, beta, kind, recipe.use_rt, recipe.use_fgw, recipe.use_gw)
    breakdown = RegularizerBreakdown(r0, r1, fgw, gw0, gw1, total, float(beta), kind,
                                     recipe.use_rt, recipe.use_fgw, recipe.use_gw)
    if not need_grad:
        return breakdown, None, None
    gz0 = _self_dist_backward(z0, sq0, g_dz0, squared_gw_costs)
    gz1 = _self_dist_backward(z1, sq1, g_dz1, squared_gw_costs)
    c0, c1 = _cross_sq_backward(z0, z1, g_d01)
    return breakdown, gz0 + c0, gz1 + c1


def covariate_distances(x, squared_gw_costs: bool = False) -> np.ndarray:
    return _self_dist(np.asarray(x, dtype=float), squared_gw_costs)[0]


def _plans_for(plan, plans):
    if plans is not None:
        return plans
    if plan is None:
        raise InvalidInput("a plan or a PlanSet is required")
    return PlanSet.shared(plan)


def regularizer(params: CfrParams, x0, x1, plan, beta: float, *, recipe: Recipe = GWIB,
                plans: Optional[PlanSet] = None, squared_gw_costs: bool = False,
                dx0=None, dx1=None) -> RegularizerBreakdown:
    """Regularizer terms at the fixed ``plan`` using eval-mode latents."""
    params.check_finite()
    x0 = _as_inputs(params, x0)
    x1 = _as_inputs(params, x1)
    dx0 = covariate_distances(x0, squared_gw_costs) if dx0 is None else dx0
    dx1 = covariate_distances(x1, squared_gw_costs) if dx1 is None else dx1
    return regularizer_from_latents(encode(params, x0), encode(params, x1), dx0, dx1,
                                    _plans_for(plan, plans), beta, recipe, squared_gw_costs)[0]


def regularizer_and_grad(params: CfrParams, x0, x1, plans: PlanSet, beta: float,
                         recipe: Recipe = GWIB, squared_gw_costs: bool = False,
                         dx0=None, dx1=None):
    """Breakdown and encoder gradient of ``breakdown.total`` (heads get zeros)."""
    x0 = _as_inputs(params, x0)
    x1 = _as_inputs(params, x1)
    dx0 = covariate_distances(x0, squared_gw_costs) if dx0 is None else dx0
    dx1 = covariate_distances(x1, squared_gw_costs) if dx1 is None else dx1
    n0 = x0.shape[0]
    z, cache = _encode(params, np.vstack([x0, x1]))
    breakdown, gz0, gz1 = regularizer_from_latents(
        z[:n0], z[n0:], dx0, dx1, plans, beta, recipe, squared_gw_costs, need_grad=True)
    grads = params.zeros_like()
    _encode_backward(params, cache, np.vstack([gz0, gz1]), grads)
    return breakdown, grads


def grad_total(params: CfrParams, batch, x0, x1, plan, beta: float, lam: float, *,
               recipe: Recipe = GWIB, plans: Optional[PlanSet] = None,
               squared_gw_costs: bool = False, rng=None) -> dict:
    """Gradient of factual_loss(batch) + lam * regularizer.total.

    ``batch`` is ``(x, t, y)``. The regularizer term reaches only the encoder.
    """
    x, t, y = batch
    _, grads = loss_and_grad(params, x, t, y, rng=rng)
    if lam != 0.0 and recipe.kind != "none":
        _, rgrads = regularizer_and_grad(params, x0, x1, _plans_for(plan, plans), beta,
                                         recipe, squared_gw_costs)
        for k in grads:
            grads[k] += lam * rgrads[k]
    return grads
