import math

import numpy as np
import pytest

from gwib import cfr_model as cm
from gwib import trainer
from gwib.data_io import Cohort, gen_synthetic
from gwib.errors import InvalidInput, NumericalError
from gwib.ot_core import DiscreteMeasure, emd_objective, pairwise_sq_dist
from gwib.trainer import TrainConfig, apply_variant, fit_and_evaluate, solve_plans, train


def small_cfg(**kw):
    base = dict(epochs=5, patience=5, batch_size=16, d_phi=(8, 4), d_h=4, lam=0.1, beta=0.5, seed=0)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def data40():
    c = gen_synthetic(60, 3, 1.0, 0.5, seed=1)
    return c.subset(np.arange(40)), c.subset(np.arange(40, 60))


def trace_dicts(records):
    return [r.to_dict() for r in records]


# ---------------------------------------------------------------------------
# config


def test_config_ranges():
    with pytest.raises(InvalidInput):
        TrainConfig(lr=1.0)
    with pytest.raises(InvalidInput):
        TrainConfig(batch_size=20)
    with pytest.raises(InvalidInput):
        TrainConfig(lam=5.0)
    with pytest.raises(InvalidInput):
        TrainConfig(beta=0.95)
    with pytest.raises(InvalidInput):
        TrainConfig(variant="gwib_xyz")
    with pytest.raises(InvalidInput):
        TrainConfig(optimizer="rmsprop")
    assert TrainConfig(lam=0.0).lam == 0.0


def test_config_from_mapping():
    cfg = TrainConfig.from_mapping({"lambda": "0.01", "d_phi": "[8, 4]", "squared_gw_costs": "true",
                                    "variant": "cfr_wass", "epochs": "3"})
    assert cfg.lam == 0.01 and cfg.d_phi == (8, 4) and cfg.squared_gw_costs and cfg.epochs == 3
    assert TrainConfig.from_mapping(cfg.to_dict()) == cfg
    with pytest.raises(InvalidInput):
        TrainConfig.from_mapping({"nope": "1"})
    with pytest.raises(InvalidInput):
        TrainConfig.from_mapping({"epochs": "many"})


def test_apply_variant():
    kinds = {v: apply_variant(TrainConfig(variant=v)).kind for v in trainer.VARIANTS}
    assert kinds["tarnet"] == "none" and kinds["cfr_wass"] == "wass" and kinds["gwib_gap"] == "gap"
    assert not apply_variant(TrainConfig(variant="gwib_rt")).use_rt
    assert not apply_variant(TrainConfig(variant="gwib_opt")).shared_plan
    cfg = TrainConfig()
    object.__setattr__(cfg, "variant", "bogus")
    with pytest.raises(InvalidInput):
        apply_variant(cfg)


# ---------------------------------------------------------------------------
# plans per variant


def test_gwib_opt_equals_gwib_for_singletons():
    z0, z1 = np.array([[0.5, 1.0]]), np.array([[-1.0, 0.0]])
    dx = np.zeros((1, 1))
    cfg = TrainConfig()
    shared, _ = solve_plans(apply_variant(cfg), z0, z1, dx, dx, cfg)
    opt, _ = solve_plans(apply_variant(cfg.replace(variant="gwib_opt")), z0, z1, dx, dx, cfg)
    for name in ("fused", "cross0", "cross1"):
        assert getattr(shared, name).tolist() == [[1.0]]
        assert getattr(opt, name).tolist() == [[1.0]]
    p = cm.CfrParams.init(2, seed=0)
    x0, x1 = np.array([[0.1, 0.2]]), np.array([[1.0, -1.0]])
    g_shared = cm.grad_total(p, (np.vstack([x0, x1]), [0, 1], [0.0, 1.0]), x0, x1, None, 0.5, 0.1,
                             recipe=apply_variant(cfg), plans=shared)
    g_opt = cm.grad_total(p, (np.vstack([x0, x1]), [0, 1], [0.0, 1.0]), x0, x1, None, 0.5, 0.1,
                          recipe=apply_variant(cfg.replace(variant="gwib_opt")), plans=opt)
    assert all(np.array_equal(g_shared[k], g_opt[k]) for k in g_shared)


def test_gwib_rt_matches_gwib_when_distances_preserved():
    # latents equal to the covariates: D_X = D_Z, so R_t = 0
    rng = np.random.default_rng(0)
    x0, x1 = rng.normal(size=(4, 2)), rng.normal(size=(3, 2))
    dx0, dx1 = cm.covariate_distances(x0), cm.covariate_distances(x1)
    cfg = TrainConfig()
    plans, _ = solve_plans(apply_variant(cfg), x0, x1, dx0, dx1, cfg)
    full = cm.regularizer_from_latents(x0, x1, dx0, dx1, plans, 0.5, apply_variant(cfg), need_grad=True)
    rt = cm.regularizer_from_latents(x0, x1, dx0, dx1, plans, 0.5,
                                     apply_variant(cfg.replace(variant="gwib_rt")), need_grad=True)
    assert full[0].r0 == 0.0 and full[0].r1 == 0.0
    assert full[0].total == pytest.approx(rt[0].total, rel=1e-12)
    np.testing.assert_allclose(full[1], rt[1], rtol=1e-6, atol=1e-9)
    np.testing.assert_allclose(full[2], rt[2], rtol=1e-6, atol=1e-9)


def test_cfr_wass_regularizer_matches_emd():
    rng = np.random.default_rng(2)
    z0, z1 = rng.normal(size=(6, 3)), rng.normal(size=(5, 3)) + 4.0
    dx0, dx1 = np.zeros((6, 6)), np.zeros((5, 5))
    cfg = TrainConfig(variant="cfr_wass")
    plans, reports = solve_plans(apply_variant(cfg), z0, z1, dx0, dx1, cfg)
    oracle = emd_objective(pairwise_sq_dist(z0, z1), DiscreteMeasure.uniform(6), DiscreteMeasure.uniform(5))
    bd = cm.regularizer_from_latents(z0, z1, dx0, dx1, plans, 0.5, apply_variant(cfg))[0]
    assert bd.total == pytest.approx(math.sqrt(oracle), rel=1e-12)
    assert trainer.wasserstein_latent(z0, z1) == pytest.approx(math.sqrt(oracle), rel=1e-12)
    assert reports[0].final_objective == pytest.approx(oracle, rel=1e-12)


@pytest.mark.parametrize("variant", ["gwib_gap", "gwib_opt"])
def test_variant_plans_are_feasible(variant):
    rng = np.random.default_rng(3)
    z0, z1 = rng.normal(size=(5, 2)), rng.normal(size=(4, 2))
    x0, x1 = rng.normal(size=(5, 3)), rng.normal(size=(4, 3))
    cfg = TrainConfig(variant=variant)
    plans, reports = solve_plans(apply_variant(cfg), z0, z1, cm.covariate_distances(x0),
                                 cm.covariate_distances(x1), cfg)
    for rep in reports:
        tr = rep.objective_trace
        assert all(b <= a + 1e-10 for a, b in zip(tr, tr[1:]))
    for t in (plans.fused, plans.cross0, plans.cross1, plans.self0, plans.self1):
        if t is not None:
            assert np.all(t >= 0)
            np.testing.assert_allclose(t.sum(), 1.0, atol=1e-12)


# ---------------------------------------------------------------------------
# training


def test_tarnet_skips_cg_and_learns(data40, monkeypatch):
    def boom(*a, **k):
        raise AssertionError("CG must not run for tarnet")

    monkeypatch.setattr(trainer, "solve_plans", boom)
    tr, va = data40
    _, records = train(tr, va, small_cfg(variant="tarnet", epochs=30, patience=30, lr=1e-2))
    assert all(r.cg_report is None and r.regularizer is None for r in records)
    assert records[-1].train_loss < records[0].train_loss


def test_gwib_run_traces(data40):
    tr, va = data40
    _, records = train(tr, va, small_cfg(epochs=30, patience=30))
    assert len(records) == 30
    for r in records:
        tr_ = r.cg_report.objective_trace
        assert all(b <= a + 1e-10 for a, b in zip(tr_, tr_[1:]))
        assert math.isfinite(r.val_loss)
        assert r.gw_diag_0 >= -1e-8 and r.gw_diag_1 >= -1e-8
        assert r.regularizer.total == r.regularizer.recompose()


def test_patience_restores_first_epoch(data40, monkeypatch):
    tr, va = data40
    seen = []

    def constant(params, val):
        seen.append(params.copy())
        return 1.0

    monkeypatch.setattr(trainer, "_validation_loss", constant)
    best, records = train(tr, va, small_cfg(epochs=50, patience=4))
    assert len(records) == 5
    assert all(np.array_equal(best.tensors[k], seen[0].tensors[k]) for k in best.names())
    assert not all(np.array_equal(best.tensors[k], seen[-1].tensors[k]) for k in best.names())


def test_early_stopping_contract(data40):
    tr, va = data40
    cfg = small_cfg(epochs=40, patience=3, lr=5e-2)
    best, records = train(tr, va, cfg)
    vals = [r.val_loss for r in records]
    assert len(records) <= cfg.epochs
    best_epoch = int(np.argmin(vals))
    assert len(records) - 1 - best_epoch <= cfg.patience
    assert trainer._validation_loss(best, va) == min(vals)


def test_reproducible(data40):
    tr, va = data40
    cfg = small_cfg()
    a = train(tr, va, cfg)
    b = train(tr, va, cfg)
    assert trace_dicts(a[1]) == trace_dicts(b[1])
    assert all(np.array_equal(a[0].tensors[k], b[0].tensors[k]) for k in a[0].names())


def test_lambda_zero_gwib_equals_tarnet(data40):
    tr, va = data40
    a = train(tr, va, small_cfg(lam=0.0))
    b = train(tr, va, small_cfg(variant="tarnet"))
    assert trace_dicts(a[1]) == trace_dicts(b[1])


@pytest.mark.parametrize("variant", ["gwib_fgw", "gwib_rt", "gwib_gw", "gwib_gap", "gwib_opt", "cfr_wass"])
def test_every_variant_trains(data40, variant):
    tr, va = data40
    _, records = train(tr, va, small_cfg(variant=variant, epochs=3))
    assert len(records) == 3
    assert all(math.isfinite(r.val_loss) and r.regularizer is not None for r in records)


def test_train_errors(data40):
    tr, va = data40
    with pytest.raises(InvalidInput):
        train(tr.group(0), va, small_cfg())
    with pytest.raises(InvalidInput):
        train(tr, va.subset([]), small_cfg())


def test_divergence_reports_epoch(data40, monkeypatch):
    tr, va = data40
    monkeypatch.setattr(trainer, "_validation_loss", lambda p, v: float("nan"))
    with pytest.raises(NumericalError) as exc:
        train(tr, va, small_cfg(variant="tarnet"))
    assert exc.value.epoch == 1


def test_sgd_optimizer(data40):
    tr, va = data40
    _, records = train(tr, va, small_cfg(optimizer="sgd", lr=1e-2, variant="tarnet", epochs=10))
    assert records[-1].train_loss < records[0].train_loss


def test_fit_and_evaluate():
    cohort = gen_synthetic(80, 3, 1.0, 0.5, seed=4)
    res = fit_and_evaluate(cohort, small_cfg(epochs=3))
    assert res.in_sample.n + res.out_sample.n == 80
    assert res.out_sample.n == 8
    assert all(v >= -1e-8 for v in res.gw_loss)
    again = fit_and_evaluate(cohort, small_cfg(epochs=3))
    assert res.out_sample == again.out_sample

    no_truth = Cohort(cohort.x, cohort.t, cohort.y_factual)
    assert fit_and_evaluate(no_truth, small_cfg(epochs=1)).out_sample is None
