"""Command-line entry point (``gwib``).

Exit codes: 0 success, 2 input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import cfr_model as cm
from .data_io import Cohort, Standardizer, gen_synthetic, load_csv, write_csv
from .errors import InvalidInput, NumericalError, ParseError, SchemaError, SolverFailure
from .kmi_bound import KernelConfig, kmi_upper_bound, median_bandwidth
from .metrics_eval import gw_information_loss
from .ot_core import (
    DiscreteMeasure,
    FusedProblem,
    fgw_solve,
    fused_objective,
    fused_solve,
    gw_solve,
    read_matrix_csv,
    solve_emd,
    write_matrix_csv,
)
from .oracles import assignment_emd, brute_force_fgw, brute_force_fused, brute_force_gw
from .trainer import ABLATIONS, TrainConfig, fit_and_evaluate

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERICAL = 3
ORACLE_MAX_N = 6
ABLATION_METRICS = ("eps_ate", "eps_pehe", "eps_pehe_root", "factual_mse")
SCOPES = ("in_sample", "out_sample")


# ---------------------------------------------------------------------------
# helpers


def read_config(path) -> dict:
    """Flat ``key = value`` file; ``#`` starts a comment."""
    values = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise InvalidInput(f"cannot read config {path}: {exc}") from None
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidInput(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise InvalidInput(f"{path}:{lineno}: empty key")
        values[key] = value.strip("\"'")
    return values


def _seed_list(text) -> list:
    try:
        seeds = [int(s) for s in text.replace(" ", "").split(",") if s]
    except ValueError:
        raise InvalidInput(f"bad seed list {text!r}") from None
    if not seeds:
        raise InvalidInput("empty seed list")
    return seeds


def _float_list(text) -> list:
    try:
        return [float(s) for s in text.replace(" ", "").split(",") if s]
    except ValueError:
        raise InvalidInput(f"bad number list {text!r}") from None


def _timestamp() -> str:
    # SOURCE_DATE_EPOCH pins the clock for byte-reproducible manifests
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    t = float(epoch) if epoch else time.time()
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(t))


def _dump(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2)
        fh.write("\n")


def write_manifest(run_dir: Path, command: str, config: dict, seeds, extra=None) -> dict:
    run_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "version": f"gwib {__version__}",
        "config": config,
        "seeds": list(seeds),
        "output_dir": str(run_dir),
        "created": _timestamp(),
    }
    if extra:
        manifest.update(extra)
    _dump(run_dir / "manifest.json", manifest)
    return manifest


def _train_config(args) -> TrainConfig:
    values = read_config(args.config) if args.config else {}
    split_seed = values.pop("split_seed", None)
    cfg = TrainConfig.from_mapping(values)
    overrides = {}
    if getattr(args, "variant", None):
        overrides["variant"] = args.variant
    if getattr(args, "lam", None) is not None:
        overrides["lam"] = args.lam
    if getattr(args, "beta", None) is not None:
        overrides["beta"] = args.beta
    if getattr(args, "epochs", None) is not None:
        overrides["epochs"] = args.epochs
    if args.command == "diagnose" and args.seed is not None:
        overrides["seed"] = args.seed
    if overrides:
        cfg = cfg.replace(**overrides)
    args.split_seed = None if split_seed is None else int(split_seed)
    return cfg


def _seeds(args, cfg) -> list:
    if getattr(args, "seeds", None):
        return _seed_list(args.seeds)
    if getattr(args, "seed", None) is not None:
        return [args.seed]
    return [cfg.seed]


def _load_data(path) -> Cohort:
    if not Path(path).is_file():
        raise InvalidInput(f"data file not found: {path}")
    return load_csv(path)


def save_checkpoint(path, params: cm.CfrParams, scaler: Standardizer) -> None:
    obj = params.to_json_dict()
    obj["standardizer"] = {"mean": [float(v) for v in scaler.mean],
                           "scale": [float(v) for v in scaler.scale]}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh)
        fh.write("\n")


def load_checkpoint(path):
    try:
        with open(path, encoding="utf-8") as fh:
            obj = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise InvalidInput(f"cannot read checkpoint {path}: {exc}") from None
    params = cm.CfrParams.from_json_dict(obj)
    scaler = None
    if "standardizer" in obj:
        st = obj["standardizer"]
        scaler = Standardizer(np.asarray(st["mean"], dtype=float), np.asarray(st["scale"], dtype=float))
    return params, scaler


# ---------------------------------------------------------------------------
# commands


def _run_one(cohort, cfg, split_seed, run_dir: Path, command: str) -> dict:
    write_manifest(run_dir, command, cfg.to_dict(), [cfg.seed],
                   {"split_seed": cfg.seed if split_seed is None else split_seed})
    result = fit_and_evaluate(cohort, cfg, split_seed)
    with open(run_dir / "trace.jsonl", "w", encoding="utf-8") as fh:
        for rec in result.records:
            fh.write(json.dumps(rec.to_dict()) + "\n")
    save_checkpoint(run_dir / "checkpoint.json", result.params, result.standardizer)
    best = min(result.records, key=lambda r: r.val_loss)
    report = {
        "in_sample": None if result.in_sample is None else result.in_sample.to_dict(),
        "out_sample": None if result.out_sample is None else result.out_sample.to_dict(),
        "gw_information_loss": list(result.gw_loss),
        "best_epoch": best.epoch,
        "best_val_loss": best.val_loss,
        "epochs_run": len(result.records),
    }
    _dump(run_dir / "eval.json", report)
    return report


def _aggregate(reports) -> dict:
    out = {}
    for scope in SCOPES:
        rows = [r[scope] for r in reports if r[scope] is not None]
        if not rows:
            continue
        out[scope] = {
            m: {"mean": float(np.mean([r[m] for r in rows])), "std": float(np.std([r[m] for r in rows]))}
            for m in ABLATION_METRICS
        }
    return out


def cmd_train(args) -> int:
    cfg = _train_config(args)
    seeds = _seeds(args, cfg)
    cohort = _load_data(args.data)
    base = args.run_id or cfg.variant
    out = Path(args.out)
    reports = []
    for seed in seeds:
        run_cfg = cfg.replace(seed=seed)
        run_id = base if len(seeds) == 1 and not args.seeds else f"{base}-seed{seed}"
        reports.append(_run_one(cohort, run_cfg, args.split_seed, out / run_id, "train"))
        print(f"{run_id}: {json.dumps(reports[-1]['out_sample'])}")
    if args.seeds:
        agg = {"run_id": base, "seeds": seeds, "metrics": _aggregate(reports)}
        _dump(out / f"{base}-aggregate.json", agg)
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _train_config(args)
    seeds = _seeds(args, cfg)
    cohort = _load_data(args.data)
    variants = list(ABLATIONS) + (["tarnet"] if args.include_tarnet else [])
    run_dir = Path(args.out) / (args.run_id or "ablation")
    write_manifest(run_dir, "ablate", cfg.to_dict(), seeds, {"variants": variants})
    per_seed = []
    for variant in variants:
        for seed in seeds:
            res = fit_and_evaluate(cohort, cfg.replace(variant=variant, seed=seed), args.split_seed)
            if res.in_sample is None:
                raise InvalidInput("ablation needs ground-truth potential outcomes (mu0, mu1)")
            for scope, rep in (("in_sample", res.in_sample), ("out_sample", res.out_sample)):
                for m in ABLATION_METRICS:
                    per_seed.append((variant, seed, m, scope, getattr(rep, m)))
    with open(run_dir / "per_seed.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "seed", "metric", "scope", "value"])
        for row in per_seed:
            w.writerow([*row[:4], repr(float(row[4]))])
    with open(run_dir / "ablation.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "metric", "scope", "mean", "std", "n_seeds"])
        for variant in variants:
            for m in ABLATION_METRICS:
                for scope in SCOPES:
                    vals = [r[4] for r in per_seed if r[0] == variant and r[2] == m and r[3] == scope]
                    w.writerow([variant, m, scope, repr(float(np.mean(vals))),
                                repr(float(np.std(vals))), len(vals)])
    print(f"wrote {run_dir / 'ablation.csv'}")
    return EXIT_OK


def _read_matrices(args, names):
    mats = {}
    for name in names:
        path = getattr(args, name)
        if path is None:
            raise InvalidInput(f"--{name.replace('_', '-')} is required for this problem")
        mats[name] = read_matrix_csv(path)
    return mats


def cmd_solve_ot(args) -> int:
    kind = args.problem
    oracle = None
    if kind == "emd":
        cost = _read_matrices(args, ["cost"])["cost"]
        mu, nu = DiscreteMeasure.uniform(cost.shape[0]), DiscreteMeasure.uniform(cost.shape[1])
        plan = solve_emd(cost, mu, nu)
        value = float(np.sum(cost * plan.plan))
        if args.oracle:
            _oracle_size(max(cost.shape))
            oracle = assignment_emd(cost)
    elif kind == "gw":
        m = _read_matrices(args, ["d_a", "d_b"])
        plan, report = gw_solve(m["d_a"], m["d_b"], restarts=args.restarts, seed=args.seed)
        value = report.final_objective
        if args.oracle:
            _oracle_size(m["d_a"].shape[0], m["d_b"].shape[0])
            oracle = brute_force_gw(m["d_a"], m["d_b"])[0]
    elif kind == "fgw":
        m = _read_matrices(args, ["d_z0", "d_z1", "d_z01"])
        plan, report = fgw_solve(m["d_z0"], m["d_z1"], m["d_z01"], args.beta, restarts=args.restarts,
                                 seed=args.seed)
        value = report.final_objective
        if args.oracle:
            _oracle_size(*m["d_z01"].shape)
            oracle = brute_force_fgw(m["d_z0"], m["d_z1"], m["d_z01"], args.beta)[0]
    else:
        m = _read_matrices(args, ["d_x0", "d_x1", "d_z0", "d_z1", "d_z01"])
        prob = FusedProblem(m["d_x0"], m["d_x1"], m["d_z0"], m["d_z1"], m["d_z01"], args.beta)
        plan, report = fused_solve(prob, restarts=args.restarts, seed=args.seed)
        value = fused_objective(prob, plan)
        if args.oracle:
            _oracle_size(prob.n0, prob.n1)
            oracle = brute_force_fused(m["d_x0"], m["d_x1"], m["d_z0"], m["d_z1"], m["d_z01"], args.beta)[0]
    print(f"objective {value!r}")
    if oracle is not None:
        print(f"oracle {oracle!r}")
    if args.plan_out:
        write_matrix_csv(args.plan_out, plan.plan)
    return EXIT_OK


def _oracle_size(*sizes):
    if len(set(sizes)) > 1 and len(sizes) > 1:
        raise InvalidInput("the permutation oracle needs equal sizes")
    if max(sizes) > ORACLE_MAX_N:
        raise InvalidInput(f"the oracle is limited to N <= {ORACLE_MAX_N}")


def _latents_csv(path, params, cohort):
    z = cm.encode(params, cohort.x)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "t"] + [f"z{j}" for j in range(z.shape[1])])
        for i in range(z.shape[0]):
            w.writerow([i, int(cohort.t[i])] + [repr(float(v)) for v in z[i]])


def _bound_reports(params, cohort, max_samples):
    out = {}
    for g in (0, 1):
        x = cohort.x[cohort.t == g][:max_samples]
        if x.shape[0] < 2:
            continue
        z = cm.encode(params, x)
        cfg = KernelConfig(median_bandwidth(x, z))
        out[f"group{g}"] = kmi_upper_bound(x, z, cfg).to_dict()
    return out


def cmd_diagnose(args) -> int:
    cohort = _load_data(args.data)
    run_dir = Path(args.out) / (args.run_id or "diagnose")
    lambdas = _float_list(args.lambdas) if args.lambdas else []
    cfg = _train_config(args) if (args.config or lambdas) else None
    write_manifest(run_dir, "diagnose", None if cfg is None else cfg.to_dict(),
                   [] if cfg is None else [cfg.seed],
                   {"checkpoint": args.checkpoint, "lambdas": lambdas})
    rows = []
    if args.checkpoint:
        params, scaler = load_checkpoint(args.checkpoint)
        data = scaler.apply(cohort) if scaler is not None else cohort
        for g in (0, 1):
            rows.append(("checkpoint", g, gw_information_loss(params, data, g)))
        _latents_csv(run_dir / "latents_checkpoint.csv", params, data)
        _dump(run_dir / "bound.json", _bound_reports(params, data, args.bound_samples))
    for lam in lambdas:
        res = fit_and_evaluate(cohort, cfg.replace(lam=lam), args.split_seed)
        for g in (0, 1):
            rows.append((repr(lam), g, res.gw_loss[g]))
        _latents_csv(run_dir / f"latents_lambda_{lam!r}.csv", res.params, res.standardizer.apply(cohort))
    if not rows:
        raise InvalidInput("diagnose needs --checkpoint and/or --lambdas")
    with open(run_dir / "gw_loss.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["source", "group", "gw_information_loss"])
        for src, g, v in rows:
            w.writerow([src, g, repr(float(v))])
    print(f"wrote {run_dir / 'gw_loss.csv'}")
    return EXIT_OK


def cmd_gen_synth(args) -> int:
    cohort = gen_synthetic(args.n, args.dim, args.bias, args.noise, args.seed)
    write_csv(args.out, cohort)
    print(f"wrote {len(cohort)} samples to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gwib", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"gwib {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def training_flags(p):
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--data", required=True, help="cohort CSV")
        p.add_argument("--out", default="runs", help="output root directory")
        p.add_argument("--run-id", help="run directory name")
        p.add_argument("--seed", type=int)
        p.add_argument("--seeds", help="comma-separated seed list")
        p.add_argument("--variant")
        p.add_argument("--lambda", dest="lam", type=float)
        p.add_argument("--beta", type=float)
        p.add_argument("--epochs", type=int)

    p = sub.add_parser("train", help="train and evaluate one model per seed")
    training_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="run GWIB and its five ablations over seeds")
    training_flags(p)
    p.add_argument("--include-tarnet", action="store_true")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("solve-ot", help="solve an OT problem given CSV matrices")
    p.add_argument("problem", choices=["emd", "gw", "fgw", "fused"])
    p.add_argument("--cost")
    p.add_argument("--d-a", dest="d_a")
    p.add_argument("--d-b", dest="d_b")
    for name in ("d_x0", "d_x1", "d_z0", "d_z1", "d_z01"):
        p.add_argument("--" + name.replace("_", "-"), dest=name)
    p.add_argument("--beta", type=float, default=0.5)
    p.add_argument("--restarts", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--oracle", action="store_true", help="also run the permutation brute force (N <= 6)")
    p.add_argument("--plan-out", help="write the plan as CSV")
    p.set_defaults(func=cmd_solve_ot)

    p = sub.add_parser("diagnose", help="GW information loss, latents and KMI bound")
    p.add_argument("--checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--out", default="runs")
    p.add_argument("--run-id")
    p.add_argument("--config")
    p.add_argument("--lambdas", help="comma-separated lambda sweep (trains one model each)")
    p.add_argument("--seed", type=int)
    p.add_argument("--bound-samples", type=int, default=64)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("gen-synth", help="write a synthetic cohort CSV")
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--dim", type=int, default=10)
    p.add_argument("--bias", type=float, default=2.0)
    p.add_argument("--noise", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_synth)
    return parser


@contextlib.contextmanager
def _thread_limit():
    value = os.environ.get("GWIB_THREADS")
    if not value:
        yield
        return
    from threadpoolctl import threadpool_limits

    try:
        limit = int(value)
    except ValueError:
        raise InvalidInput(f"GWIB_THREADS must be an integer, got {value!r}") from None
    with threadpool_limits(limits=limit):
        yield


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        with _thread_limit():
            return args.func(args)
    except (InvalidInput, SchemaError, ParseError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (NumericalError, SolverFailure, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
