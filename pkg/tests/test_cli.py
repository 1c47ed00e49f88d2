import csv
import json

import numpy as np
import pytest

from gwib import cfr_model as cm
from gwib.cli import EXIT_INPUT, EXIT_NUMERICAL, EXIT_OK, main, read_config
from gwib.data_io import Cohort, gen_synthetic, write_csv
from gwib.errors import NumericalError
from gwib.ot_core import pairwise_dist, pairwise_sq_dist, write_matrix_csv

FAST = ["--epochs", "2"]


@pytest.fixture
def synth(tmp_path):
    path = tmp_path / "synth.csv"
    assert main(["gen-synth", "--n", "60", "--dim", "3", "--seed", "1", "--out", str(path)]) == EXIT_OK
    return path


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("# small net\nbatch_size = 16\nd_phi = 8, 4\nd_h = 4\nlambda = 0.1  # weight\n")
    return path


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_read_config(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("a = 1\n\n# note\nb = x y\n")
    assert read_config(path) == {"a": "1", "b": "x y"}
    path.write_text("novalue\n")
    with pytest.raises(Exception):
        read_config(path)


def test_train_artifacts(tmp_path, synth, config):
    out = tmp_path / "runs"
    code = main(["train", "--config", str(config), "--data", str(synth), "--seed", "1",
                 "--out", str(out)] + FAST)
    assert code == EXIT_OK
    run = out / "gwib"
    assert {p.name for p in run.iterdir()} == {"manifest.json", "trace.jsonl", "checkpoint.json", "eval.json"}
    manifest = json.loads((run / "manifest.json").read_text())
    assert manifest["seeds"] == [1] and manifest["config"]["lam"] == 0.1
    trace = [json.loads(line) for line in (run / "trace.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in trace] == [1, 2]
    ev = json.loads((run / "eval.json").read_text())
    assert ev["out_sample"]["eps_ate"] <= ev["out_sample"]["eps_pehe_root"] + 1e-12


def test_train_is_byte_reproducible(tmp_path, synth, config):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        main(["train", "--config", str(config), "--data", str(synth), "--out", str(out)] + FAST)
        outs.append(out / "gwib")
    for fname in ("trace.jsonl", "eval.json", "checkpoint.json"):
        assert (outs[0] / fname).read_bytes() == (outs[1] / fname).read_bytes()


def test_train_seed_sweep(tmp_path, synth, config):
    out = tmp_path / "runs"
    seeds = "0,1,2,3,4"
    assert main(["train", "--config", str(config), "--data", str(synth), "--seeds", seeds,
                 "--out", str(out), "--epochs", "1"]) == EXIT_OK
    runs = sorted(p.name for p in out.iterdir() if p.is_dir())
    assert runs == [f"gwib-seed{s}" for s in range(5)]
    agg = json.loads((out / "gwib-aggregate.json").read_text())
    vals = [json.loads((out / r / "eval.json").read_text())["out_sample"]["eps_pehe"] for r in runs]
    assert agg["metrics"]["out_sample"]["eps_pehe"]["mean"] == pytest.approx(np.mean(vals))
    assert agg["metrics"]["out_sample"]["eps_pehe"]["std"] == pytest.approx(np.std(vals))


def test_input_errors_exit_2(tmp_path, synth, config, capsys):
    assert main(["train", "--data", str(tmp_path / "nope.csv")]) == EXIT_INPUT
    bad = tmp_path / "bad.cfg"
    bad.write_text("lambda = 7\n")
    assert main(["train", "--config", str(bad), "--data", str(synth)]) == EXIT_INPUT
    no_t = tmp_path / "no_t.csv"
    no_t.write_text("x0,y_factual\n1,2\n")
    assert main(["train", "--data", str(no_t)]) == EXIT_INPUT
    assert "error" in capsys.readouterr().err


def test_numerical_failure_exit_3(tmp_path, synth, config, monkeypatch):
    from gwib import trainer

    def diverge(*a, **k):
        raise NumericalError("diverged at epoch 1", epoch=1)

    monkeypatch.setattr(trainer, "train", diverge)
    assert main(["train", "--config", str(config), "--data", str(synth), "--out", str(tmp_path)]) == EXIT_NUMERICAL


def test_manifest_written_before_results(tmp_path, synth, config, monkeypatch):
    from gwib import trainer

    def fail(*a, **k):
        raise NumericalError("boom")

    monkeypatch.setattr(trainer, "train", fail)
    main(["train", "--config", str(config), "--data", str(synth), "--out", str(tmp_path / "o")])
    assert (tmp_path / "o" / "gwib" / "manifest.json").is_file()


def test_ablate_shape_and_determinism(tmp_path, synth, config):
    runs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["ablate", "--config", str(config), "--data", str(synth), "--seeds", "0,1",
                     "--out", str(out), "--epochs", "1"]) == EXIT_OK
        runs.append(out / "ablation" / "ablation.csv")
    rows = read_rows(runs[0])
    assert len(rows) == 6 * 4 * 2
    assert {r["n_seeds"] for r in rows} == {"2"}
    assert runs[0].read_bytes() == runs[1].read_bytes()
    out = tmp_path / "c"
    main(["ablate", "--config", str(config), "--data", str(synth), "--seeds", "0",
          "--out", str(out), "--epochs", "1", "--include-tarnet"])
    rows = read_rows(out / "ablation" / "ablation.csv")
    assert len(rows) == 7 * 4 * 2
    assert any(r["variant"] == "tarnet" for r in rows)


def test_solve_ot_examples(tmp_path, capsys):
    cost = tmp_path / "cost.csv"
    write_matrix_csv(cost, np.array([[0.0, 1.0], [1.0, 0.0]]))
    assert main(["solve-ot", "emd", "--cost", str(cost), "--oracle"]) == EXIT_OK
    out = capsys.readouterr().out.split()
    assert float(out[1]) == 0.0 and float(out[3]) == 0.0

    rng = np.random.default_rng(0)
    pts = rng.normal(size=(5, 2))
    d = tmp_path / "d.csv"
    write_matrix_csv(d, pairwise_dist(pts, pts))
    assert main(["solve-ot", "gw", "--d-a", str(d), "--d-b", str(d)]) == EXIT_OK
    assert float(capsys.readouterr().out.split()[1]) <= 1e-9


def test_solve_ot_fused_matches_library(tmp_path, capsys):
    from gwib import oracles

    rng = np.random.default_rng(3)
    clouds = [rng.normal(size=(4, 2)) for _ in range(4)]
    mats = {
        "d-x0": pairwise_dist(clouds[0], clouds[0]), "d-x1": pairwise_dist(clouds[1], clouds[1]),
        "d-z0": pairwise_dist(clouds[2], clouds[2]), "d-z1": pairwise_dist(clouds[3], clouds[3]),
        "d-z01": pairwise_sq_dist(clouds[2], clouds[3]),
    }
    args = ["solve-ot", "fused", "--beta", "0.4", "--restarts", "24", "--oracle",
            "--plan-out", str(tmp_path / "plan.csv")]
    for name, m in mats.items():
        write_matrix_csv(tmp_path / f"{name}.csv", m)
        args += [f"--{name}", str(tmp_path / f"{name}.csv")]
    assert main(args) == EXIT_OK
    out = capsys.readouterr().out.split()
    ref = oracles.brute_force_fused(mats["d-x0"], mats["d-x1"], mats["d-z0"], mats["d-z1"], mats["d-z01"], 0.4)[0]
    assert float(out[1]) <= ref + 1e-8
    assert float(out[3]) == pytest.approx(ref, rel=1e-12)
    assert (tmp_path / "plan.csv").is_file()


def test_solve_ot_shape_error(tmp_path):
    a = tmp_path / "a.csv"
    write_matrix_csv(a, np.zeros((2, 3)))
    assert main(["solve-ot", "gw", "--d-a", str(a), "--d-b", str(a)]) == EXIT_INPUT
    assert main(["solve-ot", "emd"]) == EXIT_INPUT


def isometric_checkpoint(path):
    tensors = {
        "enc.0.W": np.eye(2), "enc.0.b": np.zeros(2),
        "enc.1.W": np.eye(2), "enc.1.b": np.full(2, 0.5),
        "h0.0.W": np.eye(2), "h0.0.b": np.zeros(2), "h0.out.W": np.ones((2, 1)), "h0.out.b": np.zeros(1),
        "h1.0.W": np.eye(2), "h1.0.b": np.zeros(2), "h1.out.W": np.ones((2, 1)), "h1.out.b": np.zeros(1),
    }
    cm.CfrParams(tensors, 0.0).save(path)


def test_diagnose_isometric_checkpoint(tmp_path):
    rng = np.random.default_rng(0)
    data = tmp_path / "pos.csv"
    write_csv(data, Cohort(rng.uniform(1, 2, size=(12, 2)), [0, 1] * 6, np.zeros(12)))
    ckpt = tmp_path / "iso.json"
    isometric_checkpoint(ckpt)
    out = tmp_path / "diag"
    assert main(["diagnose", "--checkpoint", str(ckpt), "--data", str(data), "--out", str(out)]) == EXIT_OK
    rows = read_rows(out / "diagnose" / "gw_loss.csv")
    assert len(rows) == 2
    assert all(abs(float(r["gw_information_loss"])) <= 1e-8 for r in rows)
    bound = json.loads((out / "diagnose" / "bound.json").read_text())
    assert set(bound) == {"group0", "group1"}


def test_diagnose_lambda_sweep_and_checkpoints(tmp_path, synth, config):
    cfg = tmp_path / "diag.cfg"
    cfg.write_text(config.read_text() + "epochs = 2\n")
    out = tmp_path / "diag"
    assert main(["diagnose", "--config", str(cfg), "--data", str(synth), "--lambdas", "1e-4,1e-2",
                 "--out", str(out)]) == EXIT_OK
    rows = read_rows(out / "diagnose" / "gw_loss.csv")
    assert len(rows) == 4
    assert {r["source"] for r in rows} == {"0.0001", "0.01"}
    assert all(float(r["gw_information_loss"]) >= -1e-8 for r in rows)

    runs = tmp_path / "runs"
    main(["train", "--config", str(config), "--data", str(synth), "--out", str(runs)] + FAST)
    untrained = tmp_path / "untrained.json"
    cm.CfrParams.init(3, (8, 4), 4, seed=0).save(untrained)
    for ckpt in (runs / "gwib" / "checkpoint.json", untrained):
        d = tmp_path / ckpt.stem
        assert main(["diagnose", "--checkpoint", str(ckpt), "--data", str(synth), "--out", str(d)]) == EXIT_OK
        vals = [float(r["gw_information_loss"]) for r in read_rows(d / "diagnose" / "gw_loss.csv")]
        assert all(np.isfinite(v) and v >= -1e-8 for v in vals)


def test_diagnose_needs_work(tmp_path, synth):
    assert main(["diagnose", "--data", str(synth), "--out", str(tmp_path)]) == EXIT_INPUT


def test_gen_synth_deterministic(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    main(["gen-synth", "--n", "30", "--dim", "2", "--seed", "4", "--out", str(a)])
    main(["gen-synth", "--n", "30", "--dim", "2", "--seed", "4", "--out", str(b)])
    assert a.read_bytes() == b.read_bytes()
    assert gen_synthetic(30, 2, 2.0, 1.0, seed=4).x.shape == (30, 2)
