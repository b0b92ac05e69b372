"""Acceptance suite: one test per release criterion, each printing a
pass line (run with -s to see them). Criteria ride on property checks,
oracle equivalence and pipeline-recovery experiments; the published
latency tables are fixtures for the error-report plumbing only, not
predictor targets.
"""

import json
import os
import subprocess
import sys
import time

import numpy as np
import pytest

from conftest import transformer_graph_dict
from test_predictor import central_difference_check, _random_prepared
from gpucast.catalog import Catalog, select_peak_flops
from gpucast.distributed import (ParallelPlan, ServerSpec, allreduce_latency,
                                 estimate_parallel, scale_graph)
from gpucast.engine import LatencyReport, ReportRow, predict_graph
from gpucast.graph import fuse, graph_from_dict
from gpucast.kernels import (MATRIX_OPS, brute_force_num_tiles, describe_kernel,
                             next_pow2, pct_error, plan_tiles, roofline_bw, smape)
from gpucast.mlp import init_weights
from gpucast.oracle import OracleSpec, generate_dataset, noiseless, oracle_latency
from gpucast.predictor import (TrainConfig, UtilCoeffs, UTIL_FLOOR, WeightStore,
                               featurize, predict_coeffs, predict_coeffs_batch,
                               predict_kernel, train, utilization)
from gpucast.tiledb import TileDb

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")


def _report(num, text):
    print(f"\n[PASS] criterion {num}: {text}")


# --- criterion 1: tiling equivalence ------------------------------------------

def test_criterion_1_tiling_equivalence(v100):
    rng = np.random.default_rng(1)
    cases = []
    for _ in range(1000):
        rank = int(rng.integers(1, 5))
        out_dims = [int(rng.integers(1, 65)) for _ in range(rank)]
        tile = [int(rng.integers(1, min(16, next_pow2(x)) + 1)) for x in out_dims]
        cases.append((out_dims, tile))
    start = time.perf_counter()
    for out_dims, tile in cases:
        analytic = 1
        for x, t in zip(out_dims, tile):
            analytic *= -(-x // t)
        assert analytic == brute_force_num_tiles(out_dims, tile)
    elapsed = time.perf_counter() - start
    assert elapsed < 1.0
    _report(1, f"1000 tile counts match brute-force enumeration ({elapsed:.2f}s)")


# --- criterion 2: roofline bound ------------------------------------------------

def _random_kernels(n, seed):
    rng = np.random.default_rng(seed)
    kernels = []
    ops = ("bmm", "fc", "add", "gelu", "softmax", "layernorm")
    for _ in range(n):
        op = ops[int(rng.integers(len(ops)))]
        if op == "bmm":
            dims = [int(rng.integers(1, 65)), int(rng.integers(1, 513)),
                    int(rng.integers(1, 513)), int(rng.integers(1, 513))]
        elif op == "fc":
            dims = [int(rng.integers(1, 2049)), int(rng.integers(1, 2049)),
                    int(rng.integers(1, 2049))]
        else:
            dims = [int(rng.integers(1, 8193)), int(rng.integers(1, 4097))]
        kernels.append(describe_kernel(op, dims))
    return kernels


def test_criterion_2_roofline_bound(catalog):
    kernels = _random_kernels(1000, seed=2)
    weights = init_weights([5, 16, 2], seed=7)  # arbitrary weights: bound must hold for any
    db = TileDb()
    start = time.perf_counter()
    for name in catalog.names():
        gpu = catalog.get(name)
        feats, waves, coeff_lat, rooflines, caps = [], [], [], [], []
        for k in kernels:
            tile = db.lookup(k.op_token, k.dims, gpu)
            plan = plan_tiles(k, tile, gpu)
            rf = roofline_bw(k, gpu)
            feats.append(featurize(plan, gpu, k))
            waves.append(plan.num_waves)
            coeff_lat.append(plan.num_waves * plan.flops_tile * gpu.num_sm / rf)
            rooflines.append(rf)
            peak = select_peak_flops(gpu, k.dtype, matrix_op=k.op in MATRIX_OPS)
            caps.append(min(k.flops_k / k.mem_k * gpu.mem_bw, peak))
        alpha, beta = predict_coeffs_batch(weights, np.array(feats))
        util = np.clip(alpha - beta / np.array(waves, dtype=float), UTIL_FLOOR, 1.0)
        achieved = np.array(rooflines) * util
        assert (achieved <= np.array(caps) * (1 + 1e-12)).all()
        latency = np.array(coeff_lat) / util
        flops = np.array([k.flops_k for k in kernels])
        lower = flops / np.array(rooflines)
        assert (latency >= lower * (1 - 1e-9)).all()
    elapsed = time.perf_counter() - start
    assert elapsed < 1.0
    _report(2, f"achieved bw and latency bounded by the roofline on "
               f"{len(kernels)} kernels x {len(catalog.names())} GPUs ({elapsed:.2f}s)")


# --- criterion 3: gradient check -------------------------------------------------

def test_criterion_3_gradient_check():
    start = time.perf_counter()
    cfg = TrainConfig(hidden_units=16, hidden_layers=2, seed=0)
    worst = 0.0
    for i in range(50):
        data = _random_prepared(8, seed=100 + i)
        w = init_weights(cfg.layer_sizes(), seed=200 + i)
        worst = max(worst, central_difference_check(cfg, data, w, n_dirs=6, seed=i))
    elapsed = time.perf_counter() - start
    assert worst < 1e-4
    assert elapsed < 10.0
    _report(3, f"analytic gradients match central differences, worst rel err "
               f"{worst:.2e} over 50 instances ({elapsed:.1f}s)")


# --- criteria 4 and 5: pipeline recovery on the synthetic oracle -----------------

@pytest.fixture(scope="module")
def recovery(catalog, v100):
    spec = OracleSpec(gpu=v100, noise_sigma=0.03)
    db = TileDb()
    train_set = generate_dataset("bmm", spec, 2000, seed=42, tiledb=db)
    held = generate_dataset("bmm", spec, 400, seed=4242, tiledb=db)
    cfg = TrainConfig()  # documented defaults
    start = time.perf_counter()
    result = train(train_set, cfg, catalog, db)
    train_seconds = time.perf_counter() - start

    clean = noiseless(spec)
    store = WeightStore({"bmm": result.weights})
    preds, labels, cleans, contexts = [], [], [], []
    for s in held:
        k = describe_kernel(s.op_token, s.dims)
        tile = db.lookup(s.op_token, s.dims, v100)
        plan = plan_tiles(k, tile, v100)
        contexts.append(featurize(plan, v100, k))
        preds.append(predict_kernel(k, v100, store, db).latency)
        labels.append(s.latency)
        cleans.append(oracle_latency(k, tile, clean, seed=0))
    return {
        "weights": result.weights,
        "history": result.history,
        "train_seconds": train_seconds,
        "held_smape": smape(preds, labels),
        "noise_floor": smape(labels, cleans),
        "contexts": np.array(contexts),
    }


def test_criterion_4_learnability(recovery):
    held = recovery["held_smape"]
    floor = recovery["noise_floor"]
    assert held < 0.10
    assert held < 2.0 * floor
    assert recovery["train_seconds"] < 300.0
    best_val = min(st.val_smape for st in recovery["history"])
    assert best_val < 0.10  # default-config training example
    _report(4, f"held-out SMAPE {held:.3f} vs noise floor {floor:.3f} "
               f"({held / floor:.2f}x), trained in {recovery['train_seconds']:.0f}s")


def test_criterion_5_utilization_shape(recovery):
    contexts = recovery["contexts"]
    rng = np.random.default_rng(5)
    picks = rng.choice(len(contexts), size=100, replace=True)
    for idx in picks:
        coeffs = predict_coeffs(recovery["weights"], contexts[idx])
        series = [utilization(coeffs, w) for w in range(1, 65)]
        assert all(b >= a for a, b in zip(series, series[1:]))
    _report(5, "predicted utilization nondecreasing in waves for 100 contexts")


# --- criterion 6: fusion accounting ----------------------------------------------

def test_criterion_6_fusion_accounting():
    rows, cols = 8192, 1024
    doc = {"format": "opgraph", "version": 1, "model": "f", "batch_size": 1,
           "mode": "inference",
           "nodes": [
               {"id": "res", "op": "add", "dims": [rows, cols], "dtype": "fp32"},
               {"id": "ln", "op": "layernorm", "dims": [rows, cols], "dtype": "fp32"},
               {"id": "fc", "op": "fc", "dims": [64, 256, 1024], "dtype": "fp32"},
               {"id": "act", "op": "gelu", "dims": [64, 1024], "dtype": "fp32"},
           ],
           "edges": [["res", "ln"], ["fc", "act"]]}
    g = fuse(graph_from_dict(doc), [["res", "ln"], ["fc", "act"]])

    add_k = describe_kernel("add", [rows, cols])
    ln_k = describe_kernel("layernorm", [rows, cols])
    fused_vec = g.node("res").kernel
    assert fused_vec.flops_k == add_k.flops_k + ln_k.flops_k
    assert fused_vec.mem_k == add_k.mem_k + ln_k.mem_k - 2 * rows * cols * 4

    fc_k = describe_kernel("fc", [64, 256, 1024])
    act_k = describe_kernel("gelu", [64, 1024])
    fused_mat = g.node("fc").kernel
    assert fused_mat.flops_k == fc_k.flops_k + act_k.flops_k
    assert fused_mat.mem_k == fc_k.mem_k + act_k.mem_k - 2 * 64 * 1024 * 4
    _report(6, "fused byte/FLOP accounting exact for residual+layernorm and fc+gelu")


# --- criterion 7: distributed degeneracy and closed forms -------------------------

def test_criterion_7_distributed_closed_forms(v100, small_store, empty_db):
    server = ServerSpec(gpu=v100, num_gpus=8, link_bw=300e9, link_utilization=1.0)
    for p in (2, 4, 8):
        got = allreduce_latency(4e8, server, p)
        want = 2 * (p - 1) / p * 4e8 / 300e9
        assert got == pytest.approx(want, rel=1e-12)

    g = graph_from_dict(transformer_graph_dict(num_blocks=2, hidden=64, heads=4,
                                               seq=8, batch=4, mode="training"))
    single = predict_graph(scale_graph(g, 4), v100, small_store, empty_db)
    for strategy in ("data", "tensor", "pipeline"):
        plan = ParallelPlan(strategy=strategy, width=1, global_batch=4, microbatches=1)
        rep = estimate_parallel(g, plan, server, small_store, empty_db)
        assert rep.iteration_latency == single.total_latency  # bit-exact

    nodes = [{"id": f"fc{s}", "op": "fc", "dims": [64, 32, 32], "dtype": "fp32",
              "stage": s} for s in range(4)]
    doc = {"format": "opgraph", "version": 1, "model": "p", "batch_size": 2,
           "mode": "inference", "nodes": nodes,
           "edges": [[f"fc{s}", f"fc{s+1}"] for s in range(3)]}
    for m in (1, 3):
        gp = graph_from_dict(doc)
        plan = ParallelPlan(strategy="pipeline", width=4, global_batch=2 * m,
                            microbatches=m)
        rep = estimate_parallel(gp, plan, server, small_store, empty_db)
        stage = [r.latency_s for r in rep.rows if r.row_type == "stage"]
        assert len(set(stage)) == 1
        assert rep.compute_span == pytest.approx((m + 4 - 1) * stage[0], rel=1e-12)
    _report(7, "width-1 plans bit-exact; ring allreduce and pipeline span closed "
               "forms match")


# --- criterion 8: published-table fixtures drive the error pipeline ---------------

def _load_fixture(name):
    rows = []
    with open(os.path.join(FIXTURES, name), "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            rows.append({"key": "/".join(parts[:4]), "measured": float(parts[4]),
                         "predicted": float(parts[5]), "reported": float(parts[6])})
    return rows


# One published row is internally inconsistent: its printed latencies
# (80.9 vs 65.0) recompute to 24.46%, not the printed 24.6%.
INCONSISTENT = "BERT-Large/8/H100/fused"


def test_criterion_8_error_pipeline_reproduces_published_errors():
    rows = (_load_fixture("fusion_inference_latencies.csv")
            + _load_fixture("distributed_training_latencies.csv"))
    assert len(rows) == 35
    report = LatencyReport()
    expected = {}
    for row in rows:
        report.rows.append(ReportRow(row_type="node", name=row["key"],
                                     latency_s=row["predicted"] / 1e3))
        expected[row["key"]] = row["measured"] / 1e3
    report.attach_expected(expected)

    by_key = {r.name: r for r in report.rows}
    checked = 0
    for row in rows:
        got = by_key[row["key"]].pct_error
        assert got == pytest.approx(pct_error(row["predicted"], row["measured"]),
                                    rel=1e-12)
        if row["key"] == INCONSISTENT:
            assert got == pytest.approx(24.46, abs=5e-3)
            assert abs(got - row["reported"]) < 0.15
            continue
        assert abs(got - row["reported"]) <= 0.1
        checked += 1
    assert checked == 34
    dp = next(r for r in rows if r["key"] == "GPT2-Large/4/A100-40GBx4/data")
    assert pct_error(dp["predicted"], dp["measured"]) == pytest.approx(12.9, abs=0.05)
    csv_text = report.to_csv()
    assert "pct_error" in csv_text.splitlines()[0]
    _report(8, "error pipeline matches 34/35 published percentages to 0.1pp "
               "(one published row is internally inconsistent by 0.14pp)")


# --- criterion 9: end-to-end determinism ------------------------------------------

def _run_cli(args, cwd):
    proc = subprocess.run([sys.executable, "-m", "gpucast.cli"] + args,
                          capture_output=True, text=True, cwd=cwd)
    assert proc.returncode == 0, proc.stderr
    return proc.stdout


def test_criterion_9_end_to_end_determinism(tmp_path):
    graph_path = tmp_path / "graph.json"
    graph_path.write_text(json.dumps(transformer_graph_dict(
        num_blocks=1, hidden=64, heads=4, seq=8, batch=2)))

    outputs = []
    for run in ("a", "b"):
        d = tmp_path / run
        d.mkdir()
        _run_cli(["gen-data", "--op", "bmm", "--n", "60", "--gpu", "V100",
                  "--seed", "5", "--out", str(d / "data.csv")], cwd=tmp_path)
        _run_cli(["train", "--dataset", str(d / "data.csv"), "--out", str(d / "w"),
                  "--epochs", "2", "--seed", "0",
                  "--loss-csv", str(d / "loss.csv")], cwd=tmp_path)
        # Cover the untrained classes with fixed-seed weights so predict
        # can run on the full toy graph.
        store = WeightStore.load(d / "w")
        for i, cls in enumerate(("fc", "elementwise", "softmax", "layernorm")):
            store.set(cls, init_weights([5, 16, 2], seed=10 + i))
        store.save(d / "w")
        _run_cli(["predict", "--graph", str(graph_path), "--gpu", "V100",
                  "--weights", str(d / "w"), "--out", str(d / "report.csv")],
                 cwd=tmp_path)
        blobs = {}
        for rel in ("data.csv", "loss.csv", "report.csv", "w/bmm.mlpw"):
            blobs[rel] = (d / rel).read_bytes()
        outputs.append(blobs)
    assert outputs[0] == outputs[1]
    _report(9, "gen-data -> train -> predict is byte-identical across runs")
