import json
import os

import pytest

from conftest import transformer_graph_dict
from gpucast.cli import build_parser, main


@pytest.fixture()
def graph_file(tmp_path):
    doc = transformer_graph_dict(num_blocks=1, hidden=64, heads=4, seq=8, batch=2)
    path = tmp_path / "graph.json"
    path.write_text(json.dumps(doc))
    return str(path)


@pytest.fixture()
def weights_dir(tmp_path, small_store):
    d = tmp_path / "weights"
    small_store.save(d)
    return str(d)


def test_catalog_list(capsys):
    assert main(["catalog", "list"]) == 0
    out = capsys.readouterr().out
    for name in ("H100", "V100", "MI250"):
        assert name in out


def test_catalog_show_normalized(capsys):
    assert main(["catalog", "show", "H100"]) == 0
    out = capsys.readouterr().out
    assert "66900000000000" in out
    assert "num_sm: 132" in out


def test_catalog_show_unknown_gpu_exits_1(capsys):
    assert main(["catalog", "show", "NoSuchGPU"]) == 1
    assert "NoSuchGPU" in capsys.readouterr().err


def test_usage_error_exits_2():
    with pytest.raises(SystemExit) as exc:
        main(["predict"])
    assert exc.value.code == 2


def test_catalog_show_without_name_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["catalog", "show"])
    assert exc.value.code == 2


def test_tiledb_ingest_and_query(tmp_path, capsys):
    records = tmp_path / "records.txt"
    records.write_text("bmm,1-4-4-4,V100,1-2-2,measured\n")
    db = tmp_path / "tiles.db"
    assert main(["tiledb", "ingest", "--db", str(db), "--records", str(records)]) == 0
    capsys.readouterr()
    assert main(["tiledb", "query", "--db", str(db), "--op", "bmm",
                 "--dims", "1-4-4-4", "--gpu", "V100"]) == 0
    assert capsys.readouterr().out.strip() == "1-2-2"


def test_gen_data_deterministic(tmp_path, capsys):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    args = ["gen-data", "--op", "bmm", "--n", "50", "--gpu", "V100", "--seed", "7"]
    assert main(args + ["--out", str(a)]) == 0
    assert main(args + ["--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert len(a.read_text().strip().splitlines()) == 50
    capsys.readouterr()


def test_gen_data_seed_changes_output(tmp_path, capsys):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    base = ["gen-data", "--op", "softmax", "--n", "20", "--gpu", "V100"]
    assert main(base + ["--seed", "1", "--out", str(a)]) == 0
    assert main(base + ["--seed", "2", "--out", str(b)]) == 0
    assert a.read_bytes() != b.read_bytes()
    capsys.readouterr()


def test_train_writes_weights_and_loss_csv(tmp_path, capsys):
    data = tmp_path / "d.csv"
    assert main(["gen-data", "--op", "bmm", "--n", "30", "--gpu", "V100",
                 "--seed", "3", "--out", str(data)]) == 0
    wdir = tmp_path / "w"
    loss = tmp_path / "loss.csv"
    assert main(["train", "--dataset", str(data), "--out", str(wdir),
                 "--epochs", "2", "--seed", "0", "--loss-csv", str(loss)]) == 0
    assert (wdir / "bmm.mlpw").exists()
    lines = loss.read_text().strip().splitlines()
    assert lines[0] == "op_class,epoch,train_smape,val_smape"
    assert len(lines) == 3
    out = capsys.readouterr().out
    assert "bmm" in out


def test_predict_emits_csv_with_total(graph_file, weights_dir, capsys):
    assert main(["predict", "--graph", graph_file, "--gpu", "H100",
                 "--weights", weights_dir]) == 0
    out = capsys.readouterr().out
    lines = out.strip().splitlines()
    assert lines[0].startswith("row_type,name,op")
    assert lines[-1].startswith("total,total")
    assert any(line.startswith("node,qkv0,fc") for line in lines)


def test_predict_report_file_and_summary(graph_file, weights_dir, tmp_path, capsys):
    out_csv = tmp_path / "report.csv"
    assert main(["predict", "--graph", graph_file, "--gpu", "V100",
                 "--weights", weights_dir, "--out", str(out_csv)]) == 0
    assert out_csv.exists()
    text = capsys.readouterr().out
    assert "total" in text and str(out_csv) in text


def test_predict_deterministic_bytes(graph_file, weights_dir, tmp_path, capsys):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    args = ["predict", "--graph", graph_file, "--gpu", "V100", "--weights", weights_dir]
    assert main(args + ["--out", str(a)]) == 0
    assert main(args + ["--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    capsys.readouterr()


def test_predict_unknown_gpu_exit_1(graph_file, weights_dir, capsys):
    assert main(["predict", "--graph", graph_file, "--gpu", "NoSuchGPU",
                 "--weights", weights_dir]) == 1
    assert "NoSuchGPU" in capsys.readouterr().err


def test_predict_greedy_fusion_runs(graph_file, weights_dir, capsys):
    assert main(["predict", "--graph", graph_file, "--gpu", "V100",
                 "--weights", weights_dir, "--fusion", "greedy"]) == 0
    out = capsys.readouterr().out
    assert "(fused)" in out


def test_predict_with_expected_errors(graph_file, weights_dir, tmp_path, capsys):
    expected = tmp_path / "measured.csv"
    expected.write_text("total,0.5\n")
    assert main(["predict", "--graph", graph_file, "--gpu", "V100",
                 "--weights", weights_dir, "--expected", str(expected)]) == 0
    out = capsys.readouterr().out
    total_line = out.strip().splitlines()[-1]
    assert total_line.count(",") == len(out.strip().splitlines()[0].split(",")) - 1
    assert total_line.split(",")[-2] == "0.5"
    assert float(total_line.split(",")[-1]) > 0


def test_distributed_cli_data_parallel(graph_file, weights_dir, capsys):
    assert main(["distributed", "--graph", graph_file, "--gpu", "V100",
                 "--weights", weights_dir, "--strategy", "data", "--width", "2",
                 "--global-batch", "4", "--num-gpus", "4",
                 "--link-bw", "600 GB/s"]) == 0
    out = capsys.readouterr().out
    assert out.splitlines()[-1].startswith("total,iteration")


def test_distributed_plan_file_with_flag_override(graph_file, weights_dir, tmp_path, capsys):
    plan = tmp_path / "plan.json"
    plan.write_text(json.dumps({"strategy": "pipeline", "width": 2,
                                "microbatches": 2, "global_batch": 4,
                                "link_bw": "900 GB/s", "link_utilization": 0.75,
                                "num_gpus": 4}))
    assert main(["distributed", "--graph", graph_file, "--gpu", "V100",
                 "--weights", weights_dir, "--plan", str(plan)]) == 0
    out = capsys.readouterr().out
    assert "stage-0" in out and "stage-1" in out
    capsys.readouterr()
    assert main(["distributed", "--graph", graph_file, "--gpu", "V100",
                 "--weights", weights_dir, "--plan", str(plan),
                 "--strategy", "data"]) == 0
    out = capsys.readouterr().out
    assert "stage-1" not in out


def test_distributed_missing_plan_fields_exit_1(graph_file, weights_dir, capsys):
    assert main(["distributed", "--graph", graph_file, "--gpu", "V100",
                 "--weights", weights_dir]) == 1
    assert "strategy" in capsys.readouterr().err


def test_env_var_catalog(tmp_path, monkeypatch, capsys):
    cat = tmp_path / "cat.yaml"
    cat.write_text("- name: TinyGPU\n  vendor: test\n  peak_flops: {fp32: 1 TFLOPS}\n"
                   "  mem_size: 1 GB\n  mem_bw: 100 GB/s\n  num_sm: 4\n  l2_size: 1 MB\n")
    monkeypatch.setenv("GPUCAST_CATALOG", str(cat))
    assert main(["catalog", "list"]) == 0
    out = capsys.readouterr().out
    assert "TinyGPU" in out and "H100" not in out


def test_help_documents_all_flags():
    parser = build_parser()
    sub_actions = [a for a in parser._actions if hasattr(a, "choices") and a.choices]
    subparsers = sub_actions[0].choices
    expected_flags = {
        "catalog": ["--catalog"],
        "tiledb": ["--db", "--records", "--op", "--dims", "--gpu", "--catalog"],
        "gen-data": ["--op", "--n", "--gpu", "--seed", "--noise", "--out",
                     "--tiledb", "--catalog"],
        "train": ["--dataset", "--out", "--epochs", "--lr", "--batch-size",
                  "--weight-decay", "--seed", "--loss-csv", "--tiledb", "--catalog"],
        "predict": ["--graph", "--gpu", "--weights", "--tiledb", "--fusion",
                    "--out", "--expected", "--catalog"],
        "distributed": ["--graph", "--gpu", "--weights", "--strategy", "--width",
                        "--global-batch", "--microbatches", "--num-gpus",
                        "--link-bw", "--link-utilization", "--plan"],
    }
    for name, flags in expected_flags.items():
        text = subparsers[name].format_help()
        for flag in flags:
            assert flag in text, f"{name} help is missing {flag}"


def test_help_golden_text(capsys):
    # Top-level help snapshot; regenerate tests/data/cli_help.txt on
    # deliberate CLI changes.
    os.environ["COLUMNS"] = "100"
    parser = build_parser()
    text = parser.format_help()
    golden = os.path.join(os.path.dirname(__file__), "data", "cli_help.txt")
    with open(golden, "r", encoding="utf-8") as fh:
        assert text == fh.read()
