"""Command-line entry point.

Subcommands: catalog, tiledb, gen-data, train, predict, distributed.
Machine output is CSV (stdout, or --out FILE with a human summary on
stdout); every random choice is controlled by an explicit --seed, so
identical invocations produce identical bytes.

Exit codes: 0 success, 1 domain error (bad inputs, unknown GPU,
untrained operator, ...), 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
from typing import List, Optional

from . import __version__
from .catalog import Catalog, parse_quantity, serialize_catalog
from .distributed import (DEFAULT_LINK_UTILIZATION, ParallelPlan, ServerSpec,
                          estimate_parallel)
from .engine import load_expected, predict_graph
from .errors import GpucastError
from .graph import fuse, greedy_fusion_groups, parse_graph
from .oracle import DEFAULT_RANGES, OracleSpec, generate_dataset
from .predictor import (TrainConfig, WeightStore, load_dataset,
                        samples_by_class, save_dataset, train)
from .tiledb import TileDb


def _load_tiledb(path: Optional[str]) -> TileDb:
    if path is None:
        return TileDb()
    return TileDb.load(path)


def _emit(report, out_path: Optional[str]) -> None:
    if out_path:
        report.write_csv(out_path)
        print(report.format_table())
        print(f"report written to {out_path}")
    else:
        sys.stdout.write(report.to_csv())


def _cmd_catalog(args) -> int:
    catalog = Catalog.load(args.catalog)
    if args.action == "list":
        print(f"{'name':<12} {'vendor':<8} {'year':<6} {'fp32 FLOP/s':<14} "
              f"{'mem B':<10} {'mem B/s':<12} {'SMs':<5} {'L2 B'}")
        for name in sorted(catalog.names()):
            s = catalog.get(name)
            print(f"{s.name:<12} {s.vendor:<8} {s.year:<6} {s.peak_flops['fp32']:<14.4g} "
                  f"{s.mem_size:<10.4g} {s.mem_bw:<12.4g} {s.num_sm:<5} {s.l2_size:.4g}")
        return 0
    spec = catalog.get(args.name)
    sys.stdout.write(serialize_catalog([spec]))
    return 0


def _cmd_tiledb(args) -> int:
    db = TileDb()
    if args.action == "ingest":
        import os
        if os.path.exists(args.db):
            db.ingest(args.db)
        total = 0
        for rec_file in args.records:
            total += db.ingest(rec_file)
        db.save(args.db)
        print(f"ingested {total} records; db now holds {len(db)}")
        return 0
    db = _load_tiledb(args.db)
    catalog = Catalog.load(args.catalog)
    gpu = catalog.get(args.gpu)
    dims = tuple(int(x) for x in args.dims.split("-"))
    tile = db.lookup(args.op, dims, gpu)
    print("-".join(str(t) for t in tile))
    return 0


def _cmd_gen_data(args) -> int:
    catalog = Catalog.load(args.catalog)
    gpu = catalog.get(args.gpu)
    spec = OracleSpec(gpu=gpu, noise_sigma=args.noise)
    db = _load_tiledb(args.tiledb)
    samples = generate_dataset(args.op, spec, args.n, args.seed,
                               ranges=DEFAULT_RANGES, tiledb=db)
    save_dataset(samples, args.out)
    print(f"wrote {len(samples)} samples to {args.out}")
    return 0


def _cmd_train(args) -> int:
    catalog = Catalog.load(args.catalog)
    db = _load_tiledb(args.tiledb)
    samples = load_dataset(args.dataset)
    grouped = samples_by_class(samples)
    cfg = TrainConfig(epochs=args.epochs, lr=args.lr, batch_size=args.batch_size,
                      weight_decay=args.weight_decay, seed=args.seed)
    store = WeightStore()
    loss_rows: List[str] = ["op_class,epoch,train_smape,val_smape"]
    for op_class in sorted(grouped):
        result = train(grouped[op_class], cfg, catalog, db)
        store.set(op_class, result.weights)
        for st in result.history:
            loss_rows.append(f"{op_class},{st.epoch},{st.train_smape!r},{st.val_smape!r}")
        last_val = result.history[-1].val_smape if result.history else float("nan")
        print(f"{op_class}: {len(grouped[op_class])} samples, best epoch "
              f"{result.best_epoch}, final val SMAPE {last_val:.4f}")
    store.save(args.out)
    if args.loss_csv:
        with open(args.loss_csv, "w", encoding="utf-8") as fh:
            fh.write("\n".join(loss_rows) + "\n")
    print(f"weights written to {args.out}")
    return 0


def _load_graph_with_fusion(args):
    g = parse_graph(args.graph)
    if args.fusion == "greedy":
        g = fuse(g, greedy_fusion_groups(g))
    elif args.fusion == "file":
        groups = {}
        for node in g.nodes:
            if node.fusion_group is not None:
                groups.setdefault(node.fusion_group, []).append(node.id)
        order = {nid: i for i, nid in enumerate(g.topo_order)}
        group_list = [sorted(members, key=order.get) for _, members in sorted(groups.items())]
        g = fuse(g, group_list)
    return g


def _cmd_predict(args) -> int:
    catalog = Catalog.load(args.catalog)
    gpu = catalog.get(args.gpu)
    g = _load_graph_with_fusion(args)
    store = WeightStore.load(args.weights)
    db = _load_tiledb(args.tiledb)
    report = predict_graph(g, gpu, store, db)
    if args.expected:
        report.attach_expected(load_expected(args.expected))
    _emit(report, args.out)
    return 0


def _cmd_distributed(args) -> int:
    catalog = Catalog.load(args.catalog)
    gpu = catalog.get(args.gpu)
    plan_doc = {}
    if args.plan:
        with open(args.plan, "r", encoding="utf-8") as fh:
            plan_doc = json.load(fh)

    def pick(flag_value, key, default=None):
        if flag_value is not None:
            return flag_value
        return plan_doc.get(key, default)

    strategy = pick(args.strategy, "strategy")
    width = pick(args.width, "width")
    global_batch = pick(args.global_batch, "global_batch")
    if strategy is None or width is None or global_batch is None:
        raise GpucastError("distributed needs strategy, width and global batch "
                           "(flags or --plan file)")
    microbatches = pick(args.microbatches, "microbatches", 1)
    link_bw = pick(args.link_bw, "link_bw", "600 GB/s")
    link_util = pick(args.link_utilization, "link_utilization", DEFAULT_LINK_UTILIZATION)
    num_gpus = pick(args.num_gpus, "num_gpus", int(width))

    plan = ParallelPlan(strategy=str(strategy), width=int(width),
                        global_batch=int(global_batch), microbatches=int(microbatches))
    server = ServerSpec(gpu=gpu, num_gpus=int(num_gpus),
                        link_bw=parse_quantity(link_bw, "link_bw"),
                        link_utilization=float(link_util))
    g = _load_graph_with_fusion(args)
    store = WeightStore.load(args.weights)
    db = _load_tiledb(args.tiledb)
    report = estimate_parallel(g, plan, server, store, db)
    if args.expected:
        report.attach_expected(load_expected(args.expected))
    _emit(report, args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gpucast",
        description="Forecast per-kernel, per-device and single-server "
                    "distributed latency of operator graphs on GPUs known "
                    "only from their published specs.")
    parser.add_argument("--version", action="version", version=f"gpucast {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_catalog_flag(p):
        p.add_argument("--catalog", default=None,
                       help="catalog YAML (default: $GPUCAST_CATALOG or the bundled catalog)")

    p = sub.add_parser("catalog", help="list or show GPU hardware specs")
    p.add_argument("action", choices=("list", "show"))
    p.add_argument("name", nargs="?", help="GPU name (for show)")
    add_catalog_flag(p)
    p.set_defaults(func=_cmd_catalog)

    p = sub.add_parser("tiledb", help="ingest or query tile-size records")
    p.add_argument("action", choices=("ingest", "query"))
    p.add_argument("--db", required=True, help="tile database file")
    p.add_argument("--records", nargs="+", default=[], help="record files to merge (ingest)")
    p.add_argument("--op", help="operator token (query)")
    p.add_argument("--dims", help="dash-separated dims (query)")
    p.add_argument("--gpu", help="GPU name (query)")
    add_catalog_flag(p)
    p.set_defaults(func=_cmd_tiledb)

    p = sub.add_parser("gen-data", help="generate a synthetic training dataset")
    p.add_argument("--op", required=True,
                   choices=("bmm", "fc", "elementwise", "softmax", "layernorm"))
    p.add_argument("--n", type=int, required=True, help="number of samples")
    p.add_argument("--gpu", required=True, help="GPU name")
    p.add_argument("--seed", type=int, default=0, help="RNG seed")
    p.add_argument("--noise", type=float, default=0.03, help="relative label noise")
    p.add_argument("--out", required=True, help="output dataset file")
    p.add_argument("--tiledb", default=None, help="tile database file")
    add_catalog_flag(p)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="train utilization predictors on a dataset")
    p.add_argument("--dataset", required=True, help="dataset file (gen-data format)")
    p.add_argument("--out", required=True, help="output weight directory")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--weight-decay", type=float, default=1e-2)
    p.add_argument("--seed", type=int, default=0, help="RNG seed")
    p.add_argument("--loss-csv", default=None, help="write per-epoch loss CSV here")
    p.add_argument("--tiledb", default=None, help="tile database file")
    add_catalog_flag(p)
    p.set_defaults(func=_cmd_train)

    def add_predict_common(p):
        p.add_argument("--graph", required=True, help="operator graph JSON")
        p.add_argument("--gpu", required=True, help="GPU name")
        p.add_argument("--weights", required=True, help="weight directory")
        p.add_argument("--tiledb", default=None, help="tile database file")
        p.add_argument("--fusion", choices=("none", "file", "greedy"), default="none",
                       help="apply fusion groups from the file or a greedy pass")
        p.add_argument("--out", default=None, help="write the CSV report here")
        p.add_argument("--expected", default=None,
                       help="measured-latency file (key,seconds) for error columns")
        add_catalog_flag(p)

    p = sub.add_parser("predict", help="predict single-device graph latency")
    add_predict_common(p)
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("distributed", help="estimate single-server parallel execution")
    add_predict_common(p)
    p.add_argument("--strategy", choices=("data", "tensor", "pipeline"), default=None)
    p.add_argument("--width", type=int, default=None, help="parallel width (GPUs used)")
    p.add_argument("--global-batch", type=int, default=None, dest="global_batch")
    p.add_argument("--microbatches", type=int, default=None, help="pipeline microbatches")
    p.add_argument("--num-gpus", type=int, default=None, dest="num_gpus",
                   help="GPUs in the server (default: width)")
    p.add_argument("--link-bw", default=None, dest="link_bw",
                   help='per-pair link bandwidth, e.g. "900 GB/s"')
    p.add_argument("--link-utilization", type=float, default=None, dest="link_utilization")
    p.add_argument("--plan", default=None, help="plan JSON file; flags override its fields")
    p.set_defaults(func=_cmd_distributed)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "catalog" and args.action == "show" and not args.name:
        parser.error("catalog show needs a GPU name")
    if args.command == "tiledb" and args.action == "query":
        if not (args.op and args.dims and args.gpu):
            parser.error("tiledb query needs --op, --dims and --gpu")
    if args.command == "tiledb" and args.action == "ingest" and not args.records:
        parser.error("tiledb ingest needs --records")
    try:
        return args.func(args)
    except GpucastError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
