"""Shared fixtures: catalog handles and a toy transformer graph builder."""

import numpy as np
import pytest

from gpucast.catalog import Catalog
from gpucast.mlp import init_weights
from gpucast.predictor import WeightStore
from gpucast.tiledb import TileDb


@pytest.fixture(scope="session")
def catalog():
    return Catalog.default()


@pytest.fixture(scope="session")
def v100(catalog):
    return catalog.get("V100")


@pytest.fixture(scope="session")
def h100(catalog):
    return catalog.get("H100")


@pytest.fixture(scope="session")
def a100(catalog):
    return catalog.get("A100-40GB")


@pytest.fixture()
def empty_db():
    return TileDb()


@pytest.fixture(scope="session")
def small_store():
    """Weight store with small random (untrained) MLPs for every class."""
    store = WeightStore()
    for i, op_class in enumerate(("bmm", "fc", "elementwise", "softmax", "layernorm")):
        store.set(op_class, init_weights([5, 24, 24, 2], seed=100 + i))
    return store


def transformer_graph_dict(num_blocks=2, hidden=64, heads=4, seq=8, batch=2,
                           mode="inference", dtype="fp32", embedding=True):
    """Hand-built attention+MLP block graph in the canonical format.

    Per block (forward): 4 fc, 2 bmm, 1 softmax, 2 layernorm,
    4 elementwise (scale-mul, gelu, two residual adds).
    """
    assert hidden % heads == 0
    head_dim = hidden // heads
    tokens = batch * seq
    score_rows = batch * heads * seq
    nodes, edges = [], []

    def add(node_id, op, dims, block, pass_kind="fwd", batch_dim=0):
        nodes.append({"id": node_id, "op": op, "dims": list(dims), "dtype": dtype,
                      "pass": pass_kind, "block": block, "batch_dim": batch_dim})

    prev = None
    if embedding:
        add("embed", "other:embedding", [tokens * hidden], block=None)
        prev = "embed"
    for i in range(num_blocks):
        def nid(name, i=i):
            return f"{name}{i}"

        add(nid("qkv"), "fc", [tokens, hidden, 3 * hidden], i)
        if prev:
            edges.append([prev, nid("qkv")])
        add(nid("scores"), "bmm", [batch * heads, seq, head_dim, seq], i)
        edges.append([nid("qkv"), nid("scores")])
        add(nid("scale"), "mul", [score_rows, seq], i)
        edges.append([nid("scores"), nid("scale")])
        add(nid("probs"), "softmax", [score_rows, seq], i)
        edges.append([nid("scale"), nid("probs")])
        add(nid("ctx"), "bmm", [batch * heads, seq, seq, head_dim], i)
        edges.append([nid("probs"), nid("ctx")])
        edges.append([nid("qkv"), nid("ctx")])
        add(nid("proj"), "fc", [tokens, hidden, hidden], i)
        edges.append([nid("ctx"), nid("proj")])
        add(nid("res1"), "add", [tokens, hidden], i)
        edges.append([nid("proj"), nid("res1")])
        if prev:
            edges.append([prev, nid("res1")])
        add(nid("ln1"), "layernorm", [tokens, hidden], i)
        edges.append([nid("res1"), nid("ln1")])
        add(nid("ff1"), "fc", [tokens, hidden, 4 * hidden], i)
        edges.append([nid("ln1"), nid("ff1")])
        add(nid("act"), "gelu", [tokens, 4 * hidden], i)
        edges.append([nid("ff1"), nid("act")])
        add(nid("ff2"), "fc", [tokens, 4 * hidden, hidden], i)
        edges.append([nid("act"), nid("ff2")])
        add(nid("res2"), "add", [tokens, hidden], i)
        edges.append([nid("ff2"), nid("res2")])
        edges.append([nid("ln1"), nid("res2")])
        add(nid("ln2"), "layernorm", [tokens, hidden], i)
        edges.append([nid("res2"), nid("ln2")])
        prev = nid("ln2")

    if mode == "training":
        for i in range(num_blocks):
            fcs = (("qkv", [tokens, hidden, 3 * hidden]),
                   ("proj", [tokens, hidden, hidden]),
                   ("ff1", [tokens, hidden, 4 * hidden]),
                   ("ff2", [tokens, 4 * hidden, hidden]))
            for name, (bb, fin, fout) in fcs:
                add(f"{name}{i}_dx", "fc", [bb, fout, fin], i, "bwd")
                add(f"{name}{i}_dw", "fc", [fin, bb, fout], i, "bwd", batch_dim=1)
            bmms = (("scores", [batch * heads, seq, head_dim, seq]),
                    ("ctx", [batch * heads, seq, seq, head_dim]))
            for name, (bb, m, kk, n) in bmms:
                add(f"{name}{i}_da", "bmm", [bb, m, n, kk], i, "bwd")
                add(f"{name}{i}_db", "bmm", [bb, kk, m, n], i, "bwd")
            for name, dims_v in (("scale", [score_rows, seq]),
                                 ("act", [tokens, 4 * hidden]),
                                 ("res1", [tokens, hidden]),
                                 ("res2", [tokens, hidden])):
                add(f"{name}{i}_bwd", "mul", dims_v, i, "bwd")
            add(f"probs{i}_bwd", "softmax", [score_rows, seq], i, "bwd")
            add(f"ln1{i}_bwd", "layernorm", [tokens, hidden], i, "bwd")
            add(f"ln2{i}_bwd", "layernorm", [tokens, hidden], i, "bwd")

    return {
        "format": "opgraph",
        "version": 1,
        "model": f"toy-transformer-{num_blocks}x{hidden}",
        "batch_size": batch,
        "mode": mode,
        "seq_len": seq,
        "hidden_dim": hidden,
        "num_blocks": num_blocks,
        "nodes": nodes,
        "edges": edges,
    }


@pytest.fixture()
def toy_graph_dict():
    return transformer_graph_dict


def rng(seed=0):
    return np.random.default_rng(seed)
