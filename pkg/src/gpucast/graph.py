"""Canonical operator-graph format: parsing, validation, fusion.

A graph file is JSON:

    {
      "format": "opgraph", "version": 1,
      "model": "toy", "batch_size": 8, "mode": "inference",
      "seq_len": 128, "hidden_dim": 256, "num_blocks": 2,   # optional
      "nodes": [
        {"id": "fc0", "op": "fc", "dims": [1024, 256, 256], "dtype": "fp32",
         "pass": "fwd", "fusion_group": null, "stage": null, "block": 0}
      ],
      "edges": [["fc0", "gelu0"], ...]
    }

The graph must be acyclic with edges between declared nodes; training
graphs must enumerate their backward kernels explicitly (this engine
does not differentiate anything). Shape consistency along edges is an
element-count check so layout-only reshapes between producers and
consumers stay legal.

Fusion replaces a group of consecutive operators by one node that keeps
the first member's metadata (tile lookups use the first operator), sums
the member FLOP counts, and discards the bytes of every intermediate
tensor twice over (the producer's write and the consumer's read).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Set, Tuple

from .errors import FusionError, GraphError, KernelSpecError
from .kernels import (DEFAULT_COSTS, DTYPE_BYTES, FlopCosts, KernelDesc, OpType,
                      UNARY_KINDS, describe_kernel, with_fused_totals)

GRAPH_FORMAT = "opgraph"
GRAPH_VERSION = 1

MODES = ("inference", "training")
PASSES = ("fwd", "bwd")


@dataclass
class GraphNode:
    id: str
    kernel: KernelDesc
    pass_kind: str = "fwd"
    fusion_group: Optional[str] = None
    stage: Optional[int] = None
    block: Optional[int] = None
    batch_dim: int = 0  # which dims coordinate scales with batch size
    predicted_latency: Optional[float] = None

    def out_bytes(self) -> float:
        n = 1
        for d in self.kernel.out_dims:
            n *= d
        return n * DTYPE_BYTES[self.kernel.dtype]


@dataclass
class OpGraph:
    model: str
    batch_size: int
    mode: str
    nodes: List[GraphNode]
    edges: List[Tuple[str, str]]
    seq_len: Optional[int] = None
    hidden_dim: Optional[int] = None
    num_blocks: Optional[int] = None
    version: int = GRAPH_VERSION
    _by_id: Dict[str, GraphNode] = field(default_factory=dict, repr=False)
    topo_order: List[str] = field(default_factory=list, repr=False)

    def node(self, node_id: str) -> GraphNode:
        return self._by_id[node_id]

    def consumers(self, node_id: str) -> List[str]:
        return [d for s, d in self.edges if s == node_id]

    def producers(self, node_id: str) -> List[str]:
        return [s for s, d in self.edges if d == node_id]

    def nodes_in_topo_order(self) -> List[GraphNode]:
        return [self._by_id[i] for i in self.topo_order]


def _expected_input_elems(k: KernelDesc) -> List[int]:
    if k.op is OpType.BMM:
        b, m, kk, n = k.dims
        return [b * m * kk, b * kk * n]
    if k.op is OpType.FC:
        b, fin, _ = k.dims
        return [b * fin]
    if k.op is OpType.OTHER:
        return []
    r, c = k.dims
    return [r * c]


def _toposort(ids: List[str], edges: List[Tuple[str, str]]) -> List[str]:
    indeg = {i: 0 for i in ids}
    adj: Dict[str, List[str]] = {i: [] for i in ids}
    for s, d in edges:
        adj[s].append(d)
        indeg[d] += 1
    # File order breaks ties, so the result is stable.
    ready = [i for i in ids if indeg[i] == 0]
    order: List[str] = []
    while ready:
        cur = ready.pop(0)
        order.append(cur)
        for nxt in adj[cur]:
            indeg[nxt] -= 1
            if indeg[nxt] == 0:
                ready.append(nxt)
    if len(order) != len(ids):
        cyclic = sorted(set(ids) - set(order))
        raise GraphError(f"graph contains a cycle through nodes {cyclic[:5]}")
    return order


def validate_graph(g: OpGraph) -> None:
    """Structural checks: unique ids, no dangling edges, acyclic, shape
    consistency along edges, backward nodes present in training mode."""
    if g.mode not in MODES:
        raise GraphError(f"mode must be one of {MODES}, got {g.mode!r}")
    ids = [n.id for n in g.nodes]
    if len(set(ids)) != len(ids):
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        raise GraphError(f"duplicate node ids {dupes}")
    g._by_id = {n.id: n for n in g.nodes}
    for s, d in g.edges:
        if s not in g._by_id or d not in g._by_id:
            raise GraphError(f"edge ({s!r} -> {d!r}) references a missing node")
    g.topo_order = _toposort(ids, g.edges)
    for s, d in g.edges:
        src, dst = g._by_id[s], g._by_id[d]
        if src.kernel.op is OpType.OTHER or dst.kernel.op is OpType.OTHER:
            continue
        produced = 1
        for dim in src.kernel.out_dims:
            produced *= dim
        expected = _expected_input_elems(dst.kernel)
        # Element-count check, tolerant of layout-only reshapes. A producer
        # may also broadcast up into the expectation (bias row into an add)
        # or be sliced down (fused QKV feeding one attention head input).
        if expected and not any(
                produced == e or e % produced == 0 or produced % e == 0
                for e in expected):
            raise GraphError(
                f"edge ({s!r} -> {d!r}): producer supplies {produced} elements, "
                f"consumer expects one of {expected}")
    if g.mode == "training" and not any(n.pass_kind == "bwd" for n in g.nodes):
        raise GraphError("training graphs must list their backward kernels")


def _node_from_entry(entry: dict, index: int, costs: FlopCosts) -> GraphNode:
    if not isinstance(entry, dict):
        raise GraphError(f"node #{index}: expected a mapping")
    for key in ("id", "op", "dims", "dtype"):
        if key not in entry:
            raise GraphError(f"node #{index}: missing required field {key!r}")
    try:
        kernel = describe_kernel(str(entry["op"]), entry["dims"], str(entry["dtype"]),
                                 costs=costs)
    except KernelSpecError as exc:
        raise GraphError(f"node #{index} ({entry.get('id')}): {exc}") from exc
    pass_kind = entry.get("pass", "fwd")
    if pass_kind not in PASSES:
        raise GraphError(f"node #{index}: pass must be one of {PASSES}, got {pass_kind!r}")
    fusion_group = entry.get("fusion_group")
    stage = entry.get("stage")
    block = entry.get("block")
    batch_dim = int(entry.get("batch_dim", 0))
    if not 0 <= batch_dim < len(kernel.dims):
        raise GraphError(f"node #{index}: batch_dim {batch_dim} outside the dims rank")
    return GraphNode(id=str(entry["id"]), kernel=kernel, pass_kind=pass_kind,
                     fusion_group=None if fusion_group is None else str(fusion_group),
                     stage=None if stage is None else int(stage),
                     block=None if block is None else int(block),
                     batch_dim=batch_dim)


def graph_from_dict(doc: dict, costs: FlopCosts = DEFAULT_COSTS) -> OpGraph:
    if doc.get("format") != GRAPH_FORMAT:
        raise GraphError(f"not an operator graph file (format={doc.get('format')!r})")
    if doc.get("version") != GRAPH_VERSION:
        raise GraphError(f"unsupported graph version {doc.get('version')!r}")
    for key in ("model", "batch_size", "mode", "nodes", "edges"):
        if key not in doc:
            raise GraphError(f"missing required field {key!r}")
    nodes = [_node_from_entry(e, i, costs) for i, e in enumerate(doc["nodes"])]
    edges = []
    for i, e in enumerate(doc["edges"]):
        if not (isinstance(e, (list, tuple)) and len(e) == 2):
            raise GraphError(f"edge #{i}: expected [src, dst]")
        edges.append((str(e[0]), str(e[1])))
    g = OpGraph(
        model=str(doc["model"]),
        batch_size=int(doc["batch_size"]),
        mode=str(doc["mode"]),
        nodes=nodes,
        edges=edges,
        seq_len=None if doc.get("seq_len") is None else int(doc["seq_len"]),
        hidden_dim=None if doc.get("hidden_dim") is None else int(doc["hidden_dim"]),
        num_blocks=None if doc.get("num_blocks") is None else int(doc["num_blocks"]),
    )
    validate_graph(g)
    return g


def parse_graph(path, costs: FlopCosts = DEFAULT_COSTS) -> OpGraph:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise GraphError(f"{path}: {exc}") from exc
    try:
        return graph_from_dict(doc, costs)
    except GraphError as exc:
        raise GraphError(f"{path}: {exc}") from exc


def graph_to_dict(g: OpGraph) -> dict:
    return {
        "format": GRAPH_FORMAT,
        "version": g.version,
        "model": g.model,
        "batch_size": g.batch_size,
        "mode": g.mode,
        "seq_len": g.seq_len,
        "hidden_dim": g.hidden_dim,
        "num_blocks": g.num_blocks,
        "nodes": [
            {
                "id": n.id,
                "op": n.kernel.op_token,
                "dims": list(n.kernel.dims),
                "dtype": n.kernel.dtype,
                "pass": n.pass_kind,
                "fusion_group": n.fusion_group,
                "stage": n.stage,
                "block": n.block,
                "batch_dim": n.batch_dim,
            }
            for n in g.nodes
        ],
        "edges": [[s, d] for s, d in g.edges],
    }


def save_graph(g: OpGraph, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(graph_to_dict(g), fh, indent=2)
        fh.write("\n")


def _check_fusible(members: List[GraphNode]) -> None:
    kinds = [n.kernel.op for n in members]
    if all(k in (OpType.ELEMENTWISE, OpType.SOFTMAX, OpType.LAYERNORM) for k in kinds):
        return
    if kinds[0] in (OpType.BMM, OpType.FC) and all(
            k is OpType.ELEMENTWISE for k in kinds[1:]) and len(kinds) > 1:
        return
    raise FusionError(
        f"group {[n.id for n in members]} is not a vector chain or a "
        f"matrix op with trailing elementwise operators")


def fuse(g: OpGraph, groups: Sequence[Sequence[str]]) -> OpGraph:
    """Collapse each group of consecutive nodes into one fused node.

    Every group must be a path (each member feeds the next and nothing
    else reads the intermediate), and either a chain of vector ops or a
    matrix op with trailing elementwise operators. The fused node keeps
    the first member's id, op, dims and dtype; FLOPs accumulate and each
    intermediate tensor's bytes are subtracted twice from the byte sum.
    """
    taken: Set[str] = set()
    replacements: Dict[str, str] = {}  # member id -> fused id
    fused_nodes: Dict[str, GraphNode] = {}
    for gi, group in enumerate(groups):
        member_ids = [str(i) for i in group]
        if not member_ids:
            raise FusionError(f"group #{gi} is empty")
        for mid in member_ids:
            if mid not in g._by_id:
                raise FusionError(f"group #{gi}: unknown node {mid!r}")
            if mid in taken:
                raise FusionError(f"group #{gi}: node {mid!r} is in two groups")
            taken.add(mid)
        members = [g.node(mid) for mid in member_ids]
        _check_fusible(members)
        if len({n.pass_kind for n in members}) != 1:
            raise FusionError(f"group #{gi}: cannot fuse across forward/backward passes")
        flops = sum(n.kernel.flops_k for n in members)
        mem = sum(n.kernel.mem_k for n in members)
        for prev, nxt in zip(members[:-1], members[1:]):
            consumers = set(g.consumers(prev.id))
            if consumers != {nxt.id}:
                raise FusionError(
                    f"group #{gi}: {prev.id!r} must feed only {nxt.id!r} to fuse "
                    f"(its consumers are {sorted(consumers)})")
            mem -= 2.0 * prev.out_bytes()
        first = members[0]
        label = f"fused-{gi}"
        fused = GraphNode(
            id=first.id,
            kernel=with_fused_totals(first.kernel, flops_k=flops, mem_k=mem),
            pass_kind=first.pass_kind,
            fusion_group=label,
            stage=first.stage,
            block=first.block,
        )
        fused_nodes[first.id] = fused
        for mid in member_ids:
            replacements[mid] = first.id

    new_nodes: List[GraphNode] = []
    for n in g.nodes:
        if n.id in fused_nodes:
            new_nodes.append(fused_nodes[n.id])
        elif n.id not in replacements:
            new_nodes.append(replace(n))
    new_edges: List[Tuple[str, str]] = []
    seen = set()
    for s, d in g.edges:
        ns, nd = replacements.get(s, s), replacements.get(d, d)
        if ns == nd:
            continue  # edge internal to a fused group
        if (ns, nd) not in seen:
            seen.add((ns, nd))
            new_edges.append((ns, nd))
    out = OpGraph(model=g.model, batch_size=g.batch_size, mode=g.mode,
                  nodes=new_nodes, edges=new_edges, seq_len=g.seq_len,
                  hidden_dim=g.hidden_dim, num_blocks=g.num_blocks)
    out._by_id = {n.id: n for n in out.nodes}
    out.topo_order = _toposort([n.id for n in out.nodes], out.edges)
    return out


def greedy_fusion_groups(g: OpGraph) -> List[List[str]]:
    """Built-in fusion pass mirroring what graph compilers commonly do:
    attach a single trailing unary activation to a matrix op, then merge
    maximal linear chains of vector operators."""
    grouped: Set[str] = set()
    groups: List[List[str]] = []

    def sole_consumer(nid: str) -> Optional[GraphNode]:
        cons = g.consumers(nid)
        if len(cons) != 1:
            return None
        nxt = g.node(cons[0])
        if len(g.producers(nxt.id)) != 1:
            return None
        return nxt

    for node in g.nodes_in_topo_order():
        if node.id in grouped or node.kernel.op not in (OpType.BMM, OpType.FC):
            continue
        nxt = sole_consumer(node.id)
        if (nxt is not None and nxt.id not in grouped
                and nxt.kernel.op is OpType.ELEMENTWISE
                and nxt.kernel.kind in UNARY_KINDS
                and nxt.pass_kind == node.pass_kind):
            groups.append([node.id, nxt.id])
            grouped.update((node.id, nxt.id))

    vector_kinds = (OpType.ELEMENTWISE, OpType.SOFTMAX, OpType.LAYERNORM)
    for node in g.nodes_in_topo_order():
        if node.id in grouped or node.kernel.op not in vector_kinds:
            continue
        chain = [node.id]
        cur = node
        while True:
            nxt = sole_consumer(cur.id)
            if (nxt is None or nxt.id in grouped or nxt.kernel.op not in vector_kinds
                    or nxt.pass_kind != cur.pass_kind):
                break
            chain.append(nxt.id)
            cur = nxt
        if len(chain) > 1:
            groups.append(chain)
            grouped.update(chain)
    return groups
