"""Single-server distributed latency composition.

Combines per-device graph predictions with closed-form network-operator
estimates for the three parallelization strategies, applied one at a
time (never composed):

  data      per-device batch = global / width; training adds one ring
            allreduce over the full gradient volume.
  tensor    Megatron-style split: matrix-op dims divided by width, two
            activation allreduces per transformer block per pass.
  pipeline  stages run the schedule with (width - 1) bubbles per
            direction; span = (microbatches + width - 1) * max stage
            latency per direction, plus inter-stage activation
            send/recv per microbatch boundary.

Ring allreduce uses the bandwidth-optimal 2(p-1)/p volume factor. Link
utilization is a plain input (default 0.75) scaled onto the published
per-pair link bandwidth.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional

from .catalog import GpuSpec
from .engine import LatencyReport, ReportRow, predict_graph
from .errors import DistributedError
from .graph import GraphNode, OpGraph, validate_graph
from .kernels import DTYPE_BYTES, OpType, ceil_div, describe_kernel
from .predictor import WeightStore
from .tiledb import TileDb

STRATEGIES = ("data", "tensor", "pipeline")

DEFAULT_LINK_UTILIZATION = 0.75


@dataclass(frozen=True)
class ServerSpec:
    """One multi-GPU server with all-to-all links of equal bandwidth."""

    gpu: GpuSpec
    num_gpus: int
    link_bw: float  # bytes/s, bidirectional, per GPU pair
    link_utilization: float = DEFAULT_LINK_UTILIZATION

    def __post_init__(self):
        if self.num_gpus < 1:
            raise DistributedError("num_gpus must be >= 1")
        if self.link_bw <= 0:
            raise DistributedError("link_bw must be positive")
        if not 0.0 < self.link_utilization <= 1.0:
            raise DistributedError("link_utilization must be in (0, 1]")

    @property
    def effective_bw(self) -> float:
        return self.link_bw * self.link_utilization


@dataclass(frozen=True)
class ParallelPlan:
    strategy: str
    width: int
    global_batch: int
    microbatches: int = 1

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise DistributedError(f"strategy must be one of {STRATEGIES}")
        if self.width < 1:
            raise DistributedError("width must be >= 1")
        if self.microbatches < 1:
            raise DistributedError("microbatches must be >= 1")
        if self.global_batch < 1:
            raise DistributedError("global_batch must be >= 1")


def allreduce_latency(nbytes: float, server: ServerSpec, width: int) -> float:
    """Ring allreduce: each rank moves 2(p-1)/p of the payload."""
    if width < 2:
        raise DistributedError("allreduce needs width >= 2")
    if nbytes <= 0:
        raise DistributedError("allreduce payload must be positive")
    return 2.0 * (width - 1) / width * nbytes / server.effective_bw


def sendrecv_latency(nbytes: float, server: ServerSpec) -> float:
    """Peer-to-peer transfer over one link."""
    return nbytes / server.effective_bw


def _rescale_node(node: GraphNode, old_batch: int, new_batch: int) -> GraphNode:
    """Scale a node's batch coordinate by new_batch/old_batch (exactly)."""
    k = node.kernel
    axis = node.batch_dim
    scaled = k.dims[axis] * new_batch
    if scaled % old_batch:
        raise DistributedError(
            f"node {node.id!r}: batch dim {k.dims[axis]} cannot be scaled by "
            f"{new_batch}/{old_batch}")
    new_dims = k.dims[:axis] + (scaled // old_batch,) + k.dims[axis + 1:]
    fresh_old = describe_kernel(k.op_token, k.dims, k.dtype)
    fresh_new = describe_kernel(k.op_token, new_dims, k.dtype)
    if k.flops_k != fresh_old.flops_k or k.mem_k != fresh_old.mem_k:
        # Fused node: totals are accumulated, so scale them by the exact
        # batch ratio instead of recomputing from dims.
        ratio = new_dims[axis] / k.dims[axis]
        fresh_new = replace(fresh_new, flops_k=k.flops_k * ratio, mem_k=k.mem_k * ratio)
    return replace(node, kernel=fresh_new, predicted_latency=None)


def scale_graph(g: OpGraph, new_batch: int) -> OpGraph:
    """Same topology at a different batch size."""
    if new_batch == g.batch_size:
        nodes = [replace(n) for n in g.nodes]
    else:
        nodes = [_rescale_node(n, g.batch_size, new_batch) for n in g.nodes]
    out = OpGraph(model=g.model, batch_size=new_batch, mode=g.mode, nodes=nodes,
                  edges=list(g.edges), seq_len=g.seq_len, hidden_dim=g.hidden_dim,
                  num_blocks=g.num_blocks)
    validate_graph(out)
    return out


def gradient_bytes(g: OpGraph) -> float:
    """Trainable-parameter bytes, counted from forward nodes.

    Every forward FC node contributes its weight and bias; every forward
    layernorm its scale and shift. Weight sharing is not detected.
    """
    total = 0.0
    for node in g.nodes:
        if node.pass_kind != "fwd":
            continue
        k = node.kernel
        b = DTYPE_BYTES[k.dtype]
        if k.op is OpType.FC:
            _, fin, fout = k.dims
            total += (fin * fout + fout) * b
        elif k.op is OpType.LAYERNORM:
            total += 2 * k.dims[1] * b
    return total


def _split_for_tensor(node: GraphNode, width: int) -> GraphNode:
    """Megatron-style division of matrix-op work across ranks.

    BMM nodes split the batch (head) dim; FC nodes split the larger of
    in/out features (column- or row-parallel), padding indivisible dims
    up via ceil.
    """
    k = node.kernel
    if k.op is OpType.BMM:
        new_dims = (ceil_div(k.dims[0], width),) + k.dims[1:]
    elif k.op is OpType.FC:
        bb, fin, fout = k.dims
        if fout >= fin:
            new_dims = (bb, fin, ceil_div(fout, width))
        else:
            new_dims = (bb, ceil_div(fin, width), fout)
    else:
        return replace(node, predicted_latency=None)
    return replace(node, kernel=describe_kernel(k.op_token, new_dims, k.dtype),
                   predicted_latency=None)


def _comm_dtype_bytes(g: OpGraph) -> int:
    for node in g.nodes:
        if node.kernel.op is OpType.FC:
            return DTYPE_BYTES[node.kernel.dtype]
    return DTYPE_BYTES["fp32"]


@dataclass
class DistributedReport:
    """Iteration-level breakdown: compute, collectives, stages."""

    strategy: str
    width: int
    iteration_latency: float
    rows: List[ReportRow] = field(default_factory=list)
    device_report: Optional[LatencyReport] = None
    compute_span: float = 0.0
    comm_total: float = 0.0

    def to_csv(self) -> str:
        out = LatencyReport(rows=self.rows, total_latency=self.iteration_latency)
        return out.to_csv()

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_csv())

    def format_table(self) -> str:
        return LatencyReport(rows=self.rows, total_latency=self.iteration_latency).format_table()

    def attach_expected(self, expected: Dict[str, float]) -> None:
        LatencyReport(rows=self.rows).attach_expected(expected)


def _estimate_data(g, plan, server, store, tiledb) -> DistributedReport:
    if plan.global_batch % plan.width:
        raise DistributedError(
            f"global batch {plan.global_batch} not divisible by width {plan.width}")
    per_device = plan.global_batch // plan.width
    local = scale_graph(g, per_device)
    device = predict_graph(local, server.gpu, store, tiledb)
    rows = [ReportRow(row_type="stage", name="device", count=plan.width,
                      latency_s=device.total_latency)]
    comm = 0.0
    if g.mode == "training" and plan.width >= 2:
        nbytes = gradient_bytes(local)
        comm = allreduce_latency(nbytes, server, plan.width)
        rows.append(ReportRow(row_type="collective", name="grad-allreduce",
                              op="allreduce", count=1, latency_s=comm))
    total = device.total_latency + comm
    rows.append(ReportRow(row_type="total", name="iteration", latency_s=total))
    return DistributedReport(strategy="data", width=plan.width, iteration_latency=total,
                             rows=rows, device_report=device,
                             compute_span=device.total_latency, comm_total=comm)


def _estimate_tensor(g, plan, server, store, tiledb) -> DistributedReport:
    scaled = scale_graph(g, plan.global_batch)
    if plan.width > 1:
        if not (g.num_blocks and g.hidden_dim and g.seq_len):
            raise DistributedError(
                "tensor parallelism needs transformer metadata "
                "(num_blocks, hidden_dim, seq_len) in the graph file")
        nodes = [_split_for_tensor(n, plan.width) for n in scaled.nodes]
        local = OpGraph(model=g.model, batch_size=scaled.batch_size, mode=g.mode,
                        nodes=nodes, edges=list(scaled.edges), seq_len=g.seq_len,
                        hidden_dim=g.hidden_dim, num_blocks=g.num_blocks)
        local._by_id = {n.id: n for n in nodes}
        local.topo_order = list(scaled.topo_order)
    else:
        local = scaled
    device = predict_graph(local, server.gpu, store, tiledb)
    rows = [ReportRow(row_type="stage", name="device", count=plan.width,
                      latency_s=device.total_latency)]
    comm = 0.0
    if plan.width >= 2:
        passes = 2 if g.mode == "training" else 1
        n_allreduce = 2 * g.num_blocks * passes
        nbytes = plan.global_batch * g.seq_len * g.hidden_dim * _comm_dtype_bytes(g)
        per_op = allreduce_latency(nbytes, server, plan.width)
        comm = n_allreduce * per_op
        rows.append(ReportRow(row_type="collective", name="activation-allreduce",
                              op="allreduce", count=n_allreduce, latency_s=comm))
    total = device.total_latency + comm
    rows.append(ReportRow(row_type="total", name="iteration", latency_s=total))
    return DistributedReport(strategy="tensor", width=plan.width,
                             iteration_latency=total, rows=rows, device_report=device,
                             compute_span=device.total_latency, comm_total=comm)


def _assign_stages(g: OpGraph, width: int) -> Dict[str, int]:
    """Map node id -> stage.

    Preference order: explicit per-node stage annotations; block
    annotations spread evenly over stages; for inference graphs only, a
    latency-balanced contiguous split of the topological order.
    """
    nodes = g.nodes_in_topo_order()
    if all(n.stage is not None for n in nodes):
        for n in nodes:
            if not 0 <= n.stage < width:
                raise DistributedError(f"node {n.id!r}: stage {n.stage} outside 0..{width - 1}")
        return {n.id: n.stage for n in nodes}
    if g.num_blocks and any(n.block is not None for n in nodes):
        blocks_per_stage = ceil_div(g.num_blocks, width)
        assign: Dict[str, int] = {}
        current = 0
        for n in nodes:
            if n.block is not None:
                if not 0 <= n.block < g.num_blocks:
                    raise DistributedError(
                        f"node {n.id!r}: block {n.block} outside 0..{g.num_blocks - 1}")
                current = min(n.block // blocks_per_stage, width - 1)
            assign[n.id] = current
        return assign
    if g.mode == "training":
        raise DistributedError(
            "pipeline parallelism on training graphs needs stage or block "
            "annotations to pair forward and backward kernels")
    # Latency-balanced contiguous split over predicted per-node latencies.
    lats = [n.predicted_latency or 0.0 for n in nodes]
    total = sum(lats) or 1.0
    assign = {}
    acc = 0.0
    for n, lat in zip(nodes, lats):
        stage = min(int(acc / total * width), width - 1)
        assign[n.id] = stage
        acc += lat
    return assign


def _estimate_pipeline(g, plan, server, store, tiledb) -> DistributedReport:
    if plan.global_batch % plan.microbatches:
        raise DistributedError(
            f"global batch {plan.global_batch} not divisible into "
            f"{plan.microbatches} microbatches")
    micro = plan.global_batch // plan.microbatches
    local = scale_graph(g, micro)
    device = predict_graph(local, server.gpu, store, tiledb)
    m, p = plan.microbatches, plan.width
    if p == 1 and m == 1:
        # Degenerate plan: one stage, one microbatch == plain device run.
        rows = [ReportRow(row_type="stage", name="stage-0", count=1,
                          latency_s=device.total_latency),
                ReportRow(row_type="total", name="iteration",
                          latency_s=device.total_latency)]
        return DistributedReport(strategy="pipeline", width=1,
                                 iteration_latency=device.total_latency, rows=rows,
                                 device_report=device,
                                 compute_span=device.total_latency, comm_total=0.0)

    stage_of = _assign_stages(local, p)
    fwd_parts: List[List[float]] = [[] for _ in range(p)]
    bwd_parts: List[List[float]] = [[] for _ in range(p)]
    for node in local.nodes:
        part = fwd_parts if node.pass_kind == "fwd" else bwd_parts
        part[stage_of[node.id]].append(node.predicted_latency)
    fwd = [math.fsum(part) for part in fwd_parts]
    bwd = [math.fsum(part) for part in bwd_parts]
    training = g.mode == "training"
    span = (m + p - 1) * max(fwd)
    if training:
        span += (m + p - 1) * max(bwd)

    boundary_bytes = [0.0] * max(p - 1, 0)
    for s, d in local.edges:
        src, dst = local.node(s), local.node(d)
        if src.pass_kind != "fwd" or dst.pass_kind != "fwd":
            continue
        if stage_of[s] < stage_of[d]:
            boundary_bytes[stage_of[d] - 1] += src.out_bytes()

    rows = []
    for stage in range(p):
        rows.append(ReportRow(row_type="stage", name=f"stage-{stage}", count=m,
                              latency_s=fwd[stage] + (bwd[stage] if training else 0.0)))
    comm = 0.0
    for b, nbytes in enumerate(boundary_bytes):
        if nbytes <= 0:
            continue
        per_micro = sendrecv_latency(nbytes, server)
        count = m * (2 if training else 1)
        lat = count * per_micro
        comm += lat
        rows.append(ReportRow(row_type="collective", name=f"sendrecv-{b}-{b + 1}",
                              op="sendrecv", count=count, latency_s=lat))
    total = span + comm
    rows.append(ReportRow(row_type="total", name="iteration", latency_s=total))
    return DistributedReport(strategy="pipeline", width=p, iteration_latency=total,
                             rows=rows, device_report=device, compute_span=span,
                             comm_total=comm)


def estimate_parallel(g: OpGraph, plan: ParallelPlan, server: ServerSpec,
                      store: WeightStore, tiledb: TileDb) -> DistributedReport:
    """Iteration latency of one strategy on one server."""
    if plan.width > server.num_gpus:
        raise DistributedError(
            f"plan width {plan.width} exceeds server size {server.num_gpus}")
    if plan.strategy == "data":
        return _estimate_data(g, plan, server, store, tiledb)
    if plan.strategy == "tensor":
        return _estimate_tensor(g, plan, server, store, tiledb)
    return _estimate_pipeline(g, plan, server, store, tiledb)
