"""Deterministic kernel math: FLOP/byte accounting, tiles, waves, roofline.

Everything in this module is a pure function of its inputs. The latency
model is:

    num_tiles  = prod(ceil(out_dim_i / tile_i))
    num_waves  = ceil(num_tiles / num_sm)
    roofline   = min(intensity * mem_bw, peak_flops)          # device-wide
    achieved   = roofline_share * utilization                 # share given to one tile
    latency    = num_waves * flops_tile / achieved

Each SM runs one tile at a time, so callers hand ``assemble_latency``
the per-SM share of the device roofline (roofline / num_sm). With
utilization <= 1 and uniform tiles this keeps every predicted latency
at or above flops_k / roofline for the whole kernel.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum
from typing import Optional, Sequence, Tuple

from .catalog import GpuSpec, select_peak_flops
from .errors import KernelSpecError

DTYPE_BYTES = {"fp32": 4, "fp16": 2}

TileShape = Tuple[int, ...]


class OpType(Enum):
    BMM = "bmm"
    FC = "fc"
    ELEMENTWISE = "elementwise"
    SOFTMAX = "softmax"
    LAYERNORM = "layernorm"
    OTHER = "other"


# Elementwise kinds and whether they read two operands or one.
BINARY_KINDS = ("add", "mul", "div")
UNARY_KINDS = ("relu", "gelu", "tanh")
ELEMENTWISE_KINDS = BINARY_KINDS + UNARY_KINDS

MATRIX_OPS = (OpType.BMM, OpType.FC)
VECTOR_OPS = (OpType.ELEMENTWISE, OpType.SOFTMAX, OpType.LAYERNORM)

# Operator classes that have their own trained utilization predictor.
PREDICTOR_CLASSES = ("bmm", "fc", "elementwise", "softmax", "layernorm")


@dataclass(frozen=True)
class FlopCosts:
    """Per-element FLOP constants for non-GEMM operators.

    These are documented conventions, not measured facts: transcendental
    activations are charged 8 FLOPs/element, softmax 5 (max, subtract,
    exp, sum, divide amortized), layernorm 8. Override to taste; the
    constants only shift arithmetic intensity, not the model structure.
    """

    elementwise_simple: float = 1.0
    elementwise_transcendental: float = 8.0
    softmax: float = 5.0
    layernorm: float = 8.0

    def elementwise(self, kind: str) -> float:
        if kind in ("gelu", "tanh"):
            return self.elementwise_transcendental
        return self.elementwise_simple


DEFAULT_COSTS = FlopCosts()


@dataclass(frozen=True)
class KernelDesc:
    """One tensor-operator instance with its derived FLOP and byte counts.

    dims by op type: BMM [B, M, K, N]; FC [B, In, Out]; elementwise,
    softmax and layernorm [rows, cols]; OTHER [total elements moved].
    flops_k / mem_k normally follow from (op, dims, dtype) but fused
    nodes carry accumulated overrides.
    """

    op: OpType
    dims: Tuple[int, ...]
    dtype: str
    flops_k: float
    mem_k: float
    out_dims: Tuple[int, ...]
    kind: Optional[str] = None  # elementwise kind, or the OTHER op's name

    @property
    def op_token(self) -> str:
        if self.op is OpType.ELEMENTWISE:
            return self.kind
        if self.op is OpType.OTHER:
            return f"other:{self.kind}"
        return self.op.value

    @property
    def predictor_class(self) -> Optional[str]:
        if self.op is OpType.OTHER:
            return None
        return self.op.value


def parse_op_token(token: str) -> Tuple[OpType, Optional[str]]:
    """Map a file-format op token to (OpType, kind)."""
    token = token.strip().lower()
    if token == "bmm":
        return OpType.BMM, None
    if token == "fc":
        return OpType.FC, None
    if token in ELEMENTWISE_KINDS:
        return OpType.ELEMENTWISE, token
    if token == "softmax":
        return OpType.SOFTMAX, None
    if token == "layernorm":
        return OpType.LAYERNORM, None
    if token.startswith("other:"):
        name = token.split(":", 1)[1]
        return OpType.OTHER, name or "unknown"
    if token == "other":
        return OpType.OTHER, "unknown"
    raise KernelSpecError(f"unknown operator token {token!r}")


_RANK = {OpType.BMM: 4, OpType.FC: 3, OpType.ELEMENTWISE: 2, OpType.SOFTMAX: 2,
         OpType.LAYERNORM: 2, OpType.OTHER: 1}


def describe_kernel(op_token: str, dims: Sequence[int], dtype: str = "fp32",
                    costs: FlopCosts = DEFAULT_COSTS) -> KernelDesc:
    """Build a KernelDesc with its FLOP and memory-traffic accounting.

    Memory traffic counts each operand and result tensor once (ideal
    caching inside a kernel). fp16 halves bytes per element.
    """
    op, kind = parse_op_token(op_token)
    dims = tuple(int(d) for d in dims)
    if dtype not in DTYPE_BYTES:
        raise KernelSpecError(f"unknown dtype {dtype!r}; expected one of {sorted(DTYPE_BYTES)}")
    if len(dims) != _RANK[op]:
        raise KernelSpecError(
            f"{op_token}: expected {_RANK[op]} dims, got {len(dims)} ({list(dims)})")
    if any(d < 1 for d in dims):
        raise KernelSpecError(f"{op_token}: dims must be positive, got {list(dims)}")
    b = DTYPE_BYTES[dtype]

    if op is OpType.BMM:
        bb, m, k, n = dims
        flops = 2.0 * bb * m * k * n
        mem = (bb * m * k + bb * k * n + bb * m * n) * b
        out = (bb, m, n)
    elif op is OpType.FC:
        bb, fin, fout = dims
        flops = 2.0 * bb * fin * fout + bb * fout  # bias add
        mem = (bb * fin + fin * fout + fout + bb * fout) * b  # x, W, bias, y
        out = (bb, fout)
    elif op is OpType.ELEMENTWISE:
        r, c = dims
        n_el = r * c
        n_tensors = 3 if kind in BINARY_KINDS else 2
        flops = costs.elementwise(kind) * n_el
        mem = n_tensors * n_el * b
        out = (r, c)
    elif op is OpType.SOFTMAX:
        r, c = dims
        flops = costs.softmax * r * c
        mem = 2 * r * c * b
        out = (r, c)
    elif op is OpType.LAYERNORM:
        r, c = dims
        flops = costs.layernorm * r * c
        mem = (2 * r * c + 2 * c) * b  # x, y, plus scale and shift vectors
        out = (r, c)
    else:  # OTHER: dims = [total elements moved], no useful FLOP count
        (n_el,) = dims
        flops = 0.0
        mem = n_el * b
        out = (n_el,)
    return KernelDesc(op=op, dims=dims, dtype=dtype, flops_k=flops, mem_k=float(mem),
                      out_dims=out, kind=kind)


def with_fused_totals(k: KernelDesc, flops_k: float, mem_k: float) -> KernelDesc:
    """Copy a descriptor with accumulated FLOP/byte totals (fusion)."""
    return replace(k, flops_k=flops_k, mem_k=mem_k)


def next_pow2(x: int) -> int:
    if x < 1:
        raise KernelSpecError(f"next_pow2 needs a positive value, got {x}")
    return 1 << (x - 1).bit_length()


@dataclass(frozen=True)
class WavePlan:
    """Tile/wave decomposition of one kernel on one GPU."""

    num_tiles: int
    num_waves: int
    flops_tile: float
    mem_tile: float


def plan_tiles(k: KernelDesc, tile: TileShape, gpu: GpuSpec) -> WavePlan:
    """Decompose a kernel's output into tiles and waves.

    Edge tiles are modeled as full tiles: flops_tile is the uniform
    average flops_k / num_tiles. Tile byte traffic follows the GEMM
    dataflow (A-panel + B-panel + C-tile) for matrix ops and a
    proportional share of mem_k for vector ops.
    """
    tile = tuple(int(t) for t in tile)
    if len(tile) != len(k.out_dims):
        raise KernelSpecError(
            f"tile rank {len(tile)} does not match output rank {len(k.out_dims)}")
    for t, x in zip(tile, k.out_dims):
        if t < 1:
            raise KernelSpecError(f"tile dims must be >= 1, got {tile}")
        if t > next_pow2(x):
            raise KernelSpecError(
                f"tile dim {t} exceeds next_pow2({x}) = {next_pow2(x)}")
    num_tiles = 1
    for x, t in zip(k.out_dims, tile):
        num_tiles *= -(-x // t)
    num_waves = -(-num_tiles // gpu.num_sm)
    b = DTYPE_BYTES[k.dtype]

    if k.op is OpType.BMM:
        _, _, kk, _ = k.dims
        tb, tm, tn = tile
        mem_tile = tb * (tm * kk + kk * tn + tm * tn) * b
    elif k.op is OpType.FC:
        _, fin, _ = k.dims
        tb, tn = tile
        mem_tile = (tb * fin + fin * tn + tb * tn) * b
    else:
        mem_tile = k.mem_k / num_tiles
    return WavePlan(num_tiles=num_tiles, num_waves=num_waves,
                    flops_tile=k.flops_k / num_tiles, mem_tile=float(mem_tile))


def arithmetic_intensity(k: KernelDesc) -> float:
    if k.mem_k <= 0:
        raise KernelSpecError("mem_k must be positive for intensity")
    return k.flops_k / k.mem_k


def roofline_bw(k: KernelDesc, gpu: GpuSpec) -> float:
    """Device-wide throughput ceiling: min(intensity * mem_bw, peak FLOPS)."""
    intensity = arithmetic_intensity(k)
    peak = select_peak_flops(gpu, k.dtype, matrix_op=k.op in MATRIX_OPS)
    return min(intensity * gpu.mem_bw, peak)


def assemble_latency(plan: WavePlan, roofline: float, util: float) -> float:
    """Latency from a wave plan, a roofline bandwidth, and a utilization.

    achieved = roofline * util; per-tile latency = flops_tile / achieved;
    total = per-tile latency * num_waves. The roofline argument is
    whatever bandwidth one tile may draw on; pass the per-SM share
    (device roofline / num_sm) when assembling whole-kernel latencies.
    """
    if not 0.0 < util <= 1.0:
        raise KernelSpecError(f"utilization must be in (0, 1], got {util}")
    achieved = roofline * util
    per_tile = plan.flops_tile / achieved
    return per_tile * plan.num_waves


def memory_bound_latency(k: KernelDesc, gpu: GpuSpec) -> float:
    """Fallback estimate for untrained operators: bytes / memory bandwidth."""
    return k.mem_k / gpu.mem_bw


def kernel_latency(k: KernelDesc, tile: TileShape, gpu: GpuSpec, util: float) -> float:
    """Whole-kernel latency given a utilization in (0, 1]."""
    plan = plan_tiles(k, tile, gpu)
    return assemble_latency(plan, roofline_bw(k, gpu) / gpu.num_sm, util)


def brute_force_num_tiles(out_dims: Sequence[int], tile: Sequence[int]) -> int:
    """Count tiles by enumerating tile origins; oracle for plan_tiles."""
    count = 1
    for x, t in zip(out_dims, tile):
        count *= len(range(0, x, t))
    return count


def pct_error(predicted: float, measured: float) -> float:
    """Absolute percentage error against a measured value."""
    if measured == 0:
        raise ValueError("measured latency must be nonzero")
    return abs(predicted - measured) / abs(measured) * 100.0


def smape(predicted, measured) -> float:
    """Symmetric mean absolute percentage error of paired sequences."""
    if len(predicted) != len(measured) or not len(predicted):
        raise ValueError("smape needs equal-length, nonempty sequences")
    total = 0.0
    for p, m in zip(predicted, measured):
        total += 2.0 * abs(p - m) / (abs(p) + abs(m))
    return total / len(predicted)


def ceil_div(a: int, b: int) -> int:
    return -(-a // b)
