"""Per-device graph prediction and report rendering.

Kernels execute sequentially on a device, so the device latency is the
plain sum of per-node latencies; the summation always runs in node-list
order so report totals are bit-for-bit reproducible. Operators without
a trained predictor class take the memory-bound fallback.

Reports render to CSV (machine output) and an aligned text table
(summary). An optional expected-latency file adds measured and
percentage-error columns; keys are node ids plus "total".
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional

from .catalog import GpuSpec
from .errors import GpucastError
from .graph import OpGraph
from .kernels import pct_error
from .predictor import WeightStore, predict_kernel
from .tiledb import TileDb


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class ReportRow:
    row_type: str            # node | rollup | total
    name: str
    op: str = ""
    dims: str = ""
    tile: str = ""
    num_tiles: Optional[int] = None
    num_waves: Optional[int] = None
    alpha: Optional[float] = None
    beta: Optional[float] = None
    utilization: Optional[float] = None
    count: Optional[int] = None
    latency_s: Optional[float] = None
    measured_s: Optional[float] = None
    pct_error: Optional[float] = None


REPORT_COLUMNS = ("row_type", "name", "op", "dims", "tile", "num_tiles", "num_waves",
                  "alpha", "beta", "utilization", "count", "latency_s",
                  "measured_s", "pct_error")


@dataclass
class LatencyReport:
    rows: List[ReportRow] = field(default_factory=list)
    total_latency: float = 0.0

    def node_rows(self) -> List[ReportRow]:
        return [r for r in self.rows if r.row_type == "node"]

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(",".join(REPORT_COLUMNS) + "\n")
        for row in self.rows:
            buf.write(",".join(_fmt(getattr(row, col)) for col in REPORT_COLUMNS) + "\n")
        return buf.getvalue()

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_csv())

    def format_table(self) -> str:
        headers = ["name", "op", "dims", "tile", "waves", "util", "latency_s",
                   "measured_s", "err_%"]
        lines = [headers]
        for row in self.rows:
            util = "" if row.utilization is None else f"{row.utilization:.4f}"
            lat = "" if row.latency_s is None else f"{row.latency_s:.6e}"
            meas = "" if row.measured_s is None else f"{row.measured_s:.6e}"
            err = "" if row.pct_error is None else f"{row.pct_error:.1f}"
            label = row.name if row.row_type == "node" else f"[{row.row_type}] {row.name}"
            lines.append([label, row.op, row.dims, row.tile,
                          "" if row.num_waves is None else str(row.num_waves),
                          util, lat, meas, err])
        widths = [max(len(line[i]) for line in lines) for i in range(len(headers))]
        out = []
        for line in lines:
            out.append("  ".join(cell.ljust(w) for cell, w in zip(line, widths)).rstrip())
        return "\n".join(out)

    def attach_expected(self, expected: Dict[str, float]) -> None:
        """Add measured latencies and percentage errors where keys match."""
        for row in self.rows:
            key = row.name if row.row_type != "total" else "total"
            if key in expected:
                row.measured_s = expected[key]
                if row.latency_s is not None:
                    row.pct_error = pct_error(row.latency_s, expected[key])


def load_expected(path) -> Dict[str, float]:
    """Expected-latency file: lines of key,measured_seconds."""
    out: Dict[str, float] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            if len(parts) != 2:
                raise GpucastError(f"{path}:{lineno}: expected key,seconds")
            try:
                out[parts[0].strip()] = float(parts[1])
            except ValueError as exc:
                raise GpucastError(f"{path}:{lineno}: {exc}") from exc
    return out


def predict_graph(g: OpGraph, gpu: GpuSpec, store: WeightStore,
                  tiledb: TileDb) -> LatencyReport:
    """Annotate every node with a latency and aggregate the device total."""
    report = LatencyReport()
    rollup: Dict[str, List[float]] = {}
    latencies: List[float] = []
    for node in g.nodes:
        k = node.kernel
        pred = predict_kernel(k, gpu, store, tiledb)
        node.predicted_latency = pred.latency
        latencies.append(pred.latency)
        op_label = k.op_token + (" (fused)" if node.fusion_group else "")
        row = ReportRow(
            row_type="node", name=node.id, op=op_label,
            dims="x".join(str(d) for d in k.dims),
            tile="x".join(str(t) for t in pred.tile),
            num_tiles=None if pred.plan is None else pred.plan.num_tiles,
            num_waves=None if pred.plan is None else pred.plan.num_waves,
            alpha=None if pred.coeffs is None else pred.coeffs.alpha,
            beta=None if pred.coeffs is None else pred.coeffs.beta,
            utilization=pred.util,
            latency_s=pred.latency,
        )
        report.rows.append(row)
        key = k.predictor_class or "other"
        rollup.setdefault(key, []).append(pred.latency)
    # Exactly-rounded sums: totals do not depend on node order.
    total = math.fsum(latencies)
    for key in sorted(rollup):
        vals = rollup[key]
        report.rows.append(ReportRow(row_type="rollup", name=key, count=len(vals),
                                     latency_s=math.fsum(vals)))
    report.rows.append(ReportRow(row_type="total", name="total", latency_s=total))
    report.total_latency = total
    return report
