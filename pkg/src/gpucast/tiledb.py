"""Tile-size database with nearest-match lookup.

Maps (op token, operator dims, GPU name) to the output tile a vendor
GEMM/vector library would pick for that kernel. Records normally come
from profiler traces; when nothing matches, a documented heuristic
default stands in.

Record file format, one record per line:

    op,dims,gpu,tile[,source]
    bmm,1-4-4-4,V100,1-2-2,measured

dims and tile are dash-separated integers; source is "measured" or
"heuristic" (default "measured"). Later duplicates of the same
(op, dims, gpu) key replace earlier ones.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Tuple

from .catalog import GpuSpec
from .errors import KernelSpecError, TileDbError
from .kernels import KernelDesc, OpType, TileShape, describe_kernel, next_pow2

Key = Tuple[str, Tuple[int, ...], str]


@dataclass(frozen=True)
class TileRecord:
    op_token: str
    dims: Tuple[int, ...]
    gpu_name: str
    tile: TileShape
    source: str = "measured"

    @property
    def key(self) -> Key:
        return (self.op_token, self.dims, self.gpu_name)


def heuristic_tile(k: KernelDesc) -> TileShape:
    """Library-free default tile.

    GEMM-family outputs get a square 128 tile (the center of the 32-256
    range GEMM libraries use), clamped to next_pow2 of each output dim;
    batch dims are tiled at 1. Vector outputs get one row by
    min(cols, 1024) columns.
    """
    if k.op is OpType.BMM:
        _, m, n = k.out_dims
        return (1, min(128, next_pow2(m)), min(128, next_pow2(n)))
    if k.op is OpType.FC:
        bb, fout = k.out_dims
        return (min(128, next_pow2(bb)), min(128, next_pow2(fout)))
    if k.op is OpType.OTHER:
        return (k.out_dims[0],)
    rows, cols = k.out_dims
    del rows
    return (1, min(cols, 1024))


def _log2_distance(a: Tuple[int, ...], b: Tuple[int, ...]) -> float:
    return sum(abs(math.log2(x) - math.log2(y)) for x, y in zip(a, b))


class TileDb:
    """In-memory tile database; immutable once ingestion is done."""

    def __init__(self):
        self._records: Dict[Key, TileRecord] = {}

    def __len__(self) -> int:
        return len(self._records)

    def add(self, record: TileRecord) -> None:
        self._records[record.key] = record

    def ingest_lines(self, lines: Iterable[str], origin: str = "<memory>") -> int:
        """Merge record lines; returns the number ingested."""
        count = 0
        for lineno, raw in enumerate(lines, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.split(",")
            if len(fields) not in (4, 5):
                raise TileDbError(f"{origin}:{lineno}: expected 4 or 5 fields, got {len(fields)}")
            op_token, dims_s, gpu_name, tile_s = fields[:4]
            source = fields[4].strip() if len(fields) == 5 else "measured"
            if source not in ("measured", "heuristic"):
                raise TileDbError(f"{origin}:{lineno}: bad source {source!r}")
            try:
                op_token = op_token.strip().lower()
                dims = tuple(int(x) for x in dims_s.strip().split("-"))
                tile = tuple(int(x) for x in tile_s.strip().split("-"))
                desc = describe_kernel(op_token, dims)
            except (ValueError, KernelSpecError) as exc:
                raise TileDbError(f"{origin}:{lineno}: {exc}") from exc
            if len(tile) != len(desc.out_dims):
                raise TileDbError(
                    f"{origin}:{lineno}: tile rank {len(tile)} does not match "
                    f"output rank {len(desc.out_dims)} of {op_token} {list(dims)}")
            if any(t < 1 for t in tile) or any(
                    t > next_pow2(x) for t, x in zip(tile, desc.out_dims)):
                raise TileDbError(f"{origin}:{lineno}: tile {list(tile)} invalid for "
                                  f"output {list(desc.out_dims)}")
            self.add(TileRecord(op_token, dims, gpu_name.strip(), tile, source))
            count += 1
        return count

    def ingest(self, path) -> int:
        with open(path, "r", encoding="utf-8") as fh:
            return self.ingest_lines(fh, origin=str(path))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for rec in sorted(self._records.values(), key=lambda r: r.key):
                dims = "-".join(str(d) for d in rec.dims)
                tile = "-".join(str(t) for t in rec.tile)
                fh.write(f"{rec.op_token},{dims},{rec.gpu_name},{tile},{rec.source}\n")

    @classmethod
    def load(cls, path) -> "TileDb":
        db = cls()
        db.ingest(path)
        return db

    def _nearest(self, op_token: str, dims: Tuple[int, ...],
                 gpu_name: Optional[str]) -> Optional[TileRecord]:
        best: Optional[Tuple[float, Key]] = None
        for key, rec in self._records.items():
            if rec.op_token != op_token or len(rec.dims) != len(dims):
                continue
            if gpu_name is not None and rec.gpu_name != gpu_name:
                continue
            cand = (_log2_distance(rec.dims, dims), key)
            # Ties break toward the lexicographically smaller key.
            if best is None or cand < best:
                best = cand
        return self._records[best[1]] if best else None

    def lookup(self, op_token: str, dims: Iterable[int], gpu: GpuSpec) -> TileShape:
        """Resolve a tile for (op, dims, gpu); never fails.

        Order: exact record, nearest same-op record on the same GPU
        (L1 distance between log2 dims, mismatched ranks excluded),
        nearest same-op record on any GPU, heuristic default.
        """
        op_token = op_token.strip().lower()
        dims = tuple(int(d) for d in dims)
        desc = describe_kernel(op_token, dims)
        exact = self._records.get((op_token, dims, gpu.name))
        if exact is not None:
            return exact.tile
        rec = self._nearest(op_token, dims, gpu.name)
        if rec is None:
            rec = self._nearest(op_token, dims, None)
        if rec is not None:
            # A neighbor's tile can overhang a smaller query output; clamp
            # so the result is always a valid tile for this kernel.
            return tuple(min(t, next_pow2(x)) for t, x in zip(rec.tile, desc.out_dims))
        return heuristic_tile(desc)

    def records(self) -> List[TileRecord]:
        return sorted(self._records.values(), key=lambda r: r.key)
