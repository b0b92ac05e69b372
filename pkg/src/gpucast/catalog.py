"""GPU hardware catalog.

Devices are described only by published datasheet numbers: peak FLOPS
per numeric type, memory size and bandwidth, SM count, and L2 size.
This module is the sole source of hardware knowledge for the rest of
the package; nothing here ever queries live hardware.

Catalog files are YAML lists, one entry per GPU. Numeric fields accept
either a plain number (base SI units: FLOP/s, bytes, bytes/s) or a
human-readable string with an explicit decimal unit, e.g. "66.9 TFLOPS",
"3430 GB/s", "80 GB". Decimal prefixes throughout: 1 GB = 1e9 bytes.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from importlib import resources
from typing import Dict, List, Union

import yaml

from .errors import CatalogError, UnknownGpuError

# Decimal SI prefixes; datasheets quote decimal units.
_PREFIX = {"": 1.0, "K": 1e3, "M": 1e6, "G": 1e9, "T": 1e12, "P": 1e15}

ENV_CATALOG = "GPUCAST_CATALOG"


def parse_quantity(value: Union[int, float, str], field_name: str = "") -> float:
    """Parse a catalog quantity into base SI units.

    Accepts plain numbers (already in base units) or strings like
    "66.9 TFLOPS", "900 GB/s", "6 MB", "40e9". Unit suffixes are the
    decimal prefix plus FLOPS, B, or B/s; the suffix only scales, the
    dimension is fixed by the field.
    """
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if not isinstance(value, str):
        raise CatalogError(f"field {field_name!r}: expected number or unit string, got {value!r}")
    text = value.strip()
    # Split trailing unit token off the number.
    idx = len(text)
    while idx > 0 and not (text[idx - 1].isdigit() or text[idx - 1] == "."):
        idx -= 1
    num_part, unit_part = text[:idx].strip(), text[idx:].strip()
    try:
        number = float(num_part)
    except ValueError:
        raise CatalogError(f"field {field_name!r}: cannot parse number in {value!r}") from None
    if not unit_part:
        return number
    unit = unit_part.replace("/s", "").replace("FLOPS", "").replace("FLOP", "").replace("B", "")
    if unit not in _PREFIX:
        raise CatalogError(f"field {field_name!r}: unknown unit {unit_part!r} in {value!r}")
    return number * _PREFIX[unit]


@dataclass(frozen=True)
class GpuSpec:
    """Published hardware features of one GPU.

    peak_flops maps a numeric-type key ("fp32", "fp16", and "-matrix"
    variants for dedicated matrix units) to FLOP/s. All byte quantities
    are plain bytes, bandwidth is bytes/s.
    """

    name: str
    vendor: str
    peak_flops: Dict[str, float]
    mem_size: float
    mem_bw: float
    num_sm: int
    l2_size: float
    year: int = 0

    def __post_init__(self):
        if "fp32" not in self.peak_flops:
            raise CatalogError(f"GPU {self.name!r}: peak_flops must contain an fp32 entry")
        for key, val in self.peak_flops.items():
            if val <= 0:
                raise CatalogError(f"GPU {self.name!r}: peak_flops[{key}] must be positive")
        for fname in ("mem_size", "mem_bw", "l2_size"):
            if getattr(self, fname) <= 0:
                raise CatalogError(f"GPU {self.name!r}: {fname} must be positive")
        if self.num_sm < 1:
            raise CatalogError(f"GPU {self.name!r}: num_sm must be >= 1")


@dataclass(frozen=True)
class PerSmSpec:
    """Device resources divided evenly across SMs.

    Tiles are dispatched one per SM, so per-tile features are computed
    against the per-SM share of every resource.
    """

    peak_flops_per_sm: Dict[str, float]
    mem_bw_per_sm: float
    l2_per_sm: float
    mem_per_sm: float


def per_sm(spec: GpuSpec) -> PerSmSpec:
    """Divide each device resource by the SM count."""
    n = spec.num_sm
    return PerSmSpec(
        peak_flops_per_sm={k: v / n for k, v in spec.peak_flops.items()},
        mem_bw_per_sm=spec.mem_bw / n,
        l2_per_sm=spec.l2_size / n,
        mem_per_sm=spec.mem_size / n,
    )


def select_peak_flops(spec: GpuSpec, dtype: str, matrix_op: bool) -> float:
    """Pick the peak-FLOPS entry for a kernel.

    Matrix kernels may use a dedicated matrix datapath when the catalog
    lists one ("<dtype>-matrix"); the higher available peak wins. Falls
    back to the fp32 entry when the requested dtype is not listed.
    """
    candidates = [dtype]
    if matrix_op:
        candidates.append(f"{dtype}-matrix")
    present = [spec.peak_flops[c] for c in candidates if c in spec.peak_flops]
    if not present:
        return spec.peak_flops["fp32"]
    return max(present)


_REQUIRED = ("name", "vendor", "peak_flops", "mem_size", "mem_bw", "num_sm", "l2_size")


def _spec_from_entry(entry: dict, index: int) -> GpuSpec:
    if not isinstance(entry, dict):
        raise CatalogError(f"catalog entry #{index}: expected a mapping, got {type(entry).__name__}")
    missing = [k for k in _REQUIRED if k not in entry]
    if missing:
        raise CatalogError(f"catalog entry #{index}: missing fields {missing}")
    raw_peaks = entry["peak_flops"]
    if not isinstance(raw_peaks, dict):
        raise CatalogError(f"catalog entry #{index} ({entry.get('name')}): peak_flops must be a mapping")
    peaks = {str(k): parse_quantity(v, f"peak_flops.{k}") for k, v in raw_peaks.items()}
    num_sm = entry["num_sm"]
    if not isinstance(num_sm, int) or isinstance(num_sm, bool):
        raise CatalogError(f"catalog entry #{index} ({entry.get('name')}): num_sm must be an integer")
    return GpuSpec(
        name=str(entry["name"]),
        vendor=str(entry["vendor"]),
        peak_flops=peaks,
        mem_size=parse_quantity(entry["mem_size"], "mem_size"),
        mem_bw=parse_quantity(entry["mem_bw"], "mem_bw"),
        num_sm=num_sm,
        l2_size=parse_quantity(entry["l2_size"], "l2_size"),
        year=int(entry.get("year", 0)),
    )


def load_catalog(path) -> List[GpuSpec]:
    """Load all GPU specs from a YAML catalog file.

    Units are normalized to base SI on load. Duplicate names are an
    error, as are nonpositive fields.
    """
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise CatalogError(f"{path}: {exc}") from exc
    if doc is None:
        return []
    if not isinstance(doc, list):
        raise CatalogError(f"{path}: top level must be a list of GPU entries")
    specs = []
    seen = set()
    for i, entry in enumerate(doc):
        spec = _spec_from_entry(entry, i)
        if spec.name in seen:
            raise CatalogError(f"{path}: duplicate GPU name {spec.name!r}")
        seen.add(spec.name)
        specs.append(spec)
    return specs


def serialize_catalog(specs: List[GpuSpec]) -> str:
    """Render specs back to catalog YAML in base units.

    Numbers are written with repr so a serialize/load round trip is
    field-exact.
    """
    lines = []
    for spec in specs:
        lines.append(f"- name: {spec.name}")
        lines.append(f"  vendor: {spec.vendor}")
        lines.append(f"  year: {spec.year}")
        peak = ", ".join(f"{k}: {v!r}" for k, v in spec.peak_flops.items())
        lines.append(f"  peak_flops: {{{peak}}}")
        lines.append(f"  mem_size: {spec.mem_size!r}")
        lines.append(f"  mem_bw: {spec.mem_bw!r}")
        lines.append(f"  num_sm: {spec.num_sm}")
        lines.append(f"  l2_size: {spec.l2_size!r}")
    return "\n".join(lines) + "\n"


@dataclass
class Catalog:
    """Name-indexed view over a list of GpuSpecs. Immutable after load."""

    specs: Dict[str, GpuSpec] = field(default_factory=dict)

    @classmethod
    def from_specs(cls, specs: List[GpuSpec]) -> "Catalog":
        return cls(specs={s.name: s for s in specs})

    @classmethod
    def load(cls, path=None) -> "Catalog":
        """Load from an explicit path, $GPUCAST_CATALOG, or the bundled default."""
        if path is None:
            path = os.environ.get(ENV_CATALOG)
        if path is None:
            return cls.default()
        return cls.from_specs(load_catalog(path))

    @classmethod
    def default(cls) -> "Catalog":
        with resources.as_file(resources.files("gpucast").joinpath("data/gpus.yaml")) as p:
            return cls.from_specs(load_catalog(p))

    def get(self, name: str) -> GpuSpec:
        try:
            return self.specs[name]
        except KeyError:
            known = ", ".join(sorted(self.specs)) or "<empty>"
            raise UnknownGpuError(f"unknown GPU {name!r}; catalog has: {known}") from None

    def names(self) -> List[str]:
        return list(self.specs)
