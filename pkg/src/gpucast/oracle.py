"""Synthetic ground-truth GPU for exercising the learn->predict loop.

The oracle evaluates exactly the same forward chain the predictor
assembles (tile plan -> features -> utilization law -> latency), except
the law coefficients come from fixed, published logistic functions of
the features instead of a trained MLP. Labels therefore follow the
utilization law by construction, and a training run can be scored
against a known-recoverable target without any hardware.

It is not a GPU simulator and makes no claim about real silicon; it
validates the pipeline, not the physics.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from typing import List, Optional, Tuple

import numpy as np

from .catalog import GpuSpec
from .errors import TrainingError
from .kernels import (DEFAULT_COSTS, FlopCosts, KernelDesc, TileShape,
                      assemble_latency, describe_kernel, plan_tiles, roofline_bw)
from .predictor import TrainSample, UTIL_FLOOR, featurize
from .tiledb import TileDb

COEFF_VERSION = 1


@dataclass(frozen=True)
class LogisticCoeffs:
    """sigmoid(bias + w_compute * log f1 + w_l2 * log f3)."""

    bias: float
    w_compute: float
    w_l2: float

    def value(self, f1: float, f3: float) -> float:
        z = self.bias + self.w_compute * math.log(f1) + self.w_l2 * math.log(f3)
        return 1.0 / (1.0 + math.exp(-z))


# Fixed published coefficients: a smooth, nontrivial utilization surface
# whose law stays positive at one wave across the sampled ranges. Slopes
# are deliberately moderate; the raw (unstandardized) features span many
# decades, and the recovery experiments must be able to fit the surface
# to within the label noise.
DEFAULT_CAP = LogisticCoeffs(bias=1.1, w_compute=0.08, w_l2=0.03)
DEFAULT_DEFICIT = LogisticCoeffs(bias=-2.1, w_compute=-0.03, w_l2=0.05)


@dataclass(frozen=True)
class OracleSpec:
    """Synthetic device: a real catalog GPU plus the latent law."""

    gpu: GpuSpec
    cap: LogisticCoeffs = DEFAULT_CAP
    deficit: LogisticCoeffs = DEFAULT_DEFICIT
    noise_sigma: float = 0.03  # relative std-dev of run-to-run jitter
    version: int = COEFF_VERSION

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise TrainingError("noise_sigma must be nonnegative")

    def to_json(self) -> str:
        return json.dumps({
            "version": self.version,
            "gpu": self.gpu.name,
            "cap": vars(self.cap),
            "deficit": vars(self.deficit),
            "noise_sigma": self.noise_sigma,
        }, sort_keys=True)


def oracle_coeffs(spec: OracleSpec, features: np.ndarray) -> Tuple[float, float]:
    f1, f3 = float(features[0]), float(features[2])
    return spec.cap.value(f1, f3), spec.deficit.value(f1, f3)


def oracle_latency(k: KernelDesc, tile: TileShape, spec: OracleSpec,
                   seed) -> float:
    """Exact forward chain under the latent law, times lognormal noise."""
    gpu = spec.gpu
    plan = plan_tiles(k, tile, gpu)
    cap, deficit = oracle_coeffs(spec, featurize(plan, gpu, k))
    util = min(max(cap - deficit / plan.num_waves, UTIL_FLOOR), 1.0)
    latency = assemble_latency(plan, roofline_bw(k, gpu) / gpu.num_sm, util)
    if spec.noise_sigma > 0:
        rng = np.random.default_rng(seed)
        latency *= math.exp(spec.noise_sigma * rng.standard_normal())
    return latency


@dataclass(frozen=True)
class DimRange:
    lo: int
    hi: int

    def __post_init__(self):
        if not 1 <= self.lo <= self.hi:
            raise TrainingError(f"empty or invalid range [{self.lo}, {self.hi}]")

    def sample(self, rng: np.random.Generator) -> int:
        # Log-uniform over the integer range.
        v = math.exp(rng.uniform(math.log(self.lo), math.log(self.hi)))
        return min(max(int(round(v)), self.lo), self.hi)


@dataclass(frozen=True)
class OpRangeConfig:
    """Sampling ranges per operator family, matching the measured-data
    collection recipe: BMM dims 1-1024; FC batch to 8192 and widths to
    65,536; vector ops with 512-16,384 rows and 512-4096 columns
    (reductions start at 4096 rows)."""

    bmm: Tuple[DimRange, ...] = (DimRange(1, 1024),) * 4
    fc: Tuple[DimRange, ...] = (DimRange(1, 8192), DimRange(1, 65536), DimRange(1, 65536))
    elementwise: Tuple[DimRange, ...] = (DimRange(512, 16384), DimRange(512, 4096))
    softmax: Tuple[DimRange, ...] = (DimRange(4096, 16384), DimRange(512, 4096))
    layernorm: Tuple[DimRange, ...] = (DimRange(4096, 16384), DimRange(512, 4096))
    elementwise_kinds: Tuple[str, ...] = ("add", "div", "mul", "gelu", "relu", "tanh")

    def ranges_for(self, op_class: str) -> Tuple[DimRange, ...]:
        try:
            return getattr(self, op_class)
        except AttributeError:
            raise TrainingError(f"no sampling ranges for operator class {op_class!r}") from None


DEFAULT_RANGES = OpRangeConfig()


def generate_dataset(op_class: str, spec: OracleSpec, n: int, seed: int,
                     ranges: OpRangeConfig = DEFAULT_RANGES,
                     tiledb: Optional[TileDb] = None,
                     costs: FlopCosts = DEFAULT_COSTS) -> List[TrainSample]:
    """Draw n oracle-labeled samples for one operator class.

    Dims are log-uniform within the class ranges; every sample derives
    its own seed from (seed, index) so generation is order-independent
    and reproducible.
    """
    if n < 0:
        raise TrainingError("n must be nonnegative")
    op_class = op_class.strip().lower()
    dim_ranges = ranges.ranges_for(op_class)
    db = tiledb if tiledb is not None else TileDb()
    out: List[TrainSample] = []
    for i in range(n):
        rng = np.random.default_rng([seed, i, 0])
        dims = tuple(r.sample(rng) for r in dim_ranges)
        if op_class == "elementwise":
            op_token = ranges.elementwise_kinds[int(rng.integers(len(ranges.elementwise_kinds)))]
        else:
            op_token = op_class
        desc = describe_kernel(op_token, dims, costs=costs)
        tile = db.lookup(op_token, dims, spec.gpu)
        latency = oracle_latency(desc, tile, spec, seed=[seed, i, 1])
        out.append(TrainSample(op_token, dims, spec.gpu.name, latency))
    return out


def noiseless(spec: OracleSpec) -> OracleSpec:
    return replace(spec, noise_sigma=0.0)
