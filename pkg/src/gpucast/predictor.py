"""Learned per-tile utilization model and its training loop.

The predictor never outputs a latency directly. For each kernel it maps
five per-tile resource-pressure features through an MLP to a pair of
sigmoid-bounded coefficients (cap, deficit) and models utilization as

    utilization(waves) = cap - deficit / waves

clamped to [UTIL_FLOOR, 1]. Latency then follows from the wave plan and
the per-SM roofline share (kernels module). Training minimizes the
symmetric mean absolute percentage error between assembled and measured
latencies, with the gradient flowing through the whole chain into the
MLP. One weight set exists per operator class (bmm, fc, elementwise,
softmax, layernorm); anything else takes the memory-bound path and
never reaches the predictor.

Feature units are fixed scalings, not free normalization choices:
numerator and denominator are converted to the quoted unit before
dividing (GFLOP, TFLOP/s, MB, GB/s, KB). Tests pin every factor.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .catalog import Catalog, GpuSpec, per_sm, select_peak_flops
from .errors import TrainingError, UntrainedOperatorError
from .kernels import (DEFAULT_COSTS, FlopCosts, KernelDesc, MATRIX_OPS,
                      PREDICTOR_CLASSES, TileShape, WavePlan, assemble_latency,
                      describe_kernel, memory_bound_latency, plan_tiles,
                      roofline_bw)
from .mlp import (AdamW, MlpWeights, N_FEATURES, backward, default_layer_sizes,
                  forward, init_weights, load_weights, save_weights, sigmoid)
from .tiledb import TileDb

UTIL_FLOOR = 1e-4

_GFLOP = 1e9
_TFLOPS = 1e12
_MB = 1e6
_GB = 1e9
_KB = 1e3


def featurize(plan: WavePlan, gpu: GpuSpec, k: KernelDesc) -> np.ndarray:
    """Five per-tile features with fixed unit scalings.

    1. tile FLOPs [GFLOP] / per-SM peak [TFLOP/s]
    2. tile bytes [MB] / per-SM bandwidth [GB/s]
    3. waves * tile bytes [MB] / per-SM L2 [KB]
    4. waves * tile bytes [MB] / per-SM memory [MB]
    5. tile intensity [GFLOP/MB] / device intensity [(TFLOP/s)/(GB/s)]

    Feature 5's unit factors cancel, so it is exactly kernel intensity
    over device intensity and equals 1 when the two match.
    """
    if plan.mem_tile <= 0:
        raise TrainingError("mem_tile must be positive to featurize")
    sm = per_sm(gpu)
    peak = select_peak_flops(gpu, k.dtype, matrix_op=k.op in MATRIX_OPS)
    peak_per_sm = peak / gpu.num_sm
    working_set = plan.num_waves * plan.mem_tile
    f1 = (plan.flops_tile / _GFLOP) / (peak_per_sm / _TFLOPS)
    f2 = (plan.mem_tile / _MB) / (sm.mem_bw_per_sm / _GB)
    f3 = (working_set / _MB) / (sm.l2_per_sm / _KB)
    f4 = (working_set / _MB) / (sm.mem_per_sm / _MB)
    f5 = ((plan.flops_tile / _GFLOP) / (plan.mem_tile / _MB)) / (
        (peak / _TFLOPS) / (gpu.mem_bw / _GB))
    out = np.array([f1, f2, f3, f4, f5], dtype=np.float64)
    if not np.isfinite(out).all() or (out < 0).any():
        raise TrainingError(f"non-finite or negative feature vector {out}")
    return out


@dataclass(frozen=True)
class UtilCoeffs:
    """Sigmoid-bounded utilization-law coefficients, both in (0, 1)."""

    alpha: float
    beta: float


def predict_coeffs(w: MlpWeights, x: np.ndarray) -> UtilCoeffs:
    """Forward pass plus sigmoid on both outputs; deterministic."""
    raw, _ = forward(w, x)
    a, b = sigmoid(raw[0])
    return UtilCoeffs(alpha=float(a), beta=float(b))


def predict_coeffs_batch(w: MlpWeights, xs: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    raw, _ = forward(w, xs)
    bounded = sigmoid(raw)
    return bounded[:, 0], bounded[:, 1]


def utilization(c: UtilCoeffs, num_waves: int, floor: float = UTIL_FLOOR) -> float:
    """Utilization law with a hard clamp to [floor, 1].

    The law itself can go nonpositive for small wave counts; the floor
    keeps latencies finite. The ceiling never binds (cap < 1 by
    construction) but is kept for safety.
    """
    if num_waves < 1:
        raise TrainingError(f"num_waves must be >= 1, got {num_waves}")
    raw = c.alpha - c.beta / num_waves
    return min(max(raw, floor), 1.0)


def _smooth_floor(z: np.ndarray, floor: float, sharpness: float) -> Tuple[np.ndarray, np.ndarray]:
    """Softplus-style floor used during training; returns (value, dvalue/dz).

    Differentiable everywhere, approaches max(z, floor) as sharpness
    grows. Inference uses the hard clamp instead.
    """
    t = sharpness * (z - floor)
    value = floor + np.logaddexp(0.0, t) / sharpness
    grad = sigmoid(t)
    return value, grad


@dataclass(frozen=True)
class TrainSample:
    """One measured (or synthetic) operator latency."""

    op_token: str
    dims: Tuple[int, ...]
    gpu_name: str
    latency: float  # seconds

    def __post_init__(self):
        if self.latency <= 0:
            raise TrainingError(f"measured latency must be positive, got {self.latency}")


def save_dataset(samples: Sequence[TrainSample], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            dims = "-".join(str(d) for d in s.dims)
            fh.write(f"{s.op_token},{dims},{s.gpu_name},{s.latency!r}\n")


def load_dataset(path) -> List[TrainSample]:
    samples = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.split(",")
            if len(fields) != 4:
                raise TrainingError(f"{path}:{lineno}: expected 4 fields, got {len(fields)}")
            op_token, dims_s, gpu_name, lat_s = fields
            try:
                dims = tuple(int(x) for x in dims_s.split("-"))
                latency = float(lat_s)
            except ValueError as exc:
                raise TrainingError(f"{path}:{lineno}: {exc}") from exc
            samples.append(TrainSample(op_token.strip(), dims, gpu_name.strip(), latency))
    return samples


@dataclass
class PreparedSamples:
    """Dataset pre-baked into numeric arrays for the training loop.

    lat_coeff holds waves * flops_tile * num_sm / roofline per sample,
    so prediction is lat_coeff / utilization.
    """

    features: np.ndarray   # (n, 5)
    num_waves: np.ndarray  # (n,)
    lat_coeff: np.ndarray  # (n,)
    measured: np.ndarray   # (n,)


def prepare_samples(samples: Sequence[TrainSample], catalog: Catalog, tiledb: TileDb,
                    costs: FlopCosts = DEFAULT_COSTS) -> PreparedSamples:
    feats, waves, coeffs, measured = [], [], [], []
    for s in samples:
        gpu = catalog.get(s.gpu_name)
        desc = describe_kernel(s.op_token, s.dims, costs=costs)
        if desc.predictor_class is None:
            raise TrainingError(f"operator {s.op_token!r} has no trainable predictor")
        tile = tiledb.lookup(s.op_token, s.dims, gpu)
        plan = plan_tiles(desc, tile, gpu)
        feats.append(featurize(plan, gpu, desc))
        waves.append(plan.num_waves)
        coeffs.append(plan.num_waves * plan.flops_tile * gpu.num_sm / roofline_bw(desc, gpu))
        measured.append(s.latency)
    return PreparedSamples(
        features=np.array(feats, dtype=np.float64),
        num_waves=np.array(waves, dtype=np.float64),
        lat_coeff=np.array(coeffs, dtype=np.float64),
        measured=np.array(measured, dtype=np.float64),
    )


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and loop settings. Defaults sit inside the documented
    working ranges (lr 1e-6..5e-3, batch 16..128, 100 epochs)."""

    epochs: int = 100
    lr: float = 1e-4
    batch_size: int = 64
    weight_decay: float = 1e-2
    val_fraction: float = 0.2
    seed: int = 0
    clamp_floor: float = UTIL_FLOOR
    floor_sharpness: float = 50.0
    hidden_units: int = 512
    hidden_layers: int = 8

    def layer_sizes(self) -> List[int]:
        return [N_FEATURES] + [self.hidden_units] * (self.hidden_layers + 1) + [2]


def _train_forward(w: MlpWeights, data: PreparedSamples, idx: np.ndarray,
                   cfg: TrainConfig):
    """Smooth-floored forward pass over a batch; returns everything the
    backward pass needs."""
    x = data.features[idx]
    raw, cache = forward(w, x)
    bounded = sigmoid(raw)
    alpha, beta = bounded[:, 0], bounded[:, 1]
    waves = data.num_waves[idx]
    z = alpha - beta / waves
    util, dutil_dz = _smooth_floor(z, cfg.clamp_floor, cfg.floor_sharpness)
    pred = data.lat_coeff[idx] / util
    return pred, util, dutil_dz, alpha, beta, waves, cache


def smape_loss(pred: np.ndarray, measured: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Per-sample symmetric absolute percentage error and d(loss)/d(pred)
    for the mean over the batch."""
    diff = pred - measured
    denom = np.abs(pred) + np.abs(measured)
    per_sample = 2.0 * np.abs(diff) / denom
    dloss_dpred = np.sign(diff) * 4.0 * np.abs(measured) / (denom * denom) / len(pred)
    return per_sample, dloss_dpred


def loss_and_grads(w: MlpWeights, data: PreparedSamples, idx: np.ndarray,
                   cfg: TrainConfig):
    """Mean SMAPE over a batch and its analytic gradient in the weights.

    The chain runs loss -> predicted latency -> utilization -> law
    coefficients -> sigmoid -> MLP.
    """
    pred, util, dutil_dz, alpha, beta, waves, cache = _train_forward(w, data, idx, cfg)
    per_sample, dloss_dpred = smape_loss(pred, data.measured[idx])
    loss = float(per_sample.mean())
    dloss_dutil = dloss_dpred * (-data.lat_coeff[idx] / (util * util))
    dloss_dz = dloss_dutil * dutil_dz
    d_raw = np.empty((len(idx), 2), dtype=np.float64)
    d_raw[:, 0] = dloss_dz * alpha * (1.0 - alpha)
    d_raw[:, 1] = dloss_dz * (-1.0 / waves) * beta * (1.0 - beta)
    d_ws, d_bs = backward(w, cache, d_raw)
    return loss, d_ws, d_bs


def _eval_smape(w: MlpWeights, data: PreparedSamples, idx: np.ndarray,
                floor: float) -> float:
    """Validation metric with the inference-mode hard clamp."""
    if len(idx) == 0:
        return float("nan")
    alpha, beta = predict_coeffs_batch(w, data.features[idx])
    util = np.clip(alpha - beta / data.num_waves[idx], floor, 1.0)
    pred = data.lat_coeff[idx] / util
    per_sample, _ = smape_loss(pred, data.measured[idx])
    return float(per_sample.mean())


@dataclass
class EpochStats:
    epoch: int
    train_smape: float
    val_smape: float


@dataclass
class TrainResult:
    weights: MlpWeights
    history: List[EpochStats] = field(default_factory=list)
    best_epoch: int = 0


def train(samples: Sequence[TrainSample], cfg: TrainConfig, catalog: Catalog,
          tiledb: TileDb, costs: FlopCosts = DEFAULT_COSTS) -> TrainResult:
    """Train one operator class end to end; deterministic for a fixed seed.

    Reserves val_fraction of the samples for validation and returns the
    weights of the best validation epoch.
    """
    if not samples:
        raise TrainingError("cannot train on an empty dataset")
    classes = {describe_kernel(s.op_token, s.dims).predictor_class for s in samples}
    if len(classes) != 1:
        raise TrainingError(f"train() expects one operator class, got {sorted(classes)}")
    data = prepare_samples(samples, catalog, tiledb, costs)
    n = len(samples)
    rng = np.random.default_rng(cfg.seed)
    perm = rng.permutation(n)
    n_val = int(round(cfg.val_fraction * n))
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    if len(train_idx) == 0:
        train_idx, val_idx = perm, perm[:0]

    w = init_weights(cfg.layer_sizes(), seed=cfg.seed)
    opt = AdamW(lr=cfg.lr, weight_decay=cfg.weight_decay)
    best = w.copy()
    best_metric = float("inf")
    best_epoch = 0
    history: List[EpochStats] = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(train_idx)
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            loss, d_ws, d_bs = loss_and_grads(w, data, batch, cfg)
            grads = []
            for dw, db in zip(d_ws, d_bs):
                grads.extend((dw, db))
            opt.step(w.flat(), grads)
            losses.append(loss)
        val = _eval_smape(w, data, val_idx, cfg.clamp_floor)
        metric = val if len(val_idx) else float(np.mean(losses))
        history.append(EpochStats(epoch, float(np.mean(losses)), val))
        if metric < best_metric:
            best_metric = metric
            best = w.copy()
            best_epoch = epoch
    return TrainResult(weights=best, history=history, best_epoch=best_epoch)


@dataclass(frozen=True)
class KernelPrediction:
    """Latency plus everything the report wants to show about one kernel."""

    latency: float
    tile: TileShape
    plan: Optional[WavePlan]
    coeffs: Optional[UtilCoeffs]
    util: Optional[float]
    memory_bound: bool


def predict_kernel(desc: KernelDesc, gpu: GpuSpec, store: "WeightStore",
                   tiledb: TileDb) -> KernelPrediction:
    """Full per-kernel path: tile lookup, wave plan, coefficients,
    utilization, roofline-bounded assembly. OTHER ops fall back to the
    memory-bound estimate."""
    if desc.predictor_class is None:
        return KernelPrediction(latency=memory_bound_latency(desc, gpu),
                                tile=desc.out_dims, plan=None, coeffs=None,
                                util=None, memory_bound=True)
    tile = tiledb.lookup(desc.op_token, desc.dims, gpu)
    plan = plan_tiles(desc, tile, gpu)
    coeffs = predict_coeffs(store.get(desc.predictor_class), featurize(plan, gpu, desc))
    util = utilization(coeffs, plan.num_waves)
    latency = assemble_latency(plan, roofline_bw(desc, gpu) / gpu.num_sm, util)
    return KernelPrediction(latency=latency, tile=tile, plan=plan, coeffs=coeffs,
                            util=util, memory_bound=False)


class WeightStore:
    """Directory of per-operator-class weight files (<class>.mlpw)."""

    def __init__(self, weights: Optional[Dict[str, MlpWeights]] = None):
        self._weights: Dict[str, MlpWeights] = dict(weights or {})

    def set(self, op_class: str, w: MlpWeights) -> None:
        if op_class not in PREDICTOR_CLASSES:
            raise TrainingError(f"unknown predictor class {op_class!r}")
        self._weights[op_class] = w

    def get(self, op_class: str) -> MlpWeights:
        try:
            return self._weights[op_class]
        except KeyError:
            raise UntrainedOperatorError(
                f"no trained weights for operator class {op_class!r}; "
                f"available: {sorted(self._weights) or '<none>'}") from None

    def classes(self) -> List[str]:
        return sorted(self._weights)

    def save(self, directory) -> None:
        os.makedirs(directory, exist_ok=True)
        for op_class, w in sorted(self._weights.items()):
            save_weights(w, os.path.join(directory, f"{op_class}.mlpw"))

    @classmethod
    def load(cls, directory) -> "WeightStore":
        store = cls()
        for op_class in PREDICTOR_CLASSES:
            path = os.path.join(directory, f"{op_class}.mlpw")
            if os.path.exists(path):
                store._weights[op_class] = load_weights(path)
        return store


def samples_by_class(samples: Sequence[TrainSample]) -> Dict[str, List[TrainSample]]:
    """Split a mixed dataset into per-predictor-class lists."""
    grouped: Dict[str, List[TrainSample]] = {}
    for s in samples:
        cls_name = describe_kernel(s.op_token, s.dims).predictor_class
        if cls_name is None:
            raise TrainingError(f"operator {s.op_token!r} has no trainable predictor")
        grouped.setdefault(cls_name, []).append(s)
    return grouped


def default_weight_sizes() -> List[int]:
    return default_layer_sizes()
