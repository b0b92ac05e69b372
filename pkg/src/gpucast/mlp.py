"""Small fully-connected network with hand-rolled backprop and AdamW.

Kept free of autograd frameworks on purpose: training runs on a laptop
CPU in float64, gradients are exact and checkable against finite
differences, and identical seeds give identical weight files.

The utilization predictor uses the stack
    in -> 512, 8 x (512 -> 512), 512 -> 2
with ReLU after every layer except the last; layer sizes stay
parameters so tests can run scaled-down instances through the same
code paths.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

from .errors import WeightFormatError

HIDDEN_UNITS = 512
HIDDEN_LAYERS = 8
N_FEATURES = 5
N_OUTPUTS = 2

WEIGHT_MAGIC = b"GCMLPW\x00"
WEIGHT_VERSION = 1


def default_layer_sizes(n_in: int = N_FEATURES, n_out: int = N_OUTPUTS) -> List[int]:
    return [n_in] + [HIDDEN_UNITS] * (HIDDEN_LAYERS + 1) + [n_out]


@dataclass
class MlpWeights:
    """Per-layer weight matrices and bias vectors, float64."""

    weights: List[np.ndarray]
    biases: List[np.ndarray]

    @property
    def layer_sizes(self) -> List[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def copy(self) -> "MlpWeights":
        return MlpWeights([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def flat(self) -> List[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def validate(self) -> None:
        if len(self.weights) != len(self.biases) or not self.weights:
            raise WeightFormatError("weight/bias layer counts disagree")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise WeightFormatError(f"layer {i}: inconsistent shapes {w.shape} / {b.shape}")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise WeightFormatError(f"layer {i}: input size does not chain")
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise WeightFormatError(f"layer {i}: non-finite entries")


def init_weights(layer_sizes: Sequence[int], seed: int) -> MlpWeights:
    """He-style uniform fan-in init, biases at zero; fully seeded."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for n_in, n_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        limit = np.sqrt(6.0 / n_in)
        weights.append(rng.uniform(-limit, limit, size=(n_in, n_out)))
        biases.append(np.zeros(n_out))
    return MlpWeights(weights, biases)


def forward(w: MlpWeights, x: np.ndarray) -> Tuple[np.ndarray, List[np.ndarray]]:
    """Forward pass; returns raw (pre-sigmoid) outputs and the activation
    cache needed by backward()."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != w.weights[0].shape[0]:
        raise WeightFormatError(
            f"input width {x.shape[1]} does not match first layer {w.weights[0].shape[0]}")
    cache = [x]
    h = x
    last = len(w.weights) - 1
    for i, (wi, bi) in enumerate(zip(w.weights, w.biases)):
        h = h @ wi + bi
        if i != last:
            h = np.maximum(h, 0.0)
        cache.append(h)
    return h, cache


def backward(w: MlpWeights, cache: List[np.ndarray],
             d_out: np.ndarray) -> Tuple[List[np.ndarray], List[np.ndarray]]:
    """Backprop d(loss)/d(raw outputs) into per-layer gradients."""
    d_ws: List[np.ndarray] = [None] * len(w.weights)
    d_bs: List[np.ndarray] = [None] * len(w.biases)
    delta = np.asarray(d_out, dtype=np.float64)
    last = len(w.weights) - 1
    for i in range(last, -1, -1):
        a_in = cache[i]
        d_ws[i] = a_in.T @ delta
        d_bs[i] = delta.sum(axis=0)
        if i:
            delta = delta @ w.weights[i].T
            delta = delta * (cache[i] > 0.0)
    return d_ws, d_bs


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass
class AdamW:
    """Decoupled-weight-decay Adam on a flat parameter list."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-2
    _m: List[np.ndarray] = field(default_factory=list)
    _v: List[np.ndarray] = field(default_factory=list)
    _t: int = 0

    def step(self, params: List[np.ndarray], grads: List[np.ndarray]) -> None:
        if not self._m:
            self._m = [np.zeros_like(p) for p in params]
            self._v = [np.zeros_like(p) for p in params]
        self._t += 1
        b1t = 1.0 - self.beta1 ** self._t
        b2t = 1.0 - self.beta2 ** self._t
        for p, g, m, v in zip(params, grads, self._m, self._v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / b1t) / (np.sqrt(v / b2t) + self.eps)
            p -= self.lr * update
            p -= self.lr * self.weight_decay * p


def save_weights(w: MlpWeights, path) -> None:
    """Write the versioned binary weight format.

    Layout: magic, u32 version, u32 header length, JSON header
    {layer_sizes}, then row-major little-endian float64 blobs in
    W0, b0, W1, b1, ... order. Byte-for-byte reproducible for equal
    weights (no timestamps).
    """
    w.validate()
    header = json.dumps({"layer_sizes": w.layer_sizes}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(WEIGHT_MAGIC)
        fh.write(struct.pack("<II", WEIGHT_VERSION, len(header)))
        fh.write(header)
        for arr in w.flat():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_weights(path) -> MlpWeights:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(WEIGHT_MAGIC) + 8 or not blob.startswith(WEIGHT_MAGIC):
        raise WeightFormatError(f"{path}: not a weight file (bad magic)")
    off = len(WEIGHT_MAGIC)
    version, hlen = struct.unpack_from("<II", blob, off)
    if version != WEIGHT_VERSION:
        raise WeightFormatError(f"{path}: unsupported weight version {version}")
    off += 8
    try:
        header = json.loads(blob[off:off + hlen].decode())
        layer_sizes = [int(x) for x in header["layer_sizes"]]
    except (ValueError, KeyError, UnicodeDecodeError) as exc:
        raise WeightFormatError(f"{path}: corrupt header: {exc}") from exc
    off += hlen
    weights, biases = [], []
    for n_in, n_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        need = (n_in * n_out + n_out) * 8
        if off + need > len(blob):
            raise WeightFormatError(f"{path}: truncated weight file")
        wmat = np.frombuffer(blob, dtype="<f8", count=n_in * n_out, offset=off)
        off += n_in * n_out * 8
        bvec = np.frombuffer(blob, dtype="<f8", count=n_out, offset=off)
        off += n_out * 8
        weights.append(wmat.reshape(n_in, n_out).copy())
        biases.append(bvec.copy())
    if off != len(blob):
        raise WeightFormatError(f"{path}: trailing bytes after weights")
    out = MlpWeights(weights, biases)
    out.validate()
    return out
