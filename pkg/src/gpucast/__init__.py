"""Roofline-bounded, tile-level GPU latency forecasting.

Predicts per-kernel, per-device, and single-server distributed latency
of deep-learning operator graphs on GPUs described only by published
hardware specs. Kernels decompose into output tiles executed one per SM
in waves; a small trained model predicts the coefficients of the
utilization law u(waves) = cap - deficit/waves, and every latency stays
bounded by the device roofline.
"""

__version__ = "0.1.0"

from .catalog import Catalog, GpuSpec, PerSmSpec, load_catalog, per_sm, select_peak_flops
from .distributed import (ParallelPlan, ServerSpec, allreduce_latency,
                          estimate_parallel, sendrecv_latency)
from .engine import LatencyReport, predict_graph
from .errors import GpucastError
from .graph import OpGraph, fuse, greedy_fusion_groups, parse_graph, save_graph
from .kernels import (KernelDesc, OpType, WavePlan, assemble_latency, describe_kernel,
                      memory_bound_latency, plan_tiles, roofline_bw)
from .mlp import MlpWeights
from .oracle import OracleSpec, generate_dataset, oracle_latency
from .predictor import (TrainConfig, TrainSample, UtilCoeffs, WeightStore,
                        featurize, predict_coeffs, train, utilization)
from .tiledb import TileDb, TileRecord

__all__ = [
    "Catalog", "GpuSpec", "PerSmSpec", "load_catalog", "per_sm", "select_peak_flops",
    "ParallelPlan", "ServerSpec", "allreduce_latency", "estimate_parallel",
    "sendrecv_latency", "LatencyReport", "predict_graph", "GpucastError",
    "OpGraph", "fuse", "greedy_fusion_groups", "parse_graph", "save_graph",
    "KernelDesc", "OpType", "WavePlan", "assemble_latency", "describe_kernel",
    "memory_bound_latency", "plan_tiles", "roofline_bw",
    "OracleSpec", "generate_dataset", "oracle_latency",
    "MlpWeights", "TrainConfig", "TrainSample", "UtilCoeffs", "WeightStore",
    "featurize", "predict_coeffs", "train", "utilization",
    "TileDb", "TileRecord",
]
