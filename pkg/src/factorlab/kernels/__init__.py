"""Expression evaluation kernels: a reference numpy backend and a compiled one."""

from ..panel import SignalMatrix
from .bench import bench_kernels, write_bench_csv
from .evaluate import Backend, default_workers, evaluate, evaluate_batch

__all__ = [
    "Backend",
    "SignalMatrix",
    "bench_kernels",
    "default_workers",
    "evaluate",
    "evaluate_batch",
    "write_bench_csv",
]
