from .bench import BenchResult, bench_throughput
from .launch import LaunchResult, RunSpec, launch, supervise
from .memory import Capacity, Layout, MemoryModel, UsageError, buffer_bytes, fits, format_memplan, max_envs, memplan
from .report import format_table2, report_table2

__all__ = [
    "BenchResult",
    "Capacity",
    "LaunchResult",
    "Layout",
    "MemoryModel",
    "RunSpec",
    "UsageError",
    "bench_throughput",
    "buffer_bytes",
    "fits",
    "format_memplan",
    "launch",
    "max_envs",
    "memplan",
    "report_table2",
    "supervise",
    "format_table2",
]
