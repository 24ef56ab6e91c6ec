"""IEEE RTS-24 case study: data loading, offset-error sweeps and reports."""

from .report import emit_report
from .rts24 import RtsData, load_rts24, load_rts24_dir
from .sweep import SweepConfig, SweepResult, run_sweep

__all__ = ["RtsData", "SweepConfig", "SweepResult", "emit_report", "load_rts24", "load_rts24_dir", "run_sweep"]
