"""Wavefront-parallel decoding engine for raster-order token grids."""

from .adaptive import ProbeState, VerifyOutcome, begin_probe, run_adaptive, verify
from .analysis import AttentionRecord, collect_attention, min_window_for_mass, step_table
from .engine import (GenerationResult, StepEvent, equivalence_report, generate,
                     generate_adaptive, generate_fixed, generate_ntp)
from .grid import (CoordinateError, DecodeState, GridShape, Position, RowState,
                   TokenGrid, ntp_step_count, position_of, raster_index)
from .model import (AttentionUnsupportedError, CacheIntegrityError,
                    ConditioningContext, ContextCache, LocalOracle,
                    ModelBackend, ToyTransformer, availability_mask)
from .sampler import (SamplerConfig, SamplerConfigError, guided_logits,
                      sample_from, to_distribution, total_variation)
from .scheduler import (SchedulePlan, ScheduleError, WindowPolicy, eligible,
                        plan_fixed, row_start_input, simulate_fixed)

__version__ = "0.1.0"

__all__ = [
    "AttentionRecord",
    "AttentionUnsupportedError",
    "CacheIntegrityError",
    "ConditioningContext",
    "ContextCache",
    "CoordinateError",
    "DecodeState",
    "GenerationResult",
    "GridShape",
    "LocalOracle",
    "ModelBackend",
    "Position",
    "ProbeState",
    "RowState",
    "SamplerConfig",
    "SamplerConfigError",
    "SchedulePlan",
    "ScheduleError",
    "StepEvent",
    "TokenGrid",
    "ToyTransformer",
    "VerifyOutcome",
    "WindowPolicy",
    "availability_mask",
    "begin_probe",
    "collect_attention",
    "eligible",
    "equivalence_report",
    "generate",
    "generate_adaptive",
    "generate_fixed",
    "generate_ntp",
    "guided_logits",
    "min_window_for_mass",
    "ntp_step_count",
    "plan_fixed",
    "position_of",
    "raster_index",
    "row_start_input",
    "run_adaptive",
    "sample_from",
    "simulate_fixed",
    "step_table",
    "to_distribution",
    "total_variation",
    "verify",
]
