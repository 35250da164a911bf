"""Attention-locality measurement and step/speedup table generation.

"Retained mass" is measured against exactly the token set a window-``s``
schedule would exclude for a row-start query: the tail of the previous row
from column ``s`` onward.  Attention is head-averaged over the final layer;
other aggregation conventions would shift the absolute numbers, so the
convention is pinned here rather than inferred.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import generate_ntp
from .grid import GridShape, Position, raster_index
from .model import ModelBackend
from .sampler import SamplerConfig


class AttentionDomainError(ValueError):
    """Raised when a record's query is not a row-start position."""


@dataclass(frozen=True)
class AttentionRecord:
    """One head-averaged attention row, indexed by raster position."""

    query: Position
    mass: np.ndarray  # length raster_len, sums to 1, zero off the mask

    def __post_init__(self) -> None:
        if abs(float(self.mass.sum()) - 1.0) > 1e-6:
            raise ValueError("attention mass must sum to 1")
        if np.any(self.mass < 0):
            raise ValueError("attention mass must be nonnegative")


def min_window_for_mass(rec: AttentionRecord, shape: GridShape,
                        retain: float) -> int:
    """Smallest window whose excluded previous-row tail keeps the retained
    attention mass at or above ``retain``; ``cols`` if no smaller one does."""
    if not 0 < retain < 1:
        raise ValueError("retain fraction must lie in (0, 1)")
    q = rec.query
    if q.col != 0 or q.row < 1:
        raise AttentionDomainError(
            f"query {q} is not the first token of a row below the top")
    prev = q.row - 1
    tail_rasters = [raster_index(shape, Position(prev, k))
                    for k in range(shape.cols)]
    budget = 1.0 - retain
    for s in range(1, shape.cols):
        excluded = float(rec.mass[tail_rasters[s:]].sum())
        if excluded <= budget:
            return s
    return shape.cols


def collect_attention(backend: ModelBackend, shape: GridShape, seed: int,
                      sampler: SamplerConfig | None = None,
                      prefix_tokens: tuple[int, ...] = ()) -> list[AttentionRecord]:
    """One record per row-start query, captured during sequential decoding."""
    sampler = sampler or SamplerConfig()
    result = generate_ntp(shape, backend, sampler, seed, prefix_tokens,
                          collect_attention=True)
    return [AttentionRecord(query=pos, mass=mass)
            for pos, mass in result.attention_records]


def step_table(grids: list[tuple[int, int]], windows: list[int],
               eor: bool) -> list[dict]:
    """Rows of (H, W, s, fixed steps, sequential steps, reduction %)."""
    rows = []
    for h, w in grids:
        eor_id = 0 if eor else None
        shape = GridShape(rows=h, cols=w, eor=eor, eor_token_id=eor_id)
        ntp = shape.ntp_step_count()
        for s in windows:
            if not 1 <= s <= w:
                continue
            fixed = (h - 1) * s + w
            rows.append({
                "rows": h,
                "cols": w,
                "window": s,
                "fixed_steps": fixed,
                "ntp_steps": ntp,
                "reduction_pct": 100.0 * (1.0 - fixed / ntp),
            })
    return rows
