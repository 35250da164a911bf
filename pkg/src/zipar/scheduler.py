"""Fixed-window wavefront scheduling over the token grid.

A token (i, j) may be generated once the previous row has decoded the window
of tokens starting at the same column: {x[i-1, k] : j <= k < min(j + s, W)}.
The window set is truncated at the row boundary; without truncation the
criterion is unsatisfiable for j > W - s and every schedule would deadlock.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .grid import DecodeState, GridShape, Position


class ScheduleError(RuntimeError):
    """Raised when a schedule cannot make progress (should be unreachable)."""


@dataclass(frozen=True)
class WindowPolicy:
    """Fixed window of size ``s`` or adaptive with minimum window ``s_min``."""

    kind: str  # "fixed" | "adaptive"
    size: int

    def __post_init__(self) -> None:
        if self.kind not in ("fixed", "adaptive"):
            raise ValueError(f"unknown window policy kind {self.kind!r}")
        if self.size < 1:
            raise ValueError("window size must be positive")

    @classmethod
    def fixed(cls, s: int) -> "WindowPolicy":
        return cls("fixed", s)

    @classmethod
    def adaptive(cls, s_min: int) -> "WindowPolicy":
        return cls("adaptive", s_min)


@dataclass
class SchedulePlan:
    """Per-position decode step indices plus aggregate step accounting."""

    decode_step: np.ndarray  # (rows, cols) int64, EOR slots excluded
    total_steps: int
    max_batch_width: int

    def step_of(self, pos: Position) -> int:
        return int(self.decode_step[pos.row, pos.col])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SchedulePlan):
            return NotImplemented
        return (
            self.total_steps == other.total_steps
            and self.max_batch_width == other.max_batch_width
            and np.array_equal(self.decode_step, other.decode_step)
        )

    def to_json(self) -> str:
        doc = {
            "decode_step": self.decode_step.tolist(),
            "total_steps": self.total_steps,
            "max_batch_width": self.max_batch_width,
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ": ")) + "\n"


def _check_window(shape: GridShape, s: int) -> None:
    if not 1 <= s <= shape.cols:
        raise ValueError(f"window {s} outside [1, {shape.cols}]")


def eligible(state: DecodeState, shape: GridShape, s: int, row: int, col: int) -> bool:
    """Window criterion for generating (row, col); row 0 is always eligible."""
    if row == 0:
        return True
    hi = min(col + s, shape.cols)
    return all(Position(row - 1, k) in state.values for k in range(col, hi))


def row_start_input(state: DecodeState, shape: GridShape, row: int) -> int:
    """Input token for the raster slot immediately before (row, 0).

    With EOR grids this is the predetermined EOR token.  Without EOR, the
    true token x[row-1, W-1] is used when decoded; otherwise the value of the
    decoded token nearest to (row-1, W-1) in Euclidean grid distance stands
    in, ties broken by smaller row then smaller column.  The stand-in is an
    input only and is never written into the decoded set.
    """
    if row == 0:
        if not state.prefix_tokens:
            raise ValueError("row 0 has no preceding slot without prefix tokens")
        return state.prefix_tokens[-1]
    if shape.eor:
        assert shape.eor_token_id is not None
        return shape.eor_token_id
    target = Position(row - 1, shape.cols - 1)
    if target in state.values:
        return state.values[target]
    best: tuple[float, int, int] | None = None
    for pos in state.values:
        d = math.hypot(pos.row - target.row, pos.col - target.col)
        key = (d, pos.row, pos.col)
        if best is None or key < best:
            best = key
    if best is None:
        raise ScheduleError(f"no decoded token to stand in for {target}")
    return state.values[Position(best[1], best[2])]


def plan_fixed(shape: GridShape, s: int) -> SchedulePlan:
    """Closed-form schedule: decode_step(i, j) = i*s + j.

    EOR slots consume no step (they are pre-inserted); total steps are
    (H-1)*s + W and the peak lane count is ceil(W/s) capped at H.
    """
    _check_window(shape, s)
    rows, cols = shape.rows, shape.cols
    decode_step = np.add.outer(np.arange(rows, dtype=np.int64) * s,
                               np.arange(cols, dtype=np.int64))
    total = (rows - 1) * s + cols
    width = min((cols + s - 1) // s, rows)
    return SchedulePlan(decode_step=decode_step, total_steps=total,
                        max_batch_width=width)


def _simulate_core_py(rows: int, cols: int, s: int,
                      decode_step: np.ndarray) -> tuple[int, int]:
    frontier = np.zeros(rows, dtype=np.int64)
    t = 0
    max_width = 0
    remaining = rows * cols
    while remaining > 0:
        width = 0
        above_before = np.int64(0)
        for i in range(rows):
            fi = frontier[i]
            fire = False
            if fi < cols:
                if i == 0:
                    fire = True
                else:
                    need = fi + s
                    if need > cols:
                        need = cols
                    if above_before >= need:
                        fire = True
            above_before = fi
            if fire:
                decode_step[i, fi] = t
                frontier[i] = fi + 1
                width += 1
        if width == 0:
            return -1, max_width
        if width > max_width:
            max_width = width
        remaining -= width
        t += 1
    return t, max_width


_simulate_core = None


def _get_simulate_core():
    global _simulate_core
    if _simulate_core is None:
        try:
            from numba import njit
            _simulate_core = njit(cache=True)(_simulate_core_py)
        except ImportError:  # pragma: no cover - numba is a declared dependency
            _simulate_core = _simulate_core_py
    return _simulate_core


def simulate_fixed(shape: GridShape, s: int) -> SchedulePlan:
    """Greedy event-simulation oracle for :func:`plan_fixed`.

    Every row decodes its frontier token in any step where the window
    criterion holds against the start-of-step state.  Must realize the
    closed-form plan exactly.
    """
    _check_window(shape, s)
    decode_step = np.full((shape.rows, shape.cols), -1, dtype=np.int64)
    total, width = _get_simulate_core()(shape.rows, shape.cols, s, decode_step)
    if total < 0:
        raise ScheduleError(
            f"deadlock in greedy simulation (H={shape.rows}, W={shape.cols}, "
            f"s={s}); partial schedule:\n{decode_step}")
    return SchedulePlan(decode_step=decode_step, total_steps=int(total),
                        max_batch_width=int(width))
