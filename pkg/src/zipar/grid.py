"""Token grid coordinates, raster linearization, and mutable decode state.

The grid is an H x W field of image tokens, optionally followed by one
end-of-row (EOR) slot per row at column index W.  Prefix tokens (class id or
prompt) occupy raster indices 0..P-1 and are inputs, never generated.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum

import numpy as np


class CoordinateError(ValueError):
    """Raised for positions outside the grid's coordinate system."""


@dataclass(frozen=True)
class GridShape:
    """Static geometry of a token grid.

    ``eor_token_id`` is required iff ``eor`` is true; the EOR slot is modeled
    as column index ``cols`` so that the raster index arithmetic covers it.
    """

    rows: int
    cols: int
    prefix_len: int = 0
    eor: bool = False
    vocab_size: int = 256
    eor_token_id: int | None = None

    def __post_init__(self) -> None:
        if self.rows < 1 or self.cols < 1:
            raise ValueError("grid must have at least one row and one column")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be at least 2")
        if self.prefix_len < 0:
            raise ValueError("prefix_len must be nonnegative")
        if self.eor:
            if self.eor_token_id is None:
                raise ValueError("eor_token_id required when eor is enabled")
            if not 0 <= self.eor_token_id < self.vocab_size:
                raise ValueError("eor_token_id must lie in [0, vocab_size)")
        elif self.eor_token_id is not None:
            raise ValueError("eor_token_id given but eor is disabled")

    @property
    def row_span(self) -> int:
        """Number of raster slots per row (image tokens plus EOR slot)."""
        return self.cols + (1 if self.eor else 0)

    @property
    def raster_len(self) -> int:
        """Total sequence length: prefix plus all generated slots."""
        return self.prefix_len + self.rows * self.row_span

    def ntp_step_count(self) -> int:
        """Forward passes needed to generate every image and EOR token
        one at a time in raster order (prefix tokens are inputs)."""
        return self.rows * self.row_span


@dataclass(frozen=True, order=True)
class Position:
    """0-based grid coordinate; ``col == cols`` addresses the EOR slot."""

    row: int
    col: int


def raster_index(shape: GridShape, pos: Position) -> int:
    """Map a position to its slot in generation order."""
    if not 0 <= pos.row < shape.rows:
        raise CoordinateError(f"row {pos.row} outside [0, {shape.rows})")
    if not 0 <= pos.col < shape.row_span:
        raise CoordinateError(f"col {pos.col} outside [0, {shape.row_span})")
    return shape.prefix_len + pos.row * shape.row_span + pos.col


def position_of(shape: GridShape, raster: int) -> Position:
    """Inverse of :func:`raster_index` for generated slots."""
    off = raster - shape.prefix_len
    if off < 0 or off >= shape.rows * shape.row_span:
        raise CoordinateError(f"raster index {raster} is not a generated slot")
    return Position(off // shape.row_span, off % shape.row_span)


def ntp_step_count(shape: GridShape) -> int:
    return shape.ntp_step_count()


class RowState(Enum):
    NOT_STARTED = "not_started"
    PROBING = "probing"
    ACTIVE = "active"
    DONE = "done"


_ALLOWED_TRANSITIONS = {
    RowState.NOT_STARTED: {RowState.PROBING, RowState.ACTIVE},
    RowState.PROBING: {RowState.PROBING, RowState.ACTIVE},
    RowState.ACTIVE: {RowState.ACTIVE, RowState.DONE},
    RowState.DONE: set(),
}


@dataclass
class DecodeState:
    """The set of decoded tokens with values, plus per-row bookkeeping.

    Decoded image tokens in each row always form a contiguous prefix:
    ``values`` contains ``(i, j)`` for ``j < frontier[i]`` plus any
    pre-inserted EOR slot.  Mutated only by the engine's control thread.
    """

    shape: GridShape
    prefix_tokens: tuple[int, ...]
    values: dict[Position, int] = field(default_factory=dict)
    frontier: list[int] = field(default_factory=list)
    row_state: list[RowState] = field(default_factory=list)
    rng_streams: list[np.random.Generator] = field(default_factory=list)

    @classmethod
    def fresh(cls, shape: GridShape, prefix_tokens: tuple[int, ...] = (),
              master_seed: int = 0) -> "DecodeState":
        if len(prefix_tokens) != shape.prefix_len:
            raise ValueError(
                f"expected {shape.prefix_len} prefix tokens, got {len(prefix_tokens)}")
        # One independent stream per row lane, derived from (master seed, row),
        # so schedules that reorder rows still draw identically per row.
        streams = [np.random.default_rng([master_seed, i]) for i in range(shape.rows)]
        return cls(
            shape=shape,
            prefix_tokens=tuple(prefix_tokens),
            values={},
            frontier=[0] * shape.rows,
            row_state=[RowState.NOT_STARTED] * shape.rows,
            rng_streams=streams,
        )

    def decode(self, pos: Position, token: int) -> None:
        """Record a committed token; image tokens must extend the row prefix."""
        if pos in self.values:
            raise ValueError(f"{pos} already decoded")
        if not 0 <= token < self.shape.vocab_size:
            raise ValueError(f"token {token} outside vocabulary")
        if pos.col == self.shape.cols:
            if not self.shape.eor:
                raise CoordinateError("EOR slot on a grid without EOR")
            self.values[pos] = token
            return
        if pos.col != self.frontier[pos.row]:
            raise ValueError(
                f"decode at {pos} breaks row contiguity "
                f"(frontier is {self.frontier[pos.row]})")
        self.values[pos] = token
        self.frontier[pos.row] += 1

    def set_row_state(self, row: int, new: RowState) -> None:
        cur = self.row_state[row]
        if new is not cur and new not in _ALLOWED_TRANSITIONS[cur]:
            raise ValueError(f"illegal row transition {cur} -> {new}")
        self.row_state[row] = new

    def all_done(self) -> bool:
        return all(s is RowState.DONE for s in self.row_state)

    def check_invariants(self) -> None:
        """Debug assertions: contiguous prefixes and non-overtaking rows."""
        shape = self.shape
        for i in range(shape.rows):
            for j in range(shape.cols):
                present = Position(i, j) in self.values
                if present != (j < self.frontier[i]):
                    raise AssertionError(
                        f"row {i} is not a contiguous prefix at col {j}")
            if i > 0 and self.frontier[i] > self.frontier[i - 1]:
                raise AssertionError(
                    f"row {i} overtook row {i - 1}: "
                    f"{self.frontier[i]} > {self.frontier[i - 1]}")


@dataclass(frozen=True)
class TokenGrid:
    """A fully decoded grid of image tokens (EOR slots omitted)."""

    rows: int
    cols: int
    eor: bool
    vocab: int
    tokens: tuple[int, ...]  # row-major, rows * cols entries

    def __post_init__(self) -> None:
        if len(self.tokens) != self.rows * self.cols:
            raise ValueError("token count does not match grid dimensions")

    @classmethod
    def from_state(cls, state: DecodeState) -> "TokenGrid":
        shape = state.shape
        toks = []
        for i in range(shape.rows):
            for j in range(shape.cols):
                toks.append(state.values[Position(i, j)])
        return cls(shape.rows, shape.cols, shape.eor, shape.vocab_size, tuple(toks))

    def token_at(self, row: int, col: int) -> int:
        return self.tokens[row * self.cols + col]

    def to_array(self) -> np.ndarray:
        return np.asarray(self.tokens, dtype=np.int64).reshape(self.rows, self.cols)

    def to_json(self) -> str:
        doc = {
            "rows": self.rows,
            "cols": self.cols,
            "eor": self.eor,
            "vocab": self.vocab,
            "tokens": list(self.tokens),
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ": ")) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "TokenGrid":
        doc = json.loads(text)
        return cls(
            rows=int(doc["rows"]),
            cols=int(doc["cols"]),
            eor=bool(doc["eor"]),
            vocab=int(doc["vocab"]),
            tokens=tuple(int(t) for t in doc["tokens"]),
        )
