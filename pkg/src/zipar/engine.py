"""Generation orchestration: sequential, fixed-window, and adaptive modes.

One engine step equals one batched model forward pass, regardless of how
many lanes (decoding rows, probes, verifies) share the batch.  Randomness is
coupled per row: every mode draws row ``i``'s tokens from the same stream,
so schedules that preserve each row's draw order produce identical samples.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .adaptive import ProbeState, begin_probe, verify
from .grid import (DecodeState, GridShape, Position, RowState, TokenGrid,
                   raster_index)
from .model import (AttentionUnsupportedError, ConditioningContext,
                    ModelBackend)
from .sampler import (SamplerConfig, guided_logits, sample_from,
                      to_distribution, total_variation)
from .scheduler import eligible, plan_fixed


@dataclass(frozen=True)
class StepEvent:
    pos: Position
    kind: str  # decode | probe | verify_accept | verify_reject | pre_insert
    token: int | None = None
    ratio: float | None = None
    window: int | None = None
    unconditional: bool = False

    def to_doc(self) -> dict:
        doc: dict = {"pos": [self.pos.row, self.pos.col], "event": self.kind}
        if self.token is not None:
            doc["token"] = self.token
        if self.ratio is not None:
            doc["ratio"] = self.ratio
        if self.window is not None:
            doc["window"] = self.window
        if self.unconditional:
            doc["unconditional"] = True
        return doc


@dataclass
class GenerationResult:
    mode: str
    seed: int
    shape: GridShape
    grid: TokenGrid
    steps: int
    step_log: list[list[StepEvent]]
    accepts: int = 0
    rejects: int = 0
    probes: int = 0
    accept_windows: list[int] = field(default_factory=list)
    max_lanes: int = 0
    wall_time: float = 0.0
    distributions: dict[Position, np.ndarray] = field(default_factory=dict)
    attention_records: list = field(default_factory=list)
    row_start_step: dict[int, int] = field(default_factory=dict)

    @property
    def mean_accept_window(self) -> float | None:
        if not self.accept_windows:
            return None
        return float(np.mean(self.accept_windows))

    def check_step_log(self) -> None:
        """Every image position decoded exactly once; pre-inserts EOR-only."""
        seen: dict[Position, int] = {}
        for record in self.step_log:
            for ev in record:
                if ev.kind in ("decode", "verify_accept"):
                    if ev.pos.col < self.shape.cols:
                        seen[ev.pos] = seen.get(ev.pos, 0) + 1
                elif ev.kind == "pre_insert":
                    if ev.pos.col != self.shape.cols:
                        raise AssertionError(
                            f"pre-insert at non-EOR position {ev.pos}")
        for i in range(self.shape.rows):
            for j in range(self.shape.cols):
                if seen.get(Position(i, j), 0) != 1:
                    raise AssertionError(
                        f"position ({i},{j}) decoded "
                        f"{seen.get(Position(i, j), 0)} times")

    def step_log_doc(self) -> dict:
        return {
            "mode": self.mode,
            "seed": self.seed,
            "shape": {
                "rows": self.shape.rows,
                "cols": self.shape.cols,
                "eor": self.shape.eor,
                "vocab": self.shape.vocab_size,
                "prefix_len": self.shape.prefix_len,
            },
            "steps": self.steps,
            "lanes_per_step": [len(r) for r in self.step_log],
            "events": [[ev.to_doc() for ev in record]
                       for record in self.step_log],
            "accepts": self.accepts,
            "rejects": self.rejects,
            "probes": self.probes,
            "mean_accept_window": self.mean_accept_window,
            "row_start_step": {str(k): v
                               for k, v in sorted(self.row_start_step.items())},
        }

    def step_log_json(self) -> str:
        return json.dumps(self.step_log_doc(), sort_keys=True,
                          separators=(",", ": ")) + "\n"


class _Run:
    """Per-generation bundle: state, caches, and guidance plumbing."""

    def __init__(self, shape: GridShape, backend: ModelBackend,
                 sampler: SamplerConfig, seed: int,
                 prefix_tokens: tuple[int, ...]) -> None:
        self.shape = shape
        self.backend = backend
        self.sampler = sampler
        self.state = DecodeState.fresh(shape, prefix_tokens, seed)
        self.cond = ConditioningContext("conditional", tuple(prefix_tokens))
        self.cache = backend.new_cache(shape, self.cond)
        self.dual = sampler.cfg_scale > 0
        if self.dual:
            null = backend.null_prefix(shape.prefix_len)
            self.uncond = ConditioningContext("unconditional", null)
            self.ucache = backend.new_cache(shape, self.uncond)

    def distributions(self, queries: list[Position]) -> list[np.ndarray]:
        if not queries:
            return []
        logits = self.backend.forward_cached(self.cache, self.state, queries,
                                             self.cond)
        if self.dual:
            ulogits = self.backend.forward_cached(self.ucache, self.state,
                                                  queries, self.uncond)
            logits = [guided_logits(c, u, self.sampler.cfg_scale)
                      for c, u in zip(logits, ulogits)]
        return [to_distribution(l, self.sampler) for l in logits]

    def distribution_with_attention(self, query: Position):
        if not hasattr(self.backend, "query_attention"):
            raise AttentionUnsupportedError(
                f"{type(self.backend).__name__} does not expose attention")
        logits, mass = self.backend.query_attention(self.cache, self.state,
                                                    query, self.cond)
        if self.dual:
            ulogits = self.backend.forward_cached(self.ucache, self.state,
                                                  [query], self.uncond)[0]
            logits = guided_logits(logits, ulogits, self.sampler.cfg_scale)
        return to_distribution(logits, self.sampler), mass

    def commit(self, pos: Position, token: int) -> None:
        self.backend.commit(self.cache, pos, token)
        if self.dual:
            self.backend.commit(self.ucache, pos, token)
        self.state.decode(pos, token)

    def pre_insert_eor(self, row: int, events: list[StepEvent]) -> None:
        shape = self.shape
        pos = Position(row, shape.cols)
        if pos in self.state.values:
            return
        assert shape.eor_token_id is not None
        self.commit(pos, shape.eor_token_id)
        events.append(StepEvent(pos, "pre_insert", token=shape.eor_token_id))


def _finalize_eor(run: _Run, log: list[list[StepEvent]]) -> None:
    if not run.shape.eor:
        return
    tail: list[StepEvent] = []
    for i in range(run.shape.rows):
        run.pre_insert_eor(i, tail)
    if tail:
        log[-1].extend(tail)


def generate_ntp(shape: GridShape, backend: ModelBackend,
                 sampler: SamplerConfig, seed: int,
                 prefix_tokens: tuple[int, ...] = (),
                 collect_attention: bool = False) -> GenerationResult:
    """Strict raster-order decoding, one generated slot per step.

    EOR slots are forced to the predetermined token but still consume one
    forward step each, matching the sequential baseline's step accounting;
    forcing draws no randomness so row streams stay aligned across modes.
    """
    t0 = time.perf_counter()
    run = _Run(shape, backend, sampler, seed, prefix_tokens)
    result = GenerationResult(mode="ntp", seed=seed, shape=shape,
                              grid=None, steps=0, step_log=[])  # type: ignore[arg-type]
    state = run.state
    for i in range(shape.rows):
        state.set_row_state(i, RowState.ACTIVE)
        result.row_start_step[i] = len(result.step_log)
        for j in range(shape.row_span):
            pos = Position(i, j)
            events: list[StepEvent] = []
            if shape.eor and j == shape.cols:
                run.commit(pos, shape.eor_token_id)
                events.append(StepEvent(pos, "decode",
                                        token=shape.eor_token_id))
            else:
                if collect_attention and j == 0 and i >= 1:
                    dist, mass = run.distribution_with_attention(pos)
                    result.attention_records.append((pos, mass))
                else:
                    dist = run.distributions([pos])[0]
                token = sample_from(dist, state.rng_streams[i])
                run.commit(pos, token)
                result.distributions[pos] = dist
                events.append(StepEvent(pos, "decode", token=token))
            result.step_log.append(events)
        state.set_row_state(i, RowState.DONE)
    result.steps = len(result.step_log)
    result.max_lanes = 1
    result.grid = TokenGrid.from_state(state)
    assert result.steps == shape.ntp_step_count()
    result.wall_time = time.perf_counter() - t0
    return result


def generate_fixed(shape: GridShape, s: int, backend: ModelBackend,
                   sampler: SamplerConfig, seed: int,
                   prefix_tokens: tuple[int, ...] = ()) -> GenerationResult:
    """Fixed-window wavefront decoding; realizes the closed-form plan."""
    if not 1 <= s <= shape.cols:
        raise ValueError(f"window {s} outside [1, {shape.cols}]")
    t0 = time.perf_counter()
    run = _Run(shape, backend, sampler, seed, prefix_tokens)
    state = run.state
    result = GenerationResult(mode="fixed", seed=seed, shape=shape,
                              grid=None, steps=0, step_log=[])  # type: ignore[arg-type]
    while not state.all_done():
        events: list[StepEvent] = []
        snap = list(state.frontier)
        lanes: list[tuple[int, int, bool]] = []  # (row, col, starting)
        for i in range(shape.rows):
            st = state.row_state[i]
            if st is RowState.ACTIVE:
                lanes.append((i, state.frontier[i], False))
            elif st is RowState.NOT_STARTED:
                starts = i == 0 or (
                    state.row_state[i - 1] is not RowState.NOT_STARTED
                    and snap[i - 1] >= min(s, shape.cols))
                if starts:
                    if shape.eor and i >= 1:
                        run.pre_insert_eor(i - 1, events)
                    lanes.append((i, 0, True))
                break  # deeper rows cannot act yet
        if not lanes:
            raise AssertionError("fixed-window schedule stalled")
        for i, j, _ in lanes:
            assert eligible(state, shape, s, i, j), (i, j)
        queries = [Position(i, j) for i, j, _ in lanes]
        dists = run.distributions(queries)
        for (i, j, starting), pos, dist in zip(lanes, queries, dists):
            token = sample_from(dist, state.rng_streams[i])
            if starting:
                state.set_row_state(i, RowState.ACTIVE)
                result.row_start_step[i] = len(result.step_log)
            run.commit(pos, token)
            result.distributions[pos] = dist
            events.append(StepEvent(pos, "decode", token=token))
            if state.frontier[i] == shape.cols:
                state.set_row_state(i, RowState.DONE)
        result.max_lanes = max(result.max_lanes, len(queries))
        result.step_log.append(events)
        state.check_invariants()
    _finalize_eor(run, result.step_log)
    result.steps = len(result.step_log)
    result.grid = TokenGrid.from_state(state)
    plan = plan_fixed(shape, s)
    assert result.steps == plan.total_steps, (result.steps, plan.total_steps)
    assert result.max_lanes == plan.max_batch_width
    result.wall_time = time.perf_counter() - t0
    return result


def generate_adaptive(shape: GridShape, s_min: int, backend: ModelBackend,
                      sampler: SamplerConfig, seed: int,
                      prefix_tokens: tuple[int, ...] = ()) -> GenerationResult:
    """Adaptive-window decoding with probe/verify row starts.

    A row begins probing one step after the row above has decoded its first
    ``s_min`` tokens; accepted drafts are committed at the verify step.  When
    the probe window already spans the full previous row, the draft is exact
    and is committed at the probe step without a verify round.
    """
    if not 1 <= s_min <= shape.cols:
        raise ValueError(f"minimum window {s_min} outside [1, {shape.cols}]")
    t0 = time.perf_counter()
    run = _Run(shape, backend, sampler, seed, prefix_tokens)
    state = run.state
    result = GenerationResult(mode="adaptive", seed=seed, shape=shape,
                              grid=None, steps=0, step_log=[])  # type: ignore[arg-type]
    pending: dict[int, ProbeState] = {}
    while not state.all_done():
        events: list[StepEvent] = []
        snap = list(state.frontier)
        decode_lanes: list[tuple[int, int, bool]] = []
        verify_rows: list[int] = []
        probe_rows: list[tuple[int, int]] = []  # (row, window)
        for i in range(shape.rows):
            st = state.row_state[i]
            if st is RowState.ACTIVE:
                decode_lanes.append((i, state.frontier[i], False))
            elif st is RowState.PROBING:
                verify_rows.append(i)
            elif st is RowState.NOT_STARTED:
                if i == 0:
                    decode_lanes.append((0, 0, True))
                elif (state.row_state[i - 1] is not RowState.NOT_STARTED
                      and snap[i - 1] >= s_min):
                    k = min(snap[i - 1], shape.cols)
                    if shape.eor:
                        run.pre_insert_eor(i - 1, events)
                    if k == shape.cols:
                        # Full previous-row context: the draw is exact.
                        decode_lanes.append((i, 0, True))
                    else:
                        probe_rows.append((i, k))
                break
        queries = ([Position(i, j) for i, j, _ in decode_lanes]
                   + [Position(i, 0) for i in verify_rows]
                   + [Position(i, 0) for i, _ in probe_rows])
        if not queries:
            raise AssertionError("adaptive schedule stalled")
        dists = run.distributions(queries)
        n_dec = len(decode_lanes)
        n_ver = len(verify_rows)

        for (i, j, starting), dist in zip(decode_lanes, dists[:n_dec]):
            pos = Position(i, j)
            token = sample_from(dist, state.rng_streams[i])
            if starting:
                state.set_row_state(i, RowState.ACTIVE)
                result.row_start_step[i] = len(result.step_log)
            run.commit(pos, token)
            result.distributions[pos] = dist
            window = shape.cols if (starting and i > 0) else None
            events.append(StepEvent(pos, "decode", token=token, window=window))
            if state.frontier[i] == shape.cols:
                state.set_row_state(i, RowState.DONE)

        for i, p_next in zip(verify_rows, dists[n_dec:n_dec + n_ver]):
            probe = pending[i]
            w_next = probe.window + 1
            assert w_next == min(snap[i - 1], shape.cols), (w_next, snap[i - 1])
            outcome = verify(probe, p_next, state.rng_streams[i], shape)
            pos = Position(i, 0)
            if outcome.accepted:
                del pending[i]
                state.set_row_state(i, RowState.ACTIVE)
                result.row_start_step[i] = len(result.step_log)
                run.commit(pos, outcome.token)
                result.distributions[pos] = p_next
                result.accepts += 1
                window = shape.cols if outcome.unconditional else probe.window
                result.accept_windows.append(window)
                events.append(StepEvent(pos, "verify_accept",
                                        token=outcome.token,
                                        ratio=outcome.ratio, window=window,
                                        unconditional=outcome.unconditional))
                if state.frontier[i] == shape.cols:
                    state.set_row_state(i, RowState.DONE)
            else:
                pending[i] = outcome.next_probe
                result.rejects += 1
                events.append(StepEvent(pos, "verify_reject",
                                        ratio=outcome.ratio,
                                        window=probe.window))

        for (i, k), dist in zip(probe_rows, dists[n_dec + n_ver:]):
            probe = begin_probe(i, k, dist, state.rng_streams[i])
            pending[i] = probe
            state.set_row_state(i, RowState.PROBING)
            result.probes += 1
            events.append(StepEvent(Position(i, 0), "probe", window=k))

        result.max_lanes = max(result.max_lanes, len(queries))
        result.step_log.append(events)
        state.check_invariants()
    _finalize_eor(run, result.step_log)
    result.steps = len(result.step_log)
    result.grid = TokenGrid.from_state(state)
    result.wall_time = time.perf_counter() - t0
    return result


def generate(mode: str, shape: GridShape, backend: ModelBackend,
             sampler: SamplerConfig, seed: int, window: int | None = None,
             prefix_tokens: tuple[int, ...] = (),
             collect_attention: bool = False) -> GenerationResult:
    if mode == "ntp":
        return generate_ntp(shape, backend, sampler, seed, prefix_tokens,
                            collect_attention=collect_attention)
    if mode == "fixed":
        if window is None:
            raise ValueError("fixed mode requires a window size")
        return generate_fixed(shape, window, backend, sampler, seed,
                              prefix_tokens)
    if mode == "adaptive":
        if window is None:
            raise ValueError("adaptive mode requires a minimum window size")
        return generate_adaptive(shape, window, backend, sampler, seed,
                                 prefix_tokens)
    raise ValueError(f"unknown mode {mode!r}")


def equivalence_report(shape: GridShape, backend: ModelBackend,
                       sampler: SamplerConfig, s_list: list[int],
                       seeds: list[int], modes: tuple[str, ...] = ("fixed",),
                       prefix_tokens: tuple[int, ...] = ()) -> dict:
    """Couple each schedule to a sequential baseline run and measure drift.

    Per (mode, window, seed): token agreement rate against the baseline,
    per-position total-variation distance between the recorded sampling
    distributions, and the step counts.
    """
    positions = [Position(i, j) for i in range(shape.rows)
                 for j in range(shape.cols)]
    entries = []
    for seed in seeds:
        base = generate_ntp(shape, backend, sampler, seed, prefix_tokens)
        for mode in modes:
            for s in s_list:
                res = generate(mode, shape, backend, sampler, seed,
                               window=s, prefix_tokens=prefix_tokens)
                agree = sum(
                    base.grid.token_at(p.row, p.col) == res.grid.token_at(p.row, p.col)
                    for p in positions) / len(positions)
                tvs = [total_variation(base.distributions[p],
                                       res.distributions[p])
                       for p in positions]
                entries.append({
                    "mode": mode,
                    "window": s,
                    "seed": seed,
                    "steps": res.steps,
                    "ntp_steps": base.steps,
                    "agreement": agree,
                    "mean_tv": float(np.mean(tvs)),
                    "max_tv": float(np.max(tvs)),
                    "nonzero_tv_positions": int(sum(tv > 0 for tv in tvs)),
                    "accepts": res.accepts,
                    "rejects": res.rejects,
                })
    summary = []
    for mode in modes:
        for s in s_list:
            sel = [e for e in entries
                   if e["mode"] == mode and e["window"] == s]
            summary.append({
                "mode": mode,
                "window": s,
                "mean_agreement": float(np.mean([e["agreement"] for e in sel])),
                "mean_tv": float(np.mean([e["mean_tv"] for e in sel])),
                "mean_steps": float(np.mean([e["steps"] for e in sel])),
            })
    return {
        "shape": {"rows": shape.rows, "cols": shape.cols, "eor": shape.eor,
                  "vocab": shape.vocab_size},
        "seeds": list(seeds),
        "entries": entries,
        "summary": summary,
    }
