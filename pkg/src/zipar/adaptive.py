"""Adaptive window assignment: probe/verify state machine for row starts.

A new row's first token is drafted under the current window, then re-checked
one step later against the distribution obtained with the window enlarged by
one.  The draft is accepted with probability min(1, p_next/p_draft) evaluated
at the drafted token; on rejection a replacement is drawn from the clipped
residual distribution and verified again in the next step.  One verify round
leaves the post-verify token distributed exactly as p_next.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import GridShape
from .sampler import SamplerConfig, sample_from

# Residual mass below this is treated as "distributions identical": rejection
# would be measure-zero, so the draft is accepted outright.
RESIDUAL_EPS = 1e-12


@dataclass(frozen=True)
class ProbeState:
    """Pending draft for the first token of ``row``.

    ``draft_dist`` is the exact distribution the current draft was drawn
    from (the initial probe distribution or, after a rejection, the residual
    source distribution recorded as the new reference).
    """

    row: int
    window: int
    draft: int
    draft_dist: np.ndarray
    probe_count: int = 1


@dataclass(frozen=True)
class VerifyOutcome:
    accepted: bool
    token: int | None
    ratio: float
    next_probe: "ProbeState | None"
    unconditional: bool = False


def begin_probe(row: int, window: int, dist: np.ndarray,
                stream: np.random.Generator) -> ProbeState:
    """Draw the initial draft for a row start under ``window``."""
    draft = sample_from(dist, stream)
    return ProbeState(row=row, window=window, draft=draft, draft_dist=dist)


def verify(probe: ProbeState, p_next: np.ndarray,
           stream: np.random.Generator, shape: GridShape) -> VerifyOutcome:
    """Acceptance test against the window-(k+1) distribution.

    When the enlarged window reaches the full row width the previous row is
    completely generated, expansion terminates, and the stale draft is
    replaced by a fresh draw from the exact full-context distribution.
    """
    w_next = probe.window + 1
    if w_next >= shape.cols:
        token = sample_from(p_next, stream)
        return VerifyOutcome(accepted=True, token=token, ratio=1.0,
                             next_probe=None, unconditional=True)

    denom = float(probe.draft_dist[probe.draft])
    num = float(p_next[probe.draft])
    if denom <= 0.0:
        # Limit of the acceptance ratio at a zero-probability draft.
        ratio = 1.0 if num > 0.0 else 0.0
    else:
        ratio = min(1.0, num / denom)

    residual = np.maximum(p_next - probe.draft_dist, 0.0)
    mass = float(residual.sum())
    r = stream.random()
    if r < ratio or mass < RESIDUAL_EPS:
        return VerifyOutcome(accepted=True, token=probe.draft, ratio=ratio,
                             next_probe=None)
    new_draft = sample_from(residual / mass, stream)
    return VerifyOutcome(
        accepted=False, token=None, ratio=ratio,
        next_probe=ProbeState(row=probe.row, window=w_next, draft=new_draft,
                              draft_dist=p_next,
                              probe_count=probe.probe_count + 1))


def run_adaptive(shape: GridShape, s_min: int, backend, sampler: SamplerConfig,
                 seed: int, prefix_tokens: tuple[int, ...] = ()):
    """Full adaptive-window generation; see ``engine.generate_adaptive``."""
    from . import engine

    result = engine.generate_adaptive(shape, s_min, backend, sampler, seed,
                                      prefix_tokens=prefix_tokens)
    return result.grid, result.step_log
