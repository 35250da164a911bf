import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from zipar import GridShape, ProbeState, VerifyOutcome, begin_probe, verify
from zipar.adaptive import RESIDUAL_EPS


class _FixedStream:
    """Deterministic stand-in for a Generator: yields preset uniforms."""

    def __init__(self, values):
        self._values = list(values)

    def random(self):
        return self._values.pop(0)


def _shape(cols=8):
    return GridShape(rows=4, cols=cols, vocab_size=4)


def test_begin_probe_draws_from_given_distribution():
    dist = np.array([0.0, 0.0, 1.0, 0.0])
    probe = begin_probe(1, 2, dist, np.random.default_rng(0))
    assert probe.draft == 2
    assert probe.window == 2
    assert probe.probe_count == 1
    assert probe.draft_dist is dist


def test_verify_accepts_when_ratio_dominates():
    draft_dist = np.array([0.5, 0.5, 0.0, 0.0])
    p_next = np.array([0.8, 0.2, 0.0, 0.0])
    probe = ProbeState(row=1, window=2, draft=0, draft_dist=draft_dist)
    # ratio = min(1, 0.8/0.5) = 1: accepted regardless of the uniform.
    out = verify(probe, p_next, _FixedStream([0.999]), _shape())
    assert out.accepted and out.token == 0 and out.ratio == 1.0
    assert out.next_probe is None and not out.unconditional


def test_verify_rejects_and_resamples_from_residual():
    draft_dist = np.array([0.5, 0.5, 0.0, 0.0])
    p_next = np.array([0.1, 0.3, 0.6, 0.0])
    probe = ProbeState(row=1, window=2, draft=0, draft_dist=draft_dist)
    # ratio = 0.1/0.5 = 0.2; uniform 0.9 rejects.  Residual is
    # max(0, p_next - draft_dist) = [0, 0, 0.6, 0] -> resample must give 2.
    out = verify(probe, p_next, _FixedStream([0.9, 0.5]), _shape())
    assert not out.accepted
    assert out.ratio == pytest.approx(0.2)
    assert out.next_probe.draft == 2
    assert out.next_probe.window == 3
    assert out.next_probe.probe_count == 2
    # The rejected draft's reference distribution becomes p_next.
    assert np.array_equal(out.next_probe.draft_dist, p_next)


def test_verify_identical_distributions_accept_without_consuming_extra():
    dist = np.array([0.25, 0.25, 0.25, 0.25])
    probe = ProbeState(row=1, window=2, draft=3, draft_dist=dist)
    out = verify(probe, dist.copy(), _FixedStream([0.999999]), _shape())
    # Residual mass is 0 < RESIDUAL_EPS: accept even though ratio check fails
    # is impossible here (ratio == 1), the eps path is exercised with ratio<1
    # below.
    assert out.accepted and out.token == 3


def test_verify_eps_guard_on_negligible_residual():
    draft_dist = np.array([0.5, 0.5, 0.0, 0.0])
    p_next = draft_dist + np.array([RESIDUAL_EPS / 10, -RESIDUAL_EPS / 10, 0, 0])
    probe = ProbeState(row=1, window=2, draft=1, draft_dist=draft_dist)
    out = verify(probe, p_next, _FixedStream([0.9999999999]), _shape())
    assert out.accepted and out.token == 1


def test_verify_zero_probability_draft():
    draft_dist = np.array([1.0, 0.0, 0.0, 0.0])
    p_next = np.array([0.5, 0.5, 0.0, 0.0])
    probe = ProbeState(row=1, window=2, draft=1, draft_dist=draft_dist)
    # denom = 0 but num > 0: limit ratio is 1, accept.
    out = verify(probe, p_next, _FixedStream([0.5]), _shape())
    assert out.accepted and out.ratio == 1.0

    p_zero = np.array([1.0, 0.0, 0.0, 0.0])
    probe2 = ProbeState(row=1, window=2, draft=1, draft_dist=p_zero)
    p_next2 = np.array([0.6, 0.0, 0.4, 0.0])
    out2 = verify(probe2, p_next2, _FixedStream([0.0, 0.5]), _shape())
    assert not out2.accepted and out2.ratio == 0.0


def test_verify_full_width_commits_fresh_sample():
    shape = _shape(cols=3)
    draft_dist = np.array([1.0, 0.0, 0.0, 0.0])
    p_next = np.array([0.0, 0.0, 0.0, 1.0])
    probe = ProbeState(row=1, window=2, draft=0, draft_dist=draft_dist)
    out = verify(probe, p_next, np.random.default_rng(0), shape)
    assert out.accepted and out.unconditional
    assert out.token == 3  # drawn from p_next, not the stale draft
    assert out.ratio == 1.0


@given(seed=st.integers(0, 10_000))
@settings(max_examples=200, deadline=None)
def test_post_verify_marginal_single_round_exact(seed):
    """One accept/reject round leaves the token ~ p_next (checked pointwise
    by integrating over the uniform analytically for each draft value)."""
    rng = np.random.default_rng(seed)
    v = 4
    draft_dist = rng.dirichlet(np.ones(v))
    p_next = rng.dirichlet(np.ones(v))
    residual = np.maximum(p_next - draft_dist, 0.0)
    mass = residual.sum()
    marginal = np.zeros(v)
    for draft in range(v):
        ratio = min(1.0, p_next[draft] / draft_dist[draft])
        marginal[draft] += draft_dist[draft] * ratio
        if mass > RESIDUAL_EPS:
            marginal += draft_dist[draft] * (1 - ratio) * residual / mass
    np.testing.assert_allclose(marginal, p_next, atol=1e-12)
