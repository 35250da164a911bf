import numpy as np
import pytest

from zipar import (GridShape, LocalOracle, Position, SamplerConfig,
                   ToyTransformer, equivalence_report, generate,
                   generate_adaptive, generate_fixed, generate_ntp,
                   plan_fixed)

SAMPLER = SamplerConfig()


def _toy(vocab=16, seed=0):
    return ToyTransformer(vocab_size=vocab, max_positions=512, seed=seed)


def test_ntp_step_count_and_single_lane():
    shape = GridShape(rows=3, cols=4, vocab_size=16)
    res = generate_ntp(shape, _toy(), SAMPLER, seed=1)
    assert res.steps == 12
    assert all(len(r) == 1 for r in res.step_log)
    assert res.max_lanes == 1
    res.check_step_log()


def test_ntp_is_seed_reproducible():
    shape = GridShape(rows=3, cols=3, vocab_size=16)
    a = generate_ntp(shape, _toy(), SAMPLER, seed=9)
    b = generate_ntp(shape, _toy(), SAMPLER, seed=9)
    c = generate_ntp(shape, _toy(), SAMPLER, seed=10)
    assert a.grid == b.grid
    assert a.grid != c.grid


def test_ntp_eor_slots_forced_and_counted():
    shape = GridShape(rows=2, cols=3, eor=True, vocab_size=16, eor_token_id=15)
    res = generate_ntp(shape, _toy(), SAMPLER, seed=0)
    assert res.steps == 2 * 4  # EOR slots consume a step each
    eor_events = [ev for rec in res.step_log for ev in rec
                  if ev.pos.col == shape.cols]
    assert len(eor_events) == 2
    assert all(ev.token == 15 for ev in eor_events)


def test_fixed_full_window_is_bit_identical_to_ntp():
    shape = GridShape(rows=6, cols=6, vocab_size=16)
    base = generate_ntp(shape, _toy(), SAMPLER, seed=4)
    full = generate_fixed(shape, 6, _toy(), SAMPLER, seed=4)
    assert full.grid == base.grid
    assert full.steps == base.steps


def test_fixed_realizes_planned_steps_and_width():
    shape = GridShape(rows=5, cols=7, vocab_size=16)
    for s in (1, 2, 3, 7):
        res = generate_fixed(shape, s, _toy(), SAMPLER, seed=2)
        plan = plan_fixed(shape, s)
        assert res.steps == plan.total_steps
        assert res.max_lanes == plan.max_batch_width
        res.check_step_log()


def test_fixed_eor_pre_inserted_without_steps():
    shape = GridShape(rows=3, cols=4, eor=True, vocab_size=16, eor_token_id=0)
    res = generate_fixed(shape, 2, _toy(), SAMPLER, seed=1)
    assert res.steps == plan_fixed(shape, 2).total_steps  # EOR costs nothing
    pre = [ev for rec in res.step_log for ev in rec if ev.kind == "pre_insert"]
    assert len(pre) == 3
    assert all(ev.pos.col == shape.cols for ev in pre)
    res.check_step_log()


def test_fixed_window_validation():
    shape = GridShape(rows=2, cols=3, vocab_size=16)
    with pytest.raises(ValueError):
        generate_fixed(shape, 0, _toy(), SAMPLER, seed=0)
    with pytest.raises(ValueError):
        generate_fixed(shape, 4, _toy(), SAMPLER, seed=0)


def test_adaptive_small_grid_step_count_with_exact_backend():
    """2x3 grid, minimum window 1, radius-1 locality: the first verify
    always accepts, so the trace is fully determined.

    step 0: (0,0); step 1: (0,1)+probe row 1; step 2: (0,2)+accept (1,0);
    steps 3,4: (1,1),(1,2).  Sequential needs 6 steps, window-1 fixed 4.
    """
    shape = GridShape(rows=2, cols=3, vocab_size=16)
    oracle = LocalOracle(vocab_size=16, radius=1, seed=0)
    adaptive = generate_adaptive(shape, 1, oracle, SAMPLER, seed=0)
    fixed = generate_fixed(shape, 1, oracle, SAMPLER, seed=0)
    ntp = generate_ntp(shape, oracle, SAMPLER, seed=0)
    assert adaptive.steps == 5
    assert fixed.steps == 4
    assert ntp.steps == 6
    assert adaptive.rejects == 0
    assert adaptive.accepts == 1
    adaptive.check_step_log()


def test_adaptive_steps_bracketed_between_fixed_and_ntp():
    for h, w, s_min in [(4, 4, 2), (5, 7, 3), (6, 6, 1)]:
        shape = GridShape(rows=h, cols=w, vocab_size=16)
        for seed in (0, 1, 2):
            ada = generate_adaptive(shape, s_min, _toy(), SAMPLER, seed=seed)
            fix = generate_fixed(shape, s_min, _toy(), SAMPLER, seed=seed)
            ntp = generate_ntp(shape, _toy(), SAMPLER, seed=seed)
            assert fix.steps <= ada.steps <= ntp.steps, (h, w, s_min, seed)
            ada.check_step_log()


def test_adaptive_full_min_window_matches_ntp_bitwise():
    shape = GridShape(rows=4, cols=4, vocab_size=16)
    base = generate_ntp(shape, _toy(), SAMPLER, seed=6)
    ada = generate_adaptive(shape, 4, _toy(), SAMPLER, seed=6)
    assert ada.grid == base.grid
    assert ada.rejects == 0


def test_adaptive_oracle_accept_ratios_are_exactly_one():
    """With locality radius <= minimum window every verify distribution
    equals the draft distribution, so the ratio is exactly 1."""
    shape = GridShape(rows=5, cols=6, vocab_size=16)
    oracle = LocalOracle(vocab_size=16, radius=2, seed=3)
    res = generate_adaptive(shape, 2, oracle, SAMPLER, seed=1)
    assert res.rejects == 0
    ratios = [ev.ratio for rec in res.step_log for ev in rec
              if ev.kind == "verify_accept" and not ev.unconditional]
    assert ratios and all(r == 1.0 for r in ratios)


def test_adaptive_eor_grid_completes():
    shape = GridShape(rows=3, cols=4, eor=True, vocab_size=16, eor_token_id=0)
    res = generate_adaptive(shape, 2, _toy(), SAMPLER, seed=0)
    res.check_step_log()
    assert res.steps <= shape.ntp_step_count()


def test_per_row_randomness_coupling():
    """Row i's draws depend only on (seed, row) and the per-row draw order,
    so full-window fixed and sequential agree row by row."""
    shape = GridShape(rows=4, cols=5, vocab_size=16)
    base = generate_ntp(shape, _toy(), SAMPLER, seed=11)
    full = generate_fixed(shape, 5, _toy(), SAMPLER, seed=11)
    for i in range(4):
        row_a = [base.grid.token_at(i, j) for j in range(5)]
        row_b = [full.grid.token_at(i, j) for j in range(5)]
        assert row_a == row_b, i


def test_generate_dispatcher():
    shape = GridShape(rows=2, cols=2, vocab_size=16)
    with pytest.raises(ValueError):
        generate("other", shape, _toy(), SAMPLER, seed=0)
    with pytest.raises(ValueError):
        generate("fixed", shape, _toy(), SAMPLER, seed=0)  # no window
    with pytest.raises(ValueError):
        generate("adaptive", shape, _toy(), SAMPLER, seed=0)
    res = generate("ntp", shape, _toy(), SAMPLER, seed=0)
    assert res.mode == "ntp"


def test_step_log_json_is_canonical():
    shape = GridShape(rows=2, cols=2, vocab_size=16)
    a = generate_ntp(shape, _toy(), SAMPLER, seed=0).step_log_json()
    b = generate_ntp(shape, _toy(), SAMPLER, seed=0).step_log_json()
    assert a == b
    import json
    doc = json.loads(a)
    assert doc["mode"] == "ntp"
    assert doc["steps"] == 4
    assert doc["lanes_per_step"] == [1, 1, 1, 1]


def test_cfg_guidance_changes_samples_but_not_step_counts():
    shape = GridShape(rows=3, cols=3, prefix_len=1, vocab_size=16)
    plain = generate_ntp(shape, _toy(), SAMPLER, seed=2, prefix_tokens=(5,))
    guided = generate_ntp(shape, _toy(), SamplerConfig(cfg_scale=4.0),
                          seed=2, prefix_tokens=(5,))
    assert plain.steps == guided.steps
    assert plain.grid != guided.grid


def test_equivalence_report_oracle_exact_when_window_covers_radius():
    shape = GridShape(rows=5, cols=5, vocab_size=16)
    oracle = LocalOracle(vocab_size=16, radius=2, seed=0)
    report = equivalence_report(shape, oracle, SAMPLER, s_list=[2, 5],
                                seeds=[0, 1])
    for entry in report["entries"]:
        assert entry["agreement"] == 1.0
        assert entry["mean_tv"] == 0.0
        assert entry["steps"] <= entry["ntp_steps"]
    assert len(report["entries"]) == 4
    assert len(report["summary"]) == 2


def test_equivalence_report_toy_drift_grows_as_window_shrinks():
    shape = GridShape(rows=6, cols=6, vocab_size=16)
    report = equivalence_report(shape, _toy(), SAMPLER, s_list=[1, 6],
                                seeds=[0, 1, 2])
    by_window = {r["window"]: r for r in report["summary"]}
    assert by_window[6]["mean_tv"] == 0.0
    assert by_window[6]["mean_agreement"] == 1.0
    assert by_window[1]["mean_tv"] > 0.0
