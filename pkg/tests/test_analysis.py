import numpy as np
import pytest

from zipar import (AttentionRecord, GridShape, Position, SamplerConfig,
                   ToyTransformer, collect_attention, min_window_for_mass,
                   raster_index, step_table)
from zipar.analysis import AttentionDomainError


def _record(shape, row, masses):
    """Build a record for query (row, 0) with given raster-index masses."""
    mass = np.zeros(shape.raster_len)
    for raster, m in masses.items():
        mass[raster] = m
    return AttentionRecord(query=Position(row, 0), mass=mass)


def test_record_validation():
    with pytest.raises(ValueError):
        AttentionRecord(query=Position(1, 0), mass=np.array([0.4, 0.4]))
    with pytest.raises(ValueError):
        AttentionRecord(query=Position(1, 0), mass=np.array([1.5, -0.5]))


def test_min_window_all_mass_on_row_head():
    shape = GridShape(rows=2, cols=4, vocab_size=16)
    # All mass on (0,0): excluding the tail from column 1 on loses nothing.
    rec = _record(shape, 1, {raster_index(shape, Position(0, 0)): 1.0})
    assert min_window_for_mass(rec, shape, 0.95) == 1


def test_min_window_mass_on_row_tail_forces_full_width():
    shape = GridShape(rows=2, cols=4, vocab_size=16)
    rec = _record(shape, 1, {raster_index(shape, Position(0, 3)): 1.0})
    assert min_window_for_mass(rec, shape, 0.95) == 4


def test_min_window_partial_tail_mass():
    shape = GridShape(rows=2, cols=4, vocab_size=16)
    rec = _record(shape, 1, {
        raster_index(shape, Position(0, 0)): 0.5,
        raster_index(shape, Position(0, 1)): 0.47,
        raster_index(shape, Position(0, 3)): 0.03,
    })
    # Window 1 excludes cols 1..3 (mass 0.5 > 0.05 budget); window 2
    # excludes cols 2..3 (mass 0.03 <= 0.05) -> 2.
    assert min_window_for_mass(rec, shape, 0.95) == 2


def test_min_window_rejects_bad_inputs():
    shape = GridShape(rows=2, cols=4, vocab_size=16)
    rec = _record(shape, 1, {0: 1.0})
    with pytest.raises(ValueError):
        min_window_for_mass(rec, shape, 1.0)
    bad = AttentionRecord(query=Position(0, 0),
                          mass=np.eye(1, shape.raster_len, 0).ravel())
    with pytest.raises(AttentionDomainError):
        min_window_for_mass(bad, shape, 0.9)
    bad2 = AttentionRecord(query=Position(1, 2),
                           mass=np.eye(1, shape.raster_len, 0).ravel())
    with pytest.raises(AttentionDomainError):
        min_window_for_mass(bad2, shape, 0.9)


def test_collect_attention_one_record_per_row_start():
    shape = GridShape(rows=4, cols=4, vocab_size=16)
    model = ToyTransformer(vocab_size=16, max_positions=64, seed=0)
    records = collect_attention(model, shape, seed=0)
    assert len(records) == 3  # rows 1..3
    assert [r.query for r in records] == [Position(i, 0) for i in (1, 2, 3)]
    for rec in records:
        np.testing.assert_allclose(rec.mass.sum(), 1.0, atol=1e-9)
        # Mass only on strictly-preceding rasters.
        t = raster_index(shape, rec.query)
        assert np.all(rec.mass[t:] == 0)
        assert 1 <= min_window_for_mass(rec, shape, 0.9) <= shape.cols


def test_step_table_arithmetic():
    table = step_table([(24, 24)], [1, 12, 24], eor=False)
    by_window = {r["window"]: r for r in table}
    assert by_window[1]["fixed_steps"] == 47      # 23*1 + 24
    assert by_window[12]["fixed_steps"] == 300    # 23*12 + 24
    assert by_window[24]["fixed_steps"] == 576
    assert by_window[24]["ntp_steps"] == 576
    assert by_window[24]["reduction_pct"] == 0.0
    assert by_window[1]["reduction_pct"] == pytest.approx(
        100.0 * (1 - 47 / 576))


def test_step_table_skips_invalid_windows_and_handles_eor():
    table = step_table([(4, 4)], [3, 9], eor=True)
    assert len(table) == 1  # window 9 > cols dropped
    row = table[0]
    assert row["ntp_steps"] == 4 * 5
    assert row["fixed_steps"] == 3 * 3 + 4
