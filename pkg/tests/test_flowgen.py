import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from passt import flowgen
from passt.errors import ConfigError, GapError, SchemaError
from passt.grid import GridSpec


def _small(**kw):
    cell = 10.0 / 12
    kw.setdefault("window", GridSpec(12, 12, cell, (2.0 + cell / 2, -5.0 + cell / 2)))
    kw.setdefault("n_steps", 30)
    return kw


def test_zero_circulation_gives_uniform_inflow():
    s = flowgen.generate_vortex_street(flowgen.stationary_config(**_small(circulation=0.0, inflow_speed=0.7)))
    np.testing.assert_allclose(s.data[..., 0], 0.7, atol=1e-7)
    np.testing.assert_array_equal(s.data[..., 1], 0.0)


def test_stationary_street_is_periodic():
    cfg = flowgen.stationary_config(n_steps=60)
    assert cfg.period == 24.0
    s = flowgen.generate_vortex_street(cfg)
    for t in range(36):
        assert np.max(np.abs(s.data[t] - s.data[t + 24])) <= 1e-9
    assert np.max(np.abs(s.data[0] - s.data[12])) > 1e-2


def test_default_series_shape_and_windows():
    cfg = flowgen.stationary_config()
    assert cfg.window.shape == (30, 30)
    s = flowgen.generate_vortex_street(cfg)
    assert s.data.shape == (401, 30, 30, 2)
    assert len(s.window(200, 300)) == 101 and len(s.window(300, 400)) == 101


def test_isolated_vortex_closed_form():
    g, rc, r = 2.5, 0.4, 0.9
    u, v = flowgen.vortex_velocity(1.0 + r, 2.0, 1.0, 2.0, g, rc)
    assert u == pytest.approx(0.0, abs=1e-15)
    assert v == pytest.approx(g * r / (2 * np.pi * (r * r + rc * rc)), rel=1e-14)
    # perpendicular to the radius at an arbitrary angle
    ang = 0.7
    x, y = 1.0 + r * np.cos(ang), 2.0 + r * np.sin(ang)
    u, v = flowgen.vortex_velocity(x, y, 1.0, 2.0, g, rc)
    assert u * np.cos(ang) + v * np.sin(ang) == pytest.approx(0.0, abs=1e-14)
    assert np.hypot(u, v) == pytest.approx(g * r / (2 * np.pi * (r * r + rc * rc)), rel=1e-13)


def test_rows_carry_opposite_circulation():
    xs, ys, gs = flowgen.vortex_positions(flowgen.stationary_config(), 13.0)
    upper = ys > 0
    assert np.all(gs[upper] <= 0) and np.all(gs[~upper] >= 0)


def test_oscillating_street_displacement():
    base = flowgen.stationary_config()
    osc = flowgen.oscillating_config()
    assert osc.oscillation_period == 96.0 and osc.oscillation_amplitude == 1.0
    for t in (0.0, 24.0, 31.0, 72.0):
        _, y0, _ = flowgen.vortex_positions(base, t)
        xs_o, y1, _ = flowgen.vortex_positions(osc, t)
        np.testing.assert_allclose(y1 - y0, np.sin(2 * np.pi * t / 96.0), atol=1e-12)
    s = flowgen.generate_vortex_street(flowgen.oscillating_config(n_steps=200))
    assert np.max(np.abs(s.data[10] - s.data[34])) > 1e-2  # not 24-periodic any more


def test_determinism_and_seed_effect():
    a = flowgen.generate_vortex_street(flowgen.stationary_config(**_small()))
    b = flowgen.generate_vortex_street(flowgen.stationary_config(**_small()))
    c = flowgen.generate_vortex_street(flowgen.stationary_config(**_small(seed=3)))
    assert np.array_equal(a.data, b.data)
    assert not np.array_equal(a.data, c.data)


def test_window_missing_street_raises():
    far = GridSpec(10, 10, 0.5, (100.0, 100.0))
    with pytest.raises(ConfigError):
        flowgen.generate_vortex_street(flowgen.stationary_config(window=far))


@pytest.mark.parametrize("kw", [dict(street_spacing=0.0), dict(core_radius=-1.0), dict(n_steps=1),
                                dict(oscillation_amplitude=-0.5), dict(oscillation_amplitude=1.0,
                                                                       oscillation_period=0.0)])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        flowgen.VortexStreetConfig(**kw)


def test_values_survive_float32_storage():
    s = flowgen.generate_vortex_street(flowgen.stationary_config(**_small()))
    np.testing.assert_array_equal(s.data.astype(np.float32).astype(np.float64), s.data)


@settings(max_examples=15, deadline=None)
@given(st.floats(0.0, 1.0), st.floats(0.5, 5.0), st.floats(0.2, 1.5), st.integers(0, 50))
def test_speed_bound_property(inflow, circ, rc, seed):
    cfg = flowgen.stationary_config(**_small(inflow_speed=inflow, circulation=circ, core_radius=rc, seed=seed,
                                             n_steps=6))
    s = flowgen.generate_vortex_street(cfg)
    speed = np.hypot(s.data[..., 0], s.data[..., 1])
    assert np.all(np.isfinite(speed))
    assert speed.max() <= flowgen.speed_bound(cfg) * (1 + 1e-6)


# ---------------------------------------------------------------------------
# CSV ingestion


def _write_csv(path, spec, vals, skip=(), header="row,col,u,v"):
    lines = [header]
    for r in range(spec.n_rows):
        for c in range(spec.n_cols):
            if (r, c) in skip:
                continue
            lines.append(f"{r},{c},{float(vals[r, c, 0])!r},{float(vals[r, c, 1])!r}")
    path.write_text("\n".join(lines) + "\n")
    return path


def test_complete_csvs_load_exactly(tmp_path):
    spec = GridSpec(2, 2)
    rng = np.random.default_rng(0)
    frames = rng.normal(size=(3, 2, 2, 2))
    files = [_write_csv(tmp_path / f"s{t}.csv", spec, frames[t]) for t in range(3)]
    s = flowgen.ingest_csv_currents(files, spec)
    np.testing.assert_array_equal(s.data, frames)
    assert s.metadata["filled_cells"] == []


def test_single_missing_cell_filled_from_nearest(tmp_path):
    spec = GridSpec(30, 30)
    X, Y = np.meshgrid(np.arange(30.0), np.arange(30.0))
    vals = np.stack([X, Y], axis=-1)
    f0 = _write_csv(tmp_path / "a.csv", spec, vals, skip={(5, 7)})
    f1 = _write_csv(tmp_path / "b.csv", spec, vals)
    s = flowgen.ingest_csv_currents([f0, f1], spec)
    assert s.metadata["filled_cells"] == [[0, 5, 7]]
    # the nearest present neighbours are all one cell away; the fill is one of them
    filled = s.data[0, 5, 7]
    neighbours = [vals[4, 7], vals[6, 7], vals[5, 6], vals[5, 8]]
    assert any(np.array_equal(filled, n) for n in neighbours)


def test_wrong_header_is_schema_error(tmp_path):
    spec = GridSpec(2, 2)
    vals = np.zeros((2, 2, 2))
    f = _write_csv(tmp_path / "a.csv", spec, vals, header="lat,lon,u,v")
    g = _write_csv(tmp_path / "b.csv", spec, vals)
    with pytest.raises(SchemaError):
        flowgen.ingest_csv_currents([f, g], spec)


def test_out_of_grid_cell_is_schema_error(tmp_path):
    spec = GridSpec(2, 2)
    f = tmp_path / "a.csv"
    f.write_text("row,col,u,v\n0,0,1,1\n0,1,1,1\n1,0,1,1\n1,5,1,1\n")
    g = _write_csv(tmp_path / "b.csv", spec, np.zeros((2, 2, 2)))
    with pytest.raises(SchemaError):
        flowgen.ingest_csv_currents([f, g], spec)


def test_too_many_gaps(tmp_path):
    spec = GridSpec(10, 10)
    vals = np.zeros((10, 10, 2))
    skip = {(0, c) for c in range(6)}
    f = _write_csv(tmp_path / "a.csv", spec, vals, skip=skip)
    g = _write_csv(tmp_path / "b.csv", spec, vals)
    with pytest.raises(GapError):
        flowgen.ingest_csv_currents([f, g], spec)
    ok = _write_csv(tmp_path / "c.csv", spec, vals, skip={(0, c) for c in range(5)})
    flowgen.ingest_csv_currents([ok, g], spec)
