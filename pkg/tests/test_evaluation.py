import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from passt import evaluation as ev
from passt import knode, netcore
from passt.errors import DegenerateData, ShapeError
from passt.grid import FlowSeries, FlowSnapshot, GridSpec


def _snap(H=3, W=4, seed=0):
    return FlowSnapshot(GridSpec(H, W), np.random.default_rng(seed).normal(size=(H, W, 2)))


class TestMetrics:
    def test_identical_is_zero(self):
        a = _snap()
        assert ev.mse(a, a) == 0.0 and ev.cosine_distance(a, a) == pytest.approx(0.0, abs=1e-15)

    def test_uniform_shift(self):
        a = _snap()
        b = a.with_values(a.values + np.array([0.4, 0.0]))
        assert ev.mse(a, b) == pytest.approx(0.16, rel=1e-12)
        assert ev.rmse(a, b) == pytest.approx(0.4, rel=1e-12)

    def test_hand_built_two_by_two(self):
        spec = GridSpec(2, 2)
        a = FlowSnapshot(spec, [[[1, 0], [0, 1]], [[1, 1], [2, 0]]])
        b = FlowSnapshot(spec, [[[0, 0], [0, 3]], [[1, 2], [2, 0]]])
        # squared diffs: 1, 4, 1, 0 -> mean 1.5
        assert ev.mse(a, b) == pytest.approx(1.5, abs=1e-12)

    def test_cosine_cases(self):
        a = _snap()
        assert ev.cosine_distance(a, a.with_values(2 * a.values)) == pytest.approx(0.0, abs=1e-14)
        assert ev.cosine_distance(a, a.with_values(-a.values)) == pytest.approx(2.0, abs=1e-14)
        spec = GridSpec(2, 2)
        x = np.tile([1.0, 0.0], (2, 2, 1))
        y = x.copy()
        y[1] = [0.0, 3.0]
        assert ev.cosine_distance(FlowSnapshot(spec, x), FlowSnapshot(spec, y)) == pytest.approx(0.5, abs=1e-14)

    def test_cosine_excludes_zero_vectors(self):
        spec = GridSpec(2, 2)
        x = np.tile([1.0, 0.0], (2, 2, 1))
        y = x.copy()
        y[0, 0] = 0.0
        y[0, 1] = [-1.0, 0.0]
        # the zero cell is skipped; remaining cells: cos -1, 1, 1
        assert ev.cosine_distance(FlowSnapshot(spec, x), FlowSnapshot(spec, y)) == pytest.approx(1 - 1 / 3, abs=1e-14)
        zero = FlowSnapshot(spec, np.zeros((2, 2, 2)))
        assert ev.cosine_distance(zero, zero) == 0.0

    def test_shape_errors(self):
        with pytest.raises(ShapeError):
            ev.mse(_snap(3, 4), _snap(4, 3))
        a = _snap(3, 4)
        b = FlowSnapshot(GridSpec(3, 4, 2.0), a.values)
        with pytest.raises(ShapeError):
            ev.mse(a, b)

    def test_batch_versions_agree(self):
        a = np.stack([_snap(seed=i).values for i in range(4)])
        b = np.stack([_snap(seed=10 + i).values for i in range(4)])
        spec = GridSpec(3, 4)
        for i in range(4):
            assert ev.batch_mse(a, b)[i] == pytest.approx(ev.mse(FlowSnapshot(spec, a[i]), FlowSnapshot(spec, b[i])))
            assert ev.batch_cosine_distance(a, b)[i] == pytest.approx(
                ev.cosine_distance(FlowSnapshot(spec, a[i]), FlowSnapshot(spec, b[i])), abs=1e-14)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.01, 100.0))
    def test_metric_properties(self, seed, c):
        a, b = _snap(seed=seed), _snap(seed=seed + 1)
        assert ev.mse(a, b) == ev.mse(b, a)
        assert ev.mse(a, b) > 0
        d = ev.cosine_distance(a, b)
        assert ev.cosine_distance(a.with_values(c * a.values), b) == pytest.approx(d, abs=1e-12)
        assert 0.0 <= d <= 2.0


class TestLookahead:
    def _zero_model(self, H=3, W=4):
        arch = netcore.small_architecture(H, W, channels=2, hidden=4)
        return knode.KnodeModel(arch, netcore.zero_params(arch))

    def test_perfect_model_on_constant_series(self):
        data = np.repeat(_snap().values[None], 12, axis=0)
        rep = ev.lookahead_eval(self._zero_model(), FlowSeries(GridSpec(3, 4), data), (1, 2, 5, 10))
        assert rep.mse == (0.0, 0.0, 0.0, 0.0)

    def test_identity_model_closed_form(self):
        rng = np.random.default_rng(0)
        data = np.cumsum(rng.normal(size=(15, 3, 4, 2)), axis=0)
        rep = ev.lookahead_eval(self._zero_model(), FlowSeries(GridSpec(3, 4), data), (1, 3, 7))
        for l, m in zip(rep.lookaheads, rep.mse):
            expected = np.mean([np.mean(np.sum((data[t + l] - data[t]) ** 2, -1)) for t in range(15 - l)])
            assert m == pytest.approx(expected, rel=1e-12)
        assert rep.n_starts == (14, 12, 8)

    def test_trained_like_model_error_grows(self):
        # a nonzero random model drifts away from a constant series, so error grows with lookahead
        arch = netcore.small_architecture(3, 4, channels=2, hidden=4)
        m = knode.KnodeModel(arch, netcore.init_params(arch, 1))
        data = np.repeat(_snap().values[None], 12, axis=0)
        rep = ev.lookahead_eval(m, FlowSeries(GridSpec(3, 4), data), (1, 2, 5, 10))
        assert all(x < y for x, y in zip(rep.mse, rep.mse[1:]))

    def test_bad_lookaheads(self):
        s = FlowSeries(GridSpec(3, 4), np.zeros((5, 3, 4, 2)))
        with pytest.raises(ValueError):
            ev.lookahead_eval(self._zero_model(), s, (2, 1))
        with pytest.raises(ValueError):
            ev.lookahead_eval(self._zero_model(), s, (1, 5))

    def test_csv_columns(self, tmp_path):
        rep = ev.LookaheadReport((1, 2), (0.5, 0.25), (0.1, 0.2), "train")
        ev.write_lookahead_csv([rep], tmp_path / "l.csv")
        rows = list(csv.reader(open(tmp_path / "l.csv")))
        assert rows == [["lookahead", "mse", "cosine_distance", "dataset"], ["1", "0.5", "0.1", "train"],
                        ["2", "0.25", "0.2", "train"]]


class TestPod:
    def test_alternating_sign_is_rank_one(self):
        F = _snap().values
        data = np.stack([F if t % 2 == 0 else -F for t in range(6)])
        spec = ev.pod(data)
        assert spec.energy_fractions[0] == pytest.approx(1.0, abs=1e-12)
        assert spec.energy_of_first(1) == pytest.approx(1.0, abs=1e-12)

    def test_known_singular_values(self):
        # columns are scaled orthonormal vectors with zero temporal mean
        rng = np.random.default_rng(1)
        Q, _ = np.linalg.qr(rng.normal(size=(24, 2)))
        coeff = np.array([[3.0, -3.0, 3.0, -3.0], [1.0, 1.0, -1.0, -1.0]])
        X = Q @ coeff
        data = X.T.reshape(4, 3, 4, 2)
        spec = ev.pod(data)
        np.testing.assert_allclose(spec.singular_values[:2], [6.0, 2.0], rtol=1e-12)
        np.testing.assert_allclose(spec.energy_fractions[:2], [0.9, 0.1], atol=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_eigen_oracle_on_random_matrices(self, seed):
        X = np.random.default_rng(seed).normal(size=(20, 12))
        data = X.T.reshape(12, 2, 5, 2)
        spec = ev.pod(data)
        Xc = X - X.mean(axis=1, keepdims=True)
        lam = np.sort(np.linalg.eigvalsh(Xc.T @ Xc))[::-1]
        lam = np.clip(lam, 0.0, None)
        np.testing.assert_allclose(spec.energy_fractions, lam / lam.sum(), atol=1e-10)
        raw = ev.pod(data, subtract_mean=False)
        lam_raw = np.sort(np.linalg.eigvalsh(X.T @ X))[::-1]
        np.testing.assert_allclose(raw.energy_fractions, lam_raw / lam_raw.sum(), atol=1e-10)

    def test_identical_snapshots_degenerate(self):
        data = np.repeat(_snap().values[None], 5, axis=0)
        with pytest.raises(DegenerateData):
            ev.pod(data)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000), st.floats(-50, 50).filter(lambda c: abs(c) > 1e-3), st.integers(1, 4))
    def test_pod_properties(self, seed, c, k):
        rng = np.random.default_rng(seed)
        dirs = rng.normal(size=(k, 3, 4, 2))
        coeff = rng.normal(size=(10, k))
        data = np.einsum("tk,kijc->tijc", coeff, dirs)
        spec = ev.pod(data)
        assert np.all(spec.energy_fractions >= 0)
        assert abs(spec.energy_fractions.sum() - 1.0) < 1e-10
        assert np.all(np.diff(spec.cumulative_energy) >= -1e-15) and spec.cumulative_energy[-1] == pytest.approx(1.0)
        # k directions and mean subtraction leave at most k nonzero modes
        assert np.sum(spec.energy_fractions > 1e-10) <= k
        np.testing.assert_allclose(ev.pod(c * data).energy_fractions, spec.energy_fractions, atol=1e-10)

    def test_pod_csv(self, tmp_path):
        F = _snap().values
        spec = ev.pod(np.stack([F, -F, F]))
        ev.write_pod_csv(spec, tmp_path / "p.csv")
        rows = list(csv.reader(open(tmp_path / "p.csv")))
        assert rows[0] == ["mode", "singular_value", "energy_fraction", "cumulative"]
        assert len(rows) == 1 + spec.singular_values.size
