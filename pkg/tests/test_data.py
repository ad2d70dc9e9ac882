import json

import numpy as np
import pytest

from hspgnn import data as dt
from hspgnn import graphops as go
from hspgnn.exceptions import ConfigurationError, ParseError, ValidationError


class TestSeriesWindow:
    def test_views_reconstruct(self, rng):
        w = dt.SeriesWindow(rng.normal(size=(4, 3)), rng.integers(0, 2, (4, 3)))
        np.testing.assert_array_equal(w.observed + w.hidden, w.values)

    def test_rejects_non_binary_mask(self):
        with pytest.raises(ValidationError):
            dt.SeriesWindow(np.zeros((2, 2)), np.full((2, 2), 0.5))

    def test_rejects_shape_mismatch(self):
        with pytest.raises(ValidationError):
            dt.SeriesWindow(np.zeros((2, 2)), np.zeros((2, 3)))


class TestCSV:
    def test_empty_cell_is_missing(self, tmp_path):
        (tmp_path / "s.csv").write_text("1,2\n3,\n")
        values, mask = dt.load_series_csv(tmp_path / "s.csv")
        np.testing.assert_array_equal(values, [[1, 2], [3, 0]])
        np.testing.assert_array_equal(mask, [[0, 0], [0, 1]])

    def test_full_file(self, tmp_path):
        (tmp_path / "s.csv").write_text("1,2\n3,4\n")
        assert dt.load_series_csv(tmp_path / "s.csv")[1].sum() == 0

    def test_round_trip_lossless(self, tmp_path, rng):
        x = rng.normal(size=(20, 4)) * 10.0 ** rng.integers(-8, 8, (20, 4))
        m = rng.integers(0, 2, (20, 4))
        dt.write_series_csv(tmp_path / "s.csv", x, m)
        values, mask = dt.load_series_csv(tmp_path / "s.csv")
        np.testing.assert_array_equal(mask, m)
        np.testing.assert_array_equal(values, x * (1 - m))

    def test_ragged_row(self, tmp_path):
        (tmp_path / "s.csv").write_text("1,2\n3\n")
        with pytest.raises(ParseError) as err:
            dt.load_series_csv(tmp_path / "s.csv")
        assert err.value.row == 1

    def test_non_numeric_location(self, tmp_path):
        (tmp_path / "s.csv").write_text("1,2\n3,abc\n")
        with pytest.raises(ParseError) as err:
            dt.load_series_csv(tmp_path / "s.csv")
        assert (err.value.row, err.value.column) == (1, 1)

    def test_mask_round_trip(self, tmp_path, rng):
        m = rng.integers(0, 2, (5, 3))
        dt.write_mask_csv(tmp_path / "m.csv", m)
        np.testing.assert_array_equal(dt.load_mask_csv(tmp_path / "m.csv"), m)

    def test_mask_rejects_other_values(self, tmp_path):
        (tmp_path / "m.csv").write_text("0,2\n")
        with pytest.raises(ParseError):
            dt.load_mask_csv(tmp_path / "m.csv")


class TestMissingPatterns:
    def test_zero_rate_unchanged(self, rng):
        m = rng.integers(0, 2, (50, 4)).astype(float)
        np.testing.assert_array_equal(dt.apply_missing(np.zeros_like(m), m, dt.MissingPattern(point_rate=0.0)), m)

    def test_unit_rate_masks_everything(self):
        m = np.zeros((30, 3))
        np.testing.assert_array_equal(dt.apply_missing(m, m, dt.MissingPattern(point_rate=1.0)), 1.0)

    def test_point_fraction_concentrates(self):
        m = np.zeros((1000, 100))
        out = dt.apply_missing(m, m, dt.MissingPattern(point_rate=0.25, seed=3))
        assert abs(out.mean() - 0.25) < 0.01

    @pytest.mark.parametrize("kind", ["point", "block"])
    def test_never_unmasks(self, rng, kind):
        m = (rng.random((500, 6)) < 0.3).astype(float)
        out = dt.apply_missing(np.zeros_like(m), m, dt.MissingPattern(kind=kind, seed=1))
        assert np.all(out[m == 1] == 1)

    def test_block_events_are_auditable(self, tmp_path):
        m = np.zeros((3000, 10))
        pattern = dt.MissingPattern(kind="block", block_drop_rate=0.0, seed=5)
        out = dt.apply_missing(m, m, pattern)
        assert len(pattern.events) > 0
        for e in pattern.events:
            assert 12 <= e["duration"] <= 48
            end = min(e["start"] + e["duration"], 3000)
            assert np.all(out[e["start"] : end, e["sensor"]] == 1)
        # with no point drops every masked entry belongs to some event
        covered = np.zeros_like(m)
        for e in pattern.events:
            covered[e["start"] : e["start"] + e["duration"], e["sensor"]] = 1
        np.testing.assert_array_equal(covered, out)
        dt.write_events_jsonl(tmp_path / "e.jsonl", pattern.events)
        lines = (tmp_path / "e.jsonl").read_text().splitlines()
        assert [json.loads(x) for x in lines] == pattern.events

    @pytest.mark.parametrize(
        "kw",
        [{"kind": "stripe"}, {"point_rate": 1.5}, {"block_drop_rate": -0.1}, {"block_duration_range": (20, 10)}],
    )
    def test_invalid_pattern(self, kw):
        with pytest.raises(ConfigurationError):
            dt.MissingPattern(**kw)


class TestPreprocess:
    def test_midpoint(self):
        out = dt.preprocess(np.array([[1.0], [0.0], [3.0]]), np.array([[0], [1], [0]]))
        np.testing.assert_array_equal(out, [[1], [2], [3]])

    def test_edge_extension(self):
        out = dt.preprocess(np.array([[0.0], [0.0], [5.0]]), np.array([[1], [1], [0]]))
        np.testing.assert_array_equal(out, [[5], [5], [5]])

    def test_all_missing_node(self):
        out = dt.preprocess(np.array([[9.0, 1.0], [9.0, 2.0]]), np.array([[1, 0], [1, 0]]))
        np.testing.assert_array_equal(out[:, 0], 0.0)

    def test_observed_entries_bit_exact(self, rng):
        x = rng.normal(size=(40, 5))
        m = rng.integers(0, 2, (40, 5))
        out = dt.preprocess(x, m)
        np.testing.assert_array_equal(out[m == 0], x[m == 0])


class TestAugment:
    def test_length_and_first_copy(self, rng):
        x = rng.normal(size=(30, 4))
        m = (rng.random((30, 4)) < 0.2).astype(float)
        series, masks = dt.augment(x, m, seed=2)
        assert series.shape == (90, 4) and masks.shape == (90, 4)
        np.testing.assert_array_equal(series[:30], dt.preprocess(x, m))
        np.testing.assert_array_equal(masks[:30], m)

    def test_copies_keep_original_missing(self, rng):
        m = (rng.random((30, 4)) < 0.2).astype(float)
        _, masks = dt.augment(rng.normal(size=(30, 4)), m, seed=2)
        for c in range(3):
            assert np.all(masks[30 * c : 30 * (c + 1)][m == 1] == 1)

    def test_deterministic(self, rng):
        x, m = rng.normal(size=(30, 4)), (rng.random((30, 4)) < 0.2).astype(float)
        a, b = dt.augment(x, m, seed=9), dt.augment(x, m, seed=9)
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])


class TestStandardizer:
    def test_ignores_masked_entries(self):
        x = np.array([[1.0, 5.0], [3.0, 1e9]])
        s = dt.Standardizer().fit(x, np.array([[0, 0], [0, 1]]))
        np.testing.assert_array_equal(s.mean_, [2.0, 5.0])
        np.testing.assert_array_equal(s.scale_, [1.0, 1.0])

    def test_inverse(self, rng):
        x = rng.normal(3, 4, size=(20, 3))
        s = dt.Standardizer().fit(x, np.zeros_like(x))
        np.testing.assert_allclose(s.inverse_transform(s.transform(x)), x, atol=1e-12)


class TestSynth:
    def test_alpha_zero_sigma_zero_constant(self):
        x, _ = dt.synth_diffusion(n_nodes=6, T=50, alpha=0.0, noise_sigma=0.0)
        np.testing.assert_array_equal(x, np.tile(x[0], (50, 1)))

    def test_reproduces_recurrence(self):
        x, g = dt.synth_diffusion(n_nodes=8, T=100, alpha=0.6, noise_sigma=0.0, graph_seed=4)
        lap = go.normalized_laplacian(g).matrix
        for t in range(99):
            np.testing.assert_array_equal(x[t + 1], x[t] @ (np.eye(8) - 0.6 * lap))

    def test_bounded_near_stability_limit(self):
        x, g = dt.synth_diffusion(n_nodes=10, T=1, alpha=0.0)
        lam = np.linalg.eigvalsh(go.normalized_laplacian(g).matrix).max()
        alpha = 2.0 / lam * (1 - 1e-9)
        x, _ = dt.synth_diffusion(n_nodes=10, T=10_000, alpha=alpha, noise_sigma=0.01)
        assert np.all(np.isfinite(x)) and np.max(np.abs(x)) < 100

    def test_unstable_alpha(self):
        with pytest.raises(ConfigurationError):
            dt.synth_diffusion(n_nodes=10, T=10, alpha=5.0)

    def test_graph_is_erdos_renyi_with_fixed_seed(self):
        g1 = dt.erdos_renyi(20, 0.3, 7)
        g2 = dt.erdos_renyi(20, 0.3, 7)
        np.testing.assert_array_equal(g1.adjacency, g2.adjacency)
        assert 0.15 < g1.n_edges / (20 * 19 / 2) < 0.45


class TestWindows:
    def test_counts(self):
        z = np.zeros((20, 2))
        assert len(dt.make_windows(z, z, 10)) == 1
        assert len(dt.make_windows(np.zeros((40, 2)), np.zeros((40, 2)), 10)) == 3

    def test_contents_bit_exact(self, rng):
        x, m = rng.normal(size=(25, 3)), rng.integers(0, 2, (25, 3))
        for k, (src, tgt) in enumerate(dt.make_windows(x, m, 5, stride=3)):
            t = 5 + 3 * k
            np.testing.assert_array_equal(src.values, x[t - 5 : t])
            np.testing.assert_array_equal(tgt.values, x[t : t + 5])
            np.testing.assert_array_equal(tgt.mask, m[t : t + 5])

    def test_too_short(self):
        with pytest.raises(ValidationError):
            dt.make_windows(np.zeros((19, 2)), np.zeros((19, 2)), 10)

    def test_cover_windows(self):
        assert dt.cover_windows(25, 10) == [0, 10, 15]
        assert dt.cover_windows(20, 10) == [0, 10]
        with pytest.raises(ValidationError):
            dt.cover_windows(5, 10)
