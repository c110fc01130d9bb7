import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowcast import data as dt
from flowcast.errors import ContractError, DegeneracyError, FormatError, ParseError

from helpers import rotate_points


def write_csv(tmp_path, text, name="traj.csv"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


HEADER = "scene_id,agent_id,frame,x,y\n"


class TestLoadTrajectories:
    def test_empty_file_with_header(self, tmp_path):
        path = write_csv(tmp_path, HEADER)
        assert dt.load_trajectories(path) == []

    def test_single_agent_three_rows(self, tmp_path):
        path = write_csv(tmp_path, HEADER + "s,a,0,0.0,0.0\ns,a,1,1.0,0.5\ns,a,2,2.0,1.0\n")
        records = dt.load_trajectories(path)
        assert len(records) == 1
        assert len(records[0]) == 3
        np.testing.assert_array_equal(records[0].frames, [0, 1, 2])
        np.testing.assert_allclose(records[0].positions[2], [2.0, 1.0])

    def test_shuffled_rows_match_sorted(self, tmp_path):
        sorted_path = write_csv(tmp_path, HEADER + "s,a,0,0,0\ns,a,1,1,1\ns,a,2,2,2\n",
                                "sorted.csv")
        shuffled_path = write_csv(tmp_path, HEADER + "s,a,2,2,2\ns,a,0,0,0\ns,a,1,1,1\n",
                                  "shuffled.csv")
        a = dt.load_trajectories(sorted_path)
        b = dt.load_trajectories(shuffled_path)
        np.testing.assert_array_equal(a[0].frames, b[0].frames)
        np.testing.assert_array_equal(a[0].positions, b[0].positions)

    def test_missing_column_named(self, tmp_path):
        path = write_csv(tmp_path, "scene_id,agent_id,frame,x\ns,a,0,0\n")
        with pytest.raises(FormatError, match="y"):
            dt.load_trajectories(path)

    def test_non_numeric_cell_reports_row(self, tmp_path):
        path = write_csv(tmp_path, HEADER + "s,a,0,0,0\ns,a,1,oops,0\n")
        with pytest.raises(ParseError) as exc:
            dt.load_trajectories(path)
        assert exc.value.row == 3

    def test_duplicate_frame_rejected(self, tmp_path):
        path = write_csv(tmp_path, HEADER + "s,a,0,0,0\ns,a,0,1,1\n")
        with pytest.raises(FormatError, match="duplicate frame"):
            dt.load_trajectories(path)


def make_record(length, frame_period=1.0):
    t = np.arange(length, dtype=float)
    positions = np.column_stack([t, 0.5 * t])
    return dt.TrajectoryRecord(scene_id="s", agent_id="a",
                               frames=np.arange(length, dtype=np.int64),
                               positions=positions, frame_period=frame_period)


class TestSliceWindows:
    def test_window_counting(self):
        cfg = dt.SlicingConfig(obs_len=8, pred_len=12, step=1)
        assert len(dt.slice_windows([make_record(21)], cfg)) == 2

    def test_too_short_record(self):
        cfg = dt.SlicingConfig(obs_len=8, pred_len=12, step=1)
        assert dt.slice_windows([make_record(19)], cfg) == []

    def test_outlier_cutoff_excludes_long_agents(self):
        cfg = dt.SlicingConfig(obs_len=8, pred_len=12, step=1, max_trajectory_len=1000)
        assert dt.slice_windows([make_record(1001)], cfg) == []
        assert len(dt.slice_windows([make_record(1000)], cfg)) > 0

    def test_evaluation_mode_accepts_short_futures(self):
        cfg = dt.SlicingConfig(obs_len=8, pred_len=12, step=1, require_full=False)
        windows = dt.slice_windows([make_record(10)], cfg)
        assert len(windows) == 1
        assert windows[0].horizon == 2

    def test_validation(self):
        with pytest.raises(ContractError):
            dt.SlicingConfig(obs_len=1)
        with pytest.raises(ContractError):
            dt.SlicingConfig(pred_len=0)
        with pytest.raises(ContractError):
            dt.SlicingConfig(step=0)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(min_value=2, max_value=60))
    def test_property_full_window_count(self, length):
        cfg = dt.SlicingConfig(obs_len=4, pred_len=3, step=1)
        count = len(dt.slice_windows([make_record(length)], cfg))
        assert count == max(0, length - 7 + 1)


class TestComputeFeatures:
    def test_hand_differences(self):
        feats = dt.compute_features(np.array([[0.0, 0], [1, 0], [2, 0]]), 1.0)
        np.testing.assert_allclose(feats[:, 0:2], [[1, 0]] * 3)   # velocity
        np.testing.assert_allclose(feats[:, 2:4], 0.0)            # acceleration
        np.testing.assert_allclose(feats[:, 4], 0.0)              # heading

    def test_stationary_agent(self):
        feats = dt.compute_features(np.zeros((5, 2)), 0.4)
        np.testing.assert_array_equal(feats, 0.0)

    def test_frame_period_scaling(self):
        feats = dt.compute_features(np.array([[0.0, 0], [1, 0], [2, 0]]), 0.5)
        np.testing.assert_allclose(feats[:, 0], 2.0)

    def test_circular_headings_advance_by_sample_angle(self):
        n, dalpha = 24, 2 * math.pi / 24
        angles = np.arange(n) * dalpha
        pts = np.column_stack([np.cos(angles), np.sin(angles)])
        feats = dt.compute_features(pts, 1.0)
        heads = feats[:, 4]
        diffs = dt.wrap_angle(np.diff(heads[1:]))
        np.testing.assert_allclose(diffs, dalpha, atol=1e-10)


def demo_window(seed=0, obs_len=6, pred_len=4):
    rng = np.random.default_rng(seed)
    pts = np.cumsum(rng.normal(size=(obs_len + pred_len, 2)), axis=0)
    return dt.TrajectoryWindow(observed=pts[:obs_len],
                               features=dt.compute_features(pts[:obs_len], 1.0),
                               future=pts[obs_len:], frame_period=1.0)


class TestCanonicalRotate:
    def test_aligned_window_unchanged(self):
        obs = np.array([[0.0, 0], [1, 0], [2, 0]])
        fut = np.array([[3.0, 0], [4, 0]])
        w = dt.TrajectoryWindow(observed=obs, features=dt.compute_features(obs, 1.0),
                                future=fut)
        r = dt.canonical_rotate(w)
        np.testing.assert_allclose(r.observed, obs, atol=1e-12)
        np.testing.assert_allclose(r.future, fut, atol=1e-12)
        assert r.rotation_angle == 0.0

    def test_roundtrip(self):
        w = demo_window(1)
        r = dt.canonical_rotate(w)
        back = dt.undo_rotation(r)
        assert np.max(np.abs(back.observed - w.observed)) <= 1e-12
        assert np.max(np.abs(back.future - w.future)) <= 1e-12
        assert np.max(np.abs(back.features - w.features)) <= 1e-12

    def test_vertical_displacement_hand_check(self):
        obs = np.array([[0.0, 0.0], [0.0, 1.0]])
        fut = np.array([[0.0, 2.0]])
        w = dt.TrajectoryWindow(observed=obs, features=dt.compute_features(obs, 1.0),
                                future=fut)
        r = dt.canonical_rotate(w)
        assert r.rotation_angle == pytest.approx(math.pi / 2)
        # rotating (0,0) about pivot (0,1) by -pi/2 lands at (-1, 1)
        np.testing.assert_allclose(r.observed[0], [-1.0, 1.0], atol=1e-12)
        np.testing.assert_allclose(r.observed[-1] - r.observed[-2], [1.0, 0.0],
                                   atol=1e-12)
        np.testing.assert_allclose(r.future[0], [1.0, 1.0], atol=1e-12)

    def test_feature_equivariance(self):
        # rotating stored features equals recomputing features from rotated positions
        w = demo_window(2)
        r = dt.canonical_rotate(w)
        recomputed = dt.compute_features(r.observed, r.frame_period)
        assert np.max(np.abs(r.features - recomputed)) <= 1e-10

    def test_world_model_maps(self):
        w = dt.canonical_rotate(demo_window(3))
        pts = np.array([[0.3, -manhattan] for manhattan in (0.5, 1.5)])
        model = w.world_to_model(pts)
        np.testing.assert_allclose(w.model_to_world(model), pts, atol=1e-12)
        oracle = rotate_points(pts, -w.rotation_angle, w.rotation_pivot)
        np.testing.assert_allclose(model, oracle, atol=1e-12)


class TestMinMax:
    def test_midpoint(self):
        b = dt.MinMaxBounds(0.0, 10.0, 0.0, 10.0)
        np.testing.assert_allclose(b.normalize(np.array([[5.0, 5.0]])), [[0.5, 0.5]])

    def test_roundtrip(self):
        windows = [demo_window(s) for s in range(4)]
        normed, bounds = dt.min_max_normalize(windows)
        for w, n in zip(windows, normed):
            np.testing.assert_allclose(bounds.denormalize(n.observed), w.observed,
                                       atol=1e-12)
            np.testing.assert_allclose(n.model_to_world(n.future), w.future,
                                       atol=1e-12)

    def test_train_bounds_applied_to_test_split(self):
        train = [demo_window(s) for s in range(4)]
        test = [demo_window(s) for s in range(10, 13)]
        _, bounds = dt.min_max_normalize(train)
        test_normed = [dt.apply_min_max(w, bounds) for w in test]
        for w in test_normed:
            assert w.bounds is bounds  # no leakage: exactly the training bounds

    def test_degenerate_bounds(self):
        obs = np.zeros((3, 2))
        w = dt.TrajectoryWindow(observed=obs, features=dt.compute_features(obs, 1.0),
                                future=np.zeros((2, 2)))
        with pytest.raises(DegeneracyError):
            dt.min_max_normalize([w])

    def test_density_correction_constant(self):
        b = dt.MinMaxBounds(0.0, 4.0, 0.0, 8.0)
        assert b.log_density_correction() == pytest.approx(-math.log(32.0))


class TestScaleAugment:
    def test_neutral_scale_keeps_window(self):
        w = demo_window(4)
        out = dt.scale_augment(w, np.random.default_rng(0), scale_range=(1.0, 1.0))
        np.testing.assert_allclose(out.observed, w.observed, atol=1e-12)
        np.testing.assert_allclose(out.future, w.future, atol=1e-12)

    def test_mean_preserved(self):
        w = demo_window(5)
        out = dt.scale_augment(w, np.random.default_rng(1))
        before = np.concatenate([w.observed, w.future]).mean(axis=0)
        after = np.concatenate([out.observed, out.future]).mean(axis=0)
        np.testing.assert_allclose(after, before, atol=1e-12)

    def test_factor_two_doubles_deviations(self):
        w = demo_window(6)
        out = dt.scale_augment(w, np.random.default_rng(2), scale_range=(2.0, 2.0))
        center = np.concatenate([w.observed, w.future]).mean(axis=0)
        np.testing.assert_allclose(out.observed - center, 2 * (w.observed - center),
                                   atol=1e-12)


class TestDisplacements:
    def test_stationary(self):
        u = np.tile([1.0, 2.0], (5, 1))
        d = dt.to_displacements(u, np.array([1.0, 2.0]))
        np.testing.assert_array_equal(d, 0.0)

    def test_roundtrip(self):
        rng = np.random.default_rng(3)
        u = rng.normal(size=(6, 2))
        o_t = rng.normal(size=2)
        back = dt.from_displacements(dt.to_displacements(u, o_t), o_t)
        assert np.max(np.abs(back - u)) <= 1e-12

    def test_straight_line(self):
        v, dt_ = 1.5, 0.5
        o_t = np.zeros(2)
        u = np.column_stack([v * dt_ * np.arange(1, 5), np.zeros(4)])
        d = dt.to_displacements(u, o_t)
        np.testing.assert_allclose(d, np.tile([v * dt_, 0.0], (4, 1)), atol=1e-12)


class TestSynthesize:
    def test_zero_noise_gives_straight_lines(self):
        spec = dt.SyntheticSpec(n_windows=5, noise_sigma=0.0)
        for rec in dt.synthesize_dataset(spec, seed=0):
            steps = np.diff(rec.positions, axis=0)
            np.testing.assert_allclose(steps, steps[0], atol=1e-12)

    def test_same_seed_identical(self):
        spec = dt.SyntheticSpec(n_windows=4)
        a = dt.synthesize_dataset(spec, seed=7)
        b = dt.synthesize_dataset(spec, seed=7)
        for ra, rb in zip(a, b):
            np.testing.assert_array_equal(ra.positions, rb.positions)

    def test_noise_moments(self):
        spec = dt.SyntheticSpec(n_windows=400, noise_sigma=0.1)
        records = dt.synthesize_dataset(spec, seed=11)
        residuals = []
        for rec in records:
            clean_vel = rec.positions[spec.obs_len - 1] - rec.positions[spec.obs_len - 2]
            for s in range(1, spec.pred_len + 1):
                clean = rec.positions[spec.obs_len - 1] + clean_vel * s
                residuals.append(rec.positions[spec.obs_len - 1 + s] - clean)
        res = np.array(residuals).ravel()
        se_mean = spec.noise_sigma / math.sqrt(res.size)
        assert abs(res.mean()) <= 3 * se_mean
        se_std = spec.noise_sigma / math.sqrt(2 * (res.size - 1))
        assert abs(res.std() - spec.noise_sigma) <= 3 * se_std

    def test_constant_velocity_truth(self):
        spec = dt.SyntheticSpec(n_windows=2, noise_sigma=0.0)
        records = dt.synthesize_dataset(spec, seed=1)
        cfg = dt.SlicingConfig(obs_len=spec.obs_len, pred_len=spec.pred_len)
        for w in dt.slice_windows(records, cfg):
            for s in (1, 5, 12):
                np.testing.assert_allclose(dt.constant_velocity_truth(w, s),
                                           w.future[s - 1], atol=1e-10)

    def test_two_mode_templates_match_clean_branches(self):
        spec = dt.SyntheticSpec(process="two_mode_turn", n_windows=40,
                                noise_sigma=0.0)
        records = dt.synthesize_dataset(spec, seed=3)
        cfg = dt.SlicingConfig(obs_len=spec.obs_len, pred_len=spec.pred_len)
        for w in dt.slice_windows(records, cfg):
            left, right = dt.two_mode_branch_templates(w, spec)
            err_left = np.max(np.abs(w.future - left))
            err_right = np.max(np.abs(w.future - right))
            assert min(err_left, err_right) <= 1e-9

    def test_composed_preprocessing_roundtrip(self):
        spec = dt.SyntheticSpec(n_windows=6, noise_sigma=0.05)
        records = dt.synthesize_dataset(spec, seed=5)
        cfg = dt.SlicingConfig(obs_len=spec.obs_len, pred_len=spec.pred_len)
        windows = [dt.canonical_rotate(w) for w in dt.slice_windows(records, cfg)]
        normed, _ = dt.min_max_normalize(windows)
        for raw, w in zip(dt.slice_windows(records, cfg), normed):
            back = w.model_to_world(w.future)
            assert np.max(np.abs(back - raw.future)) <= 1e-12
