import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from semfeat.geoexport import (
    SimilarityTransform,
    Trajectory,
    align_trajectories,
    class_palette,
    colorize_cloud,
    descriptors_to_uint8,
    export_colmap,
    read_colmap_features,
    read_colmap_matches,
    read_ply,
    read_trajectory_csv,
    trajectory_rmse,
    write_colmap_features,
    write_colmap_matches,
    write_ply,
    write_trajectory_csv,
)


def _unit(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


class TestColmap:
    def test_feature_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        xy = rng.uniform(0, 63, (20, 2)).astype(np.float32)
        desc = _unit(rng, 20, 64)
        write_colmap_features(tmp_path / "a.txt", xy, desc)
        got_xy, got_d = read_colmap_features(tmp_path / "a.txt")
        assert np.array_equal(got_xy.astype(np.float32), xy)
        assert np.array_equal(got_d, descriptors_to_uint8(desc))

    def test_format_lines(self, tmp_path):
        write_colmap_features(tmp_path / "a.txt", np.array([[1.0, 2.0]]), np.ones((1, 128)))
        lines = (tmp_path / "a.txt").read_text().splitlines()
        assert lines[0] == "1 128"
        parts = lines[1].split()
        assert len(parts) == 4 + 128 and float(parts[0]) == 1.5 and float(parts[1]) == 2.5
        assert parts[4:] == ["255"] * 128

    def test_empty_image(self, tmp_path):
        write_colmap_features(tmp_path / "e.txt", np.zeros((0, 2)), np.zeros((0, 128)))
        assert (tmp_path / "e.txt").read_text() == "0 128\n"
        xy, d = read_colmap_features(tmp_path / "e.txt")
        assert xy.shape == (0, 2) and d.shape == (0, 128)

    def test_descriptor_mapping(self):
        d = descriptors_to_uint8(np.array([[-1.0, 0.0, 1.0]]))
        assert d.shape == (1, 128) and d[0, :3].tolist() == [0, 128, 255] and (d[0, 3:] == 128).all()
        assert descriptors_to_uint8(np.zeros((1, 200))).shape == (1, 128)

    def test_match_block(self, tmp_path):
        write_colmap_matches(tmp_path / "m.txt", [("a.png", "b.png", np.array([[0, 1], [2, 3], [4, 5]]))])
        text = (tmp_path / "m.txt").read_text()
        assert text == "a.png b.png\n0 1\n2 3\n4 5\n"

    def test_matches_round_trip(self, tmp_path):
        pairs = [("a", "b", np.array([[0, 1], [2, 3]])), ("a", "c", np.zeros((0, 2), int)), ("b", "c", np.array([[7, 7]]))]
        write_colmap_matches(tmp_path / "m.txt", pairs)
        got = read_colmap_matches(tmp_path / "m.txt")
        assert [(a, b) for a, b, _ in got] == [("a", "b"), ("a", "c"), ("b", "c")]
        assert all(np.array_equal(g[2], p[2].reshape(-1, 2)) for g, p in zip(got, pairs))

    def test_export_two_images(self, tmp_path):
        rng = np.random.default_rng(1)
        feats = {n: (rng.uniform(0, 63, (5, 2)), _unit(rng, 5, 32)) for n in ("a.png", "b.png")}
        manifest = export_colmap(tmp_path, feats, [("a.png", "b.png", np.array([[0, 0], [1, 2]]))])
        assert sorted(p.name for p in tmp_path.glob("*.txt")) == ["a.png.txt", "b.png.txt", "matches.txt"]
        assert manifest["descriptor_conversion"]["source_dims"] == [32]


class TestPly:
    def test_single_point(self, tmp_path):
        colorize_cloud([[1.0, 2.0, 3.0]], [0], 6, tmp_path / "p.ply")
        cloud = read_ply(tmp_path / "p.ply")
        assert len(cloud.xyz) == 1 and np.array_equal(cloud.rgb[0], class_palette(6)[0])
        head = (tmp_path / "p.ply").read_bytes()[:200]
        assert b"format binary_little_endian 1.0" in head and b"property uchar class_id" in head

    def test_same_class_same_colour(self):
        c = colorize_cloud(np.zeros((2, 3)), [3, 3], 6)
        assert np.array_equal(c.rgb[0], c.rgb[1])

    @pytest.mark.parametrize("C", [2, 6, 19, 40, 256])
    def test_palette_injective(self, C):
        assert len({tuple(c) for c in class_palette(C)}) == C

    def test_round_trip_bit_identical(self, tmp_path):
        rng = np.random.default_rng(2)
        xyz = rng.normal(size=(500, 3)).astype(np.float32)
        ids = rng.integers(0, 19, 500)
        c = colorize_cloud(xyz, ids, 19)
        write_ply(tmp_path / "c.ply", c)
        r = read_ply(tmp_path / "c.ply")
        assert r.xyz.tobytes() == xyz.tobytes() and np.array_equal(r.class_id, ids) and np.array_equal(r.rgb, c.rgb)

    def test_class_out_of_range(self):
        with pytest.raises(ValueError, match="class ids"):
            colorize_cloud(np.zeros((1, 3)), [6], 6)


def _traj(rng, n=50):
    return Trajectory(np.cumsum(rng.normal(size=(n, 3)), axis=0))


class TestAlignment:
    def test_identity(self):
        t = _traj(np.random.default_rng(0))
        T = align_trajectories(t, t)
        assert T.scale == pytest.approx(1.0, abs=1e-12)
        assert np.allclose(T.rotation, np.eye(3), atol=1e-12) and np.allclose(T.translation, 0, atol=1e-10)

    def test_scale_and_translation(self):
        est = _traj(np.random.default_rng(1))
        ref = Trajectory(2 * est.positions + [1, 2, 3])
        T = align_trajectories(est, ref)
        assert abs(T.scale - 2) <= 1e-9 and np.abs(T.rotation - np.eye(3)).max() <= 1e-9
        assert np.abs(T.translation - [1, 2, 3]).max() <= 1e-9

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 10**6))
    def test_rotation_recovered(self, seed):
        rng = np.random.default_rng(seed)
        R0 = Rotation.random(random_state=seed).as_matrix()
        s0, t0 = rng.uniform(0.2, 5), rng.normal(size=3)
        est = _traj(rng)
        ref = Trajectory(s0 * est.positions @ R0.T + t0)
        T = align_trajectories(est, ref)
        assert np.abs(T.rotation - R0).max() <= 1e-9 and abs(T.scale - s0) <= 1e-9
        assert np.abs(T.rotation.T @ T.rotation - np.eye(3)).max() <= 1e-9
        assert abs(np.linalg.det(T.rotation) - 1) <= 1e-9

    def test_rigid_mode_fixes_scale(self):
        est = _traj(np.random.default_rng(3))
        T = align_trajectories(est, Trajectory(3 * est.positions), with_scale=False)
        assert T.scale == 1.0 and abs(np.linalg.det(T.rotation) - 1) <= 1e-9

    def test_collinear_warns(self):
        line = Trajectory(np.outer(np.arange(10.0), [1, 2, 3]))
        with pytest.warns(RuntimeWarning, match="degenerate"):
            T = align_trajectories(line, line)
        assert trajectory_rmse(line, line, T) <= 1e-9

    def test_errors(self):
        rng = np.random.default_rng(4)
        with pytest.raises(ValueError, match="lengths"):
            align_trajectories(_traj(rng, 5), _traj(rng, 6))
        with pytest.raises(ValueError):
            Trajectory(np.zeros((0, 3)))
        with pytest.raises(ValueError):
            Trajectory([[np.nan, 0, 0]])


class TestRmse:
    def test_identical(self):
        t = _traj(np.random.default_rng(5))
        assert trajectory_rmse(t, t) == 0.0

    def test_offset_absorbed(self):
        est = _traj(np.random.default_rng(6))
        ref = Trajectory(est.positions + [4.0, -2.0, 7.0])
        assert trajectory_rmse(est, ref, align_trajectories(est, ref)) <= 1e-9

    def test_gaussian_noise_expectation(self):
        rng = np.random.default_rng(7)
        est = Trajectory(rng.uniform(-20, 20, (1000, 3)))
        ref = Trajectory(est.positions + rng.normal(0, 0.1, (1000, 3)))
        rmse = trajectory_rmse(est, ref, align_trajectories(est, ref))
        assert abs(rmse - 0.1 * np.sqrt(3)) <= 0.01

    def test_optimal_beats_random_transforms(self):
        rng = np.random.default_rng(8)
        est = _traj(rng)
        ref = Trajectory(1.5 * est.positions @ Rotation.random(random_state=1).as_matrix().T + rng.normal(0, 0.3, (50, 3)))
        best = trajectory_rmse(est, ref, align_trajectories(est, ref))
        for k in range(100):
            T = SimilarityTransform(rng.uniform(0.5, 3), Rotation.random(random_state=k).as_matrix(), rng.normal(size=3))
            assert best <= trajectory_rmse(est, ref, T)

    def test_length_mismatch(self):
        rng = np.random.default_rng(9)
        with pytest.raises(ValueError):
            trajectory_rmse(_traj(rng, 3), _traj(rng, 4))


class TestCsv:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(10)
        t = Trajectory(rng.normal(size=(7, 3)), np.arange(7) * 0.1)
        write_trajectory_csv(tmp_path / "t.csv", t)
        r = read_trajectory_csv(tmp_path / "t.csv")
        assert np.array_equal(r.positions, t.positions) and np.array_equal(r.timestamps, t.timestamps)
        assert (tmp_path / "t.csv").read_text().splitlines()[0] == "x,y,z,t"

    def test_without_timestamps(self, tmp_path):
        (tmp_path / "t.csv").write_text("x,y,z\n1,2,3\n")
        r = read_trajectory_csv(tmp_path / "t.csv")
        assert r.timestamps is None and r.positions.tolist() == [[1, 2, 3]]

    def test_bad_header(self, tmp_path):
        (tmp_path / "t.csv").write_text("a,b\n1,2\n")
        with pytest.raises(ValueError, match="header"):
            read_trajectory_csv(tmp_path / "t.csv")


def test_uint8_descriptors_pass_through():
    d = np.arange(256, dtype=np.uint8).reshape(2, 128)
    assert np.array_equal(descriptors_to_uint8(d), d)
