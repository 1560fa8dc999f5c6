import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from diffkit.skeleton import (Camera, DatasetConfig, H36M_PARENTS, SkeletonSpec, dataset_from_dict, dataset_to_dict,
                              dumps, entropy, forward_kinematics, gen_dataset, h36m_skeleton, heatmap_centroid,
                              load_dataset, norm_to_pixel, normalized_adjacency, pixel_to_norm, project,
                              random_angles, render_heatmaps, rest_angles, save_dataset, unproject,
                              z_histogram, z_histogram_from_depths)


@pytest.fixture(scope="module")
def spec():
    return h36m_skeleton()


@pytest.fixture(scope="module")
def small_ds():
    return gen_dataset(n_train=40, n_test=10, seed=0)


def test_default_skeleton_is_17_joint_tree(spec):
    assert spec.joint_count == 17
    assert spec.parents[0] == 0
    assert all(p < j for j, p in enumerate(spec.parents) if j)
    assert np.all(spec.bone_lengths > 0)
    assert len(spec.edges) == 16


def test_skeleton_rejects_cycles():
    with pytest.raises(ValueError):
        SkeletonSpec((0, 2, 1), np.ones((3, 3)), np.zeros((3, 3, 2)))


def test_rest_pose_is_offset_chain(spec):
    pose = forward_kinematics(rest_angles(spec), spec)
    expected = np.zeros((17, 3))
    for j in range(1, 17):
        expected[j] = expected[H36M_PARENTS[j]] + spec.offsets[j]
    np.testing.assert_allclose(pose, expected, atol=1e-12)


def test_root_yaw_by_pi_negates_x_and_z(spec):
    rest = forward_kinematics(rest_angles(spec), spec)
    a = rest_angles(spec)
    a[0, 1] = np.pi
    turned = forward_kinematics(a, spec)
    np.testing.assert_allclose(turned[:, 0], -rest[:, 0], atol=1e-9)
    np.testing.assert_allclose(turned[:, 2], -rest[:, 2], atol=1e-9)
    np.testing.assert_allclose(turned[:, 1], rest[:, 1], atol=1e-9)


def test_random_pose_preserves_bone_lengths(spec):
    pose = forward_kinematics(random_angles(spec, np.random.default_rng(0)), spec)
    lengths = [np.linalg.norm(pose[j] - pose[p]) for j, p in enumerate(spec.parents) if j]
    np.testing.assert_allclose(lengths, spec.bone_lengths, atol=1e-6)
    np.testing.assert_array_equal(pose[0], 0.0)


def test_out_of_limit_angles_rejected(spec):
    a = rest_angles(spec)
    a[2, 0] = 2.0  # knee beyond its flexion range
    with pytest.raises(ValueError, match="outside"):
        forward_kinematics(a, spec)


def test_adjacency_symmetric_and_normalized(spec):
    adj = normalized_adjacency(spec.joint_count, spec.edges)
    np.testing.assert_allclose(adj, adj.T)
    a = np.eye(17)
    for i, j in spec.edges:
        a[i, j] = a[j, i] = 1
    d = a.sum(1)
    np.testing.assert_allclose(adj, a / np.sqrt(np.outer(d, d)), atol=1e-15)


def test_projection_of_axis_point_is_centre():
    assert np.allclose(project(np.array([[0.0, 0.0, 300.0]]), Camera()), 0.0)


def test_doubling_root_depth_scales_by_depth_ratio(spec):
    pose = forward_kinematics(random_angles(spec, np.random.default_rng(3)), spec)
    cam, cam2 = Camera(root_depth=5000.0), Camera(root_depth=10000.0)
    z = pose[:, 2]
    ratio = (5000.0 + z) / (10000.0 + z)
    np.testing.assert_allclose(project(pose, cam2), project(pose, cam) * ratio[:, None], rtol=1e-12)


def test_projection_matches_scalar_recomputation(spec):
    pose = forward_kinematics(random_angles(spec, np.random.default_rng(0)), spec)
    uv = project(pose, Camera(focal_px=1150.0, image_size=640.0, root_depth=5000.0))
    for j in range(17):
        x, y, z = pose[j]
        u_px = 1150.0 * x / (z + 5000.0)
        v_px = 1150.0 * y / (z + 5000.0)
        assert uv[j, 0] == pytest.approx(u_px / 320.0, abs=1e-12)
        assert uv[j, 1] == pytest.approx(v_px / 320.0, abs=1e-12)


def test_non_positive_depth_rejected():
    with pytest.raises(ValueError, match="depth"):
        project(np.array([[0.0, 0.0, -6000.0]]), Camera())


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_unproject_inverts_project(seed):
    spec = h36m_skeleton()
    pose = forward_kinematics(random_angles(spec, np.random.default_rng(seed)), spec)
    cam = Camera()
    back = unproject(project(pose, cam), pose[:, 2], cam)
    np.testing.assert_allclose(back, pose, atol=1e-9)


def test_pixel_convention_round_trip():
    uv = np.array([[-1.0, -1.0], [0.0, 0.0], [0.3, -0.7]])
    np.testing.assert_allclose(pixel_to_norm(norm_to_pixel(uv)), uv, atol=1e-15)
    np.testing.assert_allclose(norm_to_pixel(np.zeros((1, 2))), [[31.5, 31.5]])


def test_centred_heatmap_peaks_at_centre_and_sums_to_one():
    uv = pixel_to_norm(np.array([[32.0, 32.0]]))
    hm = render_heatmaps(uv, sigma=2.0, noise=0.0)
    assert np.unravel_index(np.argmax(hm[0]), hm[0].shape) == (32, 32)
    assert abs(hm[0].sum() - 1.0) <= 1e-9
    assert np.all(hm >= 0)


def test_heatmap_centroid_matches_joint_for_100_poses(spec):
    rng = np.random.default_rng(0)
    cam = Camera()
    worst = 0.0
    for _ in range(100):
        uv = project(forward_kinematics(random_angles(spec, rng), spec), cam)
        hm = render_heatmaps(uv, sigma=2.0)
        worst = max(worst, np.abs(heatmap_centroid(hm) - norm_to_pixel(uv)).max())
    assert worst < 0.1


def test_wider_sigma_has_larger_entropy():
    uv = np.zeros((1, 2))
    assert entropy(render_heatmaps(uv, sigma=4.0)) > entropy(render_heatmaps(uv, sigma=2.0))


def test_off_grid_centres_clamped():
    hm = render_heatmaps(np.array([[5.0, -5.0]]), sigma=2.0)
    r, c = np.unravel_index(np.argmax(hm[0]), hm[0].shape)
    assert (r, c) == (0, 63)
    assert abs(hm.sum() - 1.0) < 1e-9


def test_render_rejects_bad_sigma():
    with pytest.raises(ValueError):
        render_heatmaps(np.zeros((1, 2)), sigma=0.0)


def test_dataset_sizes_and_ids(small_ds):
    assert len(small_ds.train) == 40 and len(small_ds.test) == 10
    assert len({s.id for s in small_ds.samples}) == 50


def test_dataset_sizes_full_counts():
    ds = gen_dataset(n_train=2000, n_test=500, seed=0)
    assert len(ds.train) == 2000 and len(ds.test) == 500


def test_dataset_is_deterministic(tmp_path):
    a = dumps(dataset_to_dict(gen_dataset(n_train=10, n_test=5, seed=0)))
    b = dumps(dataset_to_dict(gen_dataset(n_train=10, n_test=5, seed=0)))
    c = dumps(dataset_to_dict(gen_dataset(n_train=10, n_test=5, seed=1)))
    assert a == b and a != c


def test_norm_stats_from_train_split(small_ds):
    train = np.array([s.pose3d for s in small_ds.train])
    z = small_ds.norm_stats.normalize(train).reshape(-1, 3)
    np.testing.assert_allclose(z.mean(0), 0.0, atol=1e-9)
    np.testing.assert_allclose(z.std(0), 1.0, atol=1e-9)


def test_generated_poses_keep_bone_lengths_and_2d_range(small_ds):
    spec = small_ds.skeleton
    for s in small_ds.samples:
        lengths = np.linalg.norm(s.pose3d[1:] - s.pose3d[list(spec.parents[1:])], axis=1)
        np.testing.assert_allclose(lengths, spec.bone_lengths, atol=1e-6)
        assert np.all(np.abs(s.pose2d_seq) <= 1.5)
        assert s.pose2d_seq.shape == (9, 17, 2)


def test_sequences_are_smooth():
    # noise-free frames move a few hundredths per step; independent random poses differ by ~0.5
    ds = gen_dataset(n_train=200, n_test=1, seed=0, noise_px=0.0)
    steps = [np.abs(np.diff(s.pose2d_seq, axis=0)).max() for s in ds.train]
    assert max(steps) < 0.1


def test_dataset_round_trip(tmp_path, small_ds):
    path = tmp_path / "d.json"
    save_dataset(small_ds, path)
    back = load_dataset(path)
    assert dumps(dataset_to_dict(back)) == path.read_text()
    np.testing.assert_array_equal(back.samples[3].get_heatmaps(back.config.grid),
                                  small_ds.samples[3].get_heatmaps(small_ds.config.grid))


def test_dense_heatmaps_stored_flat(tmp_path):
    ds = gen_dataset(n_train=2, n_test=1, seed=0)
    d = json.loads(dumps(dataset_to_dict(ds, full_heatmaps=True)))
    flat = np.array(d["samples"][0]["heatmaps"])
    assert flat.shape == (17, 64 * 64)
    back = dataset_from_dict(d)
    np.testing.assert_array_equal(back.samples[0].heatmaps, ds.samples[0].get_heatmaps((64, 64)))


def test_dataset_version_checked(small_ds):
    d = dataset_to_dict(small_ds)
    d["version"] = 99
    with pytest.raises(ValueError, match="99"):
        dataset_from_dict(d)


def test_histogram_point_mass_for_shared_pose():
    z = np.tile(np.linspace(-100, 100, 17), (50, 1))
    hist = z_histogram_from_depths(z, bins=64)
    for f in hist.freqs:
        np.testing.assert_array_equal(f, [1.0])


def test_histogram_normalized_on_corpus(small_ds):
    hist = z_histogram(small_ds, bins=64)
    for f, e in zip(hist.freqs, hist.edges):
        assert abs(f.sum() - 1.0) <= 1e-9
        assert len(f) in (1, 64)


def test_histogram_uniform_four_bins():
    z = np.random.default_rng(0).uniform(-100, 100, size=10_000)
    hist = z_histogram_from_depths(z, bins=4)
    np.testing.assert_allclose(hist.freqs[0], 0.25, atol=0.02)
    assert hist.edges[0][0] == z.min() and hist.edges[0][-1] == z.max()
