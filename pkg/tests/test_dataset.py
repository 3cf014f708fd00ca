import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.ndimage import gaussian_filter

from conftest import random_rotation
from ncmatch.consensus import correlate
from ncmatch.dataset import (SYNTH_INTRINSICS, PosedImage, camera_center,
                             handcrafted_cell_logits, handcrafted_descriptor_map, label_pair,
                             load_pgm, read_planted, read_poses, save_pgm, select_close_pairs,
                             synth_scene, write_poses, write_synthetic_dump)
from ncmatch.errors import FileFormatError
from ncmatch.geometry import (CameraIntrinsics, Pose, decompose_essential, essential_from_pose,
                              normalize_points, ransac_essential, rotation_about, rotation_error,
                              sampson_distance, translation_error)
from ncmatch.keypoints import decode_response, nms
from ncmatch.matching import coarse_matches

K = CameraIntrinsics(400, 400, 160, 120)


def posed(name, R, C, traversal="night"):
    R = np.asarray(R, dtype=float)
    return PosedImage(name, Pose(R, -R @ np.asarray(C, dtype=float)), K, traversal)


def textured(shape, seed=0):
    rng = np.random.default_rng(seed)
    img = gaussian_filter(rng.random(shape), 2.0)
    return (img - img.min()) / (img.max() - img.min())


def test_camera_center_examples(rng):
    assert not camera_center(Pose(np.eye(3), np.zeros(3))).any()
    np.testing.assert_array_equal(camera_center(Pose(np.eye(3), [0, 0, -5.0])), [0, 0, 5])
    p = Pose(random_rotation(rng), rng.normal(size=3))
    assert np.linalg.norm(p.R @ camera_center(p) + p.t) < 1e-12


def test_close_pair_examples():
    a = posed("a", np.eye(3), [0, 0, 0], "overcast-reference")
    assert len(select_close_pairs([a], [posed("q", np.eye(3), [0, 0, 0])])) == 1
    assert select_close_pairs([a], [posed("q", np.eye(3), [11, 0, 0])]) == []
    turned = posed("q", rotation_about([0, 1, 0], math.radians(50)), [1, 0, 0])
    assert select_close_pairs([a], [turned]) == []
    pair = select_close_pairs([a], [posed("q", np.eye(3), [3, 4, 0])])[0]
    assert pair.baseline == pytest.approx(5.0)
    np.testing.assert_allclose(pair.gt_relative.t, [-3, -4, 0], atol=1e-12)


def brute_pairs(ref, qry, d_max, a_max):
    out = set()
    for q in qry:
        for r in ref:
            d = np.linalg.norm(camera_center(q.pose) - camera_center(r.pose))
            zq = q.pose.R.T @ [0, 0, 1]
            zr = r.pose.R.T @ [0, 0, 1]
            ang = math.acos(np.clip(zq @ zr, -1, 1))
            if d < d_max and ang < a_max:
                out.add((r.id, q.id))
    return out


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.floats(1, 15), st.floats(0.1, 1.5))
def test_close_pairs_oracle_and_monotone(seed, d_max, a_max):
    rng = np.random.default_rng(seed)
    grid = [(x, y) for x in range(0, 20, 4) for y in range(0, 12, 4)]
    ref = [posed(f"r{n}", rotation_about([0, 1, 0], rng.uniform(-1, 1)), [x, 0, y],
                 "overcast-reference") for n, (x, y) in enumerate(grid)]
    qry = [posed(f"q{n}", rotation_about([0, 1, 0], rng.uniform(-1, 1)),
                 [x + rng.normal(), 0, y + rng.normal()]) for n, (x, y) in enumerate(grid)]
    got = {(p.ref.id, p.query.id) for p in select_close_pairs(ref, qry, d_max, a_max)}
    assert got == brute_pairs(ref, qry, d_max, a_max)
    smaller = {(p.ref.id, p.query.id) for p in select_close_pairs(ref, qry, 0.7 * d_max, 0.7 * a_max)}
    assert smaller <= got


def test_label_pair_examples(rng):
    a = posed("a", np.eye(3), [0, 0, 0])
    assert label_pair(a, a) == 1
    assert label_pair(a, posed("b", np.eye(3), [6, 0, 0])) == 0
    assert label_pair(a, posed("b", rotation_about([0, 1, 0], math.radians(45)), [3, 0, 0])) == 0
    assert label_pair(a, posed("b", rotation_about([0, 1, 0], math.radians(20)), [3, 0, 0])) == 1
    for _ in range(20):
        p = posed("p", random_rotation(rng), rng.normal(size=3) * 100)
        assert label_pair(p, p) == 1


def test_pose_file_roundtrip(tmp_path, rng):
    ims = [posed(f"i{n}", random_rotation(rng), rng.normal(size=3)) for n in range(5)]
    path = tmp_path / "poses.csv"
    write_poses(ims, path)
    back = read_poses(path)
    assert [b.id for b in back] == [i.id for i in ims]
    for a, b in zip(ims, back):
        assert rotation_error(a.pose.R, b.pose.R) < 1e-12
        np.testing.assert_allclose(b.pose.t, a.pose.t, atol=1e-12)
        assert b.intrinsics == a.intrinsics and b.traversal == a.traversal


def test_pose_file_rejects_bad_rows(tmp_path):
    path = tmp_path / "poses.csv"
    head = "id,traversal,qw,qx,qy,qz,tx,ty,tz,fx,fy,cx,cy\n"
    path.write_text(head + "a,night,1.00001,0,0,0,0,0,0,1,1,0,0\n")
    with pytest.raises(FileFormatError):
        read_poses(path)
    path.write_text(head + "a,night,1,0,0,0,0,0,zero,1,1,0,0\n")
    with pytest.raises(FileFormatError):
        read_poses(path)
    path.write_text("id,qw\n")
    with pytest.raises(FileFormatError):
        read_poses(path)
    path.write_text(head + "a,night,1,0,0,0.0000005,0,0,0,1,1,0,0\n")
    assert len(read_poses(path)) == 1


def test_pgm_load_pads(tmp_path):
    img = textured((20, 35))
    p = tmp_path / "a.pgm"
    save_pgm(img, p)
    assert p.read_bytes()[:2] == b"P5"
    got = load_pgm(p)
    assert got.shape == (32, 48)
    np.testing.assert_allclose(got[:20, :35], img, atol=0.5 / 255 + 1e-12)
    assert not got[20:].any() and not got[:, 35:].any()
    p.write_bytes(b"not an image")
    with pytest.raises(FileFormatError):
        load_pgm(p)


@pytest.mark.parametrize("value", [0.0, 1.0, 0.37])
def test_descriptor_constant_image(value):
    f = handcrafted_descriptor_map(np.full((32, 48), value))
    assert f.shape == (2, 3) and f.dim == 256
    np.testing.assert_allclose(f.descriptors, 1 / 16, atol=1e-12)
    assert nms(decode_response(handcrafted_cell_logits(np.full((32, 48), value)))) == []


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31))
def test_descriptor_invariants_on_random_images(seed):
    rng = np.random.default_rng(seed)
    img = rng.random((32, 32)) * (rng.random() > 0.3)
    f = handcrafted_descriptor_map(img)
    assert np.all(np.isfinite(f.descriptors))
    np.testing.assert_allclose(np.linalg.norm(f.descriptors, axis=-1), 1.0, atol=1e-5)


def test_descriptor_copy_and_shift():
    img = textured((128, 176))
    f = handcrafted_descriptor_map(img)
    g = handcrafted_descriptor_map(img.copy())
    np.testing.assert_array_equal(f.descriptors, g.descriptors)
    c = correlate(f, g)
    for i in range(f.shape[0]):
        for j in range(f.shape[1]):
            assert c[i, j, i, j] == pytest.approx(1.0, abs=1e-12)
    a, b = img[:, :160], img[:, 16:176]
    ms = coarse_matches(correlate(handcrafted_descriptor_map(a), handcrafted_descriptor_map(b)))
    interior = [m for m in ms if m.cellA[1] >= 1]
    assert all(m.cellB == (m.cellA[0], m.cellA[1] - 1) for m in interior)


def test_synth_noise_free_is_exact():
    sc = synth_scene(5, n_points=100)
    gt = sc.pair.gt_relative
    x1 = normalize_points(sc.xA, SYNTH_INTRINSICS)
    x2 = normalize_points(sc.xB, SYNTH_INTRINSICS)
    E = essential_from_pose(gt.R, gt.t)
    E /= np.linalg.norm(E)
    x1h = np.column_stack([x1, np.ones(len(x1))])
    x2h = np.column_stack([x2, np.ones(len(x2))])
    assert np.abs(np.einsum("ni,ij,nj->n", x2h, E, x1h)).max() < 1e-12
    assert 0.5 <= sc.pair.baseline < 10
    assert rotation_error(sc.pair.ref.pose.R, sc.pair.query.pose.R) <= math.radians(30)
    assert np.all((sc.xA >= 0) & (sc.xA <= [255, 191]))
    assert np.all((sc.xB >= 0) & (sc.xB <= [255, 191]))


def test_synth_deterministic(tmp_path):
    a, b = synth_scene(9, noise_px=0.5, outlier_ratio=0.2), synth_scene(9, noise_px=0.5, outlier_ratio=0.2)
    for name in ("xA", "xB", "inlier", "descriptors", "points"):
        assert np.array_equal(getattr(a, name), getattr(b, name))
    assert (~a.inlier).sum() == 40
    write_synthetic_dump([a], tmp_path / "one")
    write_synthetic_dump([b], tmp_path / "two")
    for f in ("poses.csv", "correspondences.jsonl"):
        assert (tmp_path / "one" / f).read_bytes() == (tmp_path / "two" / f).read_bytes()
    planted = read_planted(tmp_path / "one" / "correspondences.jsonl")
    g = planted[(a.pair.ref.id, a.pair.query.id)]
    np.testing.assert_array_equal(g["xA"], a.xA)
    np.testing.assert_array_equal(g["inlier"], a.inlier)
    with pytest.raises(ValueError):
        synth_scene(0, n_points=7)


def test_synth_sampson_matches_noise_level():
    sigma_px = 0.5
    d = []
    for seed in range(50):
        sc = synth_scene(seed, n_points=200, noise_px=sigma_px)
        gt = sc.pair.gt_relative
        x1 = normalize_points(sc.xA, SYNTH_INTRINSICS)
        x2 = normalize_points(sc.xB, SYNTH_INTRINSICS)
        d.append(sampson_distance(essential_from_pose(gt.R, gt.t), x1, x2))
    d = np.concatenate(d)
    assert d.size == 10_000
    # first order: the Sampson distance is |N(0, s^2)| with s = sigma / f
    predicted = sigma_px / SYNTH_INTRINSICS.fx * math.sqrt(2 / math.pi)
    assert predicted / 2 < d.mean() < predicted * 2
    assert d.mean() == pytest.approx(predicted, rel=0.1)


def test_geometry_on_planted_correspondences():
    for seed in range(10):
        sc = synth_scene(seed)
        gt = sc.pair.gt_relative
        x1 = normalize_points(sc.xA, SYNTH_INTRINSICS)
        x2 = normalize_points(sc.xB, SYNTH_INTRINSICS)
        E, mask = ransac_essential(x1, x2, seed=seed)
        pose = decompose_essential(E, x1[mask], x2[mask])
        assert rotation_error(gt.R, pose.R) < 1e-6
        assert translation_error(gt.t, pose.t) < 1e-6 * sc.pair.baseline
