import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ncmatch.errors import ContractViolation, FileFormatError
from ncmatch.keypoints import (Keypoint, decode_response, keypoint_map, load_cell_tensor, nms,
                               save_cell_tensor, top_k_per_block)


def brute_nms(r, radius, threshold):
    """Textbook greedy loop: pick the best remaining pixel, zero its window."""
    r = r.copy()
    out = []
    while True:
        best = None
        for y in range(r.shape[0]):
            for x in range(r.shape[1]):
                v = r[y, x]
                if v >= threshold and v > 0 and (best is None or v > best[0]):
                    best = (v, y, x)
        if best is None:
            return out
        v, y, x = best
        out.append((x, y, v))
        r[max(0, y - radius):y + radius + 1, max(0, x - radius):x + radius + 1] = 0


def test_decode_uniform_and_dustbin():
    r = decode_response(np.zeros((2, 3, 65)))
    assert r.shape == (16, 24)
    np.testing.assert_allclose(r, 1 / 65, rtol=1e-14)
    assert abs(r[0, 0] - 0.015385) < 1e-6
    t = np.zeros((1, 1, 65))
    t[..., 64] = 50.0
    assert decode_response(t).max() < 1e-20


def test_decode_single_channel_peak():
    t = np.zeros((2, 2, 65))
    t[1, 0, 0] = 10.0
    r = decode_response(t)
    e = math.exp(10)
    assert r[8, 0] == pytest.approx(e / (e + 64), rel=1e-12)
    assert r[8, 0] == pytest.approx(0.99710, abs=5e-6)
    assert r[8, 1] == pytest.approx(1 / (e + 64), rel=1e-12)
    assert r[8, 1] == pytest.approx(4.5e-5, rel=0.01)


def test_decode_pixel_order(rng):
    # channel 8*dy + dx lands on pixel (x=dx, y=dy) of its cell
    t = np.full((2, 3, 65), -30.0)
    for cy in range(2):
        for cx in range(3):
            ch = int(rng.integers(64))
            t[cy, cx, ch] = 30.0
            r = decode_response(t)
            dy, dx = divmod(ch, 8)
            assert r[8 * cy + dy, 8 * cx + dx] > 0.99
            t[cy, cx, ch] = -30.0
    with pytest.raises(ContractViolation):
        decode_response(np.zeros((2, 2, 64)))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.floats(-100, 100))
def test_decode_shift_invariance(seed, shift):
    rng = np.random.default_rng(seed)
    t = rng.normal(scale=4, size=(2, 2, 65))
    np.testing.assert_allclose(decode_response(t + shift), decode_response(t), atol=1e-6)


def test_nms_examples():
    assert nms(np.zeros((16, 16))) == []
    r = np.zeros((16, 16))
    r[5, 9] = 0.5
    assert nms(r) == [Keypoint(9, 5, 0.5)]
    r = np.zeros((16, 16))
    r[4, 4] = 0.9
    r[4, 7] = 0.8
    assert [(k.x, k.y) for k in nms(r, radius=4)] == [(4, 4)]
    assert [(k.x, k.y) for k in nms(r, radius=2)] == [(4, 4), (7, 4)]
    # tie resolved by (y, x)
    r = np.zeros((16, 16))
    r[6, 2] = r[6, 5] = r[3, 9] = 0.4
    assert [(k.x, k.y) for k in nms(r, radius=3)] == [(9, 3), (2, 6)]
    with pytest.raises(ContractViolation):
        nms(r, radius=0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 5))
def test_nms_matches_brute_force(seed, radius):
    rng = np.random.default_rng(seed)
    r = np.round(rng.random((16, 16)), 2) * (rng.random((16, 16)) < 0.5)
    got = [(k.x, k.y, k.response) for k in nms(r, radius, 0.1)]
    assert got == brute_nms(r, radius, 0.1)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 6))
def test_nms_separation_and_idempotence(seed, radius):
    rng = np.random.default_rng(seed)
    r = rng.random((24, 32))
    kps = nms(r, radius, 0.0)
    xy = np.array([(k.x, k.y) for k in kps])
    if len(xy) > 1:
        cheb = np.abs(xy[:, None, :] - xy[None, :, :]).max(axis=2)
        np.fill_diagonal(cheb, radius + 1)
        assert cheb.min() > radius
    assert [k.response for k in kps] == sorted((k.response for k in kps), reverse=True)
    assert nms(keypoint_map(r.shape, kps), radius, 0.0) == kps


def test_top_k_examples():
    shape = (32, 48)
    groups = top_k_per_block(shape, [])
    assert len(groups) == 6 and all(v == [] for v in groups.values())
    one = [Keypoint(16 * j + 3, 16 * i + 5, 0.1 * (i + j + 1)) for i in range(2) for j in range(3)]
    groups = top_k_per_block(shape, one)
    for kp in one:
        assert groups[(kp.y // 16, kp.x // 16)] == [kp]
    six = [Keypoint(17 + n, 18 + n, r) for n, r in enumerate([0.3, 0.9, 0.1, 0.7, 0.5, 0.2])]
    got = top_k_per_block(shape, six)[(1, 1)]
    assert [k.response for k in got] == [0.9, 0.7, 0.5, 0.3]
    with pytest.raises(ContractViolation):
        top_k_per_block(shape, [Keypoint(48, 0, 1.0)])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_top_k_stays_in_block(seed):
    rng = np.random.default_rng(seed)
    r = rng.random((48, 64))
    for (i, j), kps in top_k_per_block(r.shape, nms(r, 2, 0.0)).items():
        assert len(kps) <= 4
        for kp in kps:
            assert 16 * i <= kp.y < 16 * i + 16 and 16 * j <= kp.x < 16 * j + 16


def test_cell_tensor_roundtrip(tmp_path, rng):
    t = rng.normal(size=(3, 2, 65))
    p = tmp_path / "a.kpt"
    save_cell_tensor(t, p)
    np.testing.assert_allclose(load_cell_tensor(p), t.astype(np.float32))
    p.write_bytes(b"KPT5" + p.read_bytes()[4:])
    with pytest.raises(FileFormatError):
        load_cell_tensor(p)
