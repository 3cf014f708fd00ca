import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ncmatch.consensus import DescriptorMap, correlate, ncn_filter
from ncmatch.errors import ContractViolation
from ncmatch.keypoints import Keypoint, nms, top_k_per_block
from ncmatch.matching import (CoarseMatch, Correspondence, coarse_matches,
                              interpolate_descriptors, knn_ratio_match, read_correspondences,
                              refine_matches, write_correspondences)
from ncmatch.tensor4d import Conv4Stack


def test_coarse_examples():
    eye = np.zeros((2, 3, 2, 3))
    for i in range(2):
        for j in range(3):
            eye[i, j, i, j] = 1.0
    got = coarse_matches(eye)
    assert [(m.cellA, m.cellB) for m in got] == [((i, j), (i, j)) for i in range(2) for j in range(3)]
    assert coarse_matches(np.zeros((2, 2, 2, 2)), min_score=0.1) == []
    c = np.array([[0.8, 0.1], [0.1, 0.8]]).reshape(2, 1, 2, 1)
    assert coarse_matches(c) == [CoarseMatch((0, 0), (0, 0), 0.8), CoarseMatch((1, 0), (1, 0), 0.8)]
    # ties go to the lowest (k, l)
    assert coarse_matches(np.ones((1, 1, 2, 2)))[0].cellB == (0, 0)


def test_permutation_recovery(rng):
    h, w, dim = 4, 5, 32
    f = rng.normal(size=(h, w, dim))
    perm = rng.permutation(h * w)
    g = f.reshape(h * w, dim)[perm].reshape(h, w, dim)
    filt = ncn_filter(correlate(DescriptorMap(f), DescriptorMap(g)), Conv4Stack.delta())
    ms = coarse_matches(filt)
    assert len(ms) == h * w
    inv = np.argsort(perm)
    for m in ms:
        assert m.cellB == divmod(int(inv[m.cellA[0] * w + m.cellA[1]]), w)


def test_interpolation_at_cell_centres(rng):
    f = DescriptorMap(rng.normal(size=(3, 4, 6)))
    ys, xs = np.mgrid[0:3, 0:4]
    d = interpolate_descriptors(f, (16 * xs + 7.5).ravel(), (16 * ys + 7.5).ravel())
    np.testing.assert_allclose(d, f.descriptors.reshape(-1, 6), atol=1e-12)
    mid = interpolate_descriptors(f, [16 + 7.5], [7.5 + 8])[0]
    want = f.descriptors[0, 1] + f.descriptors[1, 1]
    np.testing.assert_allclose(mid, want / np.linalg.norm(want), atol=1e-12)


def test_refine_trivial_cases(rng):
    f = DescriptorMap(rng.normal(size=(2, 2, 8)))
    m = [CoarseMatch((0, 1), (1, 0), 0.5)]
    a = {(0, 1): [Keypoint(20, 3, 0.9)]}
    b = {(1, 0): [Keypoint(2, 30, 0.9)]}
    got = refine_matches(m, a, b, f, f)
    assert len(got) == 1 and got[0].pA == (20, 3) and got[0].pB == (2, 30)
    assert refine_matches(m, a, {}, f, f) == []
    assert refine_matches(m, a, {(1, 0): []}, f, f) == []


def test_refine_planted_permutation(rng):
    basis = np.linalg.qr(rng.normal(size=(8, 8)))[0][:, :4].T  # 4 orthonormal directions
    f = DescriptorMap(rng.normal(size=(1, 1, 8)))
    xy = [(2, 3), (11, 4), (5, 12), (13, 13)]
    perm = rng.permutation(4)
    a = [Keypoint(x, y, 1.0, basis[n]) for n, (x, y) in enumerate(xy)]
    b = [Keypoint(*xy[p], 1.0, basis[perm[p]]) for p in range(4)]
    got = refine_matches([CoarseMatch((0, 0), (0, 0), 1.0)], {(0, 0): a}, {(0, 0): b}, f, f)
    assert len(got) == 4
    inv = np.argsort(perm)
    for c in got:
        n = xy.index(c.pA)
        assert c.pB == xy[inv[n]]
        assert c.score == pytest.approx(1.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.booleans())
def test_refine_invariants(seed, mutual):
    rng = np.random.default_rng(seed)
    fA = DescriptorMap(rng.normal(size=(3, 3, 6)))
    fB = DescriptorMap(rng.normal(size=(3, 3, 6)))
    kA = top_k_per_block((48, 48), nms(rng.random((48, 48)), 2, 0.0))
    kB = top_k_per_block((48, 48), nms(rng.random((48, 48)), 2, 0.0))
    coarse = coarse_matches(np.maximum(correlate(fA, fB), 0))
    got = refine_matches(coarse, kA, kB, fA, fB, mutual=mutual)
    per = {}
    for c in got:
        cell = (int(c.pA[1]) // 16, int(c.pA[0]) // 16)
        per.setdefault(cell, []).append(c)
    for m in coarse:
        cs = per.get(m.cellA, [])
        assert len(cs) <= 4
        a, b = kA[m.cellA], kB[m.cellB]
        for c in cs:
            assert (int(c.pB[1]) // 16, int(c.pB[0]) // 16) == m.cellB
            if not mutual:
                continue
            # brute-force check of reciprocity with interpolated descriptors
            da = interpolate_descriptors(fA, [k.x for k in a], [k.y for k in a])
            db = interpolate_descriptors(fB, [k.x for k in b], [k.y for k in b])
            ia = [(k.x, k.y) for k in a].index(c.pA)
            ib = [(k.x, k.y) for k in b].index(c.pB)
            sims = da @ db.T
            assert sims[ia].argmax() == ib and sims[:, ib].argmax() == ia


def brute_ratio(A, B, ratio):
    out = []
    for i, a in enumerate(A):
        d = [float(np.sqrt(np.sum((a - b) ** 2))) for b in B]
        order = sorted(range(len(B)), key=lambda j: (d[j], j))
        if d[order[0]] < ratio * d[order[1]]:
            out.append((i, order[0]))
    return out


def test_knn_examples():
    B = np.eye(4)
    assert knn_ratio_match(B[:1], B) == [(0, 0)]
    dup = np.array([[1.0, 0, 0], [1.0, 0, 0], [0, 1.0, 0]])
    assert knn_ratio_match(np.array([[0.8, 0.6, 0]]), dup) == []
    assert knn_ratio_match(B[:1], B[:1]) == []
    with pytest.raises(ContractViolation):
        knn_ratio_match(B, B, ratio=0)


def test_knn_straddling_margins(rng):
    # each query sits between two B entries with d1/d2 just below or above 0.75
    B, A, expect = [], [], []
    for n, r in enumerate([0.70, 0.74, 0.76, 0.80, 0.749, 0.751]):
        base = np.zeros(20)
        u = np.zeros(20)
        base[2 * n] = 10.0
        u[2 * n + 1] = 1.0
        B += [base, base + (1 + r) * u]
        A.append(base + u)  # distances 1 and r
        expect.append(1.0 / r < 1 / 0.75)
    A, B = np.array(A), np.array(B)
    got = knn_ratio_match(A, B)
    assert got == brute_ratio(A, B, 0.75)
    kept = {i for i, _ in got}
    # d1 = r, d2 = 1 when the nearer neighbour is the shifted entry
    for n, r in enumerate([0.70, 0.74, 0.76, 0.80, 0.749, 0.751]):
        assert (n in kept) == (r < 0.75)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.3, 1.0))
def test_knn_matches_brute_force(seed, ratio):
    rng = np.random.default_rng(seed)
    B = rng.normal(size=(12, 5))
    A = B[rng.integers(0, 12, size=8)] + rng.normal(scale=0.5, size=(8, 5))
    assert knn_ratio_match(A, B, ratio) == brute_ratio(A, B, ratio)


def test_correspondence_jsonl_roundtrip():
    cs = [Correspondence((1, 2), (3.5, 4), 0.25), Correspondence((0, 0), (9, 9), 1.0)]
    buf = io.StringIO()
    write_correspondences(cs, buf)
    lines = buf.getvalue().splitlines()
    assert len(lines) == 2 and '"xA": 1' in lines[0]
    assert read_correspondences(io.StringIO(buf.getvalue())) == cs
