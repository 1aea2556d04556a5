import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import pck_recount
from narrate3d.errors import InvariantViolation, NoCommonKeypoints, ThresholdGridMismatch, TooFewCommonKeypoints
from narrate3d.geometry import CameraModel, SimilarityTransform3, invert, random_similarity
from narrate3d.reconstruction import Keypoints3D, Reconstruction
from narrate3d.transfer import (
    KeypointAnnotation2D,
    PckCurve,
    fit_gt_transform,
    keypoint_consistency,
    mean_pck_over_pairs,
    pck_3d,
    transfer_keypoints,
    triangulate_keypoints,
)

seeds = st.integers(0, 2**32 - 1)
K = np.array([[500.0, 0, 320], [0, 500, 240], [0, 0, 1]])


def ring_cameras(n, radius=3.0):
    cams = {}
    for i in range(n):
        a = 2 * np.pi * i / n
        cams[f"f{i}"] = CameraModel.look_at(K, [radius * np.cos(a), radius * np.sin(a), 1.5], [0, 0, 0], 640, 480)
    return cams


def rec_with(cams):
    return Reconstruction("r", [0], np.zeros((1, 3)), cams)


def annotate(cams, pts, names, noise=0.0, rng=None):
    out = []
    for fid, cam in cams.items():
        uv, _ = cam.project_many(pts)
        for n, p in zip(names, uv):
            if noise:
                p = p + rng.normal(scale=noise, size=2)
            out.append(KeypointAnnotation2D("r", fid, n, tuple(p)))
    return out


class TestTriangulateKeypoints:
    def test_exact_projections(self, rng):
        cams = ring_cameras(4)
        pts = rng.uniform(-0.5, 0.5, size=(6, 3))
        names = [f"k{i}" for i in range(6)]
        rep = triangulate_keypoints(annotate(cams, pts, names), rec_with(cams))
        assert rep.keypoints.names == names
        np.testing.assert_allclose(rep.keypoints.coords.T, pts, atol=1e-8)

    def test_single_view_omitted(self, rng):
        cams = ring_cameras(3)
        ann = annotate(cams, np.zeros((1, 3)), ["a"]) + [KeypointAnnotation2D("r", "f0", "b", (300.0, 200.0))]
        rep = triangulate_keypoints(ann, rec_with(cams))
        assert rep.keypoints.names == ["a"]
        assert rep.omitted["b"].startswith("InsufficientViews")

    def test_noise_within_linearized_bound(self):
        # 0.5 px noise over 5 views; compare with the first-order covariance sigma^2 (J^T J)^-1
        rng = np.random.default_rng(5)
        cams = ring_cameras(5)
        X = np.array([0.1, -0.2, 0.15])
        J = []
        for cam in cams.values():
            xc = cam.rotation @ X + cam.translation
            f = cam.intrinsics[0, 0]
            dproj = f * np.array([[1 / xc[2], 0, -xc[0] / xc[2] ** 2], [0, 1 / xc[2], -xc[1] / xc[2] ** 2]])
            J.append(dproj @ cam.rotation)
        J = np.vstack(J)
        cov = 0.25 * np.linalg.inv(J.T @ J)
        bound = 3 * np.sqrt(np.trace(cov))
        errs = []
        for _ in range(300):
            rep = triangulate_keypoints(annotate(cams, X[None], ["k"], 0.5, rng), rec_with(cams))
            errs.append(np.linalg.norm(rep.keypoints.coords[:, 0] - X))
        errs = np.array(errs)
        assert np.mean(errs <= bound) >= 0.99
        assert np.mean(errs ** 2) == pytest.approx(np.trace(cov), rel=0.3)


class TestTransfer:
    def test_identity(self, rng):
        k = Keypoints3D(["a", "b"], rng.normal(size=(3, 2)))
        out = transfer_keypoints(k, SimilarityTransform3.identity())
        assert out.names == k.names
        np.testing.assert_array_equal(out.coords, k.coords)

    @given(seeds)
    def test_matrix_oracle_and_inverse(self, seed):
        rng = np.random.default_rng(seed)
        S = random_similarity(rng)
        k = Keypoints3D([f"k{i}" for i in range(7)], rng.normal(size=(3, 7)))
        out = transfer_keypoints(k, S)
        M = S.matrix()
        np.testing.assert_allclose(out.coords, M[:3, :3] @ k.coords + M[:3, 3:], atol=1e-12)
        back = transfer_keypoints(out, invert(S))
        np.testing.assert_allclose(back.coords, k.coords, atol=1e-9)


class TestGroundTruthFit:
    def test_planted(self, rng):
        S = random_similarity(rng)
        k = Keypoints3D(list("abcdef"), rng.normal(size=(3, 6)))
        assert fit_gt_transform(k, transfer_keypoints(k, S)).allclose(S, 1e-9)

    def test_matches_by_name(self, rng):
        S = random_similarity(rng)
        k = Keypoints3D(list("abcde"), rng.normal(size=(3, 5)))
        t = transfer_keypoints(k, S)
        perm = [3, 0, 4, 1, 2]
        shuffled = Keypoints3D([t.names[i] for i in perm] + ["zz"], np.column_stack([t.coords[:, perm], [9, 9, 9]]))
        assert fit_gt_transform(k, shuffled).allclose(S, 1e-9)

    def test_same_is_identity(self, rng):
        k = Keypoints3D(list("abcd"), rng.normal(size=(3, 4)))
        assert fit_gt_transform(k, k).allclose(SimilarityTransform3.identity(), 1e-12)

    def test_disjoint(self, rng):
        with pytest.raises(TooFewCommonKeypoints):
            fit_gt_transform(Keypoints3D(list("abc"), rng.normal(size=(3, 3))), Keypoints3D(list("xyz"), rng.normal(size=(3, 3))))

    def test_robust_mode(self, rng):
        S = random_similarity(rng)
        k = Keypoints3D([f"k{i}" for i in range(10)], rng.normal(size=(3, 10)))
        t = transfer_keypoints(k, S)
        t.coords[:, 0] += 5.0
        assert fit_gt_transform(k, t, robust=True).allclose(S, 1e-8)

    def test_consistency_filter(self, rng):
        k = Keypoints3D([f"k{i}" for i in range(8)], rng.normal(size=(3, 8)))
        S = random_similarity(rng)
        t = transfer_keypoints(k, S)
        ok, rms, _ = keypoint_consistency(k, t, fit_gt_transform(k, t))
        assert ok and rms < 1e-9
        bad = Keypoints3D(t.names, t.coords + rng.normal(scale=2.0 * S.scale, size=t.coords.shape))
        assert not keypoint_consistency(k, bad, fit_gt_transform(k, bad))[0]


class TestPck:
    def test_perfect(self, rng):
        k = Keypoints3D(list("ab"), rng.normal(size=(3, 2)))
        np.testing.assert_array_equal(pck_3d(k, k, [1, 2, 3], 10.0).values, 1.0)

    def test_forced_values(self):
        gt = Keypoints3D(["a", "b"], np.zeros((3, 2)))
        pred = Keypoints3D(["a", "b"], np.array([[0.0, 0.5], [0, 0], [0, 0]]))
        np.testing.assert_array_equal(pck_3d(pred, gt, [4, 6], 10.0).values, [0.5, 1.0])

    @given(seeds)
    def test_recount_oracle(self, seed):
        rng = np.random.default_rng(seed)
        names = [f"k{i}" for i in range(int(rng.integers(1, 12)))]
        gt = Keypoints3D(names, rng.normal(size=(3, len(names))))
        pred = Keypoints3D(names, gt.coords + rng.normal(scale=0.1, size=gt.coords.shape))
        thr = np.sort(rng.uniform(0, 30, 8)) + np.arange(8) * 1e-6
        c = pck_3d(pred, gt, thr, 50.0)
        expect = pck_recount({n: pred.coords[:, i] for i, n in enumerate(names)},
                             {n: gt.coords[:, i] for i, n in enumerate(names)}, thr, 50.0)
        np.testing.assert_allclose(c.values, expect)
        assert np.all(np.diff(c.values) >= 0)

    def test_no_common(self, rng):
        with pytest.raises(NoCommonKeypoints):
            pck_3d(Keypoints3D(["a"], np.zeros((3, 1))), Keypoints3D(["b"], np.zeros((3, 1))), [1], 1.0)

    def test_mean_curves(self, rng):
        a = PckCurve([1, 2], [0, 1])
        np.testing.assert_array_equal(mean_pck_over_pairs([a]).values, [0, 1])
        np.testing.assert_array_equal(mean_pck_over_pairs([a, PckCurve([1, 2], [1, 1])]).values, [0.5, 1])
        curves = [PckCurve(np.arange(1, 6), np.sort(rng.uniform(size=5))) for _ in range(10)]
        expect = [sum(c.values[i] for c in curves) / 10 for i in range(5)]
        np.testing.assert_allclose(mean_pck_over_pairs(curves).values, expect, atol=1e-15)
        with pytest.raises(ThresholdGridMismatch):
            mean_pck_over_pairs([a, PckCurve([1, 3], [0, 1])])

    def test_curve_invariants(self):
        with pytest.raises(InvariantViolation):
            PckCurve([2, 1], [0, 1])
        with pytest.raises(InvariantViolation):
            PckCurve([1, 2], [1, 0.5])
