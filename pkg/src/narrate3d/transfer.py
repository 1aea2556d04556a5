"""Keypoint triangulation, transfer between reconstructions and PCK evaluation."""

from dataclasses import dataclass, field

import numpy as np

from .alignment import RansacConfig, fit_similarity_umeyama, solver_u
from .errors import (
    DegenerateGeometry,
    InsufficientViews,
    InvariantViolation,
    NoCommonKeypoints,
    PreconditionError,
    ThresholdGridMismatch,
    TooFewCommonKeypoints,
    DegenerateConfiguration,
)
from .reconstruction import Keypoints3D
from .geometry import triangulate


@dataclass(frozen=True)
class KeypointAnnotation2D:
    video_id: str
    frame_id: str
    keypoint_name: str
    pixel: tuple


@dataclass(eq=False)
class PckCurve:
    thresholds: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.thresholds = np.asarray(self.thresholds, dtype=float).reshape(-1)
        self.values = np.asarray(self.values, dtype=float).reshape(-1)
        if len(self.thresholds) != len(self.values):
            raise InvariantViolation("PCK thresholds and values differ in length")
        if np.any(np.diff(self.thresholds) <= 0):
            raise InvariantViolation("PCK thresholds must be strictly ascending")
        if np.any((self.values < 0) | (self.values > 1)):
            raise InvariantViolation("PCK values must lie in [0, 1]")
        if np.any(np.diff(self.values) < -1e-12):
            raise InvariantViolation("PCK values must be non-decreasing")

    def at(self, threshold):
        i = np.flatnonzero(np.isclose(self.thresholds, threshold, rtol=0, atol=1e-12))
        if not len(i):
            raise KeyError(threshold)
        return float(self.values[i[0]])


@dataclass(eq=False)
class TriangulationReport:
    keypoints: Keypoints3D
    reprojection_error: dict
    omitted: dict = field(default_factory=dict)


def triangulate_keypoints(annotations, rec):
    """Triangulate each annotated keypoint from all frames registered in ``rec``.

    Keypoints seen in fewer than two registered frames, or whose rays are
    degenerate, are left out and listed in ``omitted`` with the reason.
    Raises :class:`InsufficientViews` only if no keypoint survives.
    """
    by_name = {}
    for a in annotations:
        by_name.setdefault(a.keypoint_name, []).append(a)
    names, cols, errors, omitted = [], [], {}, {}
    for name in sorted(by_name):
        obs = [(rec.frames[a.frame_id], a.pixel) for a in by_name[name] if a.frame_id in rec.frames]
        if len(obs) < 2:
            omitted[name] = f"InsufficientViews: {len(obs)} registered view(s)"
            continue
        try:
            X, err = triangulate(obs)
        except DegenerateGeometry as exc:
            omitted[name] = f"DegenerateGeometry: {exc}"
            continue
        names.append(name)
        cols.append(X)
        errors[name] = err
    if not names:
        raise InsufficientViews(f"no keypoint could be triangulated in {rec.id}: {omitted}")
    return TriangulationReport(Keypoints3D(names, np.array(cols).T), errors, omitted)


def transfer_keypoints(k_src, S):
    """Map keypoints into another frame; names are kept."""
    return Keypoints3D(list(k_src.names), S.apply(k_src.coords.T).T)


def fit_gt_transform(k_src, k_tgt, robust=False, cfg=None):
    """Similarity between two keypoint sets matched by name.

    Plain least squares over all shared keypoints by default; ``robust=True``
    runs the RANSAC solver instead.
    """
    names, a, b = k_src.common(k_tgt)
    if len(names) < 3:
        raise TooFewCommonKeypoints(f"{len(names)} shared keypoint(s); need 3")
    try:
        if not robust:
            return fit_similarity_umeyama(a.T, b.T)
        cfg = cfg or RansacConfig(min_inliers=3, min_inlier_ratio=0.5)
        res = solver_u(a.T, b.T, cfg, "source", "target")
        if not res:
            raise TooFewCommonKeypoints(f"robust keypoint fit failed: {res.detail}")
        return res.transform
    except DegenerateConfiguration as exc:
        raise TooFewCommonKeypoints(f"shared keypoints are degenerate: {exc}") from None


def keypoint_consistency(k_src, k_tgt, S_gt, max_relative_rms=0.10):
    """Whether the two keypoint sets share a consistent shape.

    The pair passes when the RMS residual of the ground-truth fit is below
    ``max_relative_rms`` times the target keypoint-cloud diameter.
    Returns ``(ok, rms, diameter)``.
    """
    _, a, b = k_src.common(k_tgt)
    res = np.linalg.norm(S_gt.apply(a.T) - b.T, axis=1)
    rms = float(np.sqrt(np.mean(res ** 2)))
    pts = b.T
    diameter = float(np.max(np.linalg.norm(pts[:, None] - pts[None], axis=2)))
    return rms < max_relative_rms * diameter, rms, diameter


def pck_3d(predicted, ground_truth, thresholds_cm, metric_scale):
    """Fraction of shared keypoints within each metric threshold.

    ``metric_scale`` converts model units to centimeters.
    """
    if metric_scale <= 0:
        raise PreconditionError("metric_scale must be positive")
    names, p, g = predicted.common(ground_truth)
    if not names:
        raise NoCommonKeypoints("predicted and ground-truth keypoints share no names")
    dist = metric_scale * np.linalg.norm(p - g, axis=0)
    thr = np.asarray(thresholds_cm, dtype=float)
    values = (dist[None, :] <= thr[:, None]).mean(axis=1)
    return PckCurve(thr, values)


def mean_pck_over_pairs(curves):
    curves = list(curves)
    if not curves:
        raise PreconditionError("need at least one curve")
    grid = curves[0].thresholds
    for c in curves[1:]:
        if not np.array_equal(c.thresholds, grid):
            raise ThresholdGridMismatch("curves use different threshold grids")
    return PckCurve(grid.copy(), np.mean([c.values for c in curves], axis=0))


def project_keypoints(k, cameras):
    """Project keypoints into frames; returns ``{frame_id: {name: pixel}}`` for points in front and in bounds."""
    out = {}
    for fid, cam in cameras.items():
        uv, depth = cam.project_many(k.coords.T)
        ok = (depth > 1e-9) & cam.in_bounds(uv)
        out[fid] = {n: uv[i] for i, n in enumerate(k.names) if ok[i]}
    return out
