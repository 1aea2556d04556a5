"""Similarity transforms, pinhole cameras, projection and DLT triangulation.

Points are plain numpy arrays of shape ``(3,)`` or ``(N, 3)``; pixels are
``(2,)`` or ``(N, 2)`` in continuous image coordinates with the origin at the
top-left corner of the image, so the frame center is ``(width / 2, height / 2)``.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegenerateGeometry,
    DepthNonPositive,
    InvalidCamera,
    InvalidTransform,
    PixelOutOfBounds,
    PreconditionError,
)

ORTHO_TOL = 1e-9
# inputs closer than this to SO(3) are kept bit-for-bit
_EXACT_TOL = 1e-12
_REPAIR_TOL = 1e-6
MIN_DEPTH = 1e-9


def _orthonormal_error(R):
    return np.abs(R.T @ R - np.eye(3)).max()


def nearest_rotation(M):
    """Project a 3x3 matrix onto SO(3) in the Frobenius sense."""
    U, _, Vt = np.linalg.svd(M)
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(U @ Vt))
    return U @ D @ Vt


def checked_rotation(R, what="rotation"):
    """Validate a rotation matrix, repairing tiny drift.

    Matrices within ``1e-12`` of orthonormal are returned unchanged, those
    within ``1e-6`` are re-orthonormalized, anything further off (or with a
    negative determinant) raises.
    """
    R = np.array(R, dtype=float)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        raise InvalidTransform(f"{what} must be a finite 3x3 matrix")
    if np.linalg.det(R) <= 0:
        raise InvalidTransform(f"{what} has non-positive determinant")
    err = _orthonormal_error(R)
    if err <= _EXACT_TOL:
        return R
    if err <= _REPAIR_TOL:
        return nearest_rotation(R)
    raise InvalidTransform(f"{what} deviates from orthonormal by {err:.3g}")


def quaternion_to_matrix(q):
    """Rotation matrix of a (w, x, y, z) quaternion; need not be unit norm."""
    w, x, y, z = (float(v) for v in q)
    n = w * w + x * x + y * y + z * z
    if not np.isfinite(n) or n < 1e-300:
        raise InvalidTransform("quaternion has zero norm")
    s = 2.0 / n
    return np.array(
        [
            [1 - s * (y * y + z * z), s * (x * y - z * w), s * (x * z + y * w)],
            [s * (x * y + z * w), 1 - s * (x * x + z * z), s * (y * z - x * w)],
            [s * (x * z - y * w), s * (y * z + x * w), 1 - s * (x * x + y * y)],
        ]
    )


def matrix_to_quaternion(R):
    """Unit (w, x, y, z) quaternion of a rotation matrix, with w >= 0."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    q /= np.linalg.norm(q)
    if q[0] < 0:
        q = -q
    return q


@dataclass(frozen=True, eq=False)
class SimilarityTransform3:
    """``p -> scale * rotation @ p + translation``."""

    scale: float = 1.0
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    # quaternion this transform was built from, kept so serialization round-trips exactly
    _quaternion: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        scale = float(self.scale)
        if not np.isfinite(scale) or scale <= 0:
            raise InvalidTransform(f"scale must be positive and finite, got {self.scale}")
        t = np.array(self.translation, dtype=float).reshape(-1)
        if t.shape != (3,) or not np.all(np.isfinite(t)):
            raise InvalidTransform("translation must be a finite 3-vector")
        R = checked_rotation(self.rotation)
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "scale", scale)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_quaternion(cls, scale, quaternion, translation):
        q = np.array(quaternion, dtype=float)
        T = cls(scale, quaternion_to_matrix(q), translation)
        object.__setattr__(T, "_quaternion", q)
        return T

    @classmethod
    def from_matrix(cls, M):
        """Build from a 4x4 homogeneous matrix ``[[sR, t], [0, 1]]``."""
        M = np.asarray(M, dtype=float)
        sR = M[:3, :3]
        scale = np.cbrt(np.linalg.det(sR))
        return cls(scale, sR / scale, M[:3, 3])

    def quaternion(self):
        if self._quaternion is not None:
            return self._quaternion.copy()
        return matrix_to_quaternion(self.rotation)

    def matrix(self):
        M = np.eye(4)
        M[:3, :3] = self.scale * self.rotation
        M[:3, 3] = self.translation
        return M

    def apply(self, points):
        p = np.asarray(points, dtype=float)
        return self.scale * (p @ self.rotation.T) + self.translation

    __call__ = apply

    def compose(self, other):
        """``self ∘ other``: apply ``other`` first."""
        return compose(self, other)

    def inverse(self):
        return invert(self)

    def allclose(self, other, atol=1e-9):
        return (
            abs(self.scale - other.scale) <= atol
            and np.allclose(self.rotation, other.rotation, rtol=0, atol=atol)
            and np.allclose(self.translation, other.translation, rtol=0, atol=atol)
        )

    def __eq__(self, other):
        if not isinstance(other, SimilarityTransform3):
            return NotImplemented
        return (
            self.scale == other.scale
            and np.array_equal(self.rotation, other.rotation)
            and np.array_equal(self.translation, other.translation)
        )

    __hash__ = None


def apply_transform(T, p):
    return T.apply(p)


def compose(T2, T1):
    """Transform equivalent to applying ``T1`` then ``T2``."""
    R = T2.rotation @ T1.rotation
    if _orthonormal_error(R) > _EXACT_TOL:
        R = nearest_rotation(R)
    return SimilarityTransform3(
        T2.scale * T1.scale,
        R,
        T2.scale * (T2.rotation @ T1.translation) + T2.translation,
    )


def invert(T):
    Rt = T.rotation.T.copy()
    return SimilarityTransform3(1.0 / T.scale, Rt, -(Rt @ T.translation) / T.scale)


def transform_error(T, T_ref):
    """Scale, rotation (Frobenius) and translation differences."""
    return (
        abs(T.scale - T_ref.scale),
        float(np.linalg.norm(T.rotation - T_ref.rotation)),
        float(np.linalg.norm(T.translation - T_ref.translation)),
    )


def rotation_angle_deg(R):
    c = (np.trace(R) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


@dataclass(frozen=True, eq=False)
class CameraModel:
    """Pinhole camera mapping world points to pixels.

    ``x_cam = rotation @ X + translation`` and ``pixel ~ intrinsics @ x_cam``.
    """

    intrinsics: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        K = np.array(self.intrinsics, dtype=float)
        if K.shape != (3, 3) or not np.all(np.isfinite(K)):
            raise InvalidCamera("intrinsics must be a finite 3x3 matrix")
        if K[1, 0] != 0 or K[2, 0] != 0 or K[2, 1] != 0:
            raise InvalidCamera("intrinsics must be upper triangular")
        if K[2, 2] != 1:
            raise InvalidCamera("intrinsics[2][2] must be 1")
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise InvalidCamera("focal lengths must be positive")
        try:
            R = checked_rotation(self.rotation, "extrinsic rotation")
        except InvalidTransform as exc:
            raise InvalidCamera(str(exc)) from None
        t = np.array(self.translation, dtype=float).reshape(-1)
        if t.shape != (3,) or not np.all(np.isfinite(t)):
            raise InvalidCamera("extrinsic translation must be a finite 3-vector")
        w, h = int(self.width), int(self.height)
        if w <= 0 or h <= 0 or w != self.width or h != self.height:
            raise InvalidCamera("image size must be positive integers")
        for a in (K, R, t):
            a.flags.writeable = False
        object.__setattr__(self, "intrinsics", K)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "width", w)
        object.__setattr__(self, "height", h)

    @classmethod
    def simple(cls, focal, width, height, rotation=None, translation=None, center=None):
        """Camera with square pixels and the principal point at ``center``."""
        cx, cy = (width / 2.0, height / 2.0) if center is None else center
        K = np.array([[focal, 0.0, cx], [0.0, focal, cy], [0.0, 0.0, 1.0]])
        R = np.eye(3) if rotation is None else rotation
        t = np.zeros(3) if translation is None else translation
        return cls(K, R, t, width, height)

    @classmethod
    def look_at(cls, intrinsics, eye, target, width, height, up=(0.0, 0.0, 1.0)):
        """Camera at ``eye`` whose optical axis points at ``target``."""
        eye = np.asarray(eye, dtype=float)
        z = np.asarray(target, dtype=float) - eye
        z /= np.linalg.norm(z)
        up = np.asarray(up, dtype=float)
        if abs(z @ up) > 0.999:
            up = np.array([0.0, 1.0, 0.0])
        x = np.cross(z, up)
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        R = np.vstack([x, y, z])
        return cls(intrinsics, R, -R @ eye, width, height)

    @property
    def center(self):
        return -(self.rotation.T @ self.translation)

    def projection_matrix(self):
        return self.intrinsics @ np.hstack([self.rotation, self.translation[:, None]])

    def in_bounds(self, pixels):
        uv = np.asarray(pixels, dtype=float)
        return (uv[..., 0] >= 0) & (uv[..., 0] < self.width) & (uv[..., 1] >= 0) & (uv[..., 1] < self.height)

    def project_many(self, points):
        """Vectorized projection; returns ``(pixels, depths)`` without depth checks."""
        X = np.atleast_2d(np.asarray(points, dtype=float))
        xc = X @ self.rotation.T + self.translation
        depth = xc[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            h = xc @ self.intrinsics.T
            uv = h[:, :2] / h[:, 2:3]
        return uv, depth

    def transformed(self, T):
        """The same physical camera expressed in the frame ``T`` maps into."""
        # x_cam ∝ R T^{-1}(p); scaling x_cam by T.scale leaves pixels unchanged
        R = self.rotation @ T.rotation.T
        t = T.scale * self.translation - R @ T.translation
        return CameraModel(self.intrinsics, R, t, self.width, self.height)


def project(cam, p):
    """Pixel and depth of a single point; raises if it is not in front."""
    p = np.asarray(p, dtype=float)
    if p.shape != (3,) or not np.all(np.isfinite(p)):
        raise PreconditionError("point must be a finite 3-vector")
    uv, depth = cam.project_many(p[None])
    if depth[0] <= MIN_DEPTH:
        raise DepthNonPositive(f"point at depth {depth[0]:.3g} is not in front of the camera")
    return uv[0], float(depth[0])


def backproject_ray(cam, pixel):
    """Camera center and unit viewing direction through ``pixel``."""
    uv = np.asarray(pixel, dtype=float)
    if not cam.in_bounds(uv):
        raise PixelOutOfBounds(f"pixel {tuple(uv)} outside {cam.width}x{cam.height} image")
    d_cam = np.linalg.solve(cam.intrinsics, np.array([uv[0], uv[1], 1.0]))
    d = cam.rotation.T @ d_cam
    return cam.center, d / np.linalg.norm(d)


def triangulate(observations):
    """Linear (DLT) triangulation from ``[(camera, pixel), ...]``.

    Returns ``(point, mean_reprojection_error_px)``.
    """
    if len(observations) < 2:
        raise PreconditionError("triangulation needs at least two observations")
    rows = []
    for cam, pixel in observations:
        P = cam.projection_matrix()
        u, v = np.asarray(pixel, dtype=float)
        rows.append(u * P[2] - P[0])
        rows.append(v * P[2] - P[1])
    A = np.array(rows)
    A /= np.linalg.norm(A, axis=1, keepdims=True)
    _, s, Vt = np.linalg.svd(A)
    if s[-2] <= 1e-9 * s[0]:
        raise DegenerateGeometry("rays are parallel or cameras coincide")
    Xh = Vt[-1]
    if abs(Xh[3]) <= 1e-12 * np.abs(Xh[:3]).max():
        raise DegenerateGeometry("triangulated point lies at infinity")
    X = Xh[:3] / Xh[3]
    errs = []
    for cam, pixel in observations:
        uv, _ = cam.project_many(X[None])
        errs.append(np.linalg.norm(uv[0] - np.asarray(pixel, dtype=float)))
    return X, float(np.mean(errs))


def random_rotation(rng):
    """Uniformly distributed rotation from a numpy Generator."""
    q = rng.normal(size=4)
    return quaternion_to_matrix(q / np.linalg.norm(q))


def random_similarity(rng, scale_range=(0.5, 2.0), translation_scale=1.0):
    lo, hi = scale_range
    scale = float(np.exp(rng.uniform(np.log(lo), np.log(hi))))
    return SimilarityTransform3(scale, random_rotation(rng), rng.normal(scale=translation_scale, size=3))
