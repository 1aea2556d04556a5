"""Per-video sparse reconstructions and 3D keypoint sets."""

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import InvariantViolation, PreconditionError, UnknownFrame


@dataclass(eq=False)
class Reconstruction:
    """Sparse point cloud with cameras and 2D-3D observation tracks.

    Parameters
    ----------
    id : str
    point_ids : (P,) int array
    points : (P, 3) float array
    frames : dict
        ``frame_id -> CameraModel``, in file order.
    obs_frame : list of str
        Frame of each observation.
    obs_keypoint : (O,) int array
        Keypoint index of each observation within its frame.
    obs_pixel : (O, 2) float array
    obs_point : (O,) int array
        Point id each observation belongs to.
    """

    id: str
    point_ids: np.ndarray
    points: np.ndarray
    frames: dict
    obs_frame: list = field(default_factory=list)
    obs_keypoint: np.ndarray = None
    obs_pixel: np.ndarray = None
    obs_point: np.ndarray = None

    def __post_init__(self):
        self.point_ids = np.asarray(self.point_ids, dtype=np.int64).reshape(-1)
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        n_obs = len(self.obs_frame)
        self.obs_frame = [str(f) for f in self.obs_frame]
        self.obs_keypoint = np.asarray(
            [] if self.obs_keypoint is None else self.obs_keypoint, dtype=np.int64
        ).reshape(-1)
        self.obs_pixel = np.asarray(
            np.zeros((0, 2)) if self.obs_pixel is None else self.obs_pixel, dtype=float
        ).reshape(-1, 2)
        self.obs_point = np.asarray([] if self.obs_point is None else self.obs_point, dtype=np.int64).reshape(-1)
        if not (len(self.obs_keypoint) == len(self.obs_pixel) == len(self.obs_point) == n_obs):
            raise InvariantViolation(f"reconstruction {self.id}: observation columns differ in length")
        self._tree_cache = {}
        self._row_of_point = None
        self.validate()

    def validate(self):
        if len(self.point_ids) != len(self.points):
            raise InvariantViolation(f"reconstruction {self.id}: point id/coordinate count mismatch")
        if not np.all(np.isfinite(self.points)):
            bad = int(self.point_ids[~np.all(np.isfinite(self.points), axis=1)][0])
            raise InvariantViolation(f"reconstruction {self.id}: point {bad} is not finite")
        uniq, counts = np.unique(self.point_ids, return_counts=True)
        if np.any(counts > 1):
            raise InvariantViolation(f"reconstruction {self.id}: duplicate point id {int(uniq[counts > 1][0])}")
        known = set(self.point_ids.tolist())
        seen = set()
        for i, (f, k, pid) in enumerate(zip(self.obs_frame, self.obs_keypoint.tolist(), self.obs_point.tolist())):
            if f not in self.frames:
                raise InvariantViolation(f"reconstruction {self.id}: observation {i} references unknown frame {f!r}")
            if pid not in known:
                raise InvariantViolation(
                    f"reconstruction {self.id}: observation {i} (frame {f!r}, keypoint {k}) "
                    f"references unknown point_id {pid}"
                )
            if (f, k) in seen:
                raise InvariantViolation(f"reconstruction {self.id}: duplicate observation (frame {f!r}, keypoint {k})")
            seen.add((f, k))

    @property
    def frame_ids(self):
        return list(self.frames)

    def point_rows(self, pids):
        if self._row_of_point is None:
            self._row_of_point = {int(p): i for i, p in enumerate(self.point_ids)}
        return np.array([self._row_of_point[int(p)] for p in pids], dtype=np.int64)

    def frame_observations(self, frame_id):
        """``(keypoint_indices, pixels, point_ids)`` of one frame."""
        if frame_id not in self.frames:
            raise UnknownFrame(f"frame {frame_id!r} not in reconstruction {self.id}")
        sel = np.array([f == frame_id for f in self.obs_frame], dtype=bool)
        return self.obs_keypoint[sel], self.obs_pixel[sel], self.obs_point[sel]

    def _frame_index(self, frame_id):
        if frame_id not in self._tree_cache:
            _, pix, pids = self.frame_observations(frame_id)
            tree = cKDTree(pix) if len(pix) else None
            self._tree_cache[frame_id] = (tree, pids)
        return self._tree_cache[frame_id]

    def lookup_points(self, frame_id, pixels, radius):
        """Nearest observed point within ``radius`` px of each pixel.

        Returns ``(found_mask, xyz)``; rows of ``xyz`` are NaN where nothing
        was found. Ties go to the observation listed first.
        """
        pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
        tree, pids = self._frame_index(frame_id)
        xyz = np.full((len(pixels), 3), np.nan)
        if tree is None or len(pixels) == 0:
            return np.zeros(len(pixels), dtype=bool), xyz
        dist, idx = tree.query(pixels, k=1, distance_upper_bound=radius * (1 + 1e-12))
        found = np.isfinite(dist) & (dist <= radius)
        if np.any(found):
            xyz[found] = self.points[self.point_rows(pids[idx[found]])]
        return found, xyz

    def transformed(self, T):
        """Copy expressed in the frame that ``T`` maps into."""
        return Reconstruction(
            self.id,
            self.point_ids.copy(),
            T.apply(self.points),
            {f: cam.transformed(T) for f, cam in self.frames.items()},
            list(self.obs_frame),
            self.obs_keypoint.copy(),
            self.obs_pixel.copy(),
            self.obs_point.copy(),
        )


@dataclass(eq=False)
class Keypoints3D:
    """Named 3D keypoints; ``coords`` is ``(3, N_k)`` like a matrix of columns."""

    names: list
    coords: np.ndarray

    def __post_init__(self):
        self.names = [str(n) for n in self.names]
        self.coords = np.asarray(self.coords, dtype=float).reshape(3, -1)
        if len(self.names) < 1:
            raise PreconditionError("keypoint set must not be empty")
        if self.coords.shape[1] != len(self.names):
            raise PreconditionError("one coordinate column per keypoint name is required")
        if len(set(self.names)) != len(self.names):
            raise PreconditionError("keypoint names must be unique")
        if not np.all(np.isfinite(self.coords)):
            raise PreconditionError("keypoint coordinates must be finite")

    def __len__(self):
        return len(self.names)

    def as_dict(self):
        return {n: self.coords[:, i] for i, n in enumerate(self.names)}

    def common(self, other):
        """Aligned ``(names, self_cols, other_cols)`` over shared names, ordered as in ``self``."""
        mine = self.as_dict()
        theirs = other.as_dict()
        names = [n for n in self.names if n in theirs]
        a = np.array([mine[n] for n in names]).reshape(-1, 3).T
        b = np.array([theirs[n] for n in names]).reshape(-1, 3).T
        return names, a, b

    def __eq__(self, other):
        if not isinstance(other, Keypoints3D):
            return NotImplemented
        return self.names == other.names and np.array_equal(self.coords, other.coords)

    __hash__ = None
