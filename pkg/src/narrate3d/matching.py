"""Frame-pair retrieval, mutual nearest-neighbour matching and flow filtering.

Local features, global descriptors and dense flow fields are produced by
external models; this module only consumes them.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    EmptyDescriptorList,
    EmptyFeatureSet,
    FlowFrameMismatch,
    InvariantViolation,
    PreconditionError,
    StageMismatch,
)

RAW_MUTUAL = "raw_mutual"
FLOW_FILTERED = "flow_filtered"
STAGES = (RAW_MUTUAL, FLOW_FILTERED)

DEFAULT_FLOW_TOLERANCE_PX = 8.0


@dataclass(eq=False)
class LocalFeatureSet:
    """Local features of one frame: ``descriptors`` is (d, N), ``positions`` (2, N)."""

    frame_id: str
    descriptors: np.ndarray
    positions: np.ndarray
    width: int = None
    height: int = None

    def __post_init__(self):
        self.descriptors = np.asarray(self.descriptors, dtype=float)
        if self.descriptors.ndim != 2:
            raise InvariantViolation(f"features {self.frame_id}: descriptors must be (d, N)")
        self.positions = np.asarray(self.positions, dtype=float).reshape(2, -1)
        if self.positions.shape[1] != self.descriptors.shape[1]:
            raise InvariantViolation(f"features {self.frame_id}: descriptor/position count mismatch")
        if self.descriptors.shape[1] and np.any(np.linalg.norm(self.descriptors, axis=0) == 0):
            raise InvariantViolation(f"features {self.frame_id}: zero descriptor column")
        if self.width is not None and self.height is not None and self.positions.size:
            x, y = self.positions
            if np.any((x < 0) | (x >= self.width) | (y < 0) | (y >= self.height)):
                raise InvariantViolation(f"features {self.frame_id}: position outside frame bounds")

    def __len__(self):
        return self.descriptors.shape[1]

    def normalized(self):
        return self.descriptors / np.linalg.norm(self.descriptors, axis=0, keepdims=True)


@dataclass(eq=False)
class GlobalDescriptor:
    frame_id: str
    vector: np.ndarray

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=float).reshape(-1)
        if not np.any(self.vector):
            raise InvariantViolation(f"global descriptor {self.frame_id}: zero vector")


@dataclass(eq=False)
class FlowField:
    """Dense 2D-2D mapping from a source frame into a target frame.

    ``grid[r, c]`` holds the target pixel that the source position at the
    center of grid cell ``(r, c)`` maps to. The grid may be coarser than the
    source frame; ``source_size`` is the source ``(width, height)`` in pixels.
    """

    source_frame_id: str
    target_frame_id: str
    grid: np.ndarray
    valid: np.ndarray
    source_size: tuple

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=float)
        if self.grid.ndim != 3 or self.grid.shape[2] != 2:
            raise InvariantViolation("flow grid must be (H, W, 2)")
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.valid.shape != self.grid.shape[:2]:
            raise InvariantViolation("flow validity mask must match the grid")
        if not np.all(np.isfinite(self.grid[self.valid])):
            raise InvariantViolation("flow grid is not finite where valid")
        self.source_size = (int(self.source_size[0]), int(self.source_size[1]))

    @classmethod
    def identity(cls, source_frame_id, target_frame_id, width, height, stride=1):
        gw, gh = int(np.ceil(width / stride)), int(np.ceil(height / stride))
        xs = (np.arange(gw) + 0.5) * width / gw
        ys = (np.arange(gh) + 0.5) * height / gh
        gx, gy = np.meshgrid(xs, ys)
        return cls(source_frame_id, target_frame_id, np.stack([gx, gy], axis=-1), np.ones((gh, gw), bool), (width, height))

    def sample_positions(self):
        """Source pixel coordinates of the grid samples, ``(H, W, 2)``."""
        gh, gw = self.grid.shape[:2]
        w, h = self.source_size
        xs = (np.arange(gw) + 0.5) * w / gw
        ys = (np.arange(gh) + 0.5) * h / gh
        gx, gy = np.meshgrid(xs, ys)
        return np.stack([gx, gy], axis=-1)

    def sample(self, pixels):
        """Bilinearly interpolated mapping at source pixels.

        Returns ``(mapped, ok)``. A position is valid only when it lies inside
        the source frame and every grid sample with nonzero weight is valid.
        """
        p = np.asarray(pixels, dtype=float).reshape(-1, 2)
        gh, gw = self.grid.shape[:2]
        w, h = self.source_size
        inside = (p[:, 0] >= 0) & (p[:, 0] < w) & (p[:, 1] >= 0) & (p[:, 1] < h)
        gx = np.clip(p[:, 0] * gw / w - 0.5, 0, gw - 1)
        gy = np.clip(p[:, 1] * gh / h - 0.5, 0, gh - 1)
        x0 = np.minimum(np.floor(gx).astype(int), max(gw - 2, 0))
        y0 = np.minimum(np.floor(gy).astype(int), max(gh - 2, 0))
        x1 = np.minimum(x0 + 1, gw - 1)
        y1 = np.minimum(y0 + 1, gh - 1)
        fx = (gx - x0)[:, None]
        fy = (gy - y0)[:, None]
        corners = [(y0, x0, (1 - fx) * (1 - fy)), (y0, x1, fx * (1 - fy)), (y1, x0, (1 - fx) * fy), (y1, x1, fx * fy)]
        mapped = np.zeros((len(p), 2))
        ok = inside.copy()
        for yy, xx, wgt in corners:
            used = wgt[:, 0] > 0
            v = self.valid[yy, xx]
            ok &= v | ~used
            val = np.where(v[:, None], self.grid[yy, xx], 0.0)
            mapped += wgt * val
        mapped[~ok] = np.nan
        return mapped, ok


@dataclass(eq=False)
class MatchSet:
    """One-to-one 2D-2D matches between frames ``pair[0]`` and ``pair[1]``."""

    pair: tuple
    index_a: np.ndarray
    index_b: np.ndarray
    pixel_a: np.ndarray
    pixel_b: np.ndarray
    stage: str = RAW_MUTUAL

    def __post_init__(self):
        self.pair = (str(self.pair[0]), str(self.pair[1]))
        self.index_a = np.asarray(self.index_a, dtype=np.int64).reshape(-1)
        self.index_b = np.asarray(self.index_b, dtype=np.int64).reshape(-1)
        self.pixel_a = np.asarray(self.pixel_a, dtype=float).reshape(-1, 2)
        self.pixel_b = np.asarray(self.pixel_b, dtype=float).reshape(-1, 2)
        n = len(self.index_a)
        if not (len(self.index_b) == len(self.pixel_a) == len(self.pixel_b) == n):
            raise InvariantViolation(f"matches {self.pair}: column lengths differ")
        if self.stage not in STAGES:
            raise InvariantViolation(f"matches {self.pair}: unknown stage {self.stage!r}")
        if len(np.unique(self.index_a)) != n or len(np.unique(self.index_b)) != n:
            raise InvariantViolation(f"matches {self.pair}: matches are not one-to-one")

    def __len__(self):
        return len(self.index_a)

    def subset(self, keep, stage=None):
        keep = np.asarray(keep)
        return MatchSet(
            self.pair, self.index_a[keep], self.index_b[keep], self.pixel_a[keep], self.pixel_b[keep],
            self.stage if stage is None else stage,
        )

    def check_against(self, feats_a, feats_b):
        if len(self) and (self.index_a.max() >= len(feats_a) or self.index_b.max() >= len(feats_b)):
            raise InvariantViolation(f"matches {self.pair}: feature index out of range")


def mutual_nn_match(a, b):
    """Pairs that are each other's nearest neighbour in descriptor space.

    Distances are Euclidean between L2-normalized descriptors; ties resolve
    to the lowest index.
    """
    if len(a) == 0 or len(b) == 0:
        raise EmptyFeatureSet("mutual matching needs two nonempty feature sets")
    if a.descriptors.shape[0] != b.descriptors.shape[0]:
        raise PreconditionError("descriptor dimensions differ")
    A, B = a.normalized(), b.normalized()
    dist = np.sqrt(np.maximum(2.0 - 2.0 * (A.T @ B), 0.0))
    nn_ab = np.argmin(dist, axis=1)
    nn_ba = np.argmin(dist, axis=0)
    ia = np.flatnonzero(nn_ba[nn_ab] == np.arange(len(a)))
    ib = nn_ab[ia]
    return MatchSet((a.frame_id, b.frame_id), ia, ib, a.positions[:, ia].T, b.positions[:, ib].T, RAW_MUTUAL)


def retrieve_frame_pairs(video_a, video_b, n_m):
    """Top ``n_m`` cross-video frame pairs by cosine similarity.

    Returns ``[(frame_a, frame_b, similarity), ...]`` sorted by decreasing
    similarity; equal similarities keep ``(index_a, index_b)`` order.
    """
    if not video_a or not video_b:
        raise EmptyDescriptorList("frame retrieval needs descriptors for both videos")
    if n_m < 1:
        raise PreconditionError("n_m must be at least 1")
    A = np.array([d.vector for d in video_a])
    B = np.array([d.vector for d in video_b])
    A = A / np.linalg.norm(A, axis=1, keepdims=True)
    B = B / np.linalg.norm(B, axis=1, keepdims=True)
    sim = (A @ B.T).ravel()
    order = np.argsort(-sim, kind="stable")[:n_m]
    nb = len(video_b)
    return [(video_a[k // nb].frame_id, video_b[k % nb].frame_id, float(sim[k])) for k in order]


def flow_filter(matches, flow, tolerance_px=DEFAULT_FLOW_TOLERANCE_PX):
    """Keep matches whose target pixel agrees with the flow within tolerance."""
    if matches.stage != RAW_MUTUAL:
        raise StageMismatch(f"flow filtering expects {RAW_MUTUAL} matches, got {matches.stage}")
    if (flow.source_frame_id, flow.target_frame_id) != tuple(matches.pair):
        raise FlowFrameMismatch(
            f"flow {flow.source_frame_id}->{flow.target_frame_id} does not cover pair {matches.pair}"
        )
    if tolerance_px <= 0:
        raise PreconditionError("tolerance must be positive")
    mapped, ok = flow.sample(matches.pixel_a)
    err = np.linalg.norm(mapped - matches.pixel_b, axis=1)
    keep = ok & (err <= tolerance_px)
    return matches.subset(np.flatnonzero(keep), FLOW_FILTERED)
