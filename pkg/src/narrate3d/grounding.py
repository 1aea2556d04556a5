"""Text-to-voxel grounding learned from narrated frames.

Training pairs come from 2D anchors in narrated frames that are
backprojected onto the registered point cloud and binned into a voxel grid.
A shared bag-of-tokens text encoder feeds one linear softmax head per
object model; all heads are trained jointly with cross-entropy.
"""

import re
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    EmptyPointCloud,
    EmptyTrainingSet,
    InvalidConfig,
    InvariantViolation,
    LabelOutOfRange,
    MissingStrategyInput,
    PixelOutOfBounds,
    PreconditionError,
    UnknownModelId,
)
from .geometry import MIN_DEPTH
from .transfer import PckCurve

CENTER_OF_FRAME = "center_of_frame"
HAND_DETECTOR = "hand_detector"
SALIENCY_ARGMAX = "saliency_argmax"
STRATEGIES = (CENTER_OF_FRAME, HAND_DETECTOR, SALIENCY_ARGMAX)

DEFAULT_DIVISIONS = 20
DEFAULT_N_VOXELS = 500
DEFAULT_SURFACE_RADIUS_PX = 5.0


@dataclass(eq=False)
class VoxelGrid:
    """Axis-aligned grid with a selected subset of voxels as class labels.

    Bins are half-open ``[lo, hi)`` except the last bin on each axis, which
    also holds points on the upper bound. Flat indices follow C order over
    ``(ix, iy, iz)``; labels follow the sorted active flat indices.
    """

    bbox_min: np.ndarray
    bbox_max: np.ndarray
    divisions: int
    active_voxels: np.ndarray
    counts: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.bbox_min = np.asarray(self.bbox_min, dtype=float).reshape(3)
        self.bbox_max = np.asarray(self.bbox_max, dtype=float).reshape(3)
        self.divisions = int(self.divisions)
        self.active_voxels = np.asarray(self.active_voxels, dtype=np.int64).reshape(-1)
        if not np.all(self.bbox_min < self.bbox_max):
            raise InvariantViolation("voxel grid bounds must satisfy min < max on every axis")
        if self.divisions < 1:
            raise InvariantViolation("divisions must be at least 1")
        a = self.active_voxels
        if len(a) == 0 or np.any(np.diff(a) <= 0) or a[0] < 0 or a[-1] >= self.divisions ** 3:
            raise InvariantViolation("active voxels must be nonempty, sorted, unique and in range")
        self._label = {int(v): i for i, v in enumerate(a)}

    @property
    def n_voxels(self):
        return len(self.active_voxels)

    @property
    def voxel_size(self):
        return (self.bbox_max - self.bbox_min) / self.divisions

    @property
    def voxel_diagonal(self):
        return float(np.linalg.norm(self.voxel_size))

    @property
    def index_of(self):
        return dict(self._label)

    def cell_indices(self, points):
        """``(N, 3)`` integer cells, or -1 rows for points outside the box."""
        p = np.atleast_2d(np.asarray(points, dtype=float))
        D = self.divisions
        rel = (p - self.bbox_min) / (self.bbox_max - self.bbox_min)
        inside = np.all((p >= self.bbox_min) & (p <= self.bbox_max), axis=1)
        cells = np.minimum(np.floor(rel * D), D - 1).astype(np.int64)
        cells[~inside] = -1
        return cells

    def flat_index(self, points):
        cells = self.cell_indices(points)
        D = self.divisions
        flat = cells[:, 0] * D * D + cells[:, 1] * D + cells[:, 2]
        flat[cells[:, 0] < 0] = -1
        return flat

    def label_of(self, points):
        """Class label of each point: -1 outside the box, -2 in an inactive voxel."""
        flat = self.flat_index(points)
        out = np.full(len(flat), -2, dtype=np.int64)
        out[flat < 0] = -1
        for i, f in enumerate(flat):
            if f >= 0:
                out[i] = self._label.get(int(f), -2)
        return out

    def voxel_bounds(self, label):
        flat = int(self.active_voxels[label])
        D = self.divisions
        cell = np.array([flat // (D * D), (flat // D) % D, flat % D])
        lo = self.bbox_min + cell * self.voxel_size
        return lo, lo + self.voxel_size

    def centers(self):
        D = self.divisions
        f = self.active_voxels
        cells = np.stack([f // (D * D), (f // D) % D, f % D], axis=1)
        return self.bbox_min + (cells + 0.5) * self.voxel_size

    def center(self, label):
        return self.centers()[label]


def voxel_histogram(points, bbox_min, bbox_max, divisions):
    """Flat-index point counts over the full grid (points outside are ignored)."""
    tmp = VoxelGrid(bbox_min, bbox_max, divisions, [0])
    flat = tmp.flat_index(points) if len(points) else np.zeros(0, dtype=np.int64)
    return np.bincount(flat[flat >= 0], minlength=divisions ** 3)


def _bounds(points):
    lo = points.min(axis=0)
    hi = points.max(axis=0)
    span = hi - lo
    pad = np.where(span > 0, 0.0, max(1e-9, 1e-6 * float(span.max())))
    return lo - pad, hi + pad


def build_voxel_grid(registered_points, divisions=DEFAULT_DIVISIONS, training_points=(), n_v=DEFAULT_N_VOXELS):
    """Grid over the registered cloud keeping the ``n_v`` busiest voxels.

    Voxels are ranked by the number of training points they contain (ties by
    flat index). Only voxels holding a model point or a training point are
    eligible, so when fewer than ``n_v`` voxels intersect the model the grid
    has fewer labels.
    """
    pts = np.asarray(registered_points, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        raise EmptyPointCloud("cannot build a voxel grid without points")
    if divisions < 1 or n_v < 1:
        raise PreconditionError("divisions and n_v must be at least 1")
    lo, hi = _bounds(pts)
    train = np.asarray(training_points, dtype=float).reshape(-1, 3)
    counts = voxel_histogram(train, lo, hi, divisions)
    occupied = voxel_histogram(pts, lo, hi, divisions) > 0
    eligible = np.flatnonzero(occupied | (counts > 0))
    order = np.lexsort((eligible, -counts[eligible]))
    active = np.sort(eligible[order][:n_v])
    return VoxelGrid(lo, hi, divisions, active, counts)


@dataclass(frozen=True)
class NarrationSegment:
    """Narration text with the frames of its temporal segment, in time order."""

    video_id: str
    text: str
    frame_ids: tuple

    def __post_init__(self):
        if not self.text.strip():
            raise InvariantViolation(f"narration segment in {self.video_id} has empty text")
        fids = (self.frame_ids,) if isinstance(self.frame_ids, str) else tuple(self.frame_ids)
        if not fids:
            raise InvariantViolation(f"narration segment in {self.video_id} lists no frames")
        object.__setattr__(self, "frame_ids", fids)

    def representative_frame(self, registered_frames):
        """Temporal midpoint among the segment frames that are registered."""
        ok = [f for f in self.frame_ids if f in registered_frames]
        if not ok:
            return None
        return ok[(len(ok) - 1) // 2]


@dataclass(frozen=True)
class Detection2D:
    frame_id: str
    pixel: tuple
    confidence: float

    def __post_init__(self):
        if not 0 <= self.confidence <= 1:
            raise InvariantViolation(f"detection confidence {self.confidence} outside [0, 1]")


@dataclass(eq=False)
class SaliencyMap:
    frame_id: str
    grid: np.ndarray

    def __post_init__(self):
        self.grid = np.atleast_2d(np.asarray(self.grid, dtype=float))
        if self.grid.ndim != 2 or min(self.grid.shape) < 1:
            raise InvariantViolation("saliency grid must be a nonempty 2D array")
        if not np.all(np.isfinite(self.grid)):
            raise InvariantViolation(f"saliency map {self.frame_id} has non-finite scores")


@dataclass(frozen=True)
class TrainingPair:
    text: str
    voxel_label: int
    anchor_strategy: str
    world_point: tuple


def select_anchor(segment, strategy, camera, frame_id=None, detections=None, saliency=None):
    """2D anchor pixel for a narration segment, or None when the frame has no detection."""
    fid = frame_id if frame_id is not None else segment.frame_ids[(len(segment.frame_ids) - 1) // 2]
    if strategy == CENTER_OF_FRAME:
        return np.array([camera.width / 2.0, camera.height / 2.0])
    if strategy == HAND_DETECTOR:
        if detections is None:
            raise MissingStrategyInput("hand_detector anchors need detections")
        best = None
        for d in detections:
            if d.frame_id == fid and (best is None or d.confidence > best.confidence):
                best = d
        return None if best is None else np.asarray(best.pixel, dtype=float)
    if strategy == SALIENCY_ARGMAX:
        if saliency is None:
            raise MissingStrategyInput("saliency_argmax anchors need a saliency map")
        h, w = saliency.grid.shape
        r, c = divmod(int(np.argmax(saliency.grid)), w)
        return np.array([(c + 0.5) * camera.width / w, (r + 0.5) * camera.height / h])
    raise InvalidConfig(f"unknown anchor strategy {strategy!r}")


def backproject_to_surface(pixel, camera, registered_points, radius_px=DEFAULT_SURFACE_RADIUS_PX):
    """Nearest visible cloud point projecting within ``radius_px`` of ``pixel``.

    Approximates the ray/surface intersection of a sparse cloud: among points
    in front of the camera whose projection falls inside the radius, the one
    with the smallest depth wins (ties to the lowest index).
    """
    uv = np.asarray(pixel, dtype=float)
    if not camera.in_bounds(uv):
        raise PixelOutOfBounds(f"anchor {tuple(uv)} outside the frame")
    pts = np.asarray(registered_points, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        return None
    proj, depth = camera.project_many(pts)
    with np.errstate(invalid="ignore"):
        near = (depth > MIN_DEPTH) & (np.linalg.norm(proj - uv, axis=1) <= radius_px)
    cand = np.flatnonzero(near)
    if not len(cand):
        return None
    return pts[cand[np.argmin(depth[cand])]].copy()


@dataclass(eq=False)
class AnchorResult:
    segment: NarrationSegment
    frame_id: str
    point: np.ndarray
    reason: str = None


def compute_anchors(segments, strategy, recs, registration, registered_points, detections=None,
                    saliency=None, radius_px=DEFAULT_SURFACE_RADIUS_PX):
    """Anchor every segment and lift it onto the registered cloud.

    ``recs`` maps video ids to reconstructions in their own frames and
    ``registration`` maps video ids to transforms into the common frame.
    Failed segments carry a reason: ``unregistered``, ``no_frame``,
    ``no_anchor`` or ``no_surface``.
    """
    if strategy == HAND_DETECTOR and detections is None:
        raise MissingStrategyInput("hand_detector anchors need detections")
    if strategy == SALIENCY_ARGMAX and saliency is None:
        raise MissingStrategyInput("saliency_argmax anchors need saliency maps")
    detections = detections or {}
    saliency = saliency or {}
    out = []
    for seg in segments:
        rec = recs.get(seg.video_id)
        T = registration.get(seg.video_id)
        if rec is None or T is None:
            out.append(AnchorResult(seg, None, None, "unregistered"))
            continue
        fid = seg.representative_frame(rec.frames)
        if fid is None:
            out.append(AnchorResult(seg, None, None, "no_frame"))
            continue
        cam = rec.frames[fid].transformed(T)
        if strategy == SALIENCY_ARGMAX and fid not in saliency:
            pixel = None
        else:
            pixel = select_anchor(seg, strategy, cam, fid, detections.get(seg.video_id, []), saliency.get(fid))
        if pixel is None or not cam.in_bounds(pixel):
            out.append(AnchorResult(seg, fid, None, "no_anchor"))
            continue
        P = backproject_to_surface(pixel, cam, registered_points, radius_px)
        if P is None:
            out.append(AnchorResult(seg, fid, None, "no_surface"))
            continue
        out.append(AnchorResult(seg, fid, P))
    return out


DROP_REASONS = ("unregistered", "no_frame", "no_anchor", "no_surface", "outside_bbox", "inactive_voxel")


def generate_training_pairs(anchors, strategy, grid):
    """Voxel-labelled training pairs from anchored segments.

    Returns ``(pairs, dropped)`` where ``dropped`` counts segments per reason.
    """
    pairs = []
    dropped = {r: 0 for r in DROP_REASONS}
    for a in anchors:
        if a.point is None:
            dropped[a.reason] += 1
            continue
        label = int(grid.label_of(a.point[None])[0])
        if label == -1:
            dropped["outside_bbox"] += 1
            continue
        if label == -2:
            dropped["inactive_voxel"] += 1
            continue
        pairs.append(TrainingPair(a.segment.text, label, strategy, tuple(float(v) for v in a.point)))
    return pairs, dropped


_TOKEN_RE = re.compile(r"[^0-9a-z]+")


def tokenize(text):
    return [t for t in _TOKEN_RE.split(text.lower()) if t]


def token_bucket(token, buckets):
    return zlib.crc32(token.encode("utf-8")) % buckets


@dataclass
class TrainConfig:
    dim: int = 1024
    buckets: int = 2 ** 15
    learning_rate: float = 0.05
    momentum: float = 0.9
    batch_size: int = 64
    epochs: int = 50
    seed: int = 0
    init_std: float = None

    def __post_init__(self):
        if self.dim < 1 or self.buckets < 1 or self.batch_size < 1 or self.epochs < 0:
            raise InvalidConfig("dim, buckets and batch_size must be positive, epochs non-negative")
        if self.learning_rate <= 0 or not 0 <= self.momentum < 1:
            raise InvalidConfig("learning_rate must be positive and momentum in [0, 1)")
        if self.init_std is None:
            self.init_std = 1.0 / np.sqrt(self.dim)


class GroundingModel:
    """Hashed bag-of-tokens encoder shared by per-model linear voxel heads.

    Embedding rows are drawn lazily from a per-row seed, so the full
    ``buckets x dim`` table never has to be materialized.
    """

    def __init__(self, buckets=2 ** 15, dim=1024, seed=0, init_std=None):
        self.buckets = int(buckets)
        self.dim = int(dim)
        self.seed = int(seed)
        self.init_std = 1.0 / np.sqrt(self.dim) if init_std is None else float(init_std)
        self.rows = {}
        self.heads = {}
        self.grids = {}

    def _initial_row(self, r):
        rng = np.random.default_rng([self.seed, int(r)])
        return rng.normal(0.0, self.init_std, self.dim)

    def row(self, r):
        v = self.rows.get(r)
        return self._initial_row(r) if v is None else v

    def ensure_rows(self, rows):
        for r in rows:
            if r not in self.rows:
                self.rows[r] = self._initial_row(r)

    def token_rows(self, text):
        return [token_bucket(t, self.buckets) for t in tokenize(text)]

    def add_head(self, model_id, n_voxels, grid=None):
        self.heads[model_id] = (np.zeros((self.dim, int(n_voxels))), np.zeros(int(n_voxels)))
        if grid is not None:
            self.grids[model_id] = grid

    def encode(self, texts):
        out = np.zeros((len(texts), self.dim))
        for i, t in enumerate(texts):
            rows = self.token_rows(t)
            if rows:
                out[i] = np.mean([self.row(r) for r in rows], axis=0)
        return out

    def logits(self, model_id, texts):
        if model_id not in self.heads:
            raise UnknownModelId(f"no grounding head for model {model_id!r}")
        W, b = self.heads[model_id]
        return self.encode(texts) @ W + b

    def scores(self, model_id, texts):
        return softmax(self.logits(model_id, texts))


def softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


@dataclass(eq=False)
class _Samples:
    model_index: np.ndarray
    labels: np.ndarray
    token_rows: list
    model_ids: list


def canonical_samples(model, pairs_by_model):
    model_ids = sorted(pairs_by_model)
    mi, labels, toks = [], [], []
    for k, mid in enumerate(model_ids):
        ordered = sorted(pairs_by_model[mid], key=lambda p: (p.text, p.voxel_label, p.anchor_strategy, p.world_point))
        for p in ordered:
            mi.append(k)
            labels.append(p.voxel_label)
            toks.append(model.token_rows(p.text))
    return _Samples(np.array(mi, dtype=np.int64), np.array(labels, dtype=np.int64), toks, model_ids)


def _batch_features(model, token_rows):
    """Mean-pooled features plus the pooling matrix over the batch's unique rows."""
    uniq = sorted({r for rows in token_rows for r in rows})
    col = {r: j for j, r in enumerate(uniq)}
    A = np.zeros((len(token_rows), len(uniq)))
    for i, rows in enumerate(token_rows):
        for r in rows:
            A[i, col[r]] += 1.0 / len(rows)
    E = np.array([model.row(r) for r in uniq]).reshape(len(uniq), model.dim)
    return A @ E, A, uniq


def loss_and_grads(model, samples, idx=None, mean=False):
    """Cross-entropy of softmax scores and its gradients.

    Returns ``(loss, head_grads, row_grads)`` with ``head_grads[model_id] =
    (dW, db)`` and ``row_grads[row] = dE_row``. The loss is summed over the
    samples, or averaged with ``mean=True``.
    """
    idx = np.arange(len(samples.labels)) if idx is None else np.asarray(idx)
    F, A, uniq = _batch_features(model, [samples.token_rows[i] for i in idx])
    scale = 1.0 / len(idx) if mean else 1.0
    gF = np.zeros_like(F)
    loss = 0.0
    head_grads = {}
    mi = samples.model_index[idx]
    lab = samples.labels[idx]
    for k in np.unique(mi):
        mid = samples.model_ids[k]
        W, b = model.heads[mid]
        sel = np.flatnonzero(mi == k)
        z = F[sel] @ W + b
        logp = _log_softmax(z)
        loss -= logp[np.arange(len(sel)), lab[sel]].sum()
        gz = np.exp(logp)
        gz[np.arange(len(sel)), lab[sel]] -= 1.0
        gz *= scale
        head_grads[mid] = (F[sel].T @ gz, gz.sum(axis=0))
        gF[sel] = gz @ W.T
    gE = A.T @ gF
    return loss * scale, head_grads, {r: gE[j] for j, r in enumerate(uniq)}


@dataclass(eq=False)
class TrainingHistory:
    epoch_loss: list
    epoch_mean_loss: list
    loss_tolerance: float


def train_grounding(pairs_by_model, grids, cfg=None):
    """Jointly train the shared encoder and one head per model.

    ``grids`` maps each model id to its :class:`VoxelGrid` (or to a voxel
    count). Mini-batch gradient descent with momentum on the mean batch
    loss; sample order is canonicalized before the seeded shuffling, so the
    result depends only on the pair contents and ``cfg.seed``.
    Returns ``(model, history)``.
    """
    cfg = cfg or TrainConfig()
    if not pairs_by_model or any(len(v) == 0 for v in pairs_by_model.values()):
        raise EmptyTrainingSet("every model needs at least one training pair")
    model = GroundingModel(cfg.buckets, cfg.dim, cfg.seed, cfg.init_std)
    for mid in sorted(pairs_by_model):
        if mid not in grids:
            raise UnknownModelId(f"no voxel grid for model {mid!r}")
        g = grids[mid]
        n_v = g if isinstance(g, (int, np.integer)) else g.n_voxels
        for p in pairs_by_model[mid]:
            if not 0 <= p.voxel_label < n_v:
                raise LabelOutOfRange(f"label {p.voxel_label} outside [0, {n_v}) for model {mid!r}")
        model.add_head(mid, n_v, None if isinstance(g, (int, np.integer)) else g)
    samples = canonical_samples(model, pairs_by_model)
    model.ensure_rows(sorted({r for rows in samples.token_rows for r in rows}))

    vel_heads = {m: (np.zeros_like(W), np.zeros_like(b)) for m, (W, b) in model.heads.items()}
    vel_rows = {}
    rng = np.random.default_rng(cfg.seed)
    n = len(samples.labels)
    full_loss = [loss_and_grads(model, samples)[0]]
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            _, hg, rg = loss_and_grads(model, samples, idx, mean=True)
            for mid, (gW, gb) in hg.items():
                vW, vb = vel_heads[mid]
                vW *= cfg.momentum
                vW += gW
                vb *= cfg.momentum
                vb += gb
            for r, g in rg.items():
                v = vel_rows.get(r)
                if v is None:
                    vel_rows[r] = g.copy()
                else:
                    v *= cfg.momentum
                    v += g
            # rows and heads absent from the batch still move with their decaying velocity
            for mid, (W, b) in model.heads.items():
                vW, vb = vel_heads[mid]
                if mid not in hg:
                    vW *= cfg.momentum
                    vb *= cfg.momentum
                W -= cfg.learning_rate * vW
                b -= cfg.learning_rate * vb
            for r in sorted(vel_rows):
                if r not in rg:
                    vel_rows[r] *= cfg.momentum
                model.rows[r] = model.rows[r] - cfg.learning_rate * vel_rows[r]
        full_loss.append(loss_and_grads(model, samples)[0])
    history = TrainingHistory(full_loss, [l / n for l in full_loss], loss_tolerance=0.05 * full_loss[0] / max(n, 1))
    return model, history


def ground_query(model, model_id, text, grid=None):
    """Voxel scores for a query and the center of the best voxel."""
    if model_id not in model.heads:
        raise UnknownModelId(f"no grounding head for model {model_id!r}")
    grid = grid if grid is not None else model.grids.get(model_id)
    if grid is None:
        raise PreconditionError(f"no voxel grid available for model {model_id!r}")
    scores = model.scores(model_id, [text])[0]
    return scores, grid.center(int(np.argmax(scores)))


def chance_points(grid, seed, n):
    """``n`` centers of uniformly drawn active voxels."""
    rng = np.random.default_rng(seed)
    return grid.centers()[rng.integers(0, grid.n_voxels, size=n)]


def chance_baseline(grid, seed):
    return chance_points(grid, seed, 1)[0]


@dataclass(frozen=True)
class GroundingQuery:
    model_id: str
    text: str
    gt_point: tuple
    object_class: str = None


@dataclass(eq=False)
class GroundingEvaluation:
    curve: PckCurve
    chance_curve: PckCurve
    distances_cm: np.ndarray
    chance_distances_cm: np.ndarray
    class_table: list
    table_threshold_cm: float


def evaluate_grounding_pck(queries, model, grids, thresholds_cm, metric_scales, table_threshold_cm=30.0, seed=0):
    """PCK of grounded queries pooled over all models, with a chance baseline.

    ``metric_scales`` gives centimeters per model unit for each model id.
    The per-class table lists ``(object, chance, method)`` at
    ``table_threshold_cm`` plus an ``Average`` row over classes.
    """
    queries = list(queries)
    if not queries:
        raise PreconditionError("no queries to evaluate")
    dist, cdist = [], []
    for qi, q in enumerate(queries):
        if q.model_id not in model.heads:
            raise UnknownModelId(f"query {qi} refers to unknown model {q.model_id!r}")
        grid = grids[q.model_id] if grids is not None and q.model_id in grids else model.grids[q.model_id]
        _, pred = ground_query(model, q.model_id, q.text, grid)
        gt = np.asarray(q.gt_point, dtype=float)
        s = metric_scales[q.model_id]
        dist.append(s * np.linalg.norm(pred - gt))
        cp = chance_baseline(grid, [seed, qi])
        cdist.append(s * np.linalg.norm(cp - gt))
    dist, cdist = np.array(dist), np.array(cdist)
    thr = np.asarray(thresholds_cm, dtype=float)
    curve = PckCurve(thr, (dist[None] <= thr[:, None]).mean(axis=1))
    chance = PckCurve(thr, (cdist[None] <= thr[:, None]).mean(axis=1))
    table = []
    classes = sorted({q.object_class for q in queries if q.object_class is not None})
    for c in classes:
        sel = np.array([q.object_class == c for q in queries])
        table.append((c, float(np.mean(cdist[sel] <= table_threshold_cm)), float(np.mean(dist[sel] <= table_threshold_cm))))
    if table:
        table.append(("Average", float(np.mean([r[1] for r in table])), float(np.mean([r[2] for r in table]))))
    return GroundingEvaluation(curve, chance, dist, cdist, table, float(table_threshold_cm))
