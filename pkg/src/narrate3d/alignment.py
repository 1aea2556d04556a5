"""3D-3D lifting, robust similarity estimation and the alignment graph."""

import hashlib
import math
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegenerateConfiguration,
    InvalidConfig,
    NodesDisconnected,
    PreconditionError,
    TooFewPoints,
    UnknownFrame,
    UnknownReference,
)
from .geometry import SimilarityTransform3, compose, invert, nearest_rotation

DEFAULT_ASSOC_RADIUS_PX = 2.0


@dataclass(eq=False)
class Correspondences3D:
    """Matched 3D points, one row each: ``src`` in frame A, ``dst`` in frame B."""

    src: np.ndarray
    dst: np.ndarray
    source_pairs: list = field(default_factory=list)

    def __post_init__(self):
        self.src = np.asarray(self.src, dtype=float).reshape(-1, 3)
        self.dst = np.asarray(self.dst, dtype=float).reshape(-1, 3)
        if len(self.src) != len(self.dst):
            raise PreconditionError("correspondence arrays differ in length")
        if not self.source_pairs:
            self.source_pairs = [("", "")] * len(self.src)
        if len(self.source_pairs) != len(self.src):
            raise PreconditionError("one source pair per correspondence is required")
        if not (np.all(np.isfinite(self.src)) and np.all(np.isfinite(self.dst))):
            raise PreconditionError("correspondences must be finite")

    def __len__(self):
        return len(self.src)

    def __iter__(self):
        return iter(zip(self.src, self.dst, self.source_pairs))

    @classmethod
    def concatenate(cls, parts):
        parts = list(parts)
        if not parts:
            return cls(np.zeros((0, 3)), np.zeros((0, 3)))
        return cls(
            np.vstack([p.src for p in parts]),
            np.vstack([p.dst for p in parts]),
            [sp for p in parts for sp in p.source_pairs],
        )


def lift_matches(matches, rec_a, rec_b, assoc_radius=DEFAULT_ASSOC_RADIUS_PX):
    """Turn 2D-2D matches into 3D-3D correspondences via observation tracks.

    Each matched pixel is associated with the nearest observation of its
    frame within ``assoc_radius`` pixels; matches without a track on both
    sides are dropped.
    """
    fa, fb = matches.pair
    if fa not in rec_a.frames:
        raise UnknownFrame(f"frame {fa!r} not in reconstruction {rec_a.id}")
    if fb not in rec_b.frames:
        raise UnknownFrame(f"frame {fb!r} not in reconstruction {rec_b.id}")
    ok_a, xa = rec_a.lookup_points(fa, matches.pixel_a, assoc_radius)
    ok_b, xb = rec_b.lookup_points(fb, matches.pixel_b, assoc_radius)
    keep = ok_a & ok_b
    n = int(keep.sum())
    return Correspondences3D(xa[keep], xb[keep], [(fa, fb)] * n)


def fit_similarity_umeyama(src, dst):
    """Least-squares similarity mapping ``src`` onto ``dst`` (both (N, 3)).

    Closed form from the SVD of the cross-covariance; the sign correction
    keeps the rotation proper even when the best orthogonal fit is a
    reflection.
    """
    src = np.asarray(src, dtype=float).reshape(-1, 3)
    dst = np.asarray(dst, dtype=float).reshape(-1, 3)
    if len(src) != len(dst):
        raise PreconditionError("point lists differ in length")
    if len(src) < 3:
        raise TooFewPoints(f"need at least 3 point pairs, got {len(src)}")
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    xs = src - mu_s
    xd = dst - mu_d
    var_s = (xs * xs).sum() / len(src)
    sv = np.linalg.svd(xs, compute_uv=False)
    if sv[0] == 0 or sv[1] <= 1e-9 * sv[0]:
        raise DegenerateConfiguration("source points are collinear or coincident")
    cov = xd.T @ xs / len(src)
    U, D, Vt = np.linalg.svd(cov)
    S = np.ones(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2] = -1.0
    R = (U * S) @ Vt
    scale = float((D * S).sum() / var_s)
    if scale <= 0:
        raise DegenerateConfiguration("no positive-scale similarity fits the points")
    R = nearest_rotation(R) if np.abs(R.T @ R - np.eye(3)).max() > 1e-12 else R
    t = mu_d - scale * (R @ mu_s)
    return SimilarityTransform3(scale, R, t)


@dataclass
class RansacConfig:
    """Settings of the robust similarity solver.

    With ``threshold_mode="relative"`` the inlier threshold is a fraction of
    the bounding-box diagonal of the destination points.
    """

    inlier_threshold: float = 0.02
    threshold_mode: str = "relative"
    max_iterations: int = 10_000
    confidence: float = 0.999
    min_inliers: int = 12
    min_inlier_ratio: float = 0.15
    seed: int = 0
    refine_rounds: int = 5

    def __post_init__(self):
        if self.threshold_mode not in ("relative", "absolute"):
            raise InvalidConfig(f"threshold_mode must be relative or absolute, got {self.threshold_mode!r}")
        if self.inlier_threshold <= 0:
            raise InvalidConfig("inlier_threshold must be positive")
        if self.max_iterations < 1:
            raise InvalidConfig("max_iterations must be at least 1")
        if not 0 < self.confidence < 1:
            raise InvalidConfig("confidence must lie in (0, 1)")
        if self.min_inliers < 3:
            raise InvalidConfig("min_inliers must be at least 3")
        if not 0 <= self.min_inlier_ratio <= 1:
            raise InvalidConfig("min_inlier_ratio must lie in [0, 1]")


@dataclass(eq=False)
class EdgeEstimate:
    from_id: str
    to_id: str
    transform: SimilarityTransform3
    inlier_count: int
    total_count: int
    inlier_rms: float
    inliers: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if not 0 <= self.inlier_count <= self.total_count:
            raise PreconditionError("inlier count must lie in [0, total]")

    def reversed(self):
        T = invert(self.transform)
        return EdgeEstimate(self.to_id, self.from_id, T, self.inlier_count, self.total_count,
                            self.inlier_rms / self.transform.scale, self.inliers)


INSUFFICIENT = "insufficient_correspondences"
NO_CONSENSUS = "no_consensus"


@dataclass(eq=False)
class AlignmentFailure:
    """Returned instead of an edge when the solver gives up."""

    reason: str
    total_count: int
    inlier_count: int = 0
    detail: str = ""

    def __bool__(self):
        return False


def pair_seed(seed, *ids):
    """Stable per-pair seed independent of scheduling order."""
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(seed)).encode())
    for i in ids:
        h.update(b"\x00" + str(i).encode())
    return int.from_bytes(h.digest(), "little")


def _threshold(dst, cfg):
    if cfg.threshold_mode == "absolute":
        return cfg.inlier_threshold
    diag = float(np.linalg.norm(dst.max(axis=0) - dst.min(axis=0)))
    return cfg.inlier_threshold * diag


def _residuals(T, src, dst):
    return np.linalg.norm(dst - T.apply(src), axis=1)


def _required_iterations(ratio, confidence, sample_size=3):
    if ratio <= 0:
        return math.inf
    p = ratio ** sample_size
    if p >= 1:
        return 0
    return math.log(1 - confidence) / math.log(1 - p)


def solver_u(src, dst=None, cfg=None, from_id="A", to_id="B", rng=None):
    """Robust similarity fit: RANSAC over 3-point Umeyama fits, then refit.

    ``src`` may be a :class:`Correspondences3D` (then ``dst`` is omitted).
    Returns an :class:`EdgeEstimate` on success and an
    :class:`AlignmentFailure` otherwise.
    """
    if isinstance(src, Correspondences3D):
        src, dst = src.src, src.dst
    cfg = cfg or RansacConfig()
    src = np.asarray(src, dtype=float).reshape(-1, 3)
    dst = np.asarray(dst, dtype=float).reshape(-1, 3)
    n = len(src)
    if n < max(cfg.min_inliers, 3):
        return AlignmentFailure(INSUFFICIENT, n, detail=f"{n} correspondences < {cfg.min_inliers}")
    rng = rng if rng is not None else np.random.default_rng(pair_seed(cfg.seed, from_id, to_id))
    thr = _threshold(dst, cfg)
    if thr <= 0:
        return AlignmentFailure(NO_CONSENSUS, n, detail="destination points coincide")

    best_count, best_mask = 0, None
    best_sq = math.inf
    limit = cfg.max_iterations
    it = 0
    while it < limit:
        it += 1
        idx = rng.choice(n, 3, replace=False)
        try:
            T = fit_similarity_umeyama(src[idx], dst[idx])
        except (DegenerateConfiguration, TooFewPoints, ValueError):
            continue
        r = _residuals(T, src, dst)
        mask = r <= thr
        count = int(mask.sum())
        if count == 0 or count < best_count:
            continue
        sq = float((r[mask] ** 2).sum())
        if count > best_count or sq < best_sq:
            best_count, best_mask, best_sq = count, mask, sq
            need = _required_iterations(count / n, cfg.confidence)
            if math.isfinite(need):
                limit = min(cfg.max_iterations, max(it, math.ceil(need)))

    if best_mask is None or best_count < 3:
        return AlignmentFailure(NO_CONSENSUS, n, best_count, "no non-degenerate minimal sample")

    mask = best_mask
    T_final = None
    for _ in range(cfg.refine_rounds):
        try:
            T_ref = fit_similarity_umeyama(src[mask], dst[mask])
        except (DegenerateConfiguration, TooFewPoints):
            break
        new_mask = _residuals(T_ref, src, dst) <= thr
        if new_mask.sum() < mask.sum():
            if T_final is None:
                T_final = T_ref
            break
        T_final = T_ref
        if np.array_equal(new_mask, mask):
            break
        mask = new_mask
    if T_final is None:
        return AlignmentFailure(NO_CONSENSUS, n, best_count, "inlier set is degenerate")

    count = int(mask.sum())
    if count < cfg.min_inliers or count / n < cfg.min_inlier_ratio:
        return AlignmentFailure(
            NO_CONSENSUS, n, count, f"{count}/{n} inliers below min {cfg.min_inliers} / ratio {cfg.min_inlier_ratio}"
        )
    rms = float(np.sqrt(np.mean(_residuals(T_final, src[mask], dst[mask]) ** 2)))
    return EdgeEstimate(from_id, to_id, T_final, count, n, rms, np.flatnonzero(mask))


@dataclass(eq=False)
class AlignmentGraph:
    """Reconstructions as nodes, successful pairwise alignments as edges.

    Each unordered pair holds at most one edge; the opposite direction is
    derived by inversion.
    """

    nodes: list = field(default_factory=list)
    edges: list = field(default_factory=list)
    failures: dict = field(default_factory=dict)

    def __post_init__(self):
        self.nodes = sorted(set(str(n) for n in self.nodes))
        seen = set()
        for e in self.edges:
            if e.from_id not in self.nodes or e.to_id not in self.nodes:
                raise PreconditionError(f"edge {e.from_id}-{e.to_id} references an unknown node")
            key = frozenset((e.from_id, e.to_id))
            if key in seen or e.from_id == e.to_id:
                raise PreconditionError(f"duplicate or self edge {e.from_id}-{e.to_id}")
            seen.add(key)

    def add_edge(self, edge):
        self.edges.append(edge)
        self.__post_init__()

    def edge(self, a, b):
        """Edge oriented ``a -> b`` or None."""
        for e in self.edges:
            if e.from_id == a and e.to_id == b:
                return e
            if e.from_id == b and e.to_id == a:
                return e.reversed()
        return None

    def neighbors(self, node):
        out = []
        for e in self.edges:
            if e.from_id == node:
                out.append(e.to_id)
            elif e.to_id == node:
                out.append(e.from_id)
        return sorted(out)

    def components(self):
        left = set(self.nodes)
        comps = []
        for n in self.nodes:
            if n not in left:
                continue
            comp, queue = [], deque([n])
            left.discard(n)
            while queue:
                u = queue.popleft()
                comp.append(u)
                for v in self.neighbors(u):
                    if v in left:
                        left.discard(v)
                        queue.append(v)
            comps.append(sorted(comp))
        return comps


def build_alignment_graph(pairwise, cfg=None, nodes=None, threads=1):
    """Run the solver on every pair and keep the successful alignments.

    ``pairwise`` maps ``(id_a, id_b)`` to :class:`Correspondences3D` with
    ``src`` in frame ``id_a``. Pairs are processed in sorted order and each
    pair draws from its own seed, so the result does not depend on
    ``threads``.
    """
    cfg = cfg or RansacConfig()
    keys = sorted(pairwise)
    all_nodes = set(nodes or [])
    for a, b in keys:
        all_nodes.update((a, b))

    def solve(key):
        corr = pairwise[key]
        return solver_u(corr.src, corr.dst, cfg, key[0], key[1])

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(solve, keys))
    else:
        results = [solve(k) for k in keys]
    graph = AlignmentGraph(sorted(all_nodes))
    for key, res in zip(keys, results):
        if isinstance(res, EdgeEstimate):
            graph.add_edge(res)
        else:
            graph.failures[key] = res
    return graph


def shortest_path(graph, from_id, to_id):
    """Fewest-edge path; ties prefer the largest bottleneck inlier count, then lexicographic ids."""
    for n in (from_id, to_id):
        if n not in graph.nodes:
            raise PreconditionError(f"node {n!r} not in graph")
    if from_id == to_id:
        return [from_id]
    hops = {from_id: 0}
    queue = deque([from_id])
    while queue:
        u = queue.popleft()
        for v in graph.neighbors(u):
            if v not in hops:
                hops[v] = hops[u] + 1
                queue.append(v)
    if to_id not in hops:
        raise NodesDisconnected(f"no path between {from_id!r} and {to_id!r}")

    def inliers(u, v):
        return graph.edge(u, v).inlier_count

    # widest path restricted to the shortest-path DAG, computed backwards from the target
    layers = {}
    for n, h in hops.items():
        layers.setdefault(h, []).append(n)
    width = {to_id: math.inf}
    for h in range(hops[to_id] - 1, -1, -1):
        for u in layers.get(h, []):
            best = -1
            for v in graph.neighbors(u):
                if hops.get(v) == h + 1 and v in width:
                    best = max(best, min(width[v], inliers(u, v)))
            if best >= 0:
                width[u] = best
    target_width = width[from_id]
    path = [from_id]
    u = from_id
    while u != to_id:
        h = hops[u]
        for v in graph.neighbors(u):
            if hops.get(v) == h + 1 and v in width and min(width[v], inliers(u, v)) >= target_width:
                path.append(v)
                u = v
                break
        else:  # pragma: no cover - width bookkeeping guarantees a successor
            raise RuntimeError("shortest path reconstruction failed")
    return path


def path_transform(graph, from_id, to_id):
    """Transform from ``from_id``'s frame into ``to_id``'s frame along the shortest path."""
    path = shortest_path(graph, from_id, to_id)
    T = SimilarityTransform3.identity()
    for u, v in zip(path[:-1], path[1:]):
        T = compose(graph.edge(u, v).transform, T)
    return T


@dataclass(eq=False)
class Registration:
    """Transforms from every connected reconstruction into the reference frame."""

    reference: str
    transforms: dict
    unregistered: list
    metric_scale: float = None


def register_all(graph, reference_id, metric_scale=None):
    """Register every node connected to ``reference_id``.

    ``metric_scale`` (centimeters per reference model unit) is carried along
    for downstream metric evaluation.
    """
    if reference_id not in graph.nodes:
        raise UnknownReference(f"reference {reference_id!r} not in graph")
    transforms, unregistered = {}, []
    for n in graph.nodes:
        try:
            transforms[n] = path_transform(graph, n, reference_id)
        except NodesDisconnected:
            unregistered.append(n)
    return Registration(reference_id, transforms, unregistered, metric_scale)
