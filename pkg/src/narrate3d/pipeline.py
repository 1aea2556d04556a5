"""End-to-end stages shared by the command line and the demos.

Each stage takes a loaded dataset plus a :class:`PipelineConfig` and returns
in-memory results; the ``write_*`` helpers put them on disk. Work is spread
over ``threads`` workers per video pair, but results are always reduced in
sorted pair order so outputs do not depend on scheduling.
"""

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import grounding as gr
from .alignment import (
    DEFAULT_ASSOC_RADIUS_PX,
    Correspondences3D,
    RansacConfig,
    build_alignment_graph,
    lift_matches,
    path_transform,
    register_all,
)
from .errors import InputError, InvalidConfig, MissingFile, PreconditionError, UnknownFrame
from .io import formats
from .io.dataset import IngestConfig
from .matching import DEFAULT_FLOW_TOLERANCE_PX, flow_filter, mutual_nn_match, retrieve_frame_pairs
from .transfer import (
    KeypointAnnotation2D,
    PckCurve,
    fit_gt_transform,
    keypoint_consistency,
    mean_pck_over_pairs,
    pck_3d,
    project_keypoints,
    transfer_keypoints,
    triangulate_keypoints,
)

DEFAULT_THRESHOLDS_CM = tuple(float(t) for t in range(1, 31))


@dataclass
class PipelineConfig:
    """All knobs of a pipeline run.

    Nested ``ransac``, ``train`` and ``ingest`` accept dicts when built via
    :meth:`from_dict`. ``metric_scale`` (cm per reference unit) overrides the
    manifest's per-video scale when set.
    """

    manifest: list = field(default_factory=list)
    output: str = "out"
    seed: int = 0
    threads: int = 1
    reference: str = None
    n_m: int = 2
    use_flow: bool = True
    flow_tolerance: float = DEFAULT_FLOW_TOLERANCE_PX
    assoc_radius: float = DEFAULT_ASSOC_RADIUS_PX
    ransac: RansacConfig = field(default_factory=RansacConfig)
    divisions: int = gr.DEFAULT_DIVISIONS
    n_v: int = gr.DEFAULT_N_VOXELS
    anchor_strategy: str = gr.CENTER_OF_FRAME
    surface_radius_px: float = gr.DEFAULT_SURFACE_RADIUS_PX
    train: gr.TrainConfig = field(default_factory=gr.TrainConfig)
    ingest: IngestConfig = field(default_factory=IngestConfig)
    thresholds_cm: tuple = DEFAULT_THRESHOLDS_CM
    table_threshold_cm: float = 30.0
    metric_scale: float = None
    consistency_ratio: float = 0.10

    def __post_init__(self):
        if isinstance(self.manifest, (str, Path)):
            self.manifest = [self.manifest]
        if self.threads < 1:
            raise InvalidConfig("threads must be at least 1")
        if self.n_m < 1:
            raise InvalidConfig("n_m must be at least 1")
        if self.flow_tolerance <= 0 or self.assoc_radius <= 0 or self.surface_radius_px <= 0:
            raise InvalidConfig("flow_tolerance, assoc_radius and surface_radius_px must be positive")
        if self.divisions < 1 or self.n_v < 1:
            raise InvalidConfig("divisions and n_v must be positive")
        if self.metric_scale is not None and self.metric_scale <= 0:
            raise InvalidConfig("metric_scale must be positive")
        if self.anchor_strategy not in gr.STRATEGIES:
            raise InvalidConfig(f"unknown anchor strategy {self.anchor_strategy!r}")
        self.thresholds_cm = tuple(float(t) for t in self.thresholds_cm)
        if not self.thresholds_cm or np.any(np.diff(self.thresholds_cm) <= 0):
            raise InvalidConfig("thresholds_cm must be a non-empty ascending list")

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise InvalidConfig(f"unknown config keys: {unknown}")
        for key, sub in (("ransac", RansacConfig), ("train", gr.TrainConfig), ("ingest", IngestConfig)):
            if isinstance(d.get(key), dict):
                sk = {f.name for f in fields(sub)}
                bad = sorted(set(d[key]) - sk)
                if bad:
                    raise InvalidConfig(f"unknown {key} keys: {bad}")
                d[key] = sub(**d[key])
        return cls(**d)

    def to_dict(self):
        d = asdict(self)
        d["thresholds_cm"] = list(self.thresholds_cm)
        return d


def _ransac(cfg):
    # the pipeline seed drives RANSAC unless the ransac block sets its own
    r = cfg.ransac
    return r if r.seed != 0 or cfg.seed == 0 else RansacConfig(**{**asdict(r), "seed": cfg.seed})


def _pmap(fn, items, threads):
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


def video_pairs(ds):
    vids = sorted(ds.reconstructions)
    return [(a, b) for i, a in enumerate(vids) for b in vids[i + 1:]]


# matching ----------------------------------------------------------------

@dataclass(eq=False)
class MatchResult:
    raw: list
    filtered: list
    stats: list  # (video_a, video_b, frame_a, frame_b, similarity, raw, kept)

    def retention(self):
        raw = sum(s[5] for s in self.stats)
        return sum(s[6] for s in self.stats) / raw if raw else 0.0


def run_matching(ds, cfg):
    """Retrieve frame pairs per video pair, match them mutually and filter by flow."""
    if not ds.reconstructions:
        raise PreconditionError("dataset has no usable videos")
    if cfg.use_flow and not ds.has_flows:
        raise MissingFile(ds.root, "flow archive (flow filtering requested)")
    owner = ds.video_of_frame()

    def one(pair):
        va, vb = pair
        da, db = ds.descriptors.get(va), ds.descriptors.get(vb)
        if not da or not db:
            return [], [], []
        raw, filt, stats = [], [], []
        for fa, fb, sim in retrieve_frame_pairs(da, db, cfg.n_m):
            for f in (fa, fb):
                if f not in ds.features:
                    raise MissingFile(ds.root, f"local features of frame {f!r}")
                if f not in owner:
                    raise UnknownFrame(f"frame {f!r} is not in any reconstruction")
            m = mutual_nn_match(ds.features[fa], ds.features[fb])
            raw.append(m)
            if cfg.use_flow:
                flow = ds.flows.get((fa, fb))
                if flow is None:
                    raise MissingFile(ds.root, f"flow {fa} -> {fb}")
                k = flow_filter(m, flow, cfg.flow_tolerance)
            else:
                k = m
            filt.append(k)
            stats.append((va, vb, fa, fb, float(sim), len(m), len(k)))
        return raw, filt, stats

    res = _pmap(one, video_pairs(ds), cfg.threads)
    return MatchResult([m for r in res for m in r[0]], [m for r in res for m in r[1]], [s for r in res for s in r[2]])


def write_match_outputs(out, result):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    formats.write_matches(out / "matches_raw.m2d", result.raw)
    formats.write_matches(out / "matches_filtered.m2d", result.filtered)
    rows = [(*s[:4], float(s[4]), s[5], s[6], float(s[6] / s[5]) if s[5] else 0.0) for s in result.stats]
    formats.write_records(out / "match_stats.tsv", "matchstats", rows,
                          columns=("video_a video_b frame_a frame_b similarity raw kept retention",))


# alignment ---------------------------------------------------------------

@dataclass(eq=False)
class AlignResult:
    graph: object
    registration: object
    correspondences: dict


def lift_all(ds, match_sets, cfg):
    """Aggregate lifted 3D correspondences per (sorted) video pair."""
    owner = ds.video_of_frame()
    grouped = {}
    for m in match_sets:
        fa, fb = m.pair
        if fa not in owner or fb not in owner:
            raise UnknownFrame(f"match pair {m.pair} references an unknown frame")
        va, vb = owner[fa], owner[fb]
        c = lift_matches(m, ds.reconstructions[va], ds.reconstructions[vb], cfg.assoc_radius)
        if va > vb:
            va, vb = vb, va
            c = Correspondences3D(c.dst, c.src, c.source_pairs)
        grouped.setdefault((va, vb), []).append(c)
    return {k: Correspondences3D.concatenate(grouped[k]) for k in sorted(grouped)}


def reference_of(ds, cfg):
    ref = cfg.reference if cfg.reference is not None else sorted(ds.reconstructions)[0]
    return ref


def run_alignment(ds, match_sets, cfg):
    """Lift matches, solve each video pair and register to the reference."""
    pairwise = lift_all(ds, match_sets, cfg)
    graph = build_alignment_graph(pairwise, _ransac(cfg), nodes=sorted(ds.reconstructions), threads=cfg.threads)
    ref = reference_of(ds, cfg)
    ms = cfg.metric_scale if cfg.metric_scale is not None else ds.metric_scales.get(ref)
    return AlignResult(graph, register_all(graph, ref, ms), pairwise)


def write_align_outputs(out, result):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    formats.write_graph(out / "graph.agr", result.graph)
    formats.write_registration(out / "registration.reg", result.registration)
    rows = []
    for e in result.graph.edges:
        rows.append(("edge", e.from_id, e.to_id, e.inlier_count, e.total_count, float(e.inlier_rms), "-"))
    for (a, b), f in sorted(result.graph.failures.items()):
        rows.append(("failed", a, b, f.inlier_count, f.total_count, float("nan"), f.reason))
    for v in result.registration.unregistered:
        rows.append(("unregistered", v, "-", 0, 0, float("nan"), "disconnected from reference"))
    formats.write_records(out / "alignment_report.tsv", "alignreport", rows, {"reference": result.registration.reference},
                          ("kind from_id to_id inlier_count total_count inlier_rms note",))


# keypoint transfer -------------------------------------------------------

@dataclass(eq=False)
class TransferResult:
    source: str
    source_keypoints: object
    report: object
    transferred: dict
    projections: dict
    omitted: dict


def run_transfer(ds, graph, source, cfg, targets=None, annotations=None):
    """Triangulate the source annotations and map them into every reachable target.

    Unreachable targets are listed in ``omitted``; an explicitly requested
    unreachable target raises :class:`NodesDisconnected`.
    """
    if source not in ds.reconstructions:
        raise InputError(f"unknown source video {source!r}")
    ann = [a for a in (annotations if annotations is not None else ds.annotations) if a.video_id == source]
    rep = triangulate_keypoints(ann, ds.reconstructions[source])
    explicit = targets is not None
    targets = sorted(ds.reconstructions) if targets is None else list(targets)
    transferred, projections, omitted = {}, {}, {}
    for t in targets:
        if t not in ds.reconstructions:
            raise InputError(f"unknown target video {t!r}")
        try:
            S = path_transform(graph, source, t)
        except InputError as exc:
            if explicit:
                raise
            omitted[t] = str(exc)
            continue
        k = transfer_keypoints(rep.keypoints, S)
        transferred[t] = k
        projections[t] = project_keypoints(k, ds.reconstructions[t].frames)
    return TransferResult(source, rep.keypoints, rep, transferred, projections, omitted)


def write_transfer_outputs(out, result):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    formats.write_keypoints3d(out / f"keypoints_{result.source}.kp3", result.source_keypoints,
                              {"video_id": result.source, "source": result.source})
    for t, k in sorted(result.transferred.items()):
        formats.write_keypoints3d(out / f"keypoints_{t}.kp3", k, {"video_id": t, "source": result.source})
        anns = [KeypointAnnotation2D(t, fid, n, (float(p[0]), float(p[1])))
                for fid, d in sorted(result.projections[t].items()) for n, p in sorted(d.items())]
        formats.write_annotations(out / f"projections_{t}.kp2", anns)


# PCK evaluation ----------------------------------------------------------

@dataclass(eq=False)
class PckResult:
    curve: object
    per_pair: dict
    skipped: dict


def ground_truth_keypoints(ds, source, source_keypoints, cfg):
    """Ground truth in each target: the best similarity from the source
    keypoints onto the target's own triangulated keypoints, applied to the
    source keypoints. Pairs failing the shape-consistency check are skipped."""
    gt, skipped = {}, {}
    for t in sorted(ds.reconstructions):
        if t == source:
            continue
        ann = [a for a in ds.annotations if a.video_id == t]
        try:
            kt = triangulate_keypoints(ann, ds.reconstructions[t]).keypoints
            S = fit_gt_transform(source_keypoints, kt)
        except InputError as exc:
            skipped[t] = str(exc)
            continue
        ok, rms, diam = keypoint_consistency(source_keypoints, kt, S, cfg.consistency_ratio)
        if not ok:
            skipped[t] = f"inconsistent keypoints: rms {rms:.4g} >= {cfg.consistency_ratio} x diameter {diam:.4g}"
            continue
        gt[t] = transfer_keypoints(source_keypoints, S)
    return gt, skipped


def run_eval_pck(ds, predictions, gt, cfg):
    """Mean PCK over target videos present in both ``predictions`` and ``gt``.

    Targets without a prediction score zero, as a failed alignment would.
    """
    curves, skipped = {}, {}
    for t in sorted(gt):
        scale = cfg.metric_scale if cfg.metric_scale is not None else ds.metric_scales.get(t)
        if scale is None:
            raise PreconditionError(f"no metric scale for video {t!r}")
        if t in predictions:
            curves[t] = pck_3d(predictions[t], gt[t], cfg.thresholds_cm, scale)
        else:
            curves[t] = PckCurve(cfg.thresholds_cm, np.zeros(len(cfg.thresholds_cm)))
            skipped[t] = "no prediction (unreachable in the alignment graph)"
    if not curves:
        raise PreconditionError("no target video has ground truth")
    return PckResult(mean_pck_over_pairs(curves.values()), curves, skipped)


def write_pck_outputs(out, result, name="graph", extra=None):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    series = {name: result.curve.values}
    for k, r in (extra or {}).items():
        series[k] = r.curve.values
    formats.write_pck(out / "pck.pck", result.curve.thresholds, series, {"pairs": str(len(result.per_pair))})


# grounding ---------------------------------------------------------------

@dataclass(eq=False)
class GroundingData:
    model_id: str
    pairs: list
    grid: object
    dropped: dict
    metric_scale: float
    registered_points: np.ndarray


def prepare_grounding(ds, registration, cfg):
    """Training pairs and the voxel grid of one dataset (one object model)."""
    if not ds.narration:
        raise PreconditionError(f"dataset {ds.name!r} has no narration")
    transforms = registration.transforms
    pts = [transforms[v].apply(ds.reconstructions[v].points) for v in sorted(transforms) if v in ds.reconstructions]
    registered = np.vstack(pts) if pts else np.zeros((0, 3))
    anchors = gr.compute_anchors(
        ds.narration, cfg.anchor_strategy, ds.reconstructions, transforms, registered,
        detections=ds.detections if cfg.anchor_strategy == gr.HAND_DETECTOR else None,
        saliency=ds.saliency if cfg.anchor_strategy == gr.SALIENCY_ARGMAX else None,
        radius_px=cfg.surface_radius_px,
    )
    train_pts = np.array([a.point for a in anchors if a.point is not None]).reshape(-1, 3)
    grid = gr.build_voxel_grid(registered, cfg.divisions, train_pts, cfg.n_v)
    pairs, dropped = gr.generate_training_pairs(anchors, cfg.anchor_strategy, grid)
    ms = cfg.metric_scale if cfg.metric_scale is not None else registration.metric_scale
    return GroundingData(ds.name, pairs, grid, dropped, ms, registered)


def train_models(data, cfg):
    """Jointly train one head per dataset on a shared encoder."""
    tc = cfg.train if cfg.train.seed != 0 or cfg.seed == 0 else gr.TrainConfig(**{**asdict(cfg.train), "seed": cfg.seed})
    return gr.train_grounding({d.model_id: d.pairs for d in data}, {d.model_id: d.grid for d in data}, tc)


def write_training_summary(out, data, history):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    rows = [(d.model_id, len(d.pairs), d.grid.n_voxels, *(d.dropped[r] for r in gr.DROP_REASONS)) for d in data]
    formats.write_records(out / "training_summary.tsv", "trainsummary", rows,
                          columns=("model_id pairs voxels " + " ".join(f"dropped_{r}" for r in gr.DROP_REASONS),))
    formats.write_records(out / "training_loss.tsv", "trainloss",
                          [(i, float(l), float(m)) for i, (l, m) in enumerate(zip(history.epoch_loss, history.epoch_mean_loss))],
                          columns=("epoch total_loss mean_loss",))


def query_is_uniform(scores):
    return bool(np.ptp(scores) <= 1e-12)


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")
