"""Deterministic synthetic scenes with planted ground truth.

A single world object (a gently curved surface with one bump per named
part) is "reconstructed" independently by several videos, each in its own
similarity frame. Every artifact the pipeline consumes is generated from the
same geometry: observation tracks, local features, global descriptors,
dense flow, keypoint annotations, narration with hand detections and
saliency maps, and grounding queries. Before noise injection all of them
are exactly consistent with the planted transforms.

Overlap between videos is planted explicitly: two overlapping videos share
a set of world points and one or more dedicated frame pairs that see those
points. Corrupted matches are planted in the second frame of each dedicated
pair by cyclically permuting descriptors among a chosen subset of features.
"""

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..errors import InvalidConfig
from ..geometry import CameraModel, SimilarityTransform3, random_rotation
from ..grounding import Detection2D, GroundingQuery, NarrationSegment, SaliencyMap
from ..matching import FlowField, GlobalDescriptor, LocalFeatureSet, retrieve_frame_pairs
from ..reconstruction import Keypoints3D, Reconstruction
from ..transfer import KeypointAnnotation2D
from . import formats
from .dataset import Dataset, write_manifest

OBJECT_NAMES = (
    "air filter",
    "brake fluid reservoir",
    "negative battery cable",
    "positive battery cable",
    "dipstick",
    "spark plugs",
)

NARRATION_TEMPLATES = (
    "now we are going to check the {obj}",
    "take a look at the {obj} right here",
    "you want to remove the {obj} first",
    "this is the {obj} on this engine",
    "make sure the {obj} is nice and tight",
    "go ahead and pull out the {obj}",
    "clean around the {obj} before you start",
    "here you can see the {obj}",
)

QUERY_TEMPLATES = (
    "locate the {obj}",
    "lift the {obj} out of the housing",
    "where is the {obj}",
    "disconnect the {obj} carefully",
    "inspect the {obj} for damage",
)

FILLER_WORDS = ("okay", "so", "alright", "guys", "um", "basically", "just", "then", "really", "again")

DOMAIN = 1.0
BUMP_HEIGHT = 0.12
BUMP_WIDTH = 0.08


@dataclass
class SyntheticSceneConfig:
    """Parameters of a synthetic scene; see the module docstring."""

    seed: int = 0
    name: str = "synthetic"
    n_models: int = 3
    points_per_model: int = 300
    cameras_per_model: int = 6
    pixel_noise: float = 0.0
    outlier_fraction: float = 0.0
    overlap_pairs: list = None
    shared_points: int = 80
    low_overlap_pairs: list = field(default_factory=list)
    low_overlap_points: int = 6
    pair_frames: int = 2
    transforms: list = None
    objects: dict = None
    n_keypoints: int = 8
    segments_per_model: int = 0
    misaligned_fraction: float = 0.1
    narration_templates: tuple = NARRATION_TEMPLATES
    query_templates: tuple = QUERY_TEMPLATES
    image_width: int = 640
    image_height: int = 480
    focal: float = 500.0
    descriptor_dim: int = 32
    global_dim: int = 64
    flow_stride: int = 4
    cm_per_unit: float = 50.0

    def __post_init__(self):
        if self.n_models < 1:
            raise InvalidConfig("n_models must be at least 1")
        for name in ("pixel_noise",):
            if getattr(self, name) < 0:
                raise InvalidConfig(f"{name} must be non-negative")
        for name in ("outlier_fraction", "misaligned_fraction"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise InvalidConfig(f"{name} must lie in [0, 1], got {v}")
        if self.points_per_model < 1 or self.cameras_per_model < 2 or self.pair_frames < 1:
            raise InvalidConfig("points_per_model >= 1, cameras_per_model >= 2 and pair_frames >= 1 are required")
        if self.flow_stride < 1 or self.focal <= 0:
            raise InvalidConfig("flow_stride and focal must be positive")
        if self.transforms is not None and len(self.transforms) != self.n_models:
            raise InvalidConfig("one planted transform per model is required")
        pairs = self.planted_pairs()
        for a, b in list(pairs) + [tuple(p) for p in self.low_overlap_pairs]:
            if not (0 <= a < self.n_models and 0 <= b < self.n_models and a != b):
                raise InvalidConfig(f"overlap pair {(a, b)} references unknown models")

    def planted_pairs(self):
        if self.overlap_pairs is None:
            return [(i, i + 1) for i in range(self.n_models - 1)]
        return [tuple(sorted(p)) for p in self.overlap_pairs]


@dataclass(eq=False)
class GroundTruth:
    transforms: dict
    world_keypoints: Keypoints3D
    keypoints: dict
    world_objects: dict
    objects: dict
    metric_scales: dict
    noise_3d: float
    corrupted: dict
    planted_frame_pairs: dict
    shared_counts: dict
    n_m: int
    reference: str

    def to_json(self):
        return {
            "reference": self.reference,
            "n_m": self.n_m,
            "noise_3d_model_units_world": self.noise_3d,
            "transforms_world_to_model": {
                k: {"scale": T.scale, "quaternion_wxyz": T.quaternion().tolist(), "translation": T.translation.tolist()}
                for k, T in sorted(self.transforms.items())
            },
            "metric_scale_cm": dict(sorted(self.metric_scales.items())),
            "world_keypoints": {n: self.world_keypoints.coords[:, i].tolist() for i, n in enumerate(self.world_keypoints.names)},
            "world_objects": {k: list(v) for k, v in sorted(self.world_objects.items())},
            "objects_reference_frame": {k: list(v) for k, v in sorted(self.objects.items())},
            "corrupted_matches": {f"{a}|{b}": [list(r) for r in rows] for (a, b), rows in sorted(self.corrupted.items())},
            "planted_frame_pairs": {f"{a}|{b}": [list(p) for p in v] for (a, b), v in sorted(self.planted_frame_pairs.items())},
            "shared_points": {f"{a}|{b}": n for (a, b), n in sorted(self.shared_counts.items())},
        }


@dataclass(eq=False)
class SyntheticScene:
    config: SyntheticSceneConfig
    dataset: Dataset
    truth: GroundTruth
    world_points: np.ndarray
    world_cameras: dict


def height(x, y, bumps):
    z = 0.03 * np.sin(2.0 * x) * np.cos(1.5 * y)
    for bx, by in bumps:
        z = z + BUMP_HEIGHT * np.exp(-((x - bx) ** 2 + (y - by) ** 2) / (2 * BUMP_WIDTH ** 2))
    return z


def _surface_points(rng, n, bumps, extent=DOMAIN):
    xy = rng.uniform(-extent, extent, size=(n, 2))
    return np.column_stack([xy, height(xy[:, 0], xy[:, 1], bumps)])


def ray_surface(origins, dirs, bumps, iters=60):
    """First crossing of rays with the height field; returns ``(points, hit)``."""
    o = np.atleast_2d(origins)
    d = np.atleast_2d(dirs)
    zmax = BUMP_HEIGHT * max(len(bumps), 1) + 0.05
    zmin = -0.05
    down = d[:, 2] < -1e-9
    with np.errstate(divide="ignore", invalid="ignore"):
        lo = np.where(down, (o[:, 2] - zmax) / -d[:, 2], 0.0)
        hi = np.where(down, (o[:, 2] - zmin) / -d[:, 2], 0.0)
    lo = np.maximum(lo, 0.0)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        p = o + mid[:, None] * d
        above = p[:, 2] > height(p[:, 0], p[:, 1], bumps)
        lo = np.where(above, mid, lo)
        hi = np.where(above, hi, mid)
    lam = 0.5 * (lo + hi)
    pts = o + lam[:, None] * d
    return pts, down & (o[:, 2] > zmax)


def _object_layout(rng, names, min_sep=0.5, extent=0.75):
    for _ in range(10_000):
        xy = rng.uniform(-extent, extent, size=(len(names), 2))
        dist = np.linalg.norm(xy[:, None] - xy[None], axis=2) + np.eye(len(names)) * 10
        if dist.min() >= min_sep:
            return {n: (float(x), float(y)) for n, (x, y) in zip(names, xy)}
    raise InvalidConfig("could not place objects with the requested separation")


def _intrinsics(cfg):
    return np.array([[cfg.focal, 0.0, cfg.image_width / 2], [0.0, cfg.focal, cfg.image_height / 2], [0.0, 0.0, 1.0]])


def _camera(cfg, eye, target):
    return CameraModel.look_at(_intrinsics(cfg), eye, target, cfg.image_width, cfg.image_height)


def _visible(cam, pts):
    uv, depth = cam.project_many(pts)
    return (depth > 1e-6) & cam.in_bounds(uv), uv, depth


def _flow(cfg, cam_a, cam_b, bumps, src, dst):
    gw = int(np.ceil(cfg.image_width / cfg.flow_stride))
    gh = int(np.ceil(cfg.image_height / cfg.flow_stride))
    xs = (np.arange(gw) + 0.5) * cfg.image_width / gw
    ys = (np.arange(gh) + 0.5) * cfg.image_height / gh
    gx, gy = np.meshgrid(xs, ys)
    pix = np.column_stack([gx.ravel(), gy.ravel(), np.ones(gx.size)])
    d = (np.linalg.solve(cam_a.intrinsics, pix.T).T) @ cam_a.rotation
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    pts, hit = ray_surface(np.broadcast_to(cam_a.center, d.shape), d, bumps)
    uv, depth = cam_b.project_many(pts)
    ok = hit & (depth > 1e-6) & np.all(np.isfinite(uv), axis=1)
    grid = np.where(ok[:, None], uv, 0.0).reshape(gh, gw, 2)
    return FlowField(src, dst, grid, ok.reshape(gh, gw), (cfg.image_width, cfg.image_height))


def _cyclic_corruption(rng, positions, n_c, min_disp):
    """Order of ``n_c`` feature rows whose descriptors get cyclically shifted."""
    n = len(positions)
    if n_c < 2:
        return None
    best = None
    for _ in range(200):
        sel = rng.choice(n, n_c, replace=False)
        disp = np.linalg.norm(positions[sel] - positions[np.roll(sel, -1)], axis=1)
        if best is None or disp.min() > best[1]:
            best = (sel, disp.min())
        if disp.min() >= min_disp:
            break
    return best[0]


def generate_synthetic_scene(cfg):
    """Build a scene in memory; see :func:`write_scene` to put it on disk."""
    if not isinstance(cfg, SyntheticSceneConfig):
        raise InvalidConfig("expected a SyntheticSceneConfig")
    rngs = [np.random.default_rng([cfg.seed, k]) for k in range(16)]
    r_layout, r_world, r_tf, r_cam, r_noise, r_desc, r_corrupt, r_kp, r_nar, r_aux = rngs[:10]
    vids = [f"v{i}" for i in range(cfg.n_models)]

    names = list(cfg.objects) if cfg.objects else list(OBJECT_NAMES)
    world_objects_xy = dict(cfg.objects) if cfg.objects else _object_layout(r_layout, names)
    bumps = list(world_objects_xy.values())

    if cfg.transforms is not None:
        planted = {v: T for v, T in zip(vids, cfg.transforms)}
    else:
        planted = {}
        for v in vids:
            s = float(np.exp(r_tf.uniform(np.log(0.5), np.log(2.0))))
            planted[v] = SimilarityTransform3(s, random_rotation(r_tf), r_tf.normal(size=3))

    # world points: private per video plus shared per planted overlap
    membership = {v: [] for v in vids}
    chunks = []
    n_pts = 0

    def add_points(count, owners):
        nonlocal n_pts
        chunks.append(_surface_points(r_world, count, bumps))
        ids = list(range(n_pts, n_pts + count))
        for o in owners:
            membership[o].extend(ids)
        n_pts += count
        return ids

    for v in vids:
        add_points(cfg.points_per_model, [v])
    shared = {}
    for a, b in cfg.planted_pairs():
        shared[(vids[a], vids[b])] = add_points(cfg.shared_points, [vids[a], vids[b]])
    for a, b in (tuple(sorted(p)) for p in cfg.low_overlap_pairs):
        shared[(vids[a], vids[b])] = add_points(cfg.low_overlap_points, [vids[a], vids[b]])
    world = np.vstack(chunks)
    point_desc = r_desc.normal(size=(n_pts, cfg.descriptor_dim))
    point_desc /= np.linalg.norm(point_desc, axis=1, keepdims=True)

    # cameras in world coordinates
    world_cams = {}
    frames_of = {v: [] for v in vids}
    for v in vids:
        phase = r_cam.uniform(0, 2 * np.pi)
        for k in range(cfg.cameras_per_model):
            th = phase + 2 * np.pi * k / cfg.cameras_per_model + r_cam.uniform(-0.2, 0.2)
            R = r_cam.uniform(0.8, 1.4)
            eye = np.array([R * np.cos(th), R * np.sin(th), r_cam.uniform(1.8, 2.4)])
            fid = f"{v}_s{k:03d}"
            world_cams[fid] = _camera(cfg, eye, np.append(r_cam.normal(scale=0.1, size=2), 0.0))
            frames_of[v].append(fid)
    pair_frames = {}
    for (va, vb) in shared:
        pair_frames[(va, vb)] = []
        for k in range(cfg.pair_frames):
            fa, fb = f"{va}_p{vb}_{k}", f"{vb}_p{va}_{k}"
            for fid, v in ((fa, va), (fb, vb)):
                eye = np.array([*r_cam.uniform(-0.4, 0.4, size=2), r_cam.uniform(2.2, 2.6)])
                world_cams[fid] = _camera(cfg, eye, np.append(r_cam.normal(scale=0.05, size=2), 0.0))
                frames_of[v].append(fid)
            pair_frames[(va, vb)].append((fa, fb))

    # observations: solo frames see every visible point of their video, pair frames only the shared points
    obs = {v: [] for v in vids}
    frame_obs = {}
    depths = []

    def observe(fid, v, pids):
        pids = np.asarray(pids, dtype=np.int64)
        ok, uv, depth = _visible(world_cams[fid], world[pids])
        pids, uv = pids[ok], uv[ok]
        noisy = uv + r_noise.normal(scale=cfg.pixel_noise, size=uv.shape) if cfg.pixel_noise else uv.copy()
        inside = world_cams[fid].in_bounds(noisy)
        pids, noisy = pids[inside], noisy[inside]
        depths.extend(depth[ok][inside].tolist())
        frame_obs[fid] = (pids, noisy)
        for k, (pid, p) in enumerate(zip(pids, noisy)):
            obs[v].append((fid, k, p, int(pid)))

    for v in vids:
        for fid in frames_of[v]:
            if "_s" in fid:
                observe(fid, v, membership[v])
    for (va, vb), plist in pair_frames.items():
        for fa, fb in plist:
            ids = np.asarray(shared[(va, vb)])
            both = _visible(world_cams[fa], world[ids])[0] & _visible(world_cams[fb], world[ids])[0]
            observe(fa, va, ids[both])
            observe(fb, vb, frame_obs[fa][0])
            if len(frame_obs[fb][0]) != len(frame_obs[fa][0]):
                keep = np.isin(frame_obs[fa][0], frame_obs[fb][0])
                pa, ua = frame_obs[fa]
                frame_obs[fa] = (pa[keep], ua[keep])
                obs[va] = [o for o in obs[va] if o[0] != fa]
                for k, (pid, p) in enumerate(zip(*frame_obs[fa])):
                    obs[va].append((fa, k, p, int(pid)))

    mean_depth = float(np.mean(depths)) if depths else 2.0
    noise_3d = cfg.pixel_noise * mean_depth / cfg.focal

    # narration frames
    segments, detections, saliency = [], {}, []
    seg_truth = []
    if cfg.segments_per_model > 0:
        for s in range(cfg.segments_per_model):
            v = vids[s % cfg.n_models]
            obj = names[s % len(names)] if s < len(names) * 2 else names[int(r_nar.integers(len(names)))]
            ox, oy = world_objects_xy[obj]
            target = np.array([ox, oy, float(height(ox, oy, bumps))])
            if r_nar.uniform() < cfg.misaligned_fraction:
                tx, ty = r_nar.uniform(-DOMAIN, DOMAIN, size=2)
                target = np.array([tx, ty, float(height(tx, ty, bumps))])
            else:
                target = target + np.append(r_nar.normal(scale=0.02, size=2), 0.0)
            th = r_nar.uniform(0, 2 * np.pi)
            rad = r_nar.uniform(0.2, 0.6)
            eye = target + np.array([rad * np.cos(th), rad * np.sin(th), r_nar.uniform(0.9, 1.3)])
            fid = f"{v}_n{s:04d}"
            world_cams[fid] = _camera(cfg, eye, target)
            frames_of[v].append(fid)
            words = cfg.narration_templates[int(r_nar.integers(len(cfg.narration_templates)))].format(obj=obj).split()
            for _ in range(int(r_nar.integers(0, 3))):
                words.insert(int(r_nar.integers(len(words) + 1)), FILLER_WORDS[int(r_nar.integers(len(FILLER_WORDS)))])
            segments.append(NarrationSegment(v, " ".join(words), (fid,)))
            seg_truth.append(obj)
            cam = world_cams[fid]
            obj_uv, _ = cam.project_many(np.array([[ox, oy, float(height(ox, oy, bumps))]]))
            dets = detections.setdefault(v, [])
            if r_aux.uniform() < 0.75:
                p = np.clip(obj_uv[0] + r_aux.normal(scale=25.0, size=2), 0, [cfg.image_width - 1e-3, cfg.image_height - 1e-3])
                dets.append(Detection2D(fid, (float(p[0]), float(p[1])), float(r_aux.uniform(0.5, 1.0))))
            if r_aux.uniform() < 0.5:
                p = r_aux.uniform([0, 0], [cfg.image_width, cfg.image_height])
                dets.append(Detection2D(fid, (float(p[0]), float(p[1])), float(r_aux.uniform(0.0, 0.6))))
            sh, sw = 8, 14
            cy = (np.arange(sh) + 0.5) * cfg.image_height / sh
            cx = (np.arange(sw) + 0.5) * cfg.image_width / sw
            gx, gy = np.meshgrid(cx, cy)
            sigma = 1.5 * cfg.image_width / sw
            u, w_ = obj_uv[0] if np.all(np.isfinite(obj_uv[0])) else (cfg.image_width / 2, cfg.image_height / 2)
            grid = np.exp(-((gx - u) ** 2 + (gy - w_) ** 2) / (2 * sigma ** 2)) + r_aux.normal(scale=0.1, size=(sh, sw))
            saliency.append(SaliencyMap(fid, grid))

    # reconstructions in model frames
    recs = {}
    for v in vids:
        T = planted[v]
        pids = np.array(sorted(membership[v]), dtype=np.int64)
        pts = world[pids]
        if cfg.pixel_noise:
            pts = pts + r_noise.normal(scale=noise_3d, size=pts.shape)
        frames = {fid: world_cams[fid].transformed(T) for fid in frames_of[v]}
        o = obs[v]
        recs[v] = Reconstruction(
            v, pids, T.apply(pts), frames,
            [x[0] for x in o], [x[1] for x in o], np.array([x[2] for x in o]).reshape(-1, 2), [x[3] for x in o],
        )

    # local features: one per observation of solo and pair frames
    features = {}
    corrupted = {}
    for v in vids:
        for fid in frames_of[v]:
            if fid not in frame_obs:
                continue
            pids, uv = frame_obs[fid]
            desc = point_desc[pids] + r_desc.normal(scale=0.05 / np.sqrt(cfg.descriptor_dim), size=(len(pids), cfg.descriptor_dim))
            features[fid] = LocalFeatureSet(fid, desc.T, uv.T, cfg.image_width, cfg.image_height)
    for (va, vb), plist in pair_frames.items():
        for fa, fb in plist:
            fb_set = features[fb]
            n = len(fb_set)
            n_c = int(round(cfg.outlier_fraction * n))
            if n_c == 1 and n >= 2:
                n_c = 2
            rows = []
            order = _cyclic_corruption(r_corrupt, fb_set.positions.T, n_c, 24.0)
            if order is not None:
                d = fb_set.descriptors.copy()
                d[:, np.roll(order, -1)] = fb_set.descriptors[:, order]
                features[fb] = LocalFeatureSet(fb, d, fb_set.positions, cfg.image_width, cfg.image_height)
                # feature order[k] of fa now pairs with feature order[k+1] of fb
                for i, j in zip(order, np.roll(order, -1)):
                    rows.append((fa, fb, int(i), int(j)))
            corrupted[(fa, fb)] = rows

    # global descriptors: random per frame, shared slot vectors for dedicated pairs
    gvec = {}
    for v in vids:
        for fid in frames_of[v]:
            if fid in frame_obs:
                gvec[fid] = r_desc.normal(size=cfg.global_dim)
    for plist in pair_frames.values():
        for fa, fb in plist:
            slot = r_desc.normal(size=cfg.global_dim)
            slot *= 4.0 / np.linalg.norm(slot) * np.sqrt(cfg.global_dim) / 4.0
            gvec[fa] = slot + r_desc.normal(scale=0.05, size=cfg.global_dim)
            gvec[fb] = slot + r_desc.normal(scale=0.05, size=cfg.global_dim)
    descriptors = {v: [GlobalDescriptor(f, gvec[f]) for f in frames_of[v] if f in gvec] for v in vids}

    # flows for every frame pair retrieval will propose
    n_m = cfg.pair_frames
    flows = {}
    for i, va in enumerate(vids):
        for vb in vids[i + 1:]:
            for fa, fb, _ in retrieve_frame_pairs(descriptors[va], descriptors[vb], n_m):
                flows[(fa, fb)] = _flow(cfg, world_cams[fa], world_cams[fb], bumps, fa, fb)

    # keypoints and annotations
    kp_names = [f"kp{k:02d}" for k in range(cfg.n_keypoints)]
    kp_world = _surface_points(r_kp, cfg.n_keypoints, bumps, extent=0.7)
    annotations = []
    for v in vids:
        for fid in frames_of[v]:
            if "_s" not in fid:
                continue
            ok, uv, _ = _visible(world_cams[fid], kp_world)
            for k in np.flatnonzero(ok):
                p = uv[k] + (r_kp.normal(scale=cfg.pixel_noise, size=2) if cfg.pixel_noise else 0.0)
                if world_cams[fid].in_bounds(p):
                    annotations.append(KeypointAnnotation2D(v, fid, kp_names[k], (float(p[0]), float(p[1]))))

    reference = vids[0]
    T_ref = planted[reference]
    world_obj3 = {n: np.array([x, y, float(height(x, y, bumps))]) for n, (x, y) in world_objects_xy.items()}
    objects_ref = {n: T_ref.apply(p) for n, p in world_obj3.items()}
    queries = []
    if cfg.segments_per_model > 0:
        for obj in names:
            for tpl in cfg.query_templates:
                queries.append(GroundingQuery(cfg.name, tpl.format(obj=obj), tuple(objects_ref[obj]), obj))

    metric = {v: cfg.cm_per_unit / planted[v].scale for v in vids}
    ds = Dataset(
        Path("."), cfg.name, vids, recs, features, descriptors, flows, segments, detections,
        {m.frame_id: m for m in saliency}, annotations, metric,
        {cfg.name: objects_ref} if cfg.segments_per_model > 0 else {}, queries, {}, True,
    )
    truth = GroundTruth(
        planted, Keypoints3D(kp_names, kp_world.T),
        {v: Keypoints3D(kp_names, planted[v].apply(kp_world).T) for v in vids},
        world_obj3, objects_ref, metric, noise_3d, corrupted,
        pair_frames, {k: len(v) for k, v in shared.items()}, n_m, reference,
    )
    scene = SyntheticScene(cfg, ds, truth, world, world_cams)
    scene.segment_objects = seg_truth
    return scene


def write_scene(scene, outdir):
    """Write every dataset file, the manifest and ``ground_truth.json``.

    Returns the manifest path.
    """
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    ds = scene.dataset
    entries = []
    for v in ds.video_ids:
        rec = ds.reconstructions[v]
        e = {"id": v, "reconstruction": f"{v}.rec", "metric_scale_cm": ds.metric_scales[v]}
        formats.write_reconstruction(out / e["reconstruction"], rec)
        feats = [ds.features[f] for f in rec.frames if f in ds.features]
        e["features"] = f"{v}.lfd"
        formats.write_features(out / e["features"], feats)
        e["descriptors"] = f"{v}.gdv"
        formats.write_global_descriptors(out / e["descriptors"], ds.descriptors[v])
        fl = [ds.flows[k] for k in sorted(ds.flows) if k[0] in rec.frames]
        e["flows"] = f"{v}.flo2"
        formats.write_flows(out / e["flows"], fl)
        ann = [a for a in ds.annotations if a.video_id == v]
        e["annotations"] = f"{v}.kp2"
        formats.write_annotations(out / e["annotations"], ann)
        segs = [s for s in ds.narration if s.video_id == v]
        if segs:
            e["narration"] = f"{v}.nar"
            formats.write_narration(out / e["narration"], segs)
            e["detections"] = f"{v}.det"
            formats.write_detections(out / e["detections"], {v: ds.detections.get(v, [])})
            e["saliency"] = f"{v}.sal"
            formats.write_saliency(out / e["saliency"], [ds.saliency[f] for f in rec.frames if f in ds.saliency])
        entries.append(e)
    objects = queries = None
    if ds.objects:
        objects, queries = "objects.obj", "queries.qry"
        formats.write_objects(out / objects, ds.objects)
        formats.write_queries(out / queries, ds.queries)
    manifest = out / "manifest.json"
    write_manifest(manifest, ds.name, entries, objects, queries)
    gt = scene.truth.to_json()
    gt["config"] = {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(scene.config).items() if k != "transforms"}
    (out / "ground_truth.json").write_text(json.dumps(gt, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return manifest


@dataclass(eq=False)
class HomographyScene:
    features_a: LocalFeatureSet
    features_b: LocalFeatureSet
    flow: FlowField
    homography: np.ndarray
    corrupted: set  # (index_a, index_b) of planted wrong mutual matches


def apply_homography(H, pts):
    p = np.column_stack([pts, np.ones(len(pts))]) @ H.T
    return p[:, :2] / p[:, 2:3]


def homography_match_scene(seed, n_features=300, corrupt_fraction=0.3, width=640, height=480, stride=4,
                           descriptor_dim=32, min_displacement=24.0):
    """Two frames related by a mild homography with planted wrong matches.

    Frame B sees every feature of frame A at its homography image. Exactly
    ``round(corrupt_fraction * n)`` features of B have their descriptors
    cyclically permuted, so mutual matching pairs them with the wrong A
    feature. The flow grid samples the homography itself.
    """
    if not 0 <= corrupt_fraction <= 1:
        raise InvalidConfig("corrupt_fraction must lie in [0, 1]")
    rng = np.random.default_rng([seed, 99])
    c = np.array([width / 2, height / 2])
    A = np.eye(2) + rng.normal(scale=0.05, size=(2, 2))
    H = np.eye(3)
    H[:2, :2] = A
    H[:2, 2] = c - A @ c + rng.normal(scale=10, size=2)
    H[2, :2] = rng.normal(scale=2e-5, size=2)
    pa = rng.uniform([0, 0], [width, height], size=(4 * n_features, 2))
    pb = apply_homography(H, pa)
    ok = (pb[:, 0] >= 0) & (pb[:, 0] < width) & (pb[:, 1] >= 0) & (pb[:, 1] < height)
    pa, pb = pa[ok][:n_features], pb[ok][:n_features]
    n = len(pa)
    d = rng.normal(size=(n, descriptor_dim))
    da = d + rng.normal(scale=0.01, size=d.shape)
    db = d + rng.normal(scale=0.01, size=d.shape)
    n_c = int(round(corrupt_fraction * n))
    if n_c == 1:
        n_c = 2
    corrupted = set()
    order = _cyclic_corruption(rng, pb, n_c, min_displacement)
    if order is not None:
        db2 = db.copy()
        db2[np.roll(order, -1)] = db[order]
        db = db2
        corrupted = {(int(i), int(j)) for i, j in zip(order, np.roll(order, -1))}
    fa = LocalFeatureSet("a", da.T, pa.T, width, height)
    fb = LocalFeatureSet("b", db.T, pb.T, width, height)
    ident = FlowField.identity("a", "b", width, height, stride)
    grid = apply_homography(H, ident.grid.reshape(-1, 2)).reshape(ident.grid.shape)
    return HomographyScene(fa, fb, FlowField("a", "b", grid, ident.valid, (width, height)), H, corrupted)
