"""Dataset manifests: loading, validation and saving."""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import InputError, InvalidConfig, InvariantViolation, MissingFile, ParseError
from . import formats

MANIFEST_VERSION = 1
VIDEO_FILE_KEYS = ("reconstruction", "features", "descriptors", "flows", "narration", "detections", "saliency", "annotations")


@dataclass
class IngestConfig:
    """Ingestion filters.

    ``min_points`` discards small reconstructions; ``frames_per_video`` caps
    the frames offered to retrieval (a seeded subset when exceeded).
    """

    min_points: int = 50
    frames_per_video: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.min_points < 0 or self.frames_per_video < 1:
            raise InvalidConfig("min_points must be >= 0 and frames_per_video >= 1")


@dataclass(eq=False)
class Dataset:
    root: Path
    name: str
    video_ids: list
    reconstructions: dict = field(default_factory=dict)
    features: dict = field(default_factory=dict)
    descriptors: dict = field(default_factory=dict)
    flows: dict = field(default_factory=dict)
    narration: list = field(default_factory=list)
    detections: dict = field(default_factory=dict)
    saliency: dict = field(default_factory=dict)
    annotations: list = field(default_factory=list)
    metric_scales: dict = field(default_factory=dict)
    objects: dict = field(default_factory=dict)
    queries: list = field(default_factory=list)
    discarded: dict = field(default_factory=dict)
    has_flows: bool = False

    def video_of_frame(self):
        return {f: vid for vid, rec in self.reconstructions.items() for f in rec.frames}


class DatasetErrors(InvariantViolation):
    """Several validation failures, itemized in ``errors``."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("dataset failed validation:\n" + "\n".join(f"  - {e}" for e in self.errors))


def read_manifest(path):
    path = Path(path)
    if not path.is_file():
        raise MissingFile(path, "manifest")
    try:
        m = json.loads(path.read_text(encoding="utf-8"))
    except ValueError as exc:
        raise ParseError(f"manifest is not valid JSON: {exc}", path) from None
    if not isinstance(m, dict):
        raise ParseError("manifest must be a JSON object", path)
    v = m.get("format_version")
    if v != MANIFEST_VERSION:
        raise ParseError(f"unsupported format_version {v!r}; supported versions: [{MANIFEST_VERSION}]", path)
    videos = m.get("videos")
    if not isinstance(videos, list) or not videos:
        raise ParseError("manifest lists no videos", path)
    ids = []
    for i, entry in enumerate(videos):
        if not isinstance(entry, dict) or "id" not in entry or "reconstruction" not in entry:
            raise ParseError(f"video entry {i} needs 'id' and 'reconstruction'", path)
        ids.append(entry["id"])
    if len(set(ids)) != len(ids):
        raise ParseError("duplicate video id in manifest", path)
    return m


def load_dataset(manifest_path, ingest=None):
    """Load and validate everything a manifest references.

    Errors from individual files are collected; a single failure is raised
    as is, several are raised together as :class:`DatasetErrors`.
    """
    ingest = ingest or IngestConfig()
    manifest_path = Path(manifest_path)
    m = read_manifest(manifest_path)
    root = manifest_path.parent
    ds = Dataset(root, m.get("name", manifest_path.stem), [v["id"] for v in m["videos"]])
    errors = []

    def attempt(fn, *args):
        try:
            return fn(*args)
        except InputError as exc:
            errors.append(exc)
            return None

    for entry in m["videos"]:
        vid = entry["id"]
        for key in entry:
            if key not in VIDEO_FILE_KEYS + ("id", "metric_scale_cm"):
                errors.append(ParseError(f"unknown key {key!r} in video {vid!r}", manifest_path))
        rec = attempt(formats.read_reconstruction, root / entry["reconstruction"])
        if rec is not None:
            if rec.id != vid:
                errors.append(InvariantViolation(f"reconstruction id {rec.id!r} != video id {vid!r}", root / entry["reconstruction"]))
            elif len(rec.points) < ingest.min_points:
                ds.discarded[vid] = f"{len(rec.points)} points < min_points {ingest.min_points}"
            else:
                ds.reconstructions[vid] = rec
        if "metric_scale_cm" in entry:
            s = entry["metric_scale_cm"]
            if not isinstance(s, (int, float)) or s <= 0:
                errors.append(InvariantViolation(f"metric_scale_cm of {vid!r} must be positive", manifest_path))
            else:
                ds.metric_scales[vid] = float(s)
        if "features" in entry:
            feats = attempt(formats.read_features, root / entry["features"])
            if feats:
                ds.features.update(feats)
        if "descriptors" in entry:
            d = attempt(formats.read_global_descriptors, root / entry["descriptors"])
            if d is not None:
                if len(d) > ingest.frames_per_video:
                    rng = np.random.default_rng([ingest.seed, len(ds.descriptors)])
                    keep = np.sort(rng.choice(len(d), ingest.frames_per_video, replace=False))
                    d = [d[i] for i in keep]
                ds.descriptors[vid] = d
        if "flows" in entry:
            ds.has_flows = True
            fl = attempt(formats.read_flows, root / entry["flows"])
            if fl:
                ds.flows.update(fl)
        if "narration" in entry:
            ds.narration.extend(attempt(formats.read_narration, root / entry["narration"]) or [])
        if "detections" in entry:
            for k, v in (attempt(formats.read_detections, root / entry["detections"]) or {}).items():
                ds.detections.setdefault(k, []).extend(v)
        if "saliency" in entry:
            ds.saliency.update(attempt(formats.read_saliency, root / entry["saliency"]) or {})
        if "annotations" in entry:
            ds.annotations.extend(attempt(formats.read_annotations, root / entry["annotations"]) or [])
    if "objects" in m:
        objs = attempt(formats.read_objects, root / m["objects"])
        if objs is not None:
            ds.objects = objs
            if "queries" in m:
                ds.queries = attempt(formats.read_queries, root / m["queries"], objs) or []

    frame_owner = {}
    for vid, rec in ds.reconstructions.items():
        for f in rec.frames:
            if f in frame_owner:
                errors.append(InvariantViolation(f"frame id {f!r} appears in both {frame_owner[f]!r} and {vid!r}"))
            frame_owner[f] = vid
    for fid, fs in ds.features.items():
        if fid in frame_owner:
            cam = ds.reconstructions[frame_owner[fid]].frames[fid]
            if fs.positions.size:
                x, y = fs.positions
                if np.any((x < 0) | (x >= cam.width) | (y < 0) | (y >= cam.height)):
                    errors.append(InvariantViolation(f"features of frame {fid!r} fall outside the frame"))
    if len(errors) == 1:
        raise errors[0]
    if errors:
        raise DatasetErrors(errors)
    return ds


def write_manifest(path, name, videos, objects=None, queries=None):
    """``videos``: list of dicts with ``id`` and file keys relative to the manifest."""
    m = {"format_version": MANIFEST_VERSION, "name": name, "videos": videos}
    if objects:
        m["objects"] = objects
    if queries:
        m["queries"] = queries
    Path(path).write_text(json.dumps(m, indent=2, sort_keys=True) + "\n", encoding="utf-8")
