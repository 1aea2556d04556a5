"""Readers and writers for the on-disk formats.

Text formats are tab-separated lines after a ``#`` header whose first line
is ``# narrate3d-<kind> format_version=<n>``; further ``# key=value`` lines
carry metadata and ``# columns:`` lines document the record layout. Floats
are written with 17 significant digits so every round trip is exact. Large
arrays live in little-endian binary blobs next to a text sidecar. FORMATS.md
documents every layout.
"""

import json
import struct
from pathlib import Path

import numpy as np

from ..alignment import AlignmentGraph, EdgeEstimate, Registration
from ..errors import InvariantViolation, MissingFile, ParseError
from ..geometry import CameraModel, SimilarityTransform3
from ..grounding import (
    Detection2D,
    GroundingModel,
    GroundingQuery,
    NarrationSegment,
    SaliencyMap,
    VoxelGrid,
)
from ..matching import FlowField, GlobalDescriptor, LocalFeatureSet, MatchSet
from ..reconstruction import Keypoints3D, Reconstruction
from ..transfer import KeypointAnnotation2D, PckCurve

FORMAT_VERSION = 1
SUPPORTED_VERSIONS = (1,)


def fmt(x):
    return "%.17g" % x


def _clean(s):
    s = str(s)
    if "\t" in s or "\n" in s or "\r" in s:
        raise ValueError(f"field {s!r} contains a tab or newline")
    return s


def write_records(path, kind, rows, meta=None, columns=()):
    lines = [f"# narrate3d-{kind} format_version={FORMAT_VERSION}"]
    for k, v in (meta or {}).items():
        lines.append(f"# {k}={_clean(v)}")
    for c in columns:
        lines.append(f"# columns: {c}")
    for row in rows:
        lines.append("\t".join(fmt(v) if isinstance(v, (float, np.floating)) else _clean(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_records(path, kind):
    """``(meta, [(line_number, fields), ...])`` of a text format file."""
    path = Path(path)
    if not path.is_file():
        raise MissingFile(path)
    text = path.read_text(encoding="utf-8").splitlines()
    if not text:
        raise ParseError("empty file", path, 1)
    head = text[0].split()
    if len(head) != 3 or head[0] != "#" or head[1] != f"narrate3d-{kind}" or not head[2].startswith("format_version="):
        raise ParseError(f"expected header '# narrate3d-{kind} format_version=N'", path, 1)
    try:
        version = int(head[2].split("=", 1)[1])
    except ValueError:
        raise ParseError("format_version is not an integer", path, 1) from None
    if version not in SUPPORTED_VERSIONS:
        raise ParseError(
            f"unsupported format_version {version}; supported versions: {list(SUPPORTED_VERSIONS)}", path, 1
        )
    meta, rows = {"format_version": version}, []
    for n, line in enumerate(text[1:], start=2):
        if not line.strip():
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if not body.startswith("columns:") and "=" in body:
                k, v = body.split("=", 1)
                meta[k.strip()] = v
            continue
        rows.append((n, line.split("\t")))
    return meta, rows


class _Fields:
    """Typed access to one record with file/line context in errors."""

    def __init__(self, path, line, fields, n=None, at_least=None):
        self.path, self.line, self.fields = path, line, fields
        if n is not None and len(fields) != n:
            self.fail(f"expected {n} fields, found {len(fields)}")
        if at_least is not None and len(fields) < at_least:
            self.fail(f"expected at least {at_least} fields, found {len(fields)}")

    def fail(self, msg, cls=ParseError):
        raise cls(msg, self.path, self.line)

    def str(self, i):
        return self.fields[i]

    def int(self, i):
        try:
            return int(self.fields[i])
        except ValueError:
            self.fail(f"field {i + 1} is not an integer: {self.fields[i]!r}")

    def float(self, i):
        try:
            return float(self.fields[i])
        except ValueError:
            self.fail(f"field {i + 1} is not a number: {self.fields[i]!r}")

    def floats(self, start, stop=None):
        return np.array([self.float(i) for i in range(start, len(self.fields) if stop is None else stop)])


# reconstructions ---------------------------------------------------------

_REC_COLUMNS = (
    "P point_id x y z",
    "F frame_id width height k00 k01 k02 k11 k12 r00 r01 r02 r10 r11 r12 r20 r21 r22 t0 t1 t2",
    "O frame_id keypoint_index u v point_id",
)


def write_reconstruction(path, rec):
    rows = [("P", int(pid), *map(float, xyz)) for pid, xyz in zip(rec.point_ids, rec.points)]
    for fid, cam in rec.frames.items():
        K = cam.intrinsics
        rows.append(("F", fid, cam.width, cam.height, *map(float, (K[0, 0], K[0, 1], K[0, 2], K[1, 1], K[1, 2])),
                     *map(float, cam.rotation.ravel()), *map(float, cam.translation)))
    for f, k, uv, pid in zip(rec.obs_frame, rec.obs_keypoint, rec.obs_pixel, rec.obs_point):
        rows.append(("O", f, int(k), float(uv[0]), float(uv[1]), int(pid)))
    write_records(path, "rec", rows, {"id": rec.id}, _REC_COLUMNS)


def read_reconstruction(path):
    meta, rows = read_records(path, "rec")
    if "id" not in meta:
        raise ParseError("missing '# id=' header", path, 1)
    pids, pts, frames = [], [], {}
    obs, obs_lines = [], []
    for line, f in rows:
        tag = f[0]
        if tag == "P":
            r = _Fields(path, line, f, 5)
            pids.append(r.int(1))
            pts.append(r.floats(2, 5))
        elif tag == "F":
            r = _Fields(path, line, f, 21)
            k = r.floats(4, 9)
            K = np.array([[k[0], k[1], k[2]], [0.0, k[3], k[4]], [0.0, 0.0, 1.0]])
            try:
                cam = CameraModel(K, r.floats(9, 18).reshape(3, 3), r.floats(18, 21), r.int(2), r.int(3))
            except ValueError as exc:
                r.fail(f"invalid camera {r.str(1)!r}: {exc}", InvariantViolation)
            if r.str(1) in frames:
                r.fail(f"duplicate frame {r.str(1)!r}", InvariantViolation)
            frames[r.str(1)] = cam
        elif tag == "O":
            r = _Fields(path, line, f, 6)
            obs.append((r.str(1), r.int(2), r.float(3), r.float(4), r.int(5)))
            obs_lines.append(line)
        else:
            raise ParseError(f"unknown record tag {tag!r}", path, line)
    known = set(pids)
    seen = set()
    for (fid, k, _, _, pid), line in zip(obs, obs_lines):
        if fid not in frames:
            raise InvariantViolation(f"observation (frame {fid!r}, keypoint {k}) references unknown frame", path, line)
        if pid not in known:
            raise InvariantViolation(
                f"observation (frame {fid!r}, keypoint {k}) references unknown point_id {pid}", path, line
            )
        if (fid, k) in seen:
            raise InvariantViolation(f"duplicate observation (frame {fid!r}, keypoint {k})", path, line)
        seen.add((fid, k))
    try:
        return Reconstruction(
            meta["id"], pids, np.array(pts).reshape(-1, 3), frames,
            [o[0] for o in obs], [o[1] for o in obs], [(o[2], o[3]) for o in obs], [o[4] for o in obs],
        )
    except InvariantViolation as exc:
        raise InvariantViolation(str(exc), path) from None


# local features (sidecar + blob) ----------------------------------------------------

def _blob_path(path):
    return Path(str(path) + ".bin")


def write_features(path, feature_sets):
    blob = bytearray()
    rows = []
    for fs in feature_sets:
        rows.append((fs.frame_id, -1 if fs.width is None else fs.width, -1 if fs.height is None else fs.height,
                     len(fs), fs.descriptors.shape[0], len(blob)))
        blob += np.ascontiguousarray(fs.positions, dtype="<f8").tobytes()
        blob += np.ascontiguousarray(fs.descriptors, dtype="<f8").tobytes()
    _blob_path(path).write_bytes(bytes(blob))
    write_records(path, "lfd", rows, {"blob": _blob_path(path).name, "dtype": "<f8"},
                  ("frame_id width height n_features dim byte_offset  (blob: positions 2xN then descriptors dimxN, row-major)",))


def read_features(path):
    meta, rows = read_records(path, "lfd")
    blob_file = Path(path).parent / meta.get("blob", _blob_path(path).name)
    if not blob_file.is_file():
        raise MissingFile(blob_file, f"blob of {path}")
    data = blob_file.read_bytes()
    out = {}
    for line, f in rows:
        r = _Fields(path, line, f, 6)
        n, dim, off = r.int(3), r.int(4), r.int(5)
        size = 8 * n * (2 + dim)
        if off < 0 or off + size > len(data):
            r.fail("blob offset out of range")
        arr = np.frombuffer(data, dtype="<f8", count=n * (2 + dim), offset=off).astype(float)
        w, h = r.int(1), r.int(2)
        try:
            out[r.str(0)] = LocalFeatureSet(
                r.str(0), arr[2 * n:].reshape(dim, n), arr[:2 * n].reshape(2, n),
                None if w < 0 else w, None if h < 0 else h,
            )
        except InvariantViolation as exc:
            r.fail(str(exc), InvariantViolation)
    return out


# global descriptors ------------------------------------------------------

def write_global_descriptors(path, descriptors):
    write_records(path, "gdv", [(d.frame_id, *map(float, d.vector)) for d in descriptors], columns=("frame_id v1 .. vd",))


def read_global_descriptors(path):
    _, rows = read_records(path, "gdv")
    out = []
    for line, f in rows:
        r = _Fields(path, line, f, at_least=2)
        try:
            out.append(GlobalDescriptor(r.str(0), r.floats(1)))
        except InvariantViolation as exc:
            r.fail(str(exc), InvariantViolation)
    return out


# dense flow (sidecar + blob) -------------------------------------------------

def write_flows(path, flows):
    blob = bytearray()
    rows = []
    for fl in flows:
        gh, gw = fl.grid.shape[:2]
        rows.append((fl.source_frame_id, fl.target_frame_id, fl.source_size[0], fl.source_size[1], gw, gh, len(blob)))
        blob += np.ascontiguousarray(fl.grid, dtype="<f8").tobytes()
        blob += np.ascontiguousarray(fl.valid, dtype="u1").tobytes()
    _blob_path(path).write_bytes(bytes(blob))
    write_records(path, "flo2", rows, {"blob": _blob_path(path).name, "grid_dtype": "<f8", "mask_dtype": "u1"},
                  ("source_frame target_frame source_width source_height grid_width grid_height byte_offset"
                   "  (blob: grid HxWx2 <f8 then mask HxW u1)",))


def read_flows(path):
    meta, rows = read_records(path, "flo2")
    blob_file = Path(path).parent / meta.get("blob", _blob_path(path).name)
    if not blob_file.is_file():
        raise MissingFile(blob_file, f"blob of {path}")
    data = blob_file.read_bytes()
    out = {}
    for line, f in rows:
        r = _Fields(path, line, f, 7)
        gw, gh, off = r.int(4), r.int(5), r.int(6)
        size = gh * gw * 17
        if off < 0 or off + size > len(data):
            r.fail("blob offset out of range")
        grid = np.frombuffer(data, "<f8", gh * gw * 2, off).astype(float).reshape(gh, gw, 2)
        mask = np.frombuffer(data, "u1", gh * gw, off + 16 * gh * gw).astype(bool).reshape(gh, gw)
        try:
            out[(r.str(0), r.str(1))] = FlowField(r.str(0), r.str(1), grid, mask, (r.int(2), r.int(3)))
        except InvariantViolation as exc:
            r.fail(str(exc), InvariantViolation)
    return out


# matches -----------------------------------------------------------------

def write_matches(path, match_sets):
    rows = []
    for ms in match_sets:
        rows.append(("S", ms.pair[0], ms.pair[1], ms.stage, len(ms)))
        for ia, ib, pa, pb in zip(ms.index_a, ms.index_b, ms.pixel_a, ms.pixel_b):
            rows.append(("M", int(ia), int(ib), float(pa[0]), float(pa[1]), float(pb[0]), float(pb[1])))
    write_records(path, "m2d", rows, columns=("S frame_a frame_b stage count", "M index_a index_b ua va ub vb"))


def read_matches(path):
    _, rows = read_records(path, "m2d")
    out, cur, header = [], None, None

    def close():
        if cur is None:
            return
        line, fa, fb, stage, count = header
        if len(cur) != count:
            raise ParseError(f"match set declares {count} rows, found {len(cur)}", path, line)
        arr = np.array(cur, dtype=float).reshape(-1, 6)
        try:
            out.append(MatchSet((fa, fb), arr[:, 0].astype(np.int64), arr[:, 1].astype(np.int64), arr[:, 2:4], arr[:, 4:6], stage))
        except InvariantViolation as exc:
            raise InvariantViolation(str(exc), path, line) from None

    for line, f in rows:
        if f[0] == "S":
            close()
            r = _Fields(path, line, f, 5)
            header = (line, r.str(1), r.str(2), r.str(3), r.int(4))
            cur = []
        elif f[0] == "M":
            if cur is None:
                raise ParseError("match row before any set header", path, line)
            r = _Fields(path, line, f, 7)
            cur.append((r.int(1), r.int(2), r.float(3), r.float(4), r.float(5), r.float(6)))
        else:
            raise ParseError(f"unknown record tag {f[0]!r}", path, line)
    close()
    return out


# alignment graph ---------------------------------------------------------

def write_graph(path, graph):
    rows = [("N", n) for n in graph.nodes]
    for e in graph.edges:
        q = e.transform.quaternion()
        rows.append(("E", e.from_id, e.to_id, float(e.transform.scale), *map(float, q),
                     *map(float, e.transform.translation), int(e.inlier_count), int(e.total_count), float(e.inlier_rms)))
    write_records(path, "agr", rows, columns=(
        "N node_id",
        "E from_id to_id scale qw qx qy qz tx ty tz inlier_count total_count inlier_rms  (maps from_id frame into to_id frame)",
    ))


def read_graph(path):
    _, rows = read_records(path, "agr")
    nodes, edges = [], []
    for line, f in rows:
        if f[0] == "N":
            nodes.append(_Fields(path, line, f, 2).str(1))
        elif f[0] == "E":
            r = _Fields(path, line, f, 14)
            try:
                T = SimilarityTransform3.from_quaternion(r.float(3), r.floats(4, 8), r.floats(8, 11))
                edges.append(EdgeEstimate(r.str(1), r.str(2), T, r.int(11), r.int(12), r.float(13)))
            except ValueError as exc:
                r.fail(str(exc), InvariantViolation)
        else:
            raise ParseError(f"unknown record tag {f[0]!r}", path, line)
    try:
        return AlignmentGraph(nodes, edges)
    except ValueError as exc:
        raise InvariantViolation(str(exc), path) from None


# keypoints ---------------------------------------------------------------

def write_annotations(path, annotations):
    rows = [(a.video_id, a.frame_id, a.keypoint_name, float(a.pixel[0]), float(a.pixel[1])) for a in annotations]
    write_records(path, "kp2", rows, columns=("video_id frame_id keypoint_name u v",))


def read_annotations(path):
    _, rows = read_records(path, "kp2")
    out = []
    for line, f in rows:
        r = _Fields(path, line, f, 5)
        out.append(KeypointAnnotation2D(r.str(0), r.str(1), r.str(2), (r.float(3), r.float(4))))
    return out


def write_keypoints3d(path, k, meta=None):
    rows = [(n, *map(float, k.coords[:, i])) for i, n in enumerate(k.names)]
    write_records(path, "kp3", rows, meta, ("name x y z",))


def read_keypoints3d(path):
    meta, rows = read_records(path, "kp3")
    names, cols = [], []
    for line, f in rows:
        r = _Fields(path, line, f, 4)
        names.append(r.str(0))
        cols.append(r.floats(1, 4))
    try:
        return Keypoints3D(names, np.array(cols).reshape(-1, 3).T), meta
    except ValueError as exc:
        raise InvariantViolation(str(exc), path) from None


# narration, detections, saliency ---------------------------------------------

def write_narration(path, segments):
    rows = [(s.video_id, ",".join(s.frame_ids), s.text) for s in segments]
    write_records(path, "nar", rows, columns=("video_id frame_ids(comma-separated, temporal order) text",))


def read_narration(path):
    _, rows = read_records(path, "nar")
    out = []
    for line, f in rows:
        r = _Fields(path, line, f, 3)
        try:
            out.append(NarrationSegment(r.str(0), r.str(2), tuple(x for x in r.str(1).split(",") if x)))
        except InvariantViolation as exc:
            r.fail(str(exc), InvariantViolation)
    return out


def write_detections(path, detections):
    rows = [(vid, d.frame_id, float(d.pixel[0]), float(d.pixel[1]), float(d.confidence))
            for vid, dets in sorted(detections.items()) for d in dets]
    write_records(path, "det", rows, columns=("video_id frame_id u v confidence",))


def read_detections(path):
    _, rows = read_records(path, "det")
    out = {}
    for line, f in rows:
        r = _Fields(path, line, f, 5)
        try:
            out.setdefault(r.str(0), []).append(Detection2D(r.str(1), (r.float(2), r.float(3)), r.float(4)))
        except InvariantViolation as exc:
            r.fail(str(exc), InvariantViolation)
    return out


def write_saliency(path, maps):
    rows = [(m.frame_id, m.grid.shape[0], m.grid.shape[1], *map(float, m.grid.ravel())) for m in maps]
    write_records(path, "sal", rows, columns=("frame_id rows cols scores(row-major)",))


def read_saliency(path):
    _, rows = read_records(path, "sal")
    out = {}
    for line, f in rows:
        r = _Fields(path, line, f, at_least=4)
        h, w = r.int(1), r.int(2)
        if len(f) != 3 + h * w:
            r.fail(f"expected {h * w} scores, found {len(f) - 3}")
        try:
            out[r.str(0)] = SaliencyMap(r.str(0), r.floats(3).reshape(h, w))
        except InvariantViolation as exc:
            r.fail(str(exc), InvariantViolation)
    return out


# grounding ground truth and queries ---------------------------------------------

def write_objects(path, objects):
    """``objects``: ``{model_id: {object_name: xyz}}`` in each model's common frame."""
    rows = [(mid, name, *map(float, xyz)) for mid in sorted(objects) for name, xyz in sorted(objects[mid].items())]
    write_records(path, "obj", rows, columns=("model_id object x y z",))


def read_objects(path):
    _, rows = read_records(path, "obj")
    out = {}
    for line, f in rows:
        r = _Fields(path, line, f, 5)
        out.setdefault(r.str(0), {})[r.str(1)] = r.floats(2, 5)
    return out


def write_queries(path, queries):
    write_records(path, "qry", [(q.model_id, q.object_class, q.text) for q in queries], columns=("model_id object text",))


def read_queries(path, objects=None):
    """Queries; ground-truth points are filled in from ``objects`` when given."""
    _, rows = read_records(path, "qry")
    out = []
    for line, f in rows:
        r = _Fields(path, line, f, 3)
        mid, obj = r.str(0), r.str(1)
        gt = (np.nan, np.nan, np.nan)
        if objects is not None:
            if obj not in objects.get(mid, {}):
                r.fail(f"no ground-truth point for object {obj!r} of model {mid!r}", InvariantViolation)
            gt = tuple(float(v) for v in objects[mid][obj])
        out.append(GroundingQuery(mid, r.str(2), gt, obj))
    return out


# PCK curves and tables ---------------------------------------------------

def write_pck(path, thresholds, series, meta=None):
    """``series``: ordered ``{name: values}`` sharing ``thresholds`` (cm)."""
    names = list(series)
    rows = [(float(t), *(float(series[n][i]) for n in names)) for i, t in enumerate(thresholds)]
    m = {"series": ",".join(names)}
    m.update(meta or {})
    write_records(path, "pck", rows, m, ("threshold_cm " + " ".join(names),))


def read_pck(path):
    meta, rows = read_records(path, "pck")
    names = [n for n in meta.get("series", "").split(",") if n]
    arr = np.array([_Fields(path, line, f, 1 + len(names)).floats(0) for line, f in rows]).reshape(-1, 1 + len(names))
    return {n: PckCurve(arr[:, 0], arr[:, 1 + i]) for i, n in enumerate(names)}, meta


def write_class_table(path, table, threshold_cm):
    rows = [(obj, float(chance), float(method)) for obj, chance, method in table]
    write_records(path, "classpck", rows, {"threshold_cm": fmt(threshold_cm)}, ("object chance method",))


def read_class_table(path):
    meta, rows = read_records(path, "classpck")
    return [(f[0], float(f[1]), float(f[2])) for _, f in rows], float(meta["threshold_cm"])


# grounding checkpoints ---------------------------------------------------

_GMOD_MAGIC = b"N3DGMOD\x00"


def _grid_to_json(g):
    return {"bbox_min": [float(v) for v in g.bbox_min], "bbox_max": [float(v) for v in g.bbox_max],
            "divisions": g.divisions, "active": [int(v) for v in g.active_voxels]}


def write_checkpoint(path, model):
    rows = sorted(model.rows)
    models = []
    for mid in sorted(model.heads):
        W, _ = model.heads[mid]
        entry = {"id": mid, "n_voxels": int(W.shape[1])}
        if mid in model.grids:
            entry["grid"] = _grid_to_json(model.grids[mid])
        models.append(entry)
    header = {
        "format_version": FORMAT_VERSION, "buckets": model.buckets, "dim": model.dim, "seed": model.seed,
        "init_std": float(model.init_std), "rows": rows, "models": models,
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [_GMOD_MAGIC, struct.pack("<I", len(hb)), hb]
    if rows:
        parts.append(np.ascontiguousarray([model.rows[r] for r in rows], dtype="<f8").tobytes())
    for mid in sorted(model.heads):
        W, b = model.heads[mid]
        parts.append(np.ascontiguousarray(W, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_checkpoint(path):
    path = Path(path)
    if not path.is_file():
        raise MissingFile(path)
    data = path.read_bytes()
    if not data.startswith(_GMOD_MAGIC):
        raise ParseError("not a grounding checkpoint (bad magic)", path)
    (n,) = struct.unpack_from("<I", data, len(_GMOD_MAGIC))
    off = len(_GMOD_MAGIC) + 4
    try:
        header = json.loads(data[off:off + n].decode("utf-8"))
    except ValueError:
        raise ParseError("corrupt checkpoint header", path) from None
    if header.get("format_version") not in SUPPORTED_VERSIONS:
        raise ParseError(
            f"unsupported format_version {header.get('format_version')}; supported versions: {list(SUPPORTED_VERSIONS)}", path
        )
    off += n
    d = header["dim"]
    model = GroundingModel(header["buckets"], d, header["seed"], header["init_std"])

    def take(count):
        nonlocal off
        if off + 8 * count > len(data):
            raise ParseError("checkpoint is truncated", path)
        arr = np.frombuffer(data, "<f8", count, off).astype(float)
        off += 8 * count
        return arr

    rows = header["rows"]
    if rows:
        R = take(len(rows) * d).reshape(len(rows), d)
        model.rows = {int(r): R[i].copy() for i, r in enumerate(rows)}
    for m in header["models"]:
        nv = m["n_voxels"]
        W = take(d * nv).reshape(d, nv)
        b = take(nv)
        model.heads[m["id"]] = (W, b)
        if "grid" in m:
            g = m["grid"]
            model.grids[m["id"]] = VoxelGrid(g["bbox_min"], g["bbox_max"], g["divisions"], g["active"])
    if off != len(data):
        raise ParseError("trailing bytes after checkpoint payload", path)
    return model


# registration ------------------------------------------------------------

def write_registration(path, reg):
    rows = []
    for vid in sorted(reg.transforms):
        T = reg.transforms[vid]
        rows.append(("T", vid, float(T.scale), *map(float, T.quaternion()), *map(float, T.translation)))
    rows.extend(("U", vid) for vid in reg.unregistered)
    meta = {"reference": reg.reference}
    if reg.metric_scale is not None:
        meta["metric_scale_cm"] = fmt(reg.metric_scale)
    write_records(path, "reg", rows, meta, ("T video_id scale qw qx qy qz tx ty tz  (maps video frame into reference frame)", "U video_id"))


def read_registration(path):
    meta, rows = read_records(path, "reg")
    if "reference" not in meta:
        raise ParseError("registration lacks a reference", path, 1)
    transforms, unregistered = {}, []
    for line, f in rows:
        if f[0] == "T":
            r = _Fields(path, line, f, 10)
            try:
                transforms[r.str(1)] = SimilarityTransform3.from_quaternion(r.float(2), r.floats(3, 7), r.floats(7, 10))
            except ValueError as exc:
                r.fail(str(exc), InvariantViolation)
        elif f[0] == "U":
            unregistered.append(_Fields(path, line, f, 2).str(1))
        else:
            raise ParseError(f"unknown record tag {f[0]!r}", path, line)
    ms = float(meta["metric_scale_cm"]) if "metric_scale_cm" in meta else None
    return Registration(meta["reference"], transforms, unregistered, ms)
