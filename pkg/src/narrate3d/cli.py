"""Command-line front end.

Exit codes: 0 on success, 1 for bad input (usage, missing or malformed
files, invalid configuration), 2 for internal failures. ``--log PATH``
writes one JSON object per line describing what each stage did.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import grounding as gr
from . import pipeline as pl
from .errors import InputError, InvalidConfig, PreconditionError
from .geometry import SimilarityTransform3
from .io import formats
from .io.dataset import load_dataset
from .io.synthetic import SyntheticSceneConfig, generate_synthetic_scene, write_scene


class UsageError(InputError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


class EventLog:
    """JSON-lines event stream; a no-op without a path."""

    def __init__(self, path=None):
        self._fh = open(path, "w", encoding="utf-8") if path else None

    def __call__(self, event, **fields):
        if self._fh:
            self._fh.write(json.dumps({"event": event, **fields}, sort_keys=True, default=_jsonable) + "\n")

    def close(self):
        if self._fh:
            self._fh.close()


def _jsonable(x):
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, np.ndarray):
        return x.tolist()
    return str(x)


def _read_json(path):
    p = Path(path)
    if not p.is_file():
        raise InputError(f"missing config file: {p}")
    try:
        return json.loads(p.read_text(encoding="utf-8"))
    except ValueError as exc:
        raise InvalidConfig(f"{p}: not valid JSON: {exc}") from None


def pipeline_config(args):
    d = _read_json(args.config) if getattr(args, "config", None) else {}
    for key in ("seed", "threads", "reference", "output"):
        v = getattr(args, key, None)
        if v is not None:
            d[key] = v
    if getattr(args, "manifest", None):
        d["manifest"] = list(args.manifest)
    if getattr(args, "no_flow", False):
        d["use_flow"] = False
    return pl.PipelineConfig.from_dict(d)


def _load(cfg, single=True):
    if not cfg.manifest:
        raise UsageError("--manifest is required")
    if single and len(cfg.manifest) != 1:
        raise UsageError("this command takes exactly one --manifest")
    return [load_dataset(m, cfg.ingest) for m in cfg.manifest]


def _say(msg):
    print(msg, flush=True)


# commands ----------------------------------------------------------------

def cmd_synth(args, log):
    d = _read_json(args.config) if args.config else {}
    if args.seed is not None:
        d["seed"] = args.seed
    if "transforms" in d and d["transforms"] is not None:
        d["transforms"] = [SimilarityTransform3.from_quaternion(t["scale"], t["quaternion"], t["translation"]) for t in d["transforms"]]
    for k in ("narration_templates", "query_templates"):
        if k in d:
            d[k] = tuple(d[k])
    try:
        cfg = SyntheticSceneConfig(**d)
    except TypeError as exc:
        raise InvalidConfig(str(exc)) from None
    scene = generate_synthetic_scene(cfg)
    manifest = write_scene(scene, args.output or "synthetic")
    log("synth", manifest=str(manifest), videos=len(scene.dataset.video_ids), seed=cfg.seed)
    _say(f"wrote {manifest}")
    return 0


def cmd_match(args, log):
    cfg = pipeline_config(args)
    (ds,) = _load(cfg)
    res = pl.run_matching(ds, cfg)
    pl.write_match_outputs(cfg.output, res)
    for va, vb, fa, fb, sim, raw, kept in res.stats:
        ratio = kept / raw if raw else 0.0
        log("match_pair", video_a=va, video_b=vb, frame_a=fa, frame_b=fb, similarity=sim, raw=raw, kept=kept)
        _say(f"{fa} <-> {fb}: {kept}/{raw} matches kept ({100 * ratio:.1f}%)")
    _say(f"overall retention {100 * res.retention():.1f}%")
    return 0


def _alignment(ds, cfg, args, log):
    if getattr(args, "matches", None):
        sets = formats.read_matches(args.matches)
    else:
        sets = pl.run_matching(ds, cfg).filtered
    res = pl.run_alignment(ds, sets, cfg)
    for e in res.graph.edges:
        log("edge", from_id=e.from_id, to_id=e.to_id, inliers=e.inlier_count, total=e.total_count, rms=e.inlier_rms)
    for (a, b), f in sorted(res.graph.failures.items()):
        log("edge_failed", from_id=a, to_id=b, reason=f.reason, total=f.total_count, inliers=f.inlier_count)
    return res


def cmd_align(args, log):
    cfg = pipeline_config(args)
    (ds,) = _load(cfg)
    res = _alignment(ds, cfg, args, log)
    pl.write_align_outputs(cfg.output, res)
    g, reg = res.graph, res.registration
    for e in g.edges:
        _say(f"edge {e.from_id} -> {e.to_id}: {e.inlier_count}/{e.total_count} inliers, rms {e.inlier_rms:.3g}")
    for (a, b), f in sorted(g.failures.items()):
        _say(f"no edge {a} - {b}: {f.reason} ({f.detail})")
    _say(f"registered {len(reg.transforms)}/{len(g.nodes)} reconstructions to {reg.reference}")
    if reg.unregistered:
        _say("unregistered: " + ", ".join(reg.unregistered))
    log("registration", reference=reg.reference, registered=sorted(reg.transforms), unregistered=reg.unregistered)
    return 0


def _graph(ds, cfg, args, log):
    if getattr(args, "graph", None):
        return formats.read_graph(args.graph)
    return _alignment(ds, cfg, args, log).graph


def cmd_transfer(args, log):
    cfg = pipeline_config(args)
    (ds,) = _load(cfg)
    graph = _graph(ds, cfg, args, log)
    anns = formats.read_annotations(args.annotations) if args.annotations else None
    res = pl.run_transfer(ds, graph, args.source, cfg, args.target or None, anns)
    pl.write_transfer_outputs(cfg.output, res)
    for name, err in sorted(res.report.reprojection_error.items()):
        log("triangulated", keypoint=name, reprojection_px=err)
    for name, why in sorted(res.report.omitted.items()):
        log("keypoint_omitted", keypoint=name, reason=why)
    for t in sorted(res.transferred):
        log("transferred", target=t, keypoints=len(res.transferred[t].names))
    for t, why in sorted(res.omitted.items()):
        log("target_unreachable", target=t, reason=why)
        _say(f"{t}: unreachable ({why})")
    _say(f"transferred {len(res.source_keypoints.names)} keypoints from {args.source} to {len(res.transferred)} videos")
    return 0


def _read_kp_dir(path):
    out, source = {}, None
    for p in sorted(Path(path).glob("keypoints_*.kp3")):
        k, meta = formats.read_keypoints3d(p)
        out[meta.get("video_id", p.stem[len("keypoints_"):])] = k
        source = meta.get("source", source)
    return out, source


def cmd_eval_pck(args, log):
    cfg = pipeline_config(args)
    (ds,) = _load(cfg)
    preds, source = _read_kp_dir(args.predictions)
    source = args.source or source
    if source is None or source not in preds:
        raise InputError("cannot tell the source video; pass --source")
    if args.gt:
        gt, _ = _read_kp_dir(args.gt)
        gt.pop(source, None)
        skipped = {}
    else:
        gt, skipped = pl.ground_truth_keypoints(ds, source, preds[source], cfg)
    preds = {k: v for k, v in preds.items() if k != source}
    res = pl.run_eval_pck(ds, preds, gt, cfg)
    pl.write_pck_outputs(cfg.output, res)
    for t, why in sorted({**skipped, **res.skipped}.items()):
        log("pair_skipped", target=t, reason=why)
    for t, c in sorted(res.per_pair.items()):
        log("pair_pck", source=source, target=t, values=c.values)
    mid = res.curve.thresholds[len(res.curve.thresholds) // 2]
    _say(f"mean PCK over {len(res.per_pair)} pairs: {res.curve.at(mid):.3f} at {mid:g} cm")
    return 0


def _grounding_data(cfg, args, log):
    data = []
    for ds in _load(cfg, single=False):
        res = pl.run_alignment(ds, pl.run_matching(ds, cfg).filtered, cfg)
        d = pl.prepare_grounding(ds, res.registration, cfg)
        log("grounding_data", model=d.model_id, pairs=len(d.pairs), voxels=d.grid.n_voxels, dropped=d.dropped)
        data.append((ds, res.registration, d))
    return data


def cmd_ground(args, log):
    cfg = pipeline_config(args)
    out = Path(cfg.output)
    if args.ground_cmd == "train":
        data = [d for _, _, d in _grounding_data(cfg, args, log)]
        model, hist = pl.train_models(data, cfg)
        out.mkdir(parents=True, exist_ok=True)
        formats.write_checkpoint(out / "grounding.gmod", model)
        pl.write_training_summary(out, data, hist)
        for i, l in enumerate(hist.epoch_mean_loss):
            log("epoch", epoch=i, mean_loss=l)
        for d in data:
            _say(f"{d.model_id}: {len(d.pairs)} training pairs over {d.grid.n_voxels} voxels")
        _say(f"mean loss {hist.epoch_mean_loss[0]:.4f} -> {hist.epoch_mean_loss[-1]:.4f}")
        return 0

    model = formats.read_checkpoint(args.checkpoint)
    if args.ground_cmd == "query":
        if args.model not in model.heads:
            raise InputError(f"checkpoint has no model {args.model!r}")
        scores, best = gr.ground_query(model, args.model, args.text)
        if pl.query_is_uniform(scores):
            log("warning", message="uniform scores: the model head is untrained")
            print("warning: uniform scores; this model head looks untrained", file=sys.stderr)
        grid = model.grids[args.model]
        order = np.argsort(-scores, kind="stable")[: args.top]
        rows = [(int(i), float(scores[i]), *map(float, grid.center(int(i)))) for i in order]
        out.mkdir(parents=True, exist_ok=True)
        formats.write_records(out / "query.tsv", "query", rows, {"model_id": args.model, "text": args.text},
                              ("voxel score x y z",))
        _say(f"best voxel {int(order[0])} at ({best[0]:.4g}, {best[1]:.4g}, {best[2]:.4g})")
        return 0

    # eval
    dss = _load(cfg, single=False)
    queries, scales = [], {}
    for ds in dss:
        if not ds.queries:
            raise PreconditionError(f"dataset {ds.name!r} has no grounding queries")
        queries.extend(ds.queries)
        ref = pl.reference_of(ds, cfg)
        scales[ds.name] = cfg.metric_scale if cfg.metric_scale is not None else ds.metric_scales.get(ref)
        if scales[ds.name] is None:
            raise PreconditionError(f"no metric scale for the reference of {ds.name!r}")
    ev = gr.evaluate_grounding_pck(queries, model, None, cfg.thresholds_cm, scales, cfg.table_threshold_cm, cfg.seed)
    out.mkdir(parents=True, exist_ok=True)
    formats.write_pck(out / "grounding.pck", ev.curve.thresholds, {"method": ev.curve.values, "chance": ev.chance_curve.values},
                      {"queries": str(len(queries))})
    formats.write_class_table(out / "grounding_classes.classpck", ev.class_table, ev.table_threshold_cm)
    _say(f"{'object':<28}{'chance':>8}{'method':>8}")
    for obj, c, m in ev.class_table:
        _say(f"{obj:<28}{c:>8.2f}{m:>8.2f}")
    log("grounding_eval", queries=len(queries), table=ev.class_table)
    return 0


# parser ------------------------------------------------------------------

def _common(p, manifest=True, multi=False):
    if manifest:
        p.add_argument("--manifest", action="append", help="dataset manifest" + (" (repeatable)" if multi else ""))
    p.add_argument("--config", help="JSON config file; flags override it")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--reference", help="reference video id (default: first in sorted order)")
    p.add_argument("--output", help="output directory")
    p.add_argument("--log", help="write a JSON-lines event log here")


def build_parser():
    p = _Parser(prog="narrate3d", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="cmd", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("synth", help="write a synthetic dataset with ground truth")
    _common(s, manifest=False)

    s = sub.add_parser("match", help="retrieve frame pairs, match and flow-filter")
    _common(s)
    s.add_argument("--no-flow", action="store_true", help="skip flow filtering")

    s = sub.add_parser("align", help="build the alignment graph and register to a reference")
    _common(s)
    s.add_argument("--matches", help="filtered .m2d file (default: run matching)")
    s.add_argument("--no-flow", action="store_true")

    s = sub.add_parser("transfer", help="triangulate and transfer keypoints")
    _common(s)
    s.add_argument("--source", required=True)
    s.add_argument("--target", action="append", help="restrict to these targets (repeatable)")
    s.add_argument("--annotations", help=".kp2 file (default: the manifest's annotations)")
    s.add_argument("--graph", help=".agr file (default: run matching and alignment)")
    s.add_argument("--matches")
    s.add_argument("--no-flow", action="store_true")

    s = sub.add_parser("evaluate-pck", help="score transferred keypoints")
    _common(s)
    s.add_argument("--predictions", required=True, help="directory written by 'transfer'")
    s.add_argument("--gt", help="directory of ground-truth .kp3 files (default: fit from annotations)")
    s.add_argument("--source")

    g = sub.add_parser("ground", help="train, query or evaluate text grounding")
    gsub = g.add_subparsers(dest="ground_cmd", parser_class=_Parser)
    gsub.required = True
    s = gsub.add_parser("train")
    _common(s, multi=True)
    s.add_argument("--no-flow", action="store_true")
    s = gsub.add_parser("query")
    _common(s, manifest=False)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--text", required=True)
    s.add_argument("--top", type=int, default=10)
    s = gsub.add_parser("eval")
    _common(s, multi=True)
    s.add_argument("--checkpoint", required=True)
    return p


COMMANDS = {"synth": cmd_synth, "match": cmd_match, "align": cmd_align, "transfer": cmd_transfer,
            "evaluate-pck": cmd_eval_pck, "ground": cmd_ground}


def main(argv=None):
    log = EventLog()
    try:
        args = build_parser().parse_args(argv)
        log = EventLog(args.log)
        log("start", command=args.cmd if args.cmd != "ground" else f"ground {args.ground_cmd}")
        code = COMMANDS[args.cmd](args, log)
        log("done", exit_code=code)
        return code
    except InputError as exc:
        log("error", kind=type(exc).__name__, message=str(exc), exit_code=1)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - every other failure is an internal error
        log("internal_error", kind=type(exc).__name__, message=str(exc), exit_code=2)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    finally:
        log.close()


if __name__ == "__main__":
    sys.exit(main())
