"""
Registering reconstructions and transferring keypoints
======================================================

Five reconstructions of the same object are generated with known
similarity transforms. Only neighbouring models share frames, so most
pairs cannot be aligned directly; the alignment graph fills the gaps by
composing edges.
"""

import numpy as np

from narrate3d import pipeline as pl
from narrate3d.alignment import AlignmentGraph
from narrate3d.geometry import compose, invert, transform_error
from narrate3d.io.synthetic import SyntheticSceneConfig, generate_synthetic_scene

# a chain v0 - v1 - v2 - v3 - v4, plus a pair (v0, v2) sharing only six points
scene = generate_synthetic_scene(
    SyntheticSceneConfig(seed=1, n_models=5, pixel_noise=1.0, outlier_fraction=0.2, low_overlap_pairs=[(0, 2)])
)
ds = scene.dataset
cfg = pl.PipelineConfig()

# %%
# Matching. Retrieval proposes frame pairs, mutual nearest neighbours give
# raw matches and the flow check drops the planted wrong ones.
matches = pl.run_matching(ds, cfg)
for va, vb, fa, fb, sim, raw, kept in matches.stats[:6]:
    print(f"{fa:>12} <-> {fb:<12} similarity {sim:5.2f}  kept {kept:3d}/{raw:3d}")
print(f"overall retention {matches.retention():.1%}")

# %%
# Lift to 3D, fit one similarity per pair and build the graph.
align = pl.run_alignment(ds, matches.filtered, cfg)
for e in align.graph.edges:
    print(f"edge {e.from_id} -> {e.to_id}: {e.inlier_count}/{e.total_count} inliers")
for (a, b), f in sorted(align.graph.failures.items()):
    print(f"no edge {a} - {b}: {f.reason}")

# registration error against the planted transforms (model -> reference)
ref = align.registration.reference
T_ref = scene.truth.transforms[ref]
for v, T in sorted(align.registration.transforms.items()):
    want = compose(T_ref, invert(scene.truth.transforms[v]))
    ds_, dr, dt = transform_error(T, want)
    print(f"{v}: scale {ds_:.1e}  rotation {dr:.1e}  translation {dt:.1e}")

# %%
# Keypoints annotated in v0 are triangulated and carried to every target.
transfer = pl.run_transfer(ds, align.graph, "v0", cfg)
thr = 5 * scene.truth.noise_3d * scene.config.cm_per_unit
cfg_eval = pl.PipelineConfig(thresholds_cm=np.round(np.linspace(0.25, 2, 8) * thr, 3))
gt, _ = pl.ground_truth_keypoints(ds, "v0", transfer.source_keypoints, cfg_eval)
preds = {t: k for t, k in transfer.transferred.items() if t != "v0"}
graph_pck = pl.run_eval_pck(ds, preds, gt, cfg_eval)

# the same, restricted to edges touching v0
direct = AlignmentGraph(align.graph.nodes, [e for e in align.graph.edges if "v0" in (e.from_id, e.to_id)])
dpred = {t: k for t, k in pl.run_transfer(ds, direct, "v0", cfg).transferred.items() if t != "v0"}
direct_pck = pl.run_eval_pck(ds, dpred, gt, cfg_eval)

print(f"{'cm':>8}{'graph':>8}{'direct':>8}")
for t, g, d in zip(graph_pck.curve.thresholds, graph_pck.curve.values, direct_pck.curve.values):
    print(f"{t:8.2f}{g:8.2f}{d:8.2f}")
