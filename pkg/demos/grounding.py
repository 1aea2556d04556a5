"""
Grounding narration in 3D
=========================

Two object models, each reconstructed from two videos. Narration
segments mention one of six parts, and the narrated part sits near the
middle of the frame. Backprojecting the frame center to the surface gives
a noisy 3D label; a shared text encoder with one softmax head per model
learns to map the words to voxels.
"""

import numpy as np

from narrate3d import grounding as gr
from narrate3d import pipeline as pl
from narrate3d.io.synthetic import SyntheticSceneConfig, generate_synthetic_scene

cfg = pl.PipelineConfig(surface_radius_px=15)
data, queries = [], []
for m in range(2):
    sc = generate_synthetic_scene(SyntheticSceneConfig(seed=100 + m, name=f"make{m}", n_models=2,
                                                       points_per_model=2000, segments_per_model=200))
    reg = pl.run_alignment(sc.dataset, pl.run_matching(sc.dataset, cfg).filtered, cfg).registration
    d = pl.prepare_grounding(sc.dataset, reg, cfg)
    print(f"{d.model_id}: {len(d.pairs)} pairs over {d.grid.n_voxels} voxels, dropped {d.dropped}")
    data.append(d)
    queries += sc.dataset.queries

model, hist = pl.train_models(data, cfg)
print("mean loss per epoch:", np.round(hist.epoch_mean_loss[::5], 3))

# %%
# Queries use different phrasings from the training narration.
q = queries[0]
scores, p = gr.ground_query(model, q.model_id, q.text)
print(f"{q.text!r}: best voxel at {np.round(p, 3)}, truth {np.round(q.gt_point, 3)}, "
      f"top score {scores.max():.3f} of {len(scores)}")

scales = {d.model_id: d.metric_scale for d in data}
ev = gr.evaluate_grounding_pck(queries, model, None, [5, 10, 20, 30], scales)
print(f"{'object':<22}{'chance':>8}{'method':>8}   (within {ev.table_threshold_cm:g} cm)")
for obj, c, v in ev.class_table:
    print(f"{obj:<22}{c:8.2f}{v:8.2f}")
