import numpy as np
import pytest
from hypothesis import given, strategies as st

from narrate3d import grounding as gr
from narrate3d.errors import (
    EmptyPointCloud,
    EmptyTrainingSet,
    LabelOutOfRange,
    MissingStrategyInput,
    UnknownModelId,
)
from narrate3d.geometry import CameraModel, SimilarityTransform3
from narrate3d.reconstruction import Reconstruction

seeds = st.integers(0, 2**32 - 1)


def tiny_model(rng, d=8, n_v=5, n_models=2):
    m = gr.GroundingModel(buckets=64, dim=d, seed=int(rng.integers(1000)))
    for k in range(n_models):
        m.add_head(f"m{k}", n_v)
        W, b = m.heads[f"m{k}"]
        W += rng.normal(size=W.shape)
        b += rng.normal(size=b.shape)
    vocab = [f"w{i}" for i in range(10)]
    pairs = {f"m{k}": [gr.TrainingPair(" ".join(rng.choice(vocab, int(rng.integers(1, 5)))), int(rng.integers(n_v)), "center_of_frame", (0.0, 0.0, 0.0))
                       for _ in range(6)] for k in range(n_models)}
    s = gr.canonical_samples(m, pairs)
    m.ensure_rows(sorted({r for rows in s.token_rows for r in rows}))
    return m, s


def numeric_loss(model, samples):
    return gr.loss_and_grads(model, samples)[0]


class TestVoxelGrid:
    def test_single_division(self, rng):
        g = gr.build_voxel_grid(rng.normal(size=(20, 3)), 1, rng.normal(size=(5, 3)) * 0.1, 500)
        assert g.n_voxels == 1
        assert g.label_of(np.zeros((1, 3)))[0] == 0

    def test_histogram_oracle_top_n(self, rng):
        pts = rng.uniform(0, 1, size=(20000, 3))
        pts[0], pts[1] = 0.0, 1.0
        train = rng.uniform(0, 1, size=(3000, 3)) ** 2
        g = gr.build_voxel_grid(pts, 20, train, 500)
        # independent count: integer binning with the top edge folded into the last bin
        lo, hi = g.bbox_min, g.bbox_max
        cells = np.clip(np.floor((train - lo) / (hi - lo) * 20).astype(int), 0, 19)
        counts = np.zeros(8000, int)
        for c in cells:
            counts[c[0] * 400 + c[1] * 20 + c[2]] += 1
        ranked = sorted(range(8000), key=lambda f: (-counts[f], f))[:500]
        np.testing.assert_array_equal(g.active_voxels, sorted(ranked))
        assert g.n_voxels == 500 and gr.DEFAULT_N_VOXELS == 500 and 20 ** 3 == 8000

    def test_boundaries(self):
        g = gr.VoxelGrid([0, 0, 0], [2, 2, 2], 2, np.arange(8))
        assert g.flat_index([[1.0, 0, 0]])[0] == 4  # lower edge of the second bin
        assert g.flat_index([[2.0, 2.0, 2.0]])[0] == 7  # top edge folds into the last bin
        assert g.label_of([[2.0001, 0, 0]])[0] == -1
        g2 = gr.VoxelGrid([0, 0, 0], [2, 2, 2], 2, [0])
        assert g2.label_of([[1.5, 1.5, 1.5]])[0] == -2

    def test_empty(self):
        with pytest.raises(EmptyPointCloud):
            gr.build_voxel_grid(np.zeros((0, 3)))

    @given(seeds)
    def test_points_inside_labeled_voxel(self, seed):
        rng = np.random.default_rng(seed)
        pts = rng.normal(size=(300, 3))
        g = gr.build_voxel_grid(pts, 5, pts[:100], 40)
        for p, lab in zip(pts, g.label_of(pts)):
            if lab >= 0:
                lo, hi = g.voxel_bounds(lab)
                assert np.all(p >= lo - 1e-12) and np.all(p <= hi + 1e-12)


class TestAnchors:
    cam = CameraModel.simple(500, 640, 480)

    def test_center(self):
        seg = gr.NarrationSegment("v", "text", ("f",))
        np.testing.assert_array_equal(gr.select_anchor(seg, gr.CENTER_OF_FRAME, self.cam), [320, 240])

    def test_hand(self):
        seg = gr.NarrationSegment("v", "text", ("f",))
        dets = [gr.Detection2D("f", (10.0, 20.0), 0.4), gr.Detection2D("f", (100.0, 200.0), 0.9), gr.Detection2D("g", (5.0, 5.0), 1.0)]
        np.testing.assert_array_equal(gr.select_anchor(seg, gr.HAND_DETECTOR, self.cam, "f", dets), [100, 200])
        assert gr.select_anchor(seg, gr.HAND_DETECTOR, self.cam, "f", []) is None
        with pytest.raises(MissingStrategyInput):
            gr.select_anchor(seg, gr.HAND_DETECTOR, self.cam, "f", None)

    def test_saliency_cell_center(self):
        seg = gr.NarrationSegment("v", "text", ("f",))
        grid = np.zeros((8, 14))
        grid[5, 9] = 3.0
        grid[6, 2] = 3.0  # tie resolves to the lower flat index (5, 9)
        px = gr.select_anchor(seg, gr.SALIENCY_ARGMAX, self.cam, "f", saliency=gr.SaliencyMap("f", grid))
        np.testing.assert_allclose(px, [(9 + 0.5) * 640 / 14, (5 + 0.5) * 480 / 8])
        with pytest.raises(MissingStrategyInput):
            gr.select_anchor(seg, gr.SALIENCY_ARGMAX, self.cam, "f")

    def test_backproject_single_and_occluded(self):
        p = gr.backproject_to_surface((320, 240), self.cam, [[0, 0, 5.0], [0, 0, 1.0], [3, 0, 1.0]])
        np.testing.assert_array_equal(p, [0, 0, 1.0])
        assert gr.backproject_to_surface((10, 10), self.cam, [[0, 0, 1.0]], 5) is None

    def test_backproject_against_ray_oracle(self, rng):
        # dense plane at z=2: the closest point to the viewing ray is within the plane sampling noise
        xy = rng.uniform(-1, 1, size=(40000, 2))
        cloud = np.column_stack([xy, np.full(len(xy), 2.0)])
        for _ in range(20):
            px = rng.uniform([100, 100], [540, 380])
            P = gr.backproject_to_surface(px, self.cam, cloud, 5.0)
            d = np.linalg.solve(self.cam.intrinsics, [px[0], px[1], 1.0])
            d /= np.linalg.norm(d)
            dist = np.linalg.norm(cloud - np.outer(cloud @ d, d), axis=1)
            best = cloud[np.argmin(dist)]
            assert np.linalg.norm(P - best) < 0.05

    def test_representative_frame_midpoint(self):
        seg = gr.NarrationSegment("v", "t", ("a", "b", "c", "d", "e"))
        assert seg.representative_frame({"a", "b", "c", "d", "e"}) == "c"
        assert seg.representative_frame({"a", "e"}) == "a"
        assert seg.representative_frame(set()) is None


class TestTrainingPairs:
    def _setup(self):
        cam = CameraModel.look_at(np.array([[500.0, 0, 320], [0, 500, 240], [0, 0, 1]]), [0, 0, 3], [0, 0, 0], 640, 480, up=(0, 1, 0))
        rec = Reconstruction("v", [0], np.zeros((1, 3)), {"f": cam, "g": cam})
        return rec

    def test_single_pair_and_drops(self, rng):
        rec = self._setup()
        cloud = np.array([[0.0, 0, 0], [0.5, 0.5, 0.1], [-0.5, -0.5, -0.1]])
        T = SimilarityTransform3.identity()
        segs = [gr.NarrationSegment("v", "the air filter", ("f",)), gr.NarrationSegment("w", "x", ("f",)),
                gr.NarrationSegment("v", "nothing", ("zz",))]
        anchors = gr.compute_anchors(segs, gr.CENTER_OF_FRAME, {"v": rec}, {"v": T}, cloud)
        grid = gr.build_voxel_grid(cloud, 4, [a.point for a in anchors if a.point is not None], 2)
        pairs, dropped = gr.generate_training_pairs(anchors, gr.CENTER_OF_FRAME, grid)
        assert len(pairs) == 1 and pairs[0].text == "the air filter"
        assert pairs[0].voxel_label == grid.label_of([[0, 0, 0]])[0] >= 0
        assert dropped["unregistered"] == 1 and dropped["no_frame"] == 1

    def test_outside_bbox(self):
        rec = self._setup()
        cloud = np.array([[0.0, 0, 0]])
        anchors = gr.compute_anchors([gr.NarrationSegment("v", "t", ("f",))], gr.CENTER_OF_FRAME, {"v": rec},
                                     {"v": SimilarityTransform3.identity()}, cloud)
        grid = gr.VoxelGrid([1, 1, 1], [2, 2, 2], 2, [0])
        pairs, dropped = gr.generate_training_pairs(anchors, gr.CENTER_OF_FRAME, grid)
        assert not pairs and dropped["outside_bbox"] == 1

    def test_missing_inputs(self):
        with pytest.raises(MissingStrategyInput):
            gr.compute_anchors([], gr.SALIENCY_ARGMAX, {}, {}, np.zeros((1, 3)))

    def test_planted_scene_labels(self):
        # narrated objects land in the voxel of their planted object point
        from narrate3d import pipeline as pl
        from narrate3d.io.synthetic import SyntheticSceneConfig, generate_synthetic_scene

        sc = generate_synthetic_scene(SyntheticSceneConfig(seed=11, n_models=2, points_per_model=2000, segments_per_model=120,
                                                           misaligned_fraction=0.0, name="mk"))
        cfg = pl.PipelineConfig(surface_radius_px=15)
        reg = pl.run_alignment(sc.dataset, pl.run_matching(sc.dataset, cfg).filtered, cfg).registration
        d = pl.prepare_grounding(sc.dataset, reg, cfg)
        by_text = {s.text: o for s, o in zip(sc.dataset.narration, sc.segment_objects)}
        hits = []
        for p in d.pairs:
            obj_pt = sc.truth.objects[by_text[p.text]]
            hits.append(np.linalg.norm(d.grid.center(p.voxel_label) - obj_pt) <= 1.5 * d.grid.voxel_diagonal)
            lo, hi = d.grid.voxel_bounds(p.voxel_label)
            assert np.all(np.asarray(p.world_point) >= lo - 1e-12) and np.all(np.asarray(p.world_point) <= hi + 1e-12)
        assert np.mean(hits) >= 0.95


class TestModel:
    def test_tokenize_and_bucket(self):
        assert gr.tokenize("Check the AIR-filter, now!") == ["check", "the", "air", "filter", "now"]
        assert gr.token_bucket("air", 2 ** 15) == gr.token_bucket("air", 2 ** 15) < 2 ** 15

    @given(seeds, st.text(max_size=30))
    def test_scores_are_distribution(self, seed, text):
        rng = np.random.default_rng(seed)
        m, _ = tiny_model(rng)
        s = m.scores("m0", [text])[0]
        assert np.all(s >= 0) and abs(s.sum() - 1) < 1e-9

    def test_untrained_is_uniform(self):
        m = gr.GroundingModel(64, 8)
        g = gr.VoxelGrid([0, 0, 0], [1, 1, 1], 2, [1, 3, 6])
        m.add_head("x", 3, g)
        scores, p = gr.ground_query(m, "x", "where is it")
        np.testing.assert_allclose(scores, 1 / 3)
        np.testing.assert_array_equal(p, g.center(0))
        with pytest.raises(UnknownModelId):
            gr.ground_query(m, "y", "a")

    @pytest.mark.parametrize("seed", range(50))
    def test_gradients_match_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        m, s = tiny_model(rng)
        _, hg, rg = gr.loss_and_grads(m, s)
        h = 1e-5
        checks = []
        for mid, (W, b) in m.heads.items():
            for arr, g in ((W, hg[mid][0]), (b, hg[mid][1])):
                for _ in range(4):
                    i = tuple(rng.integers(n) for n in arr.shape)
                    old = arr[i]
                    arr[i] = old + h
                    lp = numeric_loss(m, s)
                    arr[i] = old - h
                    lm = numeric_loss(m, s)
                    arr[i] = old
                    checks.append(((lp - lm) / (2 * h), g[i]))
        for r in sorted(rg)[:4]:
            j = int(rng.integers(m.dim))
            old = m.rows[r][j]
            m.rows[r][j] = old + h
            lp = numeric_loss(m, s)
            m.rows[r][j] = old - h
            lm = numeric_loss(m, s)
            m.rows[r][j] = old
            checks.append(((lp - lm) / (2 * h), rg[r][j]))
        for num, ana in checks:
            assert abs(num - ana) <= 1e-4 * max(abs(num), abs(ana), 1e-3)

    def test_initial_loss_is_log_nv(self, rng):
        pairs = {"a": [gr.TrainingPair(f"t{i}", i % 7, "center_of_frame", (0, 0, 0)) for i in range(30)]}
        _, hist = gr.train_grounding(pairs, {"a": 7}, gr.TrainConfig(dim=16, epochs=0))
        assert hist.epoch_mean_loss[0] == pytest.approx(np.log(7), abs=1e-12)

    def test_separable_reaches_full_accuracy(self):
        pairs = {"a": [gr.TrainingPair("red apple", 0, "center_of_frame", (0, 0, 0))] * 10
                 + [gr.TrainingPair("blue sky", 1, "center_of_frame", (0, 0, 0))] * 10}
        m, hist = gr.train_grounding(pairs, {"a": 2}, gr.TrainConfig(dim=16, epochs=200, batch_size=8))
        pred = np.argmax(m.logits("a", ["red apple", "blue sky"]), axis=1)
        np.testing.assert_array_equal(pred, [0, 1])
        losses = np.array(hist.epoch_loss)
        assert np.all(np.diff(losses) <= hist.loss_tolerance)

    def test_order_invariance(self, rng):
        ps = [gr.TrainingPair(f"w{i % 5} v{i % 3}", i % 4, "center_of_frame", (float(i), 0.0, 0.0)) for i in range(40)]
        cfg = gr.TrainConfig(dim=8, epochs=3, batch_size=7)
        m1, _ = gr.train_grounding({"a": ps}, {"a": 4}, cfg)
        m2, _ = gr.train_grounding({"a": [ps[i] for i in rng.permutation(40)]}, {"a": 4}, cfg)
        assert np.array_equal(m1.heads["a"][0], m2.heads["a"][0])
        assert all(np.array_equal(m1.rows[r], m2.rows[r]) for r in m1.rows)

    def test_errors(self):
        with pytest.raises(EmptyTrainingSet):
            gr.train_grounding({"a": []}, {"a": 3})
        with pytest.raises(LabelOutOfRange):
            gr.train_grounding({"a": [gr.TrainingPair("x", 3, "center_of_frame", (0, 0, 0))]}, {"a": 3})


class TestEvaluation:
    def _model(self):
        m = gr.GroundingModel(64, 8)
        g = gr.VoxelGrid([0, 0, 0], [1, 1, 1], 2, [0, 7])
        m.add_head("x", 2, g)
        return m, g

    def test_perfect_queries(self):
        m, g = self._model()
        q = [gr.GroundingQuery("x", "anything", tuple(g.center(0)), "obj")]
        ev = gr.evaluate_grounding_pck(q, m, None, [1, 2], {"x": 10.0})
        np.testing.assert_array_equal(ev.curve.values, 1.0)
        assert ev.class_table[0][0] == "obj" and ev.class_table[-1][0] == "Average"

    def test_chance_deterministic_and_uniform(self):
        m, g = self._model()
        q = [gr.GroundingQuery("x", "a", (0.0, 0.0, 0.0), "obj")] * 5
        a = gr.evaluate_grounding_pck(q, m, None, [1, 50], {"x": 100.0}, seed=3)
        b = gr.evaluate_grounding_pck(q, m, None, [1, 50], {"x": 100.0}, seed=3)
        np.testing.assert_array_equal(a.chance_distances_cm, b.chance_distances_cm)
        big = gr.VoxelGrid([0, 0, 0], [1, 1, 1], 4, np.arange(0, 64, 3))
        draws = gr.chance_points(big, 1, 100_000)
        labels = big.label_of(draws)
        counts = np.bincount(labels, minlength=big.n_voxels)
        expected = 100_000 / big.n_voxels
        chi2 = ((counts - expected) ** 2 / expected).sum()
        # 21 degrees of freedom: the 0.999 quantile is about 46.8
        assert chi2 < 46.8
        single = gr.VoxelGrid([0, 0, 0], [1, 1, 1], 3, [13])
        np.testing.assert_array_equal(gr.chance_baseline(single, 5), single.center(0))

    def test_unknown_model(self):
        m, _ = self._model()
        with pytest.raises(UnknownModelId):
            gr.evaluate_grounding_pck([gr.GroundingQuery("nope", "a", (0, 0, 0))], m, None, [1], {"nope": 1.0})
