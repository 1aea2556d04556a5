import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import all_simple_paths, exhaustive_best_consensus, horn_similarity, reflection_allowed_fit, sq_residual
from narrate3d.alignment import (
    INSUFFICIENT,
    NO_CONSENSUS,
    AlignmentGraph,
    Correspondences3D,
    EdgeEstimate,
    RansacConfig,
    build_alignment_graph,
    fit_similarity_umeyama,
    lift_matches,
    path_transform,
    register_all,
    shortest_path,
    solver_u,
)
from narrate3d.errors import (
    DegenerateConfiguration,
    InvalidConfig,
    NodesDisconnected,
    TooFewPoints,
    UnknownFrame,
    UnknownReference,
)
from narrate3d.geometry import SimilarityTransform3, compose, invert, quaternion_to_matrix, random_rotation, random_similarity
from narrate3d.matching import MatchSet, mutual_nn_match

seeds = st.integers(0, 2**32 - 1)


def planted(rng, n=50, scale=None):
    T = random_similarity(rng) if scale is None else SimilarityTransform3(scale, random_rotation(rng), rng.normal(size=3))
    src = rng.normal(size=(n, 3))
    return T, src, T.apply(src)


class TestUmeyama:
    def test_identity(self, rng):
        p = rng.normal(size=(10, 3))
        T = fit_similarity_umeyama(p, p)
        assert T.allclose(SimilarityTransform3.identity(), 1e-12)

    def test_known_transform(self, rng):
        T0 = SimilarityTransform3(1.7, random_rotation(rng), rng.normal(size=3))
        src = rng.normal(size=(30, 3))
        assert fit_similarity_umeyama(src, T0.apply(src)).allclose(T0, 1e-9)

    @given(seeds, st.integers(3, 60))
    def test_agrees_with_quaternion_oracle(self, seed, n):
        rng = np.random.default_rng(seed)
        T0, src, dst = planted(rng, n)
        T = fit_similarity_umeyama(src, dst)
        s, R, t = horn_similarity(src, dst)
        assert abs(T.scale - s) < 1e-9
        np.testing.assert_allclose(T.rotation, R, atol=1e-9)
        np.testing.assert_allclose(T.translation, t, atol=1e-9)

    @given(seeds)
    def test_mirrored_target_stays_proper(self, seed):
        rng = np.random.default_rng(seed)
        src = rng.normal(size=(40, 3)) * [3, 2, 1]
        dst = src * [1, 1, -1]
        T = fit_similarity_umeyama(src, dst)
        assert np.linalg.det(T.rotation) == pytest.approx(1.0, abs=1e-9)
        s, Q, t = reflection_allowed_fit(src, dst)
        ours = sq_residual(T.scale, T.rotation, T.translation, src, dst)
        assert ours >= sq_residual(s, Q, t, src, dst) - 1e-9

    @given(seeds)
    def test_residual_is_global_minimum(self, seed):
        rng = np.random.default_rng(seed)
        T0, src, dst = planted(rng, 25)
        dst = dst + rng.normal(scale=0.05, size=dst.shape)
        T = fit_similarity_umeyama(src, dst)
        base = sq_residual(T.scale, T.rotation, T.translation, src, dst)
        for _ in range(100):
            R = quaternion_to_matrix(np.append(1.0, rng.normal(scale=0.02, size=3)))
            s = T.scale * (1 + rng.normal(scale=0.01))
            t = T.translation + rng.normal(scale=0.01, size=3)
            assert sq_residual(s, R @ T.rotation, t, src, dst) >= base - 1e-12

    def test_too_few(self):
        with pytest.raises(TooFewPoints):
            fit_similarity_umeyama(np.zeros((2, 3)), np.zeros((2, 3)))

    def test_collinear(self):
        p = np.outer(np.arange(5.0), [1, 2, 3])
        with pytest.raises(DegenerateConfiguration):
            fit_similarity_umeyama(p, p)


class TestSolver:
    def test_noise_free(self, rng):
        T0, src, dst = planted(rng, 50)
        e = solver_u(src, dst, RansacConfig(seed=1))
        assert e and e.inlier_count == 50 and e.total_count == 50
        assert e.transform.allclose(T0, 1e-8)

    @pytest.mark.parametrize("seed", range(5))
    def test_planted_inliers(self, seed):
        rng = np.random.default_rng(seed)
        T0, src, dst = planted(rng, 30)
        lo, hi = dst.min(0), dst.max(0)
        out_src = rng.normal(size=(20, 3))
        out_dst = rng.uniform(lo, hi, size=(20, 3))
        thr = 0.02 * np.linalg.norm(np.vstack([dst, out_dst]).max(0) - np.vstack([dst, out_dst]).min(0))
        keep = np.linalg.norm(out_dst - T0.apply(out_src), axis=1) > 3 * thr
        S, D = np.vstack([src, out_src[keep]]), np.vstack([dst, out_dst[keep]])
        e = solver_u(S, D, RansacConfig(seed=seed))
        assert e
        np.testing.assert_array_equal(e.inliers, np.arange(30))

    def test_pure_random_no_consensus(self):
        rng = np.random.default_rng(4)
        src, dst = rng.normal(size=(10, 3)), rng.normal(size=(10, 3))
        cfg = RansacConfig(min_inliers=5, inlier_threshold=0.02)
        thr = 0.02 * np.linalg.norm(dst.max(0) - dst.min(0))
        # exhaustive enumeration of all 120 minimal samples: none reaches 5 inliers
        assert exhaustive_best_consensus(src, dst, thr, fit_similarity_umeyama) < 5
        res = solver_u(src, dst, cfg)
        assert not res and res.reason == NO_CONSENSUS

    def test_insufficient(self, rng):
        res = solver_u(rng.normal(size=(5, 3)), rng.normal(size=(5, 3)))
        assert not res and res.reason == INSUFFICIENT

    @settings(max_examples=15)  # exhaustive oracle: C(20, 3) fits per example
    @given(seeds)
    def test_final_count_not_below_best_sample(self, seed):
        rng = np.random.default_rng(seed)
        T0, src, dst = planted(rng, 40)
        dst[:15] = rng.normal(size=(15, 3))
        dst = dst + rng.normal(scale=0.01, size=dst.shape)
        cfg = RansacConfig(min_inliers=3, min_inlier_ratio=0.0, inlier_threshold=0.05, threshold_mode="absolute")
        e = solver_u(src, dst, cfg)
        best = exhaustive_best_consensus(src[:20], dst[:20], 0.05, fit_similarity_umeyama)
        assert e and e.inlier_count >= best - 15

    def test_deterministic_per_seed(self, rng):
        T0, src, dst = planted(rng, 40)
        dst[:10] += 5
        a = solver_u(src, dst, RansacConfig(seed=3), "x", "y")
        b = solver_u(src, dst, RansacConfig(seed=3), "x", "y")
        assert a.transform == b.transform and np.array_equal(a.inliers, b.inliers)

    def test_config_validation(self):
        with pytest.raises(InvalidConfig):
            RansacConfig(min_inliers=2)
        with pytest.raises(InvalidConfig):
            RansacConfig(confidence=1.0)


def chain_graph(rng, names, extra=(), inliers=None):
    """Noise-free edges between planted node transforms (node -> world)."""
    Ts = {n: random_similarity(rng) for n in names}
    pairs = list(zip(names[:-1], names[1:])) + list(extra)
    edges = []
    for k, (a, b) in enumerate(pairs):
        c = 100 if inliers is None else inliers[k]
        edges.append(EdgeEstimate(a, b, compose(invert(Ts[b]), Ts[a]), c, c, 0.0))
    return AlignmentGraph(names, edges), Ts


class TestGraph:
    def test_chain_composition(self, rng):
        g, Ts = chain_graph(rng, ["a", "b", "c"])
        S = path_transform(g, "a", "c")
        assert S.allclose(compose(invert(Ts["c"]), Ts["a"]), 1e-8)

    def test_same_node_identity(self, rng):
        g, _ = chain_graph(rng, ["a", "b"])
        assert path_transform(g, "a", "a") == SimilarityTransform3.identity()

    def test_isolated(self, rng):
        g, _ = chain_graph(rng, ["a", "b"])
        g = AlignmentGraph(["a", "b", "z"], g.edges)
        with pytest.raises(NodesDisconnected):
            path_transform(g, "a", "z")

    @given(seeds)
    def test_cycles_compose_to_identity(self, seed):
        rng = np.random.default_rng(seed)
        names = [f"n{i}" for i in range(6)]
        g, _ = chain_graph(rng, names, extra=[("n0", "n3"), ("n2", "n5")])
        I = SimilarityTransform3.identity()
        for cyc in (["n0", "n1", "n2", "n3", "n0"], ["n2", "n3", "n4", "n5", "n2"]):
            T = I
            for u, v in zip(cyc[:-1], cyc[1:]):
                T = compose(g.edge(u, v).transform, T)
            assert T.allclose(I, 1e-6)

    @given(seeds)
    def test_edge_symmetry(self, seed):
        rng = np.random.default_rng(seed)
        g, _ = chain_graph(rng, ["a", "b", "c", "d"])
        T = compose(path_transform(g, "d", "a"), path_transform(g, "a", "d"))
        assert T.allclose(SimilarityTransform3.identity(), 1e-9)

    @given(seeds)
    def test_shortest_path_against_enumeration(self, seed):
        rng = np.random.default_rng(seed)
        names = [f"n{i}" for i in range(7)]
        pairs = [(a, b) for i, a in enumerate(names) for b in names[i + 1:] if rng.uniform() < 0.35]
        edges = [EdgeEstimate(a, b, SimilarityTransform3.identity(), int(c), 200, 0.0)
                 for (a, b), c in zip(pairs, rng.integers(12, 200, len(pairs)))]
        g = AlignmentGraph(names, edges)
        adj = {n: g.neighbors(n) for n in names}
        for a in names:
            for b in names:
                paths = all_simple_paths(adj, a, b) if a != b else [[a]]
                if not paths:
                    with pytest.raises(NodesDisconnected):
                        shortest_path(g, a, b)
                    continue
                hop = min(len(p) for p in paths)
                cands = [p for p in paths if len(p) == hop]

                def width(p):
                    return min((g.edge(u, v).inlier_count for u, v in zip(p[:-1], p[1:])), default=np.inf)

                wbest = max(width(p) for p in cands)
                expect = min(p for p in cands if width(p) == wbest)
                assert shortest_path(g, a, b) == expect

    def test_tie_break_prefers_stronger_path(self, rng):
        T = SimilarityTransform3.identity()
        e = [EdgeEstimate("a", "b", T, 50, 60, 0), EdgeEstimate("b", "d", T, 50, 60, 0),
             EdgeEstimate("a", "c", T, 90, 90, 0), EdgeEstimate("c", "d", T, 80, 90, 0)]
        assert shortest_path(AlignmentGraph(list("abcd"), e), "a", "d") == ["a", "c", "d"]
        e[3] = EdgeEstimate("c", "d", T, 50, 90, 0)
        assert shortest_path(AlignmentGraph(list("abcd"), e), "a", "d") == ["a", "b", "d"]

    def test_register_planted_chain(self, rng):
        names = [f"m{i}" for i in range(5)]
        g, Ts = chain_graph(rng, names)
        reg = register_all(g, "m2")
        assert not reg.unregistered
        for n in names:
            assert reg.transforms[n].allclose(compose(invert(Ts["m2"]), Ts[n]), 1e-7)

    def test_register_single_and_components(self, rng):
        assert register_all(AlignmentGraph(["x"]), "x").transforms["x"] == SimilarityTransform3.identity()
        g, _ = chain_graph(rng, ["a", "b"])
        reg = register_all(AlignmentGraph(["a", "b", "c", "d"], g.edges + [EdgeEstimate("c", "d", SimilarityTransform3(), 20, 20, 0)]), "a")
        assert reg.unregistered == ["c", "d"]
        with pytest.raises(UnknownReference):
            register_all(g, "nope")

    @given(seeds)
    def test_rerooting_equivariance(self, seed):
        rng = np.random.default_rng(seed)
        names = [f"m{i}" for i in range(5)]
        g, _ = chain_graph(rng, names, extra=[("m0", "m3")])
        r1, r2 = register_all(g, "m0"), register_all(g, "m4")
        F = path_transform(g, "m0", "m4")
        for n in names:
            assert compose(F, r1.transforms[n]).allclose(r2.transforms[n], 1e-6)

    def test_build_graph(self, rng):
        Ts = {n: random_similarity(rng) for n in "abc"}
        pts = rng.normal(size=(40, 3))
        pw = {(a, b): Correspondences3D(Ts[a].apply(pts), Ts[b].apply(pts)) for a, b in [("a", "b"), ("a", "c"), ("b", "c")]}
        g = build_alignment_graph(pw, nodes=["a", "b", "c", "z"])
        assert len(g.edges) == 3 and "z" in g.nodes and g.neighbors("z") == []
        del pw[("a", "c")]
        g2 = build_alignment_graph(pw, nodes=list("abc"), threads=2)
        assert len(g2.edges) == 2 and g2.edge("a", "c") is None
        assert path_transform(g2, "a", "c").allclose(compose(Ts["c"], invert(Ts["a"])), 1e-8)

    def test_thread_count_invariance(self, rng):
        pw = {}
        for k in range(4):
            T, src, dst = planted(rng, 40)
            dst[:8] = rng.normal(size=(8, 3))
            pw[(f"v{k}", f"v{k + 1}")] = Correspondences3D(src, dst)
        g1 = build_alignment_graph(pw, threads=1)
        g3 = build_alignment_graph(pw, threads=3)
        assert [(e.from_id, e.to_id) for e in g1.edges] == [(e.from_id, e.to_id) for e in g3.edges]
        assert all(a.transform == b.transform for a, b in zip(g1.edges, g3.edges))


class TestLift:
    def test_lookup_table_oracle(self, small_scene):
        ds = small_scene.dataset
        (fa, fb) = small_scene.truth.planted_frame_pairs[("v0", "v1")][0]
        ra, rb = ds.reconstructions["v0"], ds.reconstructions["v1"]
        m = mutual_nn_match(ds.features[fa], ds.features[fb])
        c = lift_matches(m, ra, rb)
        assert len(c) == len(m)
        # every feature is an observation with the same index in that frame
        table_a = {k: p for f, k, p in zip(ra.obs_frame, ra.obs_keypoint, ra.obs_point) if f == fa}
        table_b = {k: p for f, k, p in zip(rb.obs_frame, rb.obs_keypoint, rb.obs_point) if f == fb}
        rows_a = ra.point_rows([table_a[int(i)] for i in m.index_a])
        rows_b = rb.point_rows([table_b[int(j)] for j in m.index_b])
        np.testing.assert_array_equal(c.src, ra.points[rows_a])
        np.testing.assert_array_equal(c.dst, rb.points[rows_b])

    def test_exact_and_missing(self, small_scene):
        ds = small_scene.dataset
        ra = ds.reconstructions["v0"]
        fa = ra.obs_frame[0]
        px = ra.obs_pixel[0]
        m = MatchSet((fa, fa), [0], [0], [px], [px])
        c = lift_matches(m, ra, ra)
        row = ra.point_rows([ra.obs_point[0]])[0]
        np.testing.assert_array_equal(c.src[0], ra.points[row])
        far = MatchSet((fa, fa), [0], [0], [px], [px + 50])
        assert len(lift_matches(far, ra, ra, 2.0)) <= 1

    def test_unknown_frame(self, small_scene):
        ra = small_scene.dataset.reconstructions["v0"]
        with pytest.raises(UnknownFrame):
            lift_matches(MatchSet(("nope", "nope"), [], [], np.zeros((0, 2)), np.zeros((0, 2))), ra, ra)
