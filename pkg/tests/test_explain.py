"""Local-linear fitting, chain-rule composition, and fidelity metrics."""

import numpy as np
import pytest

from chainsim.explain import (
    Explanation,
    LimeConfig,
    ZeroExplanationError,
    cosine_similarity,
    end_to_end_explanation,
    explanation_mse,
    explanation_to_csv,
    fit_local_linear,
    recourse_distance,
    recourse_distances_batch,
    recourse_error,
    supply_chain_explanation,
)
from chainsim.graph import NodeRecord, SupplyChainGraph
from chainsim.models import MlpModel, TreeSpec, build_tree_chain


def linear_fn(a):
    """g(x) = A x as a batch callable; the fitted weights should be A^T."""
    a = np.asarray(a, dtype=float)
    return lambda x: np.asarray(x) @ a.T


class TestFitLocalLinear:
    def test_constant_function_gives_zero_matrix(self):
        fitted = fit_local_linear(lambda x: np.full(len(x), 0.7),
                                  np.zeros(3), LimeConfig(seed=1))
        assert np.allclose(fitted.weights, 0.0, atol=1e-12)

    def test_linear_map_recovered_exactly(self):
        a = np.array([[1.0, -2.0, 0.5], [0.25, 3.0, -1.0]])  # R^3 -> R^2
        fitted = fit_local_linear(linear_fn(a), np.array([0.3, -0.1, 0.8]),
                                  LimeConfig(radius=0.2, n_samples=50, seed=2))
        assert np.linalg.norm(fitted.weights - a.T) <= 1e-9 * np.linalg.norm(a)
        assert not fitted.ill_conditioned

    def test_smooth_function_matches_finite_differences(self):
        model = MlpModel(4, 8, 16, seed=5)
        anchor = np.array([0.2, -0.3, 0.5, 0.1])
        cfg = LimeConfig(radius=1e-4, n_samples=200, seed=3)
        fitted = fit_local_linear(model.forward, anchor, cfg)
        h = 1e-5
        jac = np.zeros(4)
        for j in range(4):
            e = np.zeros(4)
            e[j] = h
            jac[j] = (model.forward((anchor + e)[None])[0]
                      - model.forward((anchor - e)[None])[0]) / (2 * h)
        assert np.abs(fitted.weights[:, 0] - jac).max() < 1e-3

    def test_radius_shrink_converges_to_jacobian(self):
        model = MlpModel(3, 8, 16, seed=8)
        anchor = np.array([0.1, 0.4, -0.2])
        h = 1e-6
        jac = np.array([
            (model.forward((anchor + np.eye(3)[j] * h)[None])[0]
             - model.forward((anchor - np.eye(3)[j] * h)[None])[0]) / (2 * h)
            for j in range(3)])
        errs = []
        for radius in (1e-2, 1e-3, 1e-4):
            fitted = fit_local_linear(model.forward, anchor,
                                      LimeConfig(radius=radius, n_samples=500, seed=4))
            errs.append(np.linalg.norm(fitted.weights[:, 0] - jac))
        assert errs[0] >= errs[1] >= errs[2]

    def test_rank_deficient_design_is_flagged(self):
        cfg = LimeConfig(radius=0.1, n_samples=3, seed=5)  # 3 samples in R^6
        fitted = fit_local_linear(lambda x: np.asarray(x).sum(axis=1),
                                  np.zeros(6), cfg)
        assert fitted.ill_conditioned

    def test_deterministic_under_seed(self):
        fn = linear_fn(np.array([[1.0, 2.0]]))
        a = fit_local_linear(fn, np.zeros(2), LimeConfig(seed=9))
        b = fit_local_linear(fn, np.zeros(2), LimeConfig(seed=9))
        assert a.weights.tobytes() == b.weights.tobytes()


def linear_chain_graph(depth):
    """Chain depth..1 with ids 0 (sink) .. depth-1 (source)."""
    nodes = [NodeRecord(id=i) for i in range(depth)]
    edges = [(i + 1, i) for i in range(depth - 1)]
    return SupplyChainGraph(nodes, edges)


class TestChainExplanations:
    def test_single_node_all_three_fits_identical(self):
        g, models = build_tree_chain(TreeSpec(degree=1, depth=1, feat_dim=3, seed=4))
        x = np.array([0.1, 0.2, -0.4])
        cfg = LimeConfig(radius=0.2, n_samples=30, seed=11)
        direct = fit_local_linear(models[0].forward, x, cfg)
        e2e = end_to_end_explanation(g, models, 0, x, cfg)
        sc = supply_chain_explanation(g, models, 0, x, cfg)
        assert np.array_equal(direct.weights, e2e.weights)
        assert np.array_equal(direct.weights, sc.weights)

    def test_linear_chain_product_oracle(self):
        # source: s(x) = a.x ; sink: h(x, p) = b.x + c*p
        rho = 3
        a = np.array([1.0, -1.0, 2.0])
        b = np.array([0.5, 0.0, -0.5])
        c = 2.0
        g = linear_chain_graph(2)
        models = {1: lambda x: np.asarray(x) @ a,
                  0: lambda x: np.asarray(x) @ np.concatenate([b, [c]])}
        x = np.array([0.3, 0.6, -0.2])
        cfg = LimeConfig(radius=0.1, n_samples=40, seed=6)
        expected = (b + c * a)[:, None]
        e2e = end_to_end_explanation(g, models, 0, x, cfg)
        sc = supply_chain_explanation(g, models, 0, x, cfg)
        scale = np.linalg.norm(expected)
        assert np.linalg.norm(e2e.weights - expected) <= 1e-9 * scale
        assert np.linalg.norm(sc.weights - expected) <= 1e-9 * scale

    def test_identity_links_propagate_source_explanation(self):
        # Sink passes its parent through untouched; composite = source map.
        a = np.array([2.0, -3.0])
        g = linear_chain_graph(2)
        models = {1: lambda x: np.asarray(x) @ a,
                  0: lambda x: np.asarray(x)[:, 2]}
        x = np.array([0.5, 0.5])
        sc = supply_chain_explanation(g, models, 0, x,
                                      LimeConfig(radius=0.1, n_samples=30, seed=2))
        assert np.linalg.norm(sc.weights[:, 0] - a) <= 1e-9 * np.linalg.norm(a)

    def test_tree_matches_analytic_jacobian(self):
        # Two linear parents feeding a linear sink: block chain rule exactly.
        rho = 2
        nodes = [NodeRecord(id=i) for i in range(3)]
        g = SupplyChainGraph(nodes, [(1, 0), (2, 0)])
        a1 = np.array([1.0, 2.0])
        a2 = np.array([-1.0, 0.5])
        bx = np.array([0.1, -0.2])
        c1, c2 = 1.5, -2.5
        models = {
            1: lambda x: np.asarray(x) @ a1,
            2: lambda x: np.asarray(x) @ a2,
            0: lambda x: np.asarray(x) @ np.concatenate([bx, [c1, c2]]),
        }
        expected = (bx + c1 * a1 + c2 * a2)[:, None]
        sc = supply_chain_explanation(g, models, 0, np.array([0.4, 0.9]),
                                      LimeConfig(radius=0.1, n_samples=50, seed=3))
        assert np.linalg.norm(sc.weights - expected) <= 1e-9 * np.linalg.norm(expected)

    def test_parent_only_variant_drops_direct_block(self):
        g = linear_chain_graph(2)
        a = np.array([1.0, 1.0])
        b = np.array([5.0, 5.0])
        models = {1: lambda x: np.asarray(x) @ a,
                  0: lambda x: np.asarray(x) @ np.concatenate([b, [2.0]])}
        x = np.zeros(2)
        cfg = LimeConfig(radius=0.1, n_samples=40, seed=8)
        sc = supply_chain_explanation(g, models, 0, x, cfg, include_direct=False)
        assert np.linalg.norm(sc.weights[:, 0] - 2.0 * a) <= 1e-8

    def test_composition_is_associative_along_chains(self):
        # Composing 2..1 after fitting, then attaching the sink, equals the
        # full walk when fits are reused (all maps linear, fits exact).
        rng = np.random.default_rng(12)
        a = rng.standard_normal(2)
        mid = rng.standard_normal(3)
        out = rng.standard_normal(3)
        g = linear_chain_graph(3)
        models = {2: lambda x: np.asarray(x) @ a,
                  1: lambda x: np.asarray(x) @ mid,
                  0: lambda x: np.asarray(x) @ out}
        x = rng.standard_normal(2)
        cfg = LimeConfig(radius=0.1, n_samples=40, seed=5)
        full = supply_chain_explanation(g, models, 0, x, cfg)
        # segment 2..1 only
        seg_g = SupplyChainGraph([NodeRecord(id=1), NodeRecord(id=2)], [(2, 1)])
        seg = supply_chain_explanation(seg_g, models, 1, x, cfg)
        # attach the sink by hand with its own fitted blocks
        y1 = float(models[1](np.concatenate([x, [float(models[2](x[None])[0])]])[None])[0])
        sink_fit = fit_local_linear(models[0], np.concatenate([x, [y1]]), cfg,
                                    stream=("node", 0))
        manual = sink_fit.weights[:2] + seg.weights @ sink_fit.weights[2:3]
        assert np.allclose(full.weights, manual, atol=1e-9)

    def test_deterministic(self):
        spec = TreeSpec(degree=2, depth=2, feat_dim=3, seed=14)
        g, models = build_tree_chain(spec)
        x = np.array([0.2, -0.2, 0.6])
        cfg = LimeConfig(radius=0.2, n_samples=25, seed=7)
        a = supply_chain_explanation(g, models, 0, x, cfg)
        b = supply_chain_explanation(g, models, 0, x, cfg)
        assert np.array_equal(a.weights, b.weights)


def _expl(w):
    w = np.atleast_2d(np.asarray(w, dtype=float))
    if w.shape[0] == 1:
        w = w.T
    return Explanation(weights=w, anchor=np.zeros(w.shape[0]), radius=0.2,
                       sample_count=10)


class TestMetrics:
    def test_cosine_identity(self):
        e = _expl([1.0, 2.0, -1.0])
        assert cosine_similarity(e, e) == pytest.approx(1.0)

    def test_cosine_negation(self):
        a = _expl([1.0, 2.0, -1.0])
        b = _expl([-1.0, -2.0, 1.0])
        assert cosine_similarity(a, b) == pytest.approx(-1.0)

    def test_cosine_scale_invariance_and_symmetry(self):
        a = _expl([1.0, 0.5, 0.2])
        b = _expl([3.0, 1.5, 0.6])
        assert cosine_similarity(a, b) == pytest.approx(1.0)
        c = _expl([0.3, -0.8, 0.1])
        assert cosine_similarity(a, c) == pytest.approx(cosine_similarity(c, a))

    def test_cosine_zero_matrix_rejected(self):
        with pytest.raises(ZeroExplanationError):
            cosine_similarity(_expl([0.0, 0.0]), _expl([1.0, 0.0]))

    def test_mse_equal_matrices(self):
        e = _expl([1.0, 2.0])
        assert explanation_mse(e, e) == 0.0

    def test_mse_unit_difference(self):
        a = _expl([1.0, 1.0, 1.0])
        b = _expl([0.0, 0.0, 0.0])
        assert explanation_mse(a, b) == pytest.approx(1.0)

    def test_mse_matches_elementwise_recomputation(self):
        rng = np.random.default_rng(3)
        wa, wb = rng.standard_normal((2, 4))
        a, b = _expl(wa), _expl(wb)
        expected = sum((x - y) ** 2 for x, y in zip(wa, wb)) / 4
        assert explanation_mse(a, b) == pytest.approx(expected, rel=1e-12)

    def test_mse_shape_mismatch(self):
        with pytest.raises(ValueError):
            explanation_mse(_expl([1.0, 2.0]), _expl([1.0, 2.0, 3.0]))


class TestRecourse:
    def predict_logistic(self, w):
        w = np.asarray(w, dtype=float)
        return lambda x: 1.0 / (1.0 + np.exp(-np.clip(np.asarray(x) @ w, -500, 500)))

    def test_closed_form_flip_distance(self):
        w = np.array([2.0, -1.0, 0.5])
        x = np.array([0.8, -0.3, 0.4])
        predict = self.predict_logistic(w)
        e = _expl(w)
        expected = abs(w @ x) / np.linalg.norm(w)
        assert recourse_distance(predict, x, e) == pytest.approx(expected, abs=1e-4)

    def test_direction_scale_invariance(self):
        w = np.array([1.0, 1.0])
        x = np.array([0.5, 0.25])
        predict = self.predict_logistic(w)
        d1 = recourse_distance(predict, x, _expl(w))
        d2 = recourse_distance(predict, x, _expl(3.0 * w))
        assert d1 == d2

    def test_cap_returned_when_no_flip(self):
        predict = lambda x: np.full(len(np.atleast_2d(x)), 0.9)
        d = recourse_distance(predict, np.zeros(2), _expl([1.0, 0.0]), cap=1000.0)
        assert d == 1000.0

    def test_distance_never_exceeds_cap(self):
        w = np.array([1e-4, 0.0])
        predict = self.predict_logistic(w)
        d = recourse_distance(predict, np.array([5.0, 0.0]), _expl([0.0, 1.0]),
                              cap=7.0)
        assert 0 < d <= 7.0

    def test_zero_direction_rejected(self):
        with pytest.raises(ZeroExplanationError):
            recourse_distance(self.predict_logistic([1.0, 1.0]), np.zeros(2),
                              _expl([0.0, 0.0]))

    def test_batch_matches_single(self):
        rng = np.random.default_rng(5)
        w_true = rng.standard_normal(3)
        predict = self.predict_logistic(w_true)
        xs = rng.standard_normal((8, 3))
        ws = rng.standard_normal((8, 3))
        batch = recourse_distances_batch(predict, xs, ws, cap=50.0)
        singles = [recourse_distance(predict, xs[i], _expl(ws[i]), cap=50.0)
                   for i in range(8)]
        assert np.allclose(batch, singles, atol=1e-9)

    def test_recourse_error_values(self):
        assert recourse_error(3.0, 3.0) == 0.0
        assert recourse_error(1000.0, 1.0) == 999.0


class TestExport:
    def test_csv_shape_header_and_rows(self):
        e = Explanation(weights=np.array([[1.0, 2.0], [3.0, 4.0]]),
                        anchor=np.zeros(2), radius=0.1, sample_count=5)
        text = explanation_to_csv(e)
        lines = text.strip().split("\n")
        assert lines[0] == "# shape,2,2"
        assert lines[1] == "1.0,2.0"
        assert len(lines) == 3


class TestLinearChainInvariant:
    def test_supply_equals_end_to_end_equals_jacobian(self):
        # Fully linear chain: both routes recover the analytic Jacobian.
        rng = np.random.default_rng(21)
        a = rng.standard_normal(4)
        mid = rng.standard_normal(5)
        g = linear_chain_graph(2)
        models = {1: lambda x: np.asarray(x) @ a,
                  0: lambda x: np.asarray(x) @ mid}
        x = rng.standard_normal(4)
        cfg = LimeConfig(radius=0.15, n_samples=60, seed=17)
        expected = (mid[:4] + mid[4] * a)[:, None]
        sc = supply_chain_explanation(g, models, 0, x, cfg)
        e2e = end_to_end_explanation(g, models, 0, x, cfg)
        scale = np.linalg.norm(expected)
        assert np.linalg.norm(sc.weights - expected) <= 1e-9 * scale
        assert np.linalg.norm(e2e.weights - expected) <= 1e-9 * scale
