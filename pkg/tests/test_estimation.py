import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import subspace_angles

from uvcorrect.correction import correct_naive_fixed
from uvcorrect.data import (
    REPLICATE_FACTOR,
    ControlGeneSet,
    ExpressionMatrix,
    SampleAnnotations,
    build_differences,
    center_by_factor,
)
from uvcorrect.estimation import (
    DegenerateError,
    RankReductionWarning,
    UVModel,
    combine_w,
    default_k,
    estimate_w_control_genes,
    estimate_w_replicates,
    estimate_w_residuals,
    known_w,
    load_uvmodel,
    refresh_w,
    replicate_rank_diagnostic,
    save_uvmodel,
)


def _em(values):
    m, n = values.shape
    return ExpressionMatrix(values, [f"s{i:02d}" for i in range(m)], [f"g{j}" for j in range(n)])


def _max_angle_deg(a, b):
    return float(np.degrees(np.max(subspace_angles(a, b))))


class TestDefaultK:
    def test_quarter(self):
        assert default_k(90) == 22
        assert default_k(2) == 1

    def test_cap(self):
        assert default_k(90, 7) == 7


class TestControlGenes:
    def test_rank_one(self):
        u = np.array([1.0, 2.0, -1.0])
        y = _em(np.outer(u, np.arange(1.0, 6.0)))
        model = estimate_w_control_genes(y, ControlGeneSet([0, 2, 4]), 1)
        assert _max_angle_deg(model.w_hat, u[:, None]) < 1e-6

    def test_full_rank_gram(self):
        y = _em(np.random.default_rng(0).standard_normal((4, 9)))
        c = ControlGeneSet(range(9))
        model = estimate_w_control_genes(y, c, 4)
        np.testing.assert_allclose(model.w_hat @ model.w_hat.T, y.values @ y.values.T, atol=1e-10)

    def test_subspace_recovery_high_snr(self):
        rng = np.random.default_rng(1)
        w = rng.standard_normal((20, 2))
        y = _em(w @ rng.standard_normal((2, 300)) + 0.1 * rng.standard_normal((20, 300)))
        model = estimate_w_control_genes(y, ControlGeneSet(range(300)), 2)
        assert _max_angle_deg(model.w_hat, w) <= 5.0

    def test_zero_columns_beyond_rank(self):
        u = np.array([1.0, 0.0, 1.0])
        y = _em(np.outer(u, np.ones(4)))
        model = estimate_w_control_genes(y, ControlGeneSet(range(4)), 3)
        np.testing.assert_array_equal(model.w_hat[:, 1:], 0.0)

    def test_k_out_of_range(self):
        y = _em(np.ones((3, 4)))
        with pytest.raises(ValueError):
            estimate_w_control_genes(y, ControlGeneSet([0, 1]), 3)


def _replicate_data(seed, noise=0.05, m=24, n=400):
    rng = np.random.default_rng(seed)
    batch = np.arange(m) % 3
    w1 = np.eye(3)[batch]
    other = (np.arange(m) // 3) % 2
    w2 = np.eye(2)[other] - 0.5
    w = np.hstack([w1, w2])
    alpha = rng.standard_normal((5, n))
    x = np.eye(2)[(np.arange(m) // 6) % 2]
    beta = rng.standard_normal((2, n))
    beta[:, : n // 2] = 0.0
    y = x @ beta + w @ alpha + noise * rng.standard_normal((m, n))
    ids = [f"s{i:02d}" for i in range(m)]
    groups = {}
    for i in range(m):
        # members share the biological unit and the second factor
        groups[ids[i]] = f"r{i // 3}"
    em = ExpressionMatrix(y, ids, [f"g{j}" for j in range(n)])
    return em, SampleAnnotations({REPLICATE_FACTOR: groups}), ControlGeneSet(range(n // 2)), w1, w2


class TestReplicates:
    def test_identical_replicates_degenerate(self):
        y = _em(np.tile(np.arange(5.0), (4, 1)))
        ann = SampleAnnotations({REPLICATE_FACTOR: {"s00": "a", "s01": "a"}})
        d = build_differences(y, ann)
        with pytest.raises(DegenerateError):
            estimate_w_replicates(y, ControlGeneSet([0, 1]), d, 1)

    def test_single_difference_closed_form(self):
        rng = np.random.default_rng(2)
        y = _em(rng.standard_normal((4, 6)))
        ann = SampleAnnotations({REPLICATE_FACTOR: {"s00": "a", "s01": "a"}})
        d = build_differences(y, ann)
        c = ControlGeneSet([0, 2, 3, 5])
        model = estimate_w_replicates(y, c, d, 1)
        dc = d.d_rows[0, list(c.indices)]
        yc = y.values[:, list(c.indices)]
        expected = yc @ dc / (dc @ dc)
        # the fitted product does not depend on the scale or sign of alpha
        np.testing.assert_allclose(
            model.w_hat @ model.alpha[:, list(c.indices)], np.outer(expected, dc), atol=1e-10
        )

    def test_factor_one_only(self):
        y, ann, c, w1, w2 = _replicate_data(3)
        d = build_differences(y, ann)
        model = estimate_w_replicates(y, c, d, 2)
        w1c = w1 - w1.mean(axis=0)
        assert _max_angle_deg(model.w_hat - model.w_hat.mean(axis=0), w1c[:, :2]) < 20.0
        angles = np.degrees(subspace_angles(model.w_hat, w2[:, :1]))
        assert angles.min() >= 80.0

    def test_rank_reduction_warns(self):
        y, ann, c, *_ = _replicate_data(4, noise=0.0)
        d = build_differences(y, ann)
        with pytest.warns(RankReductionWarning):
            model = estimate_w_replicates(y, c, d, 4)
        assert model.k == 2

    def test_k_exceeds_differences(self):
        y = _em(np.random.default_rng(5).standard_normal((3, 5)))
        ann = SampleAnnotations({REPLICATE_FACTOR: {"s00": "a", "s01": "a"}})
        with pytest.raises(ValueError):
            estimate_w_replicates(y, ControlGeneSet([0, 1]), build_differences(y, ann), 2)


class TestRankDiagnostic:
    def test_deletes_third_factor(self):
        diag = replicate_rank_diagnostic([[1, -1, 0], [0, -1, 0], [1, 0, 0]])
        np.testing.assert_allclose(diag.projector, np.diag([1.0, 1.0, 0.0]), atol=1e-10)
        assert diag.deleted == (2,)
        assert diag.collapsed == ()

    def test_collapses_first_two(self):
        diag = replicate_rank_diagnostic([[1, 1, -1], [0, 0, -1], [1, 1, 0]])
        expected = [[0.5, 0.5, 0.0], [0.5, 0.5, 0.0], [0.0, 0.0, 1.0]]
        np.testing.assert_allclose(diag.projector, expected, atol=1e-10)
        assert diag.collapsed == ((0, 1),)
        assert diag.deleted == ()

    def test_full_rank_identity(self):
        a = np.random.default_rng(6).standard_normal((4, 4))
        np.testing.assert_allclose(replicate_rank_diagnostic(a).projector, np.eye(4), atol=1e-10)

    def test_zero_matrix(self):
        with pytest.raises(DegenerateError):
            replicate_rank_diagnostic(np.zeros((2, 2)))

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2**31), rows=st.integers(1, 6), k=st.integers(1, 5))
    def test_orthogonal_projector(self, seed, rows, k):
        rng = np.random.default_rng(seed)
        w_d = rng.integers(-1, 2, size=(rows, k)).astype(float)
        if not np.any(w_d):
            w_d[0, 0] = 1.0
        proj = replicate_rank_diagnostic(w_d).projector
        np.testing.assert_allclose(proj, proj.T, atol=1e-10)
        np.testing.assert_allclose(proj @ proj, proj, atol=1e-10)
        ev = np.linalg.eigvalsh(proj)
        assert np.all(np.minimum(np.abs(ev), np.abs(ev - 1)) < 1e-10)


class TestCombine:
    def _model(self, w):
        return UVModel(w, "control-genes")

    def test_rank_adds(self):
        rng = np.random.default_rng(7)
        c = combine_w(self._model(rng.standard_normal((5, 2))), self._model(rng.standard_normal((5, 3))))
        assert c.k == 5
        assert c.provenance == "combined" and len(c.parents) == 2

    def test_neutral_element(self):
        a = self._model(np.random.default_rng(8).standard_normal((5, 2)))
        c = combine_w(a, self._model(np.zeros((5, 1))))
        np.testing.assert_allclose(c.w_hat @ c.w_hat.T, a.w_hat @ a.w_hat.T, atol=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 2**31), ka=st.integers(1, 4), kb=st.integers(1, 4))
    def test_gram_additivity(self, seed, ka, kb):
        rng = np.random.default_rng(seed)
        a, b = rng.standard_normal((6, ka)), rng.standard_normal((6, kb))
        c = combine_w(self._model(a), self._model(b))
        np.testing.assert_allclose(c.w_hat @ c.w_hat.T, a @ a.T + b @ b.T, atol=1e-12)

    def test_row_mismatch(self):
        with pytest.raises(ValueError):
            combine_w(self._model(np.ones((3, 1))), self._model(np.ones((4, 1))))


class TestResiduals:
    def test_perfect_fit_degenerate(self):
        y = _em(np.random.default_rng(9).standard_normal((4, 5)))
        with pytest.raises(DegenerateError):
            estimate_w_residuals(y, y.values, 2)

    def test_zero_fit_matches_control_estimator(self):
        y = _em(np.random.default_rng(10).standard_normal((5, 7)))
        a = estimate_w_residuals(y, np.zeros((5, 7)), 3)
        b = estimate_w_control_genes(y, ControlGeneSet(range(7)), 3)
        np.testing.assert_allclose(a.w_hat, b.w_hat, atol=1e-12)

    def test_true_xbeta_recovers_w(self):
        rng = np.random.default_rng(11)
        w = rng.standard_normal((16, 2))
        xb = np.repeat(np.eye(2), 8, axis=0) @ rng.standard_normal((2, 300))
        y = _em(xb + w @ rng.standard_normal((2, 300)) + 0.1 * rng.standard_normal((16, 300)))
        model = estimate_w_residuals(y, xb, 2)
        assert model.provenance == "residual-updated"
        assert _max_angle_deg(model.w_hat, w) <= 5.0


class TestKnownW:
    def test_single_factor(self):
        ann = SampleAnnotations({"b": {"a": "x", "b": "y", "c": "x", "d": "y"}})
        w = known_w(ann, ["b"], ["a", "b", "c", "d"]).w_hat
        np.testing.assert_array_equal(w, [[1, 0], [0, 1], [1, 0], [0, 1]])
        np.testing.assert_array_equal(w.sum(axis=1), 1.0)

    def test_crossed(self):
        ids = ["a", "b", "c", "d"]
        ann = SampleAnnotations(
            {"f": dict(zip(ids, "xxyy")), "g": dict(zip(ids, "uvuv"))}
        )
        assert known_w(ann, ["f", "g"], ids).k == 4

    def test_regression_removal_is_mean_centering(self):
        rng = np.random.default_rng(12)
        y = _em(rng.standard_normal((12, 6)))
        ann = SampleAnnotations(
            {
                "f": {s: str(i % 3) for i, s in enumerate(y.sample_ids)},
                "g": {s: str(i % 2) for i, s in enumerate(y.sample_ids)},
            }
        )
        model = known_w(ann, ["f", "g"], y.sample_ids)
        res = correct_naive_fixed(y, model)
        np.testing.assert_allclose(
            res.y_corrected.values, center_by_factor(y, ann, ["f", "g"]).values, atol=1e-12
        )

    def test_unknown_factor(self):
        with pytest.raises(ValueError):
            known_w(SampleAnnotations({}), ["b"], ["a"])


class TestRefreshAndSerialization:
    def test_refresh_control_model_keeps_pathway(self):
        y = _em(np.random.default_rng(13).standard_normal((6, 10)))
        model = estimate_w_control_genes(y, ControlGeneSet([0, 1, 2, 3]), 2)
        new = refresh_w(model, y.values, np.zeros((6, 10)))
        assert new.provenance == "control-genes"
        np.testing.assert_allclose(new.w_hat, model.w_hat)

    def test_refresh_replicate_model(self):
        y, ann, c, *_ = _replicate_data(14)
        d = build_differences(y, ann)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RankReductionWarning)
            model = estimate_w_replicates(y, c, d, 2)
            new = refresh_w(model, y.values, np.zeros(y.shape), y.sample_ids)
        np.testing.assert_allclose(new.w_hat @ new.alpha, model.w_hat @ model.alpha, atol=1e-10)

    def test_save_load_combined(self, tmp_path):
        rng = np.random.default_rng(15)
        a = UVModel(rng.standard_normal((4, 2)), "control-genes", params={"k": 2})
        b = UVModel(rng.standard_normal((4, 1)), "residual-updated", params={"k": 1})
        c = combine_w(a, b).with_nu(0.25)
        ids = ["a", "b", "c", "d"]
        save_uvmodel(c, tmp_path / "w.csv", ids)
        back, back_ids = load_uvmodel(tmp_path / "w.csv")
        assert tuple(back_ids) == tuple(ids)
        assert back.provenance == "combined" and back.nu == 0.25
        np.testing.assert_array_equal(back.w_hat, c.w_hat)
        np.testing.assert_array_equal(back.parents[0].w_hat, a.w_hat)
