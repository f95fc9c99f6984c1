import numpy as np
import pytest

from uvcorrect.correction import correct_naive_fixed
from uvcorrect.data import TRUTH_FACTOR, ExpressionMatrix, build_differences
from uvcorrect.estimation import UVModel
from uvcorrect.evaluation import clustering_distance
from uvcorrect.linalg import first_canonical_correlation
from uvcorrect.synthgen import (
    BATCH_FACTOR,
    DemoSpec,
    GeneratorSpec,
    LayoutError,
    gene_association,
    generate,
    normal,
    two_feature_demo,
    write_dataset,
)
from uvcorrect.unsupervised import Partition, kmeans


class TestGeneratorSpec:
    @pytest.mark.parametrize(
        "kw",
        [{"m": 0}, {"sigma_eps": -1.0}, {"confounding_strength": 1.5}, {"design": "other"},
         {"control_quality": "dirty"}, {"control_fraction": 0.0}],
    )
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            GeneratorSpec(**kw)

    @pytest.mark.parametrize(
        "kw",
        [{"group_size": 4}, {"m": 91}, {"n_replicate_groups": 40},
         {"design": "confounded", "n_replicate_groups": 31}],
    )
    def test_infeasible_layout(self, kw):
        with pytest.raises(LayoutError):
            generate(GeneratorSpec(n=50, **kw))


class TestGenerate:
    def test_shapes_and_annotations(self):
        ds = generate(GeneratorSpec(n=100))
        assert ds.y.shape == (90, 100)
        assert set(ds.annotations.factor(BATCH_FACTOR, ds.y.sample_ids)) == {"B0", "B1", "B2"}
        assert len(ds.controls) == 25
        np.testing.assert_array_equal(ds.truth.x.sum(axis=1), 1.0)

    def test_no_uv_kmeans_recovers_truth(self):
        spec = GeneratorSpec(n=500, sigma_alpha=0.0, sigma_eps=0.3, sigma_beta=2.0)
        ds = generate(spec)
        part = kmeans(ds.y.values, 3, seed=0).partition
        assert clustering_distance(part, Partition(ds.truth.labels, 3)).value == 0.0

    def test_strength_zero_uncorrelated(self):
        ds = generate(GeneratorSpec(n=50, design="confounded", confounding_strength=0.0))
        assert first_canonical_correlation(ds.truth.x, ds.truth.w) <= 0.1

    def test_strength_one_aligned(self):
        # replicate samples span batches by construction and dilute the alignment
        spec = GeneratorSpec(n=50, design="confounded", confounding_strength=1.0, n_replicate_groups=1)
        t = generate(spec).truth
        assert first_canonical_correlation(t.x, t.w) >= 0.95
        t0 = generate(GeneratorSpec(n=50, design="confounded", n_replicate_groups=0)).truth
        assert first_canonical_correlation(t0.x, t0.w) == pytest.approx(1.0)

    def test_orthogonal_full_design(self):
        ds = generate(GeneratorSpec(n=50))
        cc = first_canonical_correlation(ds.truth.x, ds.truth.w)
        assert cc == pytest.approx(0.0, abs=1e-10)

    def test_strength_is_monotone(self):
        ccs = [
            first_canonical_correlation(
                *(lambda t: (t.x, t.w))(
                    generate(GeneratorSpec(n=20, design="confounded", confounding_strength=s)).truth
                )
            )
            for s in (0.0, 0.5, 1.0)
        ]
        assert ccs[0] < ccs[1] < ccs[2]

    @pytest.mark.parametrize("design", ["orthogonal-full", "confounded"])
    def test_replicate_differences_cancel_interest(self, design):
        ds = generate(GeneratorSpec(n=200, design=design, sigma_bio=0.5))
        t = ds.truth
        xb = ExpressionMatrix(t.x @ t.beta, ds.y.sample_ids, ds.y.feature_ids)
        d = build_differences(xb, ds.annotations)
        np.testing.assert_array_equal(d.d_rows, 0.0)
        labels = ds.annotations.factor(TRUTH_FACTOR, ds.y.sample_ids)
        groups = ds.annotations.replicate_groups(ds.y.sample_ids)
        idx = {s: i for i, s in enumerate(ds.y.sample_ids)}
        for members in groups.values():
            assert len({labels[idx[s]] for s in members}) == 1
            assert len({tuple(t.w[idx[s]]) for s in members}) == len(members)

    def test_covariance_converges(self):
        errs = []
        for seed in range(3):
            spec = GeneratorSpec(n=5000, seed=seed)
            ds = generate(spec)
            t = ds.truth
            e = ds.y.values - t.x @ t.beta
            emp = e @ e.T / spec.n
            pop = spec.sigma_alpha**2 * t.w @ t.w.T + spec.sigma_eps**2 * np.eye(spec.m)
            errs.append(np.linalg.norm(emp - pop) / np.linalg.norm(pop))
        assert max(errs) <= 0.10

    def test_control_quality(self):
        clean = generate(GeneratorSpec(n=200))
        leaky = generate(GeneratorSpec(n=200, control_quality="leaky"))
        ctl = list(clean.controls.indices)
        np.testing.assert_array_equal(clean.truth.beta[:, ctl], 0.0)
        assert np.all(leaky.truth.beta[:, ctl] != 0.0)
        assert leaky.controls.indices == clean.controls.indices

    def test_bit_reproducible(self, tmp_path):
        a = generate(GeneratorSpec(n=300, seed=5))
        b = generate(GeneratorSpec(n=300, seed=5))
        np.testing.assert_array_equal(a.y.values, b.y.values)
        pa = write_dataset(a, tmp_path / "a")
        pb = write_dataset(b, tmp_path / "b")
        for fa, fb in zip(pa, pb):
            assert fa.read_bytes() == fb.read_bytes()

    def test_seed_changes_data(self):
        a = generate(GeneratorSpec(n=50, seed=1))
        b = generate(GeneratorSpec(n=50, seed=2))
        assert not np.array_equal(a.y.values, b.y.values)

    def test_normal_stream_moments(self):
        z = normal(np.random.Generator(np.random.PCG64(0)), 200000)
        assert abs(z.mean()) < 0.01 and abs(z.std() - 1) < 0.01


class TestTwoFeatureDemo:
    def test_smoke(self):
        ds = two_feature_demo()
        assert ds.y.shape == (2, 400)
        ctl = list(ds.controls.indices)
        np.testing.assert_array_equal(ds.truth.beta[:, ctl], 0.0)
        cos = float(ds.truth.w[:, 0] @ ds.truth.x[:, 0] / np.linalg.norm(ds.truth.w[:, 0]))
        assert cos == pytest.approx(0.95)

    def test_w1_equal_x_removes_association(self):
        ds = two_feature_demo(DemoSpec(cos_x_w1=1.0))
        model = UVModel(ds.truth.w[:, :1], "known-factors")
        out = correct_naive_fixed(ds.y, model).y_corrected.values
        np.testing.assert_allclose(ds.truth.x.T @ out, 0.0, atol=1e-12)
        assert gene_association(out, ds.truth.beta) < 0.15

    def test_spherical_matches_anisotropic(self):
        # the projection depends only on the W1 direction, not on the spread
        kept = []
        for s1, s2 in ((2.0, 0.7), (1.0, 1.0)):
            ds = two_feature_demo(DemoSpec(scale_w1=s1, scale_w2=s2, seed=3))
            model = UVModel(ds.truth.w[:, :1], "known-factors")
            xb = ExpressionMatrix(ds.truth.x @ ds.truth.beta, ds.y.sample_ids, ds.y.feature_ids)
            kept.append(correct_naive_fixed(xb, model).y_corrected.values)
        np.testing.assert_allclose(kept[0], kept[1], atol=1e-12)
        signal = np.linalg.norm(ds.truth.x @ ds.truth.beta)
        assert np.linalg.norm(kept[0]) / signal == pytest.approx(np.sqrt(1 - 0.95**2), rel=1e-10)
