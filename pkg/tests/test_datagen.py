import numpy as np
import numpy.testing as npt
import pytest
from scipy.special import expit

from clearner.datagen import (
    TRUE_MEAN,
    DataError,
    Dataset,
    KsConfig,
    flipped_truth,
    gen_heavy_tail,
    gen_kang_schafer,
    heavy_tail_mean,
    load_csv,
    make_folds,
)

# Stein identity + 200-node Gauss-Hermite for the flipped estimand
# E[Y | A=0] = (105 + 25.345 c E[sigmoid'(z)]) / 0.5, z ~ N(0, 1.3225 c^2).
# Frozen from an independent quadrature computation.
GH_FLIPPED_TRUTH_C1 = 220.0021363971
FLIPPED_MC_TOL = 0.16  # 4 standard errors of the generator's 1e7-draw cache


def test_truth_is_210():
    ds = gen_kang_schafer(KsConfig(n=50, seed=3))
    assert ds.truth == TRUE_MEAN == 210.0


def test_latent_inversion_recovers_verbatim_formulas():
    # The distorted covariates are invertible, so the published transforms
    # can be checked directly against the propensity and outcome laws.
    c = 1.3
    ds = gen_kang_schafer(KsConfig(n=500, c=c, seed=11))
    x = ds.x
    xi1 = 2.0 * np.log(x[:, 0])
    xi2 = (x[:, 1] - 10.0) * (1.0 + np.exp(xi1))
    xi3 = (np.cbrt(x[:, 2]) - 0.6) * 25.0 / xi1
    xi4 = np.sqrt(x[:, 3]) - 20.0 - xi2
    pi = expit(c * (-xi1 + 0.5 * xi2 - 0.25 * xi3 - 0.1 * xi4))
    npt.assert_allclose(ds.true_pi, pi, rtol=1e-9)

    well = gen_kang_schafer(KsConfig(n=500, c=c, seed=11, misspecified=False))
    npt.assert_allclose(well.x, np.column_stack([xi1, xi2, xi3, xi4]), rtol=1e-8, atol=1e-8)
    mean_part = TRUE_MEAN + 27.4 * xi1 + 13.7 * (xi2 + xi3 + xi4)
    eps = ds.y - mean_part
    assert abs(eps.mean()) < 4.0 / np.sqrt(500)
    assert 0.85 < eps.std() < 1.15


def test_variants_share_realization():
    mis = gen_kang_schafer(KsConfig(n=300, seed=5))
    well = gen_kang_schafer(KsConfig(n=300, seed=5, misspecified=False))
    npt.assert_array_equal(mis.a, well.a)
    npt.assert_array_equal(mis.y, well.y)
    npt.assert_array_equal(mis.true_pi, well.true_pi)


def test_treated_fraction_near_half_at_c1():
    a_mean = np.mean([gen_kang_schafer(KsConfig(n=1000, seed=s)).a.mean() for s in range(20)])
    assert abs(a_mean - 0.5) < 0.02


def test_determinism_and_seed_forms():
    d1 = gen_kang_schafer(KsConfig(n=40, seed=(4242, 7)))
    d2 = gen_kang_schafer(KsConfig(n=40, seed=(4242, 7)))
    npt.assert_array_equal(d1.x, d2.x)
    npt.assert_array_equal(d1.y, d2.y)
    npt.assert_array_equal(d1.a, d2.a)
    d3 = gen_kang_schafer(KsConfig(n=40, seed=(4242, 8)))
    assert not np.array_equal(d1.y, d3.y)


def test_flipped_relabels_arms():
    base = gen_kang_schafer(KsConfig(n=200, seed=9))
    flip = gen_kang_schafer(KsConfig(n=200, seed=9, flipped=True))
    npt.assert_array_equal(flip.a, 1.0 - base.a)
    npt.assert_allclose(flip.true_pi, 1.0 - base.true_pi, atol=1e-12)
    npt.assert_array_equal(flip.y, base.y)


def test_flipped_truth_matches_quadrature_oracle():
    assert abs(flipped_truth(1.0) - GH_FLIPPED_TRUTH_C1) < FLIPPED_MC_TOL


def test_flipped_truth_cached():
    assert flipped_truth(1.0) == flipped_truth(1.0)


def test_ks_config_validation():
    with pytest.raises(DataError):
        KsConfig(n=1)
    with pytest.raises(DataError):
        KsConfig(n=10, c=-0.5)


class TestHeavyTail:
    def test_covariate_is_logit_of_pi(self):
        ds = gen_heavy_tail(400, seed=2)
        npt.assert_allclose(ds.x[:, 0], np.log(ds.true_pi / (1.0 - ds.true_pi)), rtol=1e-9)
        assert ds.truth == TRUE_MEAN

    def test_linear_outcome_law(self):
        ds = gen_heavy_tail(50_000, seed=4)
        resid = ds.y - heavy_tail_mean(ds.x)
        assert abs(resid.mean()) < 4.0 / np.sqrt(50_000)
        assert 0.95 < resid.std() < 1.05

    def test_inverse_pi_mean_grows_with_n(self):
        # E[1/pi] is infinite under uniform pi, so the sample mean keeps
        # growing; compare n=1e3 against n=1e5 across seeds.
        small = [gen_heavy_tail(1_000, seed=(77, s)).true_pi for s in range(8)]
        large = [gen_heavy_tail(100_000, seed=(78, s)).true_pi for s in range(8)]
        m_small = np.mean([np.mean(1.0 / p) for p in small])
        m_large = np.mean([np.mean(1.0 / p) for p in large])
        assert m_large > m_small

    def test_degenerate_override_makes_ipw_the_mean(self):
        ds = gen_heavy_tail(300, seed=6, degenerate=True)
        npt.assert_array_equal(ds.true_pi, np.ones(300))
        npt.assert_array_equal(ds.a, np.ones(300))
        ipw = np.mean(ds.a * ds.y / ds.true_pi)
        npt.assert_allclose(ipw, ds.y.mean(), rtol=1e-15)

    def test_determinism(self):
        d1 = gen_heavy_tail(64, seed=123)
        d2 = gen_heavy_tail(64, seed=123)
        npt.assert_array_equal(d1.x, d2.x)
        npt.assert_array_equal(d1.y, d2.y)
        npt.assert_array_equal(d1.a, d2.a)


class TestDatasetValidation:
    def test_rejects_non_binary_treatment(self):
        with pytest.raises(DataError, match="0 or 1"):
            Dataset(x=np.ones((3, 1)), a=np.array([0.0, 0.5, 1.0]), y=np.zeros(3))

    def test_rejects_non_finite_treated_outcome(self):
        with pytest.raises(DataError, match="finite"):
            Dataset(x=np.ones((2, 1)), a=np.array([1.0, 0.0]), y=np.array([np.nan, 0.0]))

    def test_control_outcomes_may_be_nan(self):
        ds = Dataset(x=np.ones((2, 1)), a=np.array([0.0, 1.0]), y=np.array([np.nan, 3.0]))
        assert ds.n == 2

    def test_length_mismatch(self):
        with pytest.raises(DataError, match="mismatch"):
            Dataset(x=np.ones((3, 2)), a=np.zeros(2), y=np.zeros(3))

    def test_arrays_are_readonly(self):
        ds = gen_kang_schafer(KsConfig(n=10, seed=0))
        with pytest.raises(ValueError):
            ds.y[0] = 1.0

    def test_subset_keeps_metadata(self):
        ds = gen_kang_schafer(KsConfig(n=20, seed=0))
        sub = ds.subset(np.arange(5))
        assert sub.n == 5
        assert sub.truth == ds.truth
        npt.assert_array_equal(sub.true_pi, ds.true_pi[:5])


class TestLoadCsv:
    def _write(self, tmp_path, text):
        p = tmp_path / "data.csv"
        p.write_text(text)
        return p

    def test_well_formed(self, tmp_path):
        p = self._write(tmp_path, "x1,x2,a,y\n1.0,2.0,1,3.5\n0.5,1.5,0,0.0\n2.0,0.1,1,4.0\n")
        ds = load_csv(p)
        assert ds.n == 3 and ds.d == 2
        npt.assert_array_equal(ds.a, [1.0, 0.0, 1.0])
        assert ds.true_pi is None

    def test_optional_pi_column(self, tmp_path):
        p = self._write(tmp_path, "x1,a,y,pi\n1.0,1,2.0,0.25\n2.0,0,0.0,0.75\n")
        ds = load_csv(p)
        npt.assert_array_equal(ds.true_pi, [0.25, 0.75])

    def test_missing_column(self, tmp_path):
        p = self._write(tmp_path, "x1,a\n1.0,1\n")
        with pytest.raises(DataError, match="y"):
            load_csv(p)

    def test_non_binary_treatment(self, tmp_path):
        p = self._write(tmp_path, "x1,a,y\n1.0,2,3.0\n")
        with pytest.raises(DataError):
            load_csv(p)

    def test_non_finite_cell_cites_location(self, tmp_path):
        p = self._write(tmp_path, "x1,a,y\n1.0,1,2.0\ninf,0,0.0\n")
        with pytest.raises(DataError, match=r"(row|line).*2|x1"):
            load_csv(p)


class TestFolds:
    def test_partition(self):
        plan = make_folds(23, 4, seed=1)
        all_eval = np.concatenate([plan.eval_idx(j) for j in range(4)])
        npt.assert_array_equal(np.sort(all_eval), np.arange(23))

    def test_train_is_complement(self):
        plan = make_folds(20, 5, seed=2)
        for j in range(5):
            ev = set(plan.eval_idx(j).tolist())
            tr = set(plan.train_idx(j).tolist())
            assert ev.isdisjoint(tr)
            assert ev | tr == set(range(20))

    def test_determinism(self):
        p1 = make_folds(30, 3, seed=(1, 2))
        p2 = make_folds(30, 3, seed=(1, 2))
        for j in range(3):
            npt.assert_array_equal(p1.eval_idx(j), p2.eval_idx(j))

    def test_sizes_balanced(self):
        plan = make_folds(10, 3, seed=0)
        sizes = sorted(len(plan.eval_idx(j)) for j in range(3))
        assert sizes == [3, 3, 4]

    def test_invalid_k(self):
        with pytest.raises(DataError):
            make_folds(10, 1)
        with pytest.raises(DataError):
            make_folds(3, 4)
