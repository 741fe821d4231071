import itertools
import math

import numpy as np
import pytest
from scipy import stats

from maxmargin.bounds import (
    SignIncompatible,
    beta_tail_bound,
    beta_tail_montecarlo,
    disjoint_family,
    gamma_ratio,
    identity_J,
    operator_norm,
    packing_audit,
    packing_dim_bound,
    snk_J,
    spectral_bound,
    weller_dim_bound,
)
from maxmargin.constructions import simplex_baseline, vandermonde
from maxmargin.embedding import certify
from maxmargin.errors import ParameterError
from maxmargin.relevance import explicit, snk


def identity_matrix(n):
    return explicit(n, [(i,) for i in range(n)])


class TestSpectral:
    def test_identity_exact(self):
        r = spectral_bound(identity_matrix(4))
        assert r.value == 0.5
        assert r.direction == "upper-on-margin"

    @pytest.mark.parametrize("n", [3, 5, 9])
    def test_identity_formula(self, n):
        np.testing.assert_allclose(spectral_bound(identity_matrix(n)).value, n / (3 * n - 4), rtol=1e-10)
        np.testing.assert_allclose(np.abs(identity_J(n)).sum(), 1.0, atol=1e-12)

    @pytest.mark.parametrize("n,k", [(10, 2), (9, 3), (12, 5), (6, 6)])
    def test_snk_J_normalized(self, n, k):
        np.testing.assert_allclose(np.abs(snk_J(n, k)).sum(), 1.0, atol=1e-12)

    def test_snk_10_2_against_svd(self):
        J = snk_J(10, 2)
        ref = np.linalg.svd(J, compute_uv=False)[0] * math.sqrt(J.size)
        val = spectral_bound(snk(10, 2)).value
        np.testing.assert_allclose(val, ref, rtol=1e-9)
        lo = 1 / (2 * math.sqrt(2))
        assert lo <= val <= 1.2 * lo

    def test_operator_norm_random(self):
        rng = np.random.default_rng(0)
        for shape in [(5, 3), (3, 7), (20, 20)]:
            J = rng.standard_normal(shape)
            np.testing.assert_allclose(operator_norm(J), np.linalg.svd(J, compute_uv=False)[0], rtol=1e-9)

    def test_sign_witness(self):
        A = identity_matrix(3)
        J = -identity_J(3)
        with pytest.raises(SignIncompatible) as info:
            spectral_bound(A, J)
        assert info.value.witness == (0, 0)

    def test_normalization(self):
        with pytest.raises(ParameterError):
            spectral_bound(identity_matrix(4), 2 * identity_J(4))

    @pytest.mark.parametrize("n,k", [(6, 2), (8, 3), (10, 2), (12, 3)])
    def test_constructions_respect_bound(self, n, k):
        bound = spectral_bound(snk(n, k)).value
        for E in (simplex_baseline(snk(n, k)), vandermonde(snk(n, k))):
            c = certify(E)
            assert c.bias0_margin <= bound + 1e-6
            assert c.best_tau_margin <= bound + 1e-6


class TestDimensionBounds:
    def test_weller_value(self):
        np.testing.assert_allclose(weller_dim_bound(10, 2, 0.25).value, math.log(45) / math.log(5), rtol=1e-12)
        np.testing.assert_allclose(weller_dim_bound(10, 2, 0.25).value, 2.3652, atol=1e-4)

    def test_weller_edges(self):
        assert weller_dim_bound(7, 7, 0.3).value == 0.0
        big = weller_dim_bound(10, 2, 1e6).value
        assert big > 1e6
        with pytest.raises(ParameterError):
            weller_dim_bound(10, 2, 0.0)

    def test_weller_monotone(self):
        vals = [weller_dim_bound(12, 3, m).value for m in (0.05, 0.1, 0.2, 0.4)]
        assert vals == sorted(vals)

    @pytest.mark.parametrize("n,k", [(6, 2), (9, 3), (10, 4)])
    def test_constructions_meet_weller(self, n, k):
        for E in (simplex_baseline(snk(n, k)), vandermonde(snk(n, k))):
            assert E.d >= weller_dim_bound(n, k, certify(E).bias0_margin).value - 1e-6

    def test_packing_value(self):
        # 2 ln 8 / ln(1 + 2 / (0.25 sqrt 2))
        ref = 2 * math.log(8) / math.log(1 + 2 / (0.25 * math.sqrt(2)))
        r = packing_dim_bound(16, 2, 0.25, 1.0)
        np.testing.assert_allclose(r.value, ref, rtol=1e-12)
        np.testing.assert_allclose(r.value, 2.19391, atol=1e-5)
        assert "constant" in r.notes

    def test_packing_maximal_margin(self):
        k = 4
        r = packing_dim_bound(16, k, 1 / math.sqrt(k), 1.0)
        np.testing.assert_allclose(r.value, k * math.log(4) / math.log(3), rtol=1e-12)

    def test_packing_precondition(self):
        with pytest.raises(ParameterError):
            packing_dim_bound(5, 2, 0.25, 1.0)


class TestFamily:
    def test_singletons(self):
        fam, short = disjoint_family(16, 1, seed=0)
        assert not short
        assert len(fam) == math.ceil(math.sqrt(16 / 4))
        assert len(set(fam)) == len(fam)

    def test_pairs_target(self):
        fam, short = disjoint_family(16, 2, seed=3)
        assert len(fam) == 2 and not short
        assert not set(fam[0]) & set(fam[1])

    @pytest.mark.parametrize("n,s,seed", [(40, 4, 0), (64, 6, 1), (30, 3, 2), (200, 8, 3)])
    def test_intersection_property(self, n, s, seed):
        fam, _ = disjoint_family(n, s, seed=seed)
        assert all(len(T) == s for T in fam)
        for a, b in itertools.combinations(fam, 2):
            assert 2 * len(set(a) & set(b)) < s

    def test_short_flag(self):
        fam, short = disjoint_family(200, 8, seed=0, max_attempts=3)
        assert short and len(fam) <= 3


class TestPackingAudit:
    def test_simplex_s1(self):
        E = simplex_baseline(snk(32, 4))
        a = packing_audit(E, s=1)
        np.testing.assert_allclose(a.y_norms, 1.0, atol=1e-12)
        assert a.violations == 0
        assert "clamped" in a.notes or a.s == 1

    def test_default_s_is_clamped(self):
        a = packing_audit(simplex_baseline(snk(12, 3)))
        assert a.s == 1
        assert "clamped" in a.notes

    def test_norms_below_sqrt_s(self):
        E = vandermonde(snk(10, 2))
        a = packing_audit(E, s=4, seed=1)
        assert all(v <= 2 + 1e-9 for v in a.y_norms)

    def test_detects_fake_margin(self):
        E = simplex_baseline(snk(32, 4))
        a = packing_audit(E, s=2, m=10.0)
        assert a.violations > 0

    def test_s_limit(self):
        with pytest.raises(ParameterError):
            packing_audit(simplex_baseline(snk(30, 2)), s=21)

    def test_sparse_norm_spot_check(self):
        # ||V x|| >= m ||x||_1 for k-sparse x
        E = simplex_baseline(snk(12, 3))
        m = certify(E).bias0_margin
        rng = np.random.default_rng(0)
        V = np.asarray(E.V)
        for _ in range(100):
            x = np.zeros(12)
            idx = rng.choice(12, size=3, replace=False)
            x[idx] = rng.standard_normal(3)
            assert np.linalg.norm(x @ V) >= m * np.abs(x).sum() - 1e-9


class TestBeta:
    def test_uniform_case(self):
        assert beta_tail_bound(2, 4, 0.5) == 0.5
        assert stats.beta(1, 1).cdf(0.5) == 0.5

    def test_beta_1_2(self):
        assert beta_tail_bound(2, 6, 0.25) == 0.5
        np.testing.assert_allclose(stats.beta(1, 2).cdf(0.25), 1 - 0.75**2)

    def test_delta_one_not_clamped(self):
        val = beta_tail_bound(4, 12, 1.0)
        np.testing.assert_allclose(val, math.gamma(6) / (math.gamma(2) * math.gamma(4)))
        assert val > 1

    @pytest.mark.parametrize("s,r,delta", [(2, 6, 0.25), (2, 8, 0.1), (4, 12, 0.3), (3, 9, 0.2)])
    def test_dominates_exact_cdf(self, s, r, delta):
        assert stats.beta(s / 2, (r - s) / 2).cdf(delta) <= beta_tail_bound(s, r, delta) + 1e-15

    def test_montecarlo_matches_beta(self):
        est, se = beta_tail_montecarlo(4, 12, 0.3, trials=20_000, seed=1)
        assert abs(est - stats.beta(2, 4).cdf(0.3)) <= 4 * se

    @pytest.mark.parametrize("s,r,delta", [(2, 2, 0.5), (1, 5, 0.5), (2, 6, 0.0), (2, 6, 1.5)])
    def test_preconditions(self, s, r, delta):
        with pytest.raises(ParameterError):
            beta_tail_bound(s, r, delta)
        with pytest.raises(ParameterError):
            beta_tail_montecarlo(s, r, delta, trials=10)

    def test_delta_one_estimate(self):
        assert beta_tail_montecarlo(2, 6, 1.0, trials=1000)[0] == 1.0


class TestGammaRatio:
    def test_worked_values(self):
        np.testing.assert_allclose(gamma_ratio(1, 1), 1.0, rtol=1e-14)
        np.testing.assert_allclose(gamma_ratio(1, 2), math.sqrt(0.5), rtol=1e-14)

    def test_domain(self):
        with pytest.raises(ParameterError):
            gamma_ratio(0.4, 1)

    def test_grid_constants(self):
        # the ratio to y/(x+y) on [0.5, 100]^2, computed once and frozen
        g = np.linspace(0.5, 100, 200)
        R = np.array([[gamma_ratio(x, y) / (y / (x + y)) for y in g] for x in g])
        np.testing.assert_allclose(R.max(), gamma_ratio(0.5, 0.5) / 0.5, rtol=1e-12)
        np.testing.assert_allclose(R.max(), 2 * math.pi**2, rtol=1e-12)
        assert 0.37 < R.min() < 0.38
