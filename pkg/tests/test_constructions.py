import math
from fractions import Fraction

import numpy as np
import pytest
from numpy.polynomial import polynomial as P

from maxmargin.constructions import (
    gaussian_rip,
    khatri_rao,
    khatri_rao_delta,
    khatri_rao_dims,
    khatri_rao_margin,
    rip_estimate,
    sign_change_polynomial,
    simplex_baseline,
    sym_vec,
    vandermonde,
    vandermonde_margin_bound,
    vandermonde_nodes,
)
from maxmargin.embedding import certify
from maxmargin.errors import CapExceeded, ConstructionError, ParameterError
from maxmargin.relevance import explicit, snk

from conftest import closed_form_simplex, dense_scores


class TestSimplex:
    @pytest.mark.parametrize("n,k", [(5, 4), (12, 4), (10, 2), (11, 9)])
    def test_inner_products(self, n, k):
        E = simplex_baseline(snk(n, k))
        assert E.d == n + 1
        S, mask = dense_scores(E)
        pos, neg = closed_form_simplex(k)
        np.testing.assert_allclose(S[mask], pos, atol=1e-12)
        np.testing.assert_allclose(S[~mask], neg, atol=1e-12)

    def test_k4_values(self):
        pos, neg = closed_form_simplex(4)
        assert (pos, neg) == (0.125, -0.25)

    def test_k1_degenerate(self, caplog):
        E = simplex_baseline(snk(5, 1))
        np.testing.assert_allclose(certify(E).min_positive, 0.0, atol=1e-15)
        assert caplog.text

    def test_k100(self):
        c = certify(simplex_baseline(snk(101, 100)))
        np.testing.assert_allclose(c.bias0_margin, 0.045, atol=1e-12)
        assert abs(c.bias0_margin - 0.05) <= 0.1 * 0.05 + 1e-12


class TestVandermonde:
    def test_worked_example(self):
        coef = sign_change_polynomial((0,), 4)
        np.testing.assert_allclose(coef, [-2 / 3, -1.0], atol=1e-15)
        vals = P.polyval(vandermonde_nodes(4), coef)
        np.testing.assert_array_equal(np.sign(vals), [1, -1, -1, -1])

    def test_constant_rows(self):
        np.testing.assert_array_equal(sign_change_polynomial((0, 1, 2), 3), [1.0])

    @pytest.mark.parametrize("n", range(2, 11))
    @pytest.mark.parametrize("k", [1, 2])
    def test_margin_bound(self, n, k):
        if k > n:
            pytest.skip("k > n")
        E = vandermonde(snk(n, k))
        assert E.d == 2 * k + 1
        assert certify(E).bias0_margin >= vandermonde_margin_bound(n, k)

    def test_exact_sign_agreement(self):
        # rational nodes and midpoints, exact polynomial evaluation
        for n in (5, 8):
            t = [Fraction(-1) + Fraction(2 * i, n - 1) for i in range(n)]
            for _, sup in snk(n, 2).rows():
                row = [1 if i in sup else 0 for i in range(n)]
                mids = [(t[i] + t[i + 1]) / 2 for i in range(n - 1) if row[i] != row[i + 1]]
                lead = (1 if row[0] else -1) * (-1) ** len(mids)
                for i in range(n):
                    val = lead
                    for s in mids:
                        val *= t[i] - s
                    assert (val > 0) == bool(row[i])

    def test_explicit_single_support(self):
        A = explicit(6, [[2], [0, 5], [1, 2]])
        S, mask = dense_scores(vandermonde(A))
        assert np.all(S[mask] > 0) and np.all(S[~mask] < 0)


class TestKhatriRao:
    def test_worked_parameters(self):
        assert khatri_rao_dims(11) == 4
        delta = khatri_rao_delta(12, 2, 4, 66)
        np.testing.assert_allclose(delta, 1 / 1320, rtol=1e-12)
        np.testing.assert_allclose(khatri_rao_margin(delta, 2), (1 / 1320) / (2 * (math.sqrt(2) + 1) - 1 / 1320), rtol=1e-12)

    def test_exact_pairs(self):
        E, p = khatri_rao(snk(12, 2), 11, seed=7)
        assert E.d == 11
        S, mask = dense_scores(E)
        np.testing.assert_allclose(S[mask], p.margin, atol=1e-10)
        assert np.all(S[~mask] <= -p.margin + 1e-10)
        np.testing.assert_allclose(p.margin, 1.569e-4, rtol=1e-3)

    def test_dimension_precondition(self):
        with pytest.raises(ParameterError):
            khatri_rao(snk(12, 2), 10)

    def test_retries_exhausted(self):
        # seed 0's first draw fails the projection check for Snk(12,2)
        with pytest.raises(ConstructionError) as info:
            khatri_rao(snk(12, 2), 11, seed=0, max_retries=1)
        j, i, proj = info.value.worst
        assert proj > 1 - 1 / 1320
        with pytest.raises(ParameterError):
            khatri_rao(snk(12, 2), 11, max_retries=0)

    def test_vec_isometry(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            A, B = rng.standard_normal((2, 5, 5))
            A, B = A + A.T, B + B.T
            np.testing.assert_allclose(sym_vec(A) @ sym_vec(B), np.sum(A * B), atol=1e-10)

    def test_projector_norm(self):
        from maxmargin.constructions import _projector

        a = np.random.default_rng(2).standard_normal((3, 6))
        Q = _projector(a)
        Pm = Q @ Q.T
        np.testing.assert_allclose(np.linalg.norm(sym_vec(Pm)), math.sqrt(3), atol=1e-9)
        for row in a:
            np.testing.assert_allclose(row @ Pm @ row, row @ row, atol=1e-12)

    def test_success_rate(self):
        ok = 0
        for seed in range(20):
            try:
                khatri_rao(snk(10, 2), 11, seed=seed, max_retries=20)
                ok += 1
            except ConstructionError:
                pass
        assert ok >= 19


class TestGaussianRip:
    def test_small_dimension_is_rejected_by_offsupport_check(self):
        # at d=30 the interpolating queries overshoot the 1/(4 sqrt k) cap
        with pytest.raises(ConstructionError) as info:
            gaussian_rip(snk(40, 2), 30, seed=0, max_retries=3)
        assert info.value.worst[2] > 1 / (4 * math.sqrt(2))

    def test_passing_seed_has_positive_margin(self):
        E, p = gaussian_rip(snk(40, 2), 800, seed=0)
        assert E.d == 800
        assert p.offsupport_max <= p.offsupport_cap
        assert certify(E).bias0_margin > 0

    def test_interpolation_constraint(self):
        E, p = gaussian_rip(snk(12, 2), 300, seed=1)
        rule = E.rule
        for j, sup in E.matrix.rows():
            from maxmargin.constructions import _interpolator

            u = _interpolator(rule.Vt, sup, 2)
            np.testing.assert_allclose(u @ rule.Vt[:, list(sup)], 1 / math.sqrt(2), atol=1e-8)

    def test_k1_constants(self):
        E, p = gaussian_rip(snk(6, 1), 200, seed=0)
        assert p.offsupport_cap == 0.25
        np.testing.assert_allclose(E.rule._lift, math.sqrt(5 / 8), rtol=1e-15)


class TestRip:
    def test_orthonormal(self):
        Q, _ = np.linalg.qr(np.random.default_rng(0).standard_normal((6, 6)))
        for s in range(1, 7):
            assert rip_estimate(Q, s) < 1e-12

    def test_duplicate_column(self):
        V = np.array([[1.0, 1.0], [0.0, 0.0]])
        np.testing.assert_allclose(rip_estimate(V, 2), 1.0, atol=1e-12)

    def test_monotone_in_s(self):
        V = np.random.default_rng(4).standard_normal((10, 9)) / math.sqrt(10)
        vals = [rip_estimate(V, s) for s in range(1, 6)]
        assert all(a <= b + 1e-12 for a, b in zip(vals, vals[1:]))

    def test_cap(self):
        with pytest.raises(CapExceeded):
            rip_estimate(np.eye(40), 10, cap=1000)
