import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from maxmargin.constructions import khatri_rao, simplex_baseline, vandermonde
from maxmargin.embedding import (
    EmbeddingPair,
    bias_lift,
    certify,
    dumps_embedding,
    load_embedding,
    loads_embedding,
    materialize_queries,
    save_embedding,
)
from maxmargin.errors import CapExceeded, FormatError, ParameterError
from maxmargin.relevance import explicit, snk

from conftest import dense_scores


def identity_pair():
    A = explicit(2, [[0], [1]])
    return EmbeddingPair(A, np.eye(2), U=np.eye(2))


def oracle_certificate(E):
    S, mask = dense_scores(E)
    pos = S[mask].min()
    neg = S[~mask].max() if (~mask).any() else -1.0
    return pos, neg


class TestCertify:
    def test_identity_case(self):
        c = certify(identity_pair())
        assert c.min_positive == 1.0
        assert c.max_negative == 0.0
        assert c.best_tau == 0.5
        assert c.best_tau_margin == 0.5
        assert c.bias0_margin == 0.0

    def test_simplex_8_4(self):
        c = certify(simplex_baseline(snk(8, 4)))
        np.testing.assert_allclose(c.min_positive, 0.125, atol=1e-12)
        np.testing.assert_allclose(c.max_negative, -0.25, atol=1e-12)
        np.testing.assert_allclose(c.bias0_margin, 0.125, atol=1e-12)

    def test_violating_pair_gives_witness(self):
        A = explicit(2, [[0], [1]])
        E = EmbeddingPair(A, np.eye(2), U=np.array([[0.0, 1.0], [0.0, 1.0]]))
        c = certify(E)
        assert c.bias0_margin <= 0
        assert c.positive_witness == (0, 0)

    def test_empty_matrix_rejected(self):
        with pytest.raises(ParameterError):
            explicit(3, [])

    @pytest.mark.parametrize("n,k", [(6, 1), (7, 2), (8, 3), (12, 3), (10, 2)])
    def test_matches_dense_oracle(self, n, k):
        for E in (simplex_baseline(snk(n, k)), vandermonde(snk(n, k))):
            c = certify(E)
            pos, neg = oracle_certificate(E)
            np.testing.assert_allclose(c.min_positive, pos, atol=1e-12)
            np.testing.assert_allclose(c.max_negative, neg, atol=1e-12)
            assert c.best_tau_margin >= c.bias0_margin
            np.testing.assert_allclose(c.best_tau, (pos + neg) / 2, atol=1e-12)

    def test_full_rows_have_no_negatives(self):
        c = certify(simplex_baseline(snk(4, 4)))
        assert c.negative_witness is None
        assert c.max_negative == -1.0

    def test_sampled_mode(self):
        E = simplex_baseline(snk(12, 3))
        c = certify(E, sample=20, seed=5)
        assert c.mode == "sampled(20,seed=5)"
        assert c.rows_scanned == 20
        assert c.bias0_margin >= certify(E).bias0_margin - 1e-15
        assert certify(E, sample=20, seed=5) == c

    def test_small_blocks_same_result(self):
        E = vandermonde(snk(9, 2))
        assert certify(E, block=7) == certify(E)

    def test_rotation_invariance(self):
        E = materialize_queries(vandermonde(snk(8, 2)))
        Q, _ = np.linalg.qr(np.random.default_rng(0).standard_normal((E.d, E.d)))
        R = EmbeddingPair(E.matrix, E.V @ Q, U=E.U @ Q)
        a, b = certify(E), certify(R)
        for f in ("bias0_margin", "best_tau", "best_tau_margin", "min_positive", "max_negative"):
            np.testing.assert_allclose(getattr(a, f), getattr(b, f), atol=1e-9)


class TestUnitNorm:
    def test_renormalizes_with_warning(self, caplog):
        A = explicit(2, [[0], [1]])
        E = EmbeddingPair(A, 2 * np.eye(2), U=np.eye(2))
        assert "renormalizing" in caplog.text
        np.testing.assert_allclose(np.linalg.norm(E.V, axis=1), 1.0, atol=1e-12)

    def test_rule_queries_are_deterministic(self):
        E = vandermonde(snk(7, 2))
        np.testing.assert_array_equal(E.query(5), E.query(5))
        np.testing.assert_allclose(np.linalg.norm(E.query(5)), 1.0, atol=1e-9)

    def test_exactly_one_query_source(self):
        E = simplex_baseline(snk(4, 2))
        with pytest.raises(ParameterError):
            EmbeddingPair(E.matrix, E.V)


class TestBiasLift:
    def test_zero_tau(self):
        E = materialize_queries(simplex_baseline(snk(6, 2)))
        L = bias_lift(E, 0.0)
        np.testing.assert_array_equal(L.V[:, :-1], E.V)
        np.testing.assert_array_equal(L.V[:, -1], 0.0)
        np.testing.assert_allclose(certify(L).bias0_margin, certify(E).bias0_margin, atol=1e-15)

    def test_identity_example(self):
        L = bias_lift(identity_pair(), 0.5)
        assert certify(L).bias0_margin >= 1 / 3 - 1e-12

    def test_tau_one(self):
        # margin-0.4 relative-bias-1 pattern on two documents
        A = explicit(2, [[0], [1]])
        pos, neg = 1.0, 0.2
        V = np.array([[1.0, 0.0], [neg, math.sqrt(1 - neg**2)]])
        U = np.array([[1.0, 0.0], [neg, math.sqrt(1 - neg**2)]])
        E = EmbeddingPair(A, V, U=U)
        c = certify(E)
        tau = 1.0 - 0.4
        m = c.margin_at(tau)
        np.testing.assert_allclose(m, 0.4, atol=1e-12)
        lifted = certify(bias_lift(E, tau))
        assert lifted.bias0_margin >= m / (1 + tau) - 1e-9
        assert pos > tau > neg
        L1 = certify(bias_lift(E, 1.0))
        assert L1.bias0_margin >= c.margin_at(1.0) / 2 - 1e-9

    def test_rejects_large_tau(self):
        with pytest.raises(ParameterError):
            bias_lift(identity_pair(), 1.5)

    @pytest.mark.parametrize(
        "build",
        [
            lambda: simplex_baseline(snk(8, 3)),
            lambda: vandermonde(snk(8, 2)),
            lambda: khatri_rao(snk(12, 2), 11, seed=1)[0],
        ],
    )
    def test_lift_bound_on_constructions(self, build):
        E = build()
        c = certify(E)
        L = bias_lift(E, c.best_tau)
        assert certify(L).bias0_margin >= c.best_tau_margin / (1 + abs(c.best_tau)) - 1e-9
        assert L.d == E.d + 1


class TestMaterialize:
    def test_bit_identical_certificate(self):
        E = simplex_baseline(snk(5, 2))
        M = materialize_queries(E)
        assert M.U.shape == (10, 6)
        a, b = certify(E), certify(M)
        assert a == b

    def test_dense_unchanged(self):
        M = materialize_queries(simplex_baseline(snk(5, 2)))
        assert materialize_queries(M) is M

    def test_cap(self):
        with pytest.raises(CapExceeded):
            materialize_queries(simplex_baseline(snk(30, 3)), cap=1000)


class TestFiles:
    @pytest.mark.parametrize(
        "build",
        [
            lambda: simplex_baseline(snk(7, 3)),
            lambda: vandermonde(snk(6, 2)),
            lambda: khatri_rao(snk(12, 2), 11, seed=7)[0],
            lambda: materialize_queries(vandermonde(snk(5, 1))),
            lambda: bias_lift(vandermonde(snk(6, 2)), 0.3),
        ],
    )
    def test_roundtrip(self, build, tmp_path):
        E = build()
        path = tmp_path / "e.json"
        save_embedding(E, path)
        F = load_embedding(path)
        np.testing.assert_array_equal(F.V, E.V)
        np.testing.assert_allclose(certify(F).bias0_margin, certify(E).bias0_margin, atol=1e-12)
        assert dumps_embedding(F) == dumps_embedding(E)

    def test_write_queries(self):
        E = simplex_baseline(snk(5, 2))
        F = loads_embedding(dumps_embedding(E, write_queries=True))
        assert F.dense
        np.testing.assert_array_equal(F.U, materialize_queries(E).U)

    def test_bad_json_reports_offset(self):
        with pytest.raises(FormatError, match="byte offset 20"):
            loads_embedding('{"format": "emb-v1",, }')

    @pytest.mark.parametrize(
        "text",
        [
            "[]",
            '{"format": "emb-v2"}',
            '{"format": "emb-v1", "d": 2}',
            '{"format": "emb-v1", "d": 2, "matrix": {"type": "snk", "n": 2, "k": 1}, "V": [[1, 0, 0]]}',
            '{"format": "emb-v1", "d": 2, "matrix": {"type": "snk", "n": 2, "k": 1}, "V": [[1, 0], [0, 1]]}',
            '{"format": "emb-v1", "d": 2, "matrix": {"type": "snk", "n": 2, "k": 9}, "V": [[1, 0], [0, 1]]}',
        ],
    )
    def test_schema_errors(self, text):
        with pytest.raises(FormatError):
            loads_embedding(text)

    def test_floats_roundtrip_exactly(self):
        rng = np.random.default_rng(1)
        V = rng.standard_normal((3, 4))
        E = EmbeddingPair(explicit(3, [[0], [1, 2]]), V, U=rng.standard_normal((2, 4)))
        F = loads_embedding(dumps_embedding(E))
        np.testing.assert_array_equal(F.V, E.V)
        np.testing.assert_array_equal(F.U, E.U)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 7), st.integers(1, 3), st.integers(0, 10**6))
def test_certificate_relations(n, k, seed):
    k = min(k, n)
    rng = np.random.default_rng(seed)
    A = snk(n, k)
    d = 3
    E = EmbeddingPair(A, rng.standard_normal((n, d)), U=rng.standard_normal((A.N, d)))
    c = certify(E)
    assert c.best_tau_margin >= c.bias0_margin
    assert c.bias0_margin == min(c.min_positive, -c.max_negative)
    np.testing.assert_allclose(c.margin_at(c.best_tau), c.best_tau_margin, atol=1e-15)
