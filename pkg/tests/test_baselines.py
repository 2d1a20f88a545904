import math
import tracemalloc

import numpy as np
import pytest

from rcinfer.baselines import (MAX_BRUTE_FORCE_VARS, brute_force, brute_force_log_z,
                               chain_marginals, chain_memory_bytes, quadratic_tree_marginals)
from rcinfer.convtree import ZeroMassError, marginals
from rcinfer.model import RCModel, balanced_tree, hard_count_table
from rcinfer.synthetic import random_rc_model, random_standard_model


class TestChain:
    def test_single_variable(self):
        u = np.array([[0.2, -0.4]])
        f = np.array([0.5, 1.1])
        p = np.exp(u[0] + f)
        res = chain_marginals(u, f)
        assert res.leaf_marginals[0] == pytest.approx(p[1] / p.sum())
        assert res.log_z == pytest.approx(math.log(p.sum()))

    def test_truncated_full_equals_untruncated(self, rng):
        m = random_standard_model(rng, 40)
        a = chain_marginals(m.unary, m.tables[m.tree.root])
        b = chain_marginals(m.unary, m.tables[m.tree.root], max_count=40)
        np.testing.assert_array_equal(a.leaf_marginals, b.leaf_marginals)
        assert a.log_z == b.log_z

    def test_truncated_matches_tree(self, rng):
        u = rng.standard_normal((60, 2))
        log_f = rng.standard_normal(61)
        log_f[8:] = -np.inf
        res = chain_marginals(u, log_f, max_count=7)
        ref = marginals(RCModel.standard(u, log_f))
        np.testing.assert_allclose(res.leaf_marginals, ref.leaf_marginals, atol=1e-10)
        assert res.log_z == pytest.approx(ref.log_z, rel=1e-12)

    def test_mass_above_cap(self):
        with pytest.raises(ValueError):
            chain_marginals(np.zeros((4, 2)), np.zeros(5), max_count=2)

    def test_matches_convtree(self, rng):
        for _ in range(30):
            D = int(rng.integers(2, 200))
            m = random_standard_model(rng, D, p_neg_inf=0.3)
            a = chain_marginals(m.unary, m.tables[m.tree.root])
            b = marginals(m)
            np.testing.assert_allclose(a.leaf_marginals, b.leaf_marginals, atol=1e-9)
            np.testing.assert_allclose(a.root_counts, b.root_counts, atol=1e-9)
            assert a.log_z == pytest.approx(b.log_z, rel=1e-9)

    def test_zero_mass(self):
        u = np.column_stack([np.zeros(3), np.full(3, -np.inf)])
        with pytest.raises(ZeroMassError):
            chain_marginals(u, hard_count_table(3, {2}))

    def test_memory_grows_quadratically(self):
        def peak(D):
            m = random_standard_model(np.random.default_rng(0), D)
            tracemalloc.start()
            chain_marginals(m.unary, m.tables[m.tree.root])
            _, top = tracemalloc.get_traced_memory()
            tracemalloc.stop()
            return top
        assert peak(4096) >= 3.5 * peak(2048)
        assert chain_memory_bytes(4096) / chain_memory_bytes(2048) > 3.9


class TestQuadraticTree:
    def test_identical_to_naive(self, rng):
        m = random_rc_model(rng, 70)
        a = quadratic_tree_marginals(m)
        b = marginals(m, backend="naive")
        np.testing.assert_array_equal(a.leaf_marginals, b.leaf_marginals)
        assert a.log_z == b.log_z

    def test_oracle(self, rng):
        for _ in range(10):
            m = random_rc_model(rng, 12)
            np.testing.assert_allclose(quadratic_tree_marginals(m).leaf_marginals,
                                       brute_force(m).leaf_marginals, atol=1e-9)


class TestBruteForce:
    def test_fair_pair(self):
        res = brute_force(RCModel(np.zeros((2, 2)), balanced_tree(2)))
        assert res.log_z == pytest.approx(2 * math.log(2))
        np.testing.assert_allclose(res.leaf_marginals, 0.5)
        assert res.joint.sum() == pytest.approx(1.0, abs=1e-12)

    def test_hard_zero(self, rng):
        u = rng.standard_normal((5, 2))
        res = brute_force(RCModel.standard(u, hard_count_table(5, {0})))
        np.testing.assert_allclose(res.leaf_marginals, 0.0)
        assert res.log_z == pytest.approx(u[:, 0].sum())

    def test_refuses_large(self):
        D = MAX_BRUTE_FORCE_VARS + 1
        with pytest.raises(ValueError):
            brute_force(RCModel(np.zeros((D, 2)), balanced_tree(D)))

    def test_log_z_helper(self, rng):
        m = random_rc_model(rng, 10)
        assert brute_force_log_z(m) == pytest.approx(brute_force(m).log_z, rel=1e-12)

    def test_three_way(self, rng):
        for _ in range(100):
            m = random_standard_model(rng, int(rng.integers(2, 15)), p_neg_inf=0.2)
            ref = brute_force(m)
            chain = chain_marginals(m.unary, m.tables[m.tree.root])
            for res in (chain, marginals(m, "fft"), marginals(m, "naive")):
                np.testing.assert_allclose(res.leaf_marginals, ref.leaf_marginals, atol=1e-10)
                assert res.log_z == pytest.approx(ref.log_z, rel=1e-9)

    def test_joint_omitted_above_20(self):
        m = RCModel(np.zeros((21, 2)), balanced_tree(21))
        res = brute_force(m)
        assert res.joint is None
        assert res.log_z == pytest.approx(21 * math.log(2))
