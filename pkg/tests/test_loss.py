import math

import numpy as np
import pytest

from eqco.loss import (
    LossConfig,
    QueryInstance,
    batch_infonce,
    eqco_margin,
    grad_norm_bound_expectation,
    grad_norm_bound_pointwise,
    infonce_forward,
    infonce_forward_weighted,
    infonce_grad,
)
from eqco.numerics import normalize_rows
from eqco.rng import SeededRng, unit_sphere

H = 1e-6
REL_TOL = 1e-5


def random_instance(rng, d, k):
    q = unit_sphere(rng, 1, d)[0]
    k0 = unit_sphere(rng, 1, d)[0]
    negs = unit_sphere(rng, k, d)
    return QueryInstance(q=q, k0=k0, negs=negs)


def random_config(rng, k):
    tau = 0.05 + 0.95 * float(rng.uniform(1)[0])
    if float(rng.uniform(1)[0]) < 0.5:
        alpha = math.exp(float(rng.uniform(1)[0]) * math.log(1e5))
        return LossConfig(k=k, tau=tau, margin_mode="eqco", alpha=alpha)
    margin = float(rng.standard_normal(1)[0]) * 0.5
    return LossConfig(k=k, tau=tau, margin_mode="fixed", margin=margin)


def loss_of_raw(q_raw, k0_raw, negs_raw, cfg):
    """Loss as a function of raw (pre-normalization-check) unit inputs."""
    inst = QueryInstance(
        q=q_raw / np.linalg.norm(q_raw),
        k0=k0_raw / np.linalg.norm(k0_raw),
        negs=normalize_rows(negs_raw),
    )
    return infonce_forward(inst, cfg)


def fd_grads(inst, cfg):
    """Central finite differences of the raw loss, before normalization.

    The analytic gradients treat q, k0, negs as free points, so the FD
    oracle perturbs coordinates directly and renormalization is skipped by
    evaluating the unnormalized softmax formula on the perturbed points.
    """

    def f(q, k0, negs):
        pos = (float(q @ k0) - cfg.effective_margin) / cfg.tau
        neg = (negs @ q) / cfg.tau
        m = max(pos, float(np.max(neg)))
        return math.log(math.exp(pos - m) + float(np.sum(np.exp(neg - m)))) + m - pos

    def fd(point, apply):
        g = np.zeros_like(point)
        for i in range(point.size):
            e = np.zeros_like(point.reshape(-1))
            e[i] = H
            e = e.reshape(point.shape)
            g.reshape(-1)[i] = (apply(point + e) - apply(point - e)) / (2 * H)
        return g

    gq = fd(inst.q, lambda q: f(q, inst.k0, inst.negs))
    gk0 = fd(inst.k0, lambda k0: f(inst.q, k0, inst.negs))
    gn = fd(inst.negs, lambda negs: f(inst.q, inst.k0, negs))
    return gq, gk0, gn


def assert_close_rel(analytic, numeric, norm):
    denom = max(1.0, norm)
    assert np.max(np.abs(analytic - numeric)) / denom < REL_TOL


class TestEqcoMargin:
    def test_alpha_equals_k_gives_zero(self):
        assert eqco_margin(0.2, 16.0, 16) == 0.0

    def test_moco_style_value(self):
        m = eqco_margin(0.2, 65536.0, 256)
        assert m == pytest.approx(1.109035, abs=1e-6)
        assert 256 * math.exp(m / 0.2) == pytest.approx(65536.0, rel=1e-12)

    def test_back_substitution(self):
        m = eqco_margin(0.2, 4096.0, 256)
        assert m == pytest.approx(0.554518, abs=1e-6)
        assert 256 * math.exp(m / 0.2) == pytest.approx(4096.0, rel=1e-12)

    def test_domain_errors(self):
        with pytest.raises(ValueError):
            eqco_margin(0.0, 1.0, 1)
        with pytest.raises(ValueError):
            eqco_margin(0.2, -1.0, 1)


class TestForward:
    def test_equal_logits_k4(self):
        inst = QueryInstance(
            q=np.array([1.0, 0, 0, 0]),
            k0=np.array([0, 1.0, 0, 0]),
            negs=np.array([[0, 0, 1.0, 0], [0, 0, -1.0, 0], [0, 0, 0, 1.0], [0, 0, 0, -1.0]]),
        )
        cfg = LossConfig(k=4, tau=1.0, margin_mode="fixed", margin=0.0)
        assert infonce_forward(inst, cfg) == pytest.approx(math.log(5), rel=1e-12)

    def test_two_term_softmax_by_hand(self):
        inst = QueryInstance(q=np.array([1.0, 0]), k0=np.array([1.0, 0]), negs=np.array([[0, 1.0]]))
        cfg = LossConfig(k=1, tau=1.0, margin_mode="fixed", margin=0.0)
        assert infonce_forward(inst, cfg) == pytest.approx(0.313262, abs=1e-6)

    def test_margin_cancels_positive_logit(self):
        inst = QueryInstance(q=np.array([1.0, 0]), k0=np.array([1.0, 0]), negs=np.array([[0, 1.0]]))
        cfg = LossConfig(k=1, tau=1.0, margin_mode="fixed", margin=1.0)
        assert infonce_forward(inst, cfg) == pytest.approx(math.log(2), rel=1e-12)

    def test_loss_strictly_positive(self):
        rng = SeededRng(55)
        for _ in range(300):
            k = int(rng.integers(8)) + 1
            inst = random_instance(rng, 6, k)
            cfg = random_config(rng, k)
            assert infonce_forward(inst, cfg) > 0.0

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(ValueError):
            QueryInstance(q=np.array([1.0, 0]), k0=np.array([1.0, 0, 0]), negs=np.array([[0, 1.0]]))

    def test_non_unit_rejected(self):
        with pytest.raises(ValueError):
            QueryInstance(q=np.array([2.0, 0]), k0=np.array([1.0, 0]), negs=np.array([[0, 1.0]]))


class TestWeightedForm:
    def test_k_independent_equal_logit_value(self):
        for k in (1, 4, 16):
            q = np.zeros(4)
            q[0] = 1.0
            k0 = np.zeros(4)
            k0[1] = 1.0
            # all logits equal: q.k0 = q.ki = 0
            negs = np.array([[0, 0, 1.0, 0]] * k)
            inst = QueryInstance(q=q, k0=k0, negs=negs)
            assert infonce_forward_weighted(inst, 1.0, 256.0) == pytest.approx(math.log(257), rel=1e-12)

    def test_alpha_equals_k_is_plain_infonce(self):
        inst = QueryInstance(
            q=np.array([1.0, 0, 0, 0]),
            k0=np.array([0, 1.0, 0, 0]),
            negs=np.array([[0, 0, 1.0, 0], [0, 0, -1.0, 0], [0, 0, 0, 1.0], [0, 0, 0, -1.0]]),
        )
        assert infonce_forward_weighted(inst, 1.0, 4.0) == pytest.approx(math.log(5), rel=1e-12)

    def test_matches_margin_form_single_negative(self):
        inst = QueryInstance(q=np.array([1.0, 0]), k0=np.array([1.0, 0]), negs=np.array([[0, 1.0]]))
        assert infonce_forward_weighted(inst, 1.0, 1.0) == pytest.approx(0.313262, abs=1e-6)

    def test_form_equivalence_sweep(self):
        """Margin route and weighted route agree to 1e-12 relative."""
        rng = SeededRng(1234)
        for _ in range(400):
            k = [1, 4, 64, 512][int(rng.integers(4))]
            d = [2, 8, 128][int(rng.integers(3))]
            inst = random_instance(rng, d, k)
            tau = 0.05 + 0.95 * float(rng.uniform(1)[0])
            alpha = math.exp(float(rng.uniform(1)[0]) * math.log(1e5))
            margin_form = infonce_forward(inst, LossConfig(k=k, tau=tau, margin_mode="eqco", alpha=alpha))
            weighted = infonce_forward_weighted(inst, tau, alpha)
            # relative with the max(1, |x|) floor used by every oracle here
            assert abs(margin_form - weighted) / max(abs(weighted), 1.0) < 1e-12


class TestGradients:
    def test_hand_worked_two_dim_case(self):
        inst = QueryInstance(q=np.array([1.0, 0]), k0=np.array([1.0, 0]), negs=np.array([[0, 1.0]]))
        g = infonce_grad(inst, LossConfig(k=1, tau=1.0, margin_mode="fixed", margin=0.0))
        np.testing.assert_allclose(g.grad_q, [-0.268941, 0.268941], atol=1e-6)
        assert np.linalg.norm(g.grad_q) == pytest.approx(0.380340, abs=1e-6)

    def test_confident_positive_has_vanishing_gradient(self):
        # A strongly negative margin drives p0 toward 1 and grad_q toward 0.
        inst = QueryInstance(q=np.array([1.0, 0]), k0=np.array([1.0, 0]), negs=np.array([[0, 1.0]]))
        g = infonce_grad(inst, LossConfig(k=1, tau=1.0, margin_mode="fixed", margin=-30.0))
        assert np.linalg.norm(g.grad_q) < 1e-12
        assert np.linalg.norm(g.grad_k0) < 1e-12

    def test_finite_difference_sweep(self):
        rng = SeededRng(99)
        for _ in range(60):
            k = [1, 4, 16][int(rng.integers(3))]
            d = [2, 8][int(rng.integers(2))]
            inst = random_instance(rng, d, k)
            cfg = random_config(rng, k)
            g = infonce_grad(inst, cfg)
            fq, fk0, fn = fd_grads(inst, cfg)
            assert_close_rel(g.grad_q, fq, float(np.linalg.norm(fq)))
            assert_close_rel(g.grad_k0, fk0, float(np.linalg.norm(fk0)))
            assert_close_rel(g.grad_negs, fn, float(np.linalg.norm(fn)))

    def test_value_matches_forward(self):
        rng = SeededRng(7)
        inst = random_instance(rng, 8, 16)
        cfg = LossConfig(k=16, tau=0.2, margin_mode="eqco", alpha=256.0)
        g = infonce_grad(inst, cfg)
        assert g.value == pytest.approx(infonce_forward(inst, cfg), rel=1e-12)


class TestPointwiseBound:
    def test_hand_case(self):
        inst = QueryInstance(q=np.array([1.0, 0]), k0=np.array([1.0, 0]), negs=np.array([[0, 1.0]]))
        b = grad_norm_bound_pointwise(inst, 1.0, 1.0)
        assert b == pytest.approx(0.537882, abs=1e-6)
        g = infonce_grad(inst, LossConfig(k=1, tau=1.0, margin_mode="eqco", alpha=1.0))
        assert b >= np.linalg.norm(g.grad_q)

    def test_confident_positive_bound_vanishes(self):
        inst = QueryInstance(
            q=np.array([1.0, 0]), k0=np.array([1.0, 0]), negs=np.array([[-1.0, 0]])
        )
        assert grad_norm_bound_pointwise(inst, 0.05, 1.0) < 1e-10

    def test_bound_dominates_gradient_norm_sweep(self):
        rng = SeededRng(2024)
        violations = 0
        for _ in range(2000):
            k = [1, 4, 64, 512][int(rng.integers(4))]
            d = [2, 8][int(rng.integers(2))]
            inst = random_instance(rng, d, k)
            tau = 0.05 + 0.95 * float(rng.uniform(1)[0])
            alpha = math.exp(float(rng.uniform(1)[0]) * math.log(1e4))
            bound = grad_norm_bound_pointwise(inst, tau, alpha)
            g = infonce_grad(inst, LossConfig(k=k, tau=tau, margin_mode="eqco", alpha=alpha))
            if float(np.linalg.norm(g.grad_q)) > bound:
                violations += 1
        assert violations == 0


class TestExpectationBound:
    def test_uniform_sphere_holds(self):
        def sampler(rng, n):
            return unit_sphere(rng, n, 8)

        q = np.zeros(8)
        q[0] = 1.0
        check = grad_norm_bound_expectation(q, q, sampler, 0.2, 64.0, 64, 2000, SeededRng(5))
        assert check.holds
        assert check.mc_mean_norm <= check.theorem_bound + 3 * check.mc_std_error

    def test_bound_value_k_independent(self):
        """The bound uses alpha and E[s] only; K enters only via E[s] noise."""

        def sampler(rng, n):
            return unit_sphere(rng, n, 8)

        q = np.zeros(8)
        q[0] = 1.0
        k0 = np.zeros(8)
        k0[1] = 1.0
        bounds = []
        for i, k in enumerate((16, 256)):
            check = grad_norm_bound_expectation(q, k0, sampler, 0.2, 128.0, k, 2000, SeededRng(10 + i))
            bounds.append(check.theorem_bound)
        assert abs(bounds[0] - bounds[1]) < 0.02 * max(bounds)

    def test_point_mass_sampler_degenerate(self):
        q = np.array([1.0, 0.0])
        k0 = np.array([1.0, 0.0])

        def sampler(rng, n):
            rng.uniform(n)  # consume stream like a real sampler
            return np.tile(k0, (n, 1))

        check = grad_norm_bound_expectation(q, k0, sampler, 0.5, 1.0, 1, 1000, SeededRng(0))
        assert check.mc_std_error == pytest.approx(0.0, abs=1e-15)
        assert check.holds

    def test_rejects_small_sample_count(self):
        with pytest.raises(ValueError):
            grad_norm_bound_expectation(
                np.array([1.0, 0]), np.array([1.0, 0]), lambda r, n: unit_sphere(r, n, 2), 0.2, 8.0, 8, 10, SeededRng(0)
            )


class TestBatchLoss:
    def test_batch_mean_equals_mean_of_per_query(self):
        rng = SeededRng(31)
        n, d, k = 32, 8, 16
        queries = unit_sphere(rng, n, d)
        positives = unit_sphere(rng, n, d)
        pool = unit_sphere(rng, k, d)
        cfg = LossConfig(k=k, tau=0.2, margin_mode="eqco", alpha=512.0)
        res = batch_infonce(queries, positives, pool, None, cfg)
        per_query = [
            infonce_forward(QueryInstance(q=queries[j], k0=positives[j], negs=pool), cfg)
            for j in range(n)
        ]
        assert res.loss == pytest.approx(float(np.mean(per_query)), rel=1e-12)

    def test_batch_grads_match_instance_grads(self):
        rng = SeededRng(32)
        n, d, k = 8, 4, 8
        queries = unit_sphere(rng, n, d)
        positives = unit_sphere(rng, n, d)
        pool = unit_sphere(rng, k, d)
        cfg = LossConfig(k=k, tau=0.3, margin_mode="fixed", margin=0.25)
        res = batch_infonce(queries, positives, pool, None, cfg)
        for j in range(n):
            g = infonce_grad(QueryInstance(q=queries[j], k0=positives[j], negs=pool), cfg)
            np.testing.assert_allclose(res.grad_q[j], g.grad_q, rtol=1e-10, atol=1e-12)

    def test_indexed_negatives_match_explicit(self):
        rng = SeededRng(33)
        n, d, k = 6, 5, 3
        queries = unit_sphere(rng, n, d)
        positives = unit_sphere(rng, n, d)
        pool = unit_sphere(rng, n, d)
        idx = np.stack([np.array([(j + 1) % n, (j + 2) % n, (j + 3) % n]) for j in range(n)])
        cfg = LossConfig(k=k, tau=0.5, margin_mode="eqco", alpha=16.0)
        res = batch_infonce(queries, positives, pool, idx, cfg)
        for j in range(n):
            inst = QueryInstance(q=queries[j], k0=positives[j], negs=pool[idx[j]])
            assert res.per_query_loss[j] == pytest.approx(infonce_forward(inst, cfg), rel=1e-12)

    def test_fixed_zero_margin_bitwise_equals_eqco_alpha_k(self):
        rng = SeededRng(34)
        n, d, k = 16, 8, 32
        queries = unit_sphere(rng, n, d)
        positives = unit_sphere(rng, n, d)
        pool = unit_sphere(rng, k, d)
        res_a = batch_infonce(queries, positives, pool, None, LossConfig(k=k, tau=0.2, margin_mode="fixed", margin=0.0))
        res_b = batch_infonce(queries, positives, pool, None, LossConfig(k=k, tau=0.2, margin_mode="eqco", alpha=float(k)))
        assert res_a.per_query_loss.tobytes() == res_b.per_query_loss.tobytes()
        assert res_a.grad_q.tobytes() == res_b.grad_q.tobytes()

    def test_theorem_bound_dominates_mean_norm(self):
        rng = SeededRng(35)
        n, d, k = 64, 8, 32
        queries = unit_sphere(rng, n, d)
        positives = unit_sphere(rng, n, d)
        pool = unit_sphere(rng, k, d)
        cfg = LossConfig(k=k, tau=0.2, margin_mode="eqco", alpha=256.0)
        res = batch_infonce(queries, positives, pool, None, cfg)
        assert float(np.mean(res.grad_norms)) <= float(np.mean(res.theorem_bound)) + 1e-9


class TestNormalizerIdentity:
    def test_eqco_normalizer_equals_log1p_alpha(self):
        rng = SeededRng(77)
        for _ in range(300):
            k = int(rng.integers(1024)) + 1
            tau = 0.05 + 0.95 * float(rng.uniform(1)[0])
            alpha = math.exp(float(rng.uniform(1)[0]) * math.log(1e5))
            cfg = LossConfig(k=k, tau=tau, margin_mode="eqco", alpha=alpha)
            assert abs(cfg.log_normalizer() - math.log1p(alpha)) <= 1e-12 * max(1.0, math.log1p(alpha))
