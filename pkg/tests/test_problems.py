import math

import numpy as np
import pytest

from helpers import grad5, jac5, rel_err
from ystar_bilevel import kernels
from ystar_bilevel.kernels import ChainConfig
from ystar_bilevel.problems import (
    ChainInstance,
    EmbeddedChainInstance,
    NotPositiveDefiniteError,
    PerturbedQuadraticInstance,
    QuadraticInstance,
    SmoothnessProfile,
    clipped_mean_gradient,
    derived_constants,
    embed_jacobian,
    embed_rho,
    hypergradient_closed_form,
    solve_lower_level,
)

PHI0 = math.sqrt(math.e * math.pi / 2)


def _points(d, n=5, seed=0, scale=1.0):
    return scale * np.random.default_rng(seed).standard_normal((n, d))


def test_quadratic_closed_forms():
    prob = QuadraticInstance(4, 3, seed=1)
    for x in _points(4):
        assert np.allclose(prob.grad_F(x), x + prob.A.T @ prob.b)
        assert np.allclose(hypergradient_closed_form(prob, x), prob.grad_F(x), atol=1e-12)
        assert np.allclose(grad5(prob.F, x), prob.grad_F(x), atol=1e-8)
        lam = 7.0
        y = prob.y_star_lambda(x, lam)
        assert np.allclose(prob.grad_f(x, y)[1] / lam + prob.grad_g(x, y)[1], 0.0, atol=1e-13)


def test_quadratic_zero_b_minimum_at_origin():
    prob = QuadraticInstance(3, 3, b_norm=0.0)
    assert np.allclose(prob.grad_F(np.zeros(3)), 0.0)


def test_quadratic_profile_uses_joint_hessian_norm():
    prob = QuadraticInstance(5, 5, seed=0, a_norm=0.5)
    hess = np.block([[prob.A.T @ prob.A, -prob.A.T], [-prob.A, np.eye(5)]])
    assert prob.profile.l_g1 == pytest.approx(np.linalg.norm(hess, 2), rel=1e-12)
    assert prob.profile.l_g1 == pytest.approx(1.25, rel=1e-12)


def test_gradients_match_finite_differences():
    probs = [QuadraticInstance(3, 2, seed=2), PerturbedQuadraticInstance(3, 2, seed=2)]
    rng = np.random.default_rng(3)
    for prob in probs:
        x, y = rng.standard_normal(3), rng.standard_normal(2)
        gx, gy = prob.grad_g(x, y)
        assert np.allclose(gx, grad5(lambda v: prob.g(v, y), x), atol=1e-8)
        assert np.allclose(gy, grad5(lambda v: prob.g(x, v), y), atol=1e-8)
        fx, fy = prob.grad_f(x, y)
        assert np.allclose(fx, grad5(lambda v: prob.f(v, y), x), atol=1e-8)
        assert np.allclose(fy, grad5(lambda v: prob.f(x, v), y), atol=1e-8)
        assert np.allclose(prob.hess_g_yy(x, y), jac5(lambda v: prob.grad_g(x, v)[1], y), atol=1e-7)
        assert np.allclose(prob.hess_g_xy(x, y), jac5(lambda v: prob.grad_g(v, y)[1], x).T, atol=1e-7)


def test_perturbed_solution_maps():
    prob = PerturbedQuadraticInstance(4, 4, seed=5, delta=0.5)
    for x in _points(4, seed=6, scale=2.0):
        ys = prob.y_star(x)
        assert np.allclose(prob.grad_g(x, ys)[1], 0.0, atol=1e-13)
        assert np.allclose(ys, solve_lower_level(lambda y: prob.grad_g(x, y)[1], np.zeros(4), 0.5), atol=1e-9)
        lam = 3.0
        yl = prob.y_star_lambda(x, lam)
        assert np.allclose(prob.grad_f(x, yl)[1] / lam + prob.grad_g(x, yl)[1], 0.0, atol=1e-13)
        assert np.allclose(prob.grad_F(x), grad5(prob.F, x, h=1e-4), atol=1e-7)


def test_perturbed_strong_convexity_secant():
    prob = PerturbedQuadraticInstance(3, 4, seed=7)
    rng = np.random.default_rng(8)
    mu, L = prob.profile.mu_g, prob.profile.l_g1
    for _ in range(200):
        x = rng.standard_normal(3)
        y1, y2 = 3 * rng.standard_normal((2, 4))
        d = prob.grad_g(x, y1)[1] - prob.grad_g(x, y2)[1]
        dy = y1 - y2
        assert d @ dy >= mu * (dy @ dy) - 1e-12
        assert np.linalg.norm(d) <= L * np.linalg.norm(dy) + 1e-12


def test_perturbed_rejects_large_delta():
    with pytest.raises(ValueError):
        PerturbedQuadraticInstance(delta=0.8)


def test_hypergradient_rejects_indefinite_block():
    prob = QuadraticInstance(2, 2)
    prob.hess_g_yy = lambda x, y: -np.eye(2)
    with pytest.raises(NotPositiveDefiniteError):
        hypergradient_closed_form(prob, np.zeros(2))


def test_derived_constants_examples():
    unit = SmoothnessProfile(l_f0=1, l_f1=1, l_g1=1, l_g2=0, mu_g=1)
    dc = derived_constants(unit, lam=10.0)
    assert dc.lambda0 == pytest.approx(4.0)
    assert dc.r_lambda == pytest.approx(0.1)
    prof = QuadraticInstance().profile
    dq = derived_constants(prof)
    assert dq.l_y == prof.l_f1 and dq.l_v == prof.l_g1
    assert dq.r_lambda is None


@pytest.mark.parametrize("kwargs", [
    dict(l_f0=1, l_f1=1, l_g1=1, l_g2=0, mu_g=0),
    dict(l_f0=1, l_f1=1, l_g1=0.5, l_g2=0, mu_g=1),
    dict(l_f0=-1, l_f1=1, l_g1=1, l_g2=0, mu_g=1),
    dict(l_f0=1, l_f1=1, l_g1=2, l_g2=0, mu_g=1, l_g1_tilde=1.5),
])
def test_profile_rejects_inconsistent_constants(kwargs):
    with pytest.raises(ValueError):
        SmoothnessProfile(**kwargs)


def test_chain_instance_examples():
    cfg = ChainConfig(0.1)
    prob = ChainInstance(cfg)
    x0 = np.zeros(cfg.d_x)
    assert prob.y_star(x0)[0] == pytest.approx(0.01 * PHI0, rel=1e-15)
    rng = np.random.default_rng(9)
    for _ in range(5):
        x = 0.1 * rng.uniform(-1, 1, cfg.d_x)
        y = prob.y_star(x)
        assert prob.grad_g(x, y)[1][0] == 0.0
        assert prob.g(x, y) == 0.0
        assert rel_err(hypergradient_closed_form(prob, x), kernels.chain_grad(x, 0.1), floor=1e-3) <= 1e-8
        assert np.all(prob.clipped_grad_g_x(x, y) == 0.0)


def test_clipped_gradient_matches_true_gradient_near_solution():
    cfg = ChainConfig(0.2, 6)
    prob = ChainInstance(cfg)
    rng = np.random.default_rng(10)
    for _ in range(50):
        x = 0.2 * rng.uniform(-2, 2, 6)
        y = prob.y_star(x) + rng.uniform(-0.5, 0.5) * prob.r_eps
        assert np.allclose(prob.clipped_grad_g_x(x, y), prob.grad_g(x, y)[0], rtol=1e-12, atol=1e-15)


def test_clipped_gradient_bound_and_derivative():
    cfg = ChainConfig(0.2, 6)
    r = 100 * cfg.epsilon
    rng = np.random.default_rng(11)
    for _ in range(200):
        x = 0.2 * rng.uniform(-2, 2, 6)
        y = np.array([rng.uniform(-5, 5) * r])
        g = clipped_mean_gradient(x, y, cfg)
        bound = 4 * r * np.abs(kernels.chain_grad(x, cfg.epsilon)).max()
        assert np.abs(g).max() <= bound + 1e-12

        def mean_fn(v):
            u = (y[0] - kernels.chain_value(v, cfg.epsilon)) / r
            return r * r * kernels.clip_smooth(u) ** 2

        assert np.allclose(g, grad5(mean_fn, x, h=1e-5), atol=1e-6 * max(1.0, bound))


def test_large_gradient_sits_after_the_last_large_coordinate():
    eps = 0.1
    d = 8
    rng = np.random.default_rng(12)
    checked = 0
    for _ in range(5000):
        x = eps * rng.uniform(-1.5, 1.5, d)
        for i in range(d - 1):
            if abs(x[i]) >= eps and abs(x[i + 1]) < eps:
                assert abs(kernels.chain_grad(x, eps)[i + 1]) > eps
                checked += 1
    assert checked > 1000


def test_embedding_maps():
    R = 2.0
    assert np.all(embed_rho(np.zeros(3), R) == 0.0)
    assert np.allclose(embed_jacobian(np.zeros(3), R), np.eye(3))
    rng = np.random.default_rng(13)
    for _ in range(20):
        x = 3 * rng.standard_normal(4)
        assert np.linalg.norm(embed_rho(x, R)) < R
        J = embed_jacobian(x, R)
        assert np.allclose(J, jac5(lambda v: embed_rho(v, R), x), atol=1e-9)
        assert np.linalg.norm(J, 2) <= 1 + 1e-12


def test_embedded_chain_instance():
    cfg = ChainConfig(0.2, 5)
    prob = EmbeddedChainInstance(cfg, dim=9, seed=1)
    assert np.allclose(prob.U.T @ prob.U, np.eye(5), atol=1e-12)
    assert prob.y_star(np.zeros(9))[0] == pytest.approx(0.04 * PHI0, rel=1e-15)
    rng = np.random.default_rng(14)
    for _ in range(5):
        x = rng.standard_normal(9)
        y = prob.y_star(x) + 0.3
        chain = lambda v: kernels.chain_value(prob.chain_point(v), 0.2)
        push = prob.pushforward(x, kernels.chain_grad(prob.chain_point(x), 0.2))
        assert np.allclose(push, grad5(chain, x), atol=1e-9)
        assert np.allclose(prob.grad_g(x, y)[0], grad5(lambda v: prob.g(v, y), x), atol=1e-8)
        assert np.allclose(prob.grad_F(x), grad5(prob.F, x), atol=1e-7)
        assert np.allclose(prob.clipped_grad_g_x(x, y), prob.grad_g(x, y)[0], atol=1e-13)


def test_embedded_chain_rejects_small_dimension():
    with pytest.raises(ValueError):
        EmbeddedChainInstance(ChainConfig(0.2, 5), dim=3)
