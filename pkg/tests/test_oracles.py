import math

import numpy as np
import pytest

from ystar_bilevel import kernels
from ystar_bilevel.kernels import ChainConfig
from ystar_bilevel.oracles import (
    OUT_OF_REGION_MAGNITUDE,
    GaussianOracle,
    ZeroChainOracle,
    default_reveal_probability,
    estimate_moments,
    stream,
    zero_chain_grad_x,
    zero_chain_grad_y,
    zero_chain_y_hat,
)
from ystar_bilevel.problems import (
    ChainInstance,
    EmbeddedChainInstance,
    PerturbedQuadraticInstance,
    QuadraticInstance,
    clipped_mean_gradient,
)


@pytest.fixture
def quad():
    return QuadraticInstance(4, 3, seed=0)


def test_stream_is_keyed():
    a = stream(1, 2, 3).random(4)
    assert np.array_equal(a, stream(1, 2, 3).random(4))
    assert not np.array_equal(a, stream(1, 3, 2).random(4))


def test_zero_noise_returns_exact_gradients(quad):
    orc = GaussianOracle(quad)
    x = np.arange(4.0)
    ys = np.array([[0.1, 0.2, 0.3], [1.0, -1.0, 0.5]])
    resp = orc.sample(x, ys)
    for j, y in enumerate(ys):
        fx, fy = quad.grad_f(x, y)
        gx, gy = quad.grad_g(x, y)
        assert np.array_equal(resp.grad_f_x[0, j], fx) and np.array_equal(resp.grad_f_y[0, j], fy)
        assert np.allclose(resp.grad_g_x[0, j], gx) and np.allclose(resp.grad_g_y[0, j], gy)
    m = estimate_moments(orc, x, ys[0], 50)
    assert m.cov_trace == pytest.approx(0.0, abs=1e-25)


def test_capacity_checks(quad):
    with pytest.raises(ValueError):
        GaussianOracle(quad, N=1)
    orc = GaussianOracle(quad, N=2)
    with pytest.raises(ValueError):
        orc.sample(np.zeros(4), np.zeros((3, 3)))
    with pytest.raises(ValueError):
        orc.query([(np.zeros(4), np.zeros(3))] * 3)
    with pytest.raises(ValueError):
        GaussianOracle(quad, r=0.0)


def test_call_accounting(quad):
    orc = GaussianOracle(quad, sigma_f=1.0, sigma_g=1.0, N=3)
    orc.sample(np.zeros(4), np.zeros((2, 3)), n_draws=5)
    assert orc.calls == 10
    orc.query([(np.zeros(4), np.zeros(3)), (np.ones(4), np.zeros(3)), (np.zeros(4), np.ones(3))])
    assert orc.calls == 13
    orc.y_hat(np.zeros(4))
    assert orc.calls == 13
    orc.reset_counters()
    assert orc.calls == 0


def test_query_shares_seed_within_one_x(quad):
    orc = GaussianOracle(quad, sigma_g=1.0)
    x = np.zeros(4)
    y1, y2 = np.zeros(3), np.ones(3)
    r1, r2 = orc.query([(x, y1), (x, y2)], rng=stream(0, 1))
    exact = quad.grad_g(x, y1)[1] - quad.grad_g(x, y2)[1]
    assert np.allclose(r1.grad_g_y - r2.grad_g_y, exact)
    assert r1.y_hat is not None


@pytest.mark.parametrize("tau", [0.0, 0.5])
def test_shared_difference_variance_bounded(tau):
    prob = PerturbedQuadraticInstance(3, 3, seed=1)
    orc = GaussianOracle(prob, sigma_f=0.3, sigma_g=0.5, sigma_mult=tau)
    x = np.ones(3)
    rng = np.random.default_rng(2)
    for _ in range(5):
        ys = rng.standard_normal((2, 3))
        resp = orc.sample(x, ys, stream(3), n_draws=20_000)
        diff = np.concatenate([resp.grad_g_x[:, 0] - resp.grad_g_x[:, 1],
                               resp.grad_g_y[:, 0] - resp.grad_g_y[:, 1]], axis=-1)
        centered = diff - diff.mean(axis=0)
        var = (centered**2).sum(axis=1).mean()
        dy2 = np.sum((ys[0] - ys[1]) ** 2)
        assert var <= orc.l_g1_tilde**2 * dy2 * 1.05


def test_independent_draws_do_not_cancel(quad):
    orc = GaussianOracle(quad, sigma_g=1.0)
    resp = orc.sample(np.zeros(4), np.zeros((2, 3)), stream(4), n_draws=1000, shared=False)
    diff = resp.grad_g_y[:, 0] - resp.grad_g_y[:, 1]
    assert diff.var(axis=0).sum() > 0.5


def test_noise_total_variance_matches_sigma():
    prob = QuadraticInstance(4, 4)
    orc = GaussianOracle(prob, sigma_f=0.3, sigma_g=0.5)
    x, y = np.ones(4), np.zeros(4)
    n = 40_000
    m = estimate_moments(orc, x, y, n, stream(5), block="g")
    # trace of the sample covariance has standard error about sigma^2 sqrt(2 / (n dim))
    se = 0.25 * math.sqrt(2.0 / (n * 8))
    assert m.cov_trace == pytest.approx(0.25, abs=5 * se)
    gx, gy = prob.grad_g(x, y)
    assert np.all(np.abs(m.mean - np.concatenate([gx, gy])) <= 4.5 * m.stderr)
    mf = estimate_moments(orc, x, y, n, stream(6), block="f")
    assert mf.cov_trace == pytest.approx(0.09, abs=5 * 0.09 * math.sqrt(2.0 / (n * 8)))
    with pytest.raises(ValueError):
        estimate_moments(orc, x, y, n, block="h")


def test_y_hat_and_out_of_region(quad):
    x = np.arange(4.0)
    assert np.array_equal(GaussianOracle(quad).y_hat(x), np.zeros(3))
    orc = GaussianOracle(quad, r=0.8, sigma_g=1.0)
    yh = orc.y_hat(x)
    assert np.linalg.norm(yh - quad.y_star(x)) == pytest.approx(0.2, rel=1e-12)
    assert np.array_equal(yh, orc.y_hat(x))
    far = quad.y_star(x) + np.array([1.0, 0.0, 0.0])
    resp = orc.sample(x, [far, quad.y_star(x)], n_draws=3)
    const = OUT_OF_REGION_MAGNITUDE / math.sqrt(7)
    assert np.all(resp.grad_g_y[:, 0] == const) and np.all(resp.grad_f_x[:, 0] == const)
    assert not np.any(resp.grad_g_y[:, 1] == const)
    full = np.concatenate([resp.grad_f_x[0, 0], resp.grad_f_y[0, 0]])
    assert np.linalg.norm(full) == pytest.approx(OUT_OF_REGION_MAGNITUDE)
    assert orc.out_of_region == 3 and orc.calls == 6


def test_default_reveal_probability():
    assert default_reveal_probability(0.1, sigma=1.0) == pytest.approx(1e-4)
    assert default_reveal_probability(0.1, l_tilde=2.0) == pytest.approx(0.0025)
    assert default_reveal_probability(0.1, sigma=1.0, l_tilde=2.0) == pytest.approx(0.0025)
    assert default_reveal_probability(0.1, sigma=0.0) == 1.0
    with pytest.raises(ValueError):
        default_reveal_probability(0.1)


def _prefix_state(d, k, eps, rng):
    x = rng.uniform(-eps / 8, eps / 8, d)
    x[:k] = rng.uniform(eps / 2, eps, k) * rng.choice([-1, 1], k)
    return x


def test_zero_chain_reveal_factors():
    cfg = ChainConfig(0.2, 8)
    eps, p = cfg.epsilon, 0.1
    rng = np.random.default_rng(7)
    x = _prefix_state(8, 3, eps, rng)
    h = kernels.smooth_indicator(x, eps)
    y = np.array([kernels.chain_value(x, eps) + 0.3])
    base = clipped_mean_gradient(x, y, cfg)
    assert np.allclose(zero_chain_grad_x(x, y, 1.0, cfg, p), base * (1 + h * (1 / p - 1)))
    assert np.allclose(zero_chain_grad_x(x, y, 0.0, cfg, p), base * (1 - h))
    # only the frontier coordinate is hidden when xi = 0
    g0 = zero_chain_grad_x(x, y, 0.0, cfg, p)
    assert np.all(g0[4:] == 0.0)
    assert np.allclose(g0[:3], base[:3])
    f = kernels.chain_terms(x, eps)
    assert zero_chain_grad_y(x, y, 1.0, cfg, p)[0] == pytest.approx(
        2 * (y[0] - eps**2 * (f.sum() + (1 / p - 1) * f @ h)))


def test_zero_chain_unbiased():
    cfg = ChainConfig(0.2, 8)
    prob = ChainInstance(cfg)
    orc = ZeroChainOracle(prob, p=0.2)
    rng = np.random.default_rng(8)
    for k in (0, 3, 7):
        x = _prefix_state(8, k, cfg.epsilon, rng)
        y = prob.y_star(x) + 0.5
        m = estimate_moments(orc, x, y, 50_000, stream(9, k), block="g")
        gx, gy = prob.grad_g(x, y)
        exact = np.concatenate([gx, gy])
        assert np.all(np.abs(m.mean - exact) <= 4.5 * m.stderr + 1e-11)


def test_zero_chain_y_hat():
    cfg = ChainConfig(0.1)
    assert zero_chain_y_hat(np.zeros(cfg.d_x), cfg) == 0.0
    prob = ChainInstance(cfg)
    orc = ZeroChainOracle(prob, p=0.01)
    rng = np.random.default_rng(10)
    for _ in range(200):
        x = cfg.epsilon * rng.uniform(-1, 1, cfg.d_x)
        assert abs(orc.y_hat(x)[0] - prob.F(x)) <= 50 * cfg.epsilon


def test_zero_chain_oracle_defaults_and_region():
    cfg = ChainConfig(0.2)
    prob = ChainInstance(cfg)
    orc = ZeroChainOracle(prob, sigma=1.0)
    assert orc.p == pytest.approx(0.2**4)
    assert orc.r == pytest.approx(10.0)
    with pytest.raises(ValueError):
        ZeroChainOracle(prob, p=1.5)
    with pytest.raises(TypeError):
        ZeroChainOracle(QuadraticInstance(), p=0.5)
    x = np.zeros(cfg.d_x)
    orc.sample(x, [prob.y_star(x) + 11.0, prob.y_star(x)])
    assert orc.out_of_region == 1


def test_zero_chain_embedded_pushforward():
    cfg = ChainConfig(0.2, 5)
    prob = EmbeddedChainInstance(cfg, dim=8)
    orc = ZeroChainOracle(prob, p=1.0)
    x = np.random.default_rng(11).standard_normal(8)
    y = prob.y_star(x) + 0.2
    resp = orc.sample(x, [y])
    gx, gy = prob.grad_g(x, y)
    assert np.allclose(resp.grad_g_x[0, 0], gx, atol=1e-13)
    assert np.allclose(resp.grad_g_y[0, 0], gy)
    assert np.allclose(resp.grad_f_x[0, 0], 0.2 * x)
