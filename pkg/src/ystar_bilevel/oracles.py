"""Stochastic first-order oracles.

A query fixes one upper-level point ``x`` and up to ``N`` lower-level points. The
oracle returns noisy gradients of f and g at every point together with a coarse
estimate ``y_hat`` of y*(x). With ``shared=True`` every point in one draw sees the
same random seed, which is what lets differences of lower-level gradients have
small variance.

Randomness comes from counter-based streams: :func:`stream` keys a generator by
integers such as (seed, outer step, inner step), so results never depend on the
order in which independent work is scheduled.
"""
from __future__ import annotations

import math
import threading
import zlib
from dataclasses import dataclass

import numpy as np

from . import kernels
from .problems import BilevelProblem, ChainInstance, EmbeddedChainInstance, clipped_mean_gradient

__all__ = [
    "OUT_OF_REGION_MAGNITUDE",
    "stream",
    "OracleResponse",
    "StochasticOracle",
    "GaussianOracle",
    "ZeroChainOracle",
    "zero_chain_grad_x",
    "zero_chain_grad_y",
    "zero_chain_y_hat",
    "default_reveal_probability",
    "Moments",
    "estimate_moments",
]

OUT_OF_REGION_MAGNITUDE = 1e3


def stream(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for the integer key (seed, *keys)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))


@dataclass
class OracleResponse:
    """Gradient blocks with leading axes (n_draws, n_points).

    ``y_hat`` (shape (d_y,)) is attached by :meth:`StochasticOracle.query`; batched
    :meth:`StochasticOracle.sample` calls leave it as None and callers use
    :meth:`StochasticOracle.y_hat` directly.
    """

    grad_f_x: np.ndarray
    grad_f_y: np.ndarray
    grad_g_x: np.ndarray
    grad_g_y: np.ndarray
    y_hat: np.ndarray | None = None

    def point(self, draw: int, idx: int) -> "OracleResponse":
        return OracleResponse(self.grad_f_x[draw, idx], self.grad_f_y[draw, idx],
                              self.grad_g_x[draw, idx], self.grad_g_y[draw, idx], self.y_hat)


class StochasticOracle:
    """Shared bookkeeping: batch limits, the call counter and region tracking."""

    def __init__(self, problem: BilevelProblem, N: int = 2, r: float = math.inf, seed: int = 0):
        if int(N) < 2:
            raise ValueError(f"N must be at least 2, got {N}")
        if not r > 0:
            raise ValueError(f"reliability radius must be positive, got {r}")
        self.problem = problem
        self.N = int(N)
        self.r = float(r)
        self.seed = int(seed)
        self._calls = 0
        self._out_of_region = 0
        self._lock = threading.Lock()
        self._fallback = stream(self.seed, 0x5EED)

    @property
    def calls(self) -> int:
        return self._calls

    @property
    def out_of_region(self) -> int:
        return self._out_of_region

    def reset_counters(self):
        with self._lock:
            self._calls = 0
            self._out_of_region = 0

    def _bill(self, n: int, outside: int):
        with self._lock:
            self._calls += n
            self._out_of_region += outside

    def y_hat(self, x) -> np.ndarray:
        raise NotImplementedError

    def _outside(self, x, ys) -> np.ndarray:
        if math.isinf(self.r):
            return np.zeros(len(ys), dtype=bool)
        dist = np.linalg.norm(ys - self.problem.y_star(x), axis=-1)
        return dist > self.r

    def _draw(self, x, ys, rng, n_draws, shared, outside):
        raise NotImplementedError

    def sample(self, x, ys, rng: np.random.Generator | None = None, n_draws: int = 1,
               shared: bool = True) -> OracleResponse:
        """``n_draws`` independent queries, each at the points ``ys`` (shape (n_points, d_y))."""
        x = np.asarray(x, dtype=float)
        ys = np.atleast_2d(np.asarray(ys, dtype=float))
        if ys.shape[0] > self.N:
            raise ValueError(f"batch of {ys.shape[0]} points exceeds oracle capacity N={self.N}")
        if n_draws < 1:
            raise ValueError("n_draws must be positive")
        outside = self._outside(x, ys)
        self._bill(n_draws * ys.shape[0], n_draws * int(outside.sum()))
        rng = self._fallback if rng is None else rng
        return self._draw(x, ys, rng, int(n_draws), bool(shared), outside)

    def query(self, points, rng: np.random.Generator | None = None, shared: bool = True):
        """Single query at a list of (x, y) pairs; returns one response per pair.

        Pairs sharing the same x are answered in one draw so they see the same seed
        when ``shared`` is set.
        """
        points = list(points)
        if len(points) > self.N:
            raise ValueError(f"batch of {len(points)} points exceeds oracle capacity N={self.N}")
        rng = self._fallback if rng is None else rng
        out: list[OracleResponse | None] = [None] * len(points)
        groups: dict[bytes, list[int]] = {}
        for i, (x, _) in enumerate(points):
            groups.setdefault(np.asarray(x, dtype=float).tobytes(), []).append(i)
        for idx in groups.values():
            x = points[idx[0]][0]
            resp = self.sample(x, [points[i][1] for i in idx], rng, 1, shared)
            y_hat = self.y_hat(x)
            for j, i in enumerate(idx):
                out[i] = resp.point(0, j)
                out[i].y_hat = y_hat
        return out


class GaussianOracle(StochasticOracle):
    """Exact gradients plus isotropic Gaussian noise.

    Noise on the joint (x, y) gradient has per-component variance sigma^2 / (d_x + d_y),
    so its expected squared norm is sigma^2. ``sigma_mult`` adds a zero-mean random
    rescaling (1 + sigma_mult * zeta) of the g-gradient, which makes the
    mean-squared Lipschitz constant of g equal l_g1 * sqrt(1 + sigma_mult^2).

    Outside the ball of radius ``r`` around y*(x) the gradients are replaced by a
    constant vector of norm 1e3, and ``y_hat`` sits exactly r / 4 from y*(x) in a
    direction fixed by the seed and x. With r = inf ``y_hat`` is the zero vector.
    """

    def __init__(self, problem: BilevelProblem, sigma_f: float = 0.0, sigma_g: float = 0.0,
                 r: float = math.inf, N: int = 2, seed: int = 0, sigma_mult: float = 0.0):
        super().__init__(problem, N=N, r=r, seed=seed)
        if min(sigma_f, sigma_g, sigma_mult) < 0:
            raise ValueError("noise levels must be nonnegative")
        self.sigma_f = float(sigma_f)
        self.sigma_g = float(sigma_g)
        self.sigma_mult = float(sigma_mult)

    @property
    def l_g1_tilde(self) -> float:
        return self.problem.profile.l_g1 * math.sqrt(1.0 + self.sigma_mult**2)

    def y_hat(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if math.isinf(self.r):
            return np.zeros(self.problem.d_y)
        key = zlib.crc32(x.tobytes())
        u = stream(self.seed, 0xA11, key).standard_normal(self.problem.d_y)
        return self.problem.y_star(x) + 0.25 * self.r * u / np.linalg.norm(u)

    def _draw(self, x, ys, rng, n_draws, shared, outside):
        p = self.problem
        dx, dy = p.d_x, p.d_y
        n_pts = ys.shape[0]
        width = 1 if shared else n_pts
        fx, fy = p.grad_f(x, ys)
        gx, gy = p.grad_g(x, ys)
        scale = 1.0 / math.sqrt(dx + dy)
        noise = rng.standard_normal((n_draws, width, 2 * (dx + dy)))
        nf = (self.sigma_f * scale) * noise[..., : dx + dy]
        ng = (self.sigma_g * scale) * noise[..., dx + dy:]
        if self.sigma_mult > 0:
            zeta = 1.0 + self.sigma_mult * rng.standard_normal((n_draws, width, 1))
            gx, gy = gx * zeta, gy * zeta
        out = [fx + nf[..., :dx], fy + nf[..., dx:], gx + ng[..., :dx], gy + ng[..., dx:]]
        if outside.any():
            const = OUT_OF_REGION_MAGNITUDE * scale
            for a in out:
                a[:, outside] = const
        return OracleResponse(*out, None)


def default_reveal_probability(eps: float, sigma: float = math.inf, l_tilde: float = math.inf) -> float:
    """max(eps^4 / sigma^2, eps^2 / l_tilde^2), capped at 1."""
    if math.isinf(sigma) and math.isinf(l_tilde):
        raise ValueError("need a finite noise level or mean-squared Lipschitz constant")
    p = max(eps**4 / sigma**2 if sigma > 0 else math.inf, eps**2 / l_tilde**2 if l_tilde > 0 else math.inf)
    return min(1.0, p)


def _reveal_factor(h, xi, p):
    """1 + h_i (xi / p - 1), broadcast to (..., d)."""
    return 1.0 + h * (np.asarray(xi, dtype=float)[..., None] / p - 1.0)


def zero_chain_grad_x(x, y, xi, cfg: kernels.ChainConfig, p: float):
    """Clipped x-gradient with coordinate i scaled by 1 + h_i(x)(xi / p - 1)."""
    h = kernels.smooth_indicator(x, cfg.epsilon)
    base = clipped_mean_gradient(x, np.atleast_1d(y), cfg)
    return base * _reveal_factor(h, xi, p)


def zero_chain_grad_y(x, y, xi, cfg: kernels.ChainConfig, p: float):
    """2 (y - eps^2 sum_i f_i (1 + h_i (xi / p - 1)))."""
    eps = cfg.epsilon
    f = kernels.chain_terms(x, eps)
    h = kernels.smooth_indicator(x, eps)
    s = eps * eps * (f.sum() + (np.asarray(xi, dtype=float) / p - 1.0) * np.dot(f, h))
    return 2.0 * (np.asarray(y, dtype=float) - s)


def zero_chain_y_hat(x, cfg: kernels.ChainConfig) -> float:
    """eps^2 * sum of the links up to the eps/2-progress of x."""
    eps = cfg.epsilon
    k = kernels.prog(x, eps / 2.0)
    return float(eps * eps * kernels.chain_terms(x, eps)[:k].sum())


class ZeroChainOracle(StochasticOracle):
    """Oracle on a chain instance that reveals the next coordinate with probability p.

    Works on :class:`ChainInstance` and :class:`EmbeddedChainInstance`; in the
    embedded case chain quantities are evaluated at U^T rho(x) and x-gradients are
    pushed forward. The x-gradient is unbiased only within r_eps / 2 = 50 eps of
    y*, which is used as the reliability radius; outside it the clipped form keeps
    the gradient bounded instead of switching to a constant.
    """

    def __init__(self, problem: ChainInstance | EmbeddedChainInstance, p: float | None = None,
                 sigma: float = math.inf, l_tilde: float = math.inf, N: int = 2, seed: int = 0):
        if not isinstance(problem, (ChainInstance, EmbeddedChainInstance)):
            raise TypeError("zero-chain oracle needs a chain instance")
        super().__init__(problem, N=N, r=0.5 * problem.r_eps, seed=seed)
        eps = problem.eps
        self.p = default_reveal_probability(eps, sigma, l_tilde) if p is None else float(p)
        if not 0 < self.p <= 1:
            raise ValueError(f"reveal probability must lie in (0, 1], got {self.p}")
        self.cfg = problem.cfg

    def _chain_point(self, x):
        if isinstance(self.problem, EmbeddedChainInstance):
            return self.problem.chain_point(x)
        return x

    def _outside(self, x, ys) -> np.ndarray:
        dist = np.abs(ys[:, 0] - self.problem.y_star(x)[0])
        return dist > self.r

    def y_hat(self, x) -> np.ndarray:
        return np.array([zero_chain_y_hat(self._chain_point(np.asarray(x, dtype=float)), self.cfg)])

    def _draw(self, x, ys, rng, n_draws, shared, outside):
        prob = self.problem
        eps = self.cfg.epsilon
        z = self._chain_point(x)
        n_pts = ys.shape[0]
        width = 1 if shared else n_pts
        xi = (rng.random((n_draws, width)) < self.p).astype(float)
        xi = np.broadcast_to(xi, (n_draws, n_pts))
        h = kernels.smooth_indicator(z, eps)
        f = kernels.chain_terms(z, eps)
        base = clipped_mean_gradient(z, ys, self.cfg, prob.r_eps)
        gx = base[None] * _reveal_factor(h, xi, self.p)
        s = eps * eps * (f.sum() + (xi / self.p - 1.0) * np.dot(f, h))
        gy = 2.0 * (ys[None, :, 0] - s)
        fx, fy = prob.grad_f(x, ys)
        if isinstance(prob, EmbeddedChainInstance):
            gx = prob.pushforward(x, gx)
        shape = (n_draws, n_pts)
        return OracleResponse(
            np.broadcast_to(fx, shape + fx.shape[-1:]).copy(),
            np.broadcast_to(fy, shape + (1,)).copy(),
            gx, gy[..., None], None,
        )


@dataclass(frozen=True)
class Moments:
    mean: np.ndarray
    cov_trace: float
    stderr: np.ndarray
    n: int


def estimate_moments(oracle: StochasticOracle, x, y, n: int, rng: np.random.Generator | None = None,
                     block: str = "g") -> Moments:
    """Sample mean, covariance trace and standard error of one gradient block at (x, y).

    ``block`` is one of "g", "g_x", "g_y", "f", "f_x", "f_y"; "g" and "f" concatenate
    the x and y parts.
    """
    if n < 2:
        raise ValueError("need at least two samples to estimate moments")
    resp = oracle.sample(x, np.atleast_2d(y), rng, n_draws=n, shared=True)
    parts = {
        "g_x": resp.grad_g_x[:, 0], "g_y": resp.grad_g_y[:, 0],
        "f_x": resp.grad_f_x[:, 0], "f_y": resp.grad_f_y[:, 0],
    }
    parts["g"] = np.concatenate([parts["g_x"], parts["g_y"]], axis=-1)
    parts["f"] = np.concatenate([parts["f_x"], parts["f_y"]], axis=-1)
    if block not in parts:
        raise ValueError(f"unknown block {block!r}")
    s = parts[block]
    var = s.var(axis=0, ddof=1)
    return Moments(s.mean(axis=0), float(var.sum()), np.sqrt(var / n), n)
