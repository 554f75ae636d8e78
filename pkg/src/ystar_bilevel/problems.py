"""Bilevel instances with known structure.

Each instance exposes f, g, their gradients, the blocks of the lower-level Hessian
needed for the implicit hypergradient, and the lower-level solution maps y*(x) and
y*_lam(x) = argmin_y f(x, y) / lam + g(x, y).

Gradient methods broadcast over leading axes of ``y`` so that an oracle can
evaluate a batch of lower-level points at a single ``x`` in one call.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError

from . import kernels
from .kernels import ChainConfig

__all__ = [
    "SmoothnessProfile",
    "DerivedConstants",
    "derived_constants",
    "InnerSolveError",
    "NotPositiveDefiniteError",
    "solve_lower_level",
    "BilevelProblem",
    "QuadraticInstance",
    "PerturbedQuadraticInstance",
    "ChainInstance",
    "EmbeddedChainInstance",
    "clipped_mean_gradient",
    "embed_rho",
    "embed_jacobian",
    "hypergradient_closed_form",
]

LOGCOSH_D3_MAX = 4.0 / (3.0 * math.sqrt(3.0))


class InnerSolveError(RuntimeError):
    """Deterministic lower-level solve did not reach its tolerance."""


class NotPositiveDefiniteError(ValueError):
    """Lower-level Hessian block is not positive definite."""


@dataclass(frozen=True)
class SmoothnessProfile:
    """Regularity constants of a bilevel instance.

    ``l_g1_tilde`` is the mean-squared Lipschitz constant of the stochastic
    lower-level gradient; ``inf`` means shared randomness buys nothing.
    """

    l_f0: float
    l_f1: float
    l_g1: float
    l_g2: float
    mu_g: float
    l_g1_tilde: float = math.inf
    sigma_f: float = 0.0
    sigma_g: float = 0.0

    def __post_init__(self):
        if not self.mu_g > 0:
            raise ValueError(f"mu_g must be positive, got {self.mu_g}")
        if self.l_g1 < self.mu_g:
            raise ValueError(f"l_g1={self.l_g1} must be >= mu_g={self.mu_g}")
        if self.l_g1_tilde < self.l_g1:
            raise ValueError(f"l_g1_tilde={self.l_g1_tilde} must be >= l_g1={self.l_g1}")
        for name in ("l_f0", "l_f1", "l_g2", "sigma_f", "sigma_g"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


@dataclass(frozen=True)
class DerivedConstants:
    lambda0: float
    L_surrogate: float
    D0: float
    l_y: float
    l_v: float
    r_lambda: float | None = None


def derived_constants(profile: SmoothnessProfile, lam: float | None = None) -> DerivedConstants:
    """Penalty threshold, surrogate smoothness and the bias constants of a profile."""
    p = profile
    mu = p.mu_g
    lambda0 = (4.0 * p.l_f0 * p.l_g1 / mu**2) * (p.l_f1 + 2.0 * p.l_f0 * p.l_g2 / mu)
    L = (6.0 * p.l_g1 / mu) * (p.l_f1 + p.l_g1**2 / mu + p.l_f0 * p.l_g1 * p.l_g2 / mu**2)
    D0 = (p.l_f1 + p.l_f1**2 / mu) * p.l_f1 / mu
    l_y = p.l_f1 + p.l_g2 * p.l_f0 / mu
    l_v = p.l_g1 + p.l_f0 * p.l_g2 / mu
    r_lam = None if lam is None else p.l_f0 / (mu * lam)
    return DerivedConstants(lambda0, L, D0, l_y, l_v, r_lam)


def solve_lower_level(grad, y0, step: float, tol: float = 1e-10, max_iter: int = 200_000):
    """Gradient descent on a strongly convex function until the gradient norm is below tol."""
    y = np.array(y0, dtype=float)
    for _ in range(max_iter):
        g = grad(y)
        if np.linalg.norm(g) <= tol:
            return y
        y = y - step * g
    raise InnerSolveError(f"gradient norm {np.linalg.norm(grad(y)):.3e} above tol {tol:.1e} after {max_iter} steps")


class BilevelProblem:
    """Base class: min_x f(x, y*(x)) with y*(x) = argmin_y g(x, y)."""

    d_x: int
    d_y: int
    profile: SmoothnessProfile

    def f(self, x, y):
        raise NotImplementedError

    def g(self, x, y):
        raise NotImplementedError

    def grad_f(self, x, y):
        """Return (grad_x f, grad_y f)."""
        raise NotImplementedError

    def grad_g(self, x, y):
        """Return (grad_x g, grad_y g)."""
        raise NotImplementedError

    def hess_g_yy(self, x, y):
        raise NotImplementedError

    def hess_g_xy(self, x, y):
        """Cross block with shape (d_x, d_y)."""
        raise NotImplementedError

    def y_star(self, x):
        step = 1.0 / self.profile.l_g1
        return solve_lower_level(lambda y: self.grad_g(x, y)[1], np.zeros(self.d_y), step)

    def y_star_lambda(self, x, lam: float):
        step = 1.0 / (self.profile.l_f1 / lam + self.profile.l_g1)

        def grad(y):
            return self.grad_f(x, y)[1] / lam + self.grad_g(x, y)[1]

        return solve_lower_level(grad, self.y_star(x), step)

    def F(self, x):
        return self.f(x, self.y_star(x))

    def grad_F(self, x):
        return hypergradient_closed_form(self, x)


def hypergradient_closed_form(problem: BilevelProblem, x):
    """grad_x f - H_xy H_yy^{-1} grad_y f, all evaluated at (x, y*(x))."""
    y = problem.y_star(x)
    fx, fy = problem.grad_f(x, y)
    hyy = np.atleast_2d(problem.hess_g_yy(x, y))
    hxy = np.atleast_2d(problem.hess_g_xy(x, y)).reshape(problem.d_x, problem.d_y)
    try:
        factor = cho_factor(hyy)
    except LinAlgError as exc:
        raise NotPositiveDefiniteError("lower-level Hessian is not positive definite") from exc
    return fx - hxy @ cho_solve(factor, np.atleast_1d(fy))


def _spectrum_matrix(rng, rows: int, cols: int, top: float, cond: float):
    """Random matrix with singular values log-spaced in [top / cond, top]."""
    k = min(rows, cols)
    qa, _ = np.linalg.qr(rng.standard_normal((rows, k)))
    qb, _ = np.linalg.qr(rng.standard_normal((cols, k)))
    sv = top * np.geomspace(1.0 / cond, 1.0, k) if k > 1 else np.array([top])
    return (qa * sv) @ qb.T


class QuadraticInstance(BilevelProblem):
    """f = |x|^2 / 2 + b.y and g = |y - A x|^2 / 2.

    Closed forms: y* = A x, y*_lam = A x - b / lam, grad F = x + A^T b.
    A has spectral norm ``a_norm`` and condition number ``cond``; b has norm ``b_norm``.
    """

    def __init__(self, d_x: int = 5, d_y: int = 5, seed: int = 0, cond: float = 10.0,
                 a_norm: float = 1.0, b_norm: float = 1.0, sigma_f: float = 0.0,
                 sigma_g: float = 0.0):
        if cond < 1:
            raise ValueError("cond must be >= 1")
        rng = np.random.default_rng(seed)
        self.d_x, self.d_y = int(d_x), int(d_y)
        self.A = _spectrum_matrix(rng, self.d_y, self.d_x, a_norm, cond)
        b = rng.standard_normal(self.d_y)
        self.b = b_norm * b / np.linalg.norm(b)
        a2 = float(np.linalg.norm(self.A, 2)) ** 2
        # joint Hessian of g is [-A, I]^T [-A, I], whose norm is 1 + |A|^2
        self.profile = SmoothnessProfile(
            l_f0=float(np.linalg.norm(self.b)), l_f1=1.0, l_g1=1.0 + a2, l_g2=0.0,
            mu_g=1.0, l_g1_tilde=1.0 + a2, sigma_f=sigma_f, sigma_g=sigma_g,
        )

    def f(self, x, y):
        return 0.5 * np.dot(x, x) + np.asarray(y) @ self.b

    def g(self, x, y):
        r = np.asarray(y) - self.A @ x
        return 0.5 * np.sum(r * r, axis=-1)

    def grad_f(self, x, y):
        y = np.asarray(y, dtype=float)
        return np.zeros(y.shape[:-1] + (self.d_x,)) + x, np.zeros_like(y) + self.b

    def grad_g(self, x, y):
        r = np.asarray(y, dtype=float) - self.A @ x
        return -r @ self.A, r

    def hess_g_yy(self, x, y):
        return np.eye(self.d_y)

    def hess_g_xy(self, x, y):
        return -self.A.T

    def y_star(self, x):
        return self.A @ x

    def y_star_lambda(self, x, lam: float):
        return self.A @ x - self.b / lam

    def F(self, x):
        return 0.5 * np.dot(x, x) + self.b @ (self.A @ x)

    def grad_F(self, x):
        return np.asarray(x, dtype=float) + self.A.T @ self.b

    def x_with_gap(self, gap: float, seed: int = 0):
        """A point whose hypergradient norm equals ``gap``."""
        u = np.random.default_rng(seed).standard_normal(self.d_x)
        return -self.A.T @ self.b + gap * u / np.linalg.norm(u)


class PerturbedQuadraticInstance(BilevelProblem):
    """Quadratic instance with a log-cosh term that makes the lower-level Hessian vary.

    g = |y - A x|^2 / 2 + delta * sum_j log cosh(y_j + (C x)_j) and f as in
    :class:`QuadraticInstance`. The extra Hessian is at most ``delta`` (kept at or
    below mu_g / 2) and its third derivative is bounded, so l_g2 > 0 while strong
    convexity is untouched. Both solution maps reduce to scalar monotone equations.
    """

    def __init__(self, d_x: int = 5, d_y: int = 5, seed: int = 0, delta: float = 0.5,
                 cond: float = 10.0, a_norm: float = 1.0, c_norm: float = 1.0,
                 b_norm: float = 1.0, sigma_f: float = 0.0, sigma_g: float = 0.0):
        if not 0 < delta <= 0.5:
            raise ValueError("delta must lie in (0, 1/2]")
        rng = np.random.default_rng(seed)
        self.d_x, self.d_y = int(d_x), int(d_y)
        self.delta = float(delta)
        self.A = _spectrum_matrix(rng, self.d_y, self.d_x, a_norm, cond)
        self.C = _spectrum_matrix(rng, self.d_y, self.d_x, c_norm, cond)
        b = rng.standard_normal(self.d_y)
        self.b = b_norm * b / np.linalg.norm(b)
        a2 = float(np.linalg.norm(self.A, 2)) ** 2
        k2 = 1.0 + float(np.linalg.norm(self.C, 2)) ** 2
        l_g1 = 1.0 + a2 + self.delta * k2
        self.profile = SmoothnessProfile(
            l_f0=float(np.linalg.norm(self.b)), l_f1=1.0, l_g1=l_g1,
            l_g2=LOGCOSH_D3_MAX * self.delta * k2**1.5, mu_g=1.0, l_g1_tilde=l_g1,
            sigma_f=sigma_f, sigma_g=sigma_g,
        )

    def _w(self, x, y):
        return np.asarray(y, dtype=float) + self.C @ x

    def f(self, x, y):
        return 0.5 * np.dot(x, x) + np.asarray(y) @ self.b

    def g(self, x, y):
        r = np.asarray(y) - self.A @ x
        w = self._w(x, y)
        # log cosh(w) = |w| + log1p(exp(-2|w|)) - log 2, stable for large |w|
        lc = np.abs(w) + np.log1p(np.exp(-2.0 * np.abs(w))) - math.log(2.0)
        return 0.5 * np.sum(r * r, axis=-1) + self.delta * np.sum(lc, axis=-1)

    def grad_f(self, x, y):
        y = np.asarray(y, dtype=float)
        return np.zeros(y.shape[:-1] + (self.d_x,)) + x, np.zeros_like(y) + self.b

    def grad_g(self, x, y):
        r = np.asarray(y, dtype=float) - self.A @ x
        t = self.delta * np.tanh(self._w(x, y))
        return -r @ self.A + t @ self.C, r + t

    def _curv(self, x, y):
        return self.delta / np.cosh(self._w(x, y)) ** 2

    def hess_g_yy(self, x, y):
        return np.eye(self.d_y) + np.diag(self._curv(x, y))

    def hess_g_xy(self, x, y):
        return -self.A.T + self.C.T * self._curv(x, y)

    def _solve_w(self, c):
        """Solve w + delta tanh(w) = c elementwise by Newton's method."""
        w = c / (1.0 + self.delta)
        for _ in range(100):
            th = np.tanh(w)
            step = (w + self.delta * th - c) / (1.0 + self.delta * (1.0 - th * th))
            w = w - step
            if np.max(np.abs(step)) <= 1e-15 * (1.0 + np.max(np.abs(w))):
                return w
        raise InnerSolveError("Newton iteration for the lower-level map did not converge")

    def y_star(self, x):
        return self._solve_w((self.A + self.C) @ x) - self.C @ x

    def y_star_lambda(self, x, lam: float):
        return self._solve_w((self.A + self.C) @ x - self.b / lam) - self.C @ x


def clipped_mean_gradient(x, y, cfg: ChainConfig, radius: float | None = None):
    """x-gradient of r^2 phi((y - F(x)) / r)^2 with the smooth clip phi and r = 100 eps.

    Equals the true x-gradient of (y - F(x))^2 whenever |y - F(x)| <= r / 2 and is
    bounded by 4 r |grad F|_inf everywhere.
    """
    eps = cfg.epsilon
    r = 100.0 * eps if radius is None else radius
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    u = (y - kernels.chain_value(x, eps)[..., None]) / r
    scale = -2.0 * r * kernels.clip_smooth(u) * kernels.clip_smooth(u, 1)
    return scale * kernels.chain_grad(x, eps)


class ChainInstance(BilevelProblem):
    """Hard instance f = y, g = (y - F(x))^2 with the scaled zero-chain F; y* = F."""

    def __init__(self, cfg: ChainConfig):
        self.cfg = cfg
        self.eps = cfg.epsilon
        self.d_x, self.d_y = cfg.d_x, 1
        grad_bound = 23.0 * self.eps * math.sqrt(cfg.d_x)
        self.profile = SmoothnessProfile(
            l_f0=1.0, l_f1=0.0, l_g1=2.0 * (1.0 + grad_bound**2), l_g2=0.0, mu_g=2.0,
        )
        self.r_eps = 100.0 * self.eps

    def f(self, x, y):
        return np.asarray(y, dtype=float)[..., 0]

    def g(self, x, y):
        r = np.asarray(y, dtype=float)[..., 0] - kernels.chain_value(x, self.eps)
        return r * r

    def grad_f(self, x, y):
        y = np.asarray(y, dtype=float)
        return np.zeros(y.shape[:-1] + (self.d_x,)), np.ones_like(y)

    def grad_g(self, x, y):
        res = np.asarray(y, dtype=float) - kernels.chain_value(x, self.eps)
        return -2.0 * res * kernels.chain_grad(x, self.eps), 2.0 * res

    def clipped_grad_g_x(self, x, y):
        return clipped_mean_gradient(x, y, self.cfg, self.r_eps)

    def hess_g_yy(self, x, y):
        return np.array([[2.0]])

    def hess_g_xy(self, x, y):
        return -2.0 * kernels.chain_grad(x, self.eps)[:, None]

    def y_star(self, x):
        return np.atleast_1d(kernels.chain_value(x, self.eps))

    def y_star_lambda(self, x, lam: float):
        return self.y_star(x) - 1.0 / (2.0 * lam)

    def F(self, x):
        return float(kernels.chain_value(x, self.eps))

    def grad_F(self, x):
        return kernels.chain_grad(x, self.eps)


def embed_rho(x, radius: float):
    """Radial squashing x / sqrt(1 + |x|^2 / R^2) onto the open ball of radius R."""
    x = np.asarray(x, dtype=float)
    s = np.sqrt(1.0 + np.sum(x * x, axis=-1, keepdims=True) / radius**2)
    return x / s


def embed_jacobian(x, radius: float):
    """Jacobian I / s - x x^T / (R^2 s^3) of :func:`embed_rho` (symmetric)."""
    x = np.asarray(x, dtype=float)
    s = math.sqrt(1.0 + float(x @ x) / radius**2)
    return np.eye(x.size) / s - np.outer(x, x) / (radius**2 * s**3)


@dataclass
class EmbeddedChainInstance(BilevelProblem):
    """Chain rotated into a higher dimension: f = y + |x|^2 / 10, g = (y - F(U^T rho(x)))^2.

    U has orthonormal columns (seeded Gaussian, QR) and rho squashes x into the
    ball of radius R = 250 eps sqrt(d_chain).
    """

    cfg: ChainConfig
    dim: int
    seed: int = 0
    U: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        t = self.cfg.d_x
        if self.dim < t:
            raise ValueError(f"embedding dimension {self.dim} smaller than chain length {t}")
        q, _ = np.linalg.qr(np.random.default_rng(self.seed).standard_normal((self.dim, t)))
        if not np.allclose(q.T @ q, np.eye(t), atol=1e-12):
            raise ValueError("embedding matrix lost orthonormality")
        self.U = q
        self.eps = self.cfg.epsilon
        self.radius = 250.0 * self.eps * math.sqrt(t)
        self.d_x, self.d_y = self.dim, 1
        self.r_eps = 100.0 * self.eps
        # |J| <= 1 and U has orthonormal columns, so the chain's gradient bound carries over
        grad_bound = 23.0 * self.eps * math.sqrt(t)
        self.profile = SmoothnessProfile(
            l_f0=1.0, l_f1=0.2, l_g1=2.0 * (1.0 + grad_bound**2), l_g2=0.0, mu_g=2.0,
        )

    def chain_point(self, x):
        return self.U.T @ embed_rho(x, self.radius)

    def f(self, x, y):
        return np.asarray(y, dtype=float)[..., 0] + 0.1 * float(np.dot(x, x))

    def g(self, x, y):
        r = np.asarray(y, dtype=float)[..., 0] - kernels.chain_value(self.chain_point(x), self.eps)
        return r * r

    def grad_f(self, x, y):
        y = np.asarray(y, dtype=float)
        gx = np.broadcast_to(0.2 * np.asarray(x, dtype=float), y.shape[:-1] + (self.d_x,)).copy()
        return gx, np.ones_like(y)

    def pushforward(self, x, chain_grad_x):
        """Map a gradient in chain coordinates back to x: J(x)^T U v."""
        return (chain_grad_x @ self.U.T) @ embed_jacobian(x, self.radius)

    def grad_g(self, x, y):
        z = self.chain_point(x)
        res = np.asarray(y, dtype=float) - kernels.chain_value(z, self.eps)
        return self.pushforward(x, -2.0 * res * kernels.chain_grad(z, self.eps)), 2.0 * res

    def clipped_grad_g_x(self, x, y):
        return self.pushforward(x, clipped_mean_gradient(self.chain_point(x), y, self.cfg, self.r_eps))

    def hess_g_yy(self, x, y):
        return np.array([[2.0]])

    def hess_g_xy(self, x, y):
        z = self.chain_point(x)
        return -2.0 * self.pushforward(x, kernels.chain_grad(z, self.eps))[:, None]

    def y_star(self, x):
        return np.atleast_1d(kernels.chain_value(self.chain_point(x), self.eps))

    def y_star_lambda(self, x, lam: float):
        return self.y_star(x) - 1.0 / (2.0 * lam)

    def F(self, x):
        return float(kernels.chain_value(self.chain_point(x), self.eps)) + 0.1 * float(np.dot(x, x))
