"""Smooth scalar kernels and the scaled zero-chain function built from them.

Everything here is vectorized over numpy arrays. Vector-valued functions act on
the last axis, so a stack of points with shape ``(..., d)`` is evaluated in one
call.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np
from numpy.polynomial import hermite_e
from scipy.special import erfc

__all__ = [
    "PSI_MAX",
    "DPSI_MAX",
    "D2PSI_MAX",
    "PHI_INF",
    "DPHI_MAX",
    "D2PHI_MAX",
    "CLIP_MAX",
    "psi",
    "phi_gauss",
    "clip_smooth",
    "bump",
    "gamma_smooth",
    "prog",
    "ChainConfig",
    "chain_terms",
    "chain_value",
    "chain_grad",
    "chain_term_partial",
    "smooth_indicator",
    "smooth_indicator_jacobian",
]

SQRT_E = math.sqrt(math.e)

# Bounds on the kernels and their derivatives over the real line.
PSI_MAX = math.e
DPSI_MAX = math.sqrt(54.0 / math.e)
D2PSI_MAX = 32.5
PHI_INF = math.sqrt(2.0 * math.pi * math.e)
DPHI_MAX = SQRT_E
D2PHI_MAX = 1.0
CLIP_MAX = 2.0

# exp(1 - 1/u^2) underflows to zero below this u, so derivative polynomials in
# 1/u are skipped there to avoid 0 * inf.
_U_MIN = 1.0 / math.sqrt(740.0)


@functools.lru_cache(maxsize=None)
def _psi_poly(order: int) -> dict[int, float]:
    """Coefficients {power: c} of P_k(u) with psi^(k)(t) = psi(t) * sum c u^power, u = 2t - 1."""
    poly = {0: 1.0}
    for _ in range(order):
        nxt: dict[int, float] = {}
        for p, c in poly.items():
            # 4 u^-3 * c u^p
            nxt[p - 3] = nxt.get(p - 3, 0.0) + 4.0 * c
            # 2 d/du (c u^p)
            if p != 0:
                nxt[p - 1] = nxt.get(p - 1, 0.0) + 2.0 * c * p
        poly = {p: c for p, c in nxt.items() if c != 0.0}
    return poly


def psi(t, deriv: int = 0):
    """Smooth step: 0 for t <= 1/2, exp(1 - 1/(2t-1)^2) above, and its derivatives."""
    t = np.asarray(t, dtype=float)
    u = 2.0 * t - 1.0
    live = u > _U_MIN
    out = np.zeros(t.shape)
    if not live.any():
        return out
    ul = u[live]
    inv = 1.0 / ul
    base = np.exp(1.0 - inv * inv)
    if deriv == 0:
        out[live] = base
        return out
    acc = 0.0
    for p, c in _psi_poly(deriv).items():
        acc = acc + c * inv ** (-p)
    out[live] = base * acc
    return out


def phi_gauss(t, deriv: int = 0):
    """Scaled Gaussian CDF sqrt(e) * int_{-inf}^t exp(-s^2/2) ds and its derivatives."""
    t = np.asarray(t, dtype=float)
    if deriv == 0:
        return SQRT_E * math.sqrt(math.pi / 2.0) * erfc(-t / math.sqrt(2.0))
    # d^k/dt^k exp(-t^2/2) = (-1)^k He_k(t) exp(-t^2/2)
    coef = np.zeros(deriv)
    coef[-1] = 1.0
    sign = -1.0 if (deriv - 1) % 2 else 1.0
    return sign * SQRT_E * hermite_e.hermeval(t, coef) * np.exp(-0.5 * t * t)


def clip_smooth(t, deriv: int = 0):
    """Odd smooth clip: identity on [-1/2, 1/2], saturating below 2 in magnitude.

    Outside the identity window the value is t - (1/e) int_{1/2}^{|t|} psi, which
    has the closed form used below (u = 2|t| - 1).
    """
    t = np.asarray(t, dtype=float)
    a = np.abs(t)
    s = np.sign(t)
    if deriv == 1:
        return 1.0 - psi(a) / math.e
    if deriv == 2:
        return -s * psi(a, 1) / math.e
    if deriv == 3:
        return -psi(a, 2) / math.e
    if deriv != 0:
        raise ValueError("clip_smooth supports derivatives up to order 3")
    out = t.copy()
    outer = a > 0.5
    if np.any(outer):
        u = 2.0 * a[outer] - 1.0
        inv = 1.0 / u
        tail = u * np.expm1(-inv * inv) - math.sqrt(math.pi) * erfc(inv)
        out[outer] = s[outer] * (0.5 - 0.5 * tail)
    return out


def bump(t, deriv: int = 0):
    """Compact bump exp(-1/(100 (t - 1/4)(1/2 - t))) on (1/4, 1/2), zero elsewhere."""
    t = np.asarray(t, dtype=float)
    out = np.zeros_like(t)
    live = (t > 0.25) & (t < 0.5)
    if not np.any(live):
        return out
    tl = t[live]
    s = (tl - 0.25) * (0.5 - tl)
    val = np.exp(-1.0 / (100.0 * s))
    if deriv == 0:
        out[live] = val
    elif deriv == 1:
        out[live] = val * (0.75 - 2.0 * tl) / (100.0 * s * s)
    else:
        raise ValueError("bump supports derivatives up to order 1")
    return out


class _GammaTable:
    """Cumulative integrals of the bump on a uniform grid.

    A query adds a 16-point Gauss-Legendre rule over the partial cell, which keeps
    the relative error near 1e-12 even where the integral is astronomically small.
    """

    n_grid = 4096
    n_nodes = 16

    def __init__(self):
        self.grid = np.linspace(0.25, 0.5, self.n_grid)
        self.nodes, self.weights = np.polynomial.legendre.leggauss(self.n_nodes)
        cells = self._rule(self.grid[:-1], self.grid[1:])
        self.cumulative = np.concatenate([[0.0], np.cumsum(cells)])
        self.total = float(self.cumulative[-1])

    def _rule(self, a, b):
        mid = 0.5 * (a + b)
        half = 0.5 * (b - a)
        pts = mid[..., None] + half[..., None] * self.nodes
        return (bump(pts) * self.weights).sum(axis=-1) * half

    def integral(self, t):
        t = np.clip(np.asarray(t, dtype=float), 0.25, 0.5)
        k = np.clip(np.searchsorted(self.grid, t, side="right") - 1, 0, self.n_grid - 2)
        return self.cumulative[k] + self._rule(self.grid[k], t)


@functools.lru_cache(maxsize=1)
def _gamma_table() -> _GammaTable:
    return _GammaTable()


def gamma_smooth(t, deriv: int = 0):
    """Smooth step rising from 0 at t = 1/4 to 1 at t = 1/2.

    Normalized running integral of :func:`bump`; deriv 1 and 2 return the scaled
    bump and its derivative.
    """
    t = np.asarray(t, dtype=float)
    table = _gamma_table()
    if deriv == 0:
        out = table.integral(t) / table.total
        return np.where(t >= 0.5, 1.0, np.where(t <= 0.25, 0.0, out))
    return bump(t, deriv - 1) / table.total


def prog(x, alpha: float, x0: float = 1.0) -> int:
    """Largest 1-based index i with |x_i| > alpha, counting a phantom x_0 (0 if none)."""
    x = np.asarray(x, dtype=float)
    hits = np.flatnonzero(np.abs(x) > alpha)
    if hits.size:
        return int(hits[-1]) + 1
    return 0


@dataclass(frozen=True)
class ChainConfig:
    """Scale and dimension of the zero-chain. ``d_x`` defaults to floor(eps^-2)."""

    epsilon: float
    d_x: int | None = None

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.d_x is None:
            object.__setattr__(self, "d_x", int(math.floor(self.epsilon**-2 + 1e-9)))
        if self.d_x < 1:
            raise ValueError(f"d_x must be >= 1, got {self.d_x}")


def _shifted(x, eps):
    """Previous coordinate for each link, with the phantom x_0 fixed at eps."""
    head = np.full(x.shape[:-1] + (1,), eps)
    return np.concatenate([head, x[..., :-1]], axis=-1)


def chain_terms(x, eps: float):
    """Unscaled link values f_i(x) = psi(x_{i-1}/eps) phi(x_i/eps) - psi(-x_{i-1}/eps) phi(-x_i/eps)."""
    x = np.asarray(x, dtype=float)
    p = _shifted(x, eps) / eps
    u = x / eps
    return psi(p) * phi_gauss(u) - psi(-p) * phi_gauss(-u)


def chain_value(x, eps: float):
    """F(x) = eps^2 * sum_i f_i(x)."""
    return eps * eps * np.sum(chain_terms(x, eps), axis=-1)


def chain_grad(x, eps: float):
    """Gradient of :func:`chain_value`."""
    x = np.asarray(x, dtype=float)
    p = _shifted(x, eps) / eps
    u = x / eps
    own = psi(p) * phi_gauss(u, 1) + psi(-p) * phi_gauss(-u, 1)
    nxt = np.concatenate([u[..., 1:], np.zeros(u.shape[:-1] + (1,))], axis=-1)
    fwd = psi(u, 1) * phi_gauss(nxt) + psi(-u, 1) * phi_gauss(-nxt)
    fwd[..., -1] = 0.0
    return eps * (own + fwd)


def chain_term_partial(x, eps: float, a: int, b: int):
    """Mixed partials d^a/dx_{i-1}^a d^b/dx_i^b of every link f_i (unscaled)."""
    x = np.asarray(x, dtype=float)
    p = _shifted(x, eps) / eps
    u = x / eps
    sign = -1.0 if (a + b) % 2 else 1.0
    val = psi(p, a) * phi_gauss(u, b) - sign * psi(-p, a) * phi_gauss(-u, b)
    return val / eps ** (a + b)


def smooth_indicator(x, eps: float):
    """h_i(x) = Gamma(1 - sqrt(sum_{j >= i} Gamma(|x_j|/eps)^2)) for every i."""
    x = np.asarray(x, dtype=float)
    g = gamma_smooth(np.abs(x) / eps)
    tail = np.cumsum((g * g)[..., ::-1], axis=-1)[..., ::-1]
    return gamma_smooth(1.0 - np.sqrt(tail))


def smooth_indicator_jacobian(x, eps: float):
    """Matrix J with J[i, j] = d h_i / d x_j for a single point x."""
    x = np.asarray(x, dtype=float)
    a = np.abs(x) / eps
    g = gamma_smooth(a)
    dg = gamma_smooth(a, 1)
    tail = np.cumsum((g * g)[::-1])[::-1]
    root = np.sqrt(tail)
    outer = gamma_smooth(1.0 - root, 1)
    coef = np.divide(-outer, root, out=np.zeros_like(root), where=root > 0)
    inner = g * dg * np.sign(x) / eps
    return np.triu(coef[:, None] * inner[None, :])
