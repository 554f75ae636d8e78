"""Penalty-based stochastic bilevel solver with a coupled lower-level pair.

Each outer step keeps two lower-level iterates: ``y`` tracks the minimizer of
f / lam + g and ``z`` tracks the minimizer of g. The upper-level step uses

    h_x = grad_x f(x, y) + lam * (grad_x g(x, y) - grad_x g(x, z)),

averaged over M oracle draws. On the smooth path both g-gradients in h_x share one
random seed and z is kept inside a ball of radius r_lambda around y, which keeps
the variance of the difference small. The non-smooth path keeps y and z apart in
balls around y_hat and draws the two gradients independently.
"""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from . import kernels
from .oracles import GaussianOracle, StochasticOracle, stream
from .problems import BilevelProblem, ChainInstance, EmbeddedChainInstance, SmoothnessProfile, derived_constants

__all__ = [
    "ConfigError",
    "SolverConfig",
    "SolverState",
    "InnerInfo",
    "RunResult",
    "schedule_from_theorem",
    "schedule_deterministic",
    "project_ball",
    "start_outer",
    "inner_step",
    "outer_step",
    "run",
    "first_hit",
    "PenaltyBilevelSolver",
]

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Solver configuration violates one of its invariants."""


def _ceil(v: float) -> int:
    # guard against 0.1 ** -2 == 100.00000000000001
    return max(1, int(math.ceil(v - 1e-9)))


@dataclass(frozen=True)
class SolverConfig:
    """Step sizes, loop lengths and geometry of one solver run.

    ``step_rule`` is "constant" (gamma_t = gamma) or "diminishing"
    (gamma_t = gamma / (1 + t)).
    """

    epsilon: float
    lam: float
    alpha: float
    gamma: float
    T: int
    M: int
    K: int
    r: float = math.inf
    r_lambda: float | None = None
    smooth_path: bool = True
    step_rule: str = "constant"

    def gamma_at(self, t: int) -> float:
        if self.step_rule == "diminishing":
            return self.gamma / (1.0 + t)
        return self.gamma

    @property
    def calls_per_outer(self) -> int:
        return 2 * (self.T + self.M)

    def problems(self, profile: SmoothnessProfile) -> list[str]:
        """Human-readable list of violated invariants (empty when valid)."""
        errs = []
        dc = derived_constants(profile, self.lam)
        floor = dc.lambda0 / self.epsilon
        if not math.isinf(self.r):
            floor = max(floor, 6.0 * profile.l_f0 / (profile.mu_g * self.r))
        if self.lam < floor * (1.0 - 1e-12):
            errs.append(f"lam={self.lam:.6g} below its floor {floor:.6g}")
        if self.smooth_path:
            if self.r_lambda is None or not math.isclose(self.r_lambda, dc.r_lambda, rel_tol=1e-12, abs_tol=1e-300):
                errs.append(f"r_lambda={self.r_lambda} must equal l_f0 / (mu_g lam) = {dc.r_lambda:.6g}")
        if not 0 < self.alpha < 1.0 / (2.0 * dc.L_surrogate):
            errs.append(f"alpha={self.alpha:.6g} must lie in (0, 1 / (2 L)) with L={dc.L_surrogate:.6g}")
        if not self.gamma > 0:
            errs.append(f"gamma={self.gamma} must be positive")
        for name in ("T", "M", "K"):
            if getattr(self, name) < 1:
                errs.append(f"{name} must be >= 1")
        if self.step_rule not in ("constant", "diminishing"):
            errs.append(f"unknown step rule {self.step_rule!r}")
        if not self.r > 0:
            errs.append("r must be positive")
        return errs

    def validate(self, profile: SmoothnessProfile) -> "SolverConfig":
        errs = self.problems(profile)
        if errs:
            raise ConfigError("; ".join(errs))
        return self


def schedule_from_theorem(theorem: int, epsilon: float, profile: SmoothnessProfile,
                          r: float = math.inf, c_T: float = 1.0, c_M: float = 1.0,
                          c_K: float = 1.0, c_gamma: float = 1.0, c_alpha: float = 0.4,
                          smooth_path: bool | None = None) -> SolverConfig:
    """Loop lengths and steps for a target accuracy ``epsilon``.

    theorem=1: diminishing inner steps, T and M of order eps^-4, K of order eps^-2,
    non-smooth path by default. theorem=2: constant inner step of order eps^2 and
    T, M, K of order eps^-2 on the smooth path.
    """
    if theorem not in (1, 2):
        raise ConfigError(f"theorem must be 1 or 2, got {theorem}")
    if not epsilon > 0:
        raise ConfigError("epsilon must be positive")
    dc = derived_constants(profile)
    lam = dc.lambda0 / epsilon
    if not math.isinf(r):
        lam = max(lam, 6.0 * profile.l_f0 / (profile.mu_g * r))
    if not lam > 0:
        raise ConfigError("penalty parameter came out nonpositive; check l_f0, l_f1 and l_g1")
    r_lam = profile.l_f0 / (profile.mu_g * lam)
    alpha = c_alpha / dc.L_surrogate
    if theorem == 2:
        smooth = True if smooth_path is None else smooth_path
        e2 = epsilon**-2
        return SolverConfig(epsilon, lam, alpha, c_gamma * epsilon**2, _ceil(c_T * e2),
                            _ceil(c_M * e2), _ceil(c_K * e2), r, r_lam, smooth, "constant")
    smooth = False if smooth_path is None else smooth_path
    beta = c_gamma * (2.0 / profile.mu_g + lam / (profile.l_f1 + lam * profile.l_g1))
    e4 = epsilon**-4
    return SolverConfig(epsilon, lam, alpha, beta, _ceil(c_T * e4), _ceil(c_M * e4),
                        _ceil(c_K * epsilon**-2), r, r_lam, smooth, "diminishing")


def schedule_deterministic(epsilon: float, profile: SmoothnessProfile, r: float = math.inf,
                           T: int | None = None, c_K: float = 1.0, c_alpha: float = 0.4) -> SolverConfig:
    """Exact-oracle baseline: one sample per step, a short inner loop with step 1 / l.

    The inner loop length defaults to ceil(log2(1 / eps)) + 1 and l = l_f1 / lam + l_g1
    is the smoothness of the penalized lower-level objective.
    """
    base = schedule_from_theorem(2, epsilon, profile, r, c_K=c_K, c_alpha=c_alpha)
    if T is None:
        T = int(math.ceil(math.log2(1.0 / epsilon))) + 1 if epsilon < 1 else 1
    gamma = 1.0 / (profile.l_f1 / base.lam + profile.l_g1)
    return dataclasses.replace(base, gamma=gamma, T=int(T), M=1)


def project_ball(v, center, radius: float):
    """Euclidean projection onto the closed ball; identity when radius is infinite."""
    if not radius > 0:
        raise ValueError(f"radius must be positive, got {radius}")
    v = np.asarray(v, dtype=float)
    if math.isinf(radius):
        return v
    d = v - center
    n = math.sqrt(float(d @ d))
    if n <= radius:
        return v
    return center + d * (radius / n)


@dataclass
class SolverState:
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    y_hat: np.ndarray
    k: int = 0
    t: int = 0


@dataclass
class InnerInfo:
    y_bar: np.ndarray
    z_bar: np.ndarray
    gamma: float


def start_outer(state: SolverState, oracle: StochasticOracle, cfg: SolverConfig) -> SolverState:
    """Fetch y_hat(x) and pull y, z into their trust regions before the inner loop."""
    y_hat = oracle.y_hat(state.x)
    y0 = project_ball(state.y, y_hat, 2.0 * cfg.r / 3.0)
    if cfg.smooth_path:
        z0 = project_ball(state.z + (y0 - state.y), y0, cfg.r_lambda)
    else:
        z0 = project_ball(state.z, state.y, cfg.r / 2.0)
    return SolverState(state.x, y0, z0, y_hat, state.k, 0)


def inner_step(state: SolverState, oracle: StochasticOracle, cfg: SolverConfig,
               rng: np.random.Generator) -> tuple[SolverState, InnerInfo]:
    """One coupled stochastic gradient step on (y, z) with a shared seed."""
    gamma = cfg.gamma_at(state.t)
    resp = oracle.sample(state.x, np.array([state.y, state.z]), rng, 1, shared=True)
    h_y = resp.grad_f_y[0, 0] / cfg.lam + resp.grad_g_y[0, 0]
    h_z = resp.grad_g_y[0, 1]
    y_bar = state.y - gamma * h_y
    z_bar = state.z - gamma * h_z
    y = project_ball(y_bar, state.y_hat, 2.0 * cfg.r / 3.0)
    if cfg.smooth_path:
        z = project_ball(z_bar + (y - y_bar), y, cfg.r_lambda)
    else:
        z = project_ball(z_bar, state.y_hat, cfg.r / 2.0)
    return SolverState(state.x, y, z, state.y_hat, state.k, state.t + 1), InnerInfo(y_bar, z_bar, gamma)


def outer_step(state: SolverState, oracle: StochasticOracle, cfg: SolverConfig,
               rng: np.random.Generator) -> tuple[SolverState, np.ndarray]:
    """Average M draws of h_x and take the upper-level step. Returns the new state and G."""
    resp = oracle.sample(state.x, np.array([state.y, state.z]), rng, cfg.M, shared=cfg.smooth_path)
    h_x = resp.grad_f_x[:, 0] + cfg.lam * (resp.grad_g_x[:, 0] - resp.grad_g_x[:, 1])
    G = h_x.mean(axis=0)
    x = state.x - cfg.alpha * G
    return SolverState(x, state.y, state.z, state.y_hat, state.k + 1, 0), G


def _progress(problem: BilevelProblem, x) -> int:
    if isinstance(problem, EmbeddedChainInstance):
        return kernels.prog(problem.chain_point(x), problem.eps / 4.0)
    if isinstance(problem, ChainInstance):
        return kernels.prog(x, problem.eps / 4.0)
    return -1


@dataclass
class RunResult:
    """Final iterates and the per-outer-step trace.

    Row k of the trace describes x^k: the oracle calls spent to produce it, the
    exact hypergradient norm and, for chain instances, the eps/4-progress
    (-1 otherwise).
    """

    config: SolverConfig
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    iters: np.ndarray
    oracle_calls: np.ndarray
    grad_norms: np.ndarray
    progress: np.ndarray
    out_of_region: int = 0
    extras: dict = field(default_factory=dict)

    def rows(self):
        return zip(self.iters.tolist(), self.oracle_calls.tolist(),
                   self.grad_norms.tolist(), self.progress.tolist())


def first_hit(result: RunResult, eps: float | None = None) -> int | None:
    """Oracle calls at the first recorded iterate with |grad F| <= eps (None if never)."""
    eps = result.config.epsilon if eps is None else eps
    idx = np.flatnonzero(result.grad_norms <= eps)
    return int(result.oracle_calls[idx[0]]) if idx.size else None


def run(problem: BilevelProblem, oracle: StochasticOracle, cfg: SolverConfig, x0,
        seed: int = 0, inner_callback=None, measure: bool = True,
        stop_at_hit: bool = False, record_iterates: bool = False) -> RunResult:
    """Run K outer steps from x0 with y0 = z0 = y_hat(x0).

    Randomness for outer step k comes from ``stream(seed, k)``, drawn first by the
    T inner steps and then by the M-sample batch. ``inner_callback(before, after,
    info)`` is invoked after every inner step.

    ``stop_at_hit`` ends the run at the first iterate with |grad F| <= eps. Nothing
    before that iterate depends on K, so the trace prefix and the first-hit count
    are identical to those of the full run. ``record_iterates`` keeps every x^k in
    ``extras["iterates"]``.
    """
    x = np.array(x0, dtype=float)
    y0 = oracle.y_hat(x)
    state = SolverState(x, y0.copy(), y0.copy(), y0)
    calls0 = oracle.calls
    out0 = oracle.out_of_region
    K = cfg.K
    iters = np.arange(K + 1)
    calls = np.zeros(K + 1, dtype=np.int64)
    norms = np.full(K + 1, np.nan)
    progress = np.full(K + 1, -1, dtype=np.int64)
    if stop_at_hit and not measure:
        raise ValueError("stop_at_hit needs measure=True")
    xs = [x.copy()] if record_iterates else None
    if measure:
        norms[0] = np.linalg.norm(problem.grad_F(x))
        progress[0] = _progress(problem, x)
    for k in range(K):
        rng = stream(seed, k)
        state = start_outer(state, oracle, cfg)
        for _ in range(cfg.T):
            new, info = inner_step(state, oracle, cfg, rng)
            if inner_callback is not None:
                inner_callback(state, new, info)
            state = new
        state, _ = outer_step(state, oracle, cfg, rng)
        calls[k + 1] = oracle.calls - calls0
        if xs is not None:
            xs.append(state.x.copy())
        if measure:
            norms[k + 1] = np.linalg.norm(problem.grad_F(state.x))
            progress[k + 1] = _progress(problem, state.x)
        if stop_at_hit and norms[k + 1] <= cfg.epsilon:
            iters, calls, norms, progress = (a[: k + 2] for a in (iters, calls, norms, progress))
            break
    expected = int(iters[-1]) * cfg.calls_per_outer
    if calls[-1] != expected:
        raise RuntimeError(f"oracle accounting mismatch: {calls[-1]} calls, expected {expected}")
    extras = {"iterates": np.array(xs)} if xs is not None else {}
    return RunResult(cfg, state.x, state.y, state.z, iters, calls, norms, progress,
                     oracle.out_of_region - out0, extras)


class PenaltyBilevelSolver(BaseEstimator):
    """Estimator front end for :func:`run`.

    Parameters mirror :func:`schedule_from_theorem`; ``lam`` and ``alpha`` override
    the scheduled values when given. ``fit`` takes a problem (and optionally an
    oracle; by default a Gaussian oracle with the profile's noise levels).
    """

    def __init__(self, epsilon: float = 0.1, theorem: int = 2, c_T: float = 1.0, c_M: float = 1.0,
                 c_K: float = 1.0, c_gamma: float = 1.0, c_alpha: float = 0.4, r: float = math.inf,
                 smooth_path: bool | None = None, lam: float | None = None,
                 alpha: float | None = None, random_state: int = 0):
        self.epsilon = epsilon
        self.theorem = theorem
        self.c_T = c_T
        self.c_M = c_M
        self.c_K = c_K
        self.c_gamma = c_gamma
        self.c_alpha = c_alpha
        self.r = r
        self.smooth_path = smooth_path
        self.lam = lam
        self.alpha = alpha
        self.random_state = random_state

    def make_config(self, profile: SmoothnessProfile) -> SolverConfig:
        cfg = schedule_from_theorem(self.theorem, self.epsilon, profile, self.r, self.c_T, self.c_M,
                                    self.c_K, self.c_gamma, self.c_alpha, self.smooth_path)
        if self.lam is not None:
            cfg = dataclasses.replace(cfg, lam=float(self.lam),
                                      r_lambda=profile.l_f0 / (profile.mu_g * self.lam))
        if self.alpha is not None:
            cfg = dataclasses.replace(cfg, alpha=float(self.alpha))
        return cfg.validate(profile)

    def fit(self, problem: BilevelProblem, oracle: StochasticOracle | None = None, x0=None):
        profile = problem.profile
        cfg = self.make_config(profile)
        if oracle is None:
            oracle = GaussianOracle(problem, profile.sigma_f, profile.sigma_g, r=self.r,
                                    seed=self.random_state)
        if x0 is None:
            x0 = np.zeros(problem.d_x)
        x0 = check_array(np.asarray(x0, dtype=float).reshape(1, -1))[0]
        if x0.size != problem.d_x:
            raise ValueError(f"x0 has {x0.size} entries, problem expects {problem.d_x}")
        result = run(problem, oracle, cfg, x0, seed=self.random_state)
        self.config_ = cfg
        self.result_ = result
        self.x_ = result.x
        self.y_ = result.y
        self.z_ = result.z
        self.n_oracle_calls_ = int(result.oracle_calls[-1])
        self.first_hit_calls_ = first_hit(result)
        logger.info("fit finished: %d oracle calls, |grad F| = %.3e",
                    self.n_oracle_calls_, result.grad_norms[-1])
        return self

    def score(self, problem: BilevelProblem) -> float:
        """Negative hypergradient norm at the fitted point (higher is better)."""
        check_is_fitted(self, "x_")
        return -float(np.linalg.norm(problem.grad_F(self.x_)))
