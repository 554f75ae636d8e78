"""Ground-truth diagnostics: surrogate gaps, bias and variance bounds, projection
checks, projected-SGD rates, stall experiments on the zero-chain and rate fits.

Nothing here bills the solver's oracle for measurement; ground truth comes from
the deterministic problem evaluators.
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .oracles import StochasticOracle, ZeroChainOracle, estimate_moments, stream
from .problems import BilevelProblem, ChainInstance, clipped_mean_gradient, derived_constants
from .solver import SolverConfig, SolverState, project_ball, run

__all__ = [
    "surrogate_gradient",
    "surrogate_value_gap",
    "v_star_gap",
    "StationarityReport",
    "check_surrogate",
    "stationarity_measures",
    "BiasReport",
    "bias_check",
    "expected_outer_gradient",
    "variance_envelope",
    "outer_gradient_variance",
    "coupled_projection_residuals",
    "PSGDReport",
    "psgd_rate_check",
    "OracleBypassError",
    "greedy_probe",
    "StallReport",
    "StallTrace",
    "stall_trace",
    "stall_experiment",
    "RateFit",
    "slope_from_hits",
    "fit_rate",
    "SuiteReport",
    "surrogate_suite",
    "bias_suite",
    "variance_suite",
    "projection_triples_suite",
    "projection_run_suite",
    "psgd_suite",
    "zero_chain_states",
    "zero_chain_suite",
]


def surrogate_gradient(problem: BilevelProblem, x, lam: float):
    """grad_x f(x, y_lam) + lam (grad_x g(x, y_lam) - grad_x g(x, y*)) with exact lower-level maps."""
    y_lam = problem.y_star_lambda(x, lam)
    y_st = problem.y_star(x)
    fx = problem.grad_f(x, y_lam)[0]
    return fx + lam * (problem.grad_g(x, y_lam)[0] - problem.grad_g(x, y_st)[0])


def surrogate_value_gap(problem: BilevelProblem, x, lam: float) -> float:
    """|L*_lam(x) - F(x)| where L*_lam = f(x, y_lam) + lam (g(x, y_lam) - g(x, y*))."""
    y_lam = problem.y_star_lambda(x, lam)
    y_st = problem.y_star(x)
    val = problem.f(x, y_lam) + lam * (problem.g(x, y_lam) - problem.g(x, y_st))
    return float(abs(val - problem.f(x, y_st)))


def v_star_gap(problem: BilevelProblem, x, lam: float) -> float:
    """|y*_lam(x) - y*(x)|."""
    return float(np.linalg.norm(problem.y_star_lambda(x, lam) - problem.y_star(x)))


@dataclass(frozen=True)
class StationarityReport:
    lam: float
    grad_gap: float
    value_gap: float
    value_bound: float
    v_gap: float
    v_bound: float

    @property
    def ok(self) -> bool:
        return self.value_gap <= self.value_bound and self.v_gap <= self.v_bound


def check_surrogate(problem: BilevelProblem, x, lam: float) -> StationarityReport:
    """Gradient, value and lower-level gaps between the penalty surrogate and F at x."""
    p = problem.profile
    dc = derived_constants(p, lam)
    grad_gap = float(np.linalg.norm(surrogate_gradient(problem, x, lam) - problem.grad_F(x)))
    return StationarityReport(
        lam, grad_gap, surrogate_value_gap(problem, x, lam), dc.D0 / lam,
        v_star_gap(problem, x, lam), 2.0 * p.l_f0 / (lam * p.mu_g),
    )


def stationarity_measures(problem: BilevelProblem, iterates, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Running min of |grad F(x^k)| and running mean of |grad L*_lam(x^k)|^2 along a trajectory.

    The second is the ergodic measure that constant-step guarantees control.
    """
    iterates = np.atleast_2d(iterates)
    gF = np.array([np.linalg.norm(problem.grad_F(x)) for x in iterates])
    gL = np.array([float(np.sum(surrogate_gradient(problem, x, lam) ** 2)) for x in iterates])
    return np.minimum.accumulate(gF), np.cumsum(gL) / np.arange(1, gL.size + 1)


def expected_outer_gradient(problem: BilevelProblem, x, y, z, lam: float):
    """Mean of one h_x sample: grad_x f(x, y) + lam (grad_x g(x, y) - grad_x g(x, z))."""
    return problem.grad_f(x, y)[0] + lam * (problem.grad_g(x, y)[0] - problem.grad_g(x, z)[0])


@dataclass(frozen=True)
class BiasReport:
    """Distance between the expected outer gradient and the surrogate gradient, with bounds.

    ``bound_coupled`` is only defined when |y - z| <= r_lambda.
    """

    actual: float
    bound_split: float
    bound_coupled: float | None

    @property
    def residual_split(self) -> float:
        return self.bound_split - self.actual

    @property
    def residual_coupled(self) -> float | None:
        return None if self.bound_coupled is None else self.bound_coupled - self.actual


def bias_check(problem: BilevelProblem, x, y, z, lam: float) -> BiasReport:
    """Compare |grad L*_lam(x) - E G| against both bias bounds.

    Split bound: (l_f1 + lam l_g1)(|y - y_lam| + |z - y*|).
    Coupled bound (for |v| <= r_lambda, v = y - z):
    l_y |y - y_lam| + lam l_g1 |v - v*| + l_f0 l_y / (mu_g lam).
    """
    p = problem.profile
    dc = derived_constants(p, lam)
    y_lam = problem.y_star_lambda(x, lam)
    y_st = problem.y_star(x)
    G = expected_outer_gradient(problem, x, y, z, lam)
    actual = float(np.linalg.norm(surrogate_gradient(problem, x, lam) - G))
    dy = float(np.linalg.norm(y - y_lam))
    split = (p.l_f1 + lam * p.l_g1) * (dy + float(np.linalg.norm(z - y_st)))
    v = np.asarray(y) - np.asarray(z)
    coupled = None
    if np.linalg.norm(v) <= dc.r_lambda * (1.0 + 1e-12):
        dv = float(np.linalg.norm(v - (y_lam - y_st)))
        coupled = dc.l_y * dy + lam * p.l_g1 * dv + p.l_f0 * dc.l_y / (p.mu_g * lam)
    return BiasReport(actual, split, coupled)


def variance_envelope(problem: BilevelProblem, lam: float, M: int, smooth_path: bool,
                      sigma_f: float | None = None, sigma_g: float | None = None,
                      l_g1_tilde: float | None = None) -> float:
    """Upper bound on E|G - E G|^2 for an M-sample outer gradient.

    Non-smooth path: (2 sigma_f^2 + 8 lam^2 sigma_g^2) / M.
    Smooth path: (2 sigma_f^2 + 8 l~^2 l_f0^2 / mu_g^2) / M.
    Unspecified noise constants are taken from the problem profile.
    """
    p = problem.profile
    sf = p.sigma_f if sigma_f is None else sigma_f
    sg = p.sigma_g if sigma_g is None else sigma_g
    if smooth_path:
        lt = p.l_g1_tilde if l_g1_tilde is None else l_g1_tilde
        return (2.0 * sf**2 + 8.0 * lt**2 * p.l_f0**2 / p.mu_g**2) / M
    return (2.0 * sf**2 + 8.0 * lam**2 * sg**2) / M


def outer_gradient_variance(oracle: StochasticOracle, x, y, z, cfg: SolverConfig, n_rep: int,
                            rng: np.random.Generator, chunk: int = 200_000) -> tuple[float, float]:
    """Monte Carlo E|G - E G|^2 of the M-sample outer gradient and its standard error.

    Each replicate draws M fresh pairs exactly as the solver does; draws are made in
    chunks of at most ``chunk`` pairs.
    """
    if n_rep < 2:
        raise ValueError("need at least two replicates")
    per = max(1, chunk // cfg.M)
    blocks = []
    done = 0
    while done < n_rep:
        n = min(per, n_rep - done)
        resp = oracle.sample(x, np.array([y, z]), rng, n * cfg.M, shared=cfg.smooth_path)
        h = resp.grad_f_x[:, 0] + cfg.lam * (resp.grad_g_x[:, 0] - resp.grad_g_x[:, 1])
        blocks.append(h.reshape(n, cfg.M, -1).mean(axis=1))
        done += n
    G = np.concatenate(blocks)
    dev = np.sum((G - G.mean(axis=0)) ** 2, axis=1) * n_rep / (n_rep - 1)
    return float(dev.mean()), float(dev.std(ddof=1) / math.sqrt(n_rep))


def coupled_projection_residuals(before: SolverState, after: SolverState, y_bar, z_bar,
                                 y_lam, y_st, smooth_path: bool) -> tuple[float, float]:
    """Shrinkage of the projection step toward (y_lam, v*) or (y_lam, y*).

    Returns (pre - post) distances for y and for the second tracked quantity, which
    is v = y - z on the smooth path and z on the non-smooth path. Both should be
    nonnegative when the targets lie in the feasible balls.
    """
    ry = float(np.linalg.norm(y_bar - y_lam) - np.linalg.norm(after.y - y_lam))
    if smooth_path:
        v_star = y_lam - y_st
        rz = float(np.linalg.norm((y_bar - z_bar) - v_star) - np.linalg.norm((after.y - after.z) - v_star))
    else:
        rz = float(np.linalg.norm(z_bar - y_st) - np.linalg.norm(after.z - y_st))
    return ry, rz


@dataclass(frozen=True)
class PSGDReport:
    mode: str
    checkpoints: np.ndarray
    mean_sq_error: np.ndarray
    stderr: np.ndarray
    bound: np.ndarray

    @property
    def ok(self) -> bool:
        return bool(np.all(self.mean_sq_error <= self.bound + 3.0 * self.stderr))


def psgd_rate_check(mode: str = "fixed", dim: int = 10, mu: float = 1.0, L: float = 4.0,
                    sigma: float = 1.0, n_steps: int = 200, n_seeds: int = 1000, seed: int = 0,
                    alpha: float | None = None, shift: float | None = None,
                    ball_radius: float = 5.0, start_dist: float = 3.0) -> PSGDReport:
    """Projected SGD on a strongly convex quadratic against its mean-square error bound.

    fixed: step alpha (default 1 / L), bound (1 - mu alpha)^t e0 + alpha sigma^2 / mu.
    diminishing: step beta / (shift + t) with beta = (mu + L) / (mu L), bound
    nu / (shift + t) with nu = max(beta^2 sigma^2 L / (2 (beta rho - 1)), shift e0) and
    rho = 2 mu L / (mu + L). The default shift makes the first step 2 / (mu + L).
    The noise is isotropic with E|noise|^2 = sigma^2; the feasible ball contains x*.
    """
    rng = stream(seed, 0x95D)
    eig = np.linspace(mu, L, dim) if dim > 1 else np.array([mu])
    x_star = rng.standard_normal(dim)
    x_star *= 0.5 * ball_radius / max(np.linalg.norm(x_star), 1e-12)
    center = np.zeros(dim)
    u = rng.standard_normal(dim)
    x0 = x_star + start_dist * u / np.linalg.norm(u)
    x0 = project_ball(x0, center, ball_radius)
    e0 = float(np.sum((x0 - x_star) ** 2))
    X = np.tile(x0, (n_seeds, 1))
    ts = np.arange(n_steps + 1)
    errs = np.empty((n_steps + 1, n_seeds))
    errs[0] = e0
    if mode == "fixed":
        a = 1.0 / L if alpha is None else alpha
        steps = np.full(n_steps, a)
        bound = (1.0 - mu * a) ** ts * e0 + a * sigma**2 / mu
    elif mode == "diminishing":
        rho = 2.0 * mu * L / (mu + L)
        beta = (mu + L) / (mu * L)
        g0 = beta * (mu + L) / 2.0 if shift is None else shift
        nu = max(beta**2 * sigma**2 * L / (2.0 * (beta * rho - 1.0)), g0 * e0)
        steps = beta / (g0 + np.arange(n_steps))
        bound = nu / (g0 + ts)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    noise_scale = sigma / math.sqrt(dim)
    for t in range(n_steps):
        grad = (X - x_star) * eig + noise_scale * rng.standard_normal(X.shape)
        X = X - steps[t] * grad
        d = X - center
        n = np.linalg.norm(d, axis=1, keepdims=True)
        X = np.where(n > ball_radius, center + d * (ball_radius / np.maximum(n, 1e-300)), X)
        errs[t + 1] = np.sum((X - x_star) ** 2, axis=1)
    mean = errs.mean(axis=1)
    se = errs.std(axis=1, ddof=1) / math.sqrt(n_seeds)
    return PSGDReport(mode, ts, mean, se, bound)


class OracleBypassError(RuntimeError):
    """An algorithm changed its iterate without querying the oracle."""


def greedy_probe(oracle: ZeroChainOracle, x, rng: np.random.Generator):
    """One query at (x, y_hat(x) + r_eps / 4); activate the last coordinate that shows up.

    The offset keeps y inside the reliable region while making the clipped
    x-gradient nonzero. A revealed coordinate is set to magnitude eps against the
    gradient sign.
    """
    prob = oracle.problem
    eps = prob.eps
    y = oracle.y_hat(x) + 0.25 * prob.r_eps
    g = oracle.sample(x, y[None], rng, 1).grad_g_x[0, 0]
    j = kernels.prog(g, 0.0)
    x = np.array(x, dtype=float)
    if j > kernels.prog(x, eps / 4.0):
        x[j - 1] = -eps * math.copysign(1.0, g[j - 1])
    return x


@dataclass(frozen=True)
class StallReport:
    p: float
    activation_times: list
    progress_at: dict
    budget: int

    @property
    def median_time(self) -> float:
        t = np.array([math.inf if v is None else v for v in self.activation_times], dtype=float)
        return float(np.median(t))


@dataclass(frozen=True)
class StallTrace:
    """One zero-respecting run on the zero-chain oracle.

    ``progress[t - 1]`` and ``calls[t - 1]`` describe iteration t. ``marks`` holds
    (iteration, oracle calls, |grad F|, progress) at the start, at every change of
    progress and at the last iteration.
    """

    calls: np.ndarray
    progress: np.ndarray
    marks: list
    d_x: int

    @property
    def hit(self) -> int | None:
        if self.progress.size and self.progress[-1] >= self.d_x:
            return int(self.progress.size)
        return None

    def progress_at(self, t: int) -> int:
        return int(self.progress[min(t, self.progress.size) - 1])


def stall_trace(cfg: kernels.ChainConfig, p: float, seed: int, horizon: int,
                algorithm=greedy_probe) -> StallTrace:
    """Run ``algorithm`` from x = 0 until every coordinate is active or ``horizon`` ends.

    Each iteration must make at least one oracle query.
    """
    prob = ChainInstance(cfg)
    eps = cfg.epsilon
    oracle = ZeroChainOracle(prob, p=p, seed=seed)
    rng = stream(seed, 0x57A11)
    x = np.zeros(cfg.d_x)
    calls = np.zeros(horizon, dtype=np.int64)
    progress = np.zeros(horizon, dtype=np.int64)
    marks = [(0, 0, float(np.linalg.norm(kernels.chain_grad(x, eps))), 0)]
    n = 0
    for t in range(1, horizon + 1):
        before = oracle.calls
        x_new = algorithm(oracle, x, rng)
        if oracle.calls == before:
            raise OracleBypassError(f"iteration {t} made no oracle query")
        x = x_new
        k = kernels.prog(x, eps / 4.0)
        calls[t - 1], progress[t - 1] = oracle.calls, k
        n = t
        if k != marks[-1][3] or k >= cfg.d_x or t == horizon:
            marks.append((t, int(oracle.calls), float(np.linalg.norm(kernels.chain_grad(x, eps))), k))
        if k >= cfg.d_x:
            break
    return StallTrace(calls[:n], progress[:n], marks, cfg.d_x)


def stall_experiment(cfg: kernels.ChainConfig, p: float, seeds, budget: int,
                     checkpoints=(), algorithm=greedy_probe) -> StallReport:
    """Run a zero-respecting algorithm on the zero-chain oracle for each seed.

    Records the first iteration at which every chain coordinate is active
    (eps/4-progress equals d_x; None if never within ``budget``) and the progress at
    each checkpoint.
    """
    checkpoints = sorted(set(int(c) for c in checkpoints))
    horizon = max([budget] + checkpoints)
    times: list[int | None] = []
    progress_at: dict[int, list[int]] = {c: [] for c in checkpoints}
    for s in seeds:
        tr = stall_trace(cfg, p, int(s), horizon, algorithm)
        hit = tr.hit
        times.append(hit if hit is not None and hit <= budget else None)
        for c in checkpoints:
            progress_at[c].append(tr.progress_at(c))
    return StallReport(p, times, progress_at, budget)


@dataclass(frozen=True)
class RateFit:
    """Log-log slope of median first-hit oracle counts against 1 / eps."""

    slope: float
    ci: tuple[float, float]
    eps: np.ndarray
    medians: np.ndarray
    hits: dict = field(repr=False)
    censored_cells: tuple = ()

    @property
    def censored(self) -> bool:
        return bool(self.censored_cells)


def _slope(eps, med):
    return float(np.polyfit(np.log(1.0 / eps), np.log(med), 1)[0])


def slope_from_hits(hits: dict, n_boot: int = 2000, seed: int = 0, level: float = 0.95) -> RateFit:
    """Fit the slope from {eps: [count or None per seed]}.

    A cell with any censored run (None) is excluded from the fit and reported.
    The interval is a percentile bootstrap that resamples seeds within each cell.
    """
    eps_all = np.array(sorted(hits, reverse=True), dtype=float)
    censored = tuple(float(e) for e in eps_all if any(c is None for c in hits[e]))
    keep = np.array([e for e in eps_all if float(e) not in censored], dtype=float)
    if keep.size < 2:
        return RateFit(math.nan, (math.nan, math.nan), keep, np.array([]), hits, censored)
    cells = [np.asarray(hits[e], dtype=float) for e in keep]
    med = np.array([np.median(c) for c in cells])
    slope = _slope(keep, med)
    rng = stream(seed, 0xB007)
    boots = np.empty(n_boot)
    for b in range(n_boot):
        bm = [np.median(c[rng.integers(0, c.size, c.size)]) for c in cells]
        boots[b] = _slope(keep, np.array(bm))
    lo, hi = np.quantile(boots, [(1 - level) / 2, (1 + level) / 2])
    return RateFit(slope, (float(lo), float(hi)), keep, med, hits, censored)


def _call(args):
    fn, e, s = args
    return fn(e, s)


def fit_rate(run_cell, eps_grid, seeds, workers: int = 1, n_boot: int = 2000, seed: int = 0) -> RateFit:
    """Evaluate ``run_cell(eps, seed) -> count | None`` over the grid and fit the slope.

    With ``workers > 1`` cells run in separate processes, so ``run_cell`` must be
    picklable. Results are keyed by cell, so the fit does not depend on scheduling.
    """
    tasks = [(run_cell, float(e), int(s)) for e in eps_grid for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            out = list(pool.map(_call, tasks))
    else:
        out = [_call(t) for t in tasks]
    hits: dict[float, list] = {float(e): [] for e in eps_grid}
    for (_, e, _), c in zip(tasks, out):
        hits[e].append(c)
    return slope_from_hits(hits, n_boot=n_boot, seed=seed)


# Lemma suites: each returns a SuiteReport whose residuals are bound minus
# measurement, so a negative residual is a violation.

# Absolute slack for floating-point ties (for example a projection that leaves a
# point where it was).
RESIDUAL_TOL = 1e-10


@dataclass(frozen=True)
class SuiteReport:
    name: str
    checks: int
    violations: int
    worst: float
    details: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.violations == 0

    def as_dict(self) -> dict:
        return {"name": self.name, "checks": self.checks, "violations": self.violations,
                "worst_residual": self.worst, "ok": self.ok, **self.details}


def _report(name: str, residuals, details: dict | None = None, tol: float = RESIDUAL_TOL) -> SuiteReport:
    r = np.asarray(residuals, dtype=float).ravel()
    worst = float(r.min()) if r.size else math.inf
    return SuiteReport(name, int(r.size), int(np.sum(~(r >= -tol))), worst, details or {})


def surrogate_suite(problem: BilevelProblem, lams, n_points: int, rng: np.random.Generator) -> SuiteReport:
    """Value-gap and lower-level-gap bounds at random standard normal x for each lam.

    ``details["grad_gap_ratio"]`` holds the median ratio of |grad L*_lam - grad F|
    between consecutive lams, which should track their ratio (None where the gap
    is zero to rounding).
    """
    lams = sorted(float(v) for v in lams)
    xs = rng.standard_normal((n_points, problem.d_x))
    res = []
    gaps = np.empty((len(lams), n_points))
    for i, lam in enumerate(lams):
        for j, x in enumerate(xs):
            rep = check_surrogate(problem, x, lam)
            res += [rep.value_bound - rep.value_gap, rep.v_bound - rep.v_gap]
            gaps[i, j] = rep.grad_gap
    # the gap vanishes identically on pure quadratics; report no ratio there
    ratios = [float(np.median(gaps[i] / gaps[i + 1])) if np.median(gaps[i + 1]) > 1e-12 else None
              for i in range(len(lams) - 1)]
    return _report("surrogate", res, {"lams": lams, "grad_gap_ratio": ratios})


def bias_suite(problem: BilevelProblem, lam: float, n_states: int, rng: np.random.Generator) -> SuiteReport:
    """Both bias bounds at random (x, y, z) near (y_lam, y*).

    Offsets have log-uniform size between 1e-3 and 3 times r_lambda, so both
    regimes of the coupled bound (|y - z| inside and outside r_lambda) are hit.
    """
    r_lam = derived_constants(problem.profile, lam).r_lambda
    res = []
    coupled = 0
    for _ in range(n_states):
        x = rng.standard_normal(problem.d_x)
        y_lam = problem.y_star_lambda(x, lam)
        y_st = problem.y_star(x)
        u = rng.standard_normal((2, problem.d_y))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        size = r_lam * 10.0 ** rng.uniform(-3.0, math.log10(3.0), 2)
        rep = bias_check(problem, x, y_lam + size[0] * u[0], y_st + size[1] * u[1], lam)
        res.append(rep.residual_split)
        if rep.residual_coupled is not None:
            res.append(rep.residual_coupled)
            coupled += 1
    return _report("bias", res, {"lam": lam, "coupled_checks": coupled})


def variance_suite(oracle: StochasticOracle, cfg: SolverConfig, x, n_rep: int,
                   rng: np.random.Generator) -> SuiteReport:
    """Monte Carlo variance of the outer gradient at (x, y_lam, y*) against its envelope.

    The check passes when the estimate is at most the envelope plus three standard
    errors. Noise constants come from the oracle when it carries them.
    """
    prob = oracle.problem
    y = prob.y_star_lambda(x, cfg.lam)
    z = prob.y_star(x)
    var, se = outer_gradient_variance(oracle, x, y, z, cfg, n_rep, rng)
    env = variance_envelope(prob, cfg.lam, cfg.M, cfg.smooth_path,
                            getattr(oracle, "sigma_f", None), getattr(oracle, "sigma_g", None),
                            getattr(oracle, "l_g1_tilde", None))
    path = "smooth" if cfg.smooth_path else "nonsmooth"
    return _report(f"variance[{path}]", [env + 3.0 * se - var],
                   {"variance": var, "stderr": se, "envelope": env})


def projection_triples_suite(n_triples: int, dim: int, rng: np.random.Generator) -> SuiteReport:
    """|t v / |v| - u| <= |v - u| for random u, v, t with |u| <= t <= |v|.

    t v / |v| is the projection of v onto the ball of radius t, computed with
    :func:`project_ball`.
    """
    res = np.empty(n_triples)
    center = np.zeros(dim)
    for i in range(n_triples):
        v = rng.standard_normal(dim) * np.exp(rng.uniform(-3.0, 3.0))
        nv = float(np.linalg.norm(v))
        u = rng.standard_normal(dim)
        u *= nv * rng.uniform() / np.linalg.norm(u)
        t = rng.uniform(float(np.linalg.norm(u)), nv)
        res[i] = np.linalg.norm(v - u) - np.linalg.norm(project_ball(v, center, t) - u)
    return _report("projection-triples", res)


def projection_run_suite(oracle: StochasticOracle, cfg: SolverConfig, x0, seeds) -> SuiteReport:
    """Distance shrinkage of the inner projections along instrumented solver runs.

    After every inner step, the distance to y_lam and the distance of the second
    tracked quantity (v = y - z, or z on the non-smooth path) to its target must
    not grow across the projection.
    """
    prob = oracle.problem
    res: list[float] = []
    targets: dict[bytes, tuple] = {}

    def callback(before, after, info):
        key = before.x.tobytes()
        if key not in targets:
            targets.clear()
            targets[key] = (prob.y_star_lambda(before.x, cfg.lam), prob.y_star(before.x))
        y_lam, y_st = targets[key]
        res.extend(coupled_projection_residuals(before, after, info.y_bar, info.z_bar,
                                                y_lam, y_st, cfg.smooth_path))

    for s in seeds:
        run(prob, oracle, cfg, x0, seed=int(s), inner_callback=callback, measure=False)
    return _report("projection-runs", res, {"inner_steps": len(res) // 2})


def psgd_suite(n_seeds: int = 1000, seed: int = 0) -> list[SuiteReport]:
    """Both projected-SGD step modes against their mean-square error envelopes."""
    out = []
    for mode in ("fixed", "diminishing"):
        rep = psgd_rate_check(mode, n_seeds=n_seeds, seed=seed)
        res = rep.bound + 3.0 * rep.stderr - rep.mean_sq_error
        out.append(_report(f"psgd[{mode}]", res, {"final_mse": float(rep.mean_sq_error[-1]),
                                                  "final_bound": float(rep.bound[-1])}))
    return out


def zero_chain_states(cfg: kernels.ChainConfig, n: int, rng: np.random.Generator):
    """Random chain points with a random number k of active coordinates.

    Coordinates 1..k have magnitude in [eps/2, eps], the rest lie in [-eps/8, eps/8],
    so the eps/4-progress is exactly k and the (k+1)-th link can be revealed.
    """
    eps, d = cfg.epsilon, cfg.d_x
    k = rng.integers(0, d, n)
    mag = np.where(np.arange(d) < k[:, None], rng.uniform(0.5, 1.0, (n, d)), rng.uniform(-0.125, 0.125, (n, d)))
    sign = np.where(rng.random((n, d)) < 0.5, -1.0, 1.0)
    return eps * mag * sign, k


def _prog0(g):
    nz = g != 0
    last = g.shape[-1] - np.argmax(nz[..., ::-1], axis=-1)
    return np.where(nz.any(axis=-1), last, 0)


def zero_chain_suite(cfg: kernels.ChainConfig, p: float, n_states: int, n_draws: int,
                     n_points: int, rng: np.random.Generator) -> list[SuiteReport]:
    """Support, reveal-frequency, gradient-bound and y-variance checks on the zero-chain oracle.

    support: the x-gradient never reaches past eps/4-progress + 1.
    reveal: the frequency of reaching exactly progress + 1 is at most p + 3 sqrt(p / n).
    bounds: |grad F|_inf <= 23 eps and the clipped x-gradient is at most 92 r_eps eps
    in sup norm at random points.
    y-variance: the variance of the y-gradient is at most 64 eps^4 / p at states in
    [-eps, eps]^d (plus three standard errors).
    """
    eps = cfg.epsilon
    prob = ChainInstance(cfg)
    oracle = ZeroChainOracle(prob, p=p, seed=int(rng.integers(2**31)))
    xs, ks = zero_chain_states(cfg, n_states, rng)
    support, freq = [], []
    for x, k in zip(xs, ks):
        y = oracle.y_hat(x) + 0.25 * prob.r_eps
        g = oracle.sample(x, y[None], rng, n_draws).grad_g_x[:, 0]
        reach = _prog0(g)
        support.append(k + 1 - reach)
        freq.append(float(np.mean(reach == k + 1)))
    support = np.concatenate([np.ravel(s) for s in support]).astype(float)
    limit = p + 3.0 * math.sqrt(p / n_draws)
    reports = [
        _report("zero-chain-support", support, {"draws": int(support.size)}),
        _report("zero-chain-reveal", [limit - f for f in freq],
                {"max_frequency": max(freq), "limit": limit}),
    ]
    pts = eps * rng.uniform(-3.0, 3.0, (n_points, cfg.d_x))
    ys = kernels.chain_value(pts, eps)[:, None] + prob.r_eps * rng.uniform(-3.0, 3.0, (n_points, 1))
    gF = np.abs(kernels.chain_grad(pts, eps)).max(axis=1)
    gb = np.abs(clipped_mean_gradient(pts, ys, cfg, prob.r_eps)).max(axis=1)
    reports.append(_report("zero-chain-bounds",
                           np.concatenate([23.0 * eps - gF, 92.0 * prob.r_eps * eps - gb]),
                           {"max_grad_F": float(gF.max()), "max_clipped": float(gb.max())}))
    box = rng.uniform(-eps, eps, (n_states, cfg.d_x))
    bound = 64.0 * eps**4 / p
    var_res, var_max = [], 0.0
    for x in box:
        m = estimate_moments(oracle, x, oracle.y_hat(x), n_draws, rng, block="g_y")
        se = math.sqrt(2.0 / (n_draws - 1)) * m.cov_trace
        var_res.append(bound + 3.0 * se - m.cov_trace)
        var_max = max(var_max, m.cov_trace)
    reports.append(_report("zero-chain-y-variance", var_res, {"max_variance": var_max, "bound": bound}))
    return reports
