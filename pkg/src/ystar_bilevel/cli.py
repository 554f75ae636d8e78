"""Config-driven experiment runner.

    ystar-bilevel run SPEC.json [--workers N] [--out DIR] [--seed S]

A spec is a JSON object. Unknown keys are errors, and every invariant of the
solver configuration is checked before any cell runs; errors point at the line
of the offending key. Experiment kinds:

solve           run the solver for every (epsilon, seed) cell
rate-fit        same cells, stopped at the first eps-stationary iterate, then a
                log-log slope of median oracle calls against 1 / eps
stall           zero-respecting probe runs on the zero-chain oracle
oracle-moments  Monte Carlo mean and covariance trace of one gradient block
verify-lemmas   property suites from :mod:`ystar_bilevel.analysis`

Outputs under the output directory: ``summary.json`` (deterministic, so identical
specs give identical bytes), ``timing.json`` (wall-clock, not reproducible) and
one ``traces/<cell>.csv`` per solver or stall cell with columns
``iter,oracle_calls,grad_F_norm,prog`` (prog is -1 on instances without a chain).

Exit status: 0 on success, 1 if a verification failed or a cell raised, 2 on a
config error.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import os
import re
import sys
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, analysis, kernels
from .oracles import GaussianOracle, ZeroChainOracle, estimate_moments
from .problems import (
    ChainInstance,
    EmbeddedChainInstance,
    PerturbedQuadraticInstance,
    QuadraticInstance,
)
from .solver import ConfigError, SolverConfig, first_hit, run, schedule_deterministic, schedule_from_theorem

__all__ = ["SpecError", "RunSpec", "parse_spec", "execute", "cell_seed", "main", "OUT_ENV", "TRACE_HEADER"]

logger = logging.getLogger(__name__)

OUT_ENV = "YSTAR_BILEVEL_OUT"
TRACE_HEADER = ("iter", "oracle_calls", "grad_F_norm", "prog")
KINDS = ("solve", "verify-lemmas", "rate-fit", "stall", "oracle-moments")

TOP_KEYS = {"kind", "instance", "oracle", "solver", "epsilon", "seeds", "x0", "output",
            "master_seed", "verify", "stall", "moments", "fit"}
INSTANCE_KEYS = {
    "quadratic": {"type", "d_x", "d_y", "seed", "cond", "a_norm", "b_norm"},
    "perturbed": {"type", "d_x", "d_y", "seed", "cond", "a_norm", "b_norm", "delta", "c_norm"},
    "chain": {"type", "d_x"},
    "embedded_chain": {"type", "d_x", "dim", "seed"},
}
ORACLE_KEYS = {
    "gaussian": {"type", "sigma_f", "sigma_g", "sigma_mult", "r", "N"},
    "zero_chain": {"type", "p", "sigma", "l_tilde", "N"},
}
SOLVER_KEYS = {
    "theorem1": {"schedule", "c_T", "c_M", "c_K", "c_gamma", "c_alpha", "smooth_path", "stop_at_hit"},
    "theorem2": {"schedule", "c_T", "c_M", "c_K", "c_gamma", "c_alpha", "smooth_path", "stop_at_hit"},
    "deterministic": {"schedule", "c_K", "c_alpha", "T", "stop_at_hit"},
    "explicit": {"schedule", "lam", "alpha", "gamma", "T", "M", "K", "r_lambda", "smooth_path",
                 "step_rule", "stop_at_hit"},
}
EXPLICIT_REQUIRED = ("lam", "alpha", "gamma", "T", "M", "K")
VERIFY_KEYS = {"suites", "n_points", "lams", "bias_lam", "bias_states", "n_rep", "n_runs",
               "n_triples", "psgd_seeds", "chain_epsilon", "chain_d_x", "p", "draws"}
SUITES = ("surrogate", "bias", "variance", "projection", "psgd", "zero_chain")
STALL_KEYS = {"p", "budget", "checkpoints"}
MOMENTS_KEYS = {"n", "block", "y_offset"}
FIT_KEYS = {"n_boot", "level", "max_slope"}
NEEDS = {
    "solve": ("instance", "oracle", "solver", "epsilon"),
    "rate-fit": ("instance", "oracle", "solver", "epsilon"),
    "stall": ("instance", "epsilon", "stall"),
    "oracle-moments": ("instance", "oracle", "epsilon"),
    "verify-lemmas": (),
}
ALLOWED = {
    "solve": {"instance", "oracle", "solver", "epsilon", "x0"},
    "rate-fit": {"instance", "oracle", "solver", "epsilon", "x0", "fit"},
    "stall": {"instance", "epsilon", "stall"},
    "oracle-moments": {"instance", "oracle", "epsilon", "x0", "moments"},
    "verify-lemmas": {"instance", "epsilon", "verify"},
}
CHAIN_TYPES = ("chain", "embedded_chain")


class SpecError(ValueError):
    """Invalid run specification; the message carries file and line."""


# ---------------------------------------------------------------------------
# parsing


class _Locator:
    """Maps key paths such as ("solver", "lam") to line numbers in the raw text."""

    def __init__(self, path: str, text: str):
        self.path = path
        self.text = text

    def line(self, *keys: str) -> int:
        pos = 0
        found = 0
        for k in keys:
            m = re.compile(r'"%s"\s*:' % re.escape(k)).search(self.text, pos)
            if m is None:
                break
            pos = found = m.start()
        return self.text.count("\n", 0, found) + 1

    def error(self, msg: str, *keys: str) -> SpecError:
        return SpecError(f"{self.path}:{self.line(*keys)}: {msg}")


@dataclass(frozen=True)
class RunSpec:
    """Validated run specification. ``raw`` is the canonical JSON tree it came from."""

    kind: str
    seeds: tuple
    epsilon: tuple
    master_seed: int
    instance: dict = field(default_factory=dict)
    oracle: dict = field(default_factory=dict)
    solver: dict = field(default_factory=dict)
    x0: object = None
    options: dict = field(default_factory=dict)
    output: str | None = None
    raw: dict = field(default_factory=dict, repr=False)

    @property
    def digest(self) -> str:
        body = {k: v for k, v in self.raw.items() if k != "output"}
        body["master_seed"] = self.master_seed
        return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()


def _no_duplicates(pairs):
    out = {}
    for k, v in pairs:
        if k in out:
            raise ValueError(f"duplicate key {k!r}")
        out[k] = v
    return out


def _check_keys(loc: _Locator, block: dict, allowed: set, where: tuple):
    for k in block:
        if k not in allowed:
            name = ".".join(where + (k,))
            raise loc.error(f"unknown key {name!r} (allowed: {', '.join(sorted(allowed))})", *where, k)


def _number(loc, block, key, where, default=None, kind=float, positive=False, allow_inf=False):
    if key not in block:
        return default
    v = block[key]
    if v is None and allow_inf:
        return math.inf
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise loc.error(f"{'.'.join(where + (key,))} must be a number", *where, key)
    if kind is int and float(v) != int(v):
        raise loc.error(f"{'.'.join(where + (key,))} must be an integer", *where, key)
    v = kind(v)
    if positive and not v > 0:
        raise loc.error(f"{'.'.join(where + (key,))} must be positive", *where, key)
    return v


def _typed_block(loc, raw, name, table, default_type=None):
    block = raw.get(name)
    if block is None:
        return {}
    if not isinstance(block, dict):
        raise loc.error(f"{name} must be an object", name)
    key = "schedule" if name == "solver" else "type"
    typ = block.get(key, default_type)
    if typ not in table:
        raise loc.error(f"{name}.{key} must be one of {', '.join(sorted(table))}, got {typ!r}", name, key)
    _check_keys(loc, block, table[typ], (name,))
    return {**block, key: typ}


def _plain_block(loc, raw, name, allowed):
    block = raw.get(name, {})
    if not isinstance(block, dict):
        raise loc.error(f"{name} must be an object", name)
    _check_keys(loc, block, allowed, (name,))
    return dict(block)


def _number_list(loc, raw, key, kind=float, positive=False):
    v = raw[key]
    vals = v if isinstance(v, list) else [v]
    if not vals:
        raise loc.error(f"{key} must not be empty", key)
    out = []
    for x in vals:
        if isinstance(x, bool) or not isinstance(x, (int, float)) or (kind is int and float(x) != int(x)):
            raise loc.error(f"{key} entries must be {'integers' if kind is int else 'numbers'}", key)
        if positive and not x > 0:
            raise loc.error(f"{key} entries must be positive", key)
        out.append(kind(x))
    if len(set(out)) != len(out):
        raise loc.error(f"{key} has repeated entries", key)
    return tuple(out)


def parse_spec(path, seed: int | None = None) -> RunSpec:
    """Read and validate a JSON run spec. ``seed`` overrides the run spec's master_seed."""
    path = str(path)
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise SpecError(f"{path}: cannot read spec: {exc.strerror or exc}") from None
    try:
        raw = json.loads(text, object_pairs_hook=_no_duplicates)
    except json.JSONDecodeError as exc:
        raise SpecError(f"{path}:{exc.lineno}: invalid JSON: {exc.msg}") from None
    except ValueError as exc:
        key = str(exc).split("'")[1]
        loc = _Locator(path, text)
        raise loc.error(str(exc), key) from None
    loc = _Locator(path, text)
    if not isinstance(raw, dict):
        raise SpecError(f"{path}:1: spec must be a JSON object")
    _check_keys(loc, raw, TOP_KEYS, ())
    kind = raw.get("kind")
    if kind not in KINDS:
        raise loc.error(f"kind must be one of {', '.join(KINDS)}, got {kind!r}", "kind")
    for k in raw:
        if k not in ALLOWED[kind] | {"kind", "seeds", "output", "master_seed"}:
            raise loc.error(f"key {k!r} is not used by kind {kind!r}", k)
    instance = _typed_block(loc, raw, "instance", INSTANCE_KEYS)
    oracle = _typed_block(loc, raw, "oracle", ORACLE_KEYS)
    solver = _typed_block(loc, raw, "solver", SOLVER_KEYS, default_type="theorem2")
    options = {}
    for name, allowed in (("verify", VERIFY_KEYS), ("stall", STALL_KEYS),
                          ("moments", MOMENTS_KEYS), ("fit", FIT_KEYS)):
        if name in raw:
            options = _plain_block(loc, raw, name, allowed)
    for k in NEEDS[kind] + ("seeds",):
        if k not in raw:
            raise SpecError(f"{path}:1: missing required field {k!r} for kind {kind!r}")
    seeds = _number_list(loc, raw, "seeds", kind=int)
    epsilon = _number_list(loc, raw, "epsilon", positive=True) if "epsilon" in raw else ()
    master = seed if seed is not None else _number(loc, raw, "master_seed", (), 0, int)
    output = raw.get("output")
    if output is not None and not isinstance(output, str):
        raise loc.error("output must be a string", "output")
    spec = RunSpec(kind, seeds, epsilon, int(master), instance, oracle, solver,
                   raw.get("x0"), options, output, raw)
    _validate(spec, loc)
    return spec


def _build_instance(block: dict, eps: float):
    typ = block["type"]
    args = {k: v for k, v in block.items() if k != "type"}
    if typ == "quadratic":
        return QuadraticInstance(**args)
    if typ == "perturbed":
        return PerturbedQuadraticInstance(**args)
    cfg = kernels.ChainConfig(eps, args.pop("d_x", None))
    if typ == "chain":
        return ChainInstance(cfg)
    return EmbeddedChainInstance(cfg, int(args.get("dim", cfg.d_x)), int(args.get("seed", 0)))


def _build_oracle(block: dict, problem, seed: int):
    typ = block["type"]
    args = {k: (math.inf if v is None else v) for k, v in block.items() if k != "type"}
    if typ == "gaussian":
        return GaussianOracle(problem, seed=seed, **args)
    return ZeroChainOracle(problem, seed=seed, **args)


def _build_config(block: dict, eps: float, problem, oracle) -> SolverConfig:
    profile = problem.profile
    r = oracle.r
    sched = block["schedule"]
    if sched in ("theorem1", "theorem2"):
        kw = {k: block[k] for k in ("c_T", "c_M", "c_K", "c_gamma", "c_alpha", "smooth_path") if k in block}
        return schedule_from_theorem(int(sched[-1]), eps, profile, r, **kw)
    if sched == "deterministic":
        kw = {k: block[k] for k in ("c_K", "c_alpha", "T") if k in block}
        return schedule_deterministic(eps, profile, r, **kw)
    lam = float(block["lam"])
    r_lam = block.get("r_lambda", profile.l_f0 / (profile.mu_g * lam))
    return SolverConfig(eps, lam, float(block["alpha"]), float(block["gamma"]), int(block["T"]),
                        int(block["M"]), int(block["K"]), r, r_lam,
                        bool(block.get("smooth_path", True)), block.get("step_rule", "constant"))


def _x0(spec: RunSpec, problem):
    x0 = spec.x0
    if x0 is None:
        return np.zeros(problem.d_x)
    if isinstance(x0, dict):
        return problem.x_with_gap(float(x0["gap"]), int(x0.get("seed", 0)))
    return np.asarray(x0, dtype=float)


def _validate(spec: RunSpec, loc: _Locator):
    """Build every object a cell will need once, turning failures into located errors."""
    kind = spec.kind
    for name in ("instance", "oracle"):
        for k, v in getattr(spec, name).items():
            if k != "type" and not (v is None and k in ("r", "sigma", "l_tilde")):
                _number(loc, getattr(spec, name), k, (name,),
                        kind=int if k in ("d_x", "d_y", "seed", "dim", "N") else float)
    inst = spec.instance
    if kind in ("stall",) and inst.get("type") != "chain":
        raise loc.error("stall experiments need instance.type = 'chain'", "instance", "type")
    if spec.oracle.get("type") == "zero_chain" and inst.get("type") not in CHAIN_TYPES:
        raise loc.error("zero_chain oracle needs a chain instance", "oracle", "type")
    if inst.get("type") in CHAIN_TYPES and spec.oracle.get("type") == "gaussian":
        raise loc.error("chain instances are queried through the zero_chain oracle", "oracle", "type")
    if spec.x0 is not None:
        if isinstance(spec.x0, dict):
            _check_keys(loc, spec.x0, {"gap", "seed"}, ("x0",))
            if inst.get("type") != "quadratic" or "gap" not in spec.x0:
                raise loc.error("x0 given as {'gap': ...} needs a quadratic instance", "x0")
        elif not (isinstance(spec.x0, list) and all(isinstance(v, (int, float)) for v in spec.x0)):
            raise loc.error("x0 must be a list of numbers or {'gap': g}", "x0")
    if spec.solver:
        for k, v in spec.solver.items():
            if k in ("smooth_path", "stop_at_hit"):
                if not isinstance(v, bool):
                    raise loc.error(f"solver.{k} must be true or false", "solver", k)
            elif k == "step_rule":
                if v not in ("constant", "diminishing"):
                    raise loc.error("solver.step_rule must be 'constant' or 'diminishing'", "solver", k)
            elif k != "schedule":
                _number(loc, spec.solver, k, ("solver",), kind=int if k in ("T", "M", "K") else float)
        if spec.solver["schedule"] == "explicit":
            for k in EXPLICIT_REQUIRED:
                if k not in spec.solver:
                    raise loc.error(f"explicit solver block is missing {k!r}", "solver")
    _validate_options(spec, loc)

    if not spec.instance:
        return
    eps_grid = spec.epsilon or (0.1,)
    for eps in eps_grid:
        try:
            problem = _build_instance(inst, eps)
        except (TypeError, ValueError) as exc:
            raise loc.error(f"instance: {exc}", "instance") from None
        x0 = _x0(spec, problem)
        if x0.shape != (problem.d_x,):
            raise loc.error(f"x0 has {x0.size} entries, instance has d_x = {problem.d_x}", "x0")
        if not spec.oracle:
            continue
        try:
            oracle = _build_oracle(spec.oracle, problem, 0)
        except (TypeError, ValueError) as exc:
            key = "N" if "N must" in str(exc) else "type"
            raise loc.error(f"oracle: {exc}", "oracle", key) from None
        if not spec.solver:
            continue
        try:
            cfg = _build_config(spec.solver, eps, problem, oracle)
        except (ConfigError, TypeError, ValueError) as exc:
            raise loc.error(f"solver at epsilon={eps}: {exc}", "solver") from None
        errs = cfg.problems(problem.profile)
        if errs:
            key = re.match(r"[A-Za-z_]+", errs[0]).group(0)
            where = ("solver", key) if key in spec.solver else ("solver",)
            raise loc.error(f"solver at epsilon={eps}: " + "; ".join(errs), *where)


def _validate_options(spec: RunSpec, loc: _Locator):
    o = spec.options
    kind = spec.kind
    for k, v in o.items():
        if k in ("suites", "lams", "checkpoints", "p") and isinstance(v, list):
            continue
        if k in ("block",):
            continue
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise loc.error(f"{k} must be a number", k)
    if kind == "verify-lemmas":
        suites = o.get("suites", list(SUITES))
        bad = [s for s in suites if s not in SUITES]
        if bad or not suites:
            raise loc.error(f"unknown suites {bad}; choose from {', '.join(SUITES)}", "verify", "suites")
        if spec.instance and spec.instance["type"] not in ("quadratic", "perturbed"):
            raise loc.error("verify-lemmas instances must be quadratic or perturbed", "instance", "type")
    if kind == "stall":
        if "p" not in o:
            raise loc.error("stall block needs 'p'", "stall")
        ps = o["p"] if isinstance(o["p"], list) else [o["p"]]
        if not ps or not all(isinstance(p, (int, float)) and 0 < p <= 1 for p in ps):
            raise loc.error("stall.p entries must lie in (0, 1]", "stall", "p")
    if kind == "oracle-moments":
        if o.get("block", "g") not in ("g", "g_x", "g_y", "f", "f_x", "f_y"):
            raise loc.error("moments.block must be one of g, g_x, g_y, f, f_x, f_y", "moments", "block")
        if int(o.get("n", 10000)) < 2:
            raise loc.error("moments.n must be at least 2", "moments", "n")


# ---------------------------------------------------------------------------
# execution


def cell_seed(master: int, key: str) -> int:
    """Seed of one cell: depends only on the master seed and the cell's own key."""
    return int(np.random.SeedSequence([master, zlib.crc32(key.encode())]).generate_state(1)[0])


def _cells(spec: RunSpec) -> list[dict]:
    eps = spec.epsilon or (None,)
    if spec.kind == "verify-lemmas":
        suites = spec.options.get("suites", list(SUITES))
        return [{"key": f"suite={s}/seed={sd}", "suite": s, "seed": sd} for s in suites for sd in spec.seeds]
    if spec.kind == "stall":
        ps = spec.options["p"] if isinstance(spec.options["p"], list) else [spec.options["p"]]
        return [{"key": f"eps={e!r}/p={p!r}/seed={sd}", "eps": e, "p": float(p), "seed": sd}
                for e in eps for p in ps for sd in spec.seeds]
    return [{"key": f"eps={e!r}/seed={sd}", "eps": e, "seed": sd} for e in eps for sd in spec.seeds]


def _trace_name(key: str) -> str:
    return re.sub(r"[^A-Za-z0-9.=-]+", "_", key).replace("=", "") + ".csv"


def _write_trace(path: Path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_HEADER)
        for it, calls, norm, prog in rows:
            w.writerow([int(it), int(calls), repr(float(norm)), int(prog)])


def _finite(v):
    """JSON-safe copy: non-finite floats become None, numpy scalars become Python ones."""
    if isinstance(v, dict):
        return {str(k): _finite(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_finite(x) for x in v]
    if isinstance(v, np.ndarray):
        return _finite(v.tolist())
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return float(v) if math.isfinite(v) else None
    return v


def _solve_cell(spec: RunSpec, cell: dict, seed: int, trace_dir: Path) -> dict:
    eps = cell["eps"]
    problem = _build_instance(spec.instance, eps)
    oracle = _build_oracle(spec.oracle, problem, seed)
    cfg = _build_config(spec.solver, eps, problem, oracle).validate(problem.profile)
    stop = spec.solver.get("stop_at_hit", spec.kind == "rate-fit")
    res = run(problem, oracle, cfg, _x0(spec, problem), seed=seed, stop_at_hit=stop)
    # measurement uses exact evaluators, so the oracle counter must equal the solver's bill
    if oracle.calls != int(res.oracle_calls[-1]):
        raise RuntimeError(f"measurement consumed oracle calls: {oracle.calls} != {res.oracle_calls[-1]}")
    _write_trace(trace_dir / _trace_name(cell["key"]), res.rows())
    return {
        "first_hit_calls": first_hit(res),
        "oracle_calls": int(res.oracle_calls[-1]),
        "outer_iterations": int(res.iters[-1]),
        "final_grad_F_norm": float(res.grad_norms[-1]),
        "out_of_region": int(res.out_of_region),
        "config": {"lam": cfg.lam, "alpha": cfg.alpha, "gamma": cfg.gamma, "T": cfg.T, "M": cfg.M,
                   "K": cfg.K, "r": cfg.r, "r_lambda": cfg.r_lambda, "smooth_path": cfg.smooth_path,
                   "step_rule": cfg.step_rule},
    }


def _stall_cell(spec: RunSpec, cell: dict, seed: int, trace_dir: Path) -> dict:
    cfg = kernels.ChainConfig(cell["eps"], spec.instance.get("d_x"))
    o = spec.options
    budget = int(o.get("budget", 20 * cfg.d_x * int(math.ceil(1.0 / cell["p"]))))
    checkpoints = sorted(int(c) for c in o.get("checkpoints", []))
    tr = analysis.stall_trace(cfg, cell["p"], seed, max([budget] + checkpoints))
    _write_trace(trace_dir / _trace_name(cell["key"]), tr.marks)
    hit = tr.hit
    return {
        "activation_time": hit if hit is not None and hit <= budget else None,
        "progress_at": {str(c): tr.progress_at(c) for c in checkpoints},
        "oracle_calls": int(tr.calls[-1]),
        "budget": budget,
    }


def _true_block(problem, oracle, x, y, block):
    fx, fy = problem.grad_f(x, y)
    gx, gy = problem.grad_g(x, y)
    if isinstance(oracle, ZeroChainOracle):
        gx = problem.clipped_grad_g_x(x, y)
    parts = {"g_x": gx, "g_y": gy, "f_x": fx, "f_y": fy}
    parts["g"] = np.concatenate([gx, gy])
    parts["f"] = np.concatenate([fx, fy])
    return parts[block]


def _moments_cell(spec: RunSpec, cell: dict, seed: int, trace_dir: Path) -> dict:
    problem = _build_instance(spec.instance, cell["eps"])
    oracle = _build_oracle(spec.oracle, problem, seed)
    o = spec.options
    block = o.get("block", "g")
    x = _x0(spec, problem)
    y = problem.y_star(x) + float(o.get("y_offset", 0.0))
    rng = np.random.default_rng(seed)
    m = estimate_moments(oracle, x, y, int(o.get("n", 10000)), rng, block)
    truth = _true_block(problem, oracle, x, y, block)
    z = np.abs(m.mean - truth) / np.maximum(m.stderr, 1e-300)
    ok = bool(np.all((np.abs(m.mean - truth) <= 1e-12) | (z <= 4.5)))
    return {"ok": ok, "max_z": float(np.max(np.where(m.stderr > 0, z, 0.0))), "cov_trace": m.cov_trace,
            "n": m.n, "block": block, "out_of_region": oracle.out_of_region}


def _verify_cell(spec: RunSpec, cell: dict, seed: int, trace_dir: Path) -> dict:
    o = spec.options
    rng = np.random.default_rng(seed)
    suite = cell["suite"]
    if spec.instance:
        problems = [_build_instance(spec.instance, 0.1)]
    else:
        problems = [QuadraticInstance(5, 5), PerturbedQuadraticInstance(5, 5)]
    reports = []
    if suite == "surrogate":
        for p in problems:
            reports.append(analysis.surrogate_suite(p, o.get("lams", [10.0, 100.0, 1000.0]),
                                                    int(o.get("n_points", 100)), rng))
    elif suite == "bias":
        for p in problems:
            reports.append(analysis.bias_suite(p, float(o.get("bias_lam", 100.0)),
                                               int(o.get("bias_states", 1000)), rng))
    elif suite == "variance":
        for p in problems:
            oracle = GaussianOracle(p, 0.3, 0.5, seed=seed, sigma_mult=0.5)
            for smooth in (True, False):
                cfg = schedule_from_theorem(2, 0.4, p.profile, c_M=0.01, smooth_path=smooth)
                x = rng.standard_normal(p.d_x)
                reports.append(analysis.variance_suite(oracle, cfg, x, int(o.get("n_rep", 10000)), rng))
    elif suite == "projection":
        reports.append(analysis.projection_triples_suite(int(o.get("n_triples", 10000)), 5, rng))
        for p in problems:
            oracle = GaussianOracle(p, 0.1, 0.1, r=1.0, seed=seed)
            for th in (1, 2):
                cfg = schedule_from_theorem(th, 0.4, p.profile, r=1.0, c_T=1.0 if th == 2 else 0.1,
                                            c_M=0.01, c_K=2.0)
                x0 = rng.standard_normal(p.d_x)
                seeds = range(int(o.get("n_runs", 10)))
                reports.append(analysis.projection_run_suite(oracle, cfg, x0, seeds))
    elif suite == "psgd":
        reports.extend(analysis.psgd_suite(int(o.get("psgd_seeds", 1000)), seed=seed))
    elif suite == "zero_chain":
        cfg = kernels.ChainConfig(float(o.get("chain_epsilon", 0.2)), int(o.get("chain_d_x", 25)))
        draws = int(o.get("draws", 10000))
        reports.extend(analysis.zero_chain_suite(cfg, float(o.get("p", 0.01)), 20, draws, 10000, rng))
    rows = [r.as_dict() for r in reports]
    return {"ok": all(r.ok for r in reports), "reports": rows}


_RUNNERS = {
    "solve": _solve_cell,
    "rate-fit": _solve_cell,
    "stall": _stall_cell,
    "oracle-moments": _moments_cell,
    "verify-lemmas": _verify_cell,
}


def _run_cell(args):
    spec, cell, trace_dir = args
    seed = cell_seed(spec.master_seed, cell["key"])
    t0 = time.perf_counter()
    try:
        out = _RUNNERS[spec.kind](spec, cell, seed, trace_dir)
    except Exception as exc:  # recorded per cell; other cells keep their results
        logger.exception("cell %s failed", cell["key"])
        out = {"error": f"{type(exc).__name__}: {exc}"}
    out = {"key": cell["key"], "seed": seed, **out}
    return out, time.perf_counter() - t0


def _aggregate(spec: RunSpec, cells: list[dict]) -> tuple[dict, bool]:
    """Kind-level summary and whether every verification passed."""
    ok = all("error" not in c and c.get("ok", True) for c in cells)
    if spec.kind == "rate-fit":
        hits: dict[float, list] = {}
        for c in cells:
            eps = float(c["key"].split("/")[0][4:])
            hits.setdefault(eps, []).append(c.get("first_hit_calls"))
        fo = spec.options
        fit = analysis.slope_from_hits(hits, n_boot=int(fo.get("n_boot", 2000)), seed=spec.master_seed,
                                       level=float(fo.get("level", 0.95)))
        agg = {"slope": fit.slope, "ci": list(fit.ci), "eps": fit.eps, "medians": fit.medians,
               "censored_cells": list(fit.censored_cells)}
        if "max_slope" in fo:
            passed = (not fit.censored) and math.isfinite(fit.slope) and fit.slope <= float(fo["max_slope"])
            agg["max_slope"] = float(fo["max_slope"])
            agg["ok"] = passed
            ok = ok and passed
        return agg, ok
    if spec.kind == "stall":
        groups: dict[str, list] = {}
        for c in cells:
            head = c["key"].rsplit("/", 1)[0]
            groups.setdefault(head, []).append(c)
        agg = {}
        for head, cs in groups.items():
            times = [math.inf if c.get("activation_time") is None else c["activation_time"]
                     for c in cs if "error" not in c]
            agg[head] = {"median_activation_time": float(np.median(times)) if times else None,
                         "censored": sum(1 for t in times if math.isinf(t))}
        return agg, ok
    if spec.kind == "verify-lemmas":
        return {"failed_suites": [c["key"] for c in cells if not c.get("ok", False)]}, ok
    if spec.kind == "oracle-moments":
        return {"failed_cells": [c["key"] for c in cells if not c.get("ok", False)]}, ok
    return {"failed_cells": [c["key"] for c in cells if "error" in c]}, ok


def _output_dir(spec: RunSpec, out: str | None) -> Path:
    d = Path(out or spec.output or os.environ.get(OUT_ENV) or "results")
    try:
        (d / "traces").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise SpecError(f"output directory {d} is not writable: {exc.strerror or exc}") from None
    if not os.access(d, os.W_OK):
        raise SpecError(f"output directory {d} is not writable")
    return d


def execute(spec: RunSpec, out: str | None = None, workers: int = 1) -> tuple[dict, int]:
    """Run every cell, persist traces and the summary, and return (summary, exit code)."""
    out_dir = _output_dir(spec, out)
    trace_dir = out_dir / "traces"
    cells = _cells(spec)
    tasks = [(spec, c, trace_dir) for c in cells]
    t0 = time.perf_counter()
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_cell, tasks))
    else:
        results = [_run_cell(t) for t in tasks]
    cell_out = [r for r, _ in results]
    agg, ok = _aggregate(spec, cell_out)
    summary = _finite({
        "kind": spec.kind,
        "spec_hash": spec.digest,
        "version": __version__,
        "master_seed": spec.master_seed,
        "trace_columns": list(TRACE_HEADER),
        "cells": cell_out,
        "aggregate": agg,
        "ok": ok,
    })
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    timing = {"total_seconds": time.perf_counter() - t0,
              "cells": {r["key"]: dt for r, dt in results}}
    (out_dir / "timing.json").write_text(json.dumps(timing, indent=2, sort_keys=True) + "\n")
    return summary, 0 if ok else 1


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ystar-bilevel", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="execute a JSON run spec")
    r.add_argument("spec", help="path to the JSON run spec")
    r.add_argument("--workers", type=int, default=1, help="parallel cells (default 1)")
    r.add_argument("--out", default=None, help=f"output directory (default: spec 'output', ${OUT_ENV}, ./results)")
    r.add_argument("--seed", type=int, default=None, help="master seed, overrides the run spec")
    r.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.workers < 1:
        print("error: --workers must be at least 1", file=sys.stderr)
        return 2
    try:
        spec = parse_spec(args.spec, seed=args.seed)
        summary, code = execute(spec, args.out, args.workers)
    except SpecError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    status = "ok" if code == 0 else "FAILED"
    print(f"{spec.kind}: {len(summary['cells'])} cells, {status}")
    return code


if __name__ == "__main__":
    sys.exit(main())
