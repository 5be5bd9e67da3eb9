"""Experiment configuration, problem construction, reference caching and sweeps."""

from __future__ import annotations

import configparser
import csv
import hashlib
import io
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import data, theory
from .model import MixtureProblem
from .solvers import ConfigError, SolverConfig, Variant, run
from .solvers.trace import fmt17

__all__ = [
    "ExperimentConfig",
    "load_config",
    "defaults_text",
    "build_problem",
    "theoretical_alpha",
    "ReferenceCache",
    "run_experiment",
    "sweep_p",
    "sweep_lambda",
    "summary_line",
]

log = logging.getLogger(__name__)

# config key -> (section, type)
_SCHEMA = {
    "dataset": ("data", str),
    "devices": ("data", int),
    "split_mode": ("data", str),
    "split_seed": ("data", int),
    "mu": ("data", float),
    "target_smoothness": ("data", float),
    "quad_dim": ("data", int),
    "quad_components": ("data", int),
    "variant": ("solver", str),
    "alpha": ("solver", str),
    "p": ("solver", float),
    "lam": ("solver", float),
    "max_iters": ("solver", int),
    "record_every": ("solver", int),
    "seed": ("run", int),
    "repeats": ("run", int),
    "target_rel_subopt": ("run", float),
    "stop_at_target": ("run", bool),
    "reference_tol": ("run", float),
    "use_reference": ("run", bool),
    "cache_dir": ("run", str),
    "p_grid": ("sweep", list),
    "lambda_grid": ("sweep", list),
}
_ALIASES = {"lambda": "lam", "n": "devices", "split": "split_mode"}


@dataclass
class ExperimentConfig:
    dataset: str = "a1a"
    devices: int = 5
    split_mode: str = "homogeneous"
    split_seed: int = 0
    mu: float = 1e-4
    target_smoothness: float = 1.0
    quad_dim: int = 3
    quad_components: int = 4
    variant: str = "L2SGD_PLUS"
    alpha: str = "theory"
    p: float = 0.09
    lam: float = 0.1
    max_iters: int = 2_000_000
    record_every: int | None = None
    seed: int | None = None
    repeats: int = 1
    target_rel_subopt: float = 1e-5
    stop_at_target: bool = True
    reference_tol: float = 1e-10
    use_reference: bool = True
    cache_dir: str | None = None
    p_grid: list = field(default_factory=lambda: [0.02, 0.05, 0.09, 0.2, 0.4, 0.6, 0.8])
    lambda_grid: list = field(default_factory=lambda: [0.01, 0.1, 1.0, 10.0, 100.0])

    def validate(self, need_seed: bool = False):
        if self.devices < 1:
            raise ConfigError("devices must be >= 1")
        if self.split_mode not in ("homogeneous", "heterogeneous"):
            raise ConfigError(f"unknown split mode {self.split_mode!r}")
        if self.mu < 0:
            raise ConfigError("mu must be >= 0")
        if not 0.0 < self.target_rel_subopt < 1.0:
            raise ConfigError("target_rel_subopt must lie in (0, 1)")
        if not 0.0 < self.p < 1.0:
            raise ConfigError("p must lie in (0, 1)")
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        if self.repeats < 1:
            raise ConfigError("repeats must be >= 1")
        Variant.parse(self.variant)
        if self.alpha != "theory":
            try:
                if float(self.alpha) <= 0:
                    raise ValueError
            except ValueError:
                raise ConfigError(f"alpha must be 'theory' or a positive number, got {self.alpha!r}") from None
        if need_seed and self.seed is None:
            raise ConfigError("--seed is required")
        if any(not 0.0 < q < 1.0 for q in self.p_grid) or not self.p_grid:
            raise ConfigError("p_grid must be a nonempty list inside (0, 1)")
        if any(v <= 0 for v in self.lambda_grid) or not self.lambda_grid:
            raise ConfigError("lambda_grid must be a nonempty list of positive values")
        return self

    def update(self, **kw):
        for k, v in kw.items():
            k = _ALIASES.get(k, k)
            if v is None:
                continue
            if k not in _SCHEMA:
                raise ConfigError(f"unknown config key {k!r}")
            setattr(self, k, _coerce(k, v))
        return self


def _coerce(key, value):
    typ = _SCHEMA[key][1]
    if value is None:
        return None
    try:
        if typ is bool:
            if isinstance(value, bool):
                return value
            return str(value).strip().lower() in ("1", "true", "yes", "on")
        if typ is list:
            if isinstance(value, (list, tuple)):
                return [float(v) for v in value]
            return [float(v) for v in str(value).replace(",", " ").split()]
        if typ is str:
            return str(value)
        return typ(value)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {value!r}") from None


def load_config(path) -> ExperimentConfig:
    cp = configparser.ConfigParser()
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except configparser.Error as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from None
    cfg = ExperimentConfig()
    for section in cp.sections():
        for key, value in cp.items(section):
            k = _ALIASES.get(key, key)
            if k not in _SCHEMA:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            if _SCHEMA[k][0] != section:
                raise ConfigError(f"key {key!r} belongs in section [{_SCHEMA[k][0]}]")
            if value.strip() == "":
                setattr(cfg, k, None)
            else:
                setattr(cfg, k, _coerce(k, value))
    return cfg


def defaults_text(cfg: ExperimentConfig | None = None) -> str:
    cfg = cfg or ExperimentConfig()
    out = io.StringIO()
    section = None
    for f in fields(cfg):
        sec = _SCHEMA[f.name][0]
        if sec != section:
            out.write(("\n" if section else "") + f"[{sec}]\n")
            section = sec
        v = getattr(cfg, f.name)
        if isinstance(v, list):
            v = " ".join(f"{x:g}" for x in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        elif v is None:
            v = ""
        out.write(f"{'lambda' if f.name == 'lam' else f.name} = {v}\n")
    return out.getvalue()


@dataclass
class Built:
    problem: MixtureProblem
    fingerprint: str
    dataset: object = None
    partition: object = None


def build_problem(cfg: ExperimentConfig, lam: float | None = None) -> Built:
    lam = cfg.lam if lam is None else lam
    name = cfg.dataset
    if name == "quadratic":
        devs = data.quadratic_devices(cfg.devices, cfg.quad_dim, cfg.quad_components, seed=cfg.split_seed,
                                      mu=cfg.mu)
        key = f"quadratic:{cfg.devices}:{cfg.quad_dim}:{cfg.quad_components}:{cfg.split_seed}:{cfg.mu!r}"
        return Built(MixtureProblem(devs, lam), hashlib.sha256(key.encode()).hexdigest()[:16])
    if name == "a1a":
        ds = data.a1a_dataset()
    elif name == "synthetic-a1a":
        ds = data.synthetic_a1a()
    else:
        try:
            ds = data.load_libsvm(name)
        except OSError as exc:
            raise ConfigError(f"cannot read dataset {name}: {exc}") from None
    ds = data.normalize_rows(ds, cfg.target_smoothness)
    try:
        part = data.split(ds, cfg.devices, cfg.split_mode, cfg.split_seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    devs = data.logistic_devices(ds, part, cfg.mu)
    key = f"{ds.fingerprint()}:{cfg.devices}:{cfg.split_mode}:{part.seed}:{cfg.mu!r}:{cfg.target_smoothness!r}"
    return Built(MixtureProblem(devs, lam), hashlib.sha256(key.encode()).hexdigest()[:16], ds, part)


def theoretical_alpha(variant, P: MixtureProblem, p: float, lam: float | None = None) -> float:
    """Stepsize the convergence theory prescribes for ``variant``."""
    variant = Variant.parse(variant)
    lam = P.lam if lam is None else lam
    L, mu = theory.problem_smoothness(P)
    n = P.n
    if variant == Variant.L2GD:
        return 1.0 / (2 * theory.expected_L(L, lam, p, n))
    if variant == Variant.VR_LOCAL_GD:
        return theory.vr_local_gd_rates(L, max(mu, 1e-300), lam, p, 0.5, n).alpha
    if variant == Variant.L2SGDPP:
        from .solvers.sampling import UniformSingle

        v = [dev.component_smoothness() for dev in P.devices]
        marg = [UniformSingle(dev.m).marginals() for dev in P.devices]
        return theory.l2sgdpp_rates(v, marg, np.ones(n), P.N, n, max(mu, 1e-300), lam, p, 0.5).alpha
    m = max(dev.m for dev in P.devices)
    return theory.l2sgd_plus_rates(L, max(mu, 1e-300), lam, m, p, 0.5, n).alpha


class ReferenceCache:
    """On-disk cache of reference solutions keyed by problem fingerprint, lambda and tolerance."""

    def __init__(self, directory=None):
        self.dir = None if directory is None else Path(directory)

    def key(self, fingerprint, lam, tol):
        raw = json.dumps([fingerprint, repr(float(lam)), repr(float(tol))])
        return hashlib.sha256(raw.encode()).hexdigest()[:24]

    def get(self, built: Built, lam: float, tol: float) -> theory.ReferenceSolution:
        P = built.problem
        path = None
        if self.dir is not None:
            path = self.dir / f"ref-{self.key(built.fingerprint, lam, tol)}.npz"
            if path.is_file():
                z = np.load(path)
                return theory.ReferenceSolution(float(z["lam"]), z["x_star"], z["x_bar"], float(z["F_star"]),
                                                float(z["grad_norm"]), int(z["iterations_used"]), float(z["tol"]))
        ref = theory.reference_solution(P, lam, tol)
        if path is not None:
            self.dir.mkdir(parents=True, exist_ok=True)
            tmp = path.with_suffix(".tmp.npz")
            np.savez(tmp, lam=ref.lam, x_star=ref.x_star, x_bar=ref.x_bar, F_star=ref.F_star,
                     grad_norm=ref.grad_norm, iterations_used=ref.iterations_used, tol=ref.tol)
            os.replace(tmp, path)
        return ref


def _solver_config(cfg: ExperimentConfig, P, p, lam, seed, target=True) -> SolverConfig:
    alpha = theoretical_alpha(cfg.variant, P, p, lam) if cfg.alpha == "theory" else float(cfg.alpha)
    return SolverConfig(Variant.parse(cfg.variant), alpha=alpha, p=p, seed=seed, max_iters=cfg.max_iters,
                        lam=lam, record_every=cfg.record_every,
                        target=cfg.target_rel_subopt if (target and cfg.stop_at_target) else None)


@dataclass
class ExperimentResult:
    result: object
    reference: object
    solver: SolverConfig
    reached: tuple | None
    wall: float


def summary_line(res: ExperimentResult, target: float) -> str:
    if res.reference is None:
        return f"no reference; iterations={res.result.trace.k[-1]}"
    if res.reached is None:
        return f"target {target:g} not reached within {res.result.trace.k[-1]} iterations"
    k, dp, cr = res.reached
    return f"target {target:g} reached: iterations={k} data_passes={dp:.6g} comm_rounds={cr}"


def run_experiment(cfg: ExperimentConfig, built: Built | None = None, p: float | None = None,
                   lam: float | None = None, seed: int | None = None, cache: ReferenceCache | None = None,
                   reference=None) -> ExperimentResult:
    p = cfg.p if p is None else p
    lam = cfg.lam if lam is None else lam
    seed = cfg.seed if seed is None else seed
    if seed is None:
        raise ConfigError("a seed is required")
    built = built or build_problem(cfg, lam)
    P = built.problem if built.problem.lam == lam else built.problem.with_lambda(lam)
    if reference is None and cfg.use_reference:
        try:
            reference = (cache or ReferenceCache(cfg.cache_dir)).get(built, lam, cfg.reference_tol)
        except theory.ReferenceError as exc:
            log.warning("reference failed (%s); rel_subopt omitted", exc)
            reference = None
    scfg = _solver_config(cfg, P, p, lam, seed)
    x0 = np.zeros((P.n, P.d))
    t0 = time.perf_counter()
    res = run(x0, P, scfg, reference)
    wall = time.perf_counter() - t0
    reached = res.trace.first_reaching(cfg.target_rel_subopt) if reference is not None else None
    return ExperimentResult(res, reference, scfg, reached, wall)


def _median_or_none(vals):
    vals = [v for v in vals if v is not None]
    return float(np.median(vals)) if vals else None


def sweep_p(cfg: ExperimentConfig, cache: ReferenceCache | None = None, progress=None) -> list[dict]:
    """Rounds, iterations and data passes to target at each p (medians over ``repeats`` seeds)."""
    cfg.validate(need_seed=True)
    built = build_problem(cfg)
    cache = cache or ReferenceCache(cfg.cache_dir)
    ref = cache.get(built, cfg.lam, cfg.reference_tol)
    rows = []
    for p in cfg.p_grid:
        per = []
        for r in range(cfg.repeats):
            er = run_experiment(cfg, built, p=p, seed=cfg.seed + r, reference=ref)
            tr = er.result.trace
            per.append((er.reached, tr.comm_rounds[-1], tr.k[-1], tr.coin_length))
            if progress:
                progress(p, r, er)
        reached = [x[0] for x in per if x[0] is not None]
        complete = len(reached) == len(per)
        rows.append({
            "p": p,
            "comm_rounds_to_target": _median_or_none([x[2] for x in reached]) if complete else None,
            "iters_to_target": _median_or_none([x[0] for x in reached]) if complete else None,
            "data_passes_to_target": _median_or_none([x[1] for x in reached]) if complete else None,
            "rounds_per_iter": float(np.median([x[1] / max(x[2], 1) for x in per])),
        })
    return rows


def sweep_lambda(cfg: ExperimentConfig, cache: ReferenceCache | None = None, progress=None) -> dict:
    """Data passes to target for each lambda at fixed p, plus the monotonicity table."""
    cfg.validate(need_seed=True)
    built = build_problem(cfg)
    cache = cache or ReferenceCache(cfg.cache_dir)
    grid = sorted(float(v) for v in cfg.lambda_grid)
    refs = {}

    def solve(lam):
        if lam not in refs:
            refs[lam] = cache.get(built, lam, cfg.reference_tol)
        return refs[lam]

    rows = []
    for lam in grid:
        per = []
        for r in range(cfg.repeats):
            er = run_experiment(cfg, built, lam=lam, seed=cfg.seed + r, reference=solve(lam))
            per.append(er.reached)
            if progress:
                progress(lam, r, er)
        complete = all(x is not None for x in per)
        rows.append({"lambda": lam,
                     "data_passes_to_target": _median_or_none([x[1] for x in per]) if complete else None,
                     "iters_to_target": _median_or_none([x[0] for x in per]) if complete else None})
    curve = theory.monotonicity_curve(built.problem, grid, tol=cfg.reference_tol, cache=solve)
    return {"runs": rows, "curve": curve}


def write_rows(rows, columns, fh):
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([fmt17(r.get(c)) if not isinstance(r.get(c), str) else r.get(c) for c in columns])


def finite_or_none(v):
    return None if v is None or (isinstance(v, float) and not math.isfinite(v)) else v
