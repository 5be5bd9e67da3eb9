"""Run loops for all seven variants.

Every run draws its randomness from the streams in :mod:`.randomness`:
the master coin, one index stream per device (consumed once per local step
by single-index samplings), a participation stream, per-device subset
streams and per-device LSVRG coins.  Runs with equal seeds therefore share
randomness across variants wherever their draws coincide.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass

import numpy as np

from ..losses import LogisticDevice
from ..model import MixtureProblem, block_average, objective_value
from . import kernels
from .config import ConfigError, JacobianRule, NumericalError, SolverConfig, SolverWarning, Variant
from .directions import (
    ControlVariates,
    equal_m,
    l2gd_direction,
    l2sgd2_direction,
    l2sgd_direction,
    l2sgd_plus_direction,
    l2sgdpp_direction,
    vr_local_gd_direction,
)
from .randomness import LSVRG, PARTICIPATION, SUBSETS, CoinStream, IndexStream, stream_rng
from .sampling import FullParticipation, UniformSingle, default_eso
from .trace import CommCounter, RunTrace

__all__ = [
    "RunResult",
    "run",
    "l2gd_step",
    "l2gd_run",
    "l2sgd_plus_run",
    "l2sgd_plus_efficient_run",
    "vr_local_gd_run",
    "l2sgd_run",
    "l2sgd2_run",
    "l2sgdpp_run",
    "aggregation_replay",
    "default_record_every",
]

log = logging.getLogger(__name__)


@dataclass
class RunResult:
    x: np.ndarray
    trace: RunTrace
    cv: ControlVariates | None = None

    def __iter__(self):
        return iter((self.x, self.trace, self.cv))


def _reference_parts(reference):
    if reference is None:
        return None, None
    if isinstance(reference, (int, float)):
        return float(reference), None
    x_star = getattr(reference, "x_star", None)
    return float(reference.F_star), None if x_star is None else np.asarray(x_star, dtype=float)


def default_record_every(variant: Variant, P: MixtureProblem, cfg: SolverConfig) -> int:
    """Iterations per recorded row, about one data pass in expectation."""
    p = cfg.p
    if variant in (Variant.L2GD, Variant.VR_LOCAL_GD):
        per_iter = (1 - p) * P.N
    elif variant == Variant.L2SGDPP:
        part = cfg.participation or FullParticipation(P.n)
        samp = cfg.samplings or [UniformSingle(dev.m) for dev in P.devices]
        per_iter = (1 - p) * float(sum(pg * s.marginals().sum() for pg, s in zip(part.probs(), samp)))
    else:
        per_iter = (1 - p) * P.n
    return max(1, math.ceil(P.N / max(per_iter, 1e-300)))


class _Runner:
    """Bookkeeping shared by all loops: coins, counters, recording and stopping."""

    def __init__(self, x0, P: MixtureProblem, cfg: SolverConfig, reference, coins=None, callback=None):
        self.cfg = cfg
        self.callback = callback
        lam = P.lam if cfg.lam is None else cfg.lam
        self.P = P if lam == P.lam else P.with_lambda(lam)
        x = np.array(np.asarray(x0, dtype=float), dtype=float)
        if x.shape != (self.P.n, self.P.d):
            raise ConfigError(f"x0 has shape {x.shape}, expected {(self.P.n, self.P.d)}")
        if not np.all(np.isfinite(x)):
            raise ConfigError("x0 has non-finite entries")
        if not np.all(x == x[0]):
            warnings.warn("initial blocks differ; running from an arbitrary start", SolverWarning, stacklevel=4)
        self.x = x
        cfg.check_against(self.P.n, lam)
        self.coins = None if coins is None else np.asarray(coins, dtype=np.int8)
        self.coin_stream = CoinStream(cfg.seed, cfg.p) if coins is None else None
        self.comm = CommCounter()
        self.grads = 0
        self.k = 0
        self.trace = RunTrace()
        self.F_star, self.x_star = _reference_parts(reference)
        self.trace.F_star = self.F_star
        self.record_every = cfg.record_every or default_record_every(cfg.variant, self.P, cfg)
        self.max_iters = cfg.max_iters if coins is None else min(cfg.max_iters, len(self.coins))
        self.done = False
        self.record()

    def take_coins(self, k):
        if self.coins is not None:
            out = self.coins[self.k:self.k + k]
        else:
            out = self.coin_stream.take(k)
        self.comm.feed(out)
        return out

    def objective(self, x):
        return objective_value(self.P, x)

    def record(self, x=None):
        x = self.x if x is None else x
        if not np.all(np.isfinite(x)):
            raise NumericalError(f"iterate became non-finite at k={self.k}")
        F = self.objective(x)
        dist = None if self.x_star is None else float(np.sum((x - self.x_star) ** 2))
        rel = self.trace.record(self.k, self.grads / self.P.N, self.comm.rounds, F, dist)
        if self.callback is not None:
            self.callback(self.k, x.copy())
        if self.cfg.target is not None and rel is not None and rel <= self.cfg.target:
            self.done = True

    def next_chunk(self):
        """Iterations until the next recording point (0 once finished)."""
        if self.done or self.k >= self.max_iters:
            return 0
        return min(self.record_every - self.k % self.record_every, self.max_iters - self.k)

    def finish(self, cv=None, x=None):
        self.trace.coin_length = self.comm.length
        self.trace.transitions = self.comm.switches
        x = self.x if x is None else x
        if self.trace.k[-1] != self.k:
            self.record(x)
        return RunResult(x, self.trace, cv)


def _check_finite(x, k):
    if not np.all(np.isfinite(x)):
        raise NumericalError(f"iterate became non-finite at k={k}")


def l2gd_step(x, P: MixtureProblem, cfg: SolverConfig, xi: int) -> np.ndarray:
    """One L2GD update of the stacked model."""
    x = np.asarray(x, dtype=float)
    if x.shape != (P.n, P.d):
        raise ValueError(f"model shape {x.shape} does not match problem ({P.n}, {P.d})")
    lam = P.lam if cfg.lam is None else cfg.lam
    if xi == 1:
        cfg.check_against(P.n, lam)
    return x - cfg.alpha * l2gd_direction(P, x, cfg.p, xi, lam)


def _index_streams(cfg, P):
    return [IndexStream(cfg.seed, i, dev.m) for i, dev in enumerate(P.devices)]


def _run_reference(x0, P, cfg, reference, coins, callback=None):
    R = _Runner(x0, P, cfg, reference, coins, callback)
    P, p, a = R.P, cfg.p, cfg.alpha
    v = cfg.variant
    n = P.n
    cv = None
    if v in (Variant.L2SGD_PLUS, Variant.L2SGD, Variant.L2SGD2):
        equal_m(P)
    if v in (Variant.L2SGD_PLUS, Variant.L2SGD2):
        cv = ControlVariates.zeros(P)
    elif v == Variant.VR_LOCAL_GD:
        cv = ControlVariates.zeros(P, m_override=1)
    streams = _index_streams(cfg, P)
    x = R.x
    while (chunk := R.next_chunk()):
        for xi in R.take_coins(chunk):
            if v == Variant.L2GD:
                x = x - a * l2gd_direction(P, x, p, xi)
                R.grads += P.N if xi == 0 else 0
            elif v == Variant.VR_LOCAL_GD:
                g, G = vr_local_gd_direction(P, x, cv, p, xi)
                if xi == 0:
                    cv.Jsum = G
                    for i in range(n):
                        cv.J[i][0] = G[i]
                    R.grads += P.N
                else:
                    cv.Psi = P.lam * (x - block_average(x))
                x = x - a * g
            else:
                js = None
                if xi == 0:
                    js = np.array([s.next() for s in streams])
                    R.grads += n
                if v == Variant.L2SGD:
                    g = l2sgd_direction(P, x, p, xi, js)
                elif v == Variant.L2SGD2:
                    g = l2sgd2_direction(P, x, cv, p, xi, js)
                    if xi == 1:
                        cv.Psi = P.lam * (x - block_average(x))
                else:
                    g, G = l2sgd_plus_direction(P, x, cv, p, xi, js)
                    if xi == 0:
                        for i in range(n):
                            cv.Jsum[i] += G[i] - cv.J[i][js[i]]
                            cv.J[i][js[i]] = G[i]
                    else:
                        cv.Psi = P.lam * (x - block_average(x))
                x = x - a * g
            R.k += 1
        _check_finite(x, R.k)
        R.x = x
        R.record()
    return R.finish(cv)


def _fast_eligible(P: MixtureProblem):
    if P.has_regularizer or not all(isinstance(dev, LogisticDevice) for dev in P.devices):
        return False
    try:
        equal_m(P)
    except ValueError:
        return False
    return len({dev.mu for dev in P.devices}) == 1


def _run_fast(x0, P, cfg, reference, coins, callback=None):
    R = _Runner(x0, P, cfg, reference, coins, callback)
    P = R.P
    code = {Variant.L2SGD: kernels.PLAIN, Variant.L2SGD2: kernels.PSI_ONLY,
            Variant.L2SGD_PLUS: kernels.FULL}[cfg.variant]
    n, m, d = P.n, equal_m(P), P.d
    A = np.ascontiguousarray(np.stack([dev.A for dev in P.devices]))
    B = np.ascontiguousarray(np.stack([dev.b for dev in P.devices]))
    mu = P.devices[0].mu
    J = np.zeros((n, m, d) if code == kernels.FULL else (1, 1, 1))
    Jsum = np.zeros((n, d))
    Psi = np.zeros((n, d))
    streams = _index_streams(cfg, P)
    X = np.ascontiguousarray(R.x)
    while (chunk := R.next_chunk()):
        cs = R.take_coins(chunk)
        nloc = int(np.count_nonzero(cs == 0))
        samples = np.stack([s.take(nloc) for s in streams]) if nloc else np.zeros((n, 0), np.int64)
        kernels.sgd_chunk(code, X, A, B, mu, P.lam, cfg.alpha, cfg.p, cs, samples, J, Jsum, Psi)
        R.k += chunk
        R.grads += n * nloc
        _check_finite(X, R.k)
        R.x = X
        R.record()
    cv = None
    if code == kernels.FULL:
        cv = ControlVariates([J[i] for i in range(n)], Jsum, Psi)
    elif code == kernels.PSI_ONLY:
        cv = ControlVariates([np.zeros((m, d)) for _ in range(n)], np.zeros((n, d)), Psi)
    return R.finish(cv)


def aggregation_replay(c, alpha, lam, p, n):
    """Scalar sequences (q, r, s) for ``c`` consecutive aggregation steps.

    With the tables fixed, the deviation e_i = x_i - xbar after t steps is
    q_t e_i^0 + r_t Psi_i^0 + s_t (a_i - abar), where a_i = J_i 1/(n m).
    Entries are indexed t = 0..c.
    """
    beta = alpha * lam / (n * p)
    gamma = alpha * (1.0 / p - 1.0) / n
    q = np.zeros(c + 1)
    r = np.zeros(c + 1)
    s = np.zeros(c + 1)
    q[0] = 1.0
    if c >= 1:
        q[1], r[1], s[1] = 1.0 - beta, gamma, -alpha
    for t in range(1, c):
        q[t + 1] = (1 - beta) * q[t] + gamma * lam * q[t - 1]
        r[t + 1] = (1 - beta) * r[t] + gamma * lam * r[t - 1]
        s[t + 1] = (1 - beta) * s[t] + gamma * lam * s[t - 1] - alpha
    return q, r, s


def _run_efficient(x0, P, cfg, reference, coins, callback=None):
    """Variance-reduced local SGD exchanging only models between devices and master.

    Devices stay idle during a run of aggregation steps.  On the first such
    step they upload their model x_i and their table mean a_i; the master
    iterates the table-free recursion on the uploaded models around the frozen
    average, counting steps.  On the next local step every device receives the
    last two master iterates, the entry average, the mean table drift and the
    count c, and rebuilds its model and penalty shift in closed form.
    """
    R = _Runner(x0, P, cfg, reference, coins, callback)
    P, p, a = R.P, cfg.p, cfg.alpha
    n, m, lam = P.n, equal_m(P), P.lam
    cv = ControlVariates.zeros(P)
    streams = _index_streams(cfg, P)
    beta = a * lam / (n * p)
    gamma = a * (1.0 / p - 1.0) / n
    x = R.x.copy()
    prev = 0
    window = None  # master and device snapshots during aggregation

    def rebuild(win):
        c = win["c"]
        q, r, s = aggregation_replay(c, a, lam, p, n)
        xb0, abar = win["xbar0"], win["abar"]
        da = win["a"] - abar
        e_c = (win["xhat"] - xb0) + r[c] * win["psi0"] + s[c] * da
        e_prev = (win["xhat_prev"] - xb0) + r[c - 1] * win["psi0"] + s[c - 1] * da
        return xb0 - c * a * abar + e_c, lam * e_prev

    while (chunk := R.next_chunk()):
        for xi in R.take_coins(chunk):
            if xi == 1:
                if prev == 0:
                    # upload: models and table means
                    amean = cv.Jsum / (n * m)
                    xb0 = block_average(x)
                    window = {"c": 0, "xbar0": xb0, "abar": block_average(amean), "a": amean,
                              "psi0": cv.Psi.copy(), "xhat": x.copy(), "xhat_prev": x.copy()}
                w = window
                nxt = w["xhat"] - beta * (w["xhat"] - w["xbar0"])
                if w["c"] >= 1:
                    nxt = nxt + gamma * lam * (w["xhat_prev"] - w["xbar0"])
                w["xhat_prev"], w["xhat"] = w["xhat"], nxt
                w["c"] += 1
            else:
                if prev == 1:
                    x, cv.Psi = rebuild(window)
                    window = None
                js = np.array([s.next() for s in streams])
                R.grads += n
                g, G = l2sgd_plus_direction(P, x, cv, p, 0, js)
                for i in range(n):
                    cv.Jsum[i] += G[i] - cv.J[i][js[i]]
                    cv.J[i][js[i]] = G[i]
                x = x - a * g
            prev = int(xi)
            R.k += 1
        xr = x if window is None else rebuild(window)[0]
        _check_finite(xr, R.k)
        R.x = xr
        R.record(xr)
    if window is not None:
        x, cv.Psi = rebuild(window)
    return R.finish(cv, x)


def _run_general(x0, P, cfg, reference, coins, callback=None):
    R = _Runner(x0, P, cfg, reference, coins, callback)
    P, p, a = R.P, cfg.p, cfg.alpha
    n = P.n
    if P.weighting != "sample" and len({dev.m for dev in P.devices}) > 1:
        raise ConfigError("unequal device sizes need a problem built with weighting='sample'")
    part = cfg.participation or FullParticipation(n)
    samp = cfg.samplings or [UniformSingle(dev.m) for dev in P.devices]
    if part.n != n or len(samp) != n or any(s.m != dev.m for s, dev in zip(samp, P.devices)):
        raise ConfigError("participation/sampling sizes do not match the problem")
    pg = part.probs()
    marg = [s.marginals() for s in samp]
    for mj in marg:
        if np.any(mj <= 0) or np.any(mj > 1 + 1e-12):
            raise ConfigError("sampling marginals must lie in (0, 1]")
    saga = cfg.jacobian_rule == JacobianRule.SAGA
    rho = cfg.lsvrg_probs if cfg.lsvrg_probs is not None else np.array([1.0 / dev.m for dev in P.devices])
    if not saga and len(rho) != n:
        raise ConfigError("one LSVRG probability per device is required")
    cfg.extra.setdefault("eso_v", cfg.eso_v or [default_eso(s, dev.component_smoothness())
                                                for s, dev in zip(samp, P.devices)])
    cv = ControlVariates.zeros(P)
    streams = _index_streams(cfg, P)
    part_rng = stream_rng(cfg.seed, PARTICIPATION)
    sub_rngs = [stream_rng(cfg.seed, SUBSETS, i) for i in range(n)]
    lsvrg_rngs = [stream_rng(cfg.seed, LSVRG, i) for i in range(n)]
    regs = P.regularizers
    x = R.x

    def prox_all(y):
        if not P.has_regularizer:
            return y
        out = np.empty_like(y)
        for i, r in enumerate(regs):
            out[i] = r.prox(y[i], a)
            if not np.all(np.isfinite(out[i])):
                raise NumericalError(f"prox of device {i} returned non-finite values")
        return out

    while (chunk := R.next_chunk()):
        for xi in R.take_coins(chunk):
            if xi == 1:
                g, _ = l2sgdpp_direction(P, x, cv, p, 1)
                cv.Psi = P.lam * (x - block_average(x))
            else:
                active = part.draw(part_rng)
                subsets = [s.draw(streams[i], sub_rngs[i]) if active[i] else () for i, s in enumerate(samp)]
                g, fresh = l2sgdpp_direction(P, x, cv, p, 0, active=active, subsets=subsets,
                                             marginals=marg, pg=pg)
                for i, dev in enumerate(P.devices):
                    if not active[i]:
                        continue
                    R.grads += len(fresh[i])
                    if saga:
                        for j, gij in fresh[i].items():
                            cv.Jsum[i] += gij - cv.J[i][j]
                            cv.J[i][j] = gij
                    elif lsvrg_rngs[i].random() < rho[i]:
                        cv.J[i] = dev.component_grads(x[i])
                        cv.Jsum[i] = cv.J[i].sum(axis=0)
                        R.grads += dev.m
            x = prox_all(x - a * g)
            R.k += 1
        _check_finite(x, R.k)
        R.x = x
        R.record()
    return R.finish(cv)


def run(x0, P: MixtureProblem, cfg: SolverConfig, reference=None, coins=None, backend: str = "auto",
        callback=None) -> RunResult:
    """Run the configured variant from ``x0``.

    ``reference`` is an object with ``F_star`` (and optionally ``x_star``) or
    a bare float; ``coins`` replaces the seeded coin stream with an explicit
    sequence; ``callback(k, x)`` is called at every recorded iterate.
    ``backend`` selects the compiled loop (``"numba"``), the plain loop
    (``"numpy"``) or picks automatically.
    """
    v = cfg.variant
    if v == Variant.L2SGD_PLUS_EFFICIENT:
        return _run_efficient(x0, P, cfg, reference, coins, callback)
    if v == Variant.L2SGDPP:
        return _run_general(x0, P, cfg, reference, coins, callback)
    fast_ok = v in (Variant.L2SGD_PLUS, Variant.L2SGD, Variant.L2SGD2) and _fast_eligible(P)
    if backend == "numba" and not fast_ok:
        raise ConfigError("the compiled loop supports L2SGD, L2SGD2 and L2SGD+ on logistic devices only")
    if backend not in ("auto", "numba", "numpy"):
        raise ConfigError(f"unknown backend {backend!r}")
    if fast_ok and backend != "numpy":
        return _run_fast(x0, P, cfg, reference, coins, callback)
    return _run_reference(x0, P, cfg, reference, coins, callback)


def _variant_run(variant):
    def runner(x0, P, cfg, reference=None, coins=None, backend="auto", callback=None):
        if cfg.variant != variant:
            cfg = cfg.with_(variant=variant)
        return run(x0, P, cfg, reference, coins, backend, callback)

    runner.__name__ = f"{variant.value.lower()}_run"
    runner.__doc__ = f"Run {variant.value}; see :func:`run`."
    return runner


l2gd_run = _variant_run(Variant.L2GD)
l2sgd_plus_run = _variant_run(Variant.L2SGD_PLUS)
l2sgd_plus_efficient_run = _variant_run(Variant.L2SGD_PLUS_EFFICIENT)
vr_local_gd_run = _variant_run(Variant.VR_LOCAL_GD)
l2sgd_run = _variant_run(Variant.L2SGD)
l2sgd2_run = _variant_run(Variant.L2SGD2)
l2sgdpp_run = _variant_run(Variant.L2SGDPP)
