"""Reference solutions, structural checks and rate formulas for the mixture objective."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .model import MixtureProblem, block_average, grad_F, psi, smooth_value

__all__ = [
    "ReferenceSolution",
    "RateReport",
    "ReferenceError",
    "reference_solution",
    "global_reference",
    "check_stationarity",
    "monotonicity_curve",
    "global_model_bound",
    "expected_L",
    "sigma_sq",
    "l2gd_rates",
    "l2sgd_plus_rates",
    "vr_local_gd_rates",
    "l2sgdpp_rates",
    "lambda_threshold",
    "expected_smoothness_gap",
    "l2gd_envelope",
    "quadratic_closed_form",
    "write_bound_table",
    "problem_smoothness",
]

MAX_ITERS = 10_000_000


class ReferenceError(RuntimeError):
    pass


@dataclass
class ReferenceSolution:
    lam: float
    x_star: np.ndarray
    x_bar: np.ndarray
    F_star: float
    grad_norm: float
    iterations_used: int
    tol: float
    method: str = "newton"


@dataclass
class RateReport:
    expected_L: float | None
    sigma_sq: float | None
    iter_bound: float
    comm_bound: float
    p_star: float | None
    alpha: float


def problem_smoothness(P: MixtureProblem) -> tuple[float, float]:
    """(L, mu): the largest device smoothness and the smallest strong convexity."""
    profs = [dev.smoothness_profile() for dev in P.devices]
    return max(pr.L_local for pr in profs), min(pr.mu for pr in profs)


def _grad_norm(P, x):
    return float(np.linalg.norm(np.asarray(grad_F(P, x))))


def _default_tol(P, x0, tol):
    if tol is not None:
        return tol
    return 1e-10 * max(1.0, _grad_norm(P, x0))


def _newton(P: MixtureProblem, x0, tol, max_iters):
    n, d = P.n, P.d
    H_psi = P.lam / n * np.kron(np.eye(n) - 1.0 / n, np.eye(d))
    x = np.array(x0, dtype=float)
    F = smooth_value(P, x)
    for it in range(max_iters):
        g = np.asarray(grad_F(P, x)).ravel()
        gn = float(np.linalg.norm(g))
        if gn <= tol:
            return x, gn, it
        H = H_psi.copy()
        for i, (w, dev) in enumerate(zip(P.weights, P.devices)):
            H[i * d:(i + 1) * d, i * d:(i + 1) * d] += w * dev.hessian(x[i]) / n
        step = linalg.solve(H, g, assume_a="pos").reshape(n, d)
        t = 1.0
        while True:
            xn = x - t * step
            Fn = smooth_value(P, xn)
            if Fn <= F - 0.25 * t * float(g @ step.ravel()) or t < 1e-12:
                break
            t *= 0.5
        if Fn > F and t < 1e-12:
            # line search stalled at the floating-point floor
            gn2 = _grad_norm(P, xn)
            return (xn, gn2, it + 1) if gn2 < gn else (x, gn, it)
        x, F = xn, Fn
    raise ReferenceError(f"reference solver hit the iteration cap {max_iters}")


def _gd(P: MixtureProblem, x0, tol, max_iters):
    L, _ = problem_smoothness(P)
    wmax = float(np.max(P.weights))
    step = P.n / (wmax * L + P.lam)
    x = np.array(x0, dtype=float)
    for it in range(max_iters):
        g = np.asarray(grad_F(P, x))
        gn = float(np.linalg.norm(g))
        if gn <= tol:
            return x, gn, it
        x = x - step * g
    raise ReferenceError(f"reference solver hit the iteration cap {max_iters}")


def reference_solution(P: MixtureProblem, lam: float | None = None, tol: float | None = None,
                       x0=None, method: str = "newton", max_iters: int | None = None) -> ReferenceSolution:
    """Minimizer x(lam) of the smooth mixture objective.

    ``method="newton"`` uses damped Newton on the full stacked Hessian;
    ``method="gd"`` runs full gradient descent with stepsize n/(L+lam).
    Both stop once ||grad F|| <= tol, default 1e-10 * max(1, ||grad F(x0)||).
    ``lam=inf`` solves the single shared-model problem instead.
    """
    if lam is not None and math.isinf(lam):
        return global_reference(P, tol=tol, method=method, max_iters=max_iters)
    if lam is not None:
        P = P.with_lambda(lam)
    if P.has_regularizer:
        raise ValueError("reference solutions need R = 0")
    x0 = np.zeros((P.n, P.d)) if x0 is None else np.asarray(x0, dtype=float)
    tol = _default_tol(P, x0, tol)
    if method == "newton":
        x, gn, it = _newton(P, x0, tol, max_iters or 500)
        if gn > tol:
            x, gn, it2 = _gd(P, x, tol, max_iters or MAX_ITERS)
            it += it2
    elif method == "gd":
        x, gn, it = _gd(P, x0, tol, max_iters or MAX_ITERS)
    else:
        raise ValueError(f"unknown method {method!r}")
    return ReferenceSolution(P.lam, x, block_average(x), smooth_value(P, x), gn, it, tol, method)


def global_reference(P: MixtureProblem, tol: float | None = None, method: str = "newton",
                     max_iters: int | None = None) -> ReferenceSolution:
    """The lam = infinity limit: one shared model minimizing (1/n) sum_i w_i f_i."""
    n, d = P.n, P.d

    def grad(z):
        return sum(w * dev.grad(z) for w, dev in zip(P.weights, P.devices)) / n

    def value(z):
        return sum(w * dev.value(z) for w, dev in zip(P.weights, P.devices)) / n

    z = np.zeros(d)
    tol = 1e-10 * max(1.0, float(np.linalg.norm(grad(z)))) if tol is None else tol
    it = 0
    if method == "newton":
        for it in range(max_iters or 500):
            g = grad(z)
            if np.linalg.norm(g) <= tol:
                break
            H = sum(w * dev.hessian(z) for w, dev in zip(P.weights, P.devices)) / n
            step = linalg.solve(H, g, assume_a="pos")
            t, F = 1.0, value(z)
            while value(z - t * step) > F - 0.25 * t * float(g @ step) and t > 1e-12:
                t *= 0.5
            z = z - t * step
    else:
        L, _ = problem_smoothness(P)
        step = 1.0 / (L * float(np.max(P.weights)))
        for it in range(max_iters or MAX_ITERS):
            g = grad(z)
            if np.linalg.norm(g) <= tol:
                break
            z = z - step * g
        else:
            raise ReferenceError("global reference hit the iteration cap")
    gn = float(np.linalg.norm(grad(z)))
    x = np.tile(z, (n, 1))
    return ReferenceSolution(math.inf, x, z.copy(), value(z), gn, it, tol, method)


def quadratic_closed_form(centers, lam: float, kappa: float = 1.0) -> np.ndarray:
    """x(lam) for f_i(z) = (kappa/2)||z - c_i||^2 + const.

    Stationarity kappa (x_i - c_i) + lam (x_i - xbar) = 0 forces xbar = cbar and
    x_i = (kappa c_i + lam cbar)/(kappa + lam).
    """
    C = np.asarray(centers, dtype=float)
    return (kappa * C + lam * C.mean(axis=0)) / (kappa + lam)


def _dev_grads(P, x):
    return np.stack([dev.grad(xi) for dev, xi in zip(P.devices, x)])


def check_stationarity(P: MixtureProblem, ref: ReferenceSolution) -> dict:
    """Residuals of the optimality characterization at x(lam).

    a: max_i ||x_i - xbar + grad f_i(x_i)/lam||
    b: ||sum_i grad f_i(x_i)||
    c: |psi(x) - sum_i ||grad f_i(x_i)||^2 / (2 n lam^2)|
    """
    lam = ref.lam
    if not lam > 0 or math.isinf(lam):
        raise ValueError("stationarity check needs 0 < lambda < inf")
    x = np.asarray(ref.x_star)
    G = P.weights[:, None] * _dev_grads(P, x)
    xb = block_average(x)
    a = float(np.max(np.linalg.norm(x - xb + G / lam, axis=1)))
    b = float(np.linalg.norm(G.sum(axis=0)))
    gf = G / P.n
    c = abs(psi(x) - float(np.sum(G * G)) / (2 * P.n * lam ** 2))
    return {"a": a, "b": b, "c": c, "bound": 10 * ref.tol * (1 + float(np.linalg.norm(gf)))}


def _f_value(P, x):
    return float(P.local_values(x).sum()) / P.n


def monotonicity_curve(P: MixtureProblem, lambdas, tol: float = 1e-10, slack: float = 1e-8, cache=None) -> dict:
    """f(x(lam)) and psi(x(lam)) over an ascending grid, with the psi envelope and bound checks."""
    grid = [float(v) for v in lambdas]
    if any(v <= 0 for v in grid) or grid != sorted(grid):
        raise ValueError("lambda grid must be positive and ascending")
    solve = cache or (lambda lam: reference_solution(P, lam, tol))
    x0_ref = reference_solution(P, 0.0, tol)
    inf_ref = global_reference(P, tol)
    f0 = _f_value(P, x0_ref.x_star)
    finf = _f_value(P, inf_ref.x_star)
    rows = []
    for lam in grid:
        ref = solve(lam)
        f = _f_value(P, ref.x_star)
        ps = psi(ref.x_star)
        lhs, rhs = global_model_bound(P, lam, ref=ref, f0=f0, finf=finf)
        rows.append({
            "lambda": lam, "f_value": f, "psi_value": ps, "bound_lhs": lhs, "bound_rhs": rhs,
            "dist_local": float(np.linalg.norm(ref.x_star - x0_ref.x_star)),
            "dist_global": float(np.linalg.norm(ref.x_star - inf_ref.x_star)),
        })
    f_col = np.array([r["f_value"] for r in rows])
    p_col = np.array([r["psi_value"] for r in rows])
    checks = {
        "psi_nonincreasing": bool(np.all(np.diff(p_col) <= slack)),
        "f_nondecreasing": bool(np.all(np.diff(f_col) >= -slack)),
        "f_below_global": bool(np.all(f_col <= finf + slack)),
        "psi_envelope": all(r["psi_value"] <= (finf - f0) / r["lambda"] + slack for r in rows),
        "global_bound": all(r["bound_lhs"] <= r["bound_rhs"] + slack for r in rows),
    }
    return {"rows": rows, "checks": checks, "f_local": f0, "f_global": finf}


def global_model_bound(P: MixtureProblem, lam: float, ref=None, f0=None, finf=None, tol: float = 1e-10):
    """(lhs, rhs) = (||grad P(xbar(lam))||^2, (2 L^2/lam)(f(x(inf)) - f(x(0))))."""
    if not lam > 0:
        raise ValueError("lambda must be positive")
    _, mu = problem_smoothness(P)
    if not mu > 0:
        raise ValueError("the bound needs strongly convex devices")
    L, _ = problem_smoothness(P)
    ref = ref or reference_solution(P, lam, tol)
    if f0 is None:
        f0 = _f_value(P, reference_solution(P, 0.0, tol).x_star)
    if finf is None:
        finf = _f_value(P, global_reference(P, tol).x_star)
    xb = np.asarray(ref.x_bar)
    gP = sum(w * dev.grad(xb) for w, dev in zip(P.weights, P.devices)) / P.n
    return float(gP @ gP), 2 * L ** 2 / lam * (finf - f0)


def write_bound_table(curve: dict, fh=None) -> str:
    buf = io.StringIO() if fh is None else fh
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["lambda", "f_value", "psi_value", "bound_lhs", "bound_rhs"])
    for r in curve["rows"]:
        w.writerow([f"{r[k]:.17g}" for k in ("lambda", "f_value", "psi_value", "bound_lhs", "bound_rhs")])
    return buf.getvalue() if fh is None else ""


def _check_p(p):
    if not 0.0 < p < 1.0:
        raise ValueError(f"p must lie in (0, 1), got {p}")


def expected_L(L: float, lam: float, p: float, n: int) -> float:
    _check_p(p)
    return max(L / (1 - p), lam / p) / n


def sigma_sq(P: MixtureProblem, ref: ReferenceSolution, p: float) -> float:
    _check_p(p)
    x = np.asarray(ref.x_star)
    G = P.weights[:, None] * _dev_grads(P, x)
    D = x - block_average(x)
    lam = ref.lam
    return float(np.sum(G * G) / (1 - p) + lam ** 2 / p * np.sum(D * D)) / P.n ** 2


def _log_eps(eps):
    if not 0.0 < eps < 1.0:
        raise ValueError("eps must lie in (0, 1)")
    return math.log(1.0 / eps)


def l2gd_rates(L, mu, lam, p, eps, n) -> RateReport:
    _check_p(p)
    if not mu > 0:
        raise ValueError("mu must be positive")
    EL = expected_L(L, lam, p, n)
    iters = 2 * n * EL / mu * _log_eps(eps)
    return RateReport(EL, None, iters, p * (1 - p) * iters, lam / (L + lam), 1.0 / (2 * EL))


def l2sgd_plus_rates(L, mu, lam, m, p, eps, n) -> RateReport:
    _check_p(p)
    if not mu > 0 or m < 1:
        raise ValueError("need mu > 0 and m >= 1")
    alpha = n * min((1 - p) / (4 * L + mu * m), p / (4 * lam + mu))
    iters = max((4 * L + mu * m) / ((1 - p) * mu), (4 * lam + mu) / (p * mu)) * _log_eps(eps)
    p_star = (4 * lam + mu) / (4 * lam + 4 * L + (m + 1) * mu)
    return RateReport(None, None, iters, p * (1 - p) * iters, p_star, alpha)


def vr_local_gd_rates(L, mu, lam, p, eps, n=1) -> RateReport:
    _check_p(p)
    if not mu > 0:
        raise ValueError("mu must be positive")
    alpha = n * min((1 - p) / (4 * L + mu), p / (4 * lam + mu))
    iters = max((4 * L + mu) / ((1 - p) * mu), (4 * lam + mu) / (p * mu)) * _log_eps(eps)
    p_star = (4 * lam + mu) / (4 * lam + 4 * L + 2 * mu)
    return RateReport(None, None, iters, p * (1 - p) * iters, p_star, alpha)


def vr_local_gd_optimal_iters(L, mu, lam, eps) -> float:
    """Iteration count at the optimal p: 4(lam/mu + L/mu + 1/2) log(1/eps)."""
    return 4 * (lam / mu + L / mu + 0.5) * _log_eps(eps)


def l2sgdpp_rates(v, marginals, pg, N, n, mu, lam, p, eps, rule: str = "SAGA", rho=None) -> RateReport:
    """Stepsize and iteration bound of the general method.

    ``v`` and ``marginals`` are per-device arrays over components, ``pg`` the
    participation probabilities and ``rho`` the LSVRG probabilities.
    """
    _check_p(p)
    if not mu > 0:
        raise ValueError("mu must be positive")
    rule = rule.upper()
    alpha_loc, iter_loc = math.inf, 0.0
    for i in range(n):
        vi = np.asarray(v[i], dtype=float)
        pj = np.asarray(marginals[i], dtype=float)
        if rule == "SAGA":
            a = N * (1 - p) * pj * pg[i] / (4 * vi + N * mu / n)
            it = (4 * vi * n / N + mu) / (mu * (1 - p) * pj * pg[i])
        elif rule == "LSVRG":
            r = rho[i]
            a = N * (1 - p) * pg[i] / (4 * vi / pj + N * mu / (n * r))
            it = (4 * vi * n / (N * pj) + mu / r) / (pg[i] * mu * (1 - p))
        else:
            raise ValueError(f"unknown rule {rule!r}")
        alpha_loc = min(alpha_loc, float(np.min(a)))
        iter_loc = max(iter_loc, float(np.max(it)))
    alpha = min(alpha_loc, n * p / (4 * lam + mu))
    iters = max(iter_loc, (4 * lam + mu) / (p * mu)) * _log_eps(eps)
    return RateReport(None, None, iters, p * (1 - p) * iters, None, alpha)


def lambda_threshold(L: float, p: float) -> float:
    _check_p(p)
    return L * p / (1 - p)


def expected_smoothness_gap(P: MixtureProblem, ref: ReferenceSolution, x, p: float) -> tuple[float, float]:
    """(E||G(x) - G(x*)||^2, 2 Lexp (F(x) - F(x*))) for the two-point L2GD estimator."""
    from .solvers.directions import l2gd_direction

    xs = np.asarray(ref.x_star)
    x = np.asarray(x, dtype=float)
    lhs = 0.0
    for xi, w in ((0, 1 - p), (1, p)):
        diff = l2gd_direction(P, x, p, xi) - l2gd_direction(P, xs, p, xi)
        lhs += w * float(np.sum(diff * diff))
    L, _ = problem_smoothness(P)
    L = L * float(np.max(P.weights))
    rhs = 2 * expected_L(L, P.lam, p, P.n) * (smooth_value(P, x) - smooth_value(P, xs))
    return lhs, rhs


def l2gd_envelope(P: MixtureProblem, ref: ReferenceSolution, x0, p: float, alpha: float, ks) -> np.ndarray:
    """(1 - alpha mu/n)^k ||x0 - x*||^2 + 2 n alpha sigma^2 / mu at every k in ``ks``."""
    _, mu = problem_smoothness(P)
    d0 = float(np.sum((np.asarray(x0) - ref.x_star) ** 2))
    s2 = sigma_sq(P, ref, p)
    ks = np.asarray(ks, dtype=float)
    return (1 - alpha * mu / P.n) ** ks * d0 + 2 * P.n * alpha * s2 / mu
