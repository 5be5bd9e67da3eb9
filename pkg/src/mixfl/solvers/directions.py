"""Update directions of every variant, control-variate updates and exact enumeration.

All functions work on the ``(n, d)`` block array ``x``.  Directions are the
vectors ``g`` in ``x <- x - alpha * g`` (before any prox).  The coin ``xi`` is
0 for a local step and 1 for an aggregation step.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np

from ..model import MixtureProblem, block_average
from .config import Variant
from .sampling import FullParticipation, UniformSingle

__all__ = [
    "ControlVariates",
    "l2gd_direction",
    "l2sgd_plus_direction",
    "vr_local_gd_direction",
    "l2sgd_direction",
    "l2sgd2_direction",
    "l2sgdpp_direction",
    "direction",
    "expected_direction",
    "target_gradient",
    "equal_m",
]


@dataclass
class ControlVariates:
    """Per-device Jacobian tables (rows are stored component gradients) and penalty shifts."""

    J: list
    Jsum: np.ndarray
    Psi: np.ndarray

    @classmethod
    def zeros(cls, P: MixtureProblem, m_override: int | None = None) -> "ControlVariates":
        J = [np.zeros((m_override or dev.m, P.d)) for dev in P.devices]
        return cls(J, np.zeros((P.n, P.d)), np.zeros((P.n, P.d)))

    @classmethod
    def random(cls, P: MixtureProblem, rng, m_override: int | None = None, scale: float = 1.0):
        J = [scale * rng.standard_normal((m_override or dev.m, P.d)) for dev in P.devices]
        Jsum = np.stack([Ji.sum(axis=0) for Ji in J])
        Psi = scale * rng.standard_normal((P.n, P.d))
        return cls(J, Jsum, Psi)

    def copy(self) -> "ControlVariates":
        return ControlVariates([Ji.copy() for Ji in self.J], self.Jsum.copy(), self.Psi.copy())

    def resum(self):
        self.Jsum = np.stack([Ji.sum(axis=0) for Ji in self.J])


def equal_m(P: MixtureProblem) -> int:
    ms = {dev.m for dev in P.devices}
    if len(ms) != 1:
        raise ValueError(f"all devices must hold the same number of components, got {sorted(ms)}")
    return ms.pop()


def _dev_grads(P, x):
    return np.stack([dev.grad(xi) for dev, xi in zip(P.devices, x)])


def _comp_grads(P, x, js):
    return np.stack([dev.component_grad(int(j), xi) for dev, j, xi in zip(P.devices, js, x)])


def l2gd_direction(P, x, p, xi, lam=None):
    lam = P.lam if lam is None else lam
    n = P.n
    if xi == 0:
        return P.local_grads(x) / (n * (1 - p))
    return lam * (x - block_average(x)) / (n * p)


def l2sgd_plus_direction(P, x, cv, p, xi, js=None, lam=None):
    """Returns ``(g, sampled)``; ``sampled`` holds the fresh component gradients on local steps."""
    lam = P.lam if lam is None else lam
    n, m = P.n, equal_m(P)
    if xi == 0:
        G = _comp_grads(P, x, js)
        old = np.stack([cv.J[i][js[i]] for i in range(n)])
        return (G - old) / (n * (1 - p)) + cv.Jsum / (n * m) + cv.Psi / n, G
    g = lam * (x - block_average(x)) / (n * p) - (1 / p - 1) / n * cv.Psi + cv.Jsum / (n * m)
    return g, None


def vr_local_gd_direction(P, x, cv, p, xi, lam=None):
    lam = P.lam if lam is None else lam
    n = P.n
    Jv = cv.Jsum  # one stored gradient per device
    if xi == 0:
        G = _dev_grads(P, x)
        return G / (n * (1 - p)) - p / (n * (1 - p)) * Jv + cv.Psi / n, G
    return lam * (x - block_average(x)) / (n * p) - (1 / p - 1) / n * cv.Psi + Jv / n, None


def l2sgd_direction(P, x, p, xi, js=None, lam=None):
    lam = P.lam if lam is None else lam
    n = P.n
    if xi == 0:
        return _comp_grads(P, x, js) / (n * (1 - p))
    return lam * (x - block_average(x)) / (n * p)


def l2sgd2_direction(P, x, cv, p, xi, js=None, lam=None):
    lam = P.lam if lam is None else lam
    n = P.n
    if xi == 0:
        return _comp_grads(P, x, js) / (n * (1 - p)) + cv.Psi / n
    return lam * (x - block_average(x)) / (n * p) - (1 / p - 1) / n * cv.Psi


def l2sgdpp_direction(P, x, cv, p, xi, active=None, subsets=None, marginals=None, pg=None, lam=None):
    """General method; returns ``(g, fresh)`` where ``fresh[i]`` maps sampled j to its gradient."""
    lam = P.lam if lam is None else lam
    n, N = P.n, P.N
    base = cv.Jsum / N
    if xi == 1:
        return lam * (x - block_average(x)) / (n * p) - (1 / p - 1) / n * cv.Psi + base, None
    g = base + cv.Psi / n
    fresh = [dict() for _ in range(n)]
    for i, dev in enumerate(P.devices):
        if not active[i]:
            continue
        acc = np.zeros(P.d)
        for j in subsets[i]:
            gij = dev.component_grad(int(j), x[i])
            fresh[i][int(j)] = gij
            acc += (gij - cv.J[i][j]) / marginals[i][j]
        g[i] = g[i] + acc / (N * (1 - p) * pg[i])
    return g, fresh


def target_gradient(variant: Variant, P: MixtureProblem, x) -> np.ndarray:
    """The smooth gradient each variant's direction is unbiased for."""
    xb = np.asarray(x, dtype=float)
    if variant == Variant.L2SGDPP:
        N = P.N
        G = np.stack([dev.m * dev.grad(xi) for dev, xi in zip(P.devices, xb)]) / N
        return G + P.lam * (xb - block_average(xb)) / P.n
    G = _dev_grads(P, xb) / P.n
    return G + P.lam * (xb - block_average(xb)) / P.n


def direction(variant, P, x, cv, p, xi, js=None, **pp):
    """Direction of any variant for a fixed randomness outcome."""
    variant = Variant.parse(variant)
    if variant == Variant.L2GD:
        return l2gd_direction(P, x, p, xi)
    if variant in (Variant.L2SGD_PLUS, Variant.L2SGD_PLUS_EFFICIENT):
        return l2sgd_plus_direction(P, x, cv, p, xi, js)[0]
    if variant == Variant.VR_LOCAL_GD:
        return vr_local_gd_direction(P, x, cv, p, xi)[0]
    if variant == Variant.L2SGD:
        return l2sgd_direction(P, x, p, xi, js)
    if variant == Variant.L2SGD2:
        return l2sgd2_direction(P, x, cv, p, xi, js)
    if variant == Variant.L2SGDPP:
        return l2sgdpp_direction(P, x, cv, p, xi, **pp)[0]
    raise ValueError(variant)


def expected_direction(variant, P, x, cv, p, participation=None, samplings=None) -> np.ndarray:
    """Exact expectation of the direction over every randomness outcome (joint enumeration)."""
    variant = Variant.parse(variant)
    x = np.asarray(x, dtype=float)
    agg = p * direction(variant, P, x, cv, p, 1)
    if variant in (Variant.L2GD, Variant.VR_LOCAL_GD):
        return agg + (1 - p) * direction(variant, P, x, cv, p, 0)
    local = np.zeros_like(x)
    if variant == Variant.L2SGDPP:
        part = participation or FullParticipation(P.n)
        samp = samplings or [UniformSingle(dev.m) for dev in P.devices]
        pg = part.probs()
        marg = [s.marginals() for s in samp]
        for w_act, active in part.outcomes():
            choices = [s.outcomes() if active[i] else [(1.0, ())] for i, s in enumerate(samp)]
            for combo in product(*choices):
                w = w_act * np.prod([c[0] for c in combo])
                subsets = [c[1] for c in combo]
                local += w * direction(variant, P, x, cv, p, 0, active=active, subsets=subsets,
                                       marginals=marg, pg=pg)
        return agg + (1 - p) * local
    m = equal_m(P)
    for js in product(range(m), repeat=P.n):
        local += direction(variant, P, x, cv, p, 0, js=np.array(js)) / m ** P.n
    return agg + (1 - p) * local
