"""Local index samplings and device participation for the general method.

A sampling exposes its marginals ``P(j in S)``, a ``draw`` method and an
``outcomes`` list of ``(probability, subset)`` pairs used by exact
enumeration.
"""

from __future__ import annotations

from itertools import combinations, product
from math import comb

import numpy as np

__all__ = [
    "UniformSingle",
    "ImportanceSingle",
    "TauNice",
    "IndependentSampling",
    "FullParticipation",
    "IndependentParticipation",
    "TauNiceParticipation",
    "default_eso",
]


class _Sampling:
    m: int

    def marginals(self) -> np.ndarray:
        raise NotImplementedError

    def outcomes(self):
        raise NotImplementedError

    def draw(self, index_stream, rng) -> np.ndarray:
        raise NotImplementedError

    def expected_size_given(self) -> np.ndarray:
        """E[|S| | j in S] for every j, from the outcome list."""
        num = np.zeros(self.m)
        for prob, S in self.outcomes():
            for j in S:
                num[j] += prob * len(S)
        return num / self.marginals()

    def _validate(self):
        pj = self.marginals()
        if np.any(pj <= 0) or np.any(pj > 1 + 1e-12):
            raise ValueError("sampling marginals must lie in (0, 1]")


class UniformSingle(_Sampling):
    """One index drawn uniformly; consumes the device's index stream."""

    def __init__(self, m: int):
        self.m = int(m)
        self._validate()

    def marginals(self):
        return np.full(self.m, 1.0 / self.m)

    def outcomes(self):
        return [(1.0 / self.m, (j,)) for j in range(self.m)]

    def draw(self, index_stream, rng):
        return np.array([index_stream.next()])


class ImportanceSingle(_Sampling):
    """One index drawn with probabilities ``q``."""

    def __init__(self, q):
        q = np.asarray(q, dtype=float)
        if q.ndim != 1 or np.any(q <= 0) or abs(q.sum() - 1) > 1e-12:
            raise ValueError("q must be a positive probability vector")
        self.q = q
        self.m = len(q)
        self._cdf = np.cumsum(q)

    def marginals(self):
        return self.q.copy()

    def outcomes(self):
        return [(float(self.q[j]), (j,)) for j in range(self.m)]

    def draw(self, index_stream, rng):
        j = int(np.searchsorted(self._cdf, rng.random() * self._cdf[-1], side="right"))
        return np.array([min(j, self.m - 1)])


class TauNice(_Sampling):
    """A uniformly random subset of exactly ``tau`` indices."""

    def __init__(self, m: int, tau: int):
        if not 1 <= tau <= m:
            raise ValueError("tau must satisfy 1 <= tau <= m")
        self.m, self.tau = int(m), int(tau)

    def marginals(self):
        return np.full(self.m, self.tau / self.m)

    def outcomes(self):
        w = 1.0 / comb(self.m, self.tau)
        return [(w, S) for S in combinations(range(self.m), self.tau)]

    def draw(self, index_stream, rng):
        return np.sort(rng.choice(self.m, size=self.tau, replace=False))


class IndependentSampling(_Sampling):
    """Index j enters S independently with probability ``probs[j]``; S may be empty."""

    def __init__(self, probs):
        self.probs = np.asarray(probs, dtype=float).ravel()
        self.m = len(self.probs)
        self._validate()

    def marginals(self):
        return self.probs.copy()

    def outcomes(self):
        out = []
        for bits in product((0, 1), repeat=self.m):
            b = np.array(bits)
            prob = float(np.prod(np.where(b == 1, self.probs, 1 - self.probs)))
            if prob > 0:
                out.append((prob, tuple(np.flatnonzero(b))))
        return out

    def draw(self, index_stream, rng):
        return np.flatnonzero(rng.random(self.m) < self.probs)


class _Participation:
    n: int

    def probs(self) -> np.ndarray:
        raise NotImplementedError

    def outcomes(self):
        raise NotImplementedError

    def draw(self, rng) -> np.ndarray:
        """Boolean activity mask."""
        raise NotImplementedError


class FullParticipation(_Participation):
    def __init__(self, n: int):
        self.n = int(n)

    def probs(self):
        return np.ones(self.n)

    def outcomes(self):
        return [(1.0, np.ones(self.n, dtype=bool))]

    def draw(self, rng):
        return np.ones(self.n, dtype=bool)


class IndependentParticipation(_Participation):
    def __init__(self, probs):
        self.pg = np.asarray(probs, dtype=float).ravel()
        if np.any(self.pg <= 0) or np.any(self.pg > 1):
            raise ValueError("participation probabilities must lie in (0, 1]")
        self.n = len(self.pg)

    def probs(self):
        return self.pg.copy()

    def outcomes(self):
        out = []
        for bits in product((False, True), repeat=self.n):
            b = np.array(bits)
            prob = float(np.prod(np.where(b, self.pg, 1 - self.pg)))
            if prob > 0:
                out.append((prob, b))
        return out

    def draw(self, rng):
        return rng.random(self.n) < self.pg


class TauNiceParticipation(_Participation):
    """Exactly ``tau`` devices, chosen uniformly, are active."""

    def __init__(self, n: int, tau: int):
        if not 1 <= tau <= n:
            raise ValueError("tau must satisfy 1 <= tau <= n")
        self.n, self.tau = int(n), int(tau)

    def probs(self):
        return np.full(self.n, self.tau / self.n)

    def outcomes(self):
        w = 1.0 / comb(self.n, self.tau)
        out = []
        for S in combinations(range(self.n), self.tau):
            b = np.zeros(self.n, dtype=bool)
            b[list(S)] = True
            out.append((w, b))
        return out

    def draw(self, rng):
        b = np.zeros(self.n, dtype=bool)
        b[rng.choice(self.n, size=self.tau, replace=False)] = True
        return b


def default_eso(sampling: _Sampling, L_components) -> np.ndarray:
    """Valid ESO constants v_j = L_j * E[|S| | j in S].

    Follows from Cauchy-Schwarz, ||sum_{j in S} h_j||^2 <= |S| sum_{j in S} ||h_j||^2.
    Single-index samplings give v_j = L_j; tau-nice gives tau * L_j.
    """
    L = np.asarray(L_components, dtype=float)
    if isinstance(sampling, (UniformSingle, ImportanceSingle)):
        return L.copy()
    if isinstance(sampling, TauNice):
        return sampling.tau * L
    if isinstance(sampling, IndependentSampling):
        p = sampling.probs
        return L * (1.0 + p.sum() - p)
    return L * sampling.expected_size_given()
