"""Compiled inner loops for the locally stochastic variants on logistic devices."""

from __future__ import annotations

import math

import numpy as np
from numba import njit

PLAIN, PSI_ONLY, FULL = 0, 1, 2


@njit(cache=True)
def _sigmoid(t):
    if t >= 0.0:
        return 1.0 / (1.0 + math.exp(-t))
    e = math.exp(t)
    return e / (1.0 + e)


@njit(cache=True)
def sgd_chunk(code, X, A, B, mu, lam, alpha, p, coins, samples, J, Jsum, Psi):
    """Advance ``len(coins)`` iterations in place; ``samples[i, t]`` is device i's t-th local index."""
    n, m, d = A.shape
    loc = 1.0 / (n * (1.0 - p))
    agg = lam / (n * p)
    shift = (1.0 / p - 1.0) / n
    nm = n * m
    xbar = np.empty(d)
    t = 0
    for k in range(coins.shape[0]):
        if coins[k] == 0:
            for i in range(n):
                j = samples[i, t]
                z = 0.0
                for l in range(d):
                    z += A[i, j, l] * X[i, l]
                s = B[i, j] * _sigmoid(B[i, j] * z)
                for l in range(d):
                    gl = s * A[i, j, l] + mu * X[i, l]
                    if code == FULL:
                        old = J[i, j, l]
                        g = (gl - old) * loc + Jsum[i, l] / nm + Psi[i, l] / n
                        Jsum[i, l] += gl - old
                        J[i, j, l] = gl
                    elif code == PSI_ONLY:
                        g = gl * loc + Psi[i, l] / n
                    else:
                        g = gl * loc
                    X[i, l] -= alpha * g
            t += 1
        else:
            for l in range(d):
                acc = 0.0
                for i in range(n):
                    acc += X[i, l]
                xbar[l] = acc / n
            for i in range(n):
                for l in range(d):
                    e = X[i, l] - xbar[l]
                    g = agg * e
                    if code == FULL:
                        g = g - shift * Psi[i, l] + Jsum[i, l] / nm
                    elif code == PSI_ONLY:
                        g = g - shift * Psi[i, l]
                    if code != PLAIN:
                        Psi[i, l] = lam * e
                    X[i, l] -= alpha * g
    return t


def warmup():
    X = np.zeros((1, 1))
    A = np.ones((1, 1, 1))
    B = np.ones((1, 1))
    J = np.zeros((1, 1, 1))
    for code in (PLAIN, PSI_ONLY, FULL):
        sgd_chunk(code, X, A, B, 0.0, 0.0, 0.1, 0.5, np.zeros(1, np.int8), np.zeros((1, 1), np.int64),
                  J, np.zeros((1, 1)), np.zeros((1, 1)))
