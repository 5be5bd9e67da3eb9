"""Finite-sum device objectives: ridge-regularized logistic and quadratic.

Every component carries the ridge term, f_ij(z) = loss_ij(z) + (mu/2)||z||^2,
so that f_i = (1/m) sum_j f_ij holds exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

__all__ = [
    "SmoothnessProfile",
    "DeviceFiniteSum",
    "LogisticDevice",
    "QuadraticDevice",
    "component_grad",
    "local_grad",
    "smoothness_profile",
]


@dataclass(frozen=True)
class SmoothnessProfile:
    L_components: np.ndarray
    L_local: float
    mu: float


def log1pexp(t):
    """Overflow-free log(1 + exp(t))."""
    return np.logaddexp(0.0, t)


class DeviceFiniteSum:
    """Base class for one device's objective (1/m) sum_j f_ij."""

    kind = "abstract"
    m: int
    d: int
    mu: float

    def _check_index(self, j):
        if not 0 <= j < self.m:
            raise IndexError(f"component index {j} out of range for m={self.m}")

    def component_value(self, j: int, z) -> float:
        raise NotImplementedError

    def component_grad(self, j: int, z) -> np.ndarray:
        raise NotImplementedError

    def component_grads(self, z) -> np.ndarray:
        """All component gradients as an (m, d) array."""
        raise NotImplementedError

    def value(self, z) -> float:
        raise NotImplementedError

    def grad(self, z) -> np.ndarray:
        raise NotImplementedError

    def hessian(self, z) -> np.ndarray:
        raise NotImplementedError

    def component_smoothness(self) -> np.ndarray:
        raise NotImplementedError

    @property
    def strong_convexity(self) -> float:
        return self.mu

    def smoothness_profile(self) -> SmoothnessProfile:
        L = self.component_smoothness()
        return SmoothnessProfile(L_components=L, L_local=float(L.max()), mu=self.strong_convexity)


class LogisticDevice(DeviceFiniteSum):
    """f_ij(z) = log(1 + exp(b_j * a_j.z)) + (mu/2)||z||^2.

    The sign inside the exponential follows the printed objective literally.
    """

    kind = "logistic"

    def __init__(self, A, b, mu: float = 0.0):
        A = np.asarray(A.toarray() if hasattr(A, "toarray") else A, dtype=float)
        b = np.asarray(b, dtype=float).ravel()
        if A.ndim != 2 or A.shape[0] < 1:
            raise ValueError("A must be a non-empty (m, d) matrix")
        if b.shape[0] != A.shape[0]:
            raise ValueError("one label per row is required")
        if not np.all(np.isin(b, (-1.0, 1.0))):
            raise ValueError("labels must be -1 or +1")
        if mu < 0:
            raise ValueError("mu must be non-negative")
        if not np.all(np.isfinite(A)):
            raise ValueError("data matrix has non-finite entries")
        self.A = A
        self.b = b
        self.mu = float(mu)
        self.m, self.d = A.shape

    def _margins(self, z):
        return self.b * (self.A @ z)

    def component_value(self, j, z):
        self._check_index(j)
        z = np.asarray(z, dtype=float)
        t = self.b[j] * (self.A[j] @ z)
        return float(log1pexp(t)) + 0.5 * self.mu * float(z @ z)

    def component_grad(self, j, z):
        self._check_index(j)
        z = np.asarray(z, dtype=float)
        t = self.b[j] * (self.A[j] @ z)
        return (self.b[j] * expit(t)) * self.A[j] + self.mu * z

    def component_grads(self, z):
        z = np.asarray(z, dtype=float)
        coef = self.b * expit(self._margins(z))
        return coef[:, None] * self.A + self.mu * z

    def value(self, z):
        z = np.asarray(z, dtype=float)
        return float(log1pexp(self._margins(z)).mean()) + 0.5 * self.mu * float(z @ z)

    def grad(self, z):
        z = np.asarray(z, dtype=float)
        coef = self.b * expit(self._margins(z))
        return self.A.T @ coef / self.m + self.mu * z

    def hessian(self, z):
        s = expit(self._margins(np.asarray(z, dtype=float)))
        w = s * (1.0 - s) / self.m
        return (self.A.T * w) @ self.A + self.mu * np.eye(self.d)

    def component_smoothness(self):
        return np.einsum("ij,ij->i", self.A, self.A) / 4.0 + self.mu


class QuadraticDevice(DeviceFiniteSum):
    """f_ij(z) = (s_j/2)||z - c_j||^2 + (mu/2)||z||^2."""

    kind = "quadratic"

    def __init__(self, centers, scales=None, mu: float = 0.0):
        C = np.asarray(centers, dtype=float)
        if C.ndim == 1:
            C = C.reshape(1, -1)
        if C.ndim != 2 or C.shape[0] < 1:
            raise ValueError("centers must be a non-empty (m, d) array")
        s = np.ones(C.shape[0]) if scales is None else np.asarray(scales, dtype=float).ravel()
        if s.shape[0] != C.shape[0] or np.any(s <= 0):
            raise ValueError("one positive scale per center is required")
        if mu < 0:
            raise ValueError("mu must be non-negative")
        if not np.all(np.isfinite(C)):
            raise ValueError("centers have non-finite entries")
        self.C = C
        self.s = s
        self.mu = float(mu)
        self.m, self.d = C.shape

    @property
    def strong_convexity(self) -> float:
        return float(self.s.mean()) + self.mu

    @property
    def minimizer(self) -> np.ndarray:
        return (self.s @ self.C) / (self.s.sum() + self.m * self.mu)

    def component_value(self, j, z):
        self._check_index(j)
        z = np.asarray(z, dtype=float)
        r = z - self.C[j]
        return 0.5 * self.s[j] * float(r @ r) + 0.5 * self.mu * float(z @ z)

    def component_grad(self, j, z):
        self._check_index(j)
        z = np.asarray(z, dtype=float)
        return self.s[j] * (z - self.C[j]) + self.mu * z

    def component_grads(self, z):
        z = np.asarray(z, dtype=float)
        return self.s[:, None] * (z - self.C) + self.mu * z

    def value(self, z):
        z = np.asarray(z, dtype=float)
        r = z - self.C
        return 0.5 * float(self.s @ np.einsum("ij,ij->i", r, r)) / self.m + 0.5 * self.mu * float(z @ z)

    def grad(self, z):
        z = np.asarray(z, dtype=float)
        return (self.s @ (z - self.C)) / self.m + self.mu * z

    def hessian(self, z):
        return (self.s.mean() + self.mu) * np.eye(self.d)

    def component_smoothness(self):
        return self.s + self.mu


def component_grad(dev: DeviceFiniteSum, j: int, z) -> np.ndarray:
    return dev.component_grad(j, z)


def local_grad(dev: DeviceFiniteSum, z) -> np.ndarray:
    return dev.grad(z)


def smoothness_profile(dev: DeviceFiniteSum) -> SmoothnessProfile:
    return dev.smoothness_profile()
