"""Stacked local models, the consensus penalty and the mixture objective.

A stacked model holds one length-``d`` block per device.  Blocks are stored
as the rows of an ``(n, d)`` array and indexed from 0.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "StackedModel",
    "MixtureProblem",
    "ZeroRegularizer",
    "L1Regularizer",
    "block_average",
    "psi",
    "grad_psi",
    "psi_hessian_dense",
    "objective_value",
    "grad_F",
    "smooth_value",
]

HESSIAN_SIZE_LIMIT = 10_000


class StackedModel:
    """``n`` device models of dimension ``d``, validated on construction.

    Behaves like its ``(n, d)`` block array under ``np.asarray``.
    """

    __slots__ = ("blocks",)

    def __init__(self, blocks):
        arr = np.array(blocks, dtype=float)
        if arr.ndim == 1:
            arr = arr.reshape(-1, 1)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"blocks must form an (n, d) array, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("stacked model has non-finite entries")
        self.blocks = arr

    @classmethod
    def replicate(cls, v, n: int) -> "StackedModel":
        v = np.asarray(v, dtype=float).ravel()
        return cls(np.tile(v, (n, 1)))

    @property
    def n(self) -> int:
        return self.blocks.shape[0]

    @property
    def d(self) -> int:
        return self.blocks.shape[1]

    def __array__(self, dtype=None, copy=None):
        if dtype is None:
            return self.blocks
        return self.blocks.astype(dtype)

    def __len__(self):
        return self.n

    def __getitem__(self, i):
        return self.blocks[i]

    def __repr__(self):
        return f"StackedModel(n={self.n}, d={self.d})"


def _blocks(x) -> np.ndarray:
    if isinstance(x, StackedModel):
        return x.blocks
    return StackedModel(x).blocks


class ZeroRegularizer:
    """R(z) = 0; its prox is the identity."""

    def __call__(self, z) -> float:
        return 0.0

    def prox(self, z, step: float):
        return z

    @property
    def is_zero(self) -> bool:
        return True


class L1Regularizer:
    """R(z) = weight * ||z||_1 with soft-thresholding prox."""

    def __init__(self, weight: float):
        if weight < 0:
            raise ValueError("weight must be non-negative")
        self.weight = float(weight)

    def __call__(self, z) -> float:
        return self.weight * float(np.abs(z).sum())

    def prox(self, z, step: float):
        t = step * self.weight
        return np.sign(z) * np.maximum(np.abs(z) - t, 0.0)

    @property
    def is_zero(self) -> bool:
        return self.weight == 0.0


class MixtureProblem:
    """F(x) = (1/n) sum_i w_i f_i(x_i) + lam * psi(x) + sum_i R_i(x_i).

    With ``weighting="device"`` all weights are 1.  ``weighting="sample"``
    sets ``w_i = n m_i / N`` so the smooth loss is the plain average over all
    ``N`` data points; the two agree when every device holds the same count.
    """

    def __init__(self, devices, lam: float, regularizers=None, weighting: str = "device"):
        devices = list(devices)
        if not devices:
            raise ValueError("need at least one device")
        lam = float(lam)
        if not lam >= 0 or not np.isfinite(lam):
            raise ValueError(f"lambda must be finite and >= 0, got {lam}")
        d = devices[0].d
        if any(dev.d != d for dev in devices):
            raise ValueError("all devices must share the model dimension")
        if regularizers is None:
            regularizers = [ZeroRegularizer() for _ in devices]
        regularizers = list(regularizers)
        if len(regularizers) != len(devices):
            raise ValueError("one regularizer per device is required")
        if weighting not in ("device", "sample"):
            raise ValueError(f"unknown weighting {weighting!r}")
        self.devices = devices
        self.lam = lam
        self.regularizers = regularizers
        self.weighting = weighting
        counts = np.array([dev.m for dev in devices], dtype=float)
        if weighting == "sample":
            self.weights = len(devices) * counts / counts.sum()
        else:
            self.weights = np.ones(len(devices))

    @property
    def n(self) -> int:
        return len(self.devices)

    @property
    def d(self) -> int:
        return self.devices[0].d

    @property
    def N(self) -> int:
        return int(sum(dev.m for dev in self.devices))

    @property
    def has_regularizer(self) -> bool:
        return not all(getattr(r, "is_zero", False) for r in self.regularizers)

    def with_lambda(self, lam: float) -> "MixtureProblem":
        return MixtureProblem(self.devices, lam, self.regularizers, self.weighting)

    def local_grads(self, x) -> np.ndarray:
        """Rows are w_i * grad f_i(x_i) (no 1/n factor)."""
        xb = self._check(x)
        return np.stack([w * dev.grad(xi) for w, dev, xi in zip(self.weights, self.devices, xb)])

    def local_values(self, x) -> np.ndarray:
        xb = self._check(x)
        return np.array([w * dev.value(xi) for w, dev, xi in zip(self.weights, self.devices, xb)])

    def _check(self, x) -> np.ndarray:
        xb = _blocks(x)
        if xb.shape != (self.n, self.d):
            raise ValueError(f"model shape {xb.shape} does not match problem ({self.n}, {self.d})")
        return xb


def block_average(x) -> np.ndarray:
    xb = _blocks(x)
    # shifted by the first block so identical blocks average to themselves exactly
    return xb[0] + (xb - xb[0]).sum(axis=0) / xb.shape[0]


def psi(x) -> float:
    xb = _blocks(x)
    dev = xb - block_average(xb)
    return float(np.sum(dev * dev)) / (2 * xb.shape[0])


def grad_psi(x) -> StackedModel:
    xb = _blocks(x)
    return StackedModel((xb - block_average(xb)) / xb.shape[0])


def psi_hessian_dense(n: int, d: int) -> np.ndarray:
    """Constant Hessian (1/n)(I_n - ee^T/n) kron I_d of the penalty."""
    if n < 1 or d < 1:
        raise ValueError("n and d must be positive")
    if n * d > HESSIAN_SIZE_LIMIT:
        raise ValueError(f"n*d = {n * d} exceeds the dense size limit {HESSIAN_SIZE_LIMIT}")
    centering = np.eye(n) - np.full((n, n), 1.0 / n)
    return np.kron(centering / n, np.eye(d))


def smooth_value(problem: MixtureProblem, x) -> float:
    """f(x) + lam * psi(x), without the regularizers."""
    xb = problem._check(x)
    return float(problem.local_values(xb).sum()) / problem.n + problem.lam * psi(xb)


def objective_value(problem: MixtureProblem, x) -> float:
    xb = problem._check(x)
    reg = sum(r(xi) for r, xi in zip(problem.regularizers, xb))
    return smooth_value(problem, xb) + float(reg)


def grad_F(problem: MixtureProblem, x) -> StackedModel:
    """Gradient of the smooth part f + lam * psi."""
    xb = problem._check(x)
    n = problem.n
    return StackedModel(problem.local_grads(xb) / n + problem.lam * (xb - block_average(xb)) / n)
