"""Run traces and communication accounting."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

__all__ = ["CommCounter", "RunTrace", "count_rounds", "comm_rounds_expected", "TRACE_HEADER", "fmt17"]

TRACE_HEADER = ("k", "data_passes", "comm_rounds", "objective", "rel_subopt", "dist_sq")


def fmt17(v) -> str:
    if v is None or (isinstance(v, float) and np.isnan(v)):
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.17g}"


class CommCounter:
    """Counts rounds: an upload opens one at a 0->1 coin transition, the next 1->0 closes it.

    The coin before the first iteration is taken to be 0, so an open round at
    the end of a run is still counted.
    """

    def __init__(self):
        self.prev = 0
        self.rounds = 0
        self.switches = 0
        self.length = 0

    def feed(self, coins) -> int:
        c = np.asarray(coins, dtype=np.int64)
        if c.size == 0:
            return self.rounds
        seq = np.concatenate([[self.prev], c])
        self.rounds += int(np.count_nonzero((seq[:-1] == 0) & (seq[1:] == 1)))
        self.switches += int(np.count_nonzero(seq[:-1] != seq[1:]))
        self.prev = int(c[-1])
        self.length += c.size
        return self.rounds

    @property
    def open(self) -> bool:
        return self.prev == 1


def count_rounds(coins) -> int:
    cc = CommCounter()
    return cc.feed(coins)


def comm_rounds_expected(p: float, k) -> float:
    if not 0.0 < p < 1.0:
        raise ValueError("p must lie in (0, 1)")
    if k < 0:
        raise ValueError("k must be >= 0")
    return p * (1.0 - p) * k


@dataclass
class RunTrace:
    k: list = field(default_factory=list)
    data_passes: list = field(default_factory=list)
    comm_rounds: list = field(default_factory=list)
    objective: list = field(default_factory=list)
    rel_subopt: list = field(default_factory=list)
    dist_sq: list = field(default_factory=list)
    coin_length: int = 0
    transitions: int = 0
    F_star: float | None = None
    F0: float | None = None

    def record(self, k, passes, rounds, F, dist_sq=None):
        if self.F0 is None:
            self.F0 = F
        rel = None
        if self.F_star is not None:
            gap0 = self.F0 - self.F_star
            rel = 1.0 if not self.k else ((F - self.F_star) / gap0 if gap0 > 0 else 0.0)
        self.k.append(int(k))
        self.data_passes.append(float(passes))
        self.comm_rounds.append(int(rounds))
        self.objective.append(float(F))
        self.rel_subopt.append(rel)
        self.dist_sq.append(None if dist_sq is None else float(dist_sq))
        return rel

    def __len__(self):
        return len(self.k)

    def rows(self):
        return zip(self.k, self.data_passes, self.comm_rounds, self.objective, self.rel_subopt, self.dist_sq)

    def first_reaching(self, target: float):
        """(k, data_passes, comm_rounds) at the first record with rel_subopt <= target, else None."""
        for k, dp, cr, _, rel, _ in self.rows():
            if rel is not None and rel <= target:
                return k, dp, cr
        return None

    def final_rel(self):
        return self.rel_subopt[-1] if self.rel_subopt else None

    def to_csv(self, fh=None) -> str:
        buf = io.StringIO() if fh is None else fh
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRACE_HEADER)
        for row in self.rows():
            w.writerow([fmt17(v) for v in row])
        return buf.getvalue() if fh is None else ""
