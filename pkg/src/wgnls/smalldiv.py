"""Small-divisor audits of sampled potentials on a lattice ball.

The audited quantity for a non-resonant zero-momentum quadruple is
``|omega| * max(1, nu3)**gamma``. The clamp at 1 matters only for quadruples
such as ``(a, 0, -a, 0)`` whose third largest norm is 0.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .lattice import Potential, Quadruple, nu3_sq, resonant_mask, sample_potential
from .resonance import iter_momentum_chunks, lattice_ball

DEFAULT_HIST_EDGES = tuple(float(e) for e in np.arange(-12, 5))


@dataclass(frozen=True)
class _Scan:
    """Non-resonant rows with p <= r (the (p,q,r,s) <-> (r,q,p,s) symmetry removed)."""

    rows: np.ndarray
    weight: np.ndarray      # 2 where p != r, else 1
    int_part: np.ndarray    # -|p|^2 + |q|^2 - |r|^2 + |s|^2
    nu3: np.ndarray         # clamped at 1
    max_norm: np.ndarray    # largest |x|^2 among the four points

    @property
    def n_total(self) -> int:
        return int(self.weight.sum())


@lru_cache(maxsize=8)
def _nonresonant_scan(P2: int, d: int) -> _Scan:
    norms = lattice_ball(P2, d).norms
    kept = []
    for rows in iter_momentum_chunks(P2, d):
        n = norms[rows]
        mask = ~resonant_mask(n[:, 0], n[:, 1], n[:, 2], n[:, 3]) & (rows[:, 0] <= rows[:, 2])
        kept.append(rows[mask])
    rows = np.concatenate(kept) if kept else np.empty((0, 4), dtype=np.int64)
    n = norms[rows]
    weight = np.where(rows[:, 0] != rows[:, 2], 2, 1)
    int_part = -n[:, 0] + n[:, 1] - n[:, 2] + n[:, 3]
    nu3 = np.maximum(1.0, np.sqrt(nu3_sq(n[:, 0], n[:, 1], n[:, 2], n[:, 3])))
    for arr in (rows, weight, int_part, nu3):
        arr.setflags(write=False)
    return _Scan(rows, weight, int_part, nu3, n.max(axis=1))


def scan_omegas(V: Potential, P2: int) -> tuple[_Scan, np.ndarray]:
    """Phases of every deduplicated non-resonant quadruple in the ball."""
    scan = _nonresonant_scan(P2, V.d)
    v = V.values(lattice_ball(P2, V.d).points)
    r = scan.rows
    om = scan.int_part + ((v[r[:, 0]] - v[r[:, 1]]) + (v[r[:, 2]] - v[r[:, 3]]))
    return scan, om


@dataclass
class AuditReport:
    seed: int | None
    d: int
    P2: int
    gamma: float
    n_scanned: int
    min_weighted_divisor: float | None
    worst_quadruple: Quadruple | None
    n_zero: int
    hist_edges: list[float]
    hist_counts: list[int]
    worst: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        wq = self.worst_quadruple
        return {
            "seed": self.seed, "d": self.d, "P2": self.P2, "gamma": self.gamma,
            "n_scanned": self.n_scanned,
            "min_weighted_divisor": self.min_weighted_divisor,
            "worst_quadruple": None if wq is None else [list(x) for x in wq.as_tuple()],
            "worst_omega": None if wq is None else wq.omega,
            "n_zero": self.n_zero,
            "histogram": {"log10_edges": self.hist_edges, "counts": self.hist_counts},
            "worst": self.worst,
        }


def audit(V: Potential, P2: int, gamma: float, n_worst: int = 10,
          hist_edges=DEFAULT_HIST_EDGES) -> AuditReport:
    """Minimum of |omega| * nu3^gamma over the non-resonant quadruples in the ball.

    Counts (``n_scanned``, histogram) include both members of each
    p <-> r symmetric pair.
    """
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    scan, om = scan_omegas(V, P2)
    edges = [float(e) for e in hist_edges]
    if len(om) == 0:
        return AuditReport(V.seed, V.d, P2, float(gamma), 0, None, None, 0, edges,
                           [0] * (len(edges) + 1))
    weighted = np.abs(om) * scan.nu3 ** gamma
    i = int(np.argmin(weighted))
    ball = lattice_ball(P2, V.d)
    worst_q = Quadruple(*(ball.point(k) for k in scan.rows[i]), omega=float(om[i]))

    zero = weighted == 0
    logs = np.log10(weighted[~zero])
    # bin 0 collects everything below the first edge, the last bin everything above
    bins = np.searchsorted(np.asarray(edges), logs, side="right")
    counts = np.bincount(bins, weights=scan.weight[~zero], minlength=len(edges) + 1)

    order = np.argsort(weighted, kind="stable")[:n_worst]
    worst = [{"quadruple": [ball.points[k].tolist() for k in scan.rows[j]],
              "omega": float(om[j]), "weighted": float(weighted[j])} for j in order]
    return AuditReport(V.seed, V.d, P2, float(gamma), scan.n_total, float(weighted[i]), worst_q,
                       int(scan.weight[zero].sum()), edges, [int(c) for c in counts], worst)


def sample_seeds(seed: int, n_samples: int) -> list[int]:
    """Independent per-sample potential seeds derived from one master seed."""
    children = np.random.SeedSequence(seed).spawn(n_samples)
    return [int(c.generate_state(1, dtype=np.uint32)[0]) for c in children]


def wilson_interval(k: int, n: int, z: float = 1.959963984540054) -> tuple[float, float]:
    if n == 0:
        return (0.0, 1.0)
    phat = k / n
    denom = 1 + z * z / n
    centre = (phat + z * z / (2 * n)) / denom
    half = z * math.sqrt(phat * (1 - phat) / n + z * z / (4 * n * n)) / denom
    return (max(0.0, centre - half), min(1.0, centre + half))


def genericity_study(d: int, m: float, R: float, A: int, P2: int, gamma: float, c: float,
                     n_samples: int, seed: int, workers: int = 1) -> dict:
    """Monte Carlo frequency of potentials whose weighted divisor stays above c."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    seeds = sample_seeds(seed, n_samples)
    # validates parameters once, before any work is farmed out
    sample_potential(d, m, R, A, seeds[0])

    def one(s):
        rep = audit(sample_potential(d, m, R, A, s), P2, gamma, n_worst=0)
        return rep.min_weighted_divisor

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            mins = list(pool.map(one, seeds))
    else:
        mins = [one(s) for s in seeds]
    # an empty scan imposes no constraint
    passed = [mv is None or mv >= c for mv in mins]
    k = int(sum(passed))
    lo, hi = wilson_interval(k, n_samples)
    return {
        "d": d, "m": m, "R": R, "A": A, "P2": P2, "gamma": gamma, "c": c,
        "n_samples": n_samples, "seed": seed, "n_pass": k,
        "fraction": k / n_samples, "wilson95": [lo, hi],
        "samples": [{"seed": s, "min_weighted_divisor": mv} for s, mv in zip(seeds, mins)],
    }


def genericity_estimate(d: int, m: float, R: float, A: int, P2: int, gamma: float, c: float,
                        n_samples: int, seed: int, workers: int = 1) -> float:
    return genericity_study(d, m, R, A, P2, gamma, c, n_samples, seed, workers)["fraction"]


def fit_gamma(V: Potential, P2_list) -> tuple[float, float]:
    """Fit |omega| >= c * nu3^-gamma as a lower envelope.

    For each radius, the quadruples not already inside the previous ball
    contribute their minimum |omega| per nu3 value. The running minimum over
    increasing nu3 gives a non-increasing envelope e(nu). The constant c is
    the envelope at nu3 = 1 (a minimum over nested sets, so it can only drop
    as the list grows) and gamma is the least-squares slope of
    log(c / e(nu)) against log(nu) through that anchor.
    """
    P2_list = [int(x) for x in P2_list]
    if len(P2_list) < 3 or any(b <= a for a, b in zip(P2_list, P2_list[1:])):
        raise ValueError("P2_list must be strictly increasing with at least 3 entries")
    scan, om = scan_omegas(V, P2_list[-1])
    absom = np.abs(om)
    minima: dict[float, float] = {}
    prev = -1
    for P2 in P2_list:
        new = (scan.max_norm > prev) & (scan.max_norm <= P2)
        prev = P2
        for nu in np.unique(scan.nu3[new]):
            sel = new & (scan.nu3 == nu)
            m = float(absom[sel].min())
            minima[float(nu)] = min(m, minima.get(float(nu), math.inf))
    if len(minima) < 3:
        raise ValueError(f"need at least 3 distinct nu3 values, observed {len(minima)}")
    nus = np.array(sorted(minima))
    env = np.minimum.accumulate(np.array([minima[n] for n in nus]))
    c_hat = float(env[0])
    if c_hat == 0:
        raise ValueError("zero divisors present: no positive lower envelope exists")
    x = np.log(nus[1:])
    y = np.log(c_hat) - np.log(env[1:])
    gamma_hat = float(np.dot(x, y) / np.dot(x, x))
    return gamma_hat, c_hat
