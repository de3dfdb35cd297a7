"""Exact lattice arithmetic on Z^d: points, convolution potentials, eigenvalues.

All resonance decisions are made on integer squared norms. Floating point
enters only through the potential coefficients and the square root in
:func:`nu3`.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Mapping, Sequence

import numpy as np

MIN_DIM = 1
MAX_DIM = 4


@dataclass(frozen=True, order=True)
class LatticePoint:
    coords: tuple[int, ...]
    norm_sq: int = field(init=False, compare=False)

    def __post_init__(self):
        coords = tuple(int(c) for c in self.coords)
        if not MIN_DIM <= len(coords) <= MAX_DIM:
            raise ValueError(f"dimension must be in [{MIN_DIM}, {MAX_DIM}], got {len(coords)}")
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "norm_sq", sum(c * c for c in coords))

    @classmethod
    def of(cls, *coords: int) -> "LatticePoint":
        return cls(tuple(coords))

    @property
    def d(self) -> int:
        return len(self.coords)

    def __add__(self, other: "LatticePoint") -> "LatticePoint":
        return LatticePoint(tuple(a + b for a, b in zip(self.coords, other.coords)))

    def __sub__(self, other: "LatticePoint") -> "LatticePoint":
        return LatticePoint(tuple(a - b for a, b in zip(self.coords, other.coords)))

    def __neg__(self) -> "LatticePoint":
        return LatticePoint(tuple(-a for a in self.coords))

    def dot(self, other: "LatticePoint") -> int:
        return sum(a * b for a, b in zip(self.coords, other.coords))

    def __repr__(self):
        return f"LatticePoint{self.coords}"


def as_point(p) -> LatticePoint:
    """Coerce an int, tuple or LatticePoint into a LatticePoint."""
    if isinstance(p, LatticePoint):
        return p
    if isinstance(p, (int, np.integer)):
        return LatticePoint((int(p),))
    return LatticePoint(tuple(p))


def box_points(d: int, A: int) -> list[tuple[int, ...]]:
    """All a in Z^d with max|a_i| <= A, in lexicographic order."""
    return list(itertools.product(range(-A, A + 1), repeat=d))


def _is_representative(a: tuple[int, ...]) -> bool:
    # one member of each {a, -a}; the origin represents itself
    neg = tuple(-c for c in a)
    return a >= neg


@dataclass(frozen=True)
class Potential:
    """Truncated convolution potential V(y) = sum_a v_a e^{i a.y}.

    Coefficients are stored for every ``a`` in the box ``max|a_i| <= A``;
    outside the box ``v_a = 0``. ``seed`` is ``None`` for potentials built by
    hand rather than sampled.
    """

    d: int
    m: float
    R: float
    A: int
    coefficients: Mapping[tuple[int, ...], float]
    seed: int | None = None

    def __post_init__(self):
        if not MIN_DIM <= self.d <= MAX_DIM:
            raise ValueError(f"dimension must be in [{MIN_DIM}, {MAX_DIM}], got {self.d}")
        if self.A < 0:
            raise ValueError("cutoff A must be >= 0")
        coeffs = {tuple(int(c) for c in a): float(v) for a, v in self.coefficients.items()}
        for a, v in coeffs.items():
            if len(a) != self.d:
                raise ValueError(f"coefficient index {a} has wrong dimension")
            if max((abs(c) for c in a), default=0) > self.A:
                raise ValueError(f"coefficient index {a} lies outside the cutoff box")
            neg = tuple(-c for c in a)
            if coeffs.get(neg, 0.0) != v:
                raise ValueError(f"potential must be even: v{a} != v{neg}")
            bound = envelope(a, self.m, self.R)
            if abs(v) > bound:
                raise ValueError(f"|v{a}| = {abs(v)} exceeds the envelope {bound}")
        object.__setattr__(self, "coefficients", coeffs)

    def __getitem__(self, a) -> float:
        return self.coefficients.get(as_point(a).coords, 0.0)

    def coefficient(self, p) -> float:
        return self[p]

    def values(self, points: np.ndarray) -> np.ndarray:
        """Vectorized v_p for an integer array of shape (n, d)."""
        points = np.asarray(points, dtype=np.int64).reshape(-1, self.d)
        table = self._table
        inside = np.all(np.abs(points) <= self.A, axis=1)
        out = np.zeros(len(points))
        shifted = points[inside] + self.A
        out[inside] = table[tuple(shifted.T)]
        return out

    @cached_property
    def _table(self) -> np.ndarray:
        table = np.zeros((2 * self.A + 1,) * self.d)
        for a, v in self.coefficients.items():
            table[tuple(c + self.A for c in a)] = v
        return table

    @property
    def is_zero(self) -> bool:
        return all(v == 0.0 for v in self.coefficients.values())

    def scaled(self, factor: float) -> "Potential":
        """The potential factor*V, with R scaled so the envelope still holds."""
        return Potential(self.d, self.m, self.R * abs(factor), self.A,
                         {a: factor * v for a, v in self.coefficients.items()}, self.seed)

    def to_json(self) -> str:
        doc = {
            "d": self.d, "m": self.m, "R": self.R, "A": self.A, "seed": self.seed,
            "coefficients": [[list(a), v] for a, v in sorted(self.coefficients.items())],
        }
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text: str) -> "Potential":
        doc = json.loads(text)
        coeffs = {tuple(a): float(v) for a, v in doc["coefficients"]}
        return cls(int(doc["d"]), float(doc["m"]), float(doc["R"]), int(doc["A"]),
                   coeffs, doc.get("seed"))


def envelope(a: Sequence[int], m: float, R: float) -> float:
    """Largest admissible |v_a| = R (1+|a|)^{-m} / 2."""
    return R * (1.0 + math.sqrt(sum(c * c for c in a))) ** (-m) / 2.0


def zero_potential(d: int, A: int = 0) -> Potential:
    return Potential(d, m=d / 2 + 1, R=0.0, A=A, coefficients={})


def make_potential(d: int, coefficients: Mapping, m: float | None = None,
                   R: float | None = None) -> Potential:
    """Hand-built even potential.

    Each given coefficient is mirrored to -a. When ``m``/``R`` are omitted
    the smallest R compatible with the envelope at m = d/2 + 1 is used.
    """
    coeffs: dict[tuple[int, ...], float] = {}
    for a, v in coefficients.items():
        a = as_point(a).coords
        coeffs[a] = float(v)
        coeffs[tuple(-c for c in a)] = float(v)
    A = max((max(abs(c) for c in a) for a in coeffs), default=0)
    if m is None:
        m = d / 2 + 1
    if R is None:
        R = max((abs(v) / envelope(a, m, 1.0) for a, v in coeffs.items()), default=0.0)
        while any(abs(v) > envelope(a, m, R) for a, v in coeffs.items()):
            R = float(np.nextafter(R, np.inf))
    return Potential(d, float(m), float(R), A, coeffs)


def sample_potential(d: int, m: float, R: float, A: int, seed: int) -> Potential:
    """Draw V from the truncated product measure, symmetrized to be real and even.

    One normalized value v'_a ~ U[-1/2, 1/2] is drawn per pair {a, -a}, in
    lexicographic order of the representative, then v_a = R (1+|a|)^{-m} v'_a.
    ``R == 0`` is accepted and yields V = 0.
    """
    if not MIN_DIM <= d <= MAX_DIM:
        raise ValueError(f"dimension must be in [{MIN_DIM}, {MAX_DIM}], got {d}")
    if m <= d / 2:
        raise ValueError(f"decay exponent m={m} must exceed d/2={d / 2}")
    if R < 0:
        raise ValueError(f"amplitude R={R} must be non-negative")
    if A < 0:
        raise ValueError(f"cutoff A={A} must be >= 0")
    rng = np.random.default_rng(seed)
    reps = [a for a in box_points(d, A) if _is_representative(a)]
    draws = rng.uniform(-0.5, 0.5, size=len(reps))
    coeffs: dict[tuple[int, ...], float] = {}
    for a, vprime in zip(reps, draws):
        v = R * (1.0 + math.sqrt(sum(c * c for c in a))) ** (-m) * float(vprime)
        coeffs[a] = v
        coeffs[tuple(-c for c in a)] = v
    return Potential(d, float(m), float(R), int(A), coeffs, int(seed))


def eigenvalue(V: Potential, p) -> float:
    """lambda_p = -|p|^2 + v_p."""
    p = as_point(p)
    return -p.norm_sq + V[p]


def omega(V: Potential, p, q, r, s) -> float:
    """Phase lambda_p - lambda_q + lambda_r - lambda_s.

    The integer part is formed exactly; the potential part is grouped as
    (v_p - v_q) + (v_r - v_s) so that swapping the pair roles negates the
    result bit-exactly.
    """
    p, q, r, s = map(as_point, (p, q, r, s))
    n = -p.norm_sq + q.norm_sq - r.norm_sq + s.norm_sq
    return n + ((V[p] - V[q]) + (V[r] - V[s]))


def nu3(p, q, r, s) -> float:
    """Third largest of |p|, |q|, |r|, |s| (ties counted with multiplicity)."""
    norms = sorted((as_point(x).norm_sq for x in (p, q, r, s)), reverse=True)
    return math.sqrt(norms[2])


def has_zero_momentum(p, q, r, s) -> bool:
    p, q, r, s = map(as_point, (p, q, r, s))
    return all(a - b + c - e == 0 for a, b, c, e in zip(p.coords, q.coords, r.coords, s.coords))


def is_resonant(p, q, r, s) -> bool:
    """Exact membership test for the resonant set of a zero-momentum quadruple."""
    p, q, r, s = map(as_point, (p, q, r, s))
    if not has_zero_momentum(p, q, r, s):
        raise ValueError(f"quadruple {p, q, r, s} does not have zero momentum")
    return sorted((p.norm_sq, r.norm_sq)) == sorted((q.norm_sq, s.norm_sq))


def resonant_mask(np2, nq2, nr2, ns2) -> np.ndarray:
    """Vectorized multiset test {|p|^2,|r|^2} == {|q|^2,|s|^2} on integer arrays."""
    lo1, hi1 = np.minimum(np2, nr2), np.maximum(np2, nr2)
    lo2, hi2 = np.minimum(nq2, ns2), np.maximum(nq2, ns2)
    return (lo1 == lo2) & (hi1 == hi2)


def nu3_sq(np2, nq2, nr2, ns2) -> np.ndarray:
    """Vectorized squared nu3 on integer arrays."""
    stacked = np.sort(np.stack([np2, nq2, nr2, ns2]), axis=0)
    return stacked[1]


@dataclass(frozen=True)
class Quadruple:
    p: LatticePoint
    q: LatticePoint
    r: LatticePoint
    s: LatticePoint
    omega: float | None = field(default=None, compare=False)
    resonant: bool = field(init=False, compare=False)

    def __post_init__(self):
        for name in "pqrs":
            object.__setattr__(self, name, as_point(getattr(self, name)))
        object.__setattr__(self, "resonant", is_resonant(self.p, self.q, self.r, self.s))

    @classmethod
    def of(cls, p, q, r, s, V: Potential | None = None) -> "Quadruple":
        w = omega(V, p, q, r, s) if V is not None else None
        return cls(as_point(p), as_point(q), as_point(r), as_point(s), w)

    def with_potential(self, V: Potential) -> "Quadruple":
        return Quadruple(self.p, self.q, self.r, self.s, omega(V, *self.points))

    @property
    def points(self) -> tuple[LatticePoint, LatticePoint, LatticePoint, LatticePoint]:
        return (self.p, self.q, self.r, self.s)

    @property
    def norms_sq(self) -> tuple[int, int, int, int]:
        return tuple(x.norm_sq for x in self.points)

    def as_tuple(self) -> tuple[tuple[int, ...], ...]:
        return tuple(x.coords for x in self.points)


def points_array(points: Iterable) -> np.ndarray:
    return np.array([as_point(x).coords for x in points], dtype=np.int64)
