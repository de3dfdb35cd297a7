"""Enumeration of zero-momentum and resonant quadruples inside a lattice ball.

Points of the ball ``{p in Z^d : |p|^2 <= P2}`` are numbered in lexicographic
order of their coordinates; quadruples are stored as rows of four point
indices ``(p, q, r, s)``.
"""

from __future__ import annotations

import csv
import io
import itertools
import math
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterator

import numpy as np

from .lattice import LatticePoint, Quadruple, as_point, is_resonant, resonant_mask

CACHE_MAGIC = b"WGQI"
CACHE_VERSION = 1
_HEADER = struct.Struct("<4sHBxIQ")


@dataclass(frozen=True)
class Ball:
    """Integer points with |p|^2 <= P2 and a dense coordinate -> index lookup."""

    P2: int
    d: int
    points: np.ndarray = field(repr=False)
    norms: np.ndarray = field(repr=False)
    _lookup: np.ndarray = field(repr=False)

    @property
    def radius(self) -> int:
        return math.isqrt(self.P2)

    def __len__(self):
        return len(self.points)

    def index(self, coords: np.ndarray) -> np.ndarray:
        """Point indices for an (n, d) integer array; -1 where outside the ball."""
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, self.d)
        P = self.radius
        inside = np.all(np.abs(coords) <= P, axis=1)
        out = np.full(len(coords), -1, dtype=np.int64)
        shifted = coords[inside] + P
        out[inside] = self._lookup[tuple(shifted.T)]
        return out

    def index_of(self, p) -> int:
        return int(self.index(np.array(as_point(p).coords))[0])

    def point(self, i: int) -> LatticePoint:
        return LatticePoint(tuple(int(c) for c in self.points[i]))


@lru_cache(maxsize=32)
def lattice_ball(P2: int, d: int) -> Ball:
    if P2 < 0:
        raise ValueError("P2 must be >= 0")
    P = math.isqrt(P2)
    pts = [c for c in itertools.product(range(-P, P + 1), repeat=d)
           if sum(x * x for x in c) <= P2]
    points = np.array(pts, dtype=np.int64).reshape(-1, d)
    lookup = np.full((2 * P + 1,) * d, -1, dtype=np.int64)
    lookup[tuple((points + P).T)] = np.arange(len(points))
    points.setflags(write=False)
    norms = (points ** 2).sum(axis=1)
    norms.setflags(write=False)
    return Ball(P2, d, points, norms, lookup)


def iter_momentum_chunks(P2: int, d: int) -> Iterator[np.ndarray]:
    """Zero-momentum index rows (p, q, r, s), one chunk per q, lexicographic in (q, r, s)."""
    ball = lattice_ball(P2, d)
    B = len(ball)
    P = ball.radius
    # q + s - r lies in [-3P, 3P]^d: one flat lookup over that box replaces per-chunk bounds checks
    width = 6 * P + 1
    strides = width ** np.arange(d - 1, -1, -1, dtype=np.int64)
    padded = np.full(width ** d, -1, dtype=np.int64)
    padded[(ball.points + 3 * P) @ strides] = np.arange(B)
    r_idx, s_idx = np.divmod(np.arange(B * B, dtype=np.int64), B)
    diff_code = (ball.points[s_idx] - ball.points[r_idx]) @ strides
    q_code = (ball.points + 3 * P) @ strides
    for q in range(B):
        p_idx = padded[diff_code + q_code[q]]
        keep = p_idx >= 0
        n = int(keep.sum())
        rows = np.empty((n, 4), dtype=np.int64)
        rows[:, 0] = p_idx[keep]
        rows[:, 1] = q
        rows[:, 2] = r_idx[keep]
        rows[:, 3] = s_idx[keep]
        yield rows


def momentum_array(P2: int, d: int) -> np.ndarray:
    chunks = list(iter_momentum_chunks(P2, d))
    return np.concatenate(chunks) if chunks else np.empty((0, 4), dtype=np.int64)


def enumerate_momentum_set(P2: int, d: int) -> Iterator[Quadruple]:
    """Yield every ordered (p, q, r, s) in the ball with p - q + r - s = 0."""
    ball = lattice_ball(P2, d)
    for rows in iter_momentum_chunks(P2, d):
        for p, q, r, s in rows:
            yield Quadruple(ball.point(p), ball.point(q), ball.point(r), ball.point(s))


def _sort_rows(rows: np.ndarray) -> np.ndarray:
    order = np.lexsort(rows.T[::-1])
    return rows[order]


def gamma0_bruteforce(P2: int, d: int) -> np.ndarray:
    """Resonant rows by filtering the full momentum set; sorted by (p, q, r, s)."""
    norms = lattice_ball(P2, d).norms
    kept = []
    for rows in iter_momentum_chunks(P2, d):
        n = norms[rows]
        kept.append(rows[resonant_mask(n[:, 0], n[:, 1], n[:, 2], n[:, 3])])
    return _sort_rows(np.concatenate(kept))


@dataclass(frozen=True)
class QuadrupleIndex:
    """Resonant quadruples in a ball with a CSR per-target adjacency.

    ``rows`` holds (p, q, r, s) point indices sorted lexicographically, so the
    quadruples with target ``p`` are ``rows[offsets[p]:offsets[p + 1]]``.
    """

    P2: int
    d: int
    rows: np.ndarray = field(repr=False)
    offsets: np.ndarray = field(repr=False)

    @property
    def ball(self) -> Ball:
        return lattice_ball(self.P2, self.d)

    @property
    def points(self) -> np.ndarray:
        return self.ball.points

    @property
    def norms(self) -> np.ndarray:
        return self.ball.norms

    def __len__(self):
        return len(self.rows)

    @property
    def n_points(self) -> int:
        return len(self.offsets) - 1

    def fiber(self, p) -> list[tuple[LatticePoint, LatticePoint, LatticePoint]]:
        """All (q, r, s) completing a resonant quadruple with target p."""
        ball = self.ball
        i = ball.index_of(p)
        if i < 0:
            raise ValueError(f"{p} lies outside the ball")
        block = self.fiber_rows(i)
        return [(ball.point(q), ball.point(r), ball.point(s)) for _, q, r, s in block]

    def fiber_rows(self, i: int) -> np.ndarray:
        return self.rows[self.offsets[i]:self.offsets[i + 1]]

    def quadruples(self) -> Iterator[Quadruple]:
        ball = self.ball
        for p, q, r, s in self.rows:
            yield Quadruple(ball.point(p), ball.point(q), ball.point(r), ball.point(s))

    def coordinate_rows(self) -> np.ndarray:
        """Coordinates as an (n, 4, d) integer array."""
        return self.points[self.rows]

    def as_set(self) -> set[tuple[tuple[int, ...], ...]]:
        coords = self.coordinate_rows()
        return {tuple(tuple(int(c) for c in pt) for pt in quad) for quad in coords}

    # persistence

    def to_bytes(self) -> bytes:
        header = _HEADER.pack(CACHE_MAGIC, CACHE_VERSION, self.d, self.P2, len(self.rows))
        return header + self.coordinate_rows().astype("<i2").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "QuadrupleIndex":
        magic, version, d, P2, count = _HEADER.unpack_from(blob)
        if magic != CACHE_MAGIC:
            raise ValueError("not a quadruple index cache")
        if version != CACHE_VERSION:
            raise ValueError(f"unsupported cache version {version}")
        coords = np.frombuffer(blob, dtype="<i2", offset=_HEADER.size)
        if coords.size != count * 4 * d:
            raise ValueError("truncated quadruple index cache")
        ball = lattice_ball(P2, d)
        idx = ball.index(coords.reshape(-1, d).astype(np.int64)).reshape(count, 4)
        if np.any(idx < 0):
            raise ValueError("cache contains points outside the ball")
        return _from_rows(P2, d, idx)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "QuadrupleIndex":
        return cls.from_bytes(Path(path).read_bytes())

    def write_csv(self, stream) -> None:
        writer = csv.writer(stream, lineterminator="\r\n")
        writer.writerow(["p", "q", "r", "s", "np2", "nq2", "nr2", "ns2"])
        pts = self.points
        norms = self.norms
        for row in self.rows:
            writer.writerow([" ".join(str(int(c)) for c in pts[i]) for i in row]
                            + [int(norms[i]) for i in row])

    def to_csv(self) -> str:
        buf = io.StringIO()
        self.write_csv(buf)
        return buf.getvalue()


def _from_rows(P2: int, d: int, rows: np.ndarray) -> QuadrupleIndex:
    rows = _sort_rows(np.asarray(rows, dtype=np.int64).reshape(-1, 4))
    B = len(lattice_ball(P2, d))
    offsets = np.zeros(B + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows[:, 0], minlength=B), out=offsets[1:])
    rows.setflags(write=False)
    offsets.setflags(write=False)
    return QuadrupleIndex(P2, d, rows, offsets)


@lru_cache(maxsize=16)
def enumerate_gamma0(P2: int, d: int) -> QuadrupleIndex:
    """Resonant set inside the ball via pair bucketing.

    Every ordered pair (u, v) is keyed by (u + v, sorted(|u|^2, |v|^2)); two
    pairs (p, r) and (q, s) with equal keys form a resonant quadruple and
    every resonant quadruple arises exactly once this way.
    """
    ball = lattice_ball(P2, d)
    B = len(ball)
    P = ball.radius
    u, v = np.divmod(np.arange(B * B, dtype=np.int64), B)
    total = ball.points[u] + ball.points[v] + 2 * P
    nu, nv = ball.norms[u], ball.norms[v]
    key = np.zeros(B * B, dtype=np.int64)
    for k in range(d):
        key = key * (4 * P + 1) + total[:, k]
    key = (key * (P2 + 1) + np.minimum(nu, nv)) * (P2 + 1) + np.maximum(nu, nv)

    order = np.argsort(key, kind="stable")
    sorted_key = key[order]
    starts = np.flatnonzero(np.r_[True, sorted_key[1:] != sorted_key[:-1]])
    sizes = np.diff(np.r_[starts, B * B])
    group = np.repeat(np.arange(len(starts)), sizes)

    reps = sizes[group]
    left = np.repeat(order, reps)
    first = np.repeat(starts[group], reps)
    within = np.arange(reps.sum()) - np.repeat(np.cumsum(reps) - reps, reps)
    right = order[first + within]

    rows = np.stack([u[left], u[right], v[left], v[right]], axis=1)
    return _from_rows(P2, d, rows)


def verify_rectangle(quad: Quadruple) -> bool:
    """Check that a resonant quadruple is a rectangle with an edge bisected by the origin."""
    p, q, r, s = quad.points
    if not is_resonant(p, q, r, s):
        raise ValueError(f"{quad.as_tuple()} is not resonant")
    parallelogram = all(a - b + c - e == 0
                        for a, b, c, e in zip(p.coords, q.coords, r.coords, s.coords))
    orthogonal = (p - q).dot(q - r) == 0
    bisected = p.norm_sq == q.norm_sq or q.norm_sq == r.norm_sq
    return parallelogram and orthogonal and bisected


def rectangle_mask(points: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """Vectorized geometric rectangle test on zero-momentum rows."""
    p, q, r = (points[rows[:, k]] for k in range(3))
    orth = np.einsum("ij,ij->i", p - q, q - r) == 0
    np_, nq, nr = ((x ** 2).sum(axis=1) for x in (p, q, r))
    return orth & ((np_ == nq) | (nq == nr))


def rectangle_counterexamples(P2: int, d: int, limit: int = 20) -> list[Quadruple]:
    """Zero-momentum rectangles with an origin-bisected edge that are not resonant.

    Candidates against the converse of the rectangle characterization; the
    list is expected to be empty.
    """
    ball = lattice_ball(P2, d)
    found: list[Quadruple] = []
    for rows in iter_momentum_chunks(P2, d):
        n = ball.norms[rows]
        bad = rectangle_mask(ball.points, rows) & ~resonant_mask(n[:, 0], n[:, 1], n[:, 2], n[:, 3])
        for row in rows[bad][: limit - len(found)]:
            found.append(Quadruple(*(ball.point(i) for i in row)))
        if len(found) >= limit:
            break
    return found
