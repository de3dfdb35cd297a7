"""Resonant trilinear operator and the limit systems it generates.

States are amplitude vectors indexed by the points of a lattice ball (see
:func:`wgnls.resonance.lattice_ball`); profile states carry an extra leading
axis for a parametric frequency grid.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import NumericalFailure
from .lattice import as_point
from .resonance import QuadrupleIndex, enumerate_gamma0, gamma0_bruteforce, lattice_ball

MASS_FAILSAFE = 1e-3


@dataclass(frozen=True)
class LatticeState:
    P2: int
    d: int
    amplitudes: np.ndarray

    def __post_init__(self):
        amps = np.asarray(self.amplitudes, dtype=complex)
        if amps.shape != (len(lattice_ball(self.P2, self.d)),):
            raise ValueError("amplitude vector does not match the ball size")
        object.__setattr__(self, "amplitudes", amps)

    @classmethod
    def zeros(cls, P2: int, d: int) -> "LatticeState":
        return cls(P2, d, np.zeros(len(lattice_ball(P2, d)), dtype=complex))

    @classmethod
    def from_modes(cls, P2: int, d: int, modes: dict) -> "LatticeState":
        ball = lattice_ball(P2, d)
        amps = np.zeros(len(ball), dtype=complex)
        for p, c in modes.items():
            i = ball.index_of(p)
            if i < 0:
                raise ValueError(f"mode {p} lies outside the ball")
            amps[i] = c
        return cls(P2, d, amps)

    def __getitem__(self, p) -> complex:
        i = lattice_ball(self.P2, self.d).index_of(as_point(p))
        return complex(self.amplitudes[i]) if i >= 0 else 0j

    @property
    def mass(self) -> float:
        return float(np.sum(np.abs(self.amplitudes) ** 2))

    def hs_norm(self, s: float) -> float:
        return hs_norm(self.amplitudes, lattice_ball(self.P2, self.d).norms, s)


def hs_norm(amplitudes: np.ndarray, norms: np.ndarray, s: float) -> float:
    """Discrete Sobolev norm (sum (1+|p|^2)^s |a_p|^2)^(1/2)."""
    return float(np.sqrt(np.sum((1.0 + norms) ** s * np.abs(amplitudes) ** 2)))


def random_state(P2: int, d: int, seed: int, decay: float = 1.0, mass: float = 1.0) -> LatticeState:
    """Complex Gaussian amplitudes with a (1+|p|^2)^-decay envelope, scaled to a given mass."""
    rng = np.random.default_rng(seed)
    ball = lattice_ball(P2, d)
    z = rng.standard_normal(len(ball)) + 1j * rng.standard_normal(len(ball))
    a = z * (1.0 + ball.norms) ** (-decay)
    a *= np.sqrt(mass / np.sum(np.abs(a) ** 2))
    return LatticeState(P2, d, a)


def resonant_sum(index: QuadrupleIndex, f: np.ndarray, g: np.ndarray, h: np.ndarray) -> np.ndarray:
    """b_p = sum over resonant (p,q,r,s) of f_q conj(g_r) h_s along axis 0.

    Extra trailing axes are treated as parameters (one independent sum per
    column). Every target owns at least the diagonal quadruple (p,p,p,p), so
    no reduceat segment is empty.
    """
    rows = index.rows
    terms = f[rows[:, 1]]
    terms *= np.conj(g)[rows[:, 2]]
    terms *= h[rows[:, 3]]
    return np.add.reduceat(terms, index.offsets[:-1], axis=0)


def _check_match(a: LatticeState, index: QuadrupleIndex):
    if (a.P2, a.d) != (index.P2, index.d):
        raise ValueError(f"state ball (P2={a.P2}, d={a.d}) does not match "
                         f"index ball (P2={index.P2}, d={index.d})")


def eval_R(a: LatticeState, index: QuadrupleIndex) -> LatticeState:
    _check_match(a, index)
    amps = a.amplitudes
    return LatticeState(a.P2, a.d, resonant_sum(index, amps, amps, amps))


@lru_cache(maxsize=8)
def _bruteforce_rows(P2: int, d: int) -> np.ndarray:
    return gamma0_bruteforce(P2, d)


def eval_R_bruteforce(a: LatticeState, P2: int) -> LatticeState:
    """Reference for :func:`eval_R`: filters the momentum set directly and scatters with add.at."""
    if a.P2 != P2:
        raise ValueError("state ball does not match P2")
    rows = _bruteforce_rows(P2, a.d)
    amps = a.amplitudes
    out = np.zeros_like(amps)
    np.add.at(out, rows[:, 0], amps[rows[:, 1]] * np.conj(amps[rows[:, 2]]) * amps[rows[:, 3]])
    return LatticeState(a.P2, a.d, out)


@dataclass
class ConservedSet:
    mass: float
    energy: float
    shell_masses: dict[int, float]
    hamiltonian: float
    hamiltonian_imag: float = 0.0

    def hs_norm(self, s: float) -> float:
        return float(np.sqrt(sum((1.0 + N) ** s * m for N, m in self.shell_masses.items())))


def _shell_masses(amps: np.ndarray, norms: np.ndarray) -> dict[int, float]:
    sums = np.bincount(norms, weights=np.abs(amps) ** 2)
    return {int(N): float(v) for N, v in enumerate(sums) if np.any(norms == N)}


def conserved_set(a: LatticeState, index: QuadrupleIndex) -> ConservedSet:
    _check_match(a, index)
    amps = a.amplitudes
    norms = index.norms
    b = resonant_sum(index, amps, amps, amps)
    ham = complex(np.sum(amps * np.conj(b)))
    weights = np.abs(amps) ** 2
    return ConservedSet(
        mass=float(np.sum(weights)),
        energy=float(np.sum(norms * weights)),
        shell_masses=_shell_masses(amps, norms),
        hamiltonian=ham.real,
        hamiltonian_imag=ham.imag,
    )


def _rk4_step(y: np.ndarray, dt: float, rhs) -> np.ndarray:
    k1 = rhs(y)
    k2 = rhs(y + 0.5 * dt * k1)
    k3 = rhs(y + 0.5 * dt * k2)
    k4 = rhs(y + dt * k3)
    return y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _step_schedule(t_end: float, dt: float) -> list[float]:
    if dt <= 0:
        raise ValueError("dt must be positive")
    if t_end < 0:
        raise ValueError("t_end must be non-negative")
    n = int(np.floor(t_end / dt + 1e-9))
    steps = [dt] * n
    rest = t_end - n * dt
    if rest > 1e-12 * max(1.0, t_end):
        steps.append(rest)
    return steps


@dataclass
class Trajectory:
    times: list[float] = field(default_factory=list)
    states: list[LatticeState] = field(default_factory=list)
    conserved: list[ConservedSet] = field(default_factory=list)

    @property
    def final(self) -> LatticeState:
        return self.states[-1]

    def max_relative_drift(self) -> dict[str, float]:
        """Largest relative deviation from the initial value of each first integral."""
        c0 = self.conserved[0]

        def rel(get):
            ref = abs(get(c0))
            dev = max(abs(get(c) - get(c0)) for c in self.conserved)
            return dev / ref if ref > 0 else dev

        out = {
            "mass": rel(lambda c: c.mass),
            "energy": rel(lambda c: c.energy),
            "hamiltonian": rel(lambda c: c.hamiltonian),
        }
        shells = max((rel(lambda c, N=N: c.shell_masses[N]) for N, m in c0.shell_masses.items() if m > 0),
                     default=0.0)
        out["shells"] = shells
        return out

    def write_csv(self, stream) -> None:
        c0 = self.conserved[0]
        shells = sorted(N for N, m in c0.shell_masses.items() if m > 0)
        writer = csv.writer(stream, lineterminator="\r\n")
        writer.writerow(["t", "mass", "energy", "hamiltonian"] + [f"A2_{N}" for N in shells])
        for t, c in zip(self.times, self.conserved):
            writer.writerow([t, c.mass, c.energy, c.hamiltonian] + [c.shell_masses[N] for N in shells])


def integrate_resonant(a0: LatticeState, t_end: float, dt: float, index: QuadrupleIndex,
                       checkpoint_every: int | None = None,
                       failsafe: float = MASS_FAILSAFE) -> Trajectory:
    """Integrate i da/dt = R[a, a, a] with the classical fourth-order Runge-Kutta method.

    A checkpoint (state plus first integrals) is stored at t = 0, every
    ``checkpoint_every`` steps and at ``t_end``. Raises NumericalFailure if
    the relative mass drift exceeds ``failsafe``.
    """
    _check_match(a0, index)
    steps = _step_schedule(t_end, dt)
    if checkpoint_every is None:
        checkpoint_every = max(1, len(steps) // 100)

    def rhs(y):
        return -1j * resonant_sum(index, y, y, y)

    y = a0.amplitudes.copy()
    mass0 = float(np.sum(np.abs(y) ** 2))
    traj = Trajectory()
    t = 0.0

    def record():
        state = LatticeState(a0.P2, a0.d, y.copy())
        traj.times.append(t)
        traj.states.append(state)
        traj.conserved.append(conserved_set(state, index))

    record()
    for k, h in enumerate(steps, start=1):
        y = _rk4_step(y, h, rhs)
        t = k * dt if h == dt else t_end
        mass = float(np.sum(np.abs(y) ** 2))
        if not np.isfinite(mass) or abs(mass - mass0) > failsafe * max(mass0, 1e-300):
            raise NumericalFailure(f"relative mass drift exceeded {failsafe} at t={t}; "
                                   f"reduce the step size")
        if k % checkpoint_every == 0 or k == len(steps):
            record()
    return traj


@dataclass(frozen=True)
class ProfileState:
    """Lattice amplitudes G_p(xi_j) on a strictly increasing xi grid."""

    P2: int
    d: int
    xi: np.ndarray
    amplitudes: np.ndarray  # shape (n_xi, n_points)
    xi_weights: np.ndarray | None = None

    def __post_init__(self):
        xi = np.asarray(self.xi, dtype=float)
        amps = np.asarray(self.amplitudes, dtype=complex)
        B = len(lattice_ball(self.P2, self.d))
        if amps.shape != (len(xi), B):
            raise ValueError("amplitudes must have shape (len(xi), ball size)")
        if np.any(np.diff(xi) <= 0):
            raise ValueError("xi grid must be strictly increasing")
        w = np.ones_like(xi) if self.xi_weights is None else np.asarray(self.xi_weights, dtype=float)
        object.__setattr__(self, "xi", xi)
        object.__setattr__(self, "amplitudes", amps)
        object.__setattr__(self, "xi_weights", w)

    def slice(self, j: int) -> LatticeState:
        return LatticeState(self.P2, self.d, self.amplitudes[j])

    def z_norm(self) -> float:
        """sup over xi of (1+xi^2)^2 sum (1+|p|^2)|G_p(xi)|^2, square-rooted."""
        norms = lattice_ball(self.P2, self.d).norms
        per_xi = (1.0 + self.xi ** 2) ** 2 * np.sum((1.0 + norms) * np.abs(self.amplitudes) ** 2, axis=1)
        return float(np.sqrt(per_xi.max())) if len(per_xi) else 0.0

    def hn_norm(self, N: float) -> float:
        """Quadrature of (1+xi^2+|p|^2)^N |G_p(xi)|^2 with the xi weights, square-rooted."""
        norms = lattice_ball(self.P2, self.d).norms
        mult = (1.0 + self.xi[:, None] ** 2 + norms[None, :]) ** N
        return float(np.sqrt(np.sum(self.xi_weights[:, None] * mult * np.abs(self.amplitudes) ** 2)))


@dataclass
class ProfileTrajectory:
    taus: list[float] = field(default_factory=list)
    states: list[ProfileState] = field(default_factory=list)
    conserved: list[list[ConservedSet]] = field(default_factory=list)

    @property
    def final(self) -> ProfileState:
        return self.states[-1]


def integrate_limit_system(G0: ProfileState, tau_end: float, dtau: float, index: QuadrupleIndex,
                           checkpoint_every: int | None = None, failsafe: float = MASS_FAILSAFE,
                           tau0: float = 0.0, record_conserved: bool = True) -> ProfileTrajectory:
    """Integrate i dG/dtau = R[G, G, G] independently at every xi grid point.

    The xi columns never interact, so they are advanced together as one
    array; each column follows exactly the arithmetic of
    :func:`integrate_resonant`. ``tau_end`` is the signed duration measured
    from ``tau0``; a negative value integrates backward. With
    ``record_conserved=False`` the per-column first integrals are skipped
    (useful for fine xi grids).
    """
    if (G0.P2, G0.d) != (index.P2, index.d):
        raise ValueError("profile ball does not match index ball")
    sign = -1.0 if tau_end < 0 else 1.0
    steps = _step_schedule(abs(tau_end), dtau)
    if checkpoint_every is None:
        checkpoint_every = max(1, len(steps) // 100)

    def rhs(y):
        return -1j * resonant_sum(index, y, y, y)

    y = G0.amplitudes.T.copy()  # (B, n_xi): parameters on the trailing axis
    mass0 = np.sum(np.abs(y) ** 2, axis=0)
    traj = ProfileTrajectory()
    tau = tau0

    def record():
        state = ProfileState(G0.P2, G0.d, G0.xi, y.T.copy(), G0.xi_weights)
        traj.taus.append(tau)
        traj.states.append(state)
        if record_conserved:
            traj.conserved.append([conserved_set(state.slice(j), index) for j in range(len(G0.xi))])

    record()
    for k, h in enumerate(steps, start=1):
        y = _rk4_step(y, sign * h, rhs)
        tau = tau0 + sign * (k * dtau if h == dtau else abs(tau_end))
        mass = np.sum(np.abs(y) ** 2, axis=0)
        bad = ~np.isfinite(mass) | (np.abs(mass - mass0) > failsafe * np.maximum(mass0, 1e-300))
        if np.any(bad):
            raise NumericalFailure(f"relative mass drift exceeded {failsafe} at tau={tau} "
                                   f"for xi indices {np.flatnonzero(bad).tolist()}")
        if k % checkpoint_every == 0 or k == len(steps):
            record()
    return traj


def default_index(P2: int, d: int) -> QuadrupleIndex:
    return enumerate_gamma0(P2, d)
