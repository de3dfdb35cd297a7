"""Pseudospectral simulation of i U_t + U_xx + Delta_y U + V * U = |U|^2 U.

The line is periodized to x in [-L/2, L/2); the torus is [0, 2 pi)^d with
``Ny`` points per axis. Arrays have shape ``(Nx, Ny, ..., Ny)``.

Fourier conventions. ``WaveField.coefficients()`` returns the discrete
coefficients c_{j,p} with u = sum c_{j,p} exp(i(xi_j x + p.y)). The
continuum transform with the (1/2 pi) line convention and the normalized
torus coefficients is approximated by ``spectrum() = (L / 2 pi) * c``; all
norms that are defined through F_p(xi) (Z, and the resonant form) use that
spectrum. L^2-type norms are plain integrals over the periodized domain, so
||F||_{H^0} squared equals the mass int |F|^2 dx dy.
"""

from __future__ import annotations

import math
import struct
import warnings
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.fft as sfft

from .errors import NumericalFailure
from .lattice import Potential
from .resonance import QuadrupleIndex
from .resonant_flow import resonant_sum

BOUNDARY_FRACTION = 0.1     # outer share of the x-domain watched for wrap-around
BOUNDARY_WARN = 0.01

_workers = 1

SNAPSHOT_MAGIC = b"WGWF"
SNAPSHOT_VERSION = 1
_SNAP_HEADER = struct.Struct("<4sHBxIIdd")   # magic, version, d, Nx, Ny, L, t


def set_workers(n: int) -> None:
    """Thread count for the transforms; results do not depend on it."""
    global _workers
    _workers = max(1, int(n))


def _is_pow2(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


@dataclass(frozen=True)
class Discretization:
    d: int
    L: float
    Nx: int
    Ny: int
    dt: float = 5e-3

    def __post_init__(self):
        if not 1 <= self.d <= 4:
            raise ValueError("d must be in [1, 4]")
        if self.L <= 0:
            raise ValueError("period L must be positive")
        if not (_is_pow2(self.Nx) and _is_pow2(self.Ny)):
            raise ValueError("Nx and Ny must be powers of two")

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.Nx,) + (self.Ny,) * self.d

    @property
    def axes(self) -> tuple[int, ...]:
        return tuple(range(self.d + 1))

    @property
    def size(self) -> int:
        return self.Nx * self.Ny ** self.d

    @property
    def dx(self) -> float:
        return self.L / self.Nx

    @property
    def dy(self) -> float:
        return 2 * math.pi / self.Ny

    @property
    def cell(self) -> float:
        return self.dx * self.dy ** self.d

    @property
    def volume(self) -> float:
        return self.L * (2 * math.pi) ** self.d

    @property
    def spectral_scale(self) -> float:
        """Factor mapping discrete coefficients to the continuum x-transform."""
        return self.L / (2 * math.pi)

    @cached_property
    def x(self) -> np.ndarray:
        return -self.L / 2 + self.dx * np.arange(self.Nx)

    @cached_property
    def y(self) -> np.ndarray:
        return self.dy * np.arange(self.Ny)

    @cached_property
    def xi(self) -> np.ndarray:
        """x-frequencies (2 pi / L) j in transform order."""
        return (2 * math.pi / self.L) * np.fft.fftfreq(self.Nx, 1.0 / self.Nx)

    @cached_property
    def p1(self) -> np.ndarray:
        """Integer y-frequencies along one axis in transform order."""
        return np.rint(np.fft.fftfreq(self.Ny, 1.0 / self.Ny)).astype(np.int64)

    def _bcast(self, arr: np.ndarray, axis: int) -> np.ndarray:
        shape = [1] * (self.d + 1)
        shape[axis] = -1
        return arr.reshape(shape)

    @cached_property
    def xi_grid(self) -> np.ndarray:
        return self._bcast(self.xi, 0)

    @cached_property
    def x_grid(self) -> np.ndarray:
        return self._bcast(self.x, 0)

    @cached_property
    def p_coords(self) -> np.ndarray:
        """All y-frequency vectors, shape (Ny,)*d + (d,), in transform order."""
        mesh = np.meshgrid(*([self.p1] * self.d), indexing="ij")
        return np.stack(mesh, axis=-1)

    @cached_property
    def p_norm_sq(self) -> np.ndarray:
        """|p|^2 broadcast against the field shape."""
        return (self.p_coords ** 2).sum(axis=-1)[None, ...]

    def eigenvalues(self, V: Potential) -> np.ndarray:
        """lambda_p = -|p|^2 + v_p on the y-frequency grid, broadcastable to the field."""
        if V.d != self.d:
            raise ValueError("potential dimension does not match the discretization")
        if V.A > self.Ny // 2:
            raise ValueError(f"potential cutoff A={V.A} exceeds Ny/2={self.Ny // 2}")
        v = V.values(self.p_coords.reshape(-1, self.d)).reshape((1,) + (self.Ny,) * self.d)
        return -self.p_norm_sq + v

    def symbol(self, V: Potential) -> np.ndarray:
        """Symbol -xi^2 + lambda_p of the linear operator."""
        return -self.xi_grid ** 2 + self.eigenvalues(V)

    def grid_index(self, coords: np.ndarray) -> np.ndarray:
        """Flat y-grid positions of integer frequency vectors (n, d)."""
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, self.d)
        if np.any(np.abs(coords) >= self.Ny // 2):
            raise ValueError("frequency outside the representable band |p_i| < Ny/2")
        wrapped = np.mod(coords, self.Ny)
        return np.ravel_multi_index(tuple(wrapped.T), (self.Ny,) * self.d)

    def to_dict(self) -> dict:
        return {"d": self.d, "L": self.L, "Nx": self.Nx, "Ny": self.Ny, "dt": self.dt}


def _fft(u):
    """Coefficients c with u = sum c exp(i(xi x + p.y))."""
    return sfft.fftn(u, norm="forward", workers=_workers)


def _ifft(c):
    return sfft.ifftn(c, norm="forward", workers=_workers)


@dataclass(frozen=True)
class WaveField:
    """Complex samples on the periodized grid; the transform is computed once and cached."""

    disc: Discretization
    samples: np.ndarray = field(repr=False)

    def __post_init__(self):
        u = np.asarray(self.samples, dtype=complex)
        if u.shape != self.disc.shape:
            raise ValueError(f"samples have shape {u.shape}, expected {self.disc.shape}")
        object.__setattr__(self, "samples", u)

    @classmethod
    def zeros(cls, disc: Discretization) -> "WaveField":
        return cls(disc, np.zeros(disc.shape, dtype=complex))

    @classmethod
    def from_coefficients(cls, disc: Discretization, coeffs: np.ndarray) -> "WaveField":
        field_ = cls(disc, _ifft(coeffs))
        object.__setattr__(field_, "_coeffs", np.asarray(coeffs, dtype=complex).copy())
        return field_

    @classmethod
    def from_spectrum(cls, disc: Discretization, spectrum: np.ndarray) -> "WaveField":
        return cls.from_coefficients(disc, np.asarray(spectrum) / disc.spectral_scale)

    def coefficients(self) -> np.ndarray:
        cached = self.__dict__.get("_coeffs")
        if cached is None:
            cached = _fft(self.samples)
            object.__setattr__(self, "_coeffs", cached)
        return cached

    def spectrum(self) -> np.ndarray:
        """F_p(xi_j) in the continuum normalization."""
        return self.coefficients() * self.disc.spectral_scale

    def mass(self) -> float:
        return float(np.sum(np.abs(self.samples) ** 2) * self.disc.cell)

    def fourier_mass(self) -> float:
        return float(np.sum(np.abs(self.coefficients()) ** 2) * self.disc.volume)

    def boundary_fraction(self) -> float:
        """Share of the mass within the outer 10% of the x-period (5% at each end)."""
        total = np.sum(np.abs(self.samples) ** 2)
        if total == 0:
            return 0.0
        outer = np.abs(self.disc.x) >= (0.5 - BOUNDARY_FRACTION / 2) * self.disc.L
        return float(np.sum(np.abs(self.samples[outer]) ** 2) / total)

    def __add__(self, other: "WaveField") -> "WaveField":
        return WaveField(self.disc, self.samples + other.samples)

    def __sub__(self, other: "WaveField") -> "WaveField":
        return WaveField(self.disc, self.samples - other.samples)

    def scale(self, c: complex) -> "WaveField":
        return WaveField(self.disc, c * self.samples)

    def conj(self) -> "WaveField":
        return WaveField(self.disc, np.conj(self.samples))


def snapshot_bytes(u: WaveField, t: float = 0.0) -> bytes:
    """Versioned binary image of a field: header then little-endian complex128 samples."""
    disc = u.disc
    head = _SNAP_HEADER.pack(SNAPSHOT_MAGIC, SNAPSHOT_VERSION, disc.d, disc.Nx, disc.Ny, disc.L, t)
    return head + u.samples.astype("<c16").tobytes()


def snapshot_from_bytes(blob: bytes, dt: float = 5e-3) -> tuple[WaveField, float]:
    magic, version, d, Nx, Ny, L, t = _SNAP_HEADER.unpack_from(blob)
    if magic != SNAPSHOT_MAGIC:
        raise ValueError("not a field snapshot")
    if version != SNAPSHOT_VERSION:
        raise ValueError(f"unsupported snapshot version {version}")
    disc = Discretization(d, L, Nx, Ny, dt)
    data = np.frombuffer(blob, dtype="<c16", offset=_SNAP_HEADER.size)
    if data.size != disc.size:
        raise ValueError("truncated field snapshot")
    return WaveField(disc, data.reshape(disc.shape).astype(complex)), t


def linear_flow(u: WaveField, V: Potential, t: float) -> WaveField:
    """Exact propagator e^{itD}: multiply (xi_j, p) by exp(i t (-xi_j^2 + lambda_p))."""
    mult = np.exp(1j * t * u.disc.symbol(V))
    return WaveField.from_coefficients(u.disc, u.coefficients() * mult)


def _nonlinear_phase(u: np.ndarray, dt: float, coupling: float) -> np.ndarray:
    """u * exp(-i coupling dt |u|^2), assembled from real cos/sin for speed."""
    theta = u.real * u.real
    theta += u.imag * u.imag
    theta *= coupling * dt
    out = np.empty_like(u)
    out.real = np.cos(theta)
    out.imag = -np.sin(theta)
    out *= u
    return out


def step_strang(u: WaveField, V: Potential, dt: float, coupling: float = 1.0) -> WaveField:
    """Half linear step, exact pointwise nonlinear phase, half linear step."""
    half = linear_flow(u, V, dt / 2)
    mid = WaveField(u.disc, _nonlinear_phase(half.samples, dt, coupling))
    out = linear_flow(mid, V, dt / 2)
    if not np.all(np.isfinite(out.samples)):
        raise NumericalFailure("non-finite samples after a Strang step")
    return out


def energy(u: WaveField, V: Potential, coupling: float = 1.0) -> float:
    """int |grad U|^2 - sum_p v_p ||U_p||^2 + (coupling / 2) int |U|^4."""
    disc = u.disc
    c = u.coefficients()
    quad = np.sum(-disc.symbol(V) * np.abs(c) ** 2) * disc.volume
    quart = 0.5 * coupling * np.sum(np.abs(u.samples) ** 4) * disc.cell
    return float(quad + quart)


@dataclass
class WaveTrajectory:
    times: list[float] = field(default_factory=list)
    fields: list[WaveField] = field(default_factory=list)
    diagnostics: list[dict] = field(default_factory=list)
    truncated_at: float | None = None

    def field_at(self, t: float) -> WaveField:
        for ti, f in zip(self.times, self.fields):
            if math.isclose(ti, t, rel_tol=1e-12, abs_tol=1e-12):
                return f
        raise KeyError(t)


def diagnostics(u: WaveField, V: Potential, coupling: float, N: float = 8) -> dict:
    return {
        "mass": u.mass(),
        "energy": energy(u, V, coupling),
        "boundary_fraction": u.boundary_fraction(),
        "norm_HN": norm_HN(u, N),
        "norm_LinfH1": norm_LinfH1(u),
        "norm_Z": norm_Z(u),
    }


def _steps_to(t_from: float, t_to: float, dt: float) -> int:
    n = (t_to - t_from) / dt
    k = int(round(n))
    if k < 0 or abs(n - k) > 1e-6:
        raise ValueError(f"checkpoint interval [{t_from}, {t_to}] is not a multiple of dt={dt}")
    return k


def evolve(u0: WaveField, V: Potential, t_end: float, dt: float, coupling: float = 1.0,
           checkpoints=None, N: float = 8, energy_failsafe: float | None = None,
           mass_failsafe: float = 1e-3, t0: float = 0.0, keep_fields: bool = True) -> WaveTrajectory:
    """Repeated Strang steps from t0 to t_end with diagnostics at the checkpoints.

    Consecutive half linear steps are fused into one multiplier. With
    ``coupling == 0`` the flow is linear and each checkpoint is reached with
    a single exact propagator. Negative ``dt`` runs the flow backward.
    Raises NumericalFailure on non-finite samples or when the relative
    mass (or, if requested, energy) drift exceeds its failsafe.
    """
    if dt == 0:
        raise ValueError("dt must be non-zero")
    if not 0 <= coupling <= 1:
        raise ValueError("coupling must lie in [0, 1]")
    if checkpoints is None:
        checkpoints = [t_end]
    marks = sorted({float(t) for t in checkpoints if (t - t0) * dt >= 0} | {float(t0)},
                   reverse=dt < 0)
    disc = u0.disc
    symbol = disc.symbol(V)
    half = np.exp(0.5j * dt * symbol)
    full = half * half

    traj = WaveTrajectory()
    diag0 = diagnostics(u0, V, coupling, N)
    mass0, energy0 = diag0["mass"], diag0["energy"]

    def record(t, field_, diag):
        traj.times.append(t)
        traj.fields.append(field_ if keep_fields else None)
        traj.diagnostics.append(dict(t=t, **diag))
        if diag["boundary_fraction"] > BOUNDARY_WARN and traj.truncated_at is None:
            traj.truncated_at = t
            warnings.warn(f"boundary mass fraction {diag['boundary_fraction']:.3g} exceeds "
                          f"{BOUNDARY_WARN} at t={t}; the periodized domain no longer mimics the line",
                          RuntimeWarning, stacklevel=3)
        if not math.isfinite(diag["mass"]) or abs(diag["mass"] - mass0) > mass_failsafe * max(mass0, 1e-300):
            raise NumericalFailure(f"relative mass drift exceeded {mass_failsafe} at t={t}")
        if energy_failsafe is not None and abs(diag["energy"] - energy0) > energy_failsafe * max(abs(energy0), 1e-300):
            raise NumericalFailure(f"relative energy drift exceeded {energy_failsafe} at t={t}; "
                                   f"reduce the step size")

    record(t0, u0, diag0)
    c = u0.coefficients().copy()
    t_prev = t0
    for t_mark in marks[1:]:
        n = _steps_to(t_prev, t_mark, dt)
        if coupling == 0:
            c = c * np.exp(1j * (t_mark - t_prev) * symbol)
        elif n > 0:
            c = c * half
            for k in range(n):
                u = _nonlinear_phase(_ifft(c), dt, coupling)
                if not np.all(np.isfinite(u)):
                    raise NumericalFailure(f"non-finite samples near t={t_prev + k * dt}")
                c = _fft(u)
                c *= full if k < n - 1 else half
        field_ = WaveField.from_coefficients(disc, c)
        record(t_mark, field_, diagnostics(field_, V, coupling, N))
        t_prev = t_mark
    return traj


def nonlinear_form(F: WaveField, G: WaveField, H: WaveField, V: Potential, t: float) -> WaveField:
    """e^{-itD}( e^{itD}F * conj(e^{itD}G) * e^{itD}H )."""
    if not (F.disc == G.disc == H.disc):
        raise ValueError("fields must share one discretization")
    fF = linear_flow(F, V, t).samples
    fG = linear_flow(G, V, t).samples
    fH = linear_flow(H, V, t).samples
    return linear_flow(WaveField(F.disc, fF * np.conj(fG) * fH), V, -t)


def _ball_columns(disc: Discretization, index: QuadrupleIndex) -> np.ndarray:
    if index.d != disc.d:
        raise ValueError("index dimension does not match the discretization")
    return disc.grid_index(index.points)


def outside_ball_fraction(F: WaveField, index: QuadrupleIndex) -> float:
    """Largest |F_p(xi)| outside the index ball relative to the largest overall."""
    disc = F.disc
    flat = np.abs(F.coefficients().reshape(disc.Nx, -1))
    peak = flat.max()
    if peak == 0:
        return 0.0
    mask = np.ones(flat.shape[1], dtype=bool)
    mask[_ball_columns(disc, index)] = False
    return float(flat[:, mask].max() / peak) if mask.any() else 0.0


def restrict_to_ball(F: WaveField, index: QuadrupleIndex) -> np.ndarray:
    """Spectrum F_p(xi_j) at the ball points, shape (Nx, n_points)."""
    flat = F.spectrum().reshape(F.disc.Nx, -1)
    return flat[:, _ball_columns(F.disc, index)]


def field_from_ball(disc: Discretization, index: QuadrupleIndex, values: np.ndarray) -> WaveField:
    """Field whose spectrum equals ``values`` (Nx, n_points) on the ball and vanishes elsewhere."""
    spec = np.zeros((disc.Nx, disc.Ny ** disc.d), dtype=complex)
    spec[:, _ball_columns(disc, index)] = values
    return WaveField.from_spectrum(disc, spec.reshape(disc.shape))


def resonant_form(F: WaveField, G: WaveField, H: WaveField, index: QuadrupleIndex,
                  support_tol: float = 1e-10) -> WaveField:
    """Resonant trilinear sum applied at every xi_j, on the continuum-normalized spectra."""
    for X in (F, G, H):
        if outside_ball_fraction(X, index) > support_tol:
            raise ValueError("y-spectrum extends beyond the resonance index ball; increase P2")
    f, g, h = (restrict_to_ball(X, index).T for X in (F, G, H))
    out = resonant_sum(index, f, g, h)
    return field_from_ball(F.disc, index, out.T)


# norms


def norm_Z(F: WaveField) -> float:
    """sqrt of max_j (1+xi_j^2)^2 sum_p (1+|p|^2) |F_p(xi_j)|^2 (continuum-normalized spectrum)."""
    disc = F.disc
    w = (1.0 + disc.p_norm_sq) * np.abs(F.spectrum()) ** 2
    per_xi = np.sum(w.reshape(disc.Nx, -1), axis=1) * (1.0 + disc.xi ** 2) ** 2
    return float(np.sqrt(per_xi.max()))


def norm_HN(F: WaveField, N: float) -> float:
    """Isotropic Sobolev norm with multiplier (1 + xi^2 + |p|^2)^N."""
    disc = F.disc
    mult = (1.0 + disc.xi_grid ** 2 + disc.p_norm_sq) ** N
    return float(np.sqrt(np.sum(mult * np.abs(F.coefficients()) ** 2) * disc.volume))


def norm_xL2(F: WaveField) -> float:
    """||x F||_{L^2} with x the centered coordinate of the periodized line."""
    return float(np.sqrt(np.sum(np.abs(F.disc.x_grid * F.samples) ** 2) * F.disc.cell))


def norm_S(F: WaveField, N: float) -> float:
    return norm_HN(F, N) + norm_xL2(F)


def norm_Splus(F: WaveField, N: float) -> float:
    """||F||_S + ||(1 - d_xx)^4 F||_S + ||x F||_S."""
    disc = F.disc
    smooth = WaveField.from_coefficients(disc, (1.0 + disc.xi_grid ** 2) ** 4 * F.coefficients())
    xF = WaveField(disc, disc.x_grid * F.samples)
    return norm_S(F, N) + norm_S(smooth, N) + norm_S(xF, N)


def norm_LinfH1(U: WaveField) -> float:
    """max over x grid points of the H^1 norm in y."""
    disc = U.disc
    if disc.d == 0:
        return float(np.abs(U.samples).max())
    ycoef = sfft.fftn(U.samples, axes=tuple(range(1, disc.d + 1)), workers=_workers) / disc.Ny ** disc.d
    w = (1.0 + disc.p_norm_sq) * np.abs(ycoef) ** 2
    per_x = np.sum(w.reshape(disc.Nx, -1), axis=1) * (2 * math.pi) ** disc.d
    return float(np.sqrt(per_x.max()))
