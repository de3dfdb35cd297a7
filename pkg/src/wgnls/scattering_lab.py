"""Experiments confronting PDE trajectories with the predicted long-time behaviour.

The quantities tracked along a dyadic ladder t_k = t0 * 2^k are the decay
norm ||U(t)||_{L^inf_x H^1_y}, the Sobolev norm ||U(t)||_{H^N}, the distance
between the profile F(t) = e^{-itD} U(t) and a solution G of the resonant
system evaluated at the slow time tau = pi ln t, and the residual
t ||N^t[F] - (pi/t) R[F]||_Z for a frozen profile.
"""

from __future__ import annotations

import json
import math
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .lattice import Potential, sample_potential, zero_potential
from .outputs import RunManifest, unique_dir, write_csv, write_json
from .resonance import QuadrupleIndex, enumerate_gamma0, lattice_ball
from .resonant_flow import ProfileState, integrate_limit_system
from .waveguide import (Discretization, WaveField, WaveTrajectory, evolve, field_from_ball,
                        linear_flow, nonlinear_form, norm_HN, norm_Z, outside_ball_fraction,
                        resonant_form, restrict_to_ball)

DEFAULT_L = 256 * math.pi


@dataclass
class ExperimentPlan:
    """Grid, potential, initial data and checkpoint ladder of one experiment.

    ``potential`` is ``{"kind": "zero"}`` or ``{"kind": "seeded", "m", "R",
    "A", "seed"}``. ``initial`` describes U(0) before scaling by ``epsilon``:
    ``{"profile": "gaussian", "sigma", "x0", "xi0", "modes"}`` or
    ``{"profile": "bumps", "seed", "n_bumps", "modes"}`` where ``modes`` is a
    list of ``[coords, re, im]`` torus-mode amplitudes.
    """

    d: int = 1
    L: float = DEFAULT_L
    Nx: int = 4096
    Ny: int = 32
    dt: float = 5e-3
    coupling: float = 1.0
    epsilon: float = 0.05
    potential: dict = field(default_factory=lambda: {"kind": "seeded", "m": 2.0, "R": 1.0, "A": 5, "seed": 0})
    initial: dict = field(default_factory=lambda: {"profile": "gaussian", "sigma": 2.0, "x0": 0.0,
                                                   "xi0": 0.0, "modes": [[[0], 1.0, 0.0], [[1], 0.5, 0.0]]})
    t0: float = 8.0
    n_levels: int = 5
    T0: float = 16.0
    N: float = 8.0
    delta: float = 0.05
    P2: int = 2
    dtau: float = 0.05
    n_dense: int = 8
    support_tol: float = 1e-4

    def __post_init__(self):
        if self.t0 < 1:
            raise ValueError("t0 must be >= 1")
        if self.n_levels < 1:
            raise ValueError("n_levels must be >= 1")
        if not 0 < self.delta < 0.25:
            raise ValueError("delta must lie in (0, 1/4)")
        if not any(math.isclose(self.T0, t) for t in self.ladder()):
            raise ValueError(f"T0={self.T0} is not on the checkpoint ladder {self.ladder()}")
        if not 0 <= self.coupling <= 1:
            raise ValueError("coupling must lie in [0, 1]")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.N < 0:
            raise ValueError("N must be >= 0")
        if self.potential.get("kind") not in ("zero", "seeded"):
            raise ValueError("potential kind must be 'zero' or 'seeded'")
        if self.potential["kind"] == "seeded" and int(self.potential["A"]) > self.Ny // 2:
            raise ValueError(f"potential cutoff A={self.potential['A']} exceeds Ny/2={self.Ny // 2}")
        if self.initial.get("profile") not in ("gaussian", "bumps"):
            raise ValueError("initial profile must be 'gaussian' or 'bumps'")
        self.discretization()   # validates the grid

    def ladder(self) -> list[float]:
        return [self.t0 * 2.0 ** k for k in range(self.n_levels)]

    @property
    def t_max(self) -> float:
        return self.ladder()[-1]

    def dense_times(self) -> list[float]:
        """Extra samples over the second half of the window, on multiples of dt."""
        if self.n_dense <= 0:
            return []
        lo, hi = self.t_max / 2, self.t_max
        out = []
        for t in np.linspace(lo, hi, self.n_dense + 1):
            out.append(round(t / self.dt) * self.dt)
        return out

    def discretization(self) -> Discretization:
        return Discretization(self.d, self.L, self.Nx, self.Ny, self.dt)

    def build_potential(self) -> Potential:
        pot = self.potential
        if pot["kind"] == "zero":
            return zero_potential(self.d)
        return sample_potential(self.d, float(pot["m"]), float(pot["R"]), int(pot["A"]), int(pot["seed"]))

    def with_zero_potential(self) -> "ExperimentPlan":
        return ExperimentPlan(**{**asdict(self), "potential": {"kind": "zero"}})

    def replace(self, **changes) -> "ExperimentPlan":
        return ExperimentPlan(**{**asdict(self), **changes})

    def index(self) -> QuadrupleIndex:
        return enumerate_gamma0(self.P2, self.d)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentPlan":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise KeyError(f"unknown plan keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentPlan":
        return cls.from_dict(json.loads(text))


def _mode_sum(disc: Discretization, modes, xprofile) -> np.ndarray:
    u = np.zeros(disc.shape, dtype=complex)
    ygrids = np.meshgrid(*([disc.y] * disc.d), indexing="ij")
    for k, (coords, re, im) in enumerate(modes):
        coords = [int(c) for c in coords]
        if len(coords) != disc.d:
            raise ValueError(f"mode {coords} does not have dimension {disc.d}")
        phase = np.exp(1j * sum(c * g for c, g in zip(coords, ygrids)))
        xp = xprofile(k)
        u += complex(re, im) * xp.reshape((-1,) + (1,) * disc.d) * phase[None, ...]
    return u


def initial_field(plan: ExperimentPlan) -> WaveField:
    """U(0) = epsilon * sum_p a_p g_p(x) e^{i p.y}."""
    disc = plan.discretization()
    init = plan.initial
    x = disc.x
    if init["profile"] == "gaussian":
        sigma = float(init.get("sigma", 2.0))
        x0 = float(init.get("x0", 0.0))
        xi0 = float(init.get("xi0", 0.0))
        g = np.exp(-(x - x0) ** 2 / (2 * sigma ** 2)) * np.exp(1j * xi0 * x)
        u = _mode_sum(disc, init["modes"], lambda k: g)
    else:
        u = _mode_sum(disc, init["modes"], lambda k: seeded_bumps(x, int(init["seed"]) + k,
                                                                   int(init.get("n_bumps", 3))))
    return WaveField(disc, plan.epsilon * u)


def seeded_bumps(x: np.ndarray, seed: int, n_bumps: int = 3) -> np.ndarray:
    """Smooth localized seeded x-profile: a sum of modulated Gaussians."""
    rng = np.random.default_rng(seed)
    out = np.zeros_like(x, dtype=complex)
    for _ in range(n_bumps):
        amp = complex(rng.standard_normal(), rng.standard_normal()) / math.sqrt(2 * n_bumps)
        centre = rng.uniform(-4.0, 4.0)
        width = rng.uniform(1.5, 3.0)
        freq = rng.uniform(-0.5, 0.5)
        out += amp * np.exp(-(x - centre) ** 2 / (2 * width ** 2)) * np.exp(1j * freq * x)
    return out


@dataclass
class ComparisonSeries:
    """Per-checkpoint values; entries that an experiment does not compute stay None."""

    t: list[float] = field(default_factory=list)
    decay: list[float | None] = field(default_factory=list)
    norm_HN: list[float | None] = field(default_factory=list)
    profile_diff: list[float | None] = field(default_factory=list)
    profile_step: list[float | None] = field(default_factory=list)
    residual: list[float | None] = field(default_factory=list)
    boundary_fraction: list[float | None] = field(default_factory=list)
    truncated_at: float | None = None
    summary: dict = field(default_factory=dict)

    COLUMNS = ("t", "tau", "decay", "norm_HN", "profile_diff", "profile_step", "residual",
               "boundary_fraction")

    def append(self, t, **values):
        if self.t and t <= self.t[-1]:
            raise ValueError("checkpoints must be strictly increasing")
        for k, v in values.items():
            if v is not None and v < 0:
                raise ValueError(f"{k} must be non-negative")
        self.t.append(float(t))
        for name in self.COLUMNS[2:]:
            getattr(self, name).append(values.get(name))

    @property
    def tau(self) -> list[float]:
        """Slow times pi ln t_k."""
        return [math.pi * math.log(t) for t in self.t]

    def rows(self):
        for k, t in enumerate(self.t):
            yield [t, math.pi * math.log(t)] + [getattr(self, c)[k] for c in self.COLUMNS[2:]]

    def write_csv(self, path) -> Path:
        return write_csv(path, self.COLUMNS, self.rows())


def simulate(plan: ExperimentPlan, extra_times=()) -> WaveTrajectory:
    """Evolve U(0) to t_max recording the ladder, the dense window samples and ``extra_times``."""
    u0 = initial_field(plan)
    marks = sorted(set(plan.ladder()) | set(plan.dense_times()) | {float(t) for t in extra_times})
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return evolve(u0, plan.build_potential(), plan.t_max, plan.dt, plan.coupling,
                      checkpoints=marks, N=plan.N)


def _trusted(traj: WaveTrajectory, t: float) -> bool:
    return traj.truncated_at is None or t < traj.truncated_at


def fit_loglog_slope(t, values) -> float | None:
    """Least-squares slope of log(values) against log(t); None without two positive points."""
    t = np.asarray(t, dtype=float)
    v = np.asarray(values, dtype=float)
    ok = v > 0
    if ok.sum() < 2:
        return None
    slope, _ = np.polyfit(np.log(t[ok]), np.log(v[ok]), 1)
    return float(slope)


def run_decay(plan: ExperimentPlan, trajectory: WaveTrajectory | None = None) -> tuple[ComparisonSeries, float | None]:
    """L^inf_x H^1_y ladder and its log-log slope over the trusted part of the ladder."""
    traj = trajectory if trajectory is not None else simulate(plan)
    series = ComparisonSeries(truncated_at=traj.truncated_at)
    fit_t, fit_v = [], []
    for t in plan.ladder():
        diag = _diag_at(traj, t)
        series.append(t, decay=diag["norm_LinfH1"], norm_HN=diag["norm_HN"],
                      boundary_fraction=diag["boundary_fraction"])
        if _trusted(traj, t):
            fit_t.append(t)
            fit_v.append(diag["norm_LinfH1"])
    slope = fit_loglog_slope(fit_t, fit_v)
    series.summary = {"slope": slope, "fit_window": [fit_t[0], fit_t[-1]] if fit_t else None,
                      "truncated_at": traj.truncated_at}
    return series, slope


def _diag_at(traj: WaveTrajectory, t: float) -> dict:
    for d in traj.diagnostics:
        if math.isclose(d["t"], t, rel_tol=1e-12, abs_tol=1e-12):
            return d
    raise KeyError(f"no checkpoint at t={t}")


def run_norm_constancy(plan: ExperimentPlan, trajectory: WaveTrajectory | None = None) -> ComparisonSeries:
    """H^N at every recorded time; summary holds the relative spread over [t_max/2, t_max]."""
    traj = trajectory if trajectory is not None else simulate(plan)
    series = ComparisonSeries(truncated_at=traj.truncated_at)
    for d in traj.diagnostics:
        if d["t"] > 0:
            series.append(d["t"], decay=d["norm_LinfH1"], norm_HN=d["norm_HN"],
                          boundary_fraction=d["boundary_fraction"])
    window = [(t, h) for t, h in zip(series.t, series.norm_HN)
              if t >= plan.t_max / 2 and _trusted(traj, t)]
    if window and max(h for _, h in window) > 0:
        hs = np.array([h for _, h in window])
        deviation = float((hs.max() - hs.min()) / hs.min())
    else:
        deviation = 0.0 if window else None
    series.summary = {"max_relative_deviation": deviation,
                      "window": [window[0][0], window[-1][0]] if window else None,
                      "truncated_at": traj.truncated_at}
    return series


# profiles and the slow-time comparison


def _sorted_xi(disc: Discretization) -> np.ndarray:
    return np.argsort(disc.xi, kind="stable")


def profile_of(F: WaveField, index: QuadrupleIndex, support_tol: float | None = None) -> ProfileState:
    """Restriction of the continuum spectrum of F to the index ball, on the sorted xi grid."""
    if support_tol is not None:
        frac = outside_ball_fraction(F, index)
        if frac > support_tol:
            raise ValueError(f"y-spectrum outside the index ball reaches {frac:.3g} of the peak "
                             f"(tolerance {support_tol}); increase P2")
    order = _sorted_xi(F.disc)
    vals = restrict_to_ball(F, index)[order]
    return ProfileState(index.P2, index.d, F.disc.xi[order], vals)


def field_of(profile: ProfileState, disc: Discretization, index: QuadrupleIndex) -> WaveField:
    order = _sorted_xi(disc)
    if not np.array_equal(profile.xi, disc.xi[order]):
        raise ValueError("profile xi grid does not match the discretization")
    vals = np.empty_like(profile.amplitudes)
    vals[order] = profile.amplitudes
    return field_from_ball(disc, index, vals)


def advance_profile(G: ProfileState, tau_from: float, tau_to: float, dtau: float,
                    index: QuadrupleIndex) -> ProfileState:
    if tau_to == tau_from:
        return G
    traj = integrate_limit_system(G, tau_to - tau_from, dtau, index, checkpoint_every=10 ** 9,
                                  tau0=tau_from, record_conserved=False)
    return traj.final


def pull_back(U: WaveField, V: Potential, t: float) -> WaveField:
    """Profile F(t) = e^{-itD} U(t)."""
    return linear_flow(U, V, -t)


def _profile_ladder(plan, traj_fields, G_start, tau_start, index, V, disc, times):
    """Distances ||F(t_k) - G(pi ln t_k)||_{H^N} along ``times``, plus one-octave re-seeded steps."""
    diffs, steps = [], []
    G, tau = G_start, tau_start
    prev_F = None
    for t in times:
        tau_k = math.pi * math.log(t)
        G = advance_profile(G, tau, tau_k, plan.dtau, index)
        tau = tau_k
        F = pull_back(traj_fields[t], V, t)
        diffs.append(norm_HN(F - field_of(G, disc, index), plan.N))
        if prev_F is None:
            steps.append(None)
        else:
            t_prev, F_prev = prev_F
            G_loc = advance_profile(profile_of(F_prev, index), math.pi * math.log(t_prev), tau_k,
                                    plan.dtau, index)
            steps.append(norm_HN(F - field_of(G_loc, disc, index), plan.N))
        prev_F = (t, F)
    return diffs, steps


def match_profile(plan: ExperimentPlan, trajectory: WaveTrajectory | None = None) -> ComparisonSeries:
    """Seed G at tau0 = pi ln T0 from F(T0) and compare along the ladder t_k >= T0.

    ``profile_diff`` is the distance to the single G seeded at T0;
    ``profile_step`` re-seeds G from F(t_{k-1}) and measures the mismatch
    accumulated over one octave.
    """
    traj = trajectory if trajectory is not None else simulate(plan)
    disc = plan.discretization()
    V = plan.build_potential()
    index = plan.index()
    times = [t for t in plan.ladder() if t >= plan.T0 - 1e-12]
    fields = {t: traj.field_at(t) for t in times}
    F0 = pull_back(fields[times[0]], V, times[0])
    G0 = profile_of(F0, index, plan.support_tol)
    diffs, steps = _profile_ladder(plan, fields, G0, math.pi * math.log(times[0]), index, V, disc, times)
    series = ComparisonSeries(truncated_at=traj.truncated_at)
    for t, dv, sv in zip(times, diffs, steps):
        diag = _diag_at(traj, t)
        series.append(t, decay=diag["norm_LinfH1"], norm_HN=diag["norm_HN"], profile_diff=dv,
                      profile_step=sv, boundary_fraction=diag["boundary_fraction"])
    series.summary = {"T0": times[0], "seed_out_of_ball": outside_ball_fraction(F0, index),
                      "truncated_at": traj.truncated_at}
    return series


def build_wave_operator(G0: ProfileState, plan: ExperimentPlan) -> ComparisonSeries:
    """Start the PDE at T0 from e^{iT0 D} G(pi ln T0) and compare along the ladder t_k >= T0.

    ``G0`` is the resonant-system datum at tau = 0 (t = 1) on the sorted xi
    grid of the plan's discretization.
    """
    disc = plan.discretization()
    V = plan.build_potential()
    index = plan.index()
    if (G0.P2, G0.d) != (index.P2, index.d):
        raise ValueError("G0 ball does not match the plan's index ball")
    times = [t for t in plan.ladder() if t >= plan.T0 - 1e-12]
    T0 = times[0]
    tau0 = math.pi * math.log(T0)
    G_T0 = advance_profile(G0, 0.0, tau0, plan.dtau, index)
    U_T0 = linear_flow(field_of(G_T0, disc, index), V, T0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        traj = evolve(U_T0, V, times[-1], plan.dt, plan.coupling, checkpoints=times, N=plan.N, t0=T0)
    fields = {t: traj.field_at(t) for t in times}
    diffs, steps = _profile_ladder(plan, fields, G_T0, tau0, index, V, disc, times)
    series = ComparisonSeries(truncated_at=traj.truncated_at)
    for t, dv, sv in zip(times, diffs, steps):
        diag = _diag_at(traj, t)
        series.append(t, decay=diag["norm_LinfH1"], norm_HN=diag["norm_HN"], profile_diff=dv,
                      profile_step=sv, boundary_fraction=diag["boundary_fraction"])
    series.summary = {"T0": T0, "truncated_at": traj.truncated_at}
    return series


def single_mode_profile_difference(G: ProfileState, disc: Discretization, index: QuadrupleIndex,
                                   p, dtau: float, N: float) -> float:
    """Closed-form ||G(tau) - G(tau + dtau)||_{H^N} for data on one torus mode p.

    Each xi column rotates by exp(-i |G_p(xi)|^2 dtau), independently.
    """
    ball = lattice_ball(index.P2, index.d)
    k = ball.index_of(p)
    order = _sorted_xi(disc)
    amps = G.amplitudes[:, k]
    change = np.abs(amps) * np.abs(1 - np.exp(-1j * np.abs(amps) ** 2 * dtau))
    coeff = change / disc.spectral_scale
    pn = float(ball.norms[k])
    mult = (1.0 + disc.xi[order] ** 2 + pn) ** N
    return float(np.sqrt(np.sum(mult * coeff ** 2) * disc.volume))


# residual of the effective nonlinearity


def residual_study(F: WaveField, times, V: Potential, index: QuadrupleIndex, delta: float = 0.05) -> list[dict]:
    """r(t) = t ||N^t[F,F,F] - (pi/t) R[F,F,F]||_Z for a frozen profile F."""
    times = [float(t) for t in times]
    if any(t < 1 for t in times) or any(b <= a for a, b in zip(times, times[1:])):
        raise ValueError("times must be increasing and >= 1")
    R = resonant_form(F, F, F, index)
    out = []
    for t in times:
        Nt = nonlinear_form(F, F, F, V, t)
        r = t * norm_Z(Nt - R.scale(math.pi / t))
        out.append({"t": t, "r": r, "r_weighted": r * t ** delta})
    return out


def single_mode_residual(disc: Discretization, c: complex, j: int, p, t: float) -> float:
    """Exact r(t) for F = c exp(i(xi_j x + p.y)) (c is the discrete coefficient).

    N^t keeps the plane wave and returns |c|^2 c. R acts on the continuum
    spectrum s c with s = L / 2 pi, returning s^3 |c|^2 c, i.e. the
    coefficient s^2 |c|^2 c. The Z weight evaluates the spectrum s * coefficient.
    """
    s = disc.spectral_scale
    xi = disc.xi[j]
    pn = float(sum(int(a) ** 2 for a in p))
    return t * s * abs(c) ** 3 * abs(1.0 - math.pi * s * s / t) * (1.0 + xi ** 2) * math.sqrt(1.0 + pn)


def residual_profile(disc: Discretization, p, seed: int, amplitude: float = 1.0) -> WaveField:
    """Seeded smooth profile on a single torus mode p."""
    return WaveField(disc, _mode_sum(disc, [[list(p), amplitude, 0.0]], lambda k: seeded_bumps(disc.x, seed)))


# persistence


def save_run(outdir, plan: ExperimentPlan, series: ComparisonSeries, command: str,
             wall_time: float | None = None) -> Path:
    """Write plan.json, series.csv and manifest.json into a fresh directory."""
    out = unique_dir(outdir)
    man = RunManifest(command, plan.to_dict(), out)
    man.add_output(write_json(out / "plan.json", plan.to_dict()))
    man.add_output(series.write_csv(out / "series.csv"))
    man.extra = {"seeds": {"potential": plan.potential.get("seed"), "initial": plan.initial.get("seed")},
                 "grid": plan.discretization().to_dict(), "wall_time": wall_time,
                 "summary": series.summary}
    man.finish("ok")
    return out


def timed(fn, *args, **kwargs):
    t0 = time.perf_counter()
    res = fn(*args, **kwargs)
    return res, time.perf_counter() - t0
