"""Command line entry point: ``wgnls <subcommand> [--config FILE] [flags]``.

Every subcommand reads its parameters from an optional JSON config file and
from flags (flags win), validates all of them before any computation, and
writes into a fresh output directory with a ``manifest.json``.

Exit codes: 0 success, 1 numerical failsafe, 2 configuration error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import waveguide
from .errors import NumericalFailure
from .lattice import sample_potential, zero_potential
from .outputs import RunManifest, unique_dir, write_csv, write_json
from .resonance import enumerate_gamma0, lattice_ball
from .resonant_flow import ProfileState, integrate_limit_system, integrate_resonant, random_state
from .smalldiv import audit, genericity_study

log = logging.getLogger("wgnls")

EXIT_OK, EXIT_NUMERICAL, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3
REQUIRED = object()


class ConfigError(ValueError):
    """Invalid or unknown configuration key; maps to exit code 2."""


@dataclass(frozen=True)
class Param:
    kind: str                     # "int", "float", "str", "bool", "json"
    default: Any = REQUIRED
    check: Callable[[Any], bool] | None = None
    rule: str = ""
    help: str = ""


def _between(lo, hi):
    return lambda v: lo <= v <= hi


def _positive(v):
    return v > 0


def _nonneg(v):
    return v >= 0


def _pow2(v):
    return v > 0 and v & (v - 1) == 0


COMMON = {
    "seed": Param("int", 0, _nonneg, ">= 0", "master seed"),
    "out": Param("str", None, None, "", "output directory (default runs/<subcommand>)"),
    "threads": Param("int", 1, _positive, ">= 1", "worker threads; results do not depend on it"),
}

_POTENTIAL = {
    "potential": Param("str", "seeded", lambda v: v in ("seeded", "zero"), "'seeded' or 'zero'"),
    "m": Param("float", 2.0, None, "", "decay exponent of the potential envelope"),
    "R": Param("float", 1.0, _nonneg, ">= 0", "envelope amplitude"),
    "A": Param("int", 5, _nonneg, ">= 0", "box cutoff of the potential"),
}

_GRID = {
    "d": Param("int", 1, _between(1, 4), "in [1, 4]"),
    "L": Param("float", 256 * math.pi, _positive, "> 0"),
    "Nx": Param("int", 4096, _pow2, "a power of two"),
    "Ny": Param("int", 32, _pow2, "a power of two"),
}

_PLAN = {
    **_GRID,
    "dt": Param("float", 5e-3, _positive, "> 0"),
    "coupling": Param("float", 1.0, _between(0, 1), "in [0, 1]"),
    "epsilon": Param("float", 0.05, _nonneg, ">= 0"),
    "potential": Param("json", None, lambda v: v is None or isinstance(v, dict), "a JSON object"),
    "initial": Param("json", None, lambda v: v is None or isinstance(v, dict), "a JSON object"),
    "t0": Param("float", 8.0, lambda v: v >= 1, ">= 1"),
    "n_levels": Param("int", 5, _positive, ">= 1"),
    "T0": Param("float", 16.0, lambda v: v >= 1, ">= 1"),
    "N": Param("float", 8.0, _nonneg, ">= 0"),
    "delta": Param("float", 0.05, lambda v: 0 < v < 0.25, "in (0, 1/4)"),
    "P2": Param("int", 2, _nonneg, ">= 0"),
    "dtau": Param("float", 0.05, _positive, "> 0"),
    "n_dense": Param("int", 8, _nonneg, ">= 0"),
    "support_tol": Param("float", 1e-4, _nonneg, ">= 0"),
}

SCHEMAS: dict[str, dict[str, Param]] = {
    "enumerate": {
        "d": Param("int", REQUIRED, _between(1, 4), "in [1, 4]"),
        "P2": Param("int", REQUIRED, _nonneg, ">= 0"),
    },
    "audit": {
        "d": Param("int", REQUIRED, _between(1, 4), "in [1, 4]"),
        "P2": Param("int", REQUIRED, _nonneg, ">= 0"),
        "gamma": Param("float", None, lambda v: v is None or v > 0, "> 0", "default d + 2"),
        "n_worst": Param("int", 10, _nonneg, ">= 0"),
        **_POTENTIAL,
    },
    "genericity": {
        "d": Param("int", 2, _between(1, 4), "in [1, 4]"),
        "P2": Param("int", 25, _nonneg, ">= 0"),
        "gamma": Param("float", 2.0, _positive, "> 0"),
        "c": Param("float", 1e-6, _positive, "> 0"),
        "samples": Param("int", 100, _positive, ">= 1"),
        "m": Param("float", 2.0, None, ""),
        "R": Param("float", 1.0, _nonneg, ">= 0"),
        "A": Param("int", 5, _nonneg, ">= 0"),
    },
    "resonant-run": {
        "d": Param("int", 2, _between(1, 4), "in [1, 4]"),
        "P2": Param("int", 10, _nonneg, ">= 0"),
        "t_end": Param("float", 10.0, _positive, "> 0"),
        "dt": Param("float", 1e-3, _positive, "> 0"),
        "decay": Param("float", 1.0, _nonneg, ">= 0"),
        "mass": Param("float", 1.0, _positive, "> 0"),
    },
    "limit-run": {
        "d": Param("int", 2, _between(1, 4), "in [1, 4]"),
        "P2": Param("int", 5, _nonneg, ">= 0"),
        "n_xi": Param("int", 8, _positive, ">= 1"),
        "xi_max": Param("float", 2.0, _positive, "> 0"),
        "tau_end": Param("float", 5.0, _positive, "> 0"),
        "dtau": Param("float", 1e-3, _positive, "> 0"),
        "N": Param("float", 8.0, _nonneg, ">= 0"),
        "mass": Param("float", 1.0, _positive, "> 0"),
    },
    "nls-run": {
        **{k: _PLAN[k] for k in ("d", "L", "Nx", "Ny", "dt", "coupling", "epsilon", "potential",
                                  "initial", "N")},
        "t_end": Param("float", 16.0, _positive, "> 0"),
        "n_checkpoints": Param("int", 16, _positive, ">= 1"),
        "energy_failsafe": Param("float", 0.05, _positive, "> 0"),
        "snapshots": Param("bool", False),
    },
    "match": dict(_PLAN),
    "wave-op": dict(_PLAN),
    "residual": {
        **_GRID,
        "P2": Param("int", 4, _nonneg, ">= 0"),
        "mode": Param("json", None, lambda v: v is None or isinstance(v, list), "a JSON list"),
        "amplitude": Param("float", 1.0, _nonneg, ">= 0"),
        "times": Param("json", [16, 32, 64, 128], lambda v: isinstance(v, list) and len(v) > 0,
                       "a non-empty JSON list"),
        "delta": Param("float", 0.05, lambda v: 0 < v < 0.25, "in (0, 1/4)"),
        **{k: _POTENTIAL[k] for k in ("potential", "m", "R", "A")},
    },
}


@dataclass
class RunConfig:
    command: str
    params: dict
    seed: int
    out: Path
    threads: int = 1
    config_file: Path | None = None

    def echo(self) -> dict:
        return {"command": self.command, "params": self.params, "seed": self.seed,
                "out": str(self.out), "threads": self.threads,
                "config_file": None if self.config_file is None else str(self.config_file)}


def _coerce(kind: str, key: str, value):
    try:
        if value is None:
            return None
        if kind == "int":
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise TypeError
            return int(value)
        if kind == "float":
            if isinstance(value, bool):
                raise TypeError
            return float(value)
        if kind == "str":
            return str(value)
        if kind == "bool":
            if isinstance(value, bool):
                return value
            raise TypeError
        if kind == "json":
            return json.loads(value) if isinstance(value, str) else value
    except (TypeError, ValueError):
        pass
    raise ConfigError(f"{key}: cannot interpret {value!r} as {kind}")


def _add_flag(parser: argparse.ArgumentParser, key: str, p: Param):
    flag = "--" + key
    help_ = p.help or (f"({p.rule})" if p.rule else None)
    if p.kind == "bool":
        parser.add_argument(flag, dest=key, action=argparse.BooleanOptionalAction, default=None, help=help_)
    else:
        parser.add_argument(flag, dest=key, default=None, metavar=key.upper() if p.kind != "json" else "JSON",
                            help=help_)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wgnls", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, schema in SCHEMAS.items():
        sp = sub.add_parser(name)
        sp.add_argument("--config", dest="config", default=None, help="JSON config file")
        for key, p in {**schema, **COMMON}.items():
            _add_flag(sp, key, p)
    return parser


def parse_config(argv=None) -> RunConfig:
    """Merge defaults, the config file and flags (in that order of precedence) and validate."""
    args = build_parser().parse_args(argv)
    command = args.command
    schema = {**SCHEMAS[command], **COMMON}

    file_values: dict = {}
    config_file = None
    if args.config is not None:
        config_file = Path(args.config)
        try:
            file_values = json.loads(config_file.read_text())
        except OSError as exc:
            raise ConfigError(f"config: cannot read {config_file}: {exc.strerror}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config: {config_file} is not valid JSON ({exc.msg})") from exc
        if not isinstance(file_values, dict):
            raise ConfigError("config: top level must be a JSON object")
        file_values.pop("command", None)
        for key in file_values:
            if key not in schema:
                raise ConfigError(f"{key}: unknown key for '{command}'")

    merged = {}
    for key, p in schema.items():
        value = getattr(args, key)
        if value is None:
            value = file_values.get(key, p.default)
        if value is REQUIRED:
            raise ConfigError(f"{key}: required for '{command}'")
        value = _coerce(p.kind, key, value)
        if p.check is not None and value is not None and not p.check(value):
            raise ConfigError(f"{key}: {value!r} out of range ({p.rule})")
        merged[key] = value

    seed = merged.pop("seed")
    out = merged.pop("out") or f"runs/{command}"
    threads = merged.pop("threads")
    cfg = RunConfig(command, merged, seed, Path(out), threads, config_file)
    _cross_check(cfg)
    return cfg


def _cross_check(cfg: RunConfig):
    """Constraints that involve several keys, checked before any compute starts."""
    p = cfg.params
    try:
        if cfg.command in ("audit", "genericity", "residual") and p.get("potential", "seeded") == "seeded":
            sample_potential(p["d"], p["m"], p["R"], p["A"], 0)
        if cfg.command in ("match", "wave-op"):
            _plan_from(cfg)
        if cfg.command == "nls-run":
            _plan_from(cfg, for_run=True)
        if cfg.command == "residual":
            waveguide.Discretization(p["d"], p["L"], p["Nx"], p["Ny"])
            if p["potential"] == "seeded" and p["A"] > p["Ny"] // 2:
                raise ValueError(f"potential cutoff A={p['A']} exceeds Ny/2={p['Ny'] // 2}")
            mode = p["mode"] if p["mode"] is not None else [0] * p["d"]
            if len(mode) != p["d"]:
                raise ValueError(f"mode must have {p['d']} entries")
            if any(b <= a for a, b in zip(p["times"], p["times"][1:])) or min(p["times"]) < 1:
                raise ValueError("times must be increasing and >= 1")
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def _plan_from(cfg: RunConfig, for_run: bool = False):
    from .scattering_lab import ExperimentPlan

    p = dict(cfg.params)
    if p.get("potential") is None:
        p["potential"] = {"kind": "seeded", "m": 2.0, "R": 1.0, "A": 5, "seed": cfg.seed}
    if p.get("initial") is None:
        d = p["d"]
        p["initial"] = {"profile": "gaussian", "sigma": 2.0, "x0": 0.0, "xi0": 0.0,
                        "modes": [[[0] * d, 1.0, 0.0], [[1] + [0] * (d - 1), 0.5, 0.0]]}
    if for_run:
        keep = {k: p[k] for k in ("d", "L", "Nx", "Ny", "dt", "coupling", "epsilon", "potential",
                                  "initial", "N")}
        return ExperimentPlan(**keep, n_dense=0)
    return ExperimentPlan(**p)


# handlers: each returns an optional summary dict and registers outputs on the manifest


def _potential(cfg: RunConfig):
    p = cfg.params
    if p["potential"] == "zero":
        return zero_potential(p["d"])
    return sample_potential(p["d"], p["m"], p["R"], p["A"], cfg.seed)


def _run_enumerate(cfg, out, man):
    p = cfg.params
    index = enumerate_gamma0(p["P2"], p["d"])
    with open(out / "gamma0.csv", "w", newline="", encoding="utf-8") as fh:
        index.write_csv(fh)
    man.add_output(out / "gamma0.csv")
    index.save(out / "gamma0.wgqi")
    man.add_output(out / "gamma0.wgqi")
    return {"count": len(index), "n_points": index.n_points}


def _run_audit(cfg, out, man):
    p = cfg.params
    V = _potential(cfg)
    gamma = p["gamma"] if p["gamma"] is not None else p["d"] + 2.0
    rep = audit(V, p["P2"], gamma, n_worst=p["n_worst"])
    body = rep.to_dict()
    body["potential"] = json.loads(V.to_json())
    man.add_output(write_json(out / "report.json", body))
    return {"min_weighted_divisor": rep.min_weighted_divisor, "n_scanned": rep.n_scanned}


def _run_genericity(cfg, out, man):
    p = cfg.params
    res = genericity_study(p["d"], p["m"], p["R"], p["A"], p["P2"], p["gamma"], p["c"],
                           p["samples"], cfg.seed, workers=cfg.threads)
    samples = res.pop("samples")
    man.add_output(write_json(out / "genericity.json", res))
    man.add_output(write_csv(out / "samples.csv", ["sample_seed", "min_weighted_divisor"],
                             ([s["seed"], s["min_weighted_divisor"]] for s in samples)))
    return {"fraction": res["fraction"], "wilson95": res["wilson95"]}


def _run_resonant(cfg, out, man):
    p = cfg.params
    index = enumerate_gamma0(p["P2"], p["d"])
    a0 = random_state(p["P2"], p["d"], cfg.seed, decay=p["decay"], mass=p["mass"])
    traj = integrate_resonant(a0, p["t_end"], p["dt"], index)
    with open(out / "conserved.csv", "w", newline="", encoding="utf-8") as fh:
        traj.write_csv(fh)
    man.add_output(out / "conserved.csv")
    pts = lattice_ball(p["P2"], p["d"]).points
    fin = traj.final.amplitudes
    man.add_output(write_csv(out / "final_state.csv", ["p", "re", "im"],
                             ([" ".join(str(int(c)) for c in pt), float(z.real), float(z.imag)]
                              for pt, z in zip(pts, fin))))
    return {"max_relative_drift": traj.max_relative_drift()}


def seeded_profile(P2: int, d: int, n_xi: int, xi_max: float, seed: int, mass: float = 1.0) -> ProfileState:
    """Independent seeded lattice states at n_xi points of [-xi_max, xi_max], with a Gaussian envelope in xi."""
    xi = np.linspace(-xi_max, xi_max, n_xi) if n_xi > 1 else np.zeros(1)
    seeds = np.random.SeedSequence(seed).spawn(n_xi)
    rows = [random_state(P2, d, int(s.generate_state(1)[0]), mass=mass).amplitudes * math.exp(-x * x / 2)
            for s, x in zip(seeds, xi)]
    return ProfileState(P2, d, xi, np.array(rows))


def _run_limit(cfg, out, man):
    p = cfg.params
    index = enumerate_gamma0(p["P2"], p["d"])
    G0 = seeded_profile(p["P2"], p["d"], p["n_xi"], p["xi_max"], cfg.seed, p["mass"])
    traj = integrate_limit_system(G0, p["tau_end"], p["dtau"], index)
    rows = [[tau, G.z_norm(), G.hn_norm(p["N"])] for tau, G in zip(traj.taus, traj.states)]
    man.add_output(write_csv(out / "functionals.csv", ["tau", "Z", "HN"], rows))
    z0, h0 = rows[0][1], rows[0][2]
    return {"Z_drift": max(abs(r[1] - z0) for r in rows) / z0,
            "HN_drift": max(abs(r[2] - h0) for r in rows) / h0}


def _run_nls(cfg, out, man):
    from .scattering_lab import initial_field

    p = cfg.params
    plan = _plan_from(cfg, for_run=True)
    u0 = initial_field(plan)
    V = plan.build_potential()
    n = p["n_checkpoints"]
    n_steps = max(1, int(round(p["t_end"] / p["dt"])))
    marks = sorted({round(n_steps * k / n) * p["dt"] for k in range(1, n + 1)})
    traj = waveguide.evolve(u0, V, marks[-1], p["dt"], p["coupling"], checkpoints=marks, N=p["N"],
                            energy_failsafe=p["energy_failsafe"], keep_fields=p["snapshots"])
    cols = ["t", "mass", "energy", "boundary_fraction", "norm_HN", "norm_LinfH1", "norm_Z"]
    man.add_output(write_csv(out / "diagnostics.csv", cols,
                             ([d[c] for c in cols] for d in traj.diagnostics)))
    if p["snapshots"]:
        snap_dir = out / "snapshots"
        snap_dir.mkdir()
        for k, (t, f) in enumerate(zip(traj.times, traj.fields)):
            path = snap_dir / f"field_{k:04d}.wgwf"
            path.write_bytes(waveguide.snapshot_bytes(f, t))
            man.outputs[f"snapshots/{path.name}"] = _digest(path)
    return {"truncated_at": traj.truncated_at, "t_end": marks[-1]}


def _digest(path):
    from .outputs import sha256
    return sha256(path)


def _run_plan(cfg, out, man, kind):
    from . import scattering_lab as lab

    plan = _plan_from(cfg)
    man.add_output(write_json(out / "plan.json", plan.to_dict()))
    t0 = time.perf_counter()
    if kind == "match":
        series = lab.match_profile(plan)
    else:
        G0 = lab.profile_of(lab.initial_field(plan), plan.index(), plan.support_tol)
        series = lab.build_wave_operator(G0, plan)
    man.add_output(series.write_csv(out / "series.csv"))
    man.extra["wall_time"] = time.perf_counter() - t0
    man.extra["grid"] = plan.discretization().to_dict()
    return series.summary


def _run_residual(cfg, out, man):
    from . import scattering_lab as lab

    p = cfg.params
    disc = waveguide.Discretization(p["d"], p["L"], p["Nx"], p["Ny"])
    mode = p["mode"] if p["mode"] is not None else [0] * p["d"]
    F = lab.residual_profile(disc, mode, cfg.seed, p["amplitude"])
    rows = lab.residual_study(F, p["times"], _potential(cfg), enumerate_gamma0(p["P2"], p["d"]), p["delta"])
    man.add_output(write_csv(out / "residual.csv", ["t", "r", "r_weighted"],
                             ([r["t"], r["r"], r["r_weighted"]] for r in rows)))
    return {"r": [r["r"] for r in rows]}


HANDLERS = {
    "enumerate": _run_enumerate,
    "audit": _run_audit,
    "genericity": _run_genericity,
    "resonant-run": _run_resonant,
    "limit-run": _run_limit,
    "nls-run": _run_nls,
    "match": lambda c, o, m: _run_plan(c, o, m, "match"),
    "wave-op": lambda c, o, m: _run_plan(c, o, m, "wave-op"),
    "residual": _run_residual,
}


def dispatch(cfg: RunConfig) -> int:
    """Run the subcommand into a fresh directory; returns the process exit code."""
    waveguide.set_workers(cfg.threads)
    try:
        out = unique_dir(cfg.out)
    except OSError as exc:
        log.error("cannot create output directory %s: %s", cfg.out, exc)
        return EXIT_IO
    man = RunManifest(cfg.command, cfg.echo(), out)
    if cfg.config_file is not None:
        man.add_input(cfg.config_file)
    try:
        summary = HANDLERS[cfg.command](cfg, out, man)
        man.extra["summary"] = summary
        man.finish("ok")
        log.info("%s finished; outputs in %s", cfg.command, out)
        return EXIT_OK
    except NumericalFailure as exc:
        return _abort(man, "numerical_failure", exc, EXIT_NUMERICAL)
    except OSError as exc:
        return _abort(man, "io_error", exc, EXIT_IO)
    except ValueError as exc:
        return _abort(man, "config_error", exc, EXIT_CONFIG)


def _abort(man: RunManifest, status: str, exc: Exception, code: int) -> int:
    log.error("%s: %s", status, exc)
    try:
        man.discard_outputs()
        man.finish(status, str(exc))
    except OSError:
        return EXIT_IO
    return code


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    logging.basicConfig(level=logging.INFO if "-v" in argv or "--verbose" in argv else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = parse_config(argv)
    except ConfigError as exc:
        print(f"wgnls: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as exc:      # argparse usage errors
        return int(exc.code) if exc.code is not None else EXIT_CONFIG
    return dispatch(cfg)


if __name__ == "__main__":
    sys.exit(main())
