import cmath
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wgnls.errors import NumericalFailure
from wgnls.lattice import sample_potential, zero_potential
from wgnls.resonance import enumerate_gamma0
from wgnls.resonant_flow import LatticeState, eval_R
from wgnls.waveguide import (Discretization, WaveField, energy, evolve, field_from_ball, linear_flow,
                             nonlinear_form, norm_HN, norm_LinfH1, norm_S, norm_Splus, norm_Z, norm_xL2,
                             outside_ball_fraction, resonant_form, snapshot_bytes, snapshot_from_bytes,
                             step_strang)

DISC1 = Discretization(1, 16 * math.pi, 128, 16, 0.01)
DISC2 = Discretization(2, 8 * math.pi, 64, 8, 0.01)


def seeded_field(disc, seed, amp=1.0, width=2.0, ymodes=3):
    """Smooth x-bump times a few random low y-modes."""
    rng = np.random.default_rng(seed)
    X = disc.x_grid
    bump = np.exp(-(X / width) ** 2 / 2) * np.exp(1j * rng.uniform(-1, 1) * X)
    Y = np.stack(np.meshgrid(*([disc.y] * disc.d), indexing="ij"), axis=-1)
    u = np.zeros((disc.Ny,) * disc.d, dtype=complex)
    for _ in range(ymodes):
        p = rng.integers(-2, 3, size=disc.d)
        u += (rng.normal() + 1j * rng.normal()) * np.exp(1j * (Y @ p))
    return WaveField(disc, amp * bump * u[None, ...] / ymodes)


def single_mode(disc, j, p, amp=1.0):
    """Field with one nonzero coefficient at (xi_j, p)."""
    c = np.zeros((disc.Nx, disc.Ny ** disc.d), dtype=complex)
    c[j, disc.grid_index(p)[0]] = amp
    return WaveField.from_coefficients(disc, c.reshape(disc.shape))


def rel(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300)


class TestDiscretization:
    def test_rejects_bad_sizes(self):
        with pytest.raises(ValueError):
            Discretization(1, 1.0, 100, 16)
        with pytest.raises(ValueError):
            Discretization(1, -1.0, 64, 16)
        with pytest.raises(ValueError):
            Discretization(0, 1.0, 64, 16)

    def test_dual_sizes(self):
        d = DISC2
        assert d.x.size == d.xi.size == d.Nx
        assert d.y.size == d.p1.size == d.Ny
        assert d.xi[1] == pytest.approx(2 * math.pi / d.L)
        assert d.volume == pytest.approx(d.L * (2 * math.pi) ** 2)

    def test_potential_wider_than_grid(self):
        with pytest.raises(ValueError):
            DISC2.eigenvalues(sample_potential(2, 2, 1, 5, 0))

    @pytest.mark.parametrize("disc", [DISC1, DISC2])
    def test_parseval(self, disc):
        u = seeded_field(disc, 1)
        assert u.mass() == pytest.approx(u.fourier_mass(), rel=1e-10)
        back = WaveField.from_coefficients(disc, u.coefficients())
        assert back.mass() == pytest.approx(u.mass(), rel=1e-10)


class TestLinearFlow:
    def test_identity(self):
        u = seeded_field(DISC1, 0)
        V = sample_potential(1, 2, 1, 5, 0)
        assert rel(linear_flow(u, V, 0.0).samples, u.samples) < 1e-14

    def test_single_mode_phase(self):
        disc = DISC2
        j, p = 3, (1, -2)
        u = single_mode(disc, j, p)
        t = 0.7
        out = linear_flow(u, zero_potential(2), t)
        expected = u.samples * cmath.exp(-1j * t * (disc.xi[j] ** 2 + 5))
        assert rel(out.samples, expected) < 1e-12

    @settings(max_examples=20, deadline=None)
    @given(t=st.floats(-5, 5), s=st.floats(-5, 5), seed=st.integers(0, 100))
    def test_semigroup_and_unitarity(self, t, s, seed):
        V = sample_potential(1, 2, 1, 5, 0)
        u = seeded_field(DISC1, seed)
        a = linear_flow(linear_flow(u, V, t), V, s)
        b = linear_flow(u, V, t + s)
        assert rel(a.samples, b.samples) < 1e-12
        assert a.mass() == pytest.approx(u.mass(), rel=1e-12)


class TestStrang:
    def test_coupling_zero_is_linear(self):
        V = sample_potential(1, 2, 1, 5, 0)
        u = seeded_field(DISC1, 2)
        assert rel(step_strang(u, V, 0.05, coupling=0.0).samples, linear_flow(u, V, 0.05).samples) < 1e-12

    def test_constant_rotates(self):
        c = 0.6 - 0.3j
        u = WaveField(DISC1, np.full(DISC1.shape, c))
        t, dt = 1.0, 0.1
        for _ in range(10):
            u = step_strang(u, zero_potential(1), dt)
        assert np.abs(u.samples - c * cmath.exp(-1j * abs(c) ** 2 * t)).max() < 1e-13

    def test_adjoint_consistency(self):
        V = sample_potential(1, 2, 1, 5, 0)
        u = seeded_field(DISC1, 3)
        back = step_strang(step_strang(u, V, 0.1), V, -0.1)
        assert rel(back.samples, u.samples) < 1e-13

    def test_rejects_nonfinite(self):
        u = WaveField(DISC1, np.full(DISC1.shape, np.nan + 0j))
        with pytest.raises(NumericalFailure):
            step_strang(u, zero_potential(1), 0.1)

    def test_global_order(self):
        V = sample_potential(1, 2, 1, 5, 0)
        u0 = seeded_field(DISC1, 4, amp=0.8)
        T = 1.0
        ref = evolve(u0, V, T, 1 / 320).fields[-1]
        errs = [rel(evolve(u0, V, T, dt).fields[-1].samples, ref.samples) for dt in (0.1, 0.05)]
        order = math.log2(errs[0] / errs[1])
        assert 1.8 <= order <= 2.2

    def test_energy_drift_second_order(self):
        V = sample_potential(1, 2, 1, 5, 0)
        u0 = seeded_field(DISC1, 5, amp=0.5)
        checks = [0.2 * k for k in range(1, 11)]

        def drift(dt):
            traj = evolve(u0, V, 2.0, dt, checkpoints=checks)
            e = [dg["energy"] for dg in traj.diagnostics]
            return max(abs(x - e[0]) for x in e)
        ratio = drift(0.1) / drift(0.05)
        assert 3.0 < ratio < 5.0


class TestEvolve:
    def test_coupling_zero_conserves(self):
        V = sample_potential(2, 2, 1, 3, 0)
        u0 = seeded_field(DISC2, 0)
        traj = evolve(u0, V, 1.0, 0.01, coupling=0.0, checkpoints=[0.5, 1.0])
        d0, d1 = traj.diagnostics[0], traj.diagnostics[-1]
        assert d1["mass"] == pytest.approx(d0["mass"], rel=1e-12)
        assert d1["energy"] == pytest.approx(d0["energy"], rel=1e-12)

    def test_small_data_mass(self):
        V = sample_potential(1, 2, 1, 5, 0)
        u0 = seeded_field(DISC1, 1, amp=0.1)
        traj = evolve(u0, V, 1.0, 0.01)
        m0, m1 = traj.diagnostics[0]["mass"], traj.diagnostics[-1]["mass"]
        assert abs(m1 - m0) / m0 < 1e-10

    def test_zero(self):
        traj = evolve(WaveField.zeros(DISC1), zero_potential(1), 0.1, 0.01)
        assert not traj.fields[-1].samples.any()

    def test_checkpoints_must_align(self):
        with pytest.raises(ValueError):
            evolve(seeded_field(DISC1, 0), zero_potential(1), 0.1, 0.03, checkpoints=[0.1])

    def test_backward(self):
        V = sample_potential(1, 2, 1, 5, 0)
        u0 = seeded_field(DISC1, 6, amp=0.5)
        fwd = evolve(u0, V, 0.5, 0.01).fields[-1]
        back = evolve(fwd, V, 0.0, -0.01, t0=0.5).fields[-1]
        assert rel(back.samples, u0.samples) < 1e-10

    def test_boundary_warning(self):
        u = WaveField(DISC1, np.ones(DISC1.shape, dtype=complex))
        with pytest.warns(RuntimeWarning):
            traj = evolve(u, zero_potential(1), 0.02, 0.01, coupling=0.0)
        assert traj.truncated_at == 0.0

    def test_energy_failsafe(self):
        u0 = seeded_field(DISC1, 0, amp=4.0)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            with pytest.raises(NumericalFailure):
                evolve(u0, zero_potential(1), 2.0, 0.5, energy_failsafe=0.01)


class TestForms:
    def test_nonlinear_form_at_zero(self):
        V = sample_potential(1, 2, 1, 5, 0)
        F, G, H = (seeded_field(DISC1, s) for s in range(3))
        out = nonlinear_form(F, G, H, V, 0.0)
        assert rel(out.samples, F.samples * np.conj(G.samples) * H.samples) < 1e-12

    def test_nonlinear_form_zero(self):
        Z = WaveField.zeros(DISC1)
        assert not nonlinear_form(Z, Z, Z, zero_potential(1), 1.0).samples.any()

    def test_nonlinear_form_gauge(self):
        V = sample_potential(1, 2, 1, 5, 0)
        F, G, H = (seeded_field(DISC1, s) for s in range(3))
        g = cmath.exp(0.4j)
        a = nonlinear_form(F.scale(g), G.scale(g), H.scale(g), V, 0.8)
        b = nonlinear_form(F, G, H, V, 0.8).scale(g)
        assert rel(a.samples, b.samples) < 1e-12

    def _ball_field(self, disc, index, seed):
        rng = np.random.default_rng(seed)
        vals = rng.normal(size=(disc.Nx, len(index.points))) + 1j * rng.normal(size=(disc.Nx, len(index.points)))
        vals *= np.exp(-disc.xi ** 2)[:, None]
        return field_from_ball(disc, index, vals)

    def test_resonant_form_matches_eval_R(self):
        index = enumerate_gamma0(5, 2)
        F = self._ball_field(DISC2, index, 0)
        out = resonant_form(F, F, F, index)
        from wgnls.waveguide import restrict_to_ball
        spec_in, spec_out = restrict_to_ball(F, index), restrict_to_ball(out, index)
        for j in (0, 1, 5, DISC2.Nx - 1):
            b = eval_R(LatticeState(5, 2, spec_in[j]), index).amplitudes
            assert rel(spec_out[j], b) < 1e-12

    def test_resonant_form_zero(self):
        index = enumerate_gamma0(4, 2)
        Z = WaveField.zeros(DISC2)
        assert not resonant_form(Z, Z, Z, index).samples.any()

    def test_resonant_form_d1_pairings(self):
        index = enumerate_gamma0(4, 1)
        F = self._ball_field(DISC1, index, 1)
        from wgnls.waveguide import restrict_to_ball
        f = restrict_to_ball(F, index)
        out = restrict_to_ball(resonant_form(F, F, F, index), index)
        total = np.sum(np.abs(f) ** 2, axis=1, keepdims=True)
        expected = (2 * total - np.abs(f) ** 2) * f
        assert rel(out, expected) < 1e-12

    def test_resonant_form_rejects_wide_support(self):
        index = enumerate_gamma0(1, 1)
        F = single_mode(DISC1, 0, (2,))
        assert outside_ball_fraction(F, index) > 1e-10
        with pytest.raises(ValueError):
            resonant_form(F, F, F, index)


class TestNorms:
    def test_single_mode_Z(self):
        disc = DISC2
        j, p = 2, (1, 1)
        u = single_mode(disc, j, p, amp=1.0 / disc.spectral_scale)
        assert norm_Z(u) ** 2 == pytest.approx((1 + disc.xi[j] ** 2) ** 2 * 3, rel=1e-12)

    def test_zero(self):
        Z = WaveField.zeros(DISC1)
        for f in (norm_Z, norm_xL2, norm_LinfH1, lambda F: norm_HN(F, 8), lambda F: norm_S(F, 8),
                  lambda F: norm_Splus(F, 8)):
            assert f(Z) == 0

    @pytest.mark.parametrize("disc", [DISC1, DISC2])
    def test_HN_zero_is_mass(self, disc):
        u = seeded_field(disc, 3)
        assert norm_HN(u, 0) ** 2 == pytest.approx(u.mass(), rel=1e-12)

    @pytest.mark.parametrize("seed", range(4))
    def test_order_checks(self, seed):
        u = seeded_field(DISC1, seed)
        for N in (1, 2, 8):
            assert norm_HN(u, 1) <= norm_S(u, N) <= norm_Splus(u, N)

    def test_LinfH1_constant(self):
        c = 0.5
        u = WaveField(DISC1, np.full(DISC1.shape, c, dtype=complex))
        assert norm_LinfH1(u) == pytest.approx(math.sqrt(2 * math.pi) * c, rel=1e-12)


class TestSnapshot:
    def test_round_trip(self):
        u = seeded_field(DISC2, 7)
        v, t = snapshot_from_bytes(snapshot_bytes(u, 3.5), DISC2.dt)
        assert t == 3.5 and v.disc == DISC2
        assert np.array_equal(v.samples, u.samples)

    def test_rejects_garbage(self):
        blob = snapshot_bytes(seeded_field(DISC1, 0))
        with pytest.raises(ValueError):
            snapshot_from_bytes(b"XXXX" + blob[4:])
        with pytest.raises(ValueError):
            snapshot_from_bytes(blob[:-16], DISC1.dt)
