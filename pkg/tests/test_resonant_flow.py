import cmath
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wgnls.errors import NumericalFailure
from wgnls.resonance import enumerate_gamma0, lattice_ball
from wgnls.resonant_flow import (LatticeState, ProfileState, conserved_set, eval_R, eval_R_bruteforce,
                                 hs_norm, integrate_limit_system, integrate_resonant, random_state,
                                 resonant_sum)


def rel(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300)


class TestEvalR:
    def test_zero(self):
        idx = enumerate_gamma0(5, 2)
        out = eval_R(LatticeState.zeros(5, 2), idx)
        assert not out.amplitudes.any()

    def test_single_mode(self):
        c = 0.7 - 0.4j
        a = LatticeState.from_modes(5, 2, {(1, 1): c})
        b = eval_R(a, enumerate_gamma0(5, 2))
        assert b[(1, 1)] == pytest.approx(abs(c) ** 2 * c, abs=1e-15)
        assert np.count_nonzero(b.amplitudes) == 1

    def test_two_generic_modes(self):
        c1, c2 = 0.8 + 0.1j, -0.3 + 0.5j
        p1, p2 = (1, 0), (2, 1)
        b = eval_R(LatticeState.from_modes(5, 2, {p1: c1, p2: c2}), enumerate_gamma0(5, 2))
        assert b[p1] == pytest.approx((abs(c1) ** 2 + 2 * abs(c2) ** 2) * c1, abs=1e-14)
        assert b[p2] == pytest.approx((abs(c2) ** 2 + 2 * abs(c1) ** 2) * c2, abs=1e-14)

    @pytest.mark.parametrize("d,P2", [(1, 10), (2, 10), (3, 5)])
    def test_matches_bruteforce(self, d, P2):
        idx = enumerate_gamma0(P2, d)
        for seed in range(5):
            a = random_state(P2, d, seed)
            assert rel(eval_R(a, idx).amplitudes, eval_R_bruteforce(a, P2).amplitudes) < 1e-12

    def test_rejects_mismatched_ball(self):
        with pytest.raises(ValueError):
            eval_R(LatticeState.zeros(5, 2), enumerate_gamma0(4, 2))

    @settings(max_examples=30, deadline=None)
    @given(theta=st.floats(-math.pi, math.pi), seed=st.integers(0, 1000))
    def test_gauge_covariance(self, theta, seed):
        idx = enumerate_gamma0(5, 2)
        a = random_state(5, 2, seed)
        g = cmath.exp(1j * theta)
        lhs = eval_R(LatticeState(5, 2, g * a.amplitudes), idx).amplitudes
        assert rel(lhs, g * eval_R(a, idx).amplitudes) < 1e-13

    def test_parameter_axes(self):
        idx = enumerate_gamma0(4, 2)
        cols = np.stack([random_state(4, 2, s).amplitudes for s in range(3)], axis=1)
        out = resonant_sum(idx, cols, cols, cols)
        for j in range(3):
            assert np.array_equal(out[:, j], resonant_sum(idx, cols[:, j], cols[:, j], cols[:, j]))

    @pytest.mark.parametrize("d,P2", [(1, 5), (2, 5), (3, 5), (4, 3)])
    def test_trilinear_ratio_does_not_grow(self, d, P2):
        # a fixed ensemble drawn on the small ball, embedded into the doubled ball
        small, big = lattice_ball(P2, d), lattice_ball(2 * P2, d)
        emb = np.array([big.index_of(tuple(p)) for p in small.points])
        idx_small, idx_big = enumerate_gamma0(P2, d), enumerate_gamma0(2 * P2, d)

        def ratio(a, idx, ball):
            b = resonant_sum(idx, a, a, a)
            return np.linalg.norm(b) / (np.linalg.norm(a) * hs_norm(a, ball.norms, 1) ** 2)

        for seed in range(10):
            a = random_state(P2, d, seed).amplitudes
            wide = np.zeros(len(big), dtype=complex)
            wide[emb] = a
            assert ratio(wide, idx_big, big) <= ratio(a, idx_small, small) * (1 + 1e-12)


class TestConserved:
    def test_single_mode(self):
        c = 0.6 + 0.8j
        cs = conserved_set(LatticeState.from_modes(5, 2, {(2, 1): c}), enumerate_gamma0(5, 2))
        assert cs.mass == pytest.approx(1.0)
        assert cs.energy == pytest.approx(5.0)
        assert cs.shell_masses[5] == pytest.approx(1.0)
        assert sum(cs.shell_masses.values()) == pytest.approx(1.0)
        assert cs.hamiltonian == pytest.approx(abs(c) ** 4)

    def test_zero(self):
        cs = conserved_set(LatticeState.zeros(4, 2), enumerate_gamma0(4, 2))
        assert cs.mass == cs.energy == cs.hamiltonian == 0

    @pytest.mark.parametrize("seed", range(5))
    def test_hamiltonian_is_real(self, seed):
        a = random_state(10, 2, seed, mass=2.0)
        cs = conserved_set(a, enumerate_gamma0(10, 2))
        assert abs(cs.hamiltonian_imag) < 1e-12 * cs.mass ** 2
        assert cs.mass == pytest.approx(sum(cs.shell_masses.values()), rel=1e-14)
        assert cs.energy == pytest.approx(sum(N * m for N, m in cs.shell_masses.items()), rel=1e-14)


class TestIntegrate:
    def test_single_mode_exact(self):
        c = 0.9 - 0.3j
        a0 = LatticeState.from_modes(2, 1, {1: c})
        traj = integrate_resonant(a0, 10.0, 1e-3, enumerate_gamma0(2, 1))
        assert abs(traj.final[1] - c * cmath.exp(-1j * abs(c) ** 2 * 10)) < 1e-8

    def test_zero_stays_zero(self):
        traj = integrate_resonant(LatticeState.zeros(4, 2), 1.0, 0.01, enumerate_gamma0(4, 2))
        assert not traj.final.amplitudes.any()

    def test_conservation_short(self):
        idx = enumerate_gamma0(5, 2)
        traj = integrate_resonant(random_state(5, 2, 3), 2.0, 1e-3, idx)
        assert max(traj.max_relative_drift().values()) < 1e-9
        s = [c.hs_norm(2) for c in traj.conserved]
        assert max(abs(x - s[0]) for x in s) < 1e-9 * s[0]

    def test_time_reversal(self):
        idx = enumerate_gamma0(5, 2)
        a0 = random_state(5, 2, 1)
        fwd = integrate_resonant(a0, 1.0, 1e-3, idx).final
        back = integrate_resonant(LatticeState(5, 2, np.conj(fwd.amplitudes)), 1.0, 1e-3, idx).final
        assert rel(back.amplitudes, np.conj(a0.amplitudes)) < 1e-10

    def test_failsafe(self):
        a0 = random_state(5, 2, 0, mass=50.0)
        with pytest.raises(NumericalFailure):
            integrate_resonant(a0, 1.0, 0.5, enumerate_gamma0(5, 2))

    def test_checkpoints_and_csv(self, tmp_path):
        import io
        traj = integrate_resonant(random_state(2, 1, 0), 0.05, 0.01, enumerate_gamma0(2, 1), checkpoint_every=2)
        assert traj.times[0] == 0 and traj.times[-1] == pytest.approx(0.05)
        buf = io.StringIO()
        traj.write_csv(buf)
        head = buf.getvalue().split("\r\n")[0]
        assert head.startswith("t,mass,energy,hamiltonian,A2_")


class TestLimitSystem:
    def _profile(self, n, seed=0):
        xi = np.linspace(-1, 1, n)
        amps = np.array([random_state(5, 2, seed + k).amplitudes for k in range(n)])
        return ProfileState(5, 2, xi, amps)

    def test_one_xi_matches_lattice_flow(self):
        idx = enumerate_gamma0(5, 2)
        G = self._profile(1)
        a = integrate_resonant(G.slice(0), 0.5, 1e-3, idx).final.amplitudes
        b = integrate_limit_system(G, 0.5, 1e-3, idx).final.amplitudes[0]
        assert np.array_equal(a, b)

    def test_permuting_xi(self):
        idx = enumerate_gamma0(5, 2)
        G = self._profile(4)
        perm = [2, 0, 3, 1]
        Gp = ProfileState(5, 2, G.xi, G.amplitudes[perm])
        a = integrate_limit_system(G, 0.3, 1e-2, idx).final.amplitudes
        b = integrate_limit_system(Gp, 0.3, 1e-2, idx).final.amplitudes
        assert np.array_equal(a[perm], b)

    def test_functionals_constant(self):
        idx = enumerate_gamma0(5, 2)
        traj = integrate_limit_system(self._profile(8), 1.0, 1e-3, idx)
        z = [G.z_norm() for G in traj.states]
        h = [G.hn_norm(8) for G in traj.states]
        assert max(abs(v - z[0]) for v in z) < 1e-8 * z[0]
        assert max(abs(v - h[0]) for v in h) < 1e-8 * h[0]

    def test_backward_and_forward_cancel(self):
        idx = enumerate_gamma0(5, 2)
        G = self._profile(3)
        fwd = integrate_limit_system(G, 0.5, 1e-3, idx).final
        back = integrate_limit_system(fwd, -0.5, 1e-3, idx, tau0=0.5)
        assert back.taus[-1] == pytest.approx(0.0, abs=1e-12)
        assert rel(back.final.amplitudes, G.amplitudes) < 1e-10

    def test_xi_must_increase(self):
        with pytest.raises(ValueError):
            ProfileState(5, 2, np.array([0.0, 0.0]), np.zeros((2, len(lattice_ball(5, 2)))))
