import math

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy.special import erf

from levyheat import (
    FieldLattice,
    GridMismatch,
    HorizonExceeded,
    NoiseLattice,
    SpaceTimeGrid,
    brownian,
    delta,
    evolve,
    frak_T,
    heat_convolve_many,
    mc_moments,
    p0_eval,
    pam_second_moment_oracle,
    picard_iterate,
    positivity_scan,
    sample_noise,
    shift_noise,
    sigma_custom,
    sigma_linear,
    sigma_saturating,
    stability_bound,
    stability_compare,
)
from levyheat.conv_calculus import (
    graded_times,
    kernel_squared_grid,
    smoothed_squared_grid,
    st_convolve,
)
from levyheat.solver import _deterministic_distance_time, _flat_second_moment

BM = brownian(1.0)
U0 = delta()
PAM = sigma_linear(1.0)

# Brownian kappa = 1 closed forms used below (a := lam^2 / 2):
#   flat data 1:   E u_t^2            = e^{a^2 t} (1 + erf(a sqrt(t)))
#   delta data:    E u_t(x)^2         = p_{t/2}(x) h(t),
#                  h(t) = ((pi t)^{-1/2} + a e^{a^2 t}(1 + erf(a sqrt(t)))) / 2
#   and p_{t/2}(x) = e^{-x^2/t} / sqrt(pi t).
# The local horizon at k = 2, lip = 1 is frak_T_2 = pi/16384.
T2 = math.pi / 16384.0


def flat_closed_form(lam, t):
    a = 0.5 * lam * lam
    return np.exp(a * a * t) * (1.0 + erf(a * np.sqrt(t)))


def delta_closed_form(lam, t, x):
    a = 0.5 * lam * lam
    h = 0.5 * ((math.pi * t) ** -0.5
               + a * math.exp(a * a * t) * (1.0 + erf(a * math.sqrt(t))))
    return np.exp(-x ** 2 / t) / math.sqrt(math.pi * t) * h


@pytest.fixture(scope="module")
def pam_field():
    noise = sample_noise(0.01, 0.125, 30, 64, seed=11)
    return evolve(BM, U0, PAM, noise, 0.3)


@pytest.fixture(scope="module")
def mc_table():
    """1500-seed ensemble plus the matching scheme-exact oracle."""
    tab = mc_moments(BM, U0, PAM, dt=0.01, nx=128, half_width=6.0,
                     t_end=0.3, n_seeds=1500, t_probes=[0.1, 0.3],
                     x_probes=[0.0, 0.5], ks=(1, 2))
    centers = -6.0 + (np.arange(128) + 0.5) * (12.0 / 128)
    orc = pam_second_moment_oracle(BM, U0, 1.0, 0.01 * np.arange(1, 31),
                                   centers, mode="lattice")
    return tab, centers, orc


@pytest.fixture(scope="module")
def picard_stack():
    """Center-cell values of Picard stages 0..4 at t = frak_T_2, 200 seeds."""
    dt = T2 / 32
    vals = np.empty((5, 200))
    for seed in range(200):
        noise = sample_noise(dt, 0.00125, 32, 128, seed)
        for n in range(5):
            fld = picard_iterate(BM, U0, PAM, noise, n)
            vals[n, seed] = fld.grid.values[31, 64]
    return vals


class TestSigmaSpec:
    def test_linear(self):
        s = sigma_linear(-2.5)
        x = np.array([-1.0, 0.0, 3.0])
        assert np.array_equal(s.apply(x), -2.5 * x)
        assert s.lip == 2.5 and s.lower_lip == 2.5

    def test_saturating(self):
        s = sigma_saturating(2.0, 0.5)
        x = np.linspace(-4, 4, 41)
        y = s.apply(x)
        assert y[20] == 0.0
        assert np.abs(y).max() <= 2.0 * 0.5
        # slope at the origin is lam
        assert abs(s.apply(np.array([1e-8]))[0] / 1e-8 - 2.0) < 1e-6
        assert s.lower_lip == 0.0

    def test_custom_interp(self):
        s = sigma_custom([-1.0, 0.0, 2.0], [0.5, 0.0, -1.0])
        assert s.apply(np.zeros(1))[0] == 0.0
        assert s.apply(np.array([1.0]))[0] == -0.5
        assert s.lip == 0.5

    @pytest.mark.parametrize("s", [
        sigma_linear(1.7),
        sigma_saturating(1.3, 0.7),
        sigma_custom([-2.0, 0.0, 1.0, 3.0], [1.0, 0.0, 0.8, 0.8]),
    ])
    def test_lipschitz_spot_check(self, s):
        rng = np.random.default_rng(5)
        x = rng.uniform(-5, 5, 400)
        y = rng.uniform(-5, 5, 400)
        lhs = np.abs(s.apply(x) - s.apply(y))
        assert np.all(lhs <= s.lip * np.abs(x - y) * (1 + 1e-12) + 1e-15)

    def test_rejects(self):
        with pytest.raises(ValueError):
            sigma_custom([0.0, 1.0], [0.5, 1.0])       # sigma(0) != 0
        with pytest.raises(ValueError):
            sigma_custom([1.0, 0.0], [1.0, 0.0])       # x not increasing


class TestFieldLattice:
    def test_picard_zero_stage_must_vanish(self):
        grid = SpaceTimeGrid(np.array([0.1]), np.array([0.0, 1.0]),
                             np.ones((1, 2)))
        with pytest.raises(ValueError):
            FieldLattice(grid=grid, scheme="picard", seed=0,
                         truncation_L=1.0, dt=0.1, picard_order=0)

    def test_noise_part_shape(self):
        grid = SpaceTimeGrid(np.array([0.1]), np.array([0.0, 1.0]),
                             np.ones((1, 2)))
        with pytest.raises(ValueError):
            FieldLattice(grid=grid, scheme="timestep", seed=0,
                         truncation_L=1.0, dt=0.1,
                         noise_part=np.zeros((2, 2)))


class TestEvolve:
    def test_sigma_zero_is_deterministic(self):
        noise = sample_noise(0.01, 0.125, 20, 64, seed=3)
        fld = evolve(BM, U0, sigma_linear(0.0), noise, 0.2)
        xs = fld.grid.x_nodes
        for i, t in enumerate(fld.grid.t_nodes):
            ref = np.maximum(heat_convolve_many(BM, U0, t, xs), 0.0)
            assert np.array_equal(fld.grid.values[i], ref)
        assert positivity_scan(fld) == (0.0, 0)

    def test_restart_bit_exact(self, pam_field):
        noise = sample_noise(0.01, 0.125, 30, 64, seed=11)
        part = evolve(BM, U0, PAM, noise, 0.1)
        rest = evolve(BM, U0, PAM, shift_noise(noise, 10), 0.3,
                      from_field=part)
        assert np.array_equal(rest.grid.values, pam_field.grid.values[10:])
        assert np.array_equal(rest.noise_part, pam_field.noise_part[10:])

    def test_mass_doubling_bit_exact(self):
        # linear sigma commutes with scaling by 2, exactly in floats
        noise = sample_noise(0.01, 0.125, 15, 64, seed=7)
        one = evolve(BM, delta(1.0), PAM, noise, 0.15)
        two = evolve(BM, delta(2.0), PAM, noise, 0.15)
        assert np.array_equal(two.grid.values, 2.0 * one.grid.values)

    def test_first_noise_row_idle(self):
        base = sample_noise(0.01, 0.125, 12, 64, seed=9)
        poisoned = base.increments.copy()
        poisoned[0] = 99.0
        alt = NoiseLattice(dt=0.01, dx=0.125, nt=12, nx=64, seed=9,
                           increments=poisoned)
        a = evolve(BM, U0, PAM, base, 0.12)
        b = evolve(BM, U0, PAM, alt, 0.12)
        assert np.array_equal(a.grid.values, b.grid.values)

    def test_refinement_warning(self):
        noise = sample_noise(1e-4, 0.1, 10, 16, seed=0)
        with pytest.warns(UserWarning, match="refinement"):
            evolve(BM, U0, PAM, noise, 1e-3)


class TestPicard:
    def test_order_zero_is_zero(self):
        noise = sample_noise(T2 / 8, 0.005, 8, 32, seed=1)
        fld = picard_iterate(BM, U0, PAM, noise, 0)
        assert not fld.grid.values.any()
        assert fld.picard_order == 0

    def test_sigma_zero_first_stage_exact(self):
        noise = sample_noise(T2 / 8, 0.005, 8, 32, seed=1)
        fld = picard_iterate(BM, U0, sigma_linear(0.0), noise, 3)
        xs = fld.grid.x_nodes
        for i, t in enumerate(fld.grid.t_nodes):
            assert_allclose(fld.grid.values[i],
                            np.maximum(heat_convolve_many(BM, U0, t, xs), 0.0),
                            rtol=0, atol=1e-10)

    def test_horizon_guard(self):
        over = sample_noise(T2 / 8, 0.005, 10, 32, seed=0)  # 10 dt > T2
        with pytest.raises(HorizonExceeded):
            picard_iterate(BM, U0, PAM, over, 1)
        # k = 4 shrinks the horizon by 4, so half of T2 is already out
        half = sample_noise(T2 / 8, 0.005, 4, 32, seed=0)
        picard_iterate(BM, U0, PAM, half, 1, k=2.0)
        with pytest.raises(HorizonExceeded):
            picard_iterate(BM, U0, PAM, half, 1, k=4.0)

    def test_matches_timestep_scheme(self):
        # the two routes share the band-limited lattice kernel, so they
        # agree to quadrature error everywhere and differ visibly only in
        # the outermost cells, where repeated truncated propagator steps
        # and the one-shot lag rows handle the window edge differently
        noise = sample_noise(T2 / 32, 0.00125, 32, 128, seed=3)
        direct = evolve(BM, U0, PAM, noise, T2).grid.values
        fixed = picard_iterate(BM, U0, PAM, noise, 16).grid.values
        assert np.abs(fixed - direct).max() < 1e-6 * direct.max()
        mask = direct > 1e-3 * direct.max()
        assert np.abs(fixed[mask] / direct[mask] - 1.0).max() < 1e-6

    def test_successive_differences_contract(self, picard_stack):
        # Picard contraction gives E|u^(n+1) - u^(n)|^2 a factor <= 1/2
        # per sweep inside the horizon; the empirical factor is ~0.01
        second = [np.mean((picard_stack[n + 1] - picard_stack[n]) ** 2)
                  for n in range(4)]
        ratios = np.array(second[1:]) / np.array(second[:-1])
        assert np.all(ratios < 0.5)

    def test_successive_differences_bound(self, picard_stack):
        # E|u^(n+1) - u^(n)|^2 <= 2^-n u0(R) p_t(0) (p_t*u0)(x) at t = T2
        x_cell = -0.08 + 64.5 * 0.00125
        rhs0 = p0_eval(BM, T2) * float(
            heat_convolve_many(BM, U0, T2, [x_cell])[0])
        for n in range(4):
            lhs = np.mean((picard_stack[n + 1] - picard_stack[n]) ** 2)
            assert lhs <= 2.0 ** -n * rhs0 * (1 + 1e-9)


class TestOracle:
    def test_lam_zero_exact(self):
        xs = np.linspace(-2, 2, 17)
        for mode in ("lattice", "continuum"):
            tg = 0.1 * np.arange(1, 3) if mode == "lattice" else [0.05, 0.2]
            ref = np.array([heat_convolve_many(BM, U0, t, xs) ** 2
                            for t in tg])
            got = pam_second_moment_oracle(BM, U0, 0.0, tg, xs, mode=mode)
            assert_allclose(got.values, ref, rtol=1e-9, atol=1e-10)

    @pytest.mark.parametrize("lam,t_max,rtol", [
        (0.3, 2.0, 1e-4),
        (1.3, 1.0, 1e-2),   # the graded march coarsens as e^{a^2 t} ramps
    ])
    def test_flat_data_closed_form(self, lam, t_max, rtol):
        ts = np.array([0.1, 0.5, 1.0, 2.0])
        ts = ts[ts <= t_max]
        got = _flat_second_moment(BM, lam, ts)
        assert_allclose(got, flat_closed_form(lam, ts), rtol=rtol)

    def test_delta_closed_form(self):
        ts = np.array([0.1, 0.3])
        xs = np.linspace(-3.0, 3.0, 25)
        got = pam_second_moment_oracle(BM, U0, 1.0, ts, xs).values
        for j, t in enumerate(ts):
            ref = delta_closed_form(1.0, t, xs)
            mask = ref > 1e-6 * ref.max()
            assert_allclose(got[j][mask], ref[mask], rtol=3e-2)

    def test_lattice_mode_converges_to_continuum(self):
        cont = pam_second_moment_oracle(BM, U0, 1.0, np.array([0.3]),
                                        np.array([-0.5, 0.0, 0.5]))
        errs = []
        for dt, nx in [(0.02, 96), (0.01, 192), (0.005, 384)]:
            cen = -6.0 + (np.arange(nx) + 0.5) * (12.0 / nx)
            lat = pam_second_moment_oracle(
                BM, U0, 1.0, dt * np.arange(1, int(0.3 / dt) + 1), cen,
                mode="lattice")
            v = np.interp([-0.5, 0.0, 0.5], cen, lat.values[-1])
            errs.append(np.abs(v / cont.values[0] - 1.0).max())
        assert errs[0] > errs[1] > errs[2]
        assert errs[2] < 5e-2

    def test_small_lam_first_order(self):
        """f - det^2 = lam^2 (p^2 (*) det^2) + O(lam^4)."""
        ts = np.array([0.2, 0.3])
        xs = np.linspace(-2, 2, 9)
        det2 = np.array([heat_convolve_many(BM, U0, t, xs) ** 2 for t in ts])
        g = {}
        for lam in (0.1, 0.05):
            o = pam_second_moment_oracle(BM, U0, lam, ts, xs)
            g[lam] = (o.values - det2) / lam ** 2
        # the lam^2-rescaled correction is lam-independent to O(lam^2)
        assert np.abs(g[0.1] / g[0.05] - 1.0).max() < 1e-2

        tbl = graded_times(0.3, n=80, include=ts)
        x_int = np.linspace(-10.0, 10.0, 2001)
        conv = st_convolve(kernel_squared_grid(BM, tbl, x_int),
                           smoothed_squared_grid(BM, U0, tbl, x_int))
        for j, t in enumerate(ts):
            i = int(np.argmin(np.abs(tbl - t)))
            ref = np.interp(xs, x_int, conv.values[i])
            assert_allclose(g[0.1][j], ref, rtol=2e-2)

    def test_short_horizon_moment_bound(self):
        # f <= 2 C_2 u0(R) p_t(0) (p_t*u0)(x) up to T2, C_2 = 8 (1 v 2 lip^2)
        ts = T2 * np.array([0.5, 1.0])
        xs = np.linspace(-0.05, 0.05, 11)
        got = pam_second_moment_oracle(BM, U0, 1.0, ts, xs).values
        for j, t in enumerate(ts):
            rhs = 32.0 * p0_eval(BM, t) * heat_convolve_many(BM, U0, t, xs)
            assert np.all(got[j] <= rhs)
            # and the march still resolves the closed form down here
            assert_allclose(got[j], delta_closed_form(1.0, t, xs), rtol=1e-2)

    def test_grid_validation(self):
        xs = np.linspace(-1, 1, 9)
        with pytest.raises(GridMismatch):
            pam_second_moment_oracle(BM, U0, 1.0, [0.2, 0.1], xs)
        with pytest.raises(GridMismatch):
            pam_second_moment_oracle(BM, U0, 1.0, [0.1, 0.2],
                                     np.array([0.0, 0.1, 0.5]))
        with pytest.raises(GridMismatch):
            pam_second_moment_oracle(BM, U0, 1.0, [0.1, 0.3], xs,
                                     mode="lattice")
        with pytest.raises(ValueError):
            pam_second_moment_oracle(BM, U0, 1.0, [0.1, 0.2], xs,
                                     mode="spectral")


class TestMcMoments:
    def test_matches_scheme_exact_oracle(self, mc_table):
        tab, centers, orc = mc_table
        for row in tab.rows():
            if row.k != 2:
                continue
            it = int(round(row.t / 0.01)) - 1
            ix = int(np.argmin(np.abs(centers - row.x)))
            z = (row.raw_moment - orc.values[it, ix]) / row.raw_std_error
            assert abs(z) < 3.0

    def test_mean_identity(self, mc_table):
        # E u_t(x) = (p_t * u0)(x); k = 1 rows carry the signed mean
        tab, _, _ = mc_table
        for row in tab.rows():
            if row.k != 1:
                continue
            ref = float(heat_convolve_many(BM, U0, row.t, [row.x])[0])
            assert abs(row.estimate - ref) < 3.0 * row.std_error

    def test_table_invariants(self, mc_table):
        tab, centers, _ = mc_table
        assert tab.replicas == 1500
        assert tab.eps_growth == 0.5
        assert np.all(tab.std_error > 0)
        assert np.all(np.isfinite(tab.bound_exist_unique))
        assert np.all(np.isfinite(tab.bound_h1))
        # probes snap onto cell centers and the snapped value is recorded
        for xv in np.unique(tab.x):
            assert np.abs(centers - xv).min() < 1e-12

    def test_deterministic_and_thread_invariant(self):
        kw = dict(dt=0.02, nx=64, half_width=4.0, t_end=0.1, n_seeds=50,
                  t_probes=[0.1], x_probes=[0.0], ks=(2,))
        a = mc_moments(BM, U0, PAM, threads=1, **kw)
        b = mc_moments(BM, U0, PAM, threads=2, **kw)
        c = mc_moments(BM, U0, PAM, threads=2, **kw)
        assert np.array_equal(a.estimate, b.estimate)
        assert np.array_equal(b.estimate, c.estimate)
        assert np.array_equal(b.std_error, c.std_error)


class TestStability:
    def test_bound_vanishes_at_zero(self):
        assert stability_bound(BM, 1.0, 0.0, 1.21) == 0.0

    def test_bound_monotone_in_eps(self):
        bs = [stability_bound(BM, 1.0, e, 1.21) for e in (0.05, 0.1, 0.2)]
        assert bs[0] < bs[1] < bs[2]

    def test_deterministic_identity(self):
        """sigma = 0 collapses the distance to an explicit xi-integral.

        With no noise the coupled pair differs only in its deterministic
        rows and Plancherel turns the weighted L^2 distance into exactly
        half the stability bound; the two independent quadratures must
        agree far beyond the contract's 1e-4.
        """
        for eps, beta in ((0.2, 1.21), (0.05, 2.0)):
            direct = _deterministic_distance_time(BM, 1.0, eps, beta)
            plancherel = 0.5 * stability_bound(BM, 1.0, eps, beta)
            assert abs(direct / plancherel - 1.0) < 1e-4

    def test_inadmissible_beta_rejected(self):
        # upsilon(beta) = 1/(2 sqrt(beta)) <= 1/(2 lip^2) needs beta >= 1
        with pytest.raises(ValueError, match="admissible"):
            stability_compare(BM, U0, PAM, [0.1], 0.49, 4,
                              t_max=0.1, dt=0.01, nx=64, half_width=12.0)

    def test_coupled_distance_under_bound(self):
        rows = stability_compare(BM, U0, PAM, [0.2, 0.1], 1.21, 24,
                                 t_max=3.0, dt=0.02, nx=256,
                                 half_width=16.0)
        assert rows[0].eps == 0.2 and rows[1].eps == 0.1
        for row in rows:
            assert row.distance <= row.bound
            assert row.std_error > 0
            assert row.tail_bound < 0.05 * row.distance
        # smaller mollification, smaller distance (2 SE slack)
        slack = 2.0 * math.hypot(rows[0].std_error, rows[1].std_error)
        assert rows[1].distance < rows[0].distance + slack

    def test_zero_eps_couples_exactly(self):
        rows = stability_compare(BM, U0, PAM, [0.0], 1.21, 3,
                                 t_max=0.5, dt=0.02, nx=128,
                                 half_width=12.0)
        assert rows[0].distance == 0.0
        assert rows[0].bound == 0.0


class TestPositivity:
    def test_pam_violations_rare(self):
        total = below = 0
        for seed in range(60):
            noise = sample_noise(0.01, 0.125, 30, 64, seed=seed)
            fld = evolve(BM, U0, PAM, noise, 0.3)
            _, n_bad = positivity_scan(fld)
            below += n_bad
            total += fld.grid.values.size
        assert below / total < 0.01

    def test_refinement_does_not_worsen(self):
        def count(dt, nt):
            bad = 0
            for seed in range(30):
                noise = sample_noise(dt, 0.125, nt, 64, seed=seed)
                bad += positivity_scan(evolve(BM, U0, PAM, noise,
                                              dt * nt))[1]
            return bad

        assert count(0.01, 30) <= count(0.02, 15)

    def test_needs_a_yardstick(self):
        noise = sample_noise(T2 / 8, 0.005, 8, 32, seed=1)
        fld = picard_iterate(BM, U0, PAM, noise, 2)
        with pytest.raises(ValueError):
            positivity_scan(fld)
        mn, cnt = positivity_scan(fld, eps_num=1e-9)
        assert cnt >= 0 and math.isfinite(mn)
