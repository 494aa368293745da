import math

import numpy as np
import pytest

from parahom.envelope import subdiff_measure_fiber
from parahom.environment import Environment, EnvironmentSpec
from parahom.lattice import CubeIndex, grid_for_cube
from parahom.mu import (
    MuSample,
    check_abp,
    check_bounds,
    check_lipschitz_ell,
    check_subadditivity,
    check_variance_decay,
    estimate_mu,
    estimate_mu_star,
    hypercone_constant,
    lower_bound_constant,
    mc_moments,
    ptf_constant,
    stats_from_pairs,
    upper_bound_constant,
)
from parahom.solver import SolveRequest, solve_dirichlet

CUBE0 = CubeIndex(0, (0,), 0)
CUBE1 = CubeIndex(1, (0,), 0)


def const_env(K=2.0, seed=0):
    return Environment(EnvironmentSpec(
        dimension=1, lam=1.0, Lam=1.0, family="linear", controls=((1.0,),),
        offset_range=(K, K), seed=seed))


def two_phase(seed=0, lo=-0.5, hi=0.5):
    return Environment(EnvironmentSpec(
        dimension=1, lam=1.0, Lam=2.0, family="linear",
        controls=((1.0,), (2.0,)), offset_range=(lo, hi), seed=seed))


def sym_env(seed=0):
    return Environment(EnvironmentSpec(
        dimension=1, lam=1.0, Lam=2.0, family="linear",
        controls=((1.0,), (2.0,)), offset_range=(0.0, 0.0), seed=seed))


class TestConstants:
    def test_hypercone_d1(self):
        # omega_1 = 2, c_1 = 2 * 1 / 2 = 1, so the ABP constant is 1
        assert hypercone_constant(1) == pytest.approx(1.0)
        assert ptf_constant(1) == pytest.approx(1.0)

    def test_hypercone_d2(self):
        assert hypercone_constant(2) == pytest.approx(math.pi / 2 / 3)

    def test_bound_constants(self):
        assert lower_bound_constant(1, 1.0) == pytest.approx(1.0 / 8)
        assert lower_bound_constant(2, 2.0) == pytest.approx(0.25 / 64)
        assert upper_bound_constant(1, 1.0) == pytest.approx(1.0 / 4)
        assert upper_bound_constant(2, 0.5) == pytest.approx(4.0 / 27)


class TestEstimateMu:
    def test_constant_env_at_equilibrium_is_zero(self):
        s = estimate_mu(const_env(), CUBE0, 2.0, [0.0], 9)
        assert s.value == 0.0

    def test_constant_env_floor_kicks_in(self):
        # eta = 1: the quadratic supersolution gives at least 1/8
        s = estimate_mu(const_env(), CUBE0, 1.0, [0.0], 9)
        assert s.value >= 1.0 / 8 - 1e-15
        assert s.method == "fiber+floor"
        assert s.floor == pytest.approx(1.0 / 8)

    def test_positive_when_operator_above_ell(self):
        # inf F(M, .) > 0 for M = -2 (our sign convention F = -tr(AM) + c)
        env = two_phase(seed=7)
        s = estimate_mu(env, CUBE1, 0.0, [-2.0], 9)
        assert s.value > 0.1
        star = estimate_mu_star(env, CUBE1, 0.0, [2.0], 9)
        assert star.value > 0.1
        assert star.starred

    def test_rising_solutions_give_zero(self):
        env = two_phase(seed=3)
        s = estimate_mu(env, CUBE1, 2.0, [2.0], 9)  # ell above sup F
        assert s.value == 0.0

    def test_sample_row_schema(self):
        s = estimate_mu(two_phase(seed=1), CUBE1, 0.25, [0.5], 9)
        row = s.as_row()
        assert row["level"] == 1
        assert row["anchor"] == "0 0"
        assert row["starred"] == 0
        assert row["refinement"] == 9
        assert set(row) == {"level", "anchor", "ell", "M", "seed", "starred",
                            "method", "refinement", "value"}


class TestEstimateMuStar:
    def test_symmetric_env_star_equals_mirrored_plain(self):
        # with c == 0, F(., omega*) = F(., omega) pointwise, so the starred
        # sample at ell equals the plain sample at -ell on the same seed
        env = sym_env(seed=42)
        a = estimate_mu_star(env, CUBE1, 0.7, [0.0], 9)
        b = estimate_mu(env, CUBE1, -0.7, [0.0], 9)
        assert a.value == b.value

    def test_symmetric_offsets_distributional_match(self):
        spec = two_phase().spec  # offsets symmetric around 0
        s1 = mc_moments(spec, 1, 0.4, [0.0], 200, 9)
        s2 = mc_moments(spec, 1, -0.4, [0.0], 200, 9)
        # mu*(ell) matches mu(-ell) in law; compare paired means within CI
        assert abs(s1.E_star - s2.E) <= s1.E_star_ci + s2.E_ci

    def test_constant_env_star_cases(self):
        env = const_env(K=2.0)
        assert estimate_mu_star(env, CUBE0, 3.0, [0.0], 9).value >= 1.0 / 8 - 1e-15
        assert estimate_mu_star(env, CUBE0, 1.0, [0.0], 9).value == 0.0

    def test_double_involution_identity(self):
        env = two_phase(seed=11)
        a = estimate_mu(env, CUBE1, 0.3, [0.5], 9)
        b = estimate_mu_star(env.involute(), CUBE1, -0.3, [-0.5], 9)
        assert a.value == b.value


class TestMoments:
    def test_deterministic_env_zero_variance(self):
        spec = const_env().spec
        st = mc_moments(spec, 0, 1.0, [0.0], 8, 9)
        assert st.E_ci == 0.0
        assert st.J == pytest.approx(st.E ** 2)

    def test_ci_width_formula(self):
        spec = two_phase(seed=2).spec
        st = mc_moments(spec, 0, 0.0, [0.0], 64, 9)
        sd = np.std(st.values, ddof=1)
        assert st.E_ci == pytest.approx(1.959963984540054 * sd / 8.0)

    def test_moments_deterministic_across_workers(self):
        spec = two_phase(seed=9).spec
        a = mc_moments(spec, 0, 0.0, [0.0], 12, 9, n_jobs=1)
        b = mc_moments(spec, 0, 0.0, [0.0], 12, 9, n_jobs=2)
        assert a.values == b.values
        assert a.values_star == b.values_star

    @pytest.mark.slow
    def test_mean_subadditive_across_levels(self):
        spec = two_phase(seed=30).spec
        stats = [mc_moments(spec, n, 0.0, [0.0], 30, 9) for n in range(4)]
        for a, b in zip(stats, stats[1:]):
            assert b.E <= a.E + a.E_ci + b.E_ci + 1e-12


class TestChecks:
    def test_abp_zero_solution(self):
        env = const_env()
        s, red = estimate_mu(env, CUBE0, 2.0, [0.0], 9, return_solution=True)
        rep = check_abp(red, s)
        assert rep["ratio"] == 0.0
        assert rep["ok"]

    def test_abp_quadratic_hand_case(self):
        from parahom.lattice import Field, GridSpec
        r = 60
        grid = GridSpec(dimension=1, dx=1 / r, dt=1 / r, shape=(r + 1,),
                        steps=r, origin=(-0.5,), t0=0.0)
        f = Field.from_function(grid, lambda x, t: -t + 0.5 * x * x)
        value = subdiff_measure_fiber(f).value
        sample = MuSample(cube=CUBE0, ell=0.0, M=(0.0,), seed=0, value=value,
                          starred=False, method="fiber", refinement=r,
                          solution_measure=value, floor=0.0)
        rep = check_abp(f, sample)
        # lateral boundary stops at the second-to-last slice (the final slice
        # is not parabolic boundary): inf_bdry = -(1 - dt) + 1/8, inf cube = -1
        assert rep["numerator"] == pytest.approx(0.125 + 1.0 / r)
        assert rep["ratio"] <= 1.0  # cone constant is 1 in d=1
        assert rep["ok"]

    def test_abp_random_sweep(self):
        bound = ptf_constant(1)
        for i in range(30):
            env = two_phase(seed=500 + i)
            cube = [CUBE0, CUBE1][i % 2]
            ell = [-0.6, 0.0, 0.4][i % 3]
            s, red = estimate_mu(env, cube, ell, [0.0], 9, return_solution=True)
            rep = check_abp(red, s)
            assert rep["ratio"] <= bound * 1.1

    def test_abp_flags_violation_as_inf(self):
        s = MuSample(cube=CUBE0, ell=0.0, M=(0.0,), seed=0, value=0.0,
                     starred=False, method="fiber", refinement=9,
                     solution_measure=0.0, floor=0.0)

        class FakeRed:
            pass

        from parahom.solver import ReducedSolution
        from parahom.lattice import grid_for_cube
        g = grid_for_cube(CUBE0, 9, 1.0)
        red = ReducedSolution(grid=g, u0=np.zeros(10), run_min=np.full(10, -1.0),
                              run_max=np.zeros(10), boundary_min=0.0,
                              boundary_max=0.0, lateral_constant=True,
                              steps=g.steps, wall_time=0.0)
        rep = check_abp(red, s)
        assert math.isinf(rep["ratio"])
        assert not rep["ok"]

    def test_bounds_zero_above_sup(self):
        env = two_phase(seed=8)
        s = estimate_mu(env, CUBE1, 3.0, [0.0], 9)
        rep = check_bounds(env, CUBE1, 3.0, [0.0], s)
        assert s.value == 0.0
        assert rep["upper"] == 0.0
        assert rep["ok"]

    def test_bounds_constant_env(self):
        env = const_env()
        s = estimate_mu(env, CUBE0, 1.0, [0.0], 9)
        rep = check_bounds(env, CUBE0, 1.0, [0.0], s)
        assert rep["lower"] == pytest.approx(1.0 / 8)
        assert rep["ok"]

    def test_bounds_random_sweep(self):
        for i in range(25):
            env = two_phase(seed=900 + i)
            cube = [CUBE0, CUBE1][i % 2]
            ell = [-1.0, -0.25, 0.5][i % 3]
            M = [(-1.0,), (0.0,), (1.0,)][i % 3]
            fn = estimate_mu if i % 2 else estimate_mu_star
            s = fn(env, cube, ell, list(M), 9)
            rep = check_bounds(env, cube, ell, list(M), s, slack=0.10)
            assert rep["ok"], rep

    def test_subadd_deterministic_near_equality(self):
        rep = check_subadditivity(const_env(), CubeIndex(2, (0,), 0), -1.0,
                                  [0.0], 9, slack=0.05)
        assert rep["ok"]
        assert rep["parent"] == pytest.approx(rep["child_mean"], rel=0.05)

    def test_subadd_zero_case(self):
        rep = check_subadditivity(const_env(), CUBE1, 2.0, [0.0], 9)
        assert rep["parent"] == 0.0
        assert rep["ok"]

    def test_subadd_random_sweep(self):
        for i in range(10):
            env = two_phase(seed=2000 + i)
            cube = CubeIndex([1, 2][i % 2], (0,), 0)
            rep = check_subadditivity(env, cube, [-0.5, 0.0][i % 2], [0.0], 9)
            assert rep["ok"], rep

    def test_subadd_cube_ambient_is_exact_partition(self):
        env = two_phase(seed=77)
        rep = check_subadditivity(env, CUBE1, 0.0, [0.0], 9, ambient="cube")
        assert rep["parent"] == pytest.approx(rep["child_mean"], rel=1e-10)

    def test_lipschitz_flat_tail_and_monotone(self):
        spec = two_phase(seed=4).spec
        rep = check_lipschitz_ell(spec, 1, [0.0], [-0.5, 0.0, 0.5, 2.0, 3.0], 40, 9)
        assert rep["monotone_ok"]
        assert rep["E"][-1] == 0.0 and rep["E"][-2] == 0.0  # beyond sup F
        assert rep["lipschitz_C"] > 0

    def test_paired_zero_shift_identical(self):
        spec = two_phase(seed=6).spec
        a = mc_moments(spec, 1, 0.25, [0.0], 16, 9)
        b = mc_moments(spec, 1, 0.25, [0.0], 16, 9)
        assert a.values == b.values

    def test_per_sample_monotone_in_ell(self):
        for seed in range(6):
            env = two_phase(seed=seed)
            vals = [estimate_mu(env, CUBE1, ell, [0.0], 9).value
                    for ell in (-0.5, 0.0, 0.5)]
            assert vals[0] >= vals[1] - 1e-8 >= vals[2] - 2e-8

    def test_variance_decay_trivial_cases(self):
        spec = const_env().spec
        st = mc_moments(spec, 0, 1.0, [0.0], 8, 9)
        rep = check_variance_decay(st, st, 1)  # n = 0: always true
        assert rep["ok"]
        assert rep["mix_constant"] == pytest.approx(9.0)

    def test_variance_decay_holds_small_n(self):
        spec = two_phase(seed=15).spec
        s0 = mc_moments(spec, 0, 0.0, [0.0], 80, 9)
        s1 = mc_moments(spec, 1, 0.0, [0.0], 80, 9)
        rep = check_variance_decay(s0, s1, 1)
        assert rep["ok"]


class TestInvariances:
    def test_affine_boundary_shift_leaves_measure(self):
        env = two_phase(seed=13)
        grid = grid_for_cube(CUBE1, 9, 2.0)
        base = solve_dirichlet(SolveRequest(env=env, M=np.zeros(1), ell=-0.4,
                                            grid=grid))
        m0 = subdiff_measure_fiber(base.field)
        p0 = 2 * m0.slope_step

        def shifted(x, t):
            return p0 * x + 0.3

        mod = solve_dirichlet(SolveRequest(env=env, M=np.zeros(1), ell=-0.4,
                                           grid=grid, boundary=shifted))
        m1 = subdiff_measure_fiber(mod.field)
        assert m1.value == pytest.approx(m0.value, rel=1e-10, abs=1e-12)

    def test_rerun_byte_identical(self):
        env = two_phase(seed=21)
        a = estimate_mu(env, CUBE1, 0.1, [0.3], 9)
        b = estimate_mu(env, CUBE1, 0.1, [0.3], 9)
        assert a == b

    def test_probe_boundary_only_increases(self):
        env = two_phase(seed=23)
        plain = estimate_mu(env, CUBE1, 0.0, [0.0], 9)
        probed = estimate_mu(env, CUBE1, 0.0, [0.0], 9, probe_boundary=3)
        assert probed.value >= plain.value


def test_stats_from_pairs_cauchy_schwarz():
    st = stats_from_pairs(0, 0.0, (0.0,), [0.1, 0.3, 0.2], [0.0, 0.1, 0.05])
    assert st.J >= st.E ** 2 - 1e-15
    assert st.n == 3


class TestTwoDimensional:
    def test_estimate_mu_d2_floor_and_zero(self):
        spec = EnvironmentSpec(dimension=2, lam=1.0, Lam=1.0, family="linear",
                               controls=((1.0, 1.0),), offset_range=(2.0, 2.0),
                               seed=0)
        env = Environment(spec)
        cube = CubeIndex(0, (0, 0), 0)
        assert estimate_mu(env, cube, 2.0, [0.0, 0.0], 6).value == 0.0
        s = estimate_mu(env, cube, 1.0, [0.0, 0.0], 6)
        # eta = 1, d = 2: floor is (1/4) (1/(4 Lambda))^2
        assert s.value >= 0.25 / 16 - 1e-15

    def test_abp_and_bounds_d2(self):
        spec = EnvironmentSpec(dimension=2, lam=1.0, Lam=2.0, family="linear",
                               controls=((1.0, 1.0), (2.0, 2.0)),
                               offset_range=(-0.5, 0.5), seed=4)
        env = Environment(spec)
        cube = CubeIndex(0, (0, 0), 0)
        for i in range(4):
            e = Environment(spec).with_seed(1000 + i)
            sample, red = estimate_mu(e, cube, -0.5, [0.0, 0.0], 6,
                                      return_solution=True)
            rep = check_abp(red, sample)
            assert rep["ratio"] <= ptf_constant(2) * 1.1
            brep = check_bounds(e, cube, -0.5, [0.0, 0.0], sample, slack=0.10)
            assert brep["ok"]
