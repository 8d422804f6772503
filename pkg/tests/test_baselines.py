import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import brentq

from fatigue_sr.baselines import (CRITERIA, REV_BOUNDS, InvalidDamage, LoadState, MaterialProperties,
                                  NoRootInBracket, UnknownCriterion, critical_plane, damage_sides, load_material,
                                  load_state, predict_dataset, solve_life)

from oracles import axial_rhs, brute_force_plane, criterion_sides, mohr_proportional, shear_rhs


def invert(curve, target):
    """2N_f at which a decreasing life curve equals ``target`` (reference root finder)."""
    x = brentq(lambda x: curve(10.0 ** x) - target, 0.0, math.log10(REV_BOUNDS[1]), xtol=1e-14, rtol=1e-15)
    return 10.0 ** x


class TestMaterial:
    @pytest.mark.parametrize("name", ["GH4169_25C", "TC4_25C", "GH4169_650C"])
    def test_bundled(self, name):
        m = load_material(name)
        assert m.E > 0 and m.G > 0 and max(m.b, m.c, m.b0, m.c0) < 0
        assert m.nu_p == 0.5

    def test_table_values(self, gh25):
        assert (gh25.E, gh25.G, gh25.tau_f_prime, gh25.b0, gh25.gamma_f_prime, gh25.c0) == \
            (198.5, 67.0, 1091.6, -0.07, 4.46, -0.77)

    def test_torsional_approximations(self):
        m = MaterialProperties(E=200, G=80, sigma_y=500, nu_e=0.3, sigma_f_prime=900, b=-0.1, eps_f_prime=0.4, c=-0.6)
        assert m.tau_f_prime == pytest.approx(900 / math.sqrt(3), rel=1e-15)
        assert m.gamma_f_prime == pytest.approx(math.sqrt(3) * 0.4, rel=1e-15)
        assert (m.b0, m.c0) == (-0.1, -0.6)

    @pytest.mark.parametrize("kw", [dict(E=0), dict(b=0.1), dict(eps_f_prime=-1)])
    def test_invalid(self, kw):
        base = dict(E=200, G=80, sigma_y=500, nu_e=0.3, sigma_f_prime=900, b=-0.1, eps_f_prime=0.4, c=-0.6)
        with pytest.raises(ValueError):
            MaterialProperties(**{**base, **kw})

    def test_file_round_trip(self, tmp_path):
        p = tmp_path / "steel.ini"
        p.write_text("[material]\nE = 210\nG = 80\nsigma_y = 400\nnu_e = 0.3\n"
                     "sigma_f_prime = 1000\nb = -0.09\neps_f_prime = 0.3\nc = -0.55\n")
        m = load_material(p)
        assert m.name == "steel" and m.E == 210.0

    def test_unknown_field(self, tmp_path):
        p = tmp_path / "bad.ini"
        p.write_text("[material]\nE = 210\nYoung = 3\n")
        with pytest.raises(ValueError):
            load_material(p)

    def test_missing(self):
        with pytest.raises(FileNotFoundError):
            load_material("unobtainium")


class TestCriticalPlane:
    def test_pure_torsion(self, gh25):
        cp = critical_plane(LoadState(0.0, 0.01, 0.0, 300.0, 0.0), gh25)
        assert cp.max_shear_amp == pytest.approx(0.01, rel=1e-12)
        assert cp.plane_angle_deg % 90 == pytest.approx(0.0, abs=1e-6)

    def test_pure_axial(self):
        m = MaterialProperties(E=200, G=80, sigma_y=500, nu_e=0.3, sigma_f_prime=900, b=-0.1, eps_f_prime=0.4,
                               c=-0.6)
        cp = critical_plane(LoadState(0.004, 0.0, 500.0, 0.0, 0.0), m)
        assert cp.max_shear_amp == pytest.approx(1.3 * 0.004, rel=1e-12)
        assert cp.plane_angle_deg in (pytest.approx(45.0, abs=1e-6), pytest.approx(135.0, abs=1e-6))
        assert cp.normal_strain_range == pytest.approx(0.7 * 0.004, rel=1e-9)
        assert cp.max_normal_stress == pytest.approx(250.0, rel=1e-9)

    @settings(max_examples=40, deadline=None)
    @given(st.floats(0.0, 0.02), st.floats(0.0, 0.03), st.floats(0, 1500), st.floats(0, 800))
    def test_proportional_matches_mohr(self, gh25, eps, gam, sig, tau):
        if eps + gam < 1e-6:
            return
        cp = critical_plane(LoadState(eps, gam, sig, tau, 0.0), gh25)
        shear, strain_range, peak = mohr_proportional(eps, gam, sig, tau, gh25.nu_e)
        assert cp.max_shear_amp == pytest.approx(shear, rel=1e-6)
        assert cp.normal_strain_range == pytest.approx(strain_range, rel=1e-6, abs=1e-8 * (eps + gam))
        assert cp.max_normal_stress == pytest.approx(peak, rel=1e-6, abs=1e-6)

    @settings(max_examples=12, deadline=None)
    @given(st.floats(0.001, 0.01), st.floats(0.001, 0.02), st.floats(100, 1200), st.floats(100, 600),
           st.sampled_from([0.0, 22.5, 45.0, 60.0, 90.0]))
    def test_matches_brute_force(self, gh25, eps, gam, sig, tau, phase):
        cp = critical_plane(LoadState(eps, gam, sig, tau, phase), gh25)
        amp, _ = brute_force_plane(eps, gam, sig, tau, phase, gh25.nu_e)
        assert cp.max_shear_amp == pytest.approx(amp, rel=5e-3)
        # the phasor maximum can only exceed a sampled one
        assert cp.max_shear_amp >= amp * (1 - 1e-9)

    def test_brute_force_drivers_nonproportional(self, gh25):
        amp, (rng_, peak, _) = brute_force_plane(0.004, 0.006, 700, 300, 90.0, gh25.nu_e, n_theta=7200)
        cp = critical_plane(LoadState(0.004, 0.006, 700, 300, 90.0), gh25)
        assert cp.max_shear_amp == pytest.approx(amp, rel=1e-4)
        assert cp.normal_strain_range == pytest.approx(rng_, rel=5e-3)
        assert cp.max_normal_stress == pytest.approx(peak, rel=5e-3)

    def test_resolution_convergence_on_data1(self, data1, gh25):
        for rec in data1:
            a = critical_plane(load_state(rec), gh25, step_deg=0.5)
            b = critical_plane(load_state(rec), gh25, step_deg=0.05)
            for x, y in [(a.max_shear_amp, b.max_shear_amp), (a.normal_strain_range, b.normal_strain_range),
                         (a.max_normal_stress, b.max_normal_stress)]:
                assert x == pytest.approx(y, rel=1e-3)

    def test_angle_range(self, data1, gh25):
        for rec in data1:
            cp = critical_plane(load_state(rec), gh25)
            assert 0 <= cp.plane_angle_deg < 180 and cp.max_shear_amp >= 0


class TestSolveLife:
    def test_cm_shear_example(self, gh25):
        n, res = solve_life("cm_shear", LoadState(0.0, 0.01598, 0.0, 300.0, 90.0), gh25)
        assert n == pytest.approx(invert(lambda r: shear_rhs(gh25, r), 0.01598) / 2, rel=1e-9)
        assert n == pytest.approx(2.2e3, rel=0.02)
        assert res < 1e-10

    def test_cm_axial_inversion(self, gh25):
        n, res = solve_life("cm_axial", LoadState(0.006, 0.0, 900.0, 0.0, 0.0), gh25)
        assert n == pytest.approx(invert(lambda r: axial_rhs(gh25, r), 0.006) / 2, rel=1e-9)
        assert res < 1e-10

    @pytest.mark.parametrize("crit", CRITERIA)
    def test_monotone_bracketing(self, crit, gh25):
        load = LoadState(0.004, 0.005, 700.0, 250.0, 45.0)
        cp = critical_plane(load, gh25)
        n, _ = solve_life(crit, load, gh25, whs_k=0.6)
        lo = damage_sides(crit, load, cp, gh25, 2 * n * 0.99, whs_k=0.6)
        hi = damage_sides(crit, load, cp, gh25, 2 * n * 1.01, whs_k=0.6)
        assert lo[1] > lo[0] and hi[1] < hi[0]

    @pytest.mark.parametrize("crit", CRITERIA)
    def test_sides_match_oracle(self, crit, gh25):
        load = LoadState(0.004, 0.005, 700.0, 250.0, 0.0)
        cp = critical_plane(load, gh25)
        shear, strain_range, peak = mohr_proportional(0.004, 0.005, 700.0, 250.0, gh25.nu_e)
        for rev in (10.0, 3e3, 1e6):
            got = damage_sides(crit, load, cp, gh25, rev, whs_k=0.6)
            want = criterion_sides(crit, gh25, shear, strain_range, peak, 0.004, rev)
            assert got == pytest.approx(want, rel=1e-8)

    @pytest.mark.parametrize("crit", CRITERIA)
    @pytest.mark.parametrize("life", [800.0, 5e3, 3e4])
    def test_round_trip(self, crit, life, gh25):
        # find the load scale whose damage equals the criterion's own curve at 2N = 2*life
        shape = (0.004, 0.006, 800.0, 350.0)

        def gap(s):
            e, g, sg, t = (v * s for v in shape)
            sh, rg, pk = mohr_proportional(e, g, sg, t, gh25.nu_e)
            lhs, rhs = criterion_sides(crit, gh25, sh, rg, pk, e, 2 * life)
            return lhs - rhs

        s = brentq(gap, 1e-3, 50.0, xtol=1e-15, rtol=1e-15)
        load = LoadState(*(v * s for v in shape), 0.0)
        n, res = solve_life(crit, load, gh25, whs_k=0.6)
        assert n == pytest.approx(life, rel=1e-3)
        assert res < 1e-10

    @pytest.mark.parametrize("crit", CRITERIA)
    def test_scaling_decreases_life(self, crit, data1, gh25):
        for rec in data1:
            load = load_state(rec)
            try:
                n0, _ = solve_life(crit, load, gh25, whs_k=0.6)
                n1, _ = solve_life(crit, load.scaled(1.5), gh25, whs_k=0.6)
            except (NoRootInBracket, InvalidDamage):
                continue
            assert n1 < n0

    @pytest.mark.parametrize("crit", ["kbm", "fs", "whs", "mwhs"])
    def test_pure_axial_finite(self, crit, gh25):
        n, _ = solve_life(crit, LoadState(0.006, 0.0, 900.0, 0.0, 0.0), gh25, whs_k=0.6)
        assert math.isfinite(n) and n > 0

    def test_invalid_damage(self, gh25):
        with pytest.raises(InvalidDamage):
            solve_life("cm_shear", LoadState(0.0, 0.0, 0.0, 0.0, 0.0), gh25)
        with pytest.raises(InvalidDamage):
            solve_life("cm_axial", LoadState(0.0, 0.01, 0.0, 300.0, 0.0), gh25)

    def test_no_root_above(self, gh25):
        with pytest.raises(NoRootInBracket):
            solve_life("cm_shear", LoadState(0.0, 20.0, 0.0, 300.0, 0.0), gh25)

    def test_no_root_below(self, gh25):
        with pytest.raises(NoRootInBracket):
            solve_life("cm_shear", LoadState(0.0, 1e-9, 0.0, 1e-3, 0.0), gh25)

    def test_unknown_criterion(self, gh25):
        with pytest.raises(UnknownCriterion):
            solve_life("swt", LoadState(0.01, 0.0, 1.0, 0.0, 0.0), gh25)

    def test_whs_needs_k(self, gh25):
        with pytest.raises(ValueError):
            solve_life("whs", LoadState(0.004, 0.0, 700.0, 0.0, 0.0), gh25)


class TestPredictDataset:
    @pytest.mark.parametrize("crit", CRITERIA)
    def test_residuals_on_data1(self, crit, data1, gh25):
        out = predict_dataset(crit, data1, gh25)
        assert len(out.predicted) == len(data1)
        ok = np.isfinite(out.predicted)
        assert np.all(out.residuals[ok] < 1e-10)
        assert all(bool(f) == (not o) for f, o in zip(out.flags, ok))

    def test_percent_conversion(self, data1, gh25):
        out = predict_dataset("cm_shear", data1, gh25)
        rec = data1[0]
        manual = LoadState(rec.eps_a_pct / 100, rec.gamma_a_pct / 100, rec.sigma_a_mpa, rec.tau_a_mpa, rec.phase_deg)
        assert out.predicted[0] == solve_life("cm_shear", manual, gh25)[0]

    def test_whs_calibrated(self, data1, gh25):
        out = predict_dataset("whs", data1, gh25)
        assert 0 <= out.whs_k <= 10
        obs = np.array([r.nf_cycles for r in data1])
        ratio = out.predicted / obs
        assert np.mean((ratio >= 1 / 3) & (ratio <= 3)) > 0.5

    def test_cm_axial_on_torsion_rows_does_not_crash(self, data1, gh25):
        out = predict_dataset("cm_axial", data1, gh25)
        assert len(out.flags) == len(data1)
