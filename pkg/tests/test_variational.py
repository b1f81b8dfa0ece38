from fractions import Fraction

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.integrate import quad, solve_ivp

from stochnls import (
    F_P,
    F_PS,
    SOLITON_CONST,
    AmplitudeProblem,
    AmplitudeSolveError,
    BoundQuery,
    FieldState,
    ModelParams,
    SolitonParamPath,
    SpatialGrid,
    action_soliton_param,
    amplitude_coefficients,
    amplitude_problem,
    amplitude_solve,
    amplitude_time_map,
    control_from_eta,
    full_param_solve,
    gamma_sweep,
    l2_norm_sq,
    laplacian,
    minimax_gamma,
    prop7_upper,
    prop8_lower,
    soliton,
    soliton_param_solution,
    write_sweep_csv,
)
from stochnls.variational import SECH_RATIONALS, SWEEP_COLUMNS

GRID = SpatialGrid(1024, 20.0 * np.pi)
K = (12 + np.pi**2) / 9


# ------------------------------------------------------------ closed forms

def _mp_upper(g, T, c):
    g, T, c = mp.mpf(g), mp.mpf(T), mp.mpf(c)
    return (-(1 - g) / (2 * T * c**2),
            -((1 + g) / (T * c**2)) * (mp.sqrt(1 + (g / (1 + g)) ** 2) - 1))


def _mp_lower(g, T):
    g, T = mp.mpf(g), mp.mpf(T)
    k = (12 + mp.pi**2) / 9
    return -2 * (1 - g) * k / T, -2 * (2 - g - 2 * mp.sqrt(1 - g)) * k / T


@given(st.floats(0.0, 1.0), st.floats(0.1, 50.0), st.floats(0.2, 5.0))
def test_bounds_match_high_precision(g, T, c):
    up = prop7_upper(BoundQuery(g, T, c))
    lo = prop8_lower(BoundQuery(g, T, c))
    with mp.workdps(700):  # gamma^2 down to the smallest subnormal still cancels cleanly
        want_all = _mp_upper(g, T, c) + _mp_lower(g, T)
    for got, want in zip(up + lo, want_all):
        assert got == pytest.approx(float(want), rel=1e-12, abs=1e-300)


def test_bound_query_validation():
    for bad in ((-0.1, 1, 1), (1.1, 1, 1), (0.5, 0, 1), (0.5, 1, 0)):
        with pytest.raises(ValueError):
            BoundQuery(*bad)


def test_upper_bound_special_values():
    T = 10.0
    up = prop7_upper(BoundQuery(5 / 7, T))
    assert up.worst == pytest.approx(-1 / 70, rel=1e-12)
    assert up.exp0 == pytest.approx(up.exp1, rel=1e-12)
    z = prop7_upper(BoundQuery(0.0, T))
    assert z.exp0 == -1 / (2 * T) and z.exp1 == 0.0
    one = prop7_upper(BoundQuery(1.0, T))
    assert one.exp0 == 0.0
    assert one.exp1 == pytest.approx(float(-(2 / mp.mpf(T)) * (mp.sqrt(mp.mpf(5) / 4) - 1)),
                                     rel=1e-14)
    assert minimax_gamma(prop7_upper, T) == pytest.approx(5 / 7, abs=1e-12)


def test_lower_bound_special_values():
    T = 10.0
    lo = prop8_lower(BoundQuery(0.75, T))
    assert lo.worst == pytest.approx(-(12 + np.pi**2) / (18 * T), rel=1e-12)
    assert prop8_lower(BoundQuery(1.0, T)).exp1 == pytest.approx(-2 * K / T, rel=1e-14)
    z = prop8_lower(BoundQuery(0.0, T))
    assert z.exp0 == pytest.approx(-2 * K / T, rel=1e-14) and z.exp1 == 0.0
    assert minimax_gamma(prop8_lower, T) == pytest.approx(0.75, abs=1e-12)


def test_bound_monotonicity_in_gamma():
    gs = np.linspace(0.0, 1.0, 101)
    up = np.array([prop7_upper(BoundQuery(g, 10.0)) for g in gs])
    lo = np.array([prop8_lower(BoundQuery(g, 10.0)) for g in gs])
    # error-0 exponents rise toward 0 as the threshold drops; error-1 exponents fall
    for arr in (up, lo):
        assert np.all(np.diff(arr[:, 0]) > 0)
        assert np.all(np.diff(arr[:, 1]) < 0)
    # upper bounds sit above the lower bounds
    assert np.all(up >= lo - 1e-15)


# ------------------------------------------------- soliton-parameter paths

@given(st.floats(0.0, 1.0), st.floats(0.5, 30.0))
def test_soliton_paths_boundary_values_and_el(g, T):
    for kind, start in (("null_datum", 0.0), ("soliton_datum_2", 1.0), ("soliton_datum_1", 1.0)):
        p = soliton_param_solution(kind, g, T)
        assert p.eta(0.0) == pytest.approx(start, abs=1e-14)
        assert p.eta(T) == pytest.approx(1 - g, abs=1e-12)
        assert p.b**2 == pytest.approx(4 * p.a * p.c, rel=1e-12, abs=1e-15)
        assert np.max(np.abs(p.el_residual_poly().coef)) <= 1e-10


def test_soliton_datum_2_expansion():
    g, T = 0.36, 7.0
    p = soliton_param_solution("soliton_datum_2", g, T)
    s = np.sqrt(1 - g)
    assert p.a * T**2 == pytest.approx(2 - g - 2 * s, rel=1e-14)
    assert p.b * T == pytest.approx(2 * (-1 + s), rel=1e-14)
    assert p.c == 1.0
    flat = soliton_param_solution("soliton_datum_2", 0.0, T)
    assert np.allclose(flat.poly.coef, [1.0, 0.0, 0.0])
    assert action_soliton_param(flat).closed_form == 0.0
    with pytest.raises(ValueError):
        soliton_param_solution("other", 0.5, 1.0)


@pytest.mark.parametrize("g", [0.1, 0.5, 0.9])
def test_soliton_param_actions(g):
    T = 10.0
    s = np.sqrt(1 - g)
    a0 = action_soliton_param(soliton_param_solution("null_datum", g, T))
    a2 = action_soliton_param(soliton_param_solution("soliton_datum_2", g, T))
    a1 = action_soliton_param(soliton_param_solution("soliton_datum_1", g, T))
    assert a0.closed_form == pytest.approx(2 * (1 - g) * K / T, rel=1e-14)
    assert a2.closed_form == pytest.approx(2 * (2 - g - 2 * s) * K / T, rel=1e-14)
    assert a1.closed_form == pytest.approx(2 * (2 - g + 2 * s) * K / T, rel=1e-14)
    assert a1.closed_form > a2.closed_form
    for a in (a0, a2):
        assert a.quadrature == pytest.approx(a.closed_form, rel=1e-10)
    # eta^{1,1} touches zero inside the interval; the quadrature integrates through it
    assert a1.quadrature == pytest.approx(a1.closed_form, rel=1e-8)


@given(st.floats(0.05, 3.0), st.floats(0.05, 3.0), st.floats(0.5, 20.0), st.floats(0.3, 4.0))
def test_action_scaling_law(ea, eb, T, lam):
    def path(e0, e1, TT):
        c0, c1 = np.sqrt(e0), (np.sqrt(e1) - np.sqrt(e0)) / TT
        return SolitonParamPath("custom", 0.0, TT, c1**2, 2 * c0 * c1, c0**2)

    base = action_soliton_param(path(ea, eb, T)).quadrature
    scaled_bv = action_soliton_param(path(lam * ea, lam * eb, T)).quadrature
    scaled_T = action_soliton_param(path(ea, eb, lam * T)).quadrature
    assert scaled_bv == pytest.approx(lam * base, rel=1e-9, abs=1e-14)
    assert scaled_T == pytest.approx(base / lam, rel=1e-9, abs=1e-14)


def test_soliton_constant_from_grid_quadrature():
    # |h|^2 for a dilating soliton: 2 eta'^2 / eta * int (sech - y tanh sech)^2 dy
    val = quad(lambda y: (1 / np.cosh(y) - y * np.tanh(y) / np.cosh(y)) ** 2, -50, 50,
               epsabs=0, epsrel=1e-13, limit=200)[0]
    assert 2 * val == pytest.approx(SOLITON_CONST, rel=1e-12)


@pytest.mark.parametrize("g", [0.25, 0.5, 0.75])
def test_control_from_eta_node_norms(g):
    p = soliton_param_solution("soliton_datum_2", g, 10.0)
    h = control_from_eta(p, GRID, n_times=401)
    t = h.times + h.start
    F = K * p.deta(t) ** 2 / p.eta(t)
    assert np.max(np.abs(h.node_norms_sq() - F) / F) <= 1e-6
    act = action_soliton_param(p).closed_form
    assert 0.5 * h.l2_norm_sq == pytest.approx(act, rel=1e-6)


def test_constant_eta_gives_zero_control():
    p = soliton_param_solution("soliton_datum_2", 0.0, 5.0)
    h = control_from_eta(p, GRID, n_times=11)
    assert np.max(np.abs(h.fields)) == 0.0


def test_null_datum_control_offset():
    p = soliton_param_solution("null_datum", 0.5, 10.0)
    h = control_from_eta(p, GRID, n_times=11, delta=1e-3)
    assert h.start == 1e-3 and h.times[0] == 0.0
    assert np.allclose(h.at(0.0), h.fields[0])


# -------------------------------------------------------- amplitude problem

def _sech_coeff_oracle():
    # analytic u0 = sqrt2 sech: u0'' = sqrt2 (sech - 2 sech^3), |u0|^2 u0 = 2 sqrt2 sech^3
    s = lambda x: 1 / np.cosh(x)
    lap = lambda x: np.sqrt(2) * (s(x) - 2 * s(x) ** 3)
    nl = lambda x: 2 * np.sqrt(2) * s(x) ** 3
    q = lambda f: quad(f, -40, 40, epsabs=0, epsrel=1e-13, limit=200)[0]
    return (q(lambda x: 2 * s(x) ** 2), q(lambda x: lap(x) ** 2), q(lambda x: lap(x) * nl(x)),
            q(lambda x: nl(x) ** 2))


def test_amplitude_coefficients_rationals():
    got = amplitude_coefficients(soliton(1.0, 0.0, GRID))
    oracle = _sech_coeff_oracle()
    np.testing.assert_allclose(oracle, SECH_RATIONALS, rtol=1e-12)
    np.testing.assert_allclose(got, SECH_RATIONALS, rtol=1e-8)
    assert [Fraction(c).limit_denominator(100) for c in SECH_RATIONALS] == \
        [Fraction(4), Fraction(28, 15), Fraction(-16, 5), Fraction(128, 15)]


def test_amplitude_el_coefficients_match_displayed_ode():
    prob = amplitude_problem(soliton(1.0, 0.0, GRID), ModelParams(), 1.0, 0.7, 10.0)
    c1, c3, c5 = prob.normalized_el_coefficients()
    # 15 f'' = 7 f - 48 f^3 + 96 f^5
    np.testing.assert_allclose([15 * c1, 15 * c3, 15 * c5], [7, -48, 96], rtol=1e-8)
    # the force is the derivative of half the potential
    f = np.linspace(0.1, 1.2, 7)
    dV = (prob.potential(f + 1e-6) - prob.potential(f - 1e-6)) / 2e-6
    np.testing.assert_allclose(prob.force(f), 0.5 * dV, rtol=1e-7)


def test_amplitude_constant_candidate_residual():
    prob = AmplitudeProblem(*SECH_RATIONALS, 1.0, 0.3, 0.3, 5.0)
    for c in (0.0, 0.3, 0.8):
        # f'' = 0 for a constant, so the EL residual is -force(c) = -(7c - 48c^3 + 96c^5)/15
        assert -prob.force(c) == pytest.approx(-(7 * c - 48 * c**3 + 96 * c**5) / 15,
                                               abs=1e-14)


def test_soliton_coefficient_guard():
    u0 = soliton(1.0, 0.0, GRID)
    with pytest.raises(ValueError):
        amplitude_problem(FieldState(u0.values * (1 + 1e-4), GRID), ModelParams(), 1.0, 0.5,
                          10.0, check_soliton=True)


@pytest.mark.parametrize("f0,g", [(0.0, 0.3), (0.0, 0.9), (1.0, 0.3), (1.0, 0.75)])
def test_amplitude_solve_properties(f0, g):
    T = 10.0
    prob = AmplitudeProblem(*SECH_RATIONALS, 1.0, f0, np.sqrt(1 - g), T)
    sol = amplitude_solve(prob)
    assert sol.residual <= 1e-8 and sol.residual_offnode <= 1e-8
    assert sol.f[0] == pytest.approx(f0, abs=1e-14) and sol.f[-1] == pytest.approx(prob.fT)
    # independent time-map oracle for the action
    assert sol.action == pytest.approx(amplitude_time_map(prob).action, rel=1e-8)
    # re-integrating the ODE from the solved initial slope lands on the end value
    ivp = solve_ivp(lambda _, y: [y[1], prob.force(y[0])], (0, T), [f0, sol.fp[0]],
                    method="DOP853", rtol=1e-12, atol=1e-14)
    assert ivp.y[0, -1] == pytest.approx(prob.fT, abs=1e-6)
    fine = amplitude_solve(prob, mesh_n=256)
    assert fine.action == pytest.approx(sol.action, rel=1e-8)


def test_amplitude_solve_strategies_agree():
    prob = AmplitudeProblem(*SECH_RATIONALS, 1.0, 1.0, 0.5, 10.0)
    a = amplitude_solve(prob, strategy="auto")
    b = amplitude_solve(prob, strategy="collocation")
    assert a.action == pytest.approx(b.action, rel=1e-9)
    assert a(np.array([0.0, 10.0])) == pytest.approx([1.0, 0.5], abs=1e-12)


def test_amplitude_solve_input_checks():
    prob = AmplitudeProblem(*SECH_RATIONALS, 1.0, 1.0, 0.5, 10.0)
    with pytest.raises(ValueError):
        amplitude_solve(prob, mesh_n=32)
    err = AmplitudeSolveError("x", ["a", "b"])
    assert err.history == ["a", "b"]


# --------------------------------------------------- full parametrization

@pytest.mark.parametrize("g", [0.25, 0.5, 0.75])
def test_full_parametrization_reduces_to_soliton_path(g):
    st_ = full_param_solve(g, 10.0)
    ref = soliton_param_solution("soliton_datum_2", g, 10.0)
    assert np.max(np.abs(st_.dy)) <= 1e-6
    assert np.max(np.abs(st_.eta - ref.eta(st_.t))) <= 1e-6
    assert st_.action == pytest.approx(action_soliton_param(ref).closed_form, rel=1e-6)


def test_position_momentum_conserved():
    from stochnls.variational import _full_rhs
    sol = solve_ivp(_full_rhs, (0, 3), [1.0, -0.1, 0.0, 0.2], method="DOP853", rtol=1e-12,
                    atol=1e-14, dense_output=True)
    t = np.linspace(0, 3, 50)
    eta, _, _, dy = sol.sol(t)
    q = eta**3 * dy
    assert np.max(np.abs(q - q[0])) < 1e-10


@given(st.floats(0.2, 3.0), st.floats(-1.0, 1.0), st.floats(-1.0, 1.0))
def test_reduced_lagrangian_is_control_norm(eta, deta, dy):
    # grid norm of the residual of sqrt2 eta sech(eta (x - y)) exp(-i int eta^2)
    g = SpatialGrid(2048, 60.0)
    x = g.x

    def psi(t):
        e = eta + deta * t
        y = dy * t
        return np.sqrt(2) * e / np.cosh(e * (x - y)) * np.exp(-1j * eta**2 * t)

    h = 1e-4
    ut = (psi(h) - psi(-h)) / (2 * h)
    u = psi(0.0)
    r = 1j * ut - laplacian(u, g) - np.abs(u) ** 2 * u
    assert l2_norm_sq(r, g) == pytest.approx(F_PS(eta, deta, dy), rel=1e-6, abs=1e-9)


def test_augmented_lagrangian_reductions():
    Z, P = (1.3, 0.2, 0.0, 0.4), (0.5, 0.0, 0.0, 0.7)
    assert F_P(Z, P) == pytest.approx(F_PS(1.3, 0.5, 0.7), rel=1e-15)
    # the phase/frequency part is 4 z1 (p2 + p3 z4)^2 + pi^2 p3^2 / (3 z1)
    Z, P = (1.3, 0.2, -0.1, 0.4), (0.5, 0.3, -0.2, 0.7)
    extra = 4 * 1.3 * (0.3 - 0.2 * 0.4) ** 2 + np.pi**2 * 0.04 / (3 * 1.3)
    assert F_P(Z, P) == pytest.approx(F_PS(1.3, 0.5, 0.7) + extra, rel=1e-14)


# -------------------------------------------------------------------- sweep

def test_gamma_sweep_small(tmp_path):
    rows = gamma_sweep(10.0, 1.0, gammas=[5 / 7, 0.75])
    r57, r34 = rows
    assert r57["upper0"] == pytest.approx(-1 / 70, rel=1e-12)
    assert r57["upper1"] == pytest.approx(-1 / 70, rel=1e-12)
    assert r34["lower0_solparam"] == pytest.approx(-(12 + np.pi**2) / 180, rel=1e-12)
    assert r34["lower1_solparam"] == pytest.approx(-(12 + np.pi**2) / 180, rel=1e-12)
    for r in rows:
        assert r["amp_status"] == "ok"
        assert r["threshold"] == pytest.approx(4 * (1 - r["gamma"]))
        assert r["lower0_amp"] < r["lower0_solparam"] and r["lower1_amp"] < r["lower1_solparam"]
    p = tmp_path / "sweep.csv"
    write_sweep_csv(rows, p, "hdr")
    lines = p.read_text().splitlines()
    assert lines[0] == "# hdr" and lines[1] == ",".join(SWEEP_COLUMNS)
    with pytest.raises(ValueError):
        gamma_sweep(10.0, n_points=1)
