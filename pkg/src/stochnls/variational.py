"""Closed-form exponents and parametrized minimum-action problems.

Three families of candidate optimal paths towards a transmission error are
handled:

* soliton-parameter paths ``Psi_S = sqrt(2) eta(t) exp(-i int eta^2) sech(eta x)``
  with action density ``K eta'^2 / eta``, ``K = (12 + pi^2)/9``;
* amplitude paths ``f(t) u0`` with density
  ``A f'^2 + B f^2 + 2C f^(2s+2) + D f^(4s+2)``;
* the full parametrization (height, phase, frequency, position) reduced to
  height and position.

Exponents are reported as ``eps log P`` limits, i.e. negative numbers equal
to minus an action.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import scipy.fft as sfft
from numpy.polynomial import Polynomial
from numpy.polynomial import chebyshev as C
from scipy.integrate import quad, solve_ivp
from scipy.optimize import brentq, root

from .dynamics import ControlPath
from .spectral import FieldState, ModelParams, SpatialGrid, laplacian, soliton

__all__ = [
    "SOLITON_CONST",
    "BoundQuery",
    "BoundPair",
    "prop7_upper",
    "prop8_lower",
    "minimax_gamma",
    "SolitonParamPath",
    "soliton_param_solution",
    "ActionValue",
    "action_soliton_param",
    "F_S",
    "control_from_eta",
    "soliton_param_field",
    "AmplitudeProblem",
    "AmplitudeSolution",
    "AmplitudeSolveError",
    "amplitude_coefficients",
    "amplitude_problem",
    "amplitude_solve",
    "amplitude_time_map",
    "amplitude_time_map_action",
    "TimeMap",
    "FullParamState",
    "full_param_solve",
    "F_P",
    "F_PS",
    "gamma_sweep",
    "write_sweep_csv",
    "SWEEP_COLUMNS",
]

SOLITON_CONST = (12.0 + np.pi**2) / 9.0


# ---------------------------------------------------------------- closed forms

@dataclass(frozen=True)
class BoundQuery:
    gamma: float
    T: float
    phi_op_norm: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if not self.T > 0:
            raise ValueError("T must be positive")
        if not self.phi_op_norm > 0:
            raise ValueError("phi_op_norm must be positive")


class BoundPair(NamedTuple):
    exp0: float
    exp1: float

    @property
    def worst(self) -> float:
        return max(self.exp0, self.exp1)


def prop7_upper(q: BoundQuery) -> BoundPair:
    """Upper bounds on ``eps log P`` for the two error types."""
    g, T, c2 = q.gamma, q.T, q.phi_op_norm**2
    e0 = -(1.0 - g) / (2.0 * T * c2)
    r2 = (g / (1.0 + g)) ** 2
    # sqrt(1 + r2) - 1 without cancellation for small gamma
    e1 = -((1.0 + g) / (T * c2)) * (r2 / (np.sqrt(1.0 + r2) + 1.0))
    return BoundPair(float(e0), float(e1))


def prop8_lower(q: BoundQuery) -> BoundPair:
    """Lower bounds from soliton-parameter controls (``Phi`` near identity)."""
    g, T = q.gamma, q.T
    e0 = -2.0 * (1.0 - g) * SOLITON_CONST / T
    # 2 - g - 2 sqrt(1 - g) = (1 - sqrt(1 - g))^2, written to avoid cancellation
    d = g / (1.0 + np.sqrt(1.0 - g))
    e1 = -2.0 * d**2 * SOLITON_CONST / T
    return BoundPair(float(e0), float(e1))


def minimax_gamma(bound, T: float = 1.0, phi_op_norm: float = 1.0) -> float:
    """Threshold parameter where the two exponents of ``bound`` coincide."""
    def gap(g):
        b = bound(BoundQuery(g, T, phi_op_norm))
        return b.exp0 - b.exp1
    return brentq(gap, 1e-12, 1.0 - 1e-12, xtol=1e-15, rtol=1e-15)


# ----------------------------------------------------- soliton-parameter paths

KINDS = ("null_datum", "soliton_datum_1", "soliton_datum_2")


@dataclass(frozen=True)
class SolitonParamPath:
    """``eta(t) = a t^2 + b t + c`` with ``b^2 = 4ac``."""

    kind: str
    gamma: float
    T: float
    a: float
    b: float
    c: float

    @property
    def poly(self) -> Polynomial:
        return Polynomial([self.c, self.b, self.a])

    def eta(self, t):
        return self.poly(np.asarray(t, float))

    def deta(self, t):
        return self.poly.deriv()(np.asarray(t, float))

    def int_eta_sq(self, t):
        """``int_0^t eta(s)^2 ds`` (exact polynomial antiderivative)."""
        return (self.poly**2).integ(lbnd=0.0)(np.asarray(t, float))

    def el_residual_poly(self) -> Polynomial:
        """``2 eta'' eta - eta'^2`` as a polynomial; identically zero on solutions."""
        p = self.poly
        return 2.0 * p.deriv(2) * p - p.deriv() ** 2

    @property
    def slope_sq(self) -> float:
        """``eta'^2 / eta``, constant for perfect squares (``4 a``)."""
        return 4.0 * self.a


def soliton_param_solution(kind: str, gamma: float, T: float) -> SolitonParamPath:
    """Closed-form quadratic solving the soliton-parameter boundary problem.

    ``null_datum`` runs from 0 to ``1 - gamma``; the soliton-datum kinds run
    from 1 to ``1 - gamma``. ``soliton_datum_2`` (the default minimizer)
    decreases monotonically while ``soliton_datum_1`` passes through zero.
    """
    BoundQuery(gamma, T)
    if kind == "null_datum":
        return SolitonParamPath(kind, gamma, T, (1.0 - gamma) / T**2, 0.0, 0.0)
    if kind == "soliton_datum_2":
        s = 1.0 - np.sqrt(1.0 - gamma)
    elif kind == "soliton_datum_1":
        s = 1.0 + np.sqrt(1.0 - gamma)
    else:
        raise ValueError(f"unknown kind {kind!r}; expected one of {KINDS}")
    # (1 - s t / T)^2
    return SolitonParamPath(kind, gamma, T, s**2 / T**2, -2.0 * s / T, 1.0)


def F_S(z, p):
    """Soliton-parameter Lagrangian ``K p^2 / z``."""
    return SOLITON_CONST * np.asarray(p) ** 2 / np.asarray(z)


class ActionValue(NamedTuple):
    quadrature: float
    closed_form: float


def action_soliton_param(path: SolitonParamPath) -> ActionValue:
    """Half the integral of ``F_S`` along ``path``, two ways.

    The quadrature evaluates ``F_S`` from the polynomial; adaptive nodes never
    sit on a zero of ``eta`` (an end point, or a break point for the + root),
    and an exact zero falls back to the finite limit ``4 a K``. The closed
    form is ``2 K c1^2 T`` for ``eta = (c0 + c1 t)^2``.
    """
    T = path.T
    # eta = (c0 + c1 t)^2 with c1^2 = a; pick the sign matching b = 2 c0 c1
    c1 = np.sqrt(path.a)
    c0 = np.sqrt(path.c)
    if path.b < 0:
        c1 = -c1
    if abs(2 * c0 * c1 - path.b) > 1e-12 * max(1.0, abs(path.b)):
        raise ValueError("path is not a perfect square")
    # the double root of a perfect square is the vertex; polynomial root finders
    # split it into a complex pair of size sqrt(machine eps)
    vertex = -path.b / (2.0 * path.a) if path.a > 0 else np.inf
    roots = [vertex] if 0 < vertex < T else []
    t_test = np.linspace(0.0, T, 257)
    if np.any(path.eta(t_test) < -1e-14):
        raise ValueError("eta is negative inside (0, T)")

    def integrand(t):
        e = float(path.eta(t))
        if e == 0.0:
            return SOLITON_CONST * path.slope_sq
        return float(F_S(e, path.deta(t)))

    val, _ = quad(integrand, 0.0, T, points=roots or None, epsabs=0, epsrel=1e-12, limit=500)
    closed = 2.0 * SOLITON_CONST * c1**2 * T
    return ActionValue(0.5 * val, float(closed))


def soliton_param_field(path: SolitonParamPath, grid: SpatialGrid):
    """Sampler ``t -> Psi_S(t, .)`` on ``grid``."""
    x = grid.x

    def u(t):
        e = path.eta(t)
        ph = np.exp(-1j * path.int_eta_sq(t))
        return np.sqrt(2.0) * e * ph / np.cosh(e * x)

    return u


def control_from_eta(path: SolitonParamPath, grid: SpatialGrid, n_times: int = 2001,
                     delta: float = 1e-3) -> ControlPath:
    """Closed-form control driving the skeleton along ``Psi_S``.

    ``h = i (eta'/eta) Psi_S - i sqrt(2) eta eta' x exp(-i int eta^2) sinh/cosh^2(eta x)``.
    When ``eta(0) = 0`` the first node is moved to ``delta`` and recorded in
    ``ControlPath.start``.
    """
    x = grid.x
    T = path.T
    t0 = delta if path.eta(0.0) <= 0 else 0.0
    abs_times = np.linspace(t0, T, n_times)

    def h(t):
        e = float(path.eta(t))
        de = float(path.deta(t))
        if e <= 0:
            raise ValueError("control undefined where eta vanishes")
        ph = np.exp(-1j * path.int_eta_sq(t))
        ex = e * x
        sech = 1.0 / np.cosh(ex)
        psi = np.sqrt(2.0) * e * ph * sech
        return 1j * (de / e) * psi - 1j * np.sqrt(2.0) * e * de * x * ph * np.tanh(ex) * sech

    fields = np.array([h(t) for t in abs_times])
    return ControlPath(abs_times - t0, fields, grid, func=lambda s: h(s + t0), start=t0)


# ------------------------------------------------------------ amplitude paths

class AmplitudeSolveError(RuntimeError):
    def __init__(self, msg, history=()):
        super().__init__(msg)
        self.history = list(history)


def amplitude_coefficients(u0: FieldState, params: ModelParams = ModelParams()):
    """``(A, B, C, D)`` of the amplitude Lagrangian by grid quadrature.

    ``A = ||u0||^2``, ``B = ||Lap u0||^2``, ``C = Re(Lap u0, |u0|^(2s) u0)``,
    ``D = || |u0|^(2s) u0 ||^2``.
    """
    g = u0.grid
    v = u0.values
    lap = laplacian(v, g)
    nl = np.abs(v) ** (2 * params.sigma) * v
    A = g.integrate(np.abs(v) ** 2)
    B = g.integrate(np.abs(lap) ** 2)
    Cc = g.integrate((lap * np.conj(nl)).real)
    D = g.integrate(np.abs(nl) ** 2)
    return tuple(float(c) for c in (A, B, Cc, D))


SECH_RATIONALS = (4.0, 28.0 / 15.0, -16.0 / 5.0, 128.0 / 15.0)


@dataclass(frozen=True)
class AmplitudeProblem:
    A: float
    B: float
    C: float
    D: float
    sigma: float
    f0: float
    fT: float
    T: float

    def potential(self, f):
        """``(B f^2 + 2C f^(2s+2) + D f^(4s+2)) / A``; the density is ``A (f'^2 + potential)``."""
        s = self.sigma
        f = np.asarray(f, float)
        return (self.B * f**2 + 2 * self.C * f ** (2 * s + 2) + self.D * f ** (4 * s + 2)) / self.A

    def force(self, f):
        """Right-hand side of ``f'' = force(f)``."""
        s = self.sigma
        f = np.asarray(f, float)
        return (self.B * f + self.C * (2 * s + 2) * f ** (2 * s + 1)
                + 0.5 * self.D * (4 * s + 2) * f ** (4 * s + 1)) / self.A

    def dforce(self, f):
        s = self.sigma
        f = np.asarray(f, float)
        return (self.B + self.C * (2 * s + 2) * (2 * s + 1) * f ** (2 * s)
                + 0.5 * self.D * (4 * s + 2) * (4 * s + 1) * f ** (4 * s)) / self.A

    def normalized_el_coefficients(self):
        """``(c1, c3, c5)`` in ``f'' = c1 f + c3 f^3 + c5 f^5`` (cubic case)."""
        if self.sigma != 1:
            raise ValueError("defined for the cubic case only")
        return self.B / self.A, 4 * self.C / self.A, 3 * self.D / self.A

    def density(self, f, fp):
        return self.A * (np.asarray(fp) ** 2 + self.potential(f))


def amplitude_problem(u0: FieldState, params: ModelParams, f0: float, fT: float, T: float,
                      check_soliton: bool | None = None, check_tol: float = 1e-6) -> AmplitudeProblem:
    """Coefficients by quadrature plus boundary data.

    When ``u0`` is the unit soliton (detected automatically unless
    ``check_soliton`` is given) the coefficients are compared with the exact
    rationals and a mismatch beyond ``check_tol`` aborts.
    """
    A, B, Cc, D = amplitude_coefficients(u0, params)
    if check_soliton is None:
        ref = np.sqrt(2.0) / np.cosh(u0.grid.x)
        check_soliton = params.sigma == 1 and np.allclose(u0.values, ref, atol=1e-12, rtol=0)
    if check_soliton:
        got = np.array([A, B, Cc, D])
        want = np.array(SECH_RATIONALS)
        if np.max(np.abs(got - want) / np.abs(want)) > check_tol:
            raise ValueError(f"amplitude coefficients {got} disagree with {want}")
    if not T > 0:
        raise ValueError("T must be positive")
    return AmplitudeProblem(A, B, Cc, D, params.sigma, float(f0), float(fT), float(T))


def _cheb_nodes(N):
    return np.cos(np.pi * np.arange(N + 1) / N)


def _cheb_diff(N):
    """Chebyshev-Lobatto differentiation matrix on ``[-1, 1]``."""
    x = _cheb_nodes(N)
    c = np.ones(N + 1)
    c[0] = c[-1] = 2.0
    c *= (-1.0) ** np.arange(N + 1)
    X = x[:, None] - x[None, :]
    Dm = np.outer(c, 1.0 / c) / (X + np.eye(N + 1))
    Dm -= np.diag(Dm.sum(axis=1))
    return Dm


def _cheb_coeffs(values):
    """Chebyshev coefficients of the interpolant through Lobatto-node values."""
    N = len(values) - 1
    a = sfft.dct(values, type=1) / N
    a[0] *= 0.5
    a[-1] *= 0.5
    return a


def _cc_integral(values, half_length):
    """Clenshaw-Curtis quadrature of Lobatto-node values over an interval."""
    a = _cheb_coeffs(np.asarray(values, float))
    k = np.arange(a.size)
    w = np.zeros(a.size)
    even = k % 2 == 0
    w[even] = 2.0 / (1.0 - k[even] ** 2)
    return float(half_length * np.dot(a, w))


@dataclass(eq=False)
class AmplitudeSolution:
    problem: AmplitudeProblem
    t: np.ndarray
    f: np.ndarray
    fp: np.ndarray
    action: float
    residual: float
    residual_offnode: float
    method: str
    history: list = field(default_factory=list)

    @property
    def exponent(self) -> float:
        return -self.action

    def coefficients(self):
        return _cheb_coeffs(self.f)

    def __call__(self, t):
        x = 1.0 - 2.0 * np.asarray(t, float) / self.problem.T
        return C.chebval(x, self.coefficients())


def _shoot(prob: AmplitudeProblem, slope0: float, rtol=1e-12):
    """Brent on the end-point mismatch in a bracket grown around ``slope0``."""
    T = prob.T

    def end(slope):
        sol = solve_ivp(lambda _, y: [y[1], prob.force(y[0])], (0.0, T), [prob.f0, slope],
                        method="DOP853", rtol=rtol, atol=1e-14)
        if sol.status != 0 or not np.all(np.isfinite(sol.y[:, -1])):
            return np.nan
        return sol.y[0, -1] - prob.fT

    m0 = end(slope0)
    if not np.isfinite(m0):
        raise AmplitudeSolveError("shooting from the seed slope does not reach T")
    if m0 == 0.0:
        return slope0
    w = 1e-10 * (1.0 + abs(slope0))
    while w < 1.0:
        for s1 in (slope0 - w, slope0 + w):
            m1 = end(s1)
            if np.isfinite(m1) and np.sign(m1) != np.sign(m0):
                lo, hi = sorted((slope0, s1))
                return brentq(end, lo, hi, xtol=1e-15, rtol=1e-15)
        w *= 4.0
    raise AmplitudeSolveError("shooting found no sign change in the end-point mismatch")


def _newton_collocation(prob: AmplitudeProblem, N: int, guess, tol: float, max_iter=60):
    T = prob.T
    Dx = _cheb_diff(N)
    D1 = -(2.0 / T) * Dx  # t = T (1 - x) / 2
    D2 = D1 @ D1
    f = np.array(guess, float)
    history = []
    best = (np.inf, f)
    # rounding in D^2 f alone is about eps |D^2|_inf |f|_inf
    d2_norm = float(np.max(np.sum(np.abs(D2), axis=1)))
    floor = max(1e-5, 1e3 * np.finfo(float).eps * d2_norm * max(1.0, np.max(np.abs(f))))
    for _ in range(max_iter):
        F = D2 @ f - prob.force(f)
        F[0] = f[0] - prob.f0
        F[-1] = f[-1] - prob.fT
        J = D2 - np.diag(prob.dforce(f))
        J[0] = 0.0
        J[0, 0] = 1.0
        J[-1] = 0.0
        J[-1, -1] = 1.0
        res = float(np.max(np.abs(F)))
        history.append(res)
        if not np.isfinite(res):
            break
        if res <= tol:
            return f, D1, history
        if res < best[0]:
            best = (res, f.copy())
        elif res < floor and len(history) > 3 and min(history[-3:]) >= 0.5 * best[0]:
            # stagnated at the round-off floor set by the conditioning of D^2
            return best[1], D1, history
        step = np.linalg.solve(J, -F)
        lam = 1.0
        while lam > 1e-4:
            trial = f + lam * step
            Ft = D2 @ trial - prob.force(trial)
            Ft[0] = trial[0] - prob.f0
            Ft[-1] = trial[-1] - prob.fT
            if np.max(np.abs(Ft)) < (1 - 0.25 * lam) * res or res < 1e-6:
                break
            lam *= 0.5
        f = trial
    raise AmplitudeSolveError(f"collocation Newton stalled at residual {history[-1]:.3e}", history)


def _finish(prob, N, f, D1, history, method):
    T = prob.T
    t = 0.5 * T * (1.0 - _cheb_nodes(N))
    fp = D1 @ f
    dens = prob.density(f, fp)
    action = 0.5 * _cc_integral(dens, 0.5 * T)
    D2 = D1 @ D1
    r = D2 @ f - prob.force(f)
    residual = float(np.max(np.abs(r[1:-1])))
    # off-node check on the midpoints of the Lobatto arcs
    a = _cheb_coeffs(f)
    xm = np.cos(np.pi * (np.arange(N) + 0.5) / N)
    d2 = C.chebder(a, 2) * (2.0 / T) ** 2
    off = C.chebval(xm, d2) - prob.force(C.chebval(xm, a))
    return AmplitudeSolution(prob, t, f, fp, action, residual, float(np.max(np.abs(off))), method,
                             history)


def amplitude_solve(prob: AmplitudeProblem, mesh_n: int = 128, tol: float = 1e-10,
                    strategy: str = "auto") -> AmplitudeSolution:
    """Solve the amplitude Euler-Lagrange boundary problem ``f'' = force(f)``.

    The energy time map supplies a seed slope. Single shooting on ``f'(0)``
    (Brent on a bracket grown around the seed) gives the first candidate and
    Newton collocation on ``mesh_n + 1`` Chebyshev nodes polishes it. If
    shooting fails, collocation starts from the time-map profile, and failing
    that from the linear interpolant with continuation in ``T``. The reported
    ``residual`` is the sup of the discrete EL residual at interior nodes;
    ``residual_offnode`` samples the interpolant between nodes.
    """
    if mesh_n < 64:
        raise ValueError("mesh_n must be at least 64")
    N = int(mesh_n)
    T = prob.T
    t = 0.5 * T * (1.0 - _cheb_nodes(N))
    history = []
    tm = None
    try:
        tm = amplitude_time_map(prob)
    except (ValueError, ArithmeticError) as exc:
        history.append(f"time map unavailable: {exc}")
    if strategy in ("auto", "shooting"):
        try:
            seed = tm.slope0 if tm is not None else (prob.fT - prob.f0) / T
            slope = _shoot(prob, seed)
            sol = solve_ivp(lambda _, y: [y[1], prob.force(y[0])], (0.0, T), [prob.f0, slope],
                            method="DOP853", rtol=1e-12, atol=1e-14, t_eval=t)
            if sol.status != 0 or sol.y.shape[1] != t.size:
                raise AmplitudeSolveError("shooting trajectory incomplete")
            f, D1, h = _newton_collocation(prob, N, sol.y[0], tol)
            return _finish(prob, N, f, D1, history + h, "shooting+collocation")
        except AmplitudeSolveError as exc:
            history.append(str(exc))
            history.extend(exc.history)
            if strategy == "shooting":
                raise AmplitudeSolveError("shooting failed", history) from exc
    if tm is not None:
        try:
            f, D1, h = _newton_collocation(prob, N, tm.profile(t), tol)
            return _finish(prob, N, f, D1, history + h, "collocation")
        except AmplitudeSolveError as exc:
            history.extend(exc.history)
    # continuation in T from the linear interpolant
    steps = [T] if T <= 1.0 else list(np.geomspace(min(1.0, T), T, 12))
    guess = prob.f0 + (prob.fT - prob.f0) * t / T
    for Tk in steps:
        sub = AmplitudeProblem(prob.A, prob.B, prob.C, prob.D, prob.sigma, prob.f0, prob.fT, Tk)
        try:
            f, D1, h = _newton_collocation(sub, N, guess, tol if Tk == T else max(tol, 1e-7))
        except AmplitudeSolveError as exc:
            history.extend(exc.history)
            raise AmplitudeSolveError(
                f"collocation failed at continuation step T={Tk:.4g}", history) from exc
        history.extend(h)
        guess = f  # same scaled nodes serve the next T
    return _finish(prob, N, f, D1, history, "collocation+continuation")


def _potential_poly(prob: AmplitudeProblem) -> Polynomial:
    s = prob.sigma
    if float(s) != int(s):
        raise ValueError("the time map needs an integer nonlinearity exponent")
    s = int(s)
    c = np.zeros(4 * s + 3)
    c[2] += prob.B
    c[2 * s + 2] += 2 * prob.C
    c[4 * s + 2] += prob.D
    return Polynomial(c / prob.A)


def _divided(P: Polynomial, a: float) -> Polynomial:
    """``(P(f) - P(a)) / (f - a)`` as an exact polynomial."""
    q, _ = divmod(P - P(a), Polynomial([-a, 1.0]))
    return q


@dataclass(frozen=True, eq=False)
class TimeMap:
    """Energy-conservation description of an amplitude extremal.

    ``kind`` is ``monotone`` or ``turning``; for turning paths the amplitude
    first descends to ``f_turn`` and then rises to the end value.
    """

    kind: str
    E: float
    f_turn: float
    slope0: float
    action: float
    prob: AmplitudeProblem

    def _elapsed(self, f_from, f_to, P):
        """Time to travel between two amplitudes on a monotone stretch."""
        lo, hi = sorted((f_from, f_to))
        if hi - lo <= 0:
            return 0.0
        if self.kind == "turning" or np.isclose(P(lo) + self.E, 0.0, atol=1e-15):
            a = self.f_turn if self.kind == "turning" else lo
            q = _divided(P, a)
            return quad(lambda f: 1.0 / np.sqrt(q(f)), lo, hi, weight="alg", wvar=(-0.5, 0.0),
                        epsabs=0, epsrel=1e-12, limit=400)[0] if lo == a else \
                quad(lambda f: 1.0 / np.sqrt((f - a) * q(f)), lo, hi, epsabs=0, epsrel=1e-12,
                     limit=400)[0]
        return quad(lambda f: 1.0 / np.sqrt(P(f) + self.E), lo, hi, epsabs=0, epsrel=1e-12,
                    limit=400)[0]

    def profile(self, t, n_samples: int = 400):
        """Amplitude at times ``t`` by inverting the time map on a sampled branch."""
        P = _potential_poly(self.prob)
        f0, fT = self.prob.f0, self.prob.fT
        u = 0.5 * (1.0 - np.cos(np.linspace(0.0, np.pi, n_samples)))
        if self.kind == "monotone":
            fs = f0 + (fT - f0) * u
            ts = np.array([self._elapsed(f0, f, P) for f in fs])
            order = np.argsort(ts)
            return np.interp(t, ts[order], fs[order])
        a = self.f_turn
        down = f0 + (a - f0) * u
        t_down = np.array([self._elapsed(f0, f, P) if f != f0 else 0.0 for f in down])
        t1 = self._elapsed(a, f0, P)
        up = a + (fT - a) * u
        t_up = t1 + np.array([self._elapsed(a, f, P) for f in up])
        ts = np.concatenate([t_down, t_up[1:]])
        fs = np.concatenate([down, up[1:]])
        order = np.argsort(ts, kind="stable")
        return np.interp(t, ts[order], fs[order])


def amplitude_time_map(prob: AmplitudeProblem) -> TimeMap:
    """Extremal of the amplitude problem from the first integral ``f'^2 - potential = E``.

    Monotone paths satisfy ``T = int df / sqrt(potential + E)`` between the
    end values. When ``T`` exceeds the transit time at the lowest admissible
    energy, the path turns at ``f_turn`` below both end values with
    ``E = -potential(f_turn)``. Requires an increasing potential on the
    relevant range (checked). The action is
    ``(A/2) (2 int sqrt(potential + E) df - E T)`` summed over branches.
    """
    P = _potential_poly(prob)
    f0, fT, T = prob.f0, prob.fT, prob.T
    lo, hi = sorted((f0, fT))
    fs = np.linspace(0.0, hi, 2001)[1:]
    if np.any(P.deriv()(fs) <= 0):
        raise ValueError("potential is not increasing on (0, max end value)")

    def sqrt_int(a, b, E):
        return quad(lambda f: np.sqrt(max(P(f) + E, 0.0)), a, b, epsabs=0, epsrel=1e-13,
                    limit=400)[0]

    # break points crowding the lower end, where the integrand peaks as E -> E_min
    brk = list(lo + (hi - lo) * np.geomspace(1e-14, 0.5, 14)) if hi > lo else None

    def transit(E):
        return quad(lambda f: 1.0 / np.sqrt(P(f) + E), lo, hi, points=brk, epsabs=0,
                    epsrel=1e-13, limit=400)[0]

    E_min = -P(lo)
    if hi > lo and lo > 0:
        q = _divided(P, lo)
        T_crit = quad(lambda f: 1.0 / np.sqrt(q(f)), lo, hi, weight="alg", wvar=(-0.5, 0.0),
                      epsabs=0, epsrel=1e-13, limit=400)[0]
    elif hi > lo:
        T_crit = np.inf  # starts at the potential minimum: log-divergent transit
    else:
        T_crit = 0.0
    if T <= T_crit:
        E_hi = 1.0
        while transit(E_hi) > T:
            E_hi *= 4.0
        E_lo = E_min
        if np.isinf(T_crit):
            # the transit time grows like log(1/E) near the minimum; step down until it exceeds T
            E_lo = E_min + 1e-8
            while transit(E_lo) < T:
                if E_lo - E_min < 1e-250:
                    raise ArithmeticError("transit time cannot reach T")
                E_lo = E_min + 1e-4 * (E_lo - E_min)
        E = brentq(lambda e: transit(e) - T, E_lo, E_hi, xtol=1e-16, rtol=1e-15)
        action = 0.5 * prob.A * (2.0 * sqrt_int(lo, hi, E) - E * T)
        slope0 = np.sign(fT - f0) * np.sqrt(P(f0) + E)
        return TimeMap("monotone", float(E), np.nan, float(slope0), float(action), prob)

    def branch_time(a):
        q = _divided(P, a)
        out = 0.0
        for end in (f0, fT):
            if end <= a:
                continue
            out += quad(lambda f: 1.0 / np.sqrt(q(f)), a, end, weight="alg", wvar=(-0.5, 0.0),
                        epsabs=0, epsrel=1e-13, limit=400)[0]
        return out

    a_lo = lo * 0.5
    while branch_time(a_lo) < T:
        a_lo *= 0.5
        if a_lo < 1e-300:
            raise ArithmeticError("turning point underflow")
    a = brentq(lambda x: branch_time(x) - T, a_lo, lo, xtol=1e-16, rtol=1e-15)
    E = -P(a)
    action = 0.5 * prob.A * (2.0 * (sqrt_int(a, f0, E) + sqrt_int(a, fT, E)) - E * T)
    slope0 = -np.sqrt(max(P(f0) + E, 0.0))
    return TimeMap("turning", float(E), float(a), float(slope0), float(action), prob)


def amplitude_time_map_action(prob: AmplitudeProblem) -> float:
    """Action of the amplitude extremal from the energy first integral."""
    return amplitude_time_map(prob).action


# ------------------------------------------------------ full parametrization

def F_P(Z, P):
    """Augmented Lagrangian of the full parametrization.

    ``Z = (eta, alpha, beta, y)`` and ``P`` their time derivatives.
    """
    z1, _, _, z4 = Z
    p1, p2, p3, p4 = P
    return (SOLITON_CONST * p1**2 / z1 + (4.0 / 3.0) * z1**3 * p4**2 + 4.0 * p2**2 * z1
            + 4.0 * p3**2 * z1 * z4**2 + np.pi**2 * p3**2 / (3.0 * z1) + 8.0 * p2 * p3 * z1 * z4)


def F_PS(z1, p1, p4):
    """Reduced Lagrangian in height and position."""
    return SOLITON_CONST * p1**2 / z1 + (4.0 / 3.0) * z1**3 * p4**2


@dataclass(eq=False)
class FullParamState:
    gamma: float
    T: float
    t: np.ndarray
    eta: np.ndarray
    deta: np.ndarray
    y: np.ndarray
    dy: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    action: float
    shots: tuple
    converged: bool

    @property
    def exponent(self) -> float:
        return -self.action


def _full_rhs(_, s):
    eta, deta, y, dy = s
    ddeta = deta**2 / (2.0 * eta) + 2.0 * eta**3 * dy**2 / SOLITON_CONST
    ddy = -3.0 * deta * dy / eta
    return [deta, ddeta, dy, ddy]


def full_param_solve(gamma: float, T: float, tol: float = 1e-12, n_out: int = 2001,
                     guess=None) -> FullParamState:
    """Shoot on ``(eta'(0), y'(0))`` to meet ``eta(T) = 1 - gamma`` and ``y'(T) = 0``.

    The initial guess deliberately carries a nonzero ``y'(0)`` so the
    vanishing of the position velocity is found rather than imposed.
    """
    BoundQuery(gamma, T)
    if gamma >= 1.0:
        raise ValueError("the soliton-datum problem needs gamma < 1")
    target = 1.0 - gamma
    opts = dict(method="DOP853", rtol=1e-12, atol=1e-14)

    def mismatch(v):
        sol = solve_ivp(_full_rhs, (0.0, T), [1.0, v[0], 0.0, v[1]], **opts)
        if sol.status != 0 or np.any(sol.y[0] <= 0):
            return [1e3, 1e3]
        return [sol.y[0, -1] - target, sol.y[3, -1]]

    if guess is None:
        guess = (-2.0 * (1.0 - np.sqrt(target)) / T, 0.05)
    for method in ("lm", "hybr"):
        res = root(mismatch, guess, method=method, tol=tol)
        v = res.x
        err = np.max(np.abs(mismatch(v)))
        if err < 1e-9:
            break
    if not err < 1e-9:
        raise RuntimeError(f"full parametrization shooting failed: mismatch {err:.3e}, {res.message}")
    t = np.linspace(0.0, T, n_out)
    sol = solve_ivp(_full_rhs, (0.0, T), [1.0, v[0], 0.0, v[1]], t_eval=t, dense_output=True, **opts)
    eta, deta, y, dy = sol.y

    def dens(s):
        e, de, _, dyy = sol.sol(s)
        return F_PS(e, de, dyy)

    val = quad(dens, 0.0, T, epsabs=0, epsrel=1e-12, limit=400)[0]
    # phase and frequency stay at their trivial values in the reduced problem
    zeros = np.zeros_like(t)
    return FullParamState(gamma, T, t, eta, deta, y, dy, zeros, zeros, 0.5 * val,
                          (float(v[0]), float(v[1])), True)


# ------------------------------------------------------------------- sweeps

SWEEP_COLUMNS = ("gamma", "threshold", "upper0", "upper1", "lower0_solparam", "lower1_solparam",
                 "lower0_amp", "lower1_amp", "amp_status")


def _unit_soliton(grid):
    return soliton(1.0, 0.0, grid)


def gamma_sweep(T: float = 10.0, phi_op_norm: float = 1.0, n_points: int = 50,
                gammas=None, grid: SpatialGrid | None = None, mesh_n: int = 128,
                gamma_range=(0.02, 0.98)) -> list[dict]:
    """Exponent table over the threshold parameter.

    Amplitude columns come from the amplitude boundary problems with the unit
    soliton; failures leave ``nan`` cells and a status message.
    """
    if gammas is None:
        if n_points < 2:
            raise ValueError("n_points must be at least 2")
        gammas = np.linspace(gamma_range[0], gamma_range[1], n_points)
    grid = grid or SpatialGrid()
    u0 = _unit_soliton(grid)
    params = ModelParams()
    coeffs = amplitude_coefficients(u0, params)
    rows = []
    for g in gammas:
        q = BoundQuery(float(g), T, phi_op_norm)
        up = prop7_upper(q)
        lo = prop8_lower(q)
        amp = []
        status = []
        for f0 in (0.0, 1.0):
            prob = AmplitudeProblem(*coeffs, 1.0, f0, np.sqrt(1.0 - g), T)
            try:
                amp.append(amplitude_solve(prob, mesh_n).exponent)
                status.append("ok")
            except AmplitudeSolveError as exc:
                amp.append(np.nan)
                status.append(f"fail:{exc}")
        rows.append({
            "gamma": float(g), "threshold": 4.0 * (1.0 - g),
            "upper0": up.exp0, "upper1": up.exp1,
            "lower0_solparam": lo.exp0, "lower1_solparam": lo.exp1,
            "lower0_amp": amp[0], "lower1_amp": amp[1],
            "amp_status": "ok" if status == ["ok", "ok"] else ";".join(status),
        })
    return rows


def _cell(v):
    """CSV text for a value; floats keep full precision, numpy scalars become plain."""
    if isinstance(v, np.generic):
        v = v.item()
    return repr(v) if isinstance(v, float) else v


def write_sweep_csv(rows, path, header_comment: str | None = None):
    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: _cell(v) for k, v in r.items()})
