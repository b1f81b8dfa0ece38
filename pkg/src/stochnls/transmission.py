"""Monte Carlo transmission errors, blow-up times and position shifts.

A bit is sent as either the null field or the unit soliton; the receiver
reads the squared L^2 norm of the field on ``[-l, l]`` at time ``T`` and
decides "1" when it is at least ``4 (1 - gamma)``.
"""
from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.stats import binomtest

from .dynamics import evolve, evolve_batch, extract_control, rate_functional
from .noise import NoiseOperator, sample_stream
from .spectral import (
    FieldState,
    ModelParams,
    SpatialGrid,
    h1_norm_sq,
    shift_Y,
    soliton,
    soliton_profile,
    windowed_momentum,
)
from .variational import (
    AmplitudeProblem,
    AmplitudeSolveError,
    BoundQuery,
    amplitude_coefficients,
    amplitude_solve,
    prop7_upper,
    prop8_lower,
)

__all__ = [
    "DecisionRule",
    "ErrorProbEstimate",
    "mc_error_probs",
    "mc_blowup_time",
    "BlowupEstimate",
    "CorollaryInputs",
    "corollary_interval_bounds",
    "amplitude_level_action",
    "quintic_corollary_inputs",
    "gadget_path",
    "gadget_rate",
    "translation_rate",
    "mc_shift_tails",
    "compare_report",
    "write_rows_csv",
    "wilson",
]


def wilson(k: int, n: int, level: float = 0.95) -> tuple[float, float]:
    ci = binomtest(int(k), int(n)).proportion_ci(confidence_level=level, method="wilson")
    return float(ci.low), float(ci.high)


@dataclass(frozen=True)
class DecisionRule:
    gamma: float
    window_l: float

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if not self.window_l > 0:
            raise ValueError("window_l must be positive")

    @property
    def threshold(self) -> float:
        return 4.0 * (1.0 - self.gamma)

    def measure(self, values, grid: SpatialGrid):
        return windowed_momentum(values, self.window_l, grid)

    def decide(self, values, grid: SpatialGrid):
        """1 where the measured power reaches the threshold, else 0."""
        return (self.measure(values, grid) >= self.threshold).astype(int)

    def check_window(self, grid: SpatialGrid, gamma0: float, u_det_T: FieldState | None = None,
                     params: ModelParams = ModelParams(), T: float | None = None, dt: float = 1e-3):
        """Require the window to capture more than ``4 (1 - gamma0/2)`` of the soliton power.

        Both the sent soliton and the noiseless received field ``u_det_T``
        (computed when ``T`` is given) are checked.
        """
        if self.window_l > grid.half_width:
            raise ValueError("window exceeds the grid")
        need = 4.0 * (1.0 - gamma0 / 2.0)
        u1 = soliton(1.0, 0.0, grid)
        fields = {"sent soliton": u1.values}
        if u_det_T is None and T is not None:
            u_det_T = evolve(u1, params, T, dt, save_every=10**9).final
        if u_det_T is not None:
            fields["received soliton"] = u_det_T.values
        for name, v in fields.items():
            got = float(self.measure(v, grid))
            if not got > need:
                raise ValueError(
                    f"window too small: {name} power {got:.6f} <= 4(1 - gamma0/2) = {need:.6f}")
        return True


@dataclass(frozen=True)
class ErrorProbEstimate:
    successes: int
    n_samples: int
    eps: float
    n_blowups: int = 0
    n_unstable: int = 0
    level: float = 0.95

    @property
    def p_hat(self) -> float:
        return self.successes / self.n_samples

    @property
    def wilson_ci(self) -> tuple[float, float]:
        return wilson(self.successes, self.n_samples, self.level)

    @property
    def std_err(self) -> float:
        p = self.p_hat
        return float(np.sqrt(p * (1 - p) / self.n_samples))

    @property
    def censored(self) -> bool:
        return self.successes == 0

    @property
    def eps_log_p(self) -> float:
        """``eps log p_hat``; zero counts give the one-sided value ``-eps log n``."""
        if self.censored:
            return -self.eps * np.log(self.n_samples)
        return self.eps * np.log(self.p_hat)

    @property
    def eps_log_ci(self) -> tuple[float, float]:
        lo, hi = self.wilson_ci
        return (self.eps * np.log(lo) if lo > 0 else -np.inf, self.eps * np.log(hi))

    def as_dict(self) -> dict:
        lo, hi = self.wilson_ci
        elo, ehi = self.eps_log_ci
        return {
            "eps": self.eps, "n_samples": self.n_samples, "successes": self.successes,
            "p_hat": self.p_hat, "ci_lo": lo, "ci_hi": hi, "eps_log_p": self.eps_log_p,
            "eps_log_ci_lo": elo, "eps_log_ci_hi": ehi, "censored": self.censored,
            "n_blowups": self.n_blowups, "n_unstable": self.n_unstable,
        }


def _batched_runs(u0, params, T, dt, phi, eps, indices, master_seed, R, batch_size, threads):
    """Final windowed inputs for the given sample indices, ordered by index."""
    batches = [indices[i:i + batch_size] for i in range(0, len(indices), batch_size)]

    def run(idx):
        rngs = [sample_stream(master_seed, int(j)) for j in idx]
        return evolve_batch(u0, params, T, dt, phi, eps, rngs, blowup_R=R)

    if threads and threads > 1 and len(batches) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            out = list(ex.map(run, batches))
    else:
        out = [run(b) for b in batches]
    finals = np.concatenate([o[0] for o in out])
    t_cross = np.concatenate([o[1] for o in out])
    unstable = np.concatenate([o[2] for o in out])
    return finals, t_cross, unstable


def mc_error_probs(rule: DecisionRule, params: ModelParams, phi: NoiseOperator, eps: float,
                   T: float, n_samples: int, master_seed: int, dt: float = 5e-3,
                   blowup_aware: bool = False, R: float | None = None, batch_size: int = 500,
                   threads: int = 1, which: Sequence[str] = ("est0", "est1")
                   ) -> dict[str, ErrorProbEstimate]:
    """Monte Carlo estimates of the two error probabilities.

    Sample ``i`` of the null-datum runs uses stream ``2i`` and sample ``i`` of
    the soliton runs uses stream ``2i + 1``, so results depend only on
    ``(master_seed, i)``. With ``blowup_aware`` the events are intersected
    with ``T_R > T``; otherwise ``R`` is ignored and samples that turn
    non-finite are excluded from the events and counted as unstable.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be positive")
    if blowup_aware and R is None:
        raise ValueError("blow-up aware estimates need R")
    grid = phi.grid
    u1 = soliton(1.0, 0.0, grid)
    zero = FieldState.zeros(grid)
    out = {}
    for key, u0, offset in (("est0", zero, 0), ("est1", u1, 1)):
        if key not in which:
            continue
        idx = 2 * np.arange(n_samples) + offset
        finals, t_cross, unstable = _batched_runs(u0, params, T, dt, phi, eps, idx, master_seed,
                                                  R if blowup_aware else None, batch_size, threads)
        crossed = np.isfinite(t_cross)
        good = np.all(np.isfinite(finals), axis=-1)
        power = np.full(n_samples, np.nan)
        power[good] = rule.measure(finals[good], grid)
        if key == "est0":
            event = power >= rule.threshold
        else:
            event = power < rule.threshold
        event &= good
        n_unstable = int(np.sum(unstable))
        event &= ~crossed
        out[key] = ErrorProbEstimate(int(np.sum(event)), n_samples, eps,
                                     int(np.sum(crossed)) if blowup_aware else 0, n_unstable)
    return out


@dataclass(frozen=True, eq=False)
class BlowupEstimate:
    S: float
    T: float
    R: float
    n_samples: int
    t_cross: np.ndarray

    def _est(self, k) -> dict:
        lo, hi = wilson(k, self.n_samples)
        return {"p_hat": k / self.n_samples, "ci": (lo, hi), "count": int(k)}

    @property
    def p_survive_T(self):
        return self._est(np.sum(self.t_cross > self.T))

    @property
    def p_cross_T(self):
        return self._est(np.sum(self.t_cross <= self.T))

    @property
    def p_cross_S(self):
        return self._est(np.sum(self.t_cross <= self.S))

    @property
    def p_between(self):
        return self._est(np.sum((self.t_cross > self.S) & (self.t_cross <= self.T)))


def mc_blowup_time(params: ModelParams, phi: NoiseOperator, eps: float, R: float, S: float,
                   T: float, n_samples: int, master_seed: int, u0: FieldState,
                   dt: float = 1e-3, batch_size: int = 200, threads: int = 1) -> BlowupEstimate:
    """Empirical law of the first H^1 crossing of ``R`` up to time ``T``."""
    if params.sigma < 2:
        raise ValueError("blow-up experiments need sigma >= 2 in one dimension")
    if not R > np.sqrt(h1_norm_sq(u0.values, u0.grid)):
        raise ValueError("R must exceed the initial H^1 norm")
    if not 0 <= S < T:
        raise ValueError("need 0 <= S < T")
    _, t_cross, unstable = _batched_runs(u0, params, T, dt, phi, eps, np.arange(n_samples),
                                         master_seed, R, batch_size, threads)
    return BlowupEstimate(S, T, R, n_samples, t_cross)


# ----------------------------------------------------------- corollary bounds

@dataclass(frozen=True)
class CorollaryInputs:
    """Exponents entering the interval-probability bounds.

    ``U_*`` are costs of crossing ``R`` (or ``R + alpha``) within ``[0, S]``
    or ``[0, T]``; ``L_*`` are costs of staying below it past ``S`` or ``T``.
    ``*_alpha`` fields hold the infimum (for ``U``) or supremum (for ``L``)
    over ``alpha > 0``. Only the four values of the requested regime are
    needed.
    """

    U_R_S: float | None = None
    U_R_T: float | None = None
    U_alpha_S: float | None = None
    U_alpha_T: float | None = None
    L_R_S: float | None = None
    L_R_T: float | None = None
    L_alpha_S: float | None = None
    L_alpha_T: float | None = None


class CorollaryOrderingError(ValueError):
    pass


def _need(inp, names):
    vals = [getattr(inp, n) for n in names]
    missing = [n for n, v in zip(names, vals) if v is None]
    if missing:
        raise ValueError(f"missing exponent values: {', '.join(missing)}")
    return vals


def corollary_interval_bounds(inp: CorollaryInputs, eps: float, c: float, regime: str = "<") -> dict:
    """Bounds on ``P(S < T_R <= T)`` for small ``eps``.

    ``regime="<"`` is for ``S, T`` before the deterministic crossing,
    ``">"`` for ``S, T`` after it. Returns ``lower``, ``upper`` and a
    ``degenerate`` flag when a gap vanishes (the bracket factor is then 0).
    For ``">"`` the lower bound's inner gap is
    ``sup L_{R+a}^{(T)} - L_R^{(S)}``, which is what the decomposition
    ``P(T_R > S) (1 - P(T_R > T) / P(T_R > S))`` yields; the variant with
    ``L_R^{(T)}`` is reported as ``lower_alt``.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    if c < 0:
        raise ValueError("c must be nonnegative")
    if regime == "<":
        US, UT, UaS, UaT = _need(inp, ("U_R_S", "U_R_T", "U_alpha_S", "U_alpha_T"))
        checks = [
            (US >= UT, "crossing by S cannot be cheaper than crossing by T: U_R^[0,S] >= U_R^[0,T]"),
            (UaT >= UT, "a higher level cannot be cheaper: inf U_(R+a)^[0,T] >= U_R^[0,T]"),
            (UaS >= US, "a higher level cannot be cheaper: inf U_(R+a)^[0,S] >= U_R^[0,S]"),
            (US >= UaT, "lower bound needs U_R^[0,S] >= inf U_(R+a)^[0,T]"),
            (UaS >= UT, "upper bound needs inf U_(R+a)^[0,S] >= U_R^[0,T]"),
        ]
        gap_lo, gap_hi = US - UaT, UaS - UT
        lead_lo, lead_hi = UaT + c, UT - c
        alt = None
    elif regime == ">":
        LS, LT, LaS, LaT = _need(inp, ("L_R_S", "L_R_T", "L_alpha_S", "L_alpha_T"))
        checks = [
            (LT >= LS, "staying past T cannot be cheaper than past S: L_R^(T) >= L_R^(S)"),
            (LaT <= LT, "a higher level is easier to stay below: sup L_(R+a)^(T) <= L_R^(T)"),
            (LaS <= LS, "a higher level is easier to stay below: sup L_(R+a)^(S) <= L_R^(S)"),
            (LaT >= LS, "lower bound needs sup L_(R+a)^(T) >= L_R^(S)"),
            (LT >= LaS, "upper bound needs L_R^(T) >= sup L_(R+a)^(S)"),
        ]
        gap_lo, gap_hi = LaT - LS, LT - LaS
        lead_lo, lead_hi = LS + c, LaS - c
        alt = LaT - LT
    else:
        raise ValueError("regime must be '<' or '>'")
    for ok, msg in checks:
        if not ok:
            raise CorollaryOrderingError(msg)
    lower = np.exp(-lead_lo / eps) * (-np.expm1(-gap_lo / eps))
    upper = np.exp(-lead_hi / eps) * (-np.expm1(-gap_hi / eps))
    res = {
        "regime": regime, "eps": eps, "c": c, "lower": float(lower), "upper": float(upper),
        "gap_lower": float(gap_lo), "gap_upper": float(gap_hi),
        "degenerate": bool(gap_lo == 0 or gap_hi == 0),
    }
    if alt is not None:
        res["lower_alt"] = float(np.exp(-lead_lo / eps) * (-np.expm1(-alt / eps))) if alt >= 0 else np.nan
    return res


def amplitude_level_action(u0: FieldState, params: ModelParams, level: float, T: float,
                           mesh_n: int = 128, by_time: bool = True) -> float:
    """Cheapest amplitude path ``f(t) u0`` whose H^1 norm reaches ``level``.

    With ``by_time`` the arrival time ranges over ``(0, T]`` (the cost of
    crossing *by* ``T``); otherwise the path arrives exactly at ``T``. An
    upper surrogate for the crossing cost within the amplitude family.
    """
    n0 = float(np.sqrt(h1_norm_sq(u0.values, u0.grid)))
    if not level > n0:
        raise ValueError("level must exceed the initial H^1 norm")
    A, B, Cc, D = amplitude_coefficients(u0, params)

    def action(t):
        prob = AmplitudeProblem(A, B, Cc, D, params.sigma, 1.0, level / n0, float(t))
        try:
            return amplitude_solve(prob, mesh_n).action
        except AmplitudeSolveError:
            return np.inf

    at_T = action(T)
    if not by_time:
        return at_T
    # the cost blows up as the arrival time shrinks, so the minimum is interior or at T
    res = minimize_scalar(action, bounds=(T / 50.0, T), method="bounded",
                          options={"xatol": 1e-4 * T})
    return float(min(at_T, res.fun))


def quintic_corollary_inputs(u0: FieldState, R: float, alpha: float, S: float, T: float,
                             mesh_n: int = 128) -> CorollaryInputs:
    """``U`` exponents of the ``<`` regime from amplitude paths at levels ``R`` and ``R + alpha``."""
    p = ModelParams(sigma=2.0)
    return CorollaryInputs(
        U_R_S=amplitude_level_action(u0, p, R, S, mesh_n),
        U_R_T=amplitude_level_action(u0, p, R, T, mesh_n),
        U_alpha_S=amplitude_level_action(u0, p, R + alpha, S, mesh_n),
        U_alpha_T=amplitude_level_action(u0, p, R + alpha, T, mesh_n),
    )


# --------------------------------------------------------------- shift tails

def gadget_path(a: float, grid: SpatialGrid, rotating: bool = False):
    """Sampler of ``(1 + a t x) Psi_1(0, x)``, or of ``(1 + a t x) Psi_1(t, x)`` when rotating."""
    x = grid.x

    def u(t):
        base = soliton_profile(x, 1.0, t if rotating else 0.0)
        return (1.0 + a * t * x) * base

    return u


def gadget_rate(R: float, T: float, phi: NoiseOperator, params: ModelParams = ModelParams(),
                n_times: int = 401, rotating: bool = False) -> dict:
    """Action of the linear-tilt path whose first moment reaches ``R`` at ``T``.

    ``Y((1 + a T x) u0) = 2 a T int x^2 |u0|^2 = 2 a T pi^2 / 3``, so the tilt
    is ``a = 3 R / (2 pi^2 T)``.
    """
    a = 3.0 * R / (2.0 * np.pi**2 * T)
    u = gadget_path(a, phi.grid, rotating)
    h = extract_control(u, phi, params, times=np.linspace(0.0, T, n_times))
    return {"a": a, "Y_end": float(shift_Y(u(T), phi.grid)), "rate": rate_functional(h),
            "in_range": h.in_range, "control": h}


def translation_rate(R: float, T: float) -> float:
    """Reduced-Lagrangian cost of moving the unit soliton by ``R / 4`` at constant speed."""
    return R**2 / (24.0 * T)


def mc_shift_tails(params: ModelParams, phi: NoiseOperator, eps: float, T: float,
                   R_grid: Sequence[float], n_samples: int, master_seed: int, dt: float = 5e-3,
                   batch_size: int = 500, threads: int = 1, with_gadget: bool = True) -> list[dict]:
    """Tail probabilities of the first moment of ``|u|^2`` at ``T`` from the unit soliton."""
    grid = phi.grid
    u1 = soliton(1.0, 0.0, grid)
    finals, _, unstable = _batched_runs(u1, params, T, dt, phi, eps, np.arange(n_samples),
                                        master_seed, None, batch_size, threads)
    good = ~unstable
    Y = shift_Y(finals[good], grid)
    n = int(np.sum(good))
    rows = []
    for R in R_grid:
        if not R > 0:
            raise ValueError("R values must be positive")
        kp, km = int(np.sum(Y >= R)), int(np.sum(Y <= -R))
        row = {"R": float(R), "n": n, "p_ge": kp / n, "p_le": km / n,
               "ci_ge": wilson(kp, n), "ci_le": wilson(km, n),
               "translation_rate": translation_rate(R, T)}
        if with_gadget:
            g = gadget_rate(R, T, phi, params)
            row["gadget_rate"] = g["rate"]
        rows.append(row)
    return rows


# -------------------------------------------------------------------- report

def compare_report(estimates: Sequence[dict[str, ErrorProbEstimate]], gamma: float, T: float,
                   phi_op_norm: float = 1.0) -> dict:
    """Bounds versus Monte Carlo over an ``eps`` grid.

    ``estimates`` holds one ``{"est0", "est1"}`` mapping per noise level.
    The report carries per-level rows, a least-squares line
    ``eps log p ~ a + b eps`` per error type (intercept ``a`` extrapolates to
    ``eps = 0``), the risk ``max(p0, p1)``, and a monotonicity flag.
    """
    if len(estimates) < 2:
        raise ValueError("need at least two noise levels")
    q = BoundQuery(gamma, T, phi_op_norm)
    up, lo = prop7_upper(q), prop8_lower(q)
    rows = []
    for est in sorted(estimates, key=lambda e: e["est1"].eps):
        e0, e1 = est["est0"], est["est1"]
        rows.append({
            "eps": e1.eps, "p0": e0.p_hat, "p1": e1.p_hat,
            "eps_log_p0": e0.eps_log_p, "eps_log_p1": e1.eps_log_p,
            "censored0": e0.censored, "censored1": e1.censored,
            "risk": max(e0.p_hat, e1.p_hat),
            "upper0": up.exp0, "upper1": up.exp1, "lower0": lo.exp0, "lower1": lo.exp1,
        })
    fits = {}
    for key in ("eps_log_p0", "eps_log_p1"):
        cens = "censored" + key[-1]
        use = [r for r in rows if not r[cens]]
        if len(use) >= 2:
            x = np.array([r["eps"] for r in use])
            y = np.array([r[key] for r in use])
            b, a = np.polyfit(x, y, 1)
            fits[key] = {"intercept": float(a), "slope": float(b), "n_points": len(use)}
        else:
            fits[key] = {"intercept": np.nan, "slope": np.nan, "n_points": len(use)}
    y1 = [r["eps_log_p1"] for r in rows if not r["censored1"]]
    # diagnostic only: whether eps log p1 falls as eps grows on this run
    monotone = bool(np.all(np.diff(y1) <= 0)) if len(y1) >= 2 else None
    risk_gammas = {}
    for g in (5.0 / 7.0, 0.75):
        qq = BoundQuery(g, T, phi_op_norm)
        risk_gammas[f"{g:.6f}"] = {"upper_risk": prop7_upper(qq).worst,
                                   "lower_risk": prop8_lower(qq).worst}
    return {"gamma": gamma, "T": T, "rows": rows, "fits": fits,
            "eps_log_p1_decreasing_in_eps": monotone, "risk_bounds": risk_gammas}


def _cell(v):
    """CSV text for a value; floats keep full precision, numpy scalars become plain."""
    if isinstance(v, np.generic):
        v = v.item()
    return repr(v) if isinstance(v, float) else v


def write_rows_csv(rows: Sequence[dict], path, header_comment: str | None = None):
    if not rows:
        raise ValueError("no rows to write")
    cols = list(rows[0])
    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for r in rows:
            w.writerow({k: _cell(v) for k, v in r.items()})
