"""Time integration of deterministic, controlled and noisy NLS.

The scheme is Strang splitting around the exact pointwise nonlinear phase
rotation ``u -> exp(-i lam |u|^(2 sigma) tau) u``:

    N(dt/2) . [S(dt/2) F S(dt/2)] . N(dt/2)

where ``F`` adds the forcing. A control contributes the midpoint Duhamel
term ``-i dt Phi h(t + dt/2)``; noise contributes ``-i sqrt(eps) dW`` after
the full linear sub-step.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.fft as sfft
from scipy.integrate import quad, trapezoid

from .noise import NoiseOperator, NotInRangeError, apply_phi_pinv
from .spectral import (
    FieldState,
    ModelParams,
    SpatialGrid,
    h1_norm_sq,
    l2_norm_sq,
    laplacian,
    observables,
    shift_Y,
    windowed_momentum,
)

__all__ = [
    "ControlPath",
    "Trajectory",
    "BlowupRecord",
    "ControlForcing",
    "NoiseForcing",
    "SolverInstabilityError",
    "evolve",
    "evolve_batch",
    "skeleton",
    "extract_control",
    "rate_functional",
    "blowup_control",
    "blowup_control_divergence",
    "default_blowup_R",
]

NOISE_CHUNK = 16


class SolverInstabilityError(RuntimeError):
    pass


@dataclass(eq=False)
class ControlPath:
    """Time-sampled control ``h(t, .)``.

    ``func``, when present, evaluates the control exactly at any time and is
    used by the integrator instead of linear interpolation between nodes.
    """

    times: np.ndarray
    fields: np.ndarray
    grid: SpatialGrid
    func: Callable[[float], np.ndarray] | None = None
    discarded: float = 0.0
    in_range: bool = True
    start: float = 0.0  # absolute time of the first node when the path is offset

    def __post_init__(self):
        self.times = np.asarray(self.times, float)
        self.fields = np.asarray(self.fields, complex)
        if self.times.ndim != 1 or self.times.size < 2:
            raise ValueError("a control needs at least two time nodes")
        if self.times[0] != 0.0 or np.any(np.diff(self.times) <= 0):
            raise ValueError("control times must start at 0 and increase strictly")
        if self.fields.shape != (self.times.size, self.grid.n_points):
            raise ValueError("fields must have shape (n_times, n_points)")
        self._norm = self._compute_norm()

    def _compute_norm(self) -> float:
        return float(trapezoid(l2_norm_sq(self.fields, self.grid), self.times))

    @property
    def l2_norm_sq(self) -> float:
        return self._norm

    @property
    def T(self) -> float:
        return float(self.times[-1])

    def node_norms_sq(self) -> np.ndarray:
        return l2_norm_sq(self.fields, self.grid)

    def at(self, t: float) -> np.ndarray:
        if self.func is not None:
            return self.func(t)
        if t <= self.times[0]:
            return self.fields[0]
        if t >= self.times[-1]:
            return self.fields[-1] if t == self.times[-1] else np.zeros(self.grid.n_points, complex)
        j = np.searchsorted(self.times, t) - 1
        w = (t - self.times[j]) / (self.times[j + 1] - self.times[j])
        return (1 - w) * self.fields[j] + w * self.fields[j + 1]

    @classmethod
    def zero(cls, grid: SpatialGrid, T: float, n_times: int = 2) -> "ControlPath":
        return cls(np.linspace(0.0, T, n_times), np.zeros((n_times, grid.n_points)), grid)

    @classmethod
    def from_function(cls, func, times, grid) -> "ControlPath":
        times = np.asarray(times, float)
        return cls(times, np.array([func(t) for t in times]), grid, func=func)

    def scaled(self, c: float) -> "ControlPath":
        f = None if self.func is None else (lambda t, g=self.func: c * g(t))
        return ControlPath(self.times, c * self.fields, self.grid, f, self.discarded, self.in_range,
                           self.start)


@dataclass(frozen=True)
class BlowupRecord:
    R: float
    t_cross: float


@dataclass(eq=False)
class Trajectory:
    times: np.ndarray
    values: np.ndarray
    grid: SpatialGrid
    params: ModelParams = field(default_factory=ModelParams)
    blowup: BlowupRecord | None = None
    n_steps: int = 0

    @property
    def states(self) -> list[FieldState]:
        return [FieldState(v, self.grid, t) for t, v in zip(self.times, self.values)]

    @property
    def final(self) -> FieldState:
        return FieldState(self.values[-1], self.grid, self.times[-1])

    def state_at_index(self, i: int) -> FieldState:
        return FieldState(self.values[i], self.grid, self.times[i])

    def h1_norms(self) -> np.ndarray:
        return np.sqrt(h1_norm_sq(self.values, self.grid))

    def table(self, window_l: float | None = None) -> dict[str, np.ndarray]:
        obs = np.array([observables(s, self.params) for s in self.states])
        l = self.grid.half_width if window_l is None else window_l
        return {
            "t": self.times,
            "mass_sq": obs[:, 0],
            "hamiltonian": obs[:, 1],
            "h1_norm_sq": obs[:, 3],
            "windowed_momentum": windowed_momentum(self.values, l, self.grid),
            "shift_Y": shift_Y(self.values, self.grid),
        }

    def to_csv(self, path, window_l: float | None = None):
        tab = self.table(window_l)
        cols = list(tab)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for row in zip(*(tab[c] for c in cols)):
                w.writerow([repr(float(v)) for v in row])


@dataclass(frozen=True, eq=False)
class ControlForcing:
    path: ControlPath
    phi: NoiseOperator


@dataclass(frozen=True, eq=False)
class NoiseForcing:
    phi: NoiseOperator
    eps: float
    rng: np.random.Generator


def default_blowup_R(u0: FieldState) -> float:
    return 50.0 * float(np.sqrt(h1_norm_sq(u0.values, u0.grid)))


def _nl_phase(u: np.ndarray, params: ModelParams, tau: float | np.ndarray) -> np.ndarray:
    a2 = u.real**2 + u.imag**2
    theta = a2 if params.sigma == 1 else a2**params.sigma
    theta *= -params.lam * tau
    rot = np.empty(u.shape, complex)
    np.cos(theta, out=rot.real)
    np.sin(theta, out=rot.imag)
    rot *= u
    return rot


def _integrate_noise_fused(u, grid, params, T, dt, phi, eps, rngs):
    """Noisy batch without blow-up tracking, with adjacent nonlinear half-steps merged."""
    n_steps = int(round(T / dt))
    B, n = u.shape
    sup = phi.support
    full = sup.size == n
    scale = np.sqrt(eps * dt) * phi.multiplier[sup] * n / np.sqrt(2.0 * grid.half_width)
    lin = np.exp(1j * grid.wavenumbers**2 * dt)
    v = _nl_phase(np.array(u, complex), params, 0.5 * dt)
    block = None
    for step in range(n_steps):
        j = step % NOISE_CHUNK
        if j == 0:
            block = np.stack([r.standard_normal((NOISE_CHUNK, 2, sup.size)) for r in rngs])
        vk = sfft.fft(v, axis=-1)
        vk *= lin
        z = block[:, j]
        if eps > 0:
            kick = scale * (z[:, 1] - 1j * z[:, 0])  # -i (z0 + i z1)
            if full:
                vk += kick
            else:
                vk[:, sup] += kick
        v = sfft.ifft(vk, axis=-1)
        v = _nl_phase(v, params, dt if step < n_steps - 1 else 0.5 * dt)
    unstable = ~np.all(np.isfinite(v), axis=-1)
    return v, np.full(B, np.inf), unstable, n_steps


def _integrate(u, grid, params, T, dt, *, control=None, noise=None, rngs=None,
               blowup_R=None, adaptive=None, save_every=1, on_save=None,
               mass_monitor=False, mass_tol=1e-8):
    """Core batched loop; ``u`` has shape (B, n).

    Returns ``(u_final, t_cross, unstable, n_steps)``. Samples that cross
    ``blowup_R`` or turn non-finite are frozen at that point.
    """
    u = np.array(u, complex)
    B, n = u.shape
    k2 = grid.wavenumbers**2
    t = 0.0
    step = 0
    t_cross = np.full(B, np.inf)
    unstable = np.zeros(B, bool)
    active = np.ones(B, bool)
    mass0 = l2_norm_sq(u, grid) if mass_monitor else None
    if noise is not None:
        phi, eps = noise
        sup = phi.support
        noise_scale = phi.multiplier[sup] * n / np.sqrt(2.0 * grid.half_width)
        block = None
    if on_save is not None:
        on_save(t, u, active)
    fixed_half = None
    while t < T - 1e-12 * max(1.0, T):
        h = min(dt, T - t)
        if adaptive is not None:
            amax = np.max(np.abs(u[active])) if active.any() else 0.0
            if amax > 0:
                h = min(h, adaptive / amax ** (2 * params.sigma))
        if fixed_half is None or fixed_half[0] != h:
            fixed_half = (h, np.exp(0.5j * k2 * h))
        half = fixed_half[1]
        if noise is not None:
            j = step % NOISE_CHUNK
            if j == 0:
                block = np.stack([r.standard_normal((NOISE_CHUNK, 2, sup.size)) for r in rngs])
        idx = np.flatnonzero(active)
        v = u[idx]
        v = _nl_phase(v, params, 0.5 * h)
        vk = sfft.fft(v, axis=-1) * half
        if control is not None:
            path, cphi = control
            hk = sfft.fft(path.at(t + 0.5 * h))
            vk = vk - 1j * h * cphi.multiplier * hk
        vk *= half
        if noise is not None and eps > 0:
            z = block[idx, j]
            dw = np.zeros_like(vk)
            dw[:, sup] = noise_scale * np.sqrt(h) * (z[:, 0] + 1j * z[:, 1])
            vk -= 1j * np.sqrt(eps) * dw
        v = sfft.ifft(vk, axis=-1)
        v = _nl_phase(v, params, 0.5 * h)
        t += h
        step += 1
        bad = ~np.all(np.isfinite(v), axis=-1)
        if blowup_R is not None:
            with np.errstate(over="ignore", invalid="ignore"):
                nrm = np.sqrt(h1_norm_sq(v, grid))
            crossed = (nrm >= blowup_R) | bad
            if crossed.any():
                t_cross[idx[crossed]] = t
                ok = crossed & ~bad
                u[idx[ok]] = v[ok]
                active[idx[crossed]] = False
                keep = ~crossed
                idx, v = idx[keep], v[keep]
        elif bad.any():
            unstable[idx[bad]] = True
            active[idx[bad]] = False
            keep = ~bad
            idx, v = idx[keep], v[keep]
        u[idx] = v
        if mass_monitor and idx.size:
            drift = np.abs(l2_norm_sq(u[idx], grid) - mass0[idx]) / np.maximum(mass0[idx], 1e-300)
            if np.any(drift > mass_tol):
                raise SolverInstabilityError(
                    f"mass drift {np.max(drift):.2e} at t={t:.6g}; reduce dt (currently {h:.3g})"
                )
        if on_save is not None:
            final = t >= T - 1e-12 * max(1.0, T)
            if step % save_every == 0 or final or not active.all():
                on_save(t, u, active)
        if not active.any():
            break
    return u, t_cross, unstable, step


def evolve(u0: FieldState, params: ModelParams, T: float, dt: float, forcing=None,
           blowup_R: float | None = None, save_every: int = 1,
           adaptive: float | None = None, mass_tol: float = 1e-8) -> Trajectory:
    """Integrate from ``u0`` over ``[0, T]``.

    ``forcing`` is ``None``, a :class:`ControlForcing` or a
    :class:`NoiseForcing`. With ``blowup_R`` the run stops at the first step
    whose H^1 norm reaches it and the trajectory carries a
    :class:`BlowupRecord`. ``adaptive`` caps the step at
    ``adaptive / max|u|^(2 sigma)``.

    Raises :class:`SolverInstabilityError` if the field turns non-finite
    without a blow-up threshold, or if the mass drifts in an unforced run.
    """
    grid = u0.grid
    if not (T > 0 and dt > 0):
        raise ValueError("T and dt must be positive")
    if blowup_R is not None and blowup_R <= np.sqrt(h1_norm_sq(u0.values, grid)):
        raise ValueError("blowup_R must exceed the initial H^1 norm")
    control = noise = rngs = None
    if isinstance(forcing, ControlForcing):
        if forcing.path.grid != grid or forcing.phi.grid != grid:
            raise ValueError("control and state grids differ")
        control = (forcing.path, forcing.phi)
    elif isinstance(forcing, NoiseForcing):
        noise = (forcing.phi, forcing.eps)
        rngs = [forcing.rng]
    elif forcing is not None:
        raise TypeError(f"unsupported forcing {type(forcing).__name__}")

    times, values = [], []

    def save(t, u, active):
        if active[0] or not times or times[-1] != t:
            times.append(t)
            values.append(u[0].copy())

    u, t_cross, unstable, steps = _integrate(
        u0.values[None, :], grid, params, T, dt, control=control, noise=noise, rngs=rngs,
        blowup_R=blowup_R, adaptive=adaptive, save_every=save_every, on_save=save,
        mass_monitor=forcing is None, mass_tol=mass_tol,
    )
    if unstable[0]:
        raise SolverInstabilityError(
            "field became non-finite; set blowup_R to track blow-up or reduce dt"
        )
    times = np.array(times)
    values = np.array(values)
    record = None
    if np.isfinite(t_cross[0]):
        keep = times <= t_cross[0]
        times, values = times[keep], values[keep]
        if not np.all(np.isfinite(values[-1])):
            times, values = times[:-1], values[:-1]
        record = BlowupRecord(float(blowup_R), float(t_cross[0]))
    return Trajectory(times, values, grid, params, record, steps)


def evolve_batch(u0: FieldState | np.ndarray, params: ModelParams, T: float, dt: float,
                 phi: NoiseOperator, eps: float, rngs: Sequence[np.random.Generator],
                 blowup_R: float | None = None):
    """Final states of many noisy runs sharing ``u0``; one stream per sample.

    Returns ``(final_values, t_cross, unstable)``. Each sample consumes its
    own stream in fixed-size blocks, so results do not depend on how samples
    are grouped into batches.
    """
    grid = phi.grid
    v0 = u0.values if isinstance(u0, FieldState) else np.asarray(u0, complex)
    u = np.repeat(v0[None, :], len(rngs), axis=0)
    n_steps = int(round(T / dt))
    if blowup_R is None and n_steps > 0 and abs(n_steps * dt - T) <= 1e-9 * T:
        uf, t_cross, unstable, _ = _integrate_noise_fused(u, grid, params, T, dt, phi, eps, list(rngs))
        return uf, t_cross, unstable
    uf, t_cross, unstable, _ = _integrate(
        u, grid, params, T, dt, noise=(phi, eps), rngs=list(rngs), blowup_R=blowup_R)
    return uf, t_cross, unstable


def skeleton(h: ControlPath, u0: FieldState, params: ModelParams, dt: float,
             phi: NoiseOperator, T: float | None = None, **kw) -> Trajectory:
    """Solution of the controlled equation ``i u_t = u_xx + lam|u|^(2s)u + Phi h``.

    Pass ``FieldState.zeros(grid)`` as ``u0`` for the null-datum skeleton.
    """
    return evolve(u0, params, h.T if T is None else T, dt, ControlForcing(h, phi), **kw)


def _residual(u: np.ndarray, u_t: np.ndarray, grid: SpatialGrid, params: ModelParams):
    a2 = np.abs(u) ** 2
    pw = a2 if params.sigma == 1 else a2**params.sigma
    return 1j * u_t - laplacian(u, grid) - params.lam * pw * u


def extract_control(path, phi: NoiseOperator, params: ModelParams, times=None,
                    pinv_cutoff: float = 1e-10, tol: float = 1e-8) -> ControlPath:
    """Control that steers the skeleton along ``path``.

    ``path`` is a :class:`Trajectory` or a callable ``t -> values`` sampled
    at ``times``. The time derivative uses second-order centered differences
    (one-sided at the ends). If the energy outside ``im Phi`` exceeds ``tol``
    the returned path has ``in_range=False`` and an infinite rate.
    """
    grid = phi.grid
    if isinstance(path, Trajectory):
        t = np.asarray(path.times)
        u = np.asarray(path.values)
    else:
        if times is None:
            raise ValueError("times are required for an analytic path")
        t = np.asarray(times, float)
        u = np.array([path(s) for s in t])
    if t.size < 3:
        raise ValueError("need at least three time nodes")
    u_t = np.gradient(u, t, axis=0, edge_order=2)
    res = _residual(u, u_t, grid, params)
    h, frac = apply_phi_pinv(phi, res, pinv_cutoff)
    return ControlPath(t - t[0], h, grid, discarded=frac, in_range=frac <= tol)


def rate_functional(h: ControlPath) -> float:
    """Action ``||h||^2 / 2`` of one control; infinite when ``h`` is flagged out of range."""
    if not h.in_range:
        return np.inf
    return 0.5 * h.l2_norm_sq


def _blowup_pieces(u0: FieldState, phi, params, pinv_cutoff, tol):
    g = u0.grid
    v = u0.values
    pw = np.abs(v) ** (2 * params.sigma)
    parts = []
    for f in (v, laplacian(v, g), pw * v):
        inv, frac = apply_phi_pinv(phi, f, pinv_cutoff)
        if frac > tol:
            raise NotInRangeError(frac, tol)
        parts.append(inv)
    return parts


def _blowup_profile(T, normalized):
    c = T if normalized else 2.0

    def g(t):
        return c / (T - 2.0 * t)

    def dg(t):
        return 2.0 * c / (T - 2.0 * t) ** 2

    return g, dg


def blowup_control(u0: FieldState, T: float, phi: NoiseOperator, params: ModelParams,
                   t_end: float | None = None, n_uniform: int = 200, dt_min: float = 1e-7,
                   normalized: bool = True, pinv_cutoff: float = 1e-10,
                   tol: float = 1e-8) -> ControlPath:
    """Control whose skeleton is the self-similar path ``g(t) u0``.

    With ``normalized`` (default) ``g = T/(T - 2t)`` so the path starts at
    ``u0``; otherwise ``g = 2/(T - 2t)`` and the path starts at ``(2/T) u0``.
    Both reach infinity at ``T/2``. Nodes are uniform on ``[0, T/4]`` and then
    refined geometrically (ratio 1/2) towards ``T/2`` down to ``dt_min``;
    ``t_end`` truncates the node set.
    """
    if params.lam != 1:
        raise ValueError("the blow-up control needs a focusing nonlinearity")
    a, b, c = _blowup_pieces(u0, phi, params, pinv_cutoff, tol)
    g, dg = _blowup_profile(T, normalized)
    s = params.sigma

    def func(t):
        if t >= 0.5 * T:
            return np.zeros_like(a)
        gt = g(t)
        return 1j * dg(t) * a - gt * b - gt ** (2 * s + 1) * c

    half = 0.5 * T
    nodes = list(np.linspace(0.0, 0.5 * half, n_uniform))
    gap = 0.5 * half
    while gap > dt_min:
        gap *= 0.5
        nodes.append(half - gap)
    times = np.array(nodes)
    if t_end is not None:
        times = np.unique(np.append(times[times < t_end], t_end))
    return ControlPath.from_function(func, times, u0.grid)


def blowup_control_divergence(u0: FieldState, T: float, phi: NoiseOperator,
                              params: ModelParams, deltas=(1e-1, 3e-2, 1e-2, 3e-3, 1e-3),
                              normalized: bool = True) -> dict:
    """Squared control norm over ``[0, T/2 - delta]`` for shrinking ``delta``.

    ``||h(t)||^2`` is a quadratic form in ``(g', g, g^(2s+1))`` whose Gram
    matrix is computed once on the grid; the time integral is adaptive
    quadrature. A log-log slope well below zero means the norm diverges as
    ``delta -> 0``.
    """
    a, b, c = _blowup_pieces(u0, phi, params, 1e-10, 1e-8)
    grid = u0.grid
    vecs = [1j * a, -b, -c]
    G = np.array([[grid.integrate((vi * np.conj(vj)).real) for vj in vecs] for vi in vecs])
    g, dg = _blowup_profile(T, normalized)
    s = params.sigma

    def integrand(t):
        w = np.array([dg(t), g(t), g(t) ** (2 * s + 1)])
        return float(w @ G @ w)

    norms = []
    for d in deltas:
        end = 0.5 * T - d
        brk = [0.5 * T - x for x in np.geomspace(0.5 * T, d, 12)[1:-1]]
        val, _ = quad(integrand, 0.0, end, points=brk, limit=500, epsabs=0, epsrel=1e-10)
        norms.append(val)
    norms = np.array(norms)
    slope = np.polyfit(np.log(deltas), np.log(norms), 1)[0]
    return {
        "deltas": np.array(deltas),
        "l2_norm_sq": norms,
        "loglog_slope": float(slope),
        "diverges": bool(slope < -0.5),
        "predicted_slope": -(4 * s + 1),
    }
