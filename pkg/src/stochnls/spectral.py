"""Periodic spectral grid, free Schrödinger group and field observables.

Everything here works in one space dimension on the periodic box
``[-L, L)`` sampled at ``n`` equispaced points. The equation convention is

    i du/dt = u_xx + lam |u|^(2 sigma) u  (+ forcing)

so the free group acts on Fourier modes as ``exp(+i k^2 t)``; with that sign
``sqrt(2) eta exp(-i eta^2 t) sech(eta x)`` is an exact solution of the cubic
focusing equation.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import scipy.fft as sfft
from scipy.integrate import trapezoid

__all__ = [
    "SpatialGrid",
    "ModelParams",
    "FieldState",
    "GridMismatchError",
    "TruncationError",
    "Observables",
    "propagate_free",
    "soliton",
    "soliton_profile",
    "observables",
    "windowed_momentum",
    "shift_Y",
    "xtp_norm",
    "admissible_r",
    "spectral_derivative",
    "laplacian",
    "l2_norm_sq",
    "h1_norm_sq",
]


class GridMismatchError(ValueError):
    """Raised when a state lives on a different grid than expected."""


class TruncationError(ValueError):
    """Raised when a localized profile does not fit in the periodic box."""


@dataclass(frozen=True)
class SpatialGrid:
    """Uniform periodic grid on ``[-half_width, half_width)``."""

    n_points: int = 1024
    half_width: float = 20.0 * np.pi

    def __post_init__(self):
        n = int(self.n_points)
        if n < 2 or n & (n - 1):
            raise ValueError(f"n_points must be a power of two, got {self.n_points}")
        if not self.half_width > 0:
            raise ValueError("half_width must be positive")
        object.__setattr__(self, "n_points", n)
        object.__setattr__(self, "half_width", float(self.half_width))

    @property
    def spacing(self) -> float:
        return 2.0 * self.half_width / self.n_points

    @property
    def x(self) -> np.ndarray:
        return -self.half_width + self.spacing * np.arange(self.n_points)

    @property
    def wavenumbers(self) -> np.ndarray:
        return 2.0 * np.pi * sfft.fftfreq(self.n_points, d=self.spacing)

    @property
    def k_nyquist(self) -> float:
        return np.pi / self.spacing

    def integrate(self, values: np.ndarray, axis: int = -1) -> np.ndarray:
        # rectangle rule == trapezoid on a periodic grid
        return self.spacing * np.sum(values, axis=axis)


@dataclass(frozen=True)
class ModelParams:
    sigma: float = 1.0
    lam: int = 1

    def __post_init__(self):
        if self.lam not in (-1, 1):
            raise ValueError("lam must be +1 (focusing) or -1 (defocusing)")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")

    @property
    def focusing(self) -> bool:
        return self.lam == 1


@dataclass(frozen=True, eq=False)
class FieldState:
    """Complex field sampled on a grid at a single time."""

    values: np.ndarray
    grid: SpatialGrid
    time: float = 0.0
    allow_nonfinite: bool = field(default=False, repr=False)

    def __post_init__(self):
        v = np.array(self.values, dtype=complex)
        if v.shape != (self.grid.n_points,):
            raise GridMismatchError(
                f"field of shape {v.shape} does not match grid with {self.grid.n_points} points"
            )
        if not self.allow_nonfinite and not np.all(np.isfinite(v)):
            raise ValueError("field contains non-finite entries")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "time", float(self.time))

    @classmethod
    def zeros(cls, grid: SpatialGrid, time: float = 0.0) -> "FieldState":
        return cls(np.zeros(grid.n_points, complex), grid, time)

    def with_values(self, values, time=None) -> "FieldState":
        return FieldState(values, self.grid, self.time if time is None else time)

    def _check(self, other: "FieldState"):
        if other.grid != self.grid:
            raise GridMismatchError("states live on different grids")

    def __add__(self, other: "FieldState") -> "FieldState":
        self._check(other)
        return self.with_values(self.values + other.values)

    def __sub__(self, other: "FieldState") -> "FieldState":
        self._check(other)
        return self.with_values(self.values - other.values)

    def __mul__(self, c) -> "FieldState":
        return self.with_values(c * self.values)

    __rmul__ = __mul__


def _as_values(f, grid: SpatialGrid | None = None) -> tuple[np.ndarray, SpatialGrid]:
    if isinstance(f, FieldState):
        if grid is not None and f.grid != grid:
            raise GridMismatchError("state grid differs from the requested grid")
        return f.values, f.grid
    if grid is None:
        raise TypeError("a grid is required for raw arrays")
    return np.asarray(f, dtype=complex), grid


def free_multiplier(grid: SpatialGrid, dt: float) -> np.ndarray:
    return np.exp(1j * grid.wavenumbers**2 * dt)


def propagate_free(f: FieldState, dt: float, grid: SpatialGrid | None = None) -> FieldState:
    """Apply the free group ``S(dt)``; any real ``dt`` is allowed."""
    if not np.isfinite(dt):
        raise ValueError("dt must be finite")
    v, g = _as_values(f, grid)
    out = sfft.ifft(free_multiplier(g, dt) * sfft.fft(v))
    return FieldState(out, g, getattr(f, "time", 0.0) + dt)


def spectral_derivative(values: np.ndarray, grid: SpatialGrid, order: int = 1) -> np.ndarray:
    k = grid.wavenumbers
    return sfft.ifft((1j * k) ** order * sfft.fft(values, axis=-1), axis=-1)


def laplacian(values: np.ndarray, grid: SpatialGrid) -> np.ndarray:
    return sfft.ifft(-grid.wavenumbers**2 * sfft.fft(values, axis=-1), axis=-1)


def soliton_profile(x: np.ndarray, eta: float, t: float = 0.0) -> np.ndarray:
    return np.sqrt(2.0) * eta * np.exp(-1j * eta**2 * t) / np.cosh(eta * x)


def soliton(eta: float, t: float, grid: SpatialGrid, shift: float = 0.0,
            tail_tol: float = 1e-12) -> FieldState:
    """Sample ``Psi_eta(t, x - shift)`` on ``grid``.

    Raises :class:`TruncationError` when the sech tail at the box edge exceeds
    ``tail_tol``.
    """
    if not eta > 0:
        raise ValueError("eta must be positive")
    edge = grid.half_width - abs(shift)
    if 1.0 / np.cosh(eta * edge) > tail_tol:
        raise TruncationError(
            f"sech(eta*L)={1.0 / np.cosh(eta * edge):.2e} exceeds {tail_tol:g}; widen the grid"
        )
    return FieldState(soliton_profile(grid.x - shift, eta, t), grid, t)


def l2_norm_sq(values: np.ndarray, grid: SpatialGrid) -> np.ndarray:
    return grid.integrate(np.abs(values) ** 2)


def h1_norm_sq(values: np.ndarray, grid: SpatialGrid) -> np.ndarray:
    # Parseval: sum (1 + k^2)|u_k|^2 dx / n
    vk = sfft.fft(values, axis=-1)
    w = 1.0 + grid.wavenumbers**2
    return grid.spacing / grid.n_points * np.sum(w * np.abs(vk) ** 2, axis=-1)


class Observables(NamedTuple):
    mass_sq: float
    hamiltonian: float
    variance: float
    h1_norm_sq: float


def observables(f: FieldState, params: ModelParams = ModelParams()) -> Observables:
    v, g = _as_values(f)
    if not np.all(np.isfinite(v)):
        raise ValueError("observables need a finite field")
    mass = l2_norm_sq(v, g)
    grad_sq = g.integrate(np.abs(spectral_derivative(v, g)) ** 2)
    s = params.sigma
    potential = g.integrate(np.abs(v) ** (2 * s + 2))
    ham = 0.5 * grad_sq - params.lam / (2 * s + 2) * potential
    var = g.integrate(g.x**2 * np.abs(v) ** 2)
    return Observables(float(mass), float(ham), float(var), float(mass + grad_sq))


def _window_mask(grid: SpatialGrid, l: float) -> np.ndarray:
    if not 0 < l <= grid.half_width:
        raise ValueError(f"window half-width {l} outside (0, {grid.half_width}]")
    return np.abs(grid.x) <= l


def windowed_momentum(f, l: float, grid: SpatialGrid | None = None):
    """``int_{-l}^{l} |u|^2 dx``; accepts a state or a (batch of) raw arrays."""
    v, g = _as_values(f, grid)
    count = int(np.sum(_window_mask(g, l)))
    # accumulate outward from x = 0 so that rounding never breaks monotonicity in l
    order = np.argsort(np.abs(g.x), kind="stable")
    dens = np.abs(v[..., order[:count]]) ** 2
    return g.spacing * np.cumsum(dens, axis=-1)[..., -1]


def shift_Y(f, grid: SpatialGrid | None = None):
    """First moment ``int x |u|^2 dx``.

    The periodic extension of ``x`` jumps at the seam ``x = -L``, where the
    weight is set to the midpoint value 0 so that the sum is odd under the
    grid reflection ``x_j -> x_{n-j}``.
    """
    v, g = _as_values(f, grid)
    w = g.x.copy()
    w[0] = 0.0
    return g.spacing * np.sum(w * np.abs(v) ** 2, axis=-1)


def admissible_r(p: float) -> float:
    """Time exponent paired with ``p`` in one dimension: ``2/r = 1/2 - 1/p``."""
    if p < 2:
        raise ValueError("p must be >= 2")
    if np.isinf(p):
        return 4.0
    if p == 2:
        return np.inf
    return 4.0 * p / (p - 2.0)


def _w1p_norm(values: np.ndarray, grid: SpatialGrid, p: float) -> np.ndarray:
    du = spectral_derivative(values, grid)
    if np.isinf(p):
        return np.maximum(np.max(np.abs(values), -1), np.max(np.abs(du), -1))
    return (grid.integrate(np.abs(values) ** p) + grid.integrate(np.abs(du) ** p)) ** (1.0 / p)


def xtp_norm(traj, T: float, p: float) -> float:
    """Diagnostic ``X^(T,p)`` norm of a stored trajectory.

    ``max(sup_t ||u||_H1, ||u||_{L^r(0,T; W^{1,p})})`` with ``r`` from the
    admissible-pair relation; time integral by the trapezoid rule on the
    stored nodes.
    """
    if p < 2:
        raise ValueError("p must be >= 2")
    times = np.asarray(traj.times)
    if T > times[-1] + 1e-12:
        raise ValueError("T exceeds the trajectory extent")
    sel = times <= T + 1e-12
    u = np.asarray(traj.values)[sel]
    t = times[sel]
    g = traj.grid
    sup_h1 = float(np.sqrt(np.max(h1_norm_sq(u, g))))
    r = admissible_r(p)
    w = _w1p_norm(u, g, p)
    if np.isinf(r):
        lr = float(np.max(w))
    else:
        lr = float(trapezoid(w**r, t) ** (1.0 / r)) if len(t) > 1 else 0.0
    return max(sup_h1, lr)
