"""Spatially colored additive noise ``W = Phi W_c``.

``Phi`` is diagonal in Fourier space: it multiplies the mode ``exp(ikx)`` by
a real nonnegative ``phi_hat(k)``. The cylindrical process ``W_c`` is built on
the real Hilbert space L^2(R; C) with inner product ``Re int u conj(v)``, so
the real and imaginary parts of every mode carry independent real Brownian
motions (``E |dW_c|^2 = 2 dt`` per mode). All Hilbert-Schmidt norms below are
taken with respect to that real structure, i.e. over the basis
``{e_k, i e_k}``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterable

import numpy as np
import scipy.fft as sfft

from .spectral import FieldState, SpatialGrid, _as_values

__all__ = [
    "NoiseOperator",
    "NotInRangeError",
    "make_filter",
    "sample_stream",
    "sample_increment",
    "increment_from_normals",
    "apply_phi",
    "apply_phi_pinv",
    "increment_covariance",
    "PROFILES",
]

PROFILES = ("gaussian", "band_ideal", "near_identity")


class NotInRangeError(ValueError):
    """The field has more energy outside ``im Phi`` than tolerated."""

    def __init__(self, discarded: float, tol: float):
        super().__init__(
            f"control not in im Phi: discarded energy fraction {discarded:.3e} > {tol:.1e}"
        )
        self.discarded = discarded


@dataclass(frozen=True, eq=False)
class NoiseOperator:
    grid: SpatialGrid
    multiplier: np.ndarray
    profile: str = "custom"
    params: tuple = ()

    def __post_init__(self):
        m = np.array(self.multiplier, dtype=float)
        if m.shape != (self.grid.n_points,):
            raise ValueError("multiplier must have one entry per grid mode")
        if not (np.all(np.isfinite(m)) and np.all(m >= 0)):
            raise ValueError("multiplier must be finite and nonnegative")
        m.setflags(write=False)
        object.__setattr__(self, "multiplier", m)

    @property
    def op_norm(self) -> float:
        return float(np.max(self.multiplier))

    @property
    def hs_norm_l2_sq(self) -> float:
        """Squared HS norm of Phi as a map L^2 -> L^2."""
        return float(2.0 * np.sum(self.multiplier**2))

    @property
    def hs_norm_h1_sq(self) -> float:
        """Squared HS norm of Phi as a map L^2 -> H^1."""
        k = self.grid.wavenumbers
        return float(2.0 * np.sum((1.0 + k**2) * self.multiplier**2))

    @property
    def support(self) -> np.ndarray:
        return np.flatnonzero(self.multiplier > 0)

    def kernel(self) -> np.ndarray:
        """Dense convolution kernel ``K[i, j]`` with ``(Phi u)_i = sum_j K[i, j] u_j dx``."""
        g = self.grid
        x = g.x
        k = g.wavenumbers
        diff = x[:, None] - x[None, :]
        return np.einsum("k,ijk->ij", self.multiplier,
                         np.exp(1j * k[None, None, :] * diff[:, :, None])) / (2 * g.half_width)

    def kernel_hs_norm_h1_sq(self) -> float:
        """Same quantity as :attr:`hs_norm_h1_sq`, from the dense kernel."""
        g = self.grid
        K = self.kernel()
        dK = sfft.ifft(1j * g.wavenumbers[:, None] * sfft.fft(K, axis=0), axis=0)
        return float(2.0 * g.spacing**2 * (np.sum(np.abs(K) ** 2) + np.sum(np.abs(dK) ** 2)))

    def assert_positive_on(self, k_max: float):
        """Check the controllability surrogate: ``phi_hat > 0`` for ``|k| <= k_max``."""
        band = np.abs(self.grid.wavenumbers) <= k_max
        if np.any(self.multiplier[band] <= 0):
            raise ValueError(f"Phi vanishes on part of the band |k| <= {k_max}")

    def to_csv(self, path):
        k = self.grid.wavenumbers
        order = np.argsort(k)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["k", "phi_hat"])
            for i in order:
                w.writerow([repr(float(k[i])), repr(float(self.multiplier[i]))])


def make_filter(profile: str, grid: SpatialGrid, *, bandwidth: float | None = None,
                k_max: float | None = None, rolloff: float | None = None,
                amplitude: float = 1.0) -> NoiseOperator:
    """Build a diagonal ``Phi``.

    gaussian       ``amplitude * exp(-k^2 / (2 bandwidth^2))``
    band_ideal     ``amplitude`` on ``|k| <= k_max``, zero beyond
    near_identity  ``amplitude`` on ``|k| <= k_max`` then the flat-shouldered
                   rolloff ``(1 + ((|k| - k_max)/rolloff)^4)^(-1/2)``; the k^-2
                   tail keeps the H^1 Hilbert-Schmidt norm finite while the
                   inverse stays polynomially bounded.
    """
    k = np.abs(grid.wavenumbers)
    knyq = grid.k_nyquist
    if profile == "gaussian":
        if bandwidth is None or not 0 < bandwidth < knyq:
            raise ValueError(f"gaussian bandwidth must lie in (0, {knyq:.4g})")
        m = np.exp(-(k**2) / (2.0 * bandwidth**2))
        params = (("bandwidth", bandwidth),)
    elif profile in ("band_ideal", "near_identity"):
        if k_max is None or not 0 < k_max < knyq:
            raise ValueError(f"k_max must lie in (0, {knyq:.4g})")
        if profile == "band_ideal":
            m = (k <= k_max).astype(float)
            params = (("k_max", k_max),)
        else:
            w = k_max if rolloff is None else rolloff
            if not w > 0:
                raise ValueError("rolloff must be positive")
            s = np.clip(k - k_max, 0.0, None) / w
            m = 1.0 / np.sqrt(1.0 + s**4)
            params = (("k_max", k_max), ("rolloff", w))
    else:
        raise ValueError(f"unknown filter profile {profile!r}; expected one of {PROFILES}")
    if not amplitude > 0:
        raise ValueError("amplitude must be positive")
    return NoiseOperator(grid, amplitude * m, profile, params + (("amplitude", amplitude),))


def sample_stream(master_seed: int, index: int) -> np.random.Generator:
    """Independent counter-based stream for Monte Carlo sample ``index``."""
    ss = np.random.SeedSequence(int(master_seed), spawn_key=(int(index),))
    return np.random.Generator(np.random.Philox(ss))


def increment_from_normals(phi: NoiseOperator, dt, z: np.ndarray) -> np.ndarray:
    """Map standard normals on the support of ``phi`` to a physical-space increment.

    ``z`` has shape ``(..., 2, m)`` with ``m = len(phi.support)``: real and
    imaginary parts of the unit-variance mode amplitudes. ``dt`` may be a
    scalar or broadcast against the leading axes.
    """
    g = phi.grid
    sup = phi.support
    n = g.n_points
    lead = z.shape[:-2]
    coeffs = np.zeros(lead + (n,), complex)
    # unitary DFT of white noise with variance dt/dx per component
    scale = n * np.sqrt(np.asarray(dt, float) / (2.0 * g.half_width))
    scale = np.reshape(scale, np.shape(scale) + (1,))
    coeffs[..., sup] = phi.multiplier[sup] * (z[..., 0, :] + 1j * z[..., 1, :]) * scale
    return sfft.ifft(coeffs, axis=-1)


def sample_increment(phi: NoiseOperator, dt: float, rng: np.random.Generator,
                     time: float = 0.0) -> FieldState:
    """One increment ``Phi (W_c(t + dt) - W_c(t))``."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    z = rng.standard_normal((2, phi.support.size))
    return FieldState(increment_from_normals(phi, dt, z), phi.grid, time)


def increment_covariance(phi: NoiseOperator, dt: float) -> np.ndarray:
    """Exact covariance ``E[f_i conj(f_j)]`` of the grid increment."""
    g = phi.grid
    # circulant: C_ij = (2 dt / 2L) * sum_k phi^2 exp(ik(x_i - x_j))
    col = sfft.ifft(phi.multiplier**2) * g.n_points * 2.0 * dt / (2.0 * g.half_width)
    idx = (np.arange(g.n_points)[:, None] - np.arange(g.n_points)[None, :]) % g.n_points
    return col[idx]


def apply_phi(phi: NoiseOperator, f) -> FieldState | np.ndarray:
    v, g = _as_values(f, phi.grid)
    out = sfft.ifft(phi.multiplier * sfft.fft(v, axis=-1), axis=-1)
    if isinstance(f, FieldState):
        return f.with_values(out)
    return out


def apply_phi_pinv(phi: NoiseOperator, f, rel_cutoff: float = 1e-10,
                   tol: float | None = None):
    """Regularized inverse of ``Phi``.

    Modes with ``phi_hat < rel_cutoff * op_norm`` are zeroed. Returns
    ``(result, discarded_fraction)`` where the fraction is the share of the
    input energy sitting on the zeroed modes. With ``tol`` set, a fraction
    above it raises :class:`NotInRangeError`.
    """
    if not 0 < rel_cutoff < 1:
        raise ValueError("rel_cutoff must lie in (0, 1)")
    v, g = _as_values(f, phi.grid)
    vk = sfft.fft(v, axis=-1)
    keep = phi.multiplier >= rel_cutoff * phi.op_norm
    inv = np.zeros_like(phi.multiplier)
    inv[keep] = 1.0 / phi.multiplier[keep]
    total = np.sum(np.abs(vk) ** 2)
    dropped = np.sum(np.abs(vk[..., ~keep]) ** 2)
    frac = float(dropped / total) if total > 0 else 0.0
    if tol is not None and frac > tol:
        raise NotInRangeError(frac, tol)
    out = sfft.ifft(inv * vk, axis=-1)
    if isinstance(f, FieldState):
        return f.with_values(out), frac
    return out, frac


def white_block(rngs: Iterable[np.random.Generator], shape) -> np.ndarray:
    """Stack one standard-normal block per stream (used by batched integrators)."""
    return np.stack([r.standard_normal(shape) for r in rngs])
