"""Field snapshot files.

Binary layout (little endian): an int64 point count, a float64 half width,
a float64 time, then ``n_points`` complex values stored as interleaved
float64 real and imaginary parts.
"""
from __future__ import annotations

import csv
import struct

import numpy as np

from .spectral import FieldState, SpatialGrid

__all__ = ["write_field_csv", "read_field_csv", "write_field_binary", "read_field_binary",
           "write_snapshots"]

_HEADER = struct.Struct("<qdd")


def write_field_csv(path, f: FieldState):
    x = f.grid.x
    u = f.values
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "re_u", "im_u", "abs2_u"])
        for xi, ui in zip(x, u):
            w.writerow([repr(float(xi)), repr(float(ui.real)), repr(float(ui.imag)),
                        repr(float(abs(ui) ** 2))])


def read_field_csv(path, half_width: float, time: float = 0.0) -> FieldState:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    grid = SpatialGrid(data.shape[0], half_width)
    return FieldState(data[:, 1] + 1j * data[:, 2], grid, time)


def write_field_binary(path, f: FieldState):
    buf = np.empty(2 * f.grid.n_points, dtype="<f8")
    buf[0::2] = f.values.real
    buf[1::2] = f.values.imag
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(f.grid.n_points, f.grid.half_width, f.time))
        fh.write(buf.tobytes())


def read_field_binary(path) -> FieldState:
    with open(path, "rb") as fh:
        raw = fh.read()
    n, half_width, time = _HEADER.unpack_from(raw)
    body = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
    if body.size != 2 * n:
        raise ValueError(f"expected {2 * n} floats after header, found {body.size}")
    return FieldState(body[0::2] + 1j * body[1::2], SpatialGrid(int(n), half_width), time)


def write_snapshots(traj, times, stem) -> list[str]:
    """Binary snapshots of a trajectory at the nodes nearest to ``times``."""
    paths = []
    for t in times:
        i = int(np.argmin(np.abs(traj.times - t)))
        p = f"{stem}_t{traj.times[i]:.6g}.bin"
        write_field_binary(p, traj.state_at_index(i))
        paths.append(p)
    return paths
