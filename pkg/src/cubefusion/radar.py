"""4D radar cube handling and its reduction to the dual 2D projections.

The cube is a dense power tensor over (range, azimuth, elevation, Doppler)
bins. It is reduced to two 2D maps: range-azimuth (BEV-like) and
azimuth-elevation (image-like), each carrying six statistics channels:

    [amp_max, amp_median, amp_var, dop_max, dop_median, dop_var]

Amplitude statistics are computed over all cells reduced away for a given
output cell. Doppler statistics are computed over the per-cell peak
velocities: for every remaining (spatial) cell the Doppler-bin centre with
the highest power is looked up first, then max/median/variance are taken
across the reduced spatial axis. Argmax ties resolve to the lowest bin
index; variance is the population (1/n) variance.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CHANNEL_NAMES = ("amp_max", "amp_median", "amp_var", "dop_max", "dop_median", "dop_var")

_CUBE_MAGIC = b"RCUB"
_CUBE_VERSION = 1


def _check_axis(name: str, axis: np.ndarray, length: int) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    if axis.ndim != 1 or axis.shape[0] != length:
        raise ValueError(f"{name} axis length {axis.shape} does not match cube dim {length}")
    if axis.shape[0] > 1 and not np.all(np.diff(axis) > 0):
        raise ValueError(f"{name} axis must be strictly increasing")
    return axis


@dataclass
class RadarCube:
    """Dense 4D power grid with per-axis bin-centre coordinates."""

    power: np.ndarray
    range_axis: np.ndarray
    azimuth_axis: np.ndarray
    elevation_axis: np.ndarray
    doppler_axis: np.ndarray

    def __post_init__(self):
        self.power = np.asarray(self.power, dtype=np.float64)
        if self.power.ndim != 4:
            raise ValueError(f"cube power must be 4D, got shape {self.power.shape}")
        if not np.all(np.isfinite(self.power)):
            raise ValueError("cube power must be finite")
        if np.any(self.power < 0):
            raise ValueError("cube power must be non-negative")
        r, a, e, d = self.power.shape
        self.range_axis = _check_axis("range", self.range_axis, r)
        self.azimuth_axis = _check_axis("azimuth", self.azimuth_axis, a)
        self.elevation_axis = _check_axis("elevation", self.elevation_axis, e)
        self.doppler_axis = _check_axis("doppler", self.doppler_axis, d)

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.power.shape


@dataclass
class DualProjection:
    """The two 6-channel projection maps of a radar cube.

    ra_map: (range_bins, azimuth_bins, 6)
    ae_map: (azimuth_bins, elevation_bins, 6)
    """

    ra_map: np.ndarray
    ae_map: np.ndarray

    def __post_init__(self):
        self.ra_map = np.asarray(self.ra_map, dtype=np.float64)
        self.ae_map = np.asarray(self.ae_map, dtype=np.float64)
        for name, m in (("ra_map", self.ra_map), ("ae_map", self.ae_map)):
            if m.ndim != 3 or m.shape[2] != len(CHANNEL_NAMES):
                raise ValueError(f"{name} must have shape (H, W, 6), got {m.shape}")


def trim_artifacts(cube: RadarCube, margin: int = 3) -> RadarCube:
    """Cut the first and last `margin` bins off the range axis.

    Removes DFFT edge artifacts that would otherwise dominate the
    azimuth-elevation projection (which integrates over range).
    """
    if margin < 0:
        raise ValueError("margin must be non-negative")
    n = cube.power.shape[0]
    if n <= 2 * margin:
        raise ValueError(f"axis too short to trim: length {n} with margin {margin}")
    if margin == 0:
        return cube
    sl = slice(margin, n - margin)
    return RadarCube(
        power=cube.power[sl],
        range_axis=cube.range_axis[sl],
        azimuth_axis=cube.azimuth_axis,
        elevation_axis=cube.elevation_axis,
        doppler_axis=cube.doppler_axis,
    )


def reduce_stats(values) -> tuple[float, float, float]:
    """(max, median, population variance) of a non-empty scalar sequence.

    Even-length median is the mean of the two middle elements.
    """
    arr = np.asarray(values, dtype=np.float64).ravel()
    if arr.size == 0:
        raise ValueError("cannot reduce an empty sequence")
    if not np.all(np.isfinite(arr)):
        raise ValueError("values must be finite")
    return float(arr.max()), float(np.median(arr)), float(np.var(arr))


def _stats_along_last(values: np.ndarray) -> np.ndarray:
    """Stack (max, median, var) over the last axis of `values`."""
    return np.stack(
        (values.max(axis=-1), np.median(values, axis=-1), np.var(values, axis=-1)),
        axis=-1,
    )


def project_cube(cube: RadarCube, log_compress: bool = False) -> DualProjection:
    """Reduce a (trimmed) 4D cube to the RA and AE statistics maps.

    With `log_compress` the amplitude channels are computed on log1p of the
    power values; Doppler channels are always physical velocities.
    """
    power = cube.power
    amp = np.log1p(power) if log_compress else power
    r, a, e, d = power.shape

    # Velocity of the strongest Doppler bin per spatial cell, ties to lowest index.
    peak_vel = cube.doppler_axis[np.argmax(power, axis=3)]  # (r, a, e)

    ra_amp = _stats_along_last(amp.reshape(r, a, e * d))
    ra_dop = _stats_along_last(peak_vel)  # reduce over elevation
    ae_amp = _stats_along_last(amp.transpose(1, 2, 0, 3).reshape(a, e, r * d))
    ae_dop = _stats_along_last(peak_vel.transpose(1, 2, 0))  # reduce over range

    return DualProjection(
        ra_map=np.concatenate((ra_amp, ra_dop), axis=-1),
        ae_map=np.concatenate((ae_amp, ae_dop), axis=-1),
    )


def save_cube(cube: RadarCube, path: str | Path) -> None:
    """Write a cube to the single-file binary container.

    Layout (all little-endian): magic b"RCUB", uint32 version, four uint32
    dims (range, azimuth, elevation, doppler), the four axis vectors as
    float32, then the power array as float32 in row-major order.
    """
    path = Path(path)
    with open(path, "wb") as f:
        f.write(_CUBE_MAGIC)
        f.write(struct.pack("<I", _CUBE_VERSION))
        f.write(struct.pack("<4I", *cube.power.shape))
        for axis in (cube.range_axis, cube.azimuth_axis, cube.elevation_axis, cube.doppler_axis):
            f.write(axis.astype("<f4").tobytes())
        f.write(np.ascontiguousarray(cube.power, dtype="<f4").tobytes())


def load_cube(path: str | Path) -> RadarCube:
    """Read a cube written by :func:`save_cube`."""
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _CUBE_MAGIC:
            raise ValueError(f"{path}: not a radar cube file (bad magic {magic!r})")
        (version,) = struct.unpack("<I", f.read(4))
        if version != _CUBE_VERSION:
            raise ValueError(f"{path}: unsupported cube file version {version}")
        dims = struct.unpack("<4I", f.read(16))
        axes = [np.frombuffer(f.read(4 * n), dtype="<f4").astype(np.float64) for n in dims]
        count = int(np.prod(dims))
        power = np.frombuffer(f.read(4 * count), dtype="<f4").astype(np.float64)
    return RadarCube(power.reshape(dims), *axes)
