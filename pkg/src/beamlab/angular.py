"""Circular-angle arithmetic on the half-open circle (0, 2pi].

Every angle in the package lives on (0, 2pi]; ``wrap(0)`` is ``2pi``.  Beams are
contiguous arcs ``(start, start + length]`` that may cross the 0/2pi seam.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

TWO_PI = 2.0 * math.pi

# slack for boundary comparisons; bin centers can sit exactly on dyadic beam edges
BOUNDARY_TOL = 1e-9


def wrap(x):
    """Map ``x`` (scalar or array, radians) onto the canonical range (0, 2pi]."""
    arr = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ValueError("wrap() needs finite angles")
    y = np.mod(arr, TWO_PI)
    y = np.where(y <= 0.0, TWO_PI, y)
    if y.ndim == 0:
        return float(y)
    return y


def circ_dist(a, b):
    """Shortest arc distance between two angles, in [0, pi]."""
    d = np.abs(np.mod(np.asarray(a, dtype=float) - np.asarray(b, dtype=float), TWO_PI))
    d = np.minimum(d, TWO_PI - d)
    if d.ndim == 0:
        return float(d)
    return d


def arc_contains(start, length, psi, tol: float = BOUNDARY_TOL):
    """Vectorized membership test ``psi in (start, start + length]``.

    All arguments broadcast.  An angle within ``tol`` of the start edge is
    outside the arc unless the arc is the full circle; one within ``tol`` of
    the far edge is inside.
    """
    start = np.asarray(start, dtype=float)
    length = np.asarray(length, dtype=float)
    off = np.mod(np.asarray(psi, dtype=float) - start, TWO_PI)
    at_start = (off < tol) | (off > TWO_PI - tol)
    full = length >= TWO_PI - tol
    return np.where(at_start, full, off <= length + tol)


@dataclass(frozen=True)
class Beam:
    """A contiguous arc ``(start, start + length]``; wrap-around is permitted."""

    start: float
    length: float

    def __post_init__(self):
        if not math.isfinite(self.length) or not (0.0 < self.length <= TWO_PI + BOUNDARY_TOL):
            raise ValueError(f"beam length must lie in (0, 2pi], got {self.length!r}")
        object.__setattr__(self, "start", wrap(self.start))
        object.__setattr__(self, "length", min(float(self.length), TWO_PI))

    @property
    def center(self) -> float:
        return wrap(self.start + 0.5 * self.length)

    @property
    def length_deg(self) -> float:
        return math.degrees(self.length)


def beam_contains(beam: Beam, psi) -> bool:
    out = arc_contains(beam.start, beam.length, psi)
    return bool(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class AngularGrid:
    """``n_bins`` equal bins; bin ``k`` (0-based) covers (k*w, (k+1)*w]."""

    n_bins: int

    def __post_init__(self):
        if int(self.n_bins) != self.n_bins or self.n_bins < 1:
            raise ValueError(f"n_bins must be a positive integer, got {self.n_bins!r}")

    @property
    def width(self) -> float:
        return TWO_PI / self.n_bins

    @cached_property
    def centers(self) -> np.ndarray:
        c = (np.arange(self.n_bins) + 0.5) * self.width
        c.setflags(write=False)
        return c

    def center(self, k: int) -> float:
        return (k + 0.5) * self.width

    def bin_of(self, psi):
        """0-based index of the bin holding ``psi``."""
        k = np.ceil(np.asarray(wrap(psi)) / self.width).astype(int) - 1
        k = np.clip(k, 0, self.n_bins - 1)
        return int(k) if k.ndim == 0 else k

    def arc(self, start_bin: int, n: int) -> Beam:
        """Whole-bin beam covering ``n`` bins starting at bin ``start_bin``."""
        return Beam(start_bin * self.width, n * self.width)


def bin_membership(grid: AngularGrid, beam: Beam) -> np.ndarray:
    """0/1 weight per bin: 1 iff the bin center lies inside ``beam``."""
    return arc_contains(beam.start, beam.length, grid.centers).astype(float)
