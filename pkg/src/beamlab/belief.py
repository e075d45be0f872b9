"""Discretized AoA posterior: priors, Bayes recursion, moments, data-beam extraction.

Posteriors are plain float arrays of length ``grid.n_bins`` (or ``(B, n_bins)``
stacks for the batched helpers) that sum to one.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .angular import TWO_PI, AngularGrid, Beam, arc_contains, bin_membership, circ_dist, wrap
from .channel import ChannelParams, Measurement, NoiselessChannelError, beam_gain, mean_amplitude

# a posterior whose resultant vector is shorter than this has no circular mean
MIN_RESULTANT = 1e-9
# mass comparisons against 1 - eps tolerate cumulative-sum rounding
MASS_TOL = 1e-12


class UndefinedMeanError(ValueError):
    pass


class InconsistentEvidenceError(ValueError):
    pass


@dataclass(frozen=True)
class PriorSpec:
    """``uniform``, ``mixture`` (arc interval holding ``mass``) or ``custom`` table."""

    kind: str = "uniform"
    interval: tuple[float, float] = (5 * math.pi / 6, 7 * math.pi / 6)
    mass: float = 0.9
    table: tuple[float, ...] = field(default=())

    @classmethod
    def parse(cls, obj) -> "PriorSpec":
        if isinstance(obj, PriorSpec):
            return obj
        if isinstance(obj, str):
            if obj in ("uniform", "mixture"):
                return cls(kind=obj)
            raise ValueError(f"unknown prior {obj!r}")
        if isinstance(obj, dict):
            obj = dict(obj)
            kind = obj.pop("kind", None)
            if kind == "uniform" and not obj:
                return cls()
            if kind == "mixture":
                unknown = set(obj) - {"interval", "mass"}
                if unknown:
                    raise ValueError(f"unknown mixture prior keys {sorted(unknown)}")
                iv = tuple(float(v) for v in obj.get("interval", cls.interval))
                if len(iv) != 2:
                    raise ValueError("mixture interval needs two endpoints")
                return cls(kind="mixture", interval=iv, mass=float(obj.get("mass", 0.9)))
            if kind == "custom" and set(obj) == {"table"}:
                return cls(kind="custom", table=tuple(float(v) for v in obj["table"]))
        raise ValueError(f"cannot parse prior spec {obj!r}")

    def to_json(self):
        if self.kind == "uniform":
            return "uniform"
        if self.kind == "mixture":
            return {"kind": "mixture", "interval": list(self.interval), "mass": self.mass}
        return {"kind": "custom", "table": list(self.table)}

    @property
    def label(self) -> str:
        return self.kind


def make_prior(spec: PriorSpec, grid: AngularGrid) -> np.ndarray:
    n = grid.n_bins
    if spec.kind == "uniform":
        return np.full(n, 1.0 / n)
    if spec.kind == "mixture":
        a, b = spec.interval
        if not 0.0 <= spec.mass <= 1.0:
            raise ValueError("mixture mass must lie in [0, 1]")
        length = b - a
        if not 0.0 < length <= TWO_PI:
            raise ValueError(f"mixture interval must have length in (0, 2pi], got {length}")
        inside = arc_contains(a, length, grid.centers)
        k = int(inside.sum())
        if k == 0 and spec.mass > 0:
            raise ValueError("mixture interval covers no bin center")
        if k == n and spec.mass < 1:
            raise ValueError("mixture interval covers every bin; outer mass has nowhere to go")
        out = np.empty(n)
        out[inside] = spec.mass / k if k else 0.0
        out[~inside] = (1.0 - spec.mass) / (n - k) if n > k else 0.0
        return out
    if spec.kind == "custom":
        t = np.asarray(spec.table, dtype=float)
        if t.shape != (n,):
            raise ValueError(f"custom prior has {t.size} entries, grid has {n}")
        if np.any(t < 0) or not np.isfinite(t).all() or t.sum() <= 0:
            raise ValueError("custom prior must be nonnegative with positive mass")
        return t / t.sum()
    raise ValueError(f"unknown prior kind {spec.kind!r}")


def _normalize_log(logw: np.ndarray) -> np.ndarray:
    m = np.max(logw, axis=-1, keepdims=True)
    if not np.all(np.isfinite(m)):
        raise FloatingPointError("posterior update lost all mass")
    w = np.exp(logw - m)
    return w / w.sum(axis=-1, keepdims=True)


def bayes_update_batch(probs, mu, y_re, y_im, sigma2) -> np.ndarray:
    """Row-wise Bayes step for stacked posteriors.

    ``mu`` holds the per-bin noiseless amplitude (same shape as ``probs``);
    ``y_re``, ``y_im`` and ``sigma2`` are per-row.
    """
    y_re = np.asarray(y_re, dtype=float)[..., None]
    y_im = np.asarray(y_im, dtype=float)[..., None]
    s2 = np.asarray(sigma2, dtype=float)[..., None]
    if np.any(s2 <= 0):
        raise NoiselessChannelError("bayes_update needs sigma2 > 0")
    ll = -((y_re - mu) ** 2 + y_im ** 2) / s2
    with np.errstate(divide="ignore"):
        logp = np.log(probs)
    return _normalize_log(logp + ll)


def bayes_update(post: np.ndarray, beam: Beam, y: Measurement, ch: ChannelParams,
                 grid: AngularGrid) -> np.ndarray:
    if ch.sigma2 <= 0:
        raise NoiselessChannelError("bayes_update needs sigma2 > 0; use noiseless_update")
    mu = mean_amplitude(beam_gain(beam, grid.centers), ch)
    return bayes_update_batch(post, mu, y.re, y.im, ch.sigma2)


def noiseless_update(post: np.ndarray, beam: Beam, detected: bool, grid: AngularGrid) -> np.ndarray:
    inside = bin_membership(grid, beam).astype(bool)
    keep = inside if detected else ~inside
    out = np.where(keep, post, 0.0)
    total = out.sum()
    if total <= 0:
        raise InconsistentEvidenceError("conditioning on an event of zero posterior mass")
    return out / total


def mean_angles(probs, grid: AngularGrid, linear: bool = False):
    """Posterior means of stacked posteriors plus a mask of rows where it exists."""
    c = grid.centers
    if linear:
        m = probs @ c
        return m, np.ones(np.shape(m), dtype=bool)
    s = probs @ np.sin(c)
    co = probs @ np.cos(c)
    ok = np.hypot(s, co) > MIN_RESULTANT
    return wrap(np.arctan2(s, co)), ok


def circ_mean(post: np.ndarray, grid: AngularGrid, linear: bool = False) -> float:
    m, ok = mean_angles(np.asarray(post, dtype=float), grid, linear)
    if not ok:
        raise UndefinedMeanError("posterior resultant vanishes; circular mean undefined")
    return float(m)


def _dist(a, b, linear: bool):
    if linear:
        return np.abs(np.asarray(a) - np.asarray(b))
    return circ_dist(a, b)


def cam(post: np.ndarray, n: int, grid: AngularGrid, linear: bool = False) -> float:
    """n-th central absolute moment around the posterior mean."""
    if n < 1:
        raise ValueError("moment order must be >= 1")
    m = circ_mean(post, grid, linear)
    return float(np.sum(post * _dist(grid.centers, m, linear) ** n))


def sq_err(post: np.ndarray, psi_true: float, grid: AngularGrid, linear: bool = False) -> float:
    m = circ_mean(post, grid, linear)
    return float(_dist(wrap(psi_true), m, linear)) ** 2


def _prefix(probs):
    p = np.asarray(probs, dtype=float)
    n = p.shape[-1]
    c = np.zeros(p.shape[:-1] + (2 * n + 1,))
    c[..., 1:] = np.cumsum(np.concatenate([p, p], axis=-1), axis=-1)
    return c


def credible_arc(post: np.ndarray, eps: float) -> tuple[int, int]:
    """Shortest whole-bin arc with mass >= 1 - eps, as ``(start_bin, n_bins)``.

    Circular two-pointer sweep; ties go to the smallest start bin.
    """
    if not 0.0 < eps < 1.0:
        raise ValueError("eps must lie in (0, 1)")
    n = len(post)
    c = _prefix(post)
    need = 1.0 - eps - MASS_TOL
    best_start, best_len = 0, n
    end = 0
    for s in range(n):
        end = max(end, s + 1)
        while end < s + n and c[end] - c[s] < need:
            end += 1
        if end - s < best_len:
            best_start, best_len = s, end - s
    return best_start, best_len


def shortest_credible_beam(post: np.ndarray, eps: float, grid: AngularGrid) -> Beam:
    s, k = credible_arc(post, eps)
    return grid.arc(s, k)


def credible_arcs(probs: np.ndarray, eps: float) -> tuple[np.ndarray, np.ndarray]:
    """Batched :func:`credible_arc` over the rows of ``probs``.

    Bisects on the arc length; the best window mass is nondecreasing in length.
    """
    if not 0.0 < eps < 1.0:
        raise ValueError("eps must lie in (0, 1)")
    probs = np.atleast_2d(probs)
    rows, n = probs.shape
    c = _prefix(probs)
    need = 1.0 - eps - MASS_TOL
    starts = np.arange(n)
    ridx = np.arange(rows)[:, None]

    def feasible(length):
        win = c[ridx, starts[None, :] + length[:, None]] - c[:, :n]
        return win >= need

    lo = np.zeros(rows, dtype=int)  # infeasible
    hi = np.full(rows, n)  # feasible
    while np.any(hi - lo > 1):
        mid = (lo + hi) // 2
        ok = feasible(mid).any(axis=1)
        hi = np.where(ok, mid, hi)
        lo = np.where(ok, lo, mid)
    first = np.argmax(feasible(hi), axis=1)
    return first, hi


def markov_beamwidth(mmse: float, eps: float) -> float:
    """Beamwidth sqrt(4*mmse/eps) guaranteed by Markov's inequality, capped at 2pi."""
    if not 0.0 < eps < 1.0:
        raise ValueError("eps must lie in (0, 1)")
    return min(math.sqrt(4.0 * mmse / eps), TWO_PI)


def dump_posterior(post, fh) -> None:
    """Plain-text dump: header ``N=<n>`` then one probability per line."""
    fh.write(f"N={len(post)}\n")
    for v in post:
        fh.write(f"{float(v)!r}\n")


def load_posterior(fh) -> np.ndarray:
    header = fh.readline().strip()
    if not header.startswith("N="):
        raise ValueError(f"bad posterior header {header!r}")
    n = int(header[2:])
    vals = np.array([float(line) for line in fh if line.strip()])
    if vals.size != n:
        raise ValueError(f"header says {n} bins, found {vals.size}")
    return vals
