"""Sectored-antenna measurement model.

A probing beam of width ``l`` has gain ``2pi/l`` over its arc and zero
elsewhere.  The base station observes ``y = h*sqrt(p*G) + n`` with
``n ~ CN(0, sigma2)``; the pilot is 1 and the known beam phase is rotated out,
so the noiseless mean is real.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .angular import TWO_PI, Beam, arc_contains, circ_dist


class NoiselessChannelError(ValueError):
    """Raised where a finite noise variance is required but sigma2 == 0."""


@dataclass(frozen=True)
class ChannelParams:
    h: float = 1.0
    p: float = 1.0
    sigma2: float = 1.0

    def __post_init__(self):
        if self.h < 0 or self.p <= 0 or self.sigma2 < 0:
            raise ValueError(f"invalid channel parameters {self!r}")

    @classmethod
    def from_snr_db(cls, snr_db: float, h: float = 1.0, p: float = 1.0) -> "ChannelParams":
        return cls(h=h, p=p, sigma2=h * h * p / 10.0 ** (snr_db / 10.0))

    @property
    def raw_snr_linear(self) -> float:
        if self.sigma2 == 0:
            raise NoiselessChannelError("raw SNR is infinite for sigma2 == 0")
        return self.h * self.h * self.p / self.sigma2


@dataclass(frozen=True)
class Measurement:
    re: float
    im: float

    def __post_init__(self):
        if not (math.isfinite(self.re) and math.isfinite(self.im)):
            raise ValueError("measurement components must be finite")

    @property
    def value(self) -> complex:
        return complex(self.re, self.im)


def raw_snr_db(ch: ChannelParams) -> float:
    return 10.0 * math.log10(ch.raw_snr_linear)


def sigma2_for_snr_db(snr_db, h: float = 1.0, p: float = 1.0):
    return h * h * p / 10.0 ** (np.asarray(snr_db, dtype=float) / 10.0)


def beam_gain(beam: Beam, psi):
    g = np.where(arc_contains(beam.start, beam.length, psi), TWO_PI / beam.length, 0.0)
    return float(g) if g.ndim == 0 else g


def soft_beam_gain(beam: Beam, psi, tau: float):
    """Logistic-edged surrogate of :func:`beam_gain`, smooth in start and length."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    d = circ_dist(psi, beam.center)
    z = (0.5 * beam.length - d) / tau
    # 0.5*(1 + tanh(z/2)) is the logistic without overflow for large |z|
    g = (TWO_PI / beam.length) * 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z)))
    return float(g) if np.ndim(g) == 0 else g


def mean_amplitude(gain, ch: ChannelParams):
    return ch.h * np.sqrt(ch.p * np.asarray(gain, dtype=float))


def sample_measurement(psi_true: float, beam: Beam, ch: ChannelParams,
                       rng: np.random.Generator) -> Measurement:
    mu = ch.h * math.sqrt(ch.p * beam_gain(beam, psi_true))
    n = rng.standard_normal(2) * math.sqrt(0.5 * ch.sigma2)
    return Measurement(mu + float(n[0]), float(n[1]))


def loglik(y: Measurement, psi, beam: Beam, ch: ChannelParams,
           soft: bool = False, tau: float | None = None):
    """Log-likelihood of ``y`` for AoA hypotheses ``psi`` (scalar or array).

    Returns ``-|y - mu(psi)|^2 / sigma2``; the ``-log(pi*sigma2)`` term is
    dropped since it is shared by every hypothesis.
    """
    if ch.sigma2 == 0:
        raise NoiselessChannelError("use belief.noiseless_update for sigma2 == 0")
    if soft:
        g = soft_beam_gain(beam, psi, tau)
    else:
        g = beam_gain(beam, psi)
    mu = mean_amplitude(g, ch)
    ll = -((y.re - mu) ** 2 + y.im ** 2) / ch.sigma2
    return float(ll) if np.ndim(ll) == 0 else ll
