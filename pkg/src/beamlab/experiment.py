"""Monte Carlo evaluation of scan policies, sweeps, and figure tables.

Trial ``t`` is a pure function of ``(seed, t, config)``: its generator is
seeded from ``[seed, t]`` and draws, in order, two uniforms (AoA bin and
in-bin offset) and then one complex noise pair per slot.  Because the noise
stream is consumed slot by slot, a trial with ``b`` slots is a prefix of the
same trial with ``b + 1`` slots, and every policy and SNR sees the same
draws (common random numbers).
"""
from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace

import numpy as np

from .angular import TWO_PI, AngularGrid, arc_contains
from .belief import (PriorSpec, bayes_update_batch, credible_arcs, make_prior,
                     markov_beamwidth, mean_angles)
from .channel import sigma2_for_snr_db
from .config import from_mapping
from .policy import PolicyKind

log = logging.getLogger(__name__)

CHUNK = 1024
Z95 = 1.959963984540054

CSV_FIELDS = ["policy", "prior", "raw_snr_db", "b", "epsilon", "trials", "beamwidth_deg",
              "ci95_deg", "mmse_rad2", "err_prob", "markov_deg"]


def _as_list(v, cast):
    if isinstance(v, (list, tuple)):
        return [cast(x) for x in v]
    return [cast(v)]


@dataclass
class EvalConfig:
    policy: object = "bisection"
    prior: object = "uniform"
    slots: object = 4
    epsilon: float = 0.1
    raw_snr_db: object = 0.0
    trials: int = 10_000
    seed: int = 0
    n_bins: int = 360
    linear_moments: bool = False
    h: float = 1.0
    p: float = 1.0
    figure: str | None = None

    ALIASES = {"N": "n_bins", "b": "slots"}

    def __post_init__(self):
        if int(self.trials) != self.trials or self.trials < 1:
            raise ValueError("trials: must be a positive integer")
        if int(self.n_bins) != self.n_bins or self.n_bins < 1:
            raise ValueError("n_bins: must be a positive integer")
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError("epsilon: must lie in (0, 1)")
        try:
            self.policies
        except ValueError as exc:
            raise ValueError(f"policy: {exc}") from exc
        try:
            PriorSpec.parse(self.prior)
        except ValueError as exc:
            raise ValueError(f"prior: {exc}") from exc
        if any(b < 0 for b in self.slot_list):
            raise ValueError("slots: must be nonnegative")
        if not all(math.isfinite(s) for s in self.snr_list):
            raise ValueError("raw_snr_db: must be finite")
        if self.figure is not None and self.figure not in FIGURES:
            raise ValueError(f"figure: unknown figure {self.figure!r}")

    @classmethod
    def from_dict(cls, data: dict) -> "EvalConfig":
        return from_mapping(cls, data, cls.ALIASES)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["prior"] = PriorSpec.parse(self.prior).to_json()
        d["policy"] = [str(p) for p in self.policies]
        d["slots"] = self.slot_list
        d["raw_snr_db"] = self.snr_list
        return d

    @property
    def policies(self) -> list[PolicyKind]:
        return [PolicyKind.parse(p) for p in _as_list(self.policy, str)]

    @property
    def slot_list(self) -> list[int]:
        return _as_list(self.slots, int)

    @property
    def snr_list(self) -> list[float]:
        return _as_list(self.raw_snr_db, float)

    @property
    def grid(self) -> AngularGrid:
        return AngularGrid(self.n_bins)


@dataclass
class MetricsRecord:
    policy: str
    prior: str
    raw_snr_db: float
    b: int
    epsilon: float
    trials: int
    expected_beamwidth_deg: float
    ci95_beamwidth_deg: float
    mmse_rad2: float
    empirical_error_prob: float
    markov_beamwidth_deg: float
    failed_trials: int = 0

    def row(self) -> dict:
        return {"policy": self.policy, "prior": self.prior, "raw_snr_db": self.raw_snr_db,
                "b": self.b, "epsilon": self.epsilon, "trials": self.trials,
                "beamwidth_deg": self.expected_beamwidth_deg, "ci95_deg": self.ci95_beamwidth_deg,
                "mmse_rad2": self.mmse_rad2, "err_prob": self.empirical_error_prob,
                "markov_deg": self.markov_beamwidth_deg}


@dataclass
class TrialDraws:
    bins: np.ndarray
    psi: np.ndarray
    noise: np.ndarray  # (trials, slots, 2), unit variance


def draw_trials(seed: int, trial_ids, prior: np.ndarray, grid: AngularGrid, slots: int) -> TrialDraws:
    cdf = np.cumsum(prior)
    cdf[-1] = 1.0
    bins = np.empty(len(trial_ids), dtype=int)
    psi = np.empty(len(trial_ids))
    noise = np.empty((len(trial_ids), slots, 2))
    for r, t in enumerate(trial_ids):
        rng = np.random.default_rng([seed, int(t)])
        u = rng.random(2)
        k = min(int(np.searchsorted(cdf, u[0], side="right")), grid.n_bins - 1)
        # skip zero-mass bins that searchsorted can land on through rounding
        while prior[k] == 0:
            k -= 1
        bins[r] = k
        psi[r] = (k + u[1]) * grid.width
        noise[r] = rng.standard_normal((slots, 2))
    return TrialDraws(bins, psi, noise)


def simulate(policy, draws: TrialDraws, prior: np.ndarray, grid: AngularGrid, slots: int,
             sigma2: float, h: float = 1.0, p: float = 1.0, history: list | None = None) -> np.ndarray:
    """Run hard-gain episodes for a batch of trials; returns the final posteriors.

    If ``history`` is given, every intermediate posterior stack (prior first)
    is appended to it.
    """
    n = len(draws.bins)
    probs = np.broadcast_to(prior, (n, grid.n_bins)).copy()
    if history is not None:
        history.append(probs)
    rows = np.arange(n)
    scale = math.sqrt(0.5 * sigma2)
    for i in range(slots):
        starts, lengths = policy.scan_batch(probs)
        member = arc_contains(starts[:, None], lengths[:, None], grid.centers[None, :])
        mu = h * np.sqrt(p * np.where(member, TWO_PI / lengths[:, None], 0.0))
        y_re = mu[rows, draws.bins] + scale * draws.noise[:, i, 0]
        y_im = scale * draws.noise[:, i, 1]
        probs = bayes_update_batch(probs, mu, y_re, y_im, sigma2)
        if history is not None:
            history.append(probs)
    return probs


def trial_outcomes(final: np.ndarray, draws: TrialDraws, grid: AngularGrid, eps: float,
                   linear: bool = False):
    """Per-trial (beamwidth_rad, squared error, miss flag, mean-defined flag)."""
    start, nb = credible_arcs(final, eps)
    width = nb * grid.width
    miss = ((draws.bins - start) % grid.n_bins) >= nb
    m, ok = mean_angles(final, grid, linear)
    if linear:
        d = np.abs(draws.psi - m)
    else:
        d = np.abs(np.mod(draws.psi - m, TWO_PI))
        d = np.minimum(d, TWO_PI - d)
    return width, d * d, miss, ok


def _aggregate(cfg_policy: str, prior_label: str, snr: float, b: int, eps: float,
               width, sq, miss, ok) -> MetricsRecord:
    trials = len(width)
    wdeg = np.degrees(width)
    mean_w = math.fsum(wdeg) / trials
    var = math.fsum((wdeg - mean_w) ** 2) / (trials - 1) if trials > 1 else 0.0
    failed = int(np.count_nonzero(~ok))
    if failed:
        log.warning("%d/%d trials had an undefined posterior mean (excluded from MMSE)", failed, trials)
    mmse = math.fsum(sq[ok]) / max(trials - failed, 1) if trials > failed else float("nan")
    return MetricsRecord(
        policy=cfg_policy, prior=prior_label, raw_snr_db=snr, b=b, epsilon=eps, trials=trials,
        expected_beamwidth_deg=mean_w, ci95_beamwidth_deg=Z95 * math.sqrt(var / trials),
        mmse_rad2=mmse, empirical_error_prob=math.fsum(miss.astype(float)) / trials,
        markov_beamwidth_deg=math.degrees(markov_beamwidth(mmse, eps)) if math.isfinite(mmse) else float("nan"),
        failed_trials=failed)


def evaluate_policy(policy, label: str, cfg: EvalConfig, snr: float, b: int,
                    threads: int | None = None, prior: np.ndarray | None = None) -> MetricsRecord:
    """Metrics for one (policy, raw SNR, slots) cell."""
    grid = cfg.grid
    spec = PriorSpec.parse(cfg.prior)
    if prior is None:
        prior = make_prior(spec, grid)
    sigma2 = float(sigma2_for_snr_db(snr, cfg.h, cfg.p))
    chunks = [range(lo, min(lo + CHUNK, cfg.trials)) for lo in range(0, cfg.trials, CHUNK)]

    def run(ids):
        draws = draw_trials(cfg.seed, ids, prior, grid, b)
        final = simulate(policy, draws, prior, grid, b, sigma2, cfg.h, cfg.p)
        return trial_outcomes(final, draws, grid, cfg.epsilon, cfg.linear_moments)

    workers = max(1, threads or 1)
    if workers == 1 or len(chunks) == 1:
        parts = [run(c) for c in chunks]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, chunks))
    width, sq, miss, ok = (np.concatenate(x) for x in zip(*parts))
    return _aggregate(label, spec.label, snr, b, cfg.epsilon, width, sq, miss, ok)


def evaluate(cfg: EvalConfig, threads: int | None = None, policies=None) -> list[MetricsRecord]:
    """One record per (policy, raw SNR, slots) cell of ``cfg``.

    ``policies`` may pass prebuilt ``(label, policy)`` pairs instead of the
    config's policy strings.
    """
    grid = cfg.grid
    prior = make_prior(PriorSpec.parse(cfg.prior), grid)
    if policies is None:
        policies = [(str(k), k.build(grid)) for k in cfg.policies]
    out = []
    for label, pol in policies:
        for snr in cfg.snr_list:
            for b in cfg.slot_list:
                out.append(evaluate_policy(pol, label, cfg, snr, b, threads, prior))
    return out


def sweep(base: EvalConfig, snrs, bs, threads: int | None = None, policies=None) -> list[MetricsRecord]:
    snrs, bs = list(snrs), list(bs)
    if not snrs or not bs:
        return []
    return evaluate(replace(base, raw_snr_db=snrs, slots=bs), threads, policies)


class MisalignedCellsError(ValueError):
    pass


@dataclass
class CellDifference:
    raw_snr_db: float
    b: int
    diff_deg: float
    ci95_deg: float


def compare(records_a, records_b) -> list[CellDifference]:
    """Beamwidth of ``a`` minus ``b`` per (SNR, slots) cell; half-widths add in quadrature."""
    key = lambda r: (r.raw_snr_db, r.b)
    a = {key(r): r for r in records_a}
    b = {key(r): r for r in records_b}
    if set(a) != set(b) or len(a) != len(records_a) or len(b) != len(records_b):
        raise MisalignedCellsError("record sets do not cover the same (raw_snr_db, b) cells")
    return [CellDifference(k[0], k[1],
                           a[k].expected_beamwidth_deg - b[k].expected_beamwidth_deg,
                           math.hypot(a[k].ci95_beamwidth_deg, b[k].ci95_beamwidth_deg))
            for k in sorted(a)]


# -- output --------------------------------------------------------------------

def _fmt(v):
    return repr(v) if isinstance(v, float) else str(v)


def write_csv(records, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for r in records:
            row = r.row()
            w.writerow([_fmt(row[k]) for k in CSV_FIELDS])


def write_json(records, path) -> None:
    with open(path, "w") as fh:
        json.dump([r.row() for r in records], fh, indent=1, sort_keys=False)
        fh.write("\n")


# figure id -> (x-axis field, y field); fig4b/fig4c are posterior-shape tables
FIGURES = {
    "fig4a": ("raw_snr_db", "beamwidth_deg"),
    "fig4b": None,
    "fig4c": None,
    "fig5a": ("raw_snr_db", "mmse_rad2"),
    "fig5b": ("raw_snr_db", "beamwidth_deg"),
    "fig5c": ("raw_snr_db", "beamwidth_deg"),
    "fig6a": ("raw_snr_db", "beamwidth_deg"),
    "fig6b": ("b", "beamwidth_deg"),
    "fig6c": ("raw_snr_db", "beamwidth_deg"),
}


def figure_rows(fig: str, records):
    """Pivot records into a wide table: one row per x value, one column per series.

    Series are policies; fig6c additionally splits series by slot count.
    """
    xkey, ykey = FIGURES[fig]
    series, table = [], {}
    for r in records:
        row = r.row()
        name = row["policy"] if fig != "fig6c" else f"{row['policy']}@b={row['b']}"
        if name not in series:
            series.append(name)
        table.setdefault(row[xkey], {})[name] = row[ykey]
    header = [xkey] + series
    rows = [[x] + [table[x].get(s, "") for s in series] for x in sorted(table)]
    return header, rows


def cam_shape_rows(orders=(1, 2, 3), n_points: int = 181):
    """|x|^n over deviations in [-pi, pi] (the per-angle CAM integrand)."""
    x = np.linspace(-math.pi, math.pi, n_points)
    header = ["deviation_rad"] + [f"cam{n}" for n in orders]
    return header, [[xi] + [abs(xi) ** n for n in orders] for xi in x]


def write_figure(fig: str, path, records=None, posteriors=None) -> None:
    if fig not in FIGURES:
        raise ValueError(f"unknown figure {fig!r}")
    if fig == "fig4b":
        header, rows = cam_shape_rows()
    elif fig == "fig4c":
        # posteriors: mapping series name -> final posterior
        names = list(posteriors)
        n = len(next(iter(posteriors.values())))
        grid = AngularGrid(n)
        header = ["angle_deg"] + names
        rows = [[math.degrees(grid.center(k))] + [posteriors[s][k] for s in names] for k in range(n)]
    else:
        header, rows = figure_rows(fig, records)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
