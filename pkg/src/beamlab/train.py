"""End-to-end training of the scan network through the Bayes recursion.

An episode is recorded on one :class:`~beamlab.autodiff.Tape`: the network
picks a beam from the current posterior, the (soft-gain) measurement is
synthesized by reparameterization ``y = mu(beam) + noise``, and the posterior
is updated in the log domain.  The loss on the final posterior is
backpropagated through every slot.
"""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .angular import TWO_PI, AngularGrid, Beam, circ_dist, wrap
from .belief import PriorSpec, bayes_update, make_prior, mean_angles
from .channel import ChannelParams, Measurement, beam_gain, sigma2_for_snr_db, soft_beam_gain
from .config import ConfigError, from_mapping
from .policy import ScanPolicyNet, neural_scan

log = logging.getLogger(__name__)

# added to the squared resultant length inside atan2's derivative
RESULTANT_REG = 1e-24
CHECKPOINT_EVERY = 500


class TrainingDivergence(FloatingPointError):
    def __init__(self, message, dump):
        super().__init__(message)
        self.dump = dump


@dataclass(frozen=True)
class LossSpec:
    kind: str = "cam"
    n: int = 1

    def __post_init__(self):
        if self.kind not in ("mmse", "cam"):
            raise ValueError(f"unknown loss {self.kind!r}")
        if int(self.n) != self.n or self.n < 1:
            raise ValueError("CAM order must be a positive integer")

    @classmethod
    def parse(cls, text: str, n: int = 1) -> "LossSpec":
        text = str(text)
        if text == "mmse":
            return cls("mmse")
        if text == "cam":
            return cls("cam", int(n))
        if text.startswith("cam") and text[3:].isdigit():
            return cls("cam", int(text[3:]))
        raise ValueError(f"unknown loss {text!r}")

    def __str__(self):
        return "mmse" if self.kind == "mmse" else f"cam{self.n}"


@dataclass
class TrainConfig:
    n_bins: int = 360
    slots: int = 4
    epsilon: float = 0.1
    prior: object = "uniform"
    raw_snr_db: object = 0.0
    batch_size: int = 128
    steps: int = 5000
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    tau: float | None = None
    seed: int = 0
    loss: str = "cam"
    cam_order: int = 1
    linear_moments: bool = False
    # per-episode cap on the gradient reaching the network input through the
    # posterior from earlier slots; None trains on the exact gradient
    state_clip: float | None = 1.0

    ALIASES = {"N": "n_bins", "b": "slots"}

    def __post_init__(self):
        for name in ("n_bins", "batch_size"):
            if int(getattr(self, name)) != getattr(self, name) or getattr(self, name) < 1:
                raise ValueError(f"{name}: must be a positive integer")
        for name in ("slots", "steps", "seed"):
            if int(getattr(self, name)) != getattr(self, name) or getattr(self, name) < 0:
                raise ValueError(f"{name}: must be a nonnegative integer")
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError("epsilon: must lie in (0, 1)")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate: must be positive")
        if self.tau is not None and self.tau <= 0:
            raise ValueError("tau: must be positive")
        if self.state_clip is not None and self.state_clip < 0:
            raise ValueError("state_clip: must be nonnegative or null")
        snrs = self.snr_choices
        if not snrs or not all(math.isfinite(s) for s in snrs):
            raise ValueError("raw_snr_db: must be a number or a nonempty list of numbers")
        try:
            PriorSpec.parse(self.prior)
        except ValueError as exc:
            raise ValueError(f"prior: {exc}") from exc
        try:
            self.loss_spec
        except ValueError as exc:
            raise ValueError(f"loss: {exc}") from exc

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        return from_mapping(cls, data, cls.ALIASES)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["prior"] = PriorSpec.parse(self.prior).to_json()
        d["tau"] = self.temperature
        return d

    @property
    def grid(self) -> AngularGrid:
        return AngularGrid(self.n_bins)

    @property
    def temperature(self) -> float:
        return self.tau if self.tau is not None else TWO_PI / self.n_bins

    @property
    def snr_choices(self) -> list[float]:
        v = self.raw_snr_db
        if isinstance(v, (list, tuple)):
            return [float(x) for x in v]
        if isinstance(v, (int, float)) and not isinstance(v, bool):
            return [float(v)]
        raise ValueError("raw_snr_db: must be a number or a list of numbers")

    @property
    def loss_spec(self) -> LossSpec:
        return LossSpec.parse(self.loss, self.cam_order)


@dataclass
class EpisodeTrace:
    psi_true: float
    beams: list[Beam]
    measurements: list[Measurement]
    posteriors: list[np.ndarray]
    loss: float


# -- differentiable pieces --------------------------------------------------

def net_forward(params, x):
    w1, b1, w2, b2, w3, b3 = params
    h = ad.relu(ad.bias_add(ad.matvec(w1, x), b1))
    h = ad.relu(ad.bias_add(ad.matvec(w2, h), b2))
    return ad.logistic(ad.bias_add(ad.matvec(w3, h), b3))


def _wrapped(diff):
    """Signed circular difference in (-pi, pi], differentiable a.e."""
    return ad.atan2(ad.sin(diff), ad.cos(diff))


def _column(v):
    return ad.reshape(v, v.shape + (1,))


def posterior_mean(tape, probs, grid: AngularGrid, linear: bool = False):
    c = grid.centers
    if linear:
        return ad.weighted_sum(probs, c)
    s = ad.weighted_sum(probs, np.sin(c))
    co = ad.weighted_sum(probs, np.cos(c))
    return ad.atan2(s, co, eps=RESULTANT_REG)


def loss_mmse(tape, probs, psi_true, grid: AngularGrid, linear: bool = False):
    """Per-episode squared error between the true AoA and the posterior mean."""
    m = posterior_mean(tape, probs, grid, linear)
    psi = np.asarray(wrap(psi_true), dtype=float)
    diff = ad.sub(psi, m, tape=tape)
    d = diff if linear else _wrapped(diff)
    return ad.square(d)


def loss_cam(tape, probs, n: int, grid: AngularGrid, linear: bool = False):
    """Per-episode n-th central absolute moment of the posterior."""
    m = posterior_mean(tape, probs, grid, linear)
    diff = ad.sub(grid.centers, _column(m), tape=tape)
    d = diff if linear else _wrapped(diff)
    return ad.weighted_sum(probs, ad.abs_pow(d, n))


def episode_graph(tape, params, prior, bins, psi, noise, sigma2, grid: AngularGrid,
                  slots: int, tau: float, loss: LossSpec, h: float = 1.0, p: float = 1.0,
                  linear: bool = False, state_clip: float | None = None):
    """Record a batch of ``len(bins)`` soft-gain episodes on ``tape``.

    ``bins`` index each episode's true-AoA bin (the measurement is taken at the
    bin center), ``psi`` are the true angles used by the MMSE loss, ``noise``
    has shape (B, slots, 2) in unit-variance draws, ``sigma2`` is per episode.
    Returns ``(per_episode_loss, posteriors, beams)``.
    """
    bins = np.asarray(bins)
    batch = bins.size
    s2 = np.asarray(sigma2, dtype=float).reshape(batch)
    scale = np.sqrt(0.5 * s2)
    rows = np.arange(batch)
    centers = grid.centers
    with np.errstate(divide="ignore"):
        logp = tape.const(np.broadcast_to(np.log(prior), (batch, grid.n_bins)).copy())
    probs = tape.const(np.broadcast_to(prior, (batch, grid.n_bins)).copy())
    posteriors, beams = [probs], []
    amp0 = h * math.sqrt(p)
    for i in range(slots):
        x = probs if state_clip is None or i == 0 else ad.clip_grad_rows(probs, state_clip / batch)
        o = net_forward(params, x)
        start = ad.mul(o[:, 0], TWO_PI)
        length = ad.maximum(ad.mul(o[:, 1], TWO_PI), grid.width)
        beams.append((start, length))
        center = ad.add(start, ad.mul(length, 0.5))
        dist = ad.abs_pow(_wrapped(ad.sub(centers, _column(center), tape=tape)), 1)
        z = ad.scalar_div(ad.sub(_column(ad.mul(length, 0.5)), dist), tau)
        log_gain = ad.add(ad.sub(math.log(TWO_PI), _column(ad.log(length)), tape=tape),
                          ad.log_logistic(z))
        amp = ad.mul(ad.exp(ad.mul(log_gain, 0.5)), amp0)
        y_re = ad.add(amp[rows, bins], noise[:, i, 0] * scale)
        y_im2 = (noise[:, i, 1] * scale) ** 2
        resid = ad.square(ad.sub(_column(y_re), amp))
        ll = ad.neg(ad.div(ad.add(resid, y_im2[:, None]), s2[:, None]))
        logp = ad.add(logp, ll)
        logp = ad.sub(logp, _column(ad.log_sum_exp(logp)))
        probs = ad.exp(logp)
        posteriors.append(probs)
    if loss.kind == "mmse":
        per_episode = loss_mmse(tape, probs, psi, grid, linear)
    else:
        per_episode = loss_cam(tape, probs, loss.n, grid, linear)
    return per_episode, posteriors, beams


def batch_objective(params_np, prior, bins, psi, noise, sigma2, grid, slots, tau, loss,
                    linear=False, backward=True, state_clip=None):
    """Mean episode loss and (optionally) its gradient for each parameter array."""
    tape = ad.Tape()
    params = [tape.leaf(w) for w in params_np]
    per_episode, _, _ = episode_graph(tape, params, prior, bins, psi, noise, sigma2, grid,
                                      slots, tau, loss, linear=linear, state_clip=state_clip)
    total = ad.mean(per_episode)
    if not backward:
        return float(total.data), None, per_episode.data
    tape.backward(total)
    return float(total.data), [w.grad for w in params], per_episode.data


def sample_batch(rng: np.random.Generator, prior: np.ndarray, grid: AngularGrid, batch: int,
                 slots: int, snr_choices):
    """Draw true AoAs from the prior, per-episode noise variances and noise draws."""
    bins = rng.choice(grid.n_bins, size=batch, p=prior)
    psi = (bins + rng.random(batch)) * grid.width
    snr = rng.choice(np.asarray(snr_choices, dtype=float), size=batch)
    noise = rng.standard_normal((batch, slots, 2))
    return bins, psi, noise, sigma2_for_snr_db(snr)


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


@dataclass
class TrainResult:
    net: ScanPolicyNet
    log: list[tuple[int, float, float, float]] = field(default_factory=list)


LOG_HEADER = ["step", "loss", "grad_norm", "wall_ms"]


def train(cfg: TrainConfig, out_dir=None, checkpoint_every: int = CHECKPOINT_EVERY) -> TrainResult:
    """Adam on the mean batch loss; writes checkpoint.bin and train_log.csv into ``out_dir``."""
    grid = cfg.grid
    prior = make_prior(PriorSpec.parse(cfg.prior), grid)
    loss = cfg.loss_spec
    tau = cfg.temperature
    net = ScanPolicyNet.init(cfg.n_bins, cfg.seed)
    opt = Adam(net.params, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    result = TrainResult(net)
    out = Path(out_dir) if out_dir is not None else None
    writer = fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        fh = open(out / "train_log.csv", "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(LOG_HEADER)
    try:
        for step in range(1, cfg.steps + 1):
            t0 = time.perf_counter()
            rng = np.random.default_rng([cfg.seed, step])
            bins, psi, noise, s2 = sample_batch(rng, prior, grid, cfg.batch_size, cfg.slots,
                                                cfg.snr_choices)
            value, grads, per_episode = batch_objective(net.params, prior, bins, psi, noise, s2,
                                                        grid, cfg.slots, tau, loss,
                                                        cfg.linear_moments, state_clip=cfg.state_clip)
            gnorm = math.sqrt(math.fsum(float(np.sum(g * g)) for g in grads))
            if not (math.isfinite(value) and math.isfinite(gnorm)):
                bad = int(np.flatnonzero(~np.isfinite(per_episode))[0]) if not np.all(
                    np.isfinite(per_episode)) else 0
                dump = {"step": step, "loss": value, "grad_norm": gnorm, "episode": bad,
                        "psi_true": float(psi[bad]), "bin": int(bins[bad]),
                        "sigma2": float(s2[bad]), "noise": noise[bad].tolist(),
                        "episode_loss": float(per_episode[bad])}
                raise TrainingDivergence(f"non-finite loss/gradient at step {step}", dump)
            opt.step(net.params, grads)
            wall = 1000.0 * (time.perf_counter() - t0)
            result.log.append((step, value, gnorm, wall))
            if writer is not None:
                writer.writerow([step, repr(value), repr(gnorm), f"{wall:.3f}"])
            if out is not None and checkpoint_every and step % checkpoint_every == 0:
                net.save(out / "checkpoint.bin")
                fh.flush()
            if step % 100 == 0:
                log.info("step %d loss %.6g grad_norm %.4g", step, value, gnorm)
    finally:
        if fh is not None:
            fh.close()
    if out is not None:
        net.save(out / "checkpoint.bin")
    return result


# -- single episodes -----------------------------------------------------------

def _numpy_loss(post, psi_true, grid, loss: LossSpec, linear):
    # Same expression as the tape losses, so a vanishing resultant (e.g. the
    # uniform prior at b=0) yields the atan2 fallback instead of raising.
    m, _ = mean_angles(post, grid, linear)
    if loss.kind == "mmse":
        d = abs(wrap(psi_true) - m) if linear else circ_dist(psi_true, m)
        return float(d) ** 2
    d = np.abs(grid.centers - m) if linear else circ_dist(grid.centers, m)
    return float(np.sum(post * d ** loss.n))


def run_episode(net: ScanPolicyNet, psi_true: float, ch: ChannelParams, slots: int,
                grid: AngularGrid, mode: str = "eval", rng: np.random.Generator | None = None,
                prior: np.ndarray | None = None, loss: LossSpec = LossSpec(),
                tau: float | None = None, linear: bool = False) -> EpisodeTrace:
    """One beam-alignment episode for a single true AoA.

    ``eval`` uses hard gains and plain numpy; ``train`` records the soft-gain
    recursion on a tape (the trace then reports the soft-model quantities).
    The true AoA is measured at the center of its bin in both modes.
    """
    if mode not in ("eval", "train"):
        raise ValueError(f"mode must be 'eval' or 'train', got {mode!r}")
    if rng is None:
        rng = np.random.default_rng(0)
    if prior is None:
        prior = np.full(grid.n_bins, 1.0 / grid.n_bins)
    k = grid.bin_of(psi_true)
    psi_meas = grid.center(k)
    if mode == "eval":
        post = np.asarray(prior, dtype=float)
        beams, ys, posts = [], [], [post]
        for _ in range(slots):
            beam = neural_scan(net, post)
            mu = ch.h * math.sqrt(ch.p * beam_gain(beam, psi_meas))
            n = rng.standard_normal(2) * math.sqrt(0.5 * ch.sigma2)
            y = Measurement(mu + float(n[0]), float(n[1]))
            post = bayes_update(post, beam, y, ch, grid)
            beams.append(beam)
            ys.append(y)
            posts.append(post)
        return EpisodeTrace(wrap(psi_true), beams, ys, posts,
                            _numpy_loss(post, psi_true, grid, loss, linear))

    tau = tau if tau is not None else grid.width
    noise = rng.standard_normal((1, slots, 2)) if slots else np.zeros((1, 0, 2))
    tape = ad.Tape()
    params = [tape.leaf(w) for w in net.params]
    per_episode, posts, beam_vals = episode_graph(
        tape, params, prior, np.array([k]), np.array([psi_true]), noise, ch.sigma2, grid,
        slots, tau, loss, h=ch.h, p=ch.p, linear=linear)
    scale = math.sqrt(0.5 * ch.sigma2)
    beams, ys = [], []
    for i, (start, length) in enumerate(beam_vals):
        beam = Beam(float(start.data[0]), float(length.data[0]))
        g = soft_beam_gain(beam, psi_meas, tau)
        ys.append(Measurement(ch.h * math.sqrt(ch.p * g) + noise[0, i, 0] * scale,
                              noise[0, i, 1] * scale))
        beams.append(beam)
    return EpisodeTrace(wrap(psi_true), beams, ys, [v.data[0].copy() for v in posts],
                        float(per_episode.data[0]))


# -- gradient check -------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_index: int
    worst_param: str
    n_coords: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tolerance


PARAM_NAMES = ["W1", "b1", "W2", "b2", "W3", "b3"]


def rel_err(a, f, floor: float = 1e-7):
    return np.abs(a - f) / np.maximum(np.maximum(np.abs(a), np.abs(f)), floor)


def gradcheck(seed: int, n_bins: int = 8, slots: int = 2, loss: LossSpec = LossSpec(),
              n_coords: int = 64, episodes: int = 4, step: float = 1e-5,
              raw_snr_db: float = 0.0, tolerance: float = 1e-5) -> GradCheckReport:
    """Compare tape gradients of the episode loss with central finite differences.

    A random network (Glorot weights, small random biases) and fixed episode
    draws are used; only parameters are perturbed.
    """
    rng = np.random.default_rng([seed, 7919])
    grid = AngularGrid(n_bins)
    net = ScanPolicyNet.init(n_bins, seed)
    for i in (1, 3, 5):
        net.params[i] = rng.uniform(-0.1, 0.1, net.params[i].shape)
    prior = np.full(n_bins, 1.0 / n_bins)
    bins, psi, noise, s2 = sample_batch(rng, prior, grid, episodes, slots, [raw_snr_db])
    tau = grid.width
    args = (prior, bins, psi, noise, s2, grid, slots, tau, loss)
    _, grads, _ = batch_objective(net.params, *args)
    flat_sizes = [p.size for p in net.params]
    offsets = np.cumsum([0] + flat_sizes)
    coords = rng.choice(offsets[-1], size=min(n_coords, offsets[-1]), replace=False)
    worst, worst_idx = -1.0, -1
    for c in coords:
        li = int(np.searchsorted(offsets, c, side="right") - 1)
        j = int(c - offsets[li])
        params = [p.copy() for p in net.params]
        flat = params[li].reshape(-1)
        base = flat[j]
        flat[j] = base + step
        fp, _, _ = batch_objective(params, *args, backward=False)
        flat[j] = base - step
        fm, _, _ = batch_objective(params, *args, backward=False)
        fd = (fp - fm) / (2.0 * step)
        err = float(rel_err(grads[li].reshape(-1)[j], fd))
        if err > worst:
            worst, worst_idx = err, int(c)
    li = int(np.searchsorted(offsets, worst_idx, side="right") - 1)
    name = f"{PARAM_NAMES[li]}[{worst_idx - offsets[li]}]"
    return GradCheckReport(worst, worst_idx, name, len(coords), tolerance)
