"""Scan policies: the dense neural scanner and the bisection / HPM baselines.

Every policy exposes ``scan_batch(probs) -> (starts, lengths)`` over a stack
of posteriors so the evaluator can run many trials at once.
"""
from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .angular import BOUNDARY_TOL, TWO_PI, AngularGrid, Beam, arc_contains, wrap

CHECKPOINT_MAGIC = "SCANNET v1"
FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF
TIE_TOL = 1e-12


class CheckpointError(ValueError):
    pass


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * FNV_PRIME) & _MASK64
    return h


def _sigmoid(z):
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def layer_shapes(n: int) -> list[tuple[int, ...]]:
    return [(4 * n, n), (4 * n,), (2 * n, 4 * n), (2 * n,), (2, 2 * n), (2,)]


@dataclass
class ScanPolicyNet:
    """Dense N -> 4N (ReLU) -> 2N (ReLU) -> 2 (sigmoid), shared by every slot.

    ``params`` is ``[W1, b1, W2, b2, W3, b3]`` with weights stored as
    (fan_out, fan_in).
    """

    n_bins: int
    params: list[np.ndarray]
    seed: int = 0

    @classmethod
    def init(cls, n_bins: int, seed: int = 0) -> "ScanPolicyNet":
        """Glorot-uniform weights, zero biases."""
        rng = np.random.default_rng(seed)
        params = []
        for shape in layer_shapes(n_bins):
            if len(shape) == 2:
                bound = math.sqrt(6.0 / (shape[0] + shape[1]))
                params.append(rng.uniform(-bound, bound, size=shape))
            else:
                params.append(np.zeros(shape))
        return cls(n_bins, params, seed)

    @classmethod
    def zeros(cls, n_bins: int) -> "ScanPolicyNet":
        return cls(n_bins, [np.zeros(s) for s in layer_shapes(n_bins)])

    @property
    def n_params(self) -> int:
        return int(sum(p.size for p in self.params))

    def copy(self) -> "ScanPolicyNet":
        return ScanPolicyNet(self.n_bins, [p.copy() for p in self.params], self.seed)

    def outputs(self, probs) -> np.ndarray:
        """Sigmoid outputs (o1, o2) for one posterior or a stack of them."""
        w1, b1, w2, b2, w3, b3 = self.params
        x = np.asarray(probs, dtype=float)
        if x.shape[-1] != self.n_bins:
            raise ValueError(f"network built for N={self.n_bins}, posterior has {x.shape[-1]} bins")
        h = np.maximum(x @ w1.T + b1, 0.0)
        h = np.maximum(h @ w2.T + b2, 0.0)
        return _sigmoid(h @ w3.T + b3)

    def scan_batch(self, probs):
        o = self.outputs(probs)
        starts = wrap(TWO_PI * o[..., 0])
        lengths = np.clip(TWO_PI * o[..., 1], TWO_PI / self.n_bins, TWO_PI)
        return starts, lengths

    # -- checkpoint I/O ---------------------------------------------------

    def to_bytes(self) -> bytes:
        n = self.n_bins
        header = f"{CHECKPOINT_MAGIC} N={n} seed={self.seed}\nDIMS {n} {4 * n} {2 * n} 2\n"
        payload = b"".join(np.ascontiguousarray(p, dtype="<f8").tobytes() for p in self.params)
        return header.encode("ascii") + payload + struct.pack("<Q", fnv1a64(payload))

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ScanPolicyNet":
        buf = io.BytesIO(blob)
        head = buf.readline().decode("ascii", "replace").split()
        dims = buf.readline().decode("ascii", "replace").split()
        try:
            if " ".join(head[:2]) != CHECKPOINT_MAGIC:
                raise CheckpointError(f"not a scan-net checkpoint: {head!r}")
            fields = dict(tok.split("=", 1) for tok in head[2:])
            n, seed = int(fields["N"]), int(fields["seed"])
        except (KeyError, ValueError) as exc:
            raise CheckpointError(f"malformed checkpoint header {head!r}") from exc
        if dims != ["DIMS", str(n), str(4 * n), str(2 * n), "2"]:
            raise CheckpointError(f"layer dimensions {dims!r} do not match N={n}")
        rest = buf.read()
        shapes = layer_shapes(n)
        size = 8 * sum(math.prod(s) for s in shapes)
        if len(rest) != size + 8:
            raise CheckpointError(f"expected {size + 8} payload bytes, found {len(rest)}")
        payload, (digest,) = rest[:size], struct.unpack("<Q", rest[size:])
        if fnv1a64(payload) != digest:
            raise CheckpointError("checkpoint digest mismatch")
        flat = np.frombuffer(payload, dtype="<f8").astype(float)
        params, off = [], 0
        for s in shapes:
            k = math.prod(s)
            params.append(flat[off:off + k].reshape(s).copy())
            off += k
        return cls(n, params, seed)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "ScanPolicyNet":
        return cls.from_bytes(Path(path).read_bytes())


def neural_scan(net: ScanPolicyNet, post) -> Beam:
    starts, lengths = net.scan_batch(np.asarray(post, dtype=float)[None, :])
    return Beam(float(starts[0]), float(lengths[0]))


# -- bisection ------------------------------------------------------------

def support_arc(post) -> tuple[int, int]:
    """Minimal circular arc ``(start_bin, n_bins)`` covering the posterior support.

    It is the complement of the longest run of zero-mass bins; equal runs are
    resolved toward the smaller start bin.
    """
    p = np.asarray(post)
    n = p.size
    pos = np.flatnonzero(p > 0)
    if pos.size == n:
        return 0, n
    # zero run preceding each support bin = gap back to the previous support bin
    runs = (pos - np.roll(pos, 1) - 1) % n
    if pos.size == 1:
        runs[:] = n - 1
    i = int(np.argmax(runs))  # first maximum, so smallest start bin
    return int(pos[i]), n - int(runs[i])


def bisection_arc(post) -> tuple[int, int]:
    start, span = support_arc(post)
    p = np.asarray(post, dtype=float)
    cum = np.cumsum(p[(start + np.arange(span)) % p.size])
    score = np.abs(cum - 0.5)
    k = int(np.flatnonzero(score <= score.min() + TIE_TOL)[0]) + 1
    return start, k


def bisection_scan(post, grid: AngularGrid) -> Beam:
    """Posterior-median split of the support arc, starting at its first bin."""
    s, k = bisection_arc(post)
    return grid.arc(s, k)


class BisectionPolicy:
    name = "bisection"

    def __init__(self, grid: AngularGrid):
        self.grid = grid

    def scan_batch(self, probs):
        probs = np.atleast_2d(probs)
        arcs = np.array([bisection_arc(row) for row in probs])
        return wrap(arcs[:, 0] * self.grid.width), arcs[:, 1] * self.grid.width


# -- hierarchical posterior matching -------------------------------------

def dyadic_codebook(grid: AngularGrid, max_depth: int = 9):
    """Dyadic arcs ordered by (length, start), skipping arcs narrower than a bin."""
    if max_depth < 1:
        raise ValueError("max_depth must be >= 1")
    starts, lengths = [], []
    for d in range(max_depth, 0, -1):
        length = TWO_PI / 2 ** d
        if length < grid.width - BOUNDARY_TOL:
            continue
        for j in range(2 ** d):
            starts.append(j * length)
            lengths.append(length)
    starts = wrap(np.array(starts))
    lengths = np.array(lengths)
    member = arc_contains(starts[:, None], lengths[:, None], grid.centers[None, :]).astype(float)
    return starts, lengths, member


def _hpm_pick(masses):
    score = np.abs(masses - 0.5)
    best = score.min(axis=-1, keepdims=True)
    return np.argmax(score <= best + TIE_TOL, axis=-1)


def hpm_scan(post, grid: AngularGrid, max_depth: int = 9) -> Beam:
    """Codebook beam whose posterior mass is closest to one half."""
    starts, lengths, member = dyadic_codebook(grid, max_depth)
    i = int(_hpm_pick(member @ np.asarray(post, dtype=float)))
    return Beam(float(starts[i]), float(lengths[i]))


class HPMPolicy:
    def __init__(self, grid: AngularGrid, max_depth: int = 9):
        self.grid = grid
        self.max_depth = max_depth
        self.name = f"hpm:{max_depth}" if max_depth != 9 else "hpm"
        self._starts, self._lengths, self._member = dyadic_codebook(grid, max_depth)

    def scan_batch(self, probs):
        idx = _hpm_pick(np.atleast_2d(probs) @ self._member.T)
        return self._starts[idx], self._lengths[idx]


class NeuralPolicy:
    def __init__(self, net: ScanPolicyNet, name: str = "neural"):
        self.net = net
        self.name = name

    def scan_batch(self, probs):
        return self.net.scan_batch(np.atleast_2d(probs))


@dataclass(frozen=True)
class PolicyKind:
    """Parsed policy selector: ``bisection``, ``hpm[:depth]`` or ``neural:<checkpoint>``."""

    kind: str
    checkpoint: str | None = None
    max_depth: int = 9

    @classmethod
    def parse(cls, text: str) -> "PolicyKind":
        name, _, arg = str(text).partition(":")
        if name == "bisection" and not arg:
            return cls("bisection")
        if name == "hpm":
            depth = int(arg) if arg else 9
            if depth < 1:
                raise ValueError("hpm depth must be >= 1")
            return cls("hpm", max_depth=depth)
        if name == "neural" and arg:
            return cls("neural", checkpoint=arg)
        raise ValueError(f"unknown policy {text!r} (expected bisection, hpm[:depth], neural:<checkpoint>)")

    def __str__(self):
        if self.kind == "neural":
            return f"neural:{self.checkpoint}"
        if self.kind == "hpm" and self.max_depth != 9:
            return f"hpm:{self.max_depth}"
        return self.kind

    def build(self, grid: AngularGrid):
        if self.kind == "bisection":
            return BisectionPolicy(grid)
        if self.kind == "hpm":
            return HPMPolicy(grid, self.max_depth)
        net = ScanPolicyNet.load(self.checkpoint)
        if net.n_bins != grid.n_bins:
            raise CheckpointError(f"checkpoint is for N={net.n_bins}, evaluation grid has N={grid.n_bins}")
        return NeuralPolicy(net)
