import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from beamlab.angular import TWO_PI, AngularGrid, Beam, bin_membership
from beamlab.belief import noiseless_update
from beamlab.policy import (BisectionPolicy, CheckpointError, HPMPolicy, PolicyKind, ScanPolicyNet,
                            bisection_arc, bisection_scan, dyadic_codebook, fnv1a64, hpm_scan,
                            neural_scan, support_arc)

PI = math.pi


# -- network ----------------------------------------------------------------------

@pytest.mark.parametrize("n", [4, 90, 360])
def test_parameter_count(n):
    assert ScanPolicyNet.init(n).n_params == 12 * n * n + 10 * n + 2


def test_zero_network_gives_half_circle():
    beam = neural_scan(ScanPolicyNet.zeros(16), np.full(16, 1 / 16))
    assert beam.start == pytest.approx(PI)
    assert beam.length == pytest.approx(PI)


def test_length_floor():
    net = ScanPolicyNet.zeros(16)
    net.params[5][1] = -50.0  # drive o2 towards zero
    beam = neural_scan(net, np.full(16, 1 / 16))
    assert beam.length == pytest.approx(TWO_PI / 16)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_outputs_in_range(seed):
    rng = np.random.default_rng(seed)
    net = ScanPolicyNet.init(12, seed % 1000)
    for p in net.params:
        p *= rng.uniform(0.5, 20.0)
    o = net.outputs(rng.dirichlet(np.ones(12), size=5))
    assert np.all((o >= 0) & (o <= 1))
    starts, lengths = net.scan_batch(rng.dirichlet(np.ones(12), size=5))
    assert np.all(lengths >= TWO_PI / 12) and np.all((starts > 0) & (starts <= TWO_PI))


def test_golden_beam():
    # frozen once from this implementation; guards against silent numeric drift
    net = ScanPolicyNet.init(8, 3)
    beam = neural_scan(net, np.arange(1, 9) / 36.0)
    assert beam.start == pytest.approx(3.181250029342205, abs=1e-13)
    assert beam.length == pytest.approx(3.1723492019384314, abs=1e-13)


def test_wrong_posterior_size():
    with pytest.raises(ValueError):
        ScanPolicyNet.init(8).outputs(np.ones(9) / 9)


# -- checkpoints ---------------------------------------------------------------------

def test_fnv_reference_vectors():
    assert fnv1a64(b"") == 0xCBF29CE484222325
    assert fnv1a64(b"a") == 0xAF63DC4C8601EC8C
    assert fnv1a64(b"foobar") == 0x85944171F73967E8


def test_checkpoint_round_trip(tmp_path):
    net = ScanPolicyNet.init(6, 42)
    path = tmp_path / "net.bin"
    net.save(path)
    back = ScanPolicyNet.load(path)
    assert back.n_bins == 6 and back.seed == 42
    for a, b in zip(net.params, back.params):
        assert a.tobytes() == b.tobytes()
    assert back.to_bytes() == path.read_bytes()
    assert path.read_bytes().startswith(b"SCANNET v1 N=6 seed=42\nDIMS 6 24 12 2\n")


def test_checkpoint_corruption_detected():
    blob = bytearray(ScanPolicyNet.init(6, 1).to_bytes())
    flipped = bytearray(blob)
    flipped[60] ^= 0x01
    with pytest.raises(CheckpointError):
        ScanPolicyNet.from_bytes(bytes(flipped))
    with pytest.raises(CheckpointError):
        ScanPolicyNet.from_bytes(bytes(blob[:-3]))
    with pytest.raises(CheckpointError):
        ScanPolicyNet.from_bytes(b"NOTANET v1 N=6 seed=1\n" + bytes(blob))
    with pytest.raises(CheckpointError):
        ScanPolicyNet.from_bytes(bytes(blob).replace(b"DIMS 6 24 12 2", b"DIMS 6 24 13 2"))


# -- bisection --------------------------------------------------------------------------

def test_bisection_uniform_half_circle():
    assert bisection_arc(np.full(360, 1 / 360)) == (0, 180)
    beam = bisection_scan(np.full(360, 1 / 360), AngularGrid(360))
    assert beam.length == pytest.approx(PI)


def test_bisection_sub_arc():
    g = AngularGrid(360)
    p = np.zeros(360)
    p[:90] = 1 / 90
    beam = bisection_scan(p, g)
    assert beam.length == pytest.approx(PI / 4)
    np.testing.assert_array_equal(np.flatnonzero(bin_membership(g, beam)), np.arange(45))


def test_bisection_exact_half_mass():
    assert bisection_arc(np.array([0.1, 0.4, 0.4, 0.1])) == (0, 2)


def test_support_arc_wraps():
    p = np.zeros(10)
    p[[8, 9, 0, 1]] = 0.25
    assert support_arc(p) == (8, 4)


@pytest.mark.parametrize("b", [1, 2, 3])
def test_noiseless_bisection_trajectory(b):
    g = AngularGrid(360)
    rng = np.random.default_rng(b)
    post = np.full(360, 1 / 360)
    psi_bin = int(rng.integers(360))
    for _ in range(b):
        beam = bisection_scan(post, g)
        post = noiseless_update(post, beam, bool(bin_membership(g, beam)[psi_bin]), g)
    support = np.flatnonzero(post)
    assert support.size == 360 // 2 ** b
    assert psi_bin in support


# -- HPM -------------------------------------------------------------------------------

def test_dyadic_codebook_shape():
    starts, lengths, member = dyadic_codebook(AngularGrid(16), 3)
    assert len(starts) == 2 + 4 + 8
    assert member.shape == (14, 16)
    np.testing.assert_allclose(member.sum(axis=1) * TWO_PI / 16, lengths)


def test_hpm_uniform_prior():
    beam = hpm_scan(np.full(360, 1 / 360), AngularGrid(360))
    assert beam.length == pytest.approx(PI)
    assert beam.start == pytest.approx(TWO_PI)


def test_hpm_picks_child_of_concentrated_arc():
    g = AngularGrid(16)
    p = np.zeros(16)
    p[4:6] = 0.5  # the depth-3 arc (pi/2, 3pi/4]
    beam = hpm_scan(p, g)
    assert beam.start == pytest.approx(PI / 2)
    assert beam.length == pytest.approx(PI / 8)


def test_hpm_tie_break():
    beam = hpm_scan(np.array([1.0, 0, 0, 0]), AngularGrid(4), max_depth=2)
    assert beam.length == pytest.approx(PI / 2)
    assert beam.start == pytest.approx(TWO_PI)


def test_hpm_skips_sub_bin_depths():
    _, lengths, _ = dyadic_codebook(AngularGrid(90), 9)
    assert lengths.min() == pytest.approx(TWO_PI / 64)


@pytest.mark.parametrize("b", [1, 2, 3, 4])
def test_hpm_noiseless_dyadic_support(b):
    g = AngularGrid(360)
    post = np.full(360, 1 / 360)
    psi_bin = 200
    for _ in range(b):
        beam = hpm_scan(post, g)
        post = noiseless_update(post, beam, bool(bin_membership(g, beam)[psi_bin]), g)
    s, k = support_arc(post)
    assert k * g.width == pytest.approx(TWO_PI / 2 ** b, abs=g.width)


def test_batched_policies_match_single():
    g = AngularGrid(32)
    probs = np.random.default_rng(0).dirichlet(np.full(32, 0.4), size=6)
    for pol, single in ((BisectionPolicy(g), bisection_scan), (HPMPolicy(g), hpm_scan)):
        starts, lengths = pol.scan_batch(probs)
        for row, s, l in zip(probs, starts, lengths):
            beam = single(row, g)
            assert (beam.start, beam.length) == pytest.approx((s, l))


# -- selectors -----------------------------------------------------------------------------

def test_policy_kind_parse(tmp_path):
    assert str(PolicyKind.parse("bisection")) == "bisection"
    assert PolicyKind.parse("hpm:6").max_depth == 6
    path = tmp_path / "n.bin"
    ScanPolicyNet.init(16).save(path)
    assert PolicyKind.parse(f"neural:{path}").build(AngularGrid(16)).scan_batch(np.full((1, 16), 1 / 16))
    with pytest.raises(CheckpointError):
        PolicyKind.parse(f"neural:{path}").build(AngularGrid(8))
    for bad in ("random", "neural", "hpm:0", "bisection:3"):
        with pytest.raises(ValueError):
            PolicyKind.parse(bad)


def test_neural_scan_is_pure():
    net = ScanPolicyNet.init(16, 9)
    post = np.random.default_rng(1).dirichlet(np.ones(16))
    assert neural_scan(net, post) == neural_scan(net, post.copy())
    assert isinstance(neural_scan(net, post), Beam)
