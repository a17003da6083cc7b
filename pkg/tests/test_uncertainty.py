import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from fscd.model import ModelConfig, build_model
from fscd.rng import RngStream
from fscd.uncertainty import McConfig, binary_entropy, decompose, mc_sample, mc_uncertainty


def h_ref(p):
    # scalar closed form, written independently of the vectorised version
    if p in (0.0, 1.0):
        return 0.0
    return -p * math.log2(p) - (1 - p) * math.log2(1 - p)


def test_entropy_anchor_values():
    assert binary_entropy(0.5) == 1.0
    assert binary_entropy(0.0) == binary_entropy(1.0) == 0.0
    assert binary_entropy(0.25) == pytest.approx(0.811278, abs=1e-6)
    assert isinstance(binary_entropy(0.3), float)


@given(st.floats(0, 1))
def test_entropy_matches_scalar_reference(p):
    assert binary_entropy(p) == pytest.approx(h_ref(p), abs=1e-12)


@pytest.mark.parametrize("bad", [-0.1, 1.1, float("nan")])
def test_entropy_rejects_out_of_range(bad):
    with pytest.raises(ValueError):
        binary_entropy(bad)


def test_decompose_closed_form_cases():
    u = decompose([np.array([0.5]), np.array([0.5])])
    assert (u.total[0], u.aleatoric[0], u.epistemic[0]) == (1.0, 1.0, 0.0)
    u = decompose([np.array([0.0]), np.array([1.0])])
    assert (u.mean_prob[0], u.total[0], u.aleatoric[0], u.epistemic[0]) == (0.5, 1.0, 0.0, 1.0)
    u = decompose([np.array([0.2]), np.array([0.8])])
    assert u.total[0] == pytest.approx(1.0, abs=1e-15)
    assert u.aleatoric[0] == pytest.approx(h_ref(0.2), abs=1e-12)
    assert u.aleatoric[0] == pytest.approx(0.721928, abs=1e-6)
    assert u.epistemic[0] == pytest.approx(0.278072, abs=1e-6)


def test_decompose_rejects_shape_mismatch_and_empty():
    with pytest.raises(ValueError):
        decompose([np.zeros(3), np.zeros(4)])
    with pytest.raises(ValueError):
        decompose([])


stacks = st.integers(1, 6).flatmap(
    lambda t: hnp.arrays(np.float64, (t, 3, 3), elements=st.floats(0, 1)))


@given(stacks)
def test_decomposition_identities(stack):
    u = decompose(list(stack))
    assert np.all(np.abs(u.total - (u.aleatoric + u.epistemic)) <= 1e-12)
    assert np.all(u.epistemic >= 0)
    assert np.all(u.total >= u.aleatoric)
    for m in (u.mean_prob, u.total, u.aleatoric, u.epistemic):
        assert np.all((m >= 0) & (m <= 1))


@given(stacks, st.randoms())
def test_decomposition_permutation_invariant(stack, rnd):
    order = list(range(len(stack)))
    rnd.shuffle(order)
    a, b = decompose(list(stack)), decompose([stack[i] for i in order])
    for k in ("mean_prob", "total", "aleatoric", "epistemic"):
        assert getattr(a, k).tobytes() == getattr(b, k).tobytes()


@given(hnp.arrays(np.float64, (4, 4), elements=st.floats(0, 1)), st.integers(1, 20))
def test_identical_samples_have_zero_epistemic(p, t):
    u = decompose([p] * t)
    assert not u.epistemic.any()
    assert u.total.tobytes() == u.aleatoric.tobytes()


@pytest.fixture
def small_model():
    return build_model(ModelConfig(encoder_channels=[4, 8], tile_size=16), RngStream(0))


def test_mc_sample_deterministic_and_ordered(small_model):
    x1, x2 = np.random.default_rng(0).random((2, 1, 3, 16, 16))
    serial = mc_sample(small_model, x1, x2, McConfig(6, base_seed=3, workers=1))
    threaded = mc_sample(small_model, x1, x2, McConfig(6, base_seed=3, workers=4))
    assert [s.tobytes() for s in serial] == [s.tobytes() for s in threaded]
    assert len({s.tobytes() for s in serial}) == 6


def test_mc_zero_dropout_gives_identical_samples(small_model):
    model = build_model(ModelConfig(encoder_channels=[4, 8], unit_dropout_rate=0.0), RngStream(0))
    x1, x2 = np.random.default_rng(0).random((2, 1, 3, 16, 16))
    samples = mc_sample(model, x1, x2, McConfig(5))
    assert len({s.tobytes() for s in samples}) == 1
    assert not mc_uncertainty(model, x1, x2, McConfig(5)).epistemic.any()


def test_single_sample_zero_epistemic(small_model):
    x1, x2 = np.random.default_rng(0).random((2, 1, 3, 16, 16))
    assert not mc_uncertainty(small_model, x1, x2, McConfig(1)).epistemic.any()


def test_mc_config_rejects_zero_samples():
    with pytest.raises(ValueError):
        McConfig(0)
