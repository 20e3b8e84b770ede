import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import ndimage

from facepaste.exceptions import InvalidParameterError
from facepaste.similarity import DEFAULT_SSIM, SsimConfig, SsimScorer, ssim

from ssim_reference import ssim_reference


def _pair(seed, shape=(32, 32, 1)):
    rng = np.random.default_rng(seed)
    a = rng.random(shape)
    b = np.clip(a + 0.2 * rng.standard_normal(shape), 0, 1)
    return a, b


@pytest.mark.parametrize("seed", range(4))
def test_matches_reference(seed):
    a, b = _pair(seed, (24, 30, 3) if seed % 2 else (30, 24, 1))
    assert ssim(a, b) == pytest.approx(ssim_reference(a, b), abs=1e-9)


def test_identity_is_exactly_one():
    a = np.random.default_rng(0).random((20, 20, 3))
    assert ssim(a, a) == 1.0


def test_constant_closed_form():
    a = np.full((16, 16), 0.5)
    b = np.full((16, 16), 0.6)
    c1 = DEFAULT_SSIM.c1
    expected = (2 * 0.5 * 0.6 + c1) / (0.25 + 0.36 + c1)
    assert ssim(a, b) == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(0.983609, abs=1e-6)


def test_negative_raw_score_clamps_to_zero():
    x = np.indices((20, 20)).sum(axis=0) % 2.0
    assert ssim(x, 1.0 - x) == 0.0


def test_shape_checks():
    with pytest.raises(InvalidParameterError):
        ssim(np.zeros((12, 12)), np.zeros((12, 13)))
    with pytest.raises(InvalidParameterError):
        ssim(np.zeros((8, 8)), np.zeros((8, 8)))
    with pytest.raises(InvalidParameterError):
        SsimConfig(window_size=10)


def test_scorer_matches_full_computation(rng):
    ref = rng.random((48, 40, 3))
    scorer = SsimScorer(ref)
    assert scorer(ref) == 1.0
    for _ in range(5):
        img = ref.copy()
        r, c = rng.integers(0, 40), rng.integers(0, 32)
        img[r : r + 8, c : c + 8] = rng.random((min(8, 48 - r), min(8, 40 - c), 3))
        assert scorer(img) == pytest.approx(ssim(ref, img), abs=1e-12)


def test_monotone_degradation():
    for seed in range(5):
        rng = np.random.default_rng(seed)
        a = ndimage.gaussian_filter(rng.random((40, 40)), 3.0)
        n = rng.standard_normal((40, 40))
        scores = [ssim(a, a + eps * n) for eps in (0.01, 0.03, 0.1, 0.3)]
        assert all(x >= y for x, y in zip(scores, scores[1:]))


@settings(max_examples=30, deadline=None)
@given(
    arrays(np.float64, (14, 13), elements=st.floats(0, 1)),
    arrays(np.float64, (14, 13), elements=st.floats(0, 1)),
)
def test_symmetric_and_bounded(a, b):
    s = ssim(a, b)
    assert 0.0 <= s <= 1.0
    assert s == pytest.approx(ssim(b, a), abs=1e-12)
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)
