import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import ndimage

from facepaste.exceptions import InvalidParameterError, UnsupportedOperationError
from facepaste.oracle import RemoteOracle
from facepaste.pgd_attack import PGDAttack, PgdConfig, pgd_step, run_pgd, ssim_project
from facepaste.similarity import ssim

ETA = 2.0 / 255.0


def test_config_validation():
    with pytest.raises(InvalidParameterError):
        PgdConfig(step_size=0.0)
    with pytest.raises(InvalidParameterError):
        PgdConfig(ssim_floor=1.0)
    with pytest.raises(InvalidParameterError):
        PgdConfig(steps=-1)


def test_step_examples():
    x = np.array([0.2, 0.5, 1.0, 0.0])
    assert np.array_equal(pgd_step(x, np.zeros(4), ETA), x)
    out = pgd_step(x, np.array([3.0, -1e-9, 2.0, -5.0]), ETA)
    np.testing.assert_allclose(out, [0.2 + ETA, 0.5 - ETA, 1.0, 0.0])
    with pytest.raises(InvalidParameterError):
        pgd_step(x, np.zeros(3), ETA)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 30).flatmap(lambda n: st.tuples(
    arrays(np.float64, n, elements=st.floats(0, 1)),
    arrays(np.float64, n, elements=st.floats(-10, 10)),
)))
def test_step_moves_by_eta_unless_clipped(xg):
    x, g = xg
    out = pgd_step(x, g, ETA)
    moved = np.abs(out - x)
    free = (g != 0) & (x + ETA * np.sign(g) >= 0) & (x + ETA * np.sign(g) <= 1)
    np.testing.assert_allclose(moved[free], ETA, rtol=1e-12)
    assert np.all(moved[g == 0] == 0)
    assert np.all((out >= 0) & (out <= 1))


def _smooth(seed, shape=(48, 48, 3)):
    rng = np.random.default_rng(seed)
    return np.clip(ndimage.gaussian_filter(rng.random(shape), (2, 2, 0)) * 1.6 - 0.3, 0, 1)


def test_projection_no_op_when_floor_met():
    x0 = _smooth(0)
    x = np.clip(x0 + 0.01, 0, 1)
    out, lam = ssim_project(x0, x, 0.5)
    assert lam == 1.0 and np.array_equal(out, x)


@pytest.mark.parametrize("seed", range(6))
def test_projection_lands_just_above_floor(seed):
    x0 = _smooth(seed)
    noise = np.random.default_rng(100 + seed).standard_normal(x0.shape)
    x = np.clip(x0 + 0.4 * noise, 0, 1)
    assert ssim(x0, x) < 0.5
    out, lam = ssim_project(x0, x, 0.5, 0.005)
    assert 0.5 <= ssim(x0, out) <= 0.505
    assert 0.0 <= lam < 1.0
    # shrinkage toward x0 never grows the perturbation
    assert np.all(np.abs(out - x0) <= np.abs(x - x0) + 1e-15)
    # the bracket's lower end is always feasible
    assert ssim(x0, x0 + 0.0 * (x - x0)) == 1.0


def test_zero_steps_returns_source(toy_faces, sim_oracle):
    res = run_pgd(2, 6, sim_oracle, PgdConfig(steps=0))
    assert np.array_equal(res.image, toy_faces[2])
    assert res.final.stealthiness == 1.0
    assert res.final.confidence == sim_oracle.classify(toy_faces[2])[6]
    assert res.trace == [] and not res.success


def test_remote_surrogate_is_unsupported():
    with pytest.raises(UnsupportedOperationError):
        run_pgd(0, 1, RemoteOracle("http://127.0.0.1:9/query"))


def test_perturbation_confined_to_crop_box(toy_faces, sim_oracle):
    box = (30, 20, 50, 70)
    res = run_pgd(1, 3, sim_oracle, PgdConfig(steps=4), crop_box=box)
    outside = np.ones((128, 128), dtype=bool)
    outside[30:80, 20:90] = False
    assert np.array_equal(res.image[outside], toy_faces[1][outside])
    assert np.any(res.image[~outside] != toy_faces[1][~outside])


def test_crop_box_must_fit(sim_oracle):
    with pytest.raises(InvalidParameterError):
        run_pgd(0, 1, sim_oracle, PgdConfig(steps=1), crop_box=(100, 0, 40, 40))


@pytest.mark.parametrize("pair", [(0, 5), (3, 8), (9, 2)])
def test_white_box_progress_is_mostly_monotone(sim_oracle, pair):
    s, t = pair
    res = run_pgd(s, t, sim_oracle)
    start = np.log(sim_oracle.classify(sim_oracle.faces[s])[t])
    steps = np.diff([start] + res.log_confidence)
    assert np.mean(steps >= 0) >= 0.9
    assert res.success
    assert 0.5 <= res.final.stealthiness <= 0.505


def test_per_step_projection_keeps_floor(sim_oracle):
    res = run_pgd(4, 7, sim_oracle, PgdConfig(steps=30, project_each_step=True))
    assert all(s >= 0.5 for _, s in res.trace)


def test_estimator_wrapper(sim_oracle):
    est = PGDAttack(steps=3)
    assert est.get_params()["steps"] == 3
    assert est.config() == PgdConfig(steps=3)
    out = est.run(sim_oracle, [(0, 1), (1, 0)])
    assert [(r.source_id, r.target_id) for r in out] == [(0, 1), (1, 0)]
