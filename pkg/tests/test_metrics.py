import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from stablenode.ad import ShapeError
from stablenode.checks import brute_dtw, brute_frechet
from stablenode.metrics import ahd, discrete_frechet, dtwd, training_loss

curves = st.integers(1, 5).flatmap(
    lambda n: arrays(np.float64, (n, 2), elements=st.floats(-5, 5, allow_nan=False, allow_infinity=False))
)


def test_ahd_hand_values():
    assert ahd([[0.0]], [[1.0]]).item() == 2.0
    assert ahd([[0.0], [1.0]], [[0.0]]).item() == 0.5
    assert ahd([[0.0, 0.0], [3.0, 4.0]], [[0.0, 0.0], [3.0, 4.0]]).item() == 0.0


def test_ahd_batched_matches_per_pair(rng):
    a = rng.normal(size=(3, 7, 2))
    b = rng.normal(size=(3, 4, 2))
    batch = ahd(a, b).data
    np.testing.assert_allclose(batch, [ahd(a[i], b[i]).item() for i in range(3)])


def test_ahd_errors():
    with pytest.raises(ShapeError):
        ahd(np.zeros((3, 2)), np.zeros((3, 3)))
    with pytest.raises(ValueError):
        ahd(np.zeros((0, 2)), np.zeros((3, 2)))


def test_training_loss_modes(rng):
    r = rng.normal(size=(2, 5, 2))
    d = rng.normal(size=(2, 5, 2))
    mse = training_loss(r, d, mode="mse").item()
    assert mse == pytest.approx(np.mean(np.sum((r - d) ** 2, axis=-1)))
    base = training_loss(r, d, k=0.0).item()
    anchored = training_loss(r, d, k=15.0).item()
    assert anchored - base == pytest.approx(15 * np.mean(np.sum((r[:, 0] - d[:, 0]) ** 2, axis=-1)))
    with pytest.raises(ShapeError):
        training_loss(r, d[:, :3], mode="mse")
    with pytest.raises(ValueError):
        training_loss(r, d, mode="l1")


def test_dtw_hand_case():
    res = dtwd([[0.0], [1.0], [2.0]], [[0.0], [2.0]])
    # path (0,0) (1,0)|(1,1) (2,1): cost 0 + 1 + 0
    assert res.raw == pytest.approx(1.0)
    assert res.path_length == 3
    assert res.normalized == pytest.approx(1.0 / 3)


def test_frechet_hand_case():
    assert discrete_frechet([[0.0], [1.0]], [[0.0], [3.0]]) == pytest.approx(2.0)


@settings(max_examples=60, deadline=None)
@given(curves, curves)
def test_dtw_and_frechet_match_brute_force(p, q):
    assert dtwd(p, q).raw == pytest.approx(brute_dtw(p, q), abs=1e-9)
    assert discrete_frechet(p, q) == pytest.approx(brute_frechet(p, q), abs=1e-9)


@settings(max_examples=60, deadline=None)
@given(curves, curves)
def test_metric_symmetry_and_ordering(p, q):
    assert dtwd(p, q).raw == pytest.approx(dtwd(q, p).raw, abs=1e-9)
    assert discrete_frechet(p, q) == pytest.approx(discrete_frechet(q, p), abs=1e-9)
    # Frechet is the max over a coupling; DTW sums at least that coupling's worst pair
    assert discrete_frechet(p, q) <= dtwd(p, q).raw + 1e-9
    assert ahd(p, q).item() >= 0


def test_metrics_zero_on_identical_curves(rng):
    c = rng.normal(size=(20, 2))
    assert dtwd(c, c).raw == 0.0
    assert discrete_frechet(c, c) == 0.0
