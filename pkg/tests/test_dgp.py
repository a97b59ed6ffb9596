import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from forestlab import dgp
from forestlab.dataset import RngStream


def test_mars_reference_point():
    # 10 sin(pi/4) + 20 * 0^2 + 0 + 0
    assert dgp.eval_truth("MARS", [0.5, 0.5, 0.05, 0.0, 0.0]) == pytest.approx(7.0710678, abs=1e-6)


def test_marsadd_reference_point():
    x = [0.5, 0.5, 1.0, 1.0, 1.0]
    expected = 0.1 * np.exp(2.0) + 4 / (1 + np.exp(0.0)) + 3 + 2 + 1
    assert dgp.eval_truth("marsadd", x) == pytest.approx(expected)


unit_rows = hnp.arrays(np.float64, (20, 7), elements=st.floats(0, 1))


@given(unit_rows)
def test_hidden_variants_add_band_indicators(X):
    in6 = (X[:, 5] >= 0.6) & (X[:, 5] <= 0.65)
    in7 = (X[:, 6] >= 0.55) & (X[:, 6] <= 0.6)
    np.testing.assert_allclose(dgp.eval_truth("HMARS", X),
                               dgp.eval_truth("MARS", X) - 30 * in6 - 35 * in7)
    np.testing.assert_allclose(dgp.eval_truth("HMARSADD", X),
                               dgp.eval_truth("MARSADD", X) - 10 * in6 - 7.5 * in7)


@pytest.mark.parametrize("x, expected", [
    ([0.3, 0.62], 0.3 - 1), ([0.3, 0.6], 0.3 - 1), ([0.3, 0.65], 0.3 - 1), ([0.3, 0.66], 0.3),
    ([0.9, 0.1], 0.9),
])
def test_hidden2d_band(x, expected):
    assert dgp.eval_truth("HIDDEN2D", x) == pytest.approx(expected)


@pytest.mark.parametrize("x, expected", [
    ([0.2, 0.62], 0.9), ([0.2, 0.5], 0.2), ([0.8, 0.7], 0.8),
])
def test_band2d_probability(x, expected):
    assert dgp.eval_truth("BAND2D_CLASS", x) == pytest.approx(expected)


def test_sphere_probability():
    assert dgp.eval_truth("SPHERE3D_CLASS", [0.5, 0.5, 0.5]) == 0.9
    assert dgp.eval_truth("SPHERE3D_CLASS", [1.5, 1.5, 1.5]) == 0.1


def test_extra_columns_ignored():
    X = np.random.default_rng(0).random((10, 9))
    np.testing.assert_array_equal(dgp.eval_truth("HMARS", X), dgp.eval_truth("HMARS", X[:, :7]))
    with pytest.raises(ValueError, match="at least 5"):
        dgp.eval_truth("MARS", X[:, :4])


def test_hidden2d_noise_level_matches_closed_form():
    # Var(X1 - 1{band}) = 1/12 + 0.05 * 0.95 for independent uniforms
    var_f = 1 / 12 + 0.05 * 0.95
    assert dgp.truth_variance("HIDDEN2D") == pytest.approx(var_f, rel=5e-3)
    assert dgp.calibrate_sigma2("HIDDEN2D", 6.0) == pytest.approx(0.021806, rel=0.01)


@pytest.mark.parametrize("name", ["MARS", "MARSADD", "HMARS", "HMARSADD", "HIDDEN2D"])
def test_calibration_hits_requested_snr(name):
    for snr in (0.042, 1.0, 6.0):
        assert dgp.truth_variance(name) / dgp.calibrate_sigma2(name, snr) == pytest.approx(snr)
    assert dgp.calibrate_sigma2(name, 2.0, extra_noise_features=3) == dgp.calibrate_sigma2(name, 2.0)


def test_empirical_noise_variance():
    gen = dgp.generate(dgp.DgpSpec("MARS", 50_000, 2.0, seed=1))
    resid = gen.dataset.response - gen.dataset.truth
    assert resid.var() == pytest.approx(gen.sigma2, rel=0.03)
    assert gen.dataset.truth.var() / gen.sigma2 == pytest.approx(2.0, rel=0.05)


def test_generate_shapes_and_determinism():
    spec = dgp.DgpSpec("hmars", 100, 3.0, extra_noise_features=5, seed=4)
    a, b = dgp.generate(spec), dgp.generate(spec)
    assert spec.name == "HMARS" and spec.p == 12 and a.dataset.p == 12
    np.testing.assert_array_equal(a.dataset.features, b.dataset.features)
    np.testing.assert_array_equal(a.dataset.response, b.dataset.response)
    other = dgp.generate(spec, rng=RngStream(4, (1,)))
    assert not np.array_equal(a.dataset.features, other.dataset.features)
    X = a.dataset.features
    assert X.min() >= 0 and X.max() < 1


def test_classification_generation():
    g = dgp.generate(dgp.DgpSpec("SPHERE3D_CLASS", 4000, seed=2))
    X, y = g.dataset.features, g.dataset.response
    assert g.sigma2 is None and set(np.unique(y)) == {0, 1}
    assert X.min() >= -0.5 and X.max() <= 1.5
    inside = ((X - 0.5) ** 2).sum(axis=1) <= 1
    assert y[inside].mean() == pytest.approx(0.9, abs=0.03)
    assert y[~inside].mean() == pytest.approx(0.1, abs=0.03)


@pytest.mark.parametrize("kwargs", [
    dict(name="MARS", n=10, snr=0.0), dict(name="MARS", n=10, snr=None),
    dict(name="MARS", n=0, snr=1.0), dict(name="NOPE", n=10, snr=1.0),
    dict(name="MARS", n=10, snr=1.0, extra_noise_features=-1),
])
def test_spec_validation(kwargs):
    with pytest.raises(ValueError):
        dgp.DgpSpec(**kwargs)


def test_write_generated_sidecar(tmp_path):
    g = dgp.generate(dgp.DgpSpec("HIDDEN2D", 10, 6.0, seed=3))
    side = dgp.write_generated(g, tmp_path / "h.csv")
    meta = json.loads(side.read_text())
    assert meta["sigma2"] == g.sigma2 and meta["spec"]["snr"] == 6.0
    assert (tmp_path / "h.csv").read_text().splitlines()[0] == "x1,x2,y,f_true"
