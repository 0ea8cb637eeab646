import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from rdmm import RDMMRegistration, RegistrationConfig, default_config
from rdmm.exceptions import InvalidParameterError, ShapeMismatchError
from rdmm.fields import GridSpec, compose_map
from rdmm.kernels import constant_preweights
from rdmm.objectives import ssd

from conftest import bump

FAST = {"scales": [[1.0, 15]], "integrator": {"n_steps": 5},
        "similarity": {"kind": "ssd"}}


@pytest.fixture(scope="module")
def pair():
    g = GridSpec((32, 32))
    return bump(g, (0.45, 0.5), 0.1), bump(g, (0.53, 0.5), 0.1)


def test_params_round_trip_and_clone():
    est = RDMMRegistration(mode="lddmm", config=FAST)
    assert est.get_params() == {"mode": "lddmm", "config": FAST, "preweights": None}
    twin = clone(est)
    assert twin.get_params() == est.get_params() and twin is not est
    est.set_params(mode="rdmm-joint")
    assert est.mode == "rdmm-joint"


def test_fit_transform_on_translated_blob(pair):
    I0, I1 = pair
    est = RDMMRegistration(mode="lddmm", config=FAST)
    assert est.fit(I0, I1) is est
    assert ssd(est.warped_, I1) < 0.3 * ssd(I0, I1)
    np.testing.assert_array_equal(est.transform(I0), est.warped_)
    np.testing.assert_array_equal(est.transform(I0), compose_map(I0, est.phi_inv_))
    stack = est.transform(np.stack([I0, I1]))
    assert stack.shape == (2, 32, 32)
    np.testing.assert_array_equal(stack[0], est.warped_)
    assert est.jacobian_determinant().shape == (32, 32)
    assert est.n_iter_ == len(est.result_.per_iteration) > 0
    assert est.config_.mode == "lddmm"
    labels = (I0 > 0.5).astype(np.int32)
    assert est.transform_labels(labels).dtype == np.int32


def test_fit_transform_mixin(pair):
    I0, I1 = pair
    est = RDMMRegistration(mode="lddmm", config=FAST)
    np.testing.assert_array_equal(est.fit_transform(I0, I1), est.warped_)


def test_fixed_mode_uses_given_preweights(pair):
    I0, I1 = pair
    h0 = constant_preweights((0.2, 0.3, 0.3, 0.2), I0.shape)
    est = RDMMRegistration(mode="rdmm-fixed", config=FAST, preweights=h0).fit(I0, I1)
    np.testing.assert_array_equal(est.h0_, h0)


def test_config_object_accepted(pair):
    cfg = default_config("lddmm").with_updates(scales=((1.0, 3),))
    est = RDMMRegistration(mode="lddmm", config=cfg).fit(*pair)
    assert est.config_ is cfg
    with pytest.raises(InvalidParameterError):
        RDMMRegistration(mode="rdmm-joint", config=cfg).fit(*pair)


def test_errors(pair):
    I0, I1 = pair
    est = RDMMRegistration(mode="lddmm", config=FAST)
    with pytest.raises(NotFittedError):
        est.transform(I0)
    with pytest.raises(ShapeMismatchError):
        est.fit(I0, I1[:-1])
    with pytest.raises(ShapeMismatchError):
        est.fit(I0.ravel(), I1.ravel())
    bad = I0.copy()
    bad[0, 0] = np.nan
    with pytest.raises(InvalidParameterError):
        est.fit(bad, I1)
    with pytest.raises(InvalidParameterError):
        RDMMRegistration(mode="rdmm-fixed", config=FAST,
                         preweights=np.full((4, 32, 32), 0.4)).fit(I0, I1)
    with pytest.raises(ShapeMismatchError):
        RDMMRegistration(mode="rdmm-fixed", config=FAST,
                         preweights=np.full((4, 8, 8), 0.5)).fit(I0, I1)
    with pytest.raises(InvalidParameterError):
        RDMMRegistration(mode="affine").fit(I0, I1)
    est.fit(I0, I1)
    with pytest.raises(ShapeMismatchError):
        est.transform(np.zeros((16, 16)))


def test_config_json_round_trip():
    cfg = default_config("rdmm_joint")
    assert RegistrationConfig.from_json(cfg.to_json()) == cfg
