import math

import numpy as np
import pytest

from geot import diffcore as dc
from geot.diffcore import NumericalError
from geot.objective import (combine, corrected_unsup_loss, focal_loss, focal_terms, supervised_loss,
                            total_loss)


def test_focal_examples():
    assert focal_loss(np.array([0.0, 1.0]), 1) == 0.0
    assert focal_loss(np.array([0.5, 0.5]), 0, 2.0) == pytest.approx(0.25 * math.log(2), rel=1e-15)
    assert round(focal_loss(np.array([0.5, 0.5]), 0, 2.0), 6) == 0.173287
    p = np.array([0.2, 0.3, 0.5])
    assert focal_loss(p, 1, 0.0) == pytest.approx(-math.log(0.3), rel=1e-15)


def test_focal_errors():
    with pytest.raises(ValueError):
        focal_loss(np.array([0.5, 0.5]), 2)
    with pytest.raises(ValueError):
        focal_terms(np.ones((2, 2)) / 2, np.array([0]))


def test_focal_zero_probability_is_finite():
    v = focal_terms(np.array([[1.0, 0.0]]), np.array([1])).item()
    assert math.isfinite(v) and v == pytest.approx(-math.log(1e-12))


def test_supervised_examples():
    P = np.eye(3)
    assert supervised_loss(P, np.arange(3)).item() == 0.0
    single = np.array([[0.5, 0.5]])
    assert supervised_loss(single, np.array([0])).item() == pytest.approx(0.173287, abs=1e-6)
    two = np.array([[0.5, 0.5], [0.5, 0.5]])
    s1 = supervised_loss(single, np.array([0]), mode="sum").item()
    assert supervised_loss(two, np.array([0, 0]), mode="sum").item() == 2 * s1
    assert supervised_loss(two, np.array([0, 0]), mode="mean").item() == s1


def test_corrected_example():
    loss = corrected_unsup_loss(np.array([[0.7, 0.3]]), np.array([[[0.9, 0.1], [0.2, 0.8]]]), np.array([0]))
    assert loss.item() == pytest.approx(0.31**2 * -math.log(0.69), rel=1e-12)
    # 0.0961 * 0.371064 = 0.0356592
    assert round(loss.item(), 6) == 0.035659


def test_identity_reduction_and_one_hot():
    rng = np.random.default_rng(0)
    P = rng.dirichlet(np.ones(4), size=9)
    y = rng.integers(0, 4, 9)
    ident = np.tile(np.eye(4), (9, 1, 1))
    a = corrected_unsup_loss(P, ident, y).item()
    assert abs(a - supervised_loss(P, y).item()) <= 1e-12
    assert corrected_unsup_loss(np.eye(4)[y], ident, y).item() == 0.0


def test_total_examples():
    assert total_loss(1.0, 2.0, 3.0, 0.0, 0.0).total == 1.0
    assert total_loss(1.0, 2.0, 3.0, 1.0, 0.1).total == pytest.approx(3.3, abs=1e-15)
    empty = corrected_unsup_loss(np.zeros((0, 3)), None, np.zeros(0, dtype=int))
    assert empty.item() == 0.0
    assert total_loss(0.7, empty, 0.0).total == 0.7


@pytest.mark.parametrize("bad", ["L_s", "L_u", "L_m"])
def test_nonfinite_component_named(bad):
    parts = {"L_s": 1.0, "L_u": 1.0, "L_m": 1.0, bad: float("nan")}
    with pytest.raises(NumericalError, match=bad):
        total_loss(parts["L_s"], parts["L_u"], parts["L_m"])
    with pytest.raises(NumericalError, match=bad):
        combine(parts["L_s"], parts["L_u"], parts["L_m"])


def test_focal_terms_gradient():
    ps = dc.ParamStore()
    ps.add("z", np.random.default_rng(1).standard_normal((6, 3)))
    y = np.array([0, 1, 2, 2, 1, 0])
    for gamma in (0.0, 0.5, 2.0):
        rep = dc.finite_diff_check(lambda p: dc.tsum(focal_terms(dc.softmax(p.tensor("z")), y, gamma)), ps)
        assert rep.ok


def test_losses_nonnegative():
    rng = np.random.default_rng(2)
    for _ in range(20):
        P = rng.dirichlet(np.ones(5), size=4)
        T = rng.dirichlet(np.ones(5), size=(4, 5))
        y = rng.integers(0, 5, 4)
        assert supervised_loss(P, y).item() >= 0
        assert corrected_unsup_loss(P, T, y).item() >= 0
