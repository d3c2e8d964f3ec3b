import math

import numpy as np
import pytest

from flatzone.bvp import Grid
from flatzone.core import Nonlinearity, Transform
from flatzone.thresholds import (InapplicableError, estimate_Lambda, existence_lower_bound,
                                 nonexistence_bound, principal_eigenvalue, rayleigh_quotient,
                                 threshold_report)

# (π²/8)(e² + 1): λ₁ = π²/4 times e^{H(σ)} L with H(σ) = 2, L = (1 + e⁻²)/2,
# both confirmed by an mpmath quadrature before being frozen here
NE_BOUND_HALF = 10.349583124373933918


def power(g):
    return Transform(Nonlinearity.power(1.0, g, 1.0))


def test_eigenvalue_interval():
    lam, phi = principal_eigenvalue(1.0, Grid.interval(1.0, 2001))
    assert lam == pytest.approx(math.pi ** 2 / 4, rel=1e-6)
    assert np.all(phi[1:-1] > 0)


def test_eigenvalue_ball():
    lam, _ = principal_eigenvalue(1.0, Grid.ball(3, 1.0, 2001))
    assert lam == pytest.approx(math.pi ** 2, rel=1e-6)


def test_eigenvalue_scaling_and_rayleigh():
    g = Grid.interval(1.0, 401)
    lam1, phi = principal_eigenvalue(1.0, g)
    lam3, _ = principal_eigenvalue(3.0, g)
    assert lam3 == pytest.approx(lam1 / 3.0, rel=1e-9)
    assert rayleigh_quotient(1.0, g, phi) == pytest.approx(lam1, rel=1e-10)
    trial = np.where(np.abs(g.nodes) < 1, 1 - g.nodes ** 2, 0.0)
    assert rayleigh_quotient(1.0, g, trial) >= lam1


def test_nonexistence_bound():
    g = Grid.interval(1.0, 2001)
    assert nonexistence_bound(power(0.5), 1.0, g) == pytest.approx(NE_BOUND_HALF, rel=1e-6)
    assert nonexistence_bound(power(0.5), 2.0, g) == pytest.approx(NE_BOUND_HALF / 2, rel=1e-6)
    with pytest.raises(InapplicableError):
        nonexistence_bound(power(1.0), 1.0, g)


def test_existence_lower_bound():
    assert existence_lower_bound(1.0, Grid.interval(1.0, 401), 1.0) == pytest.approx(2.0, rel=1e-10)
    assert existence_lower_bound(1.0, Grid.ball(3, 1.0, 401), 1.0) == pytest.approx(6.0, rel=1e-10)
    assert existence_lower_bound(1.0, Grid.interval(1.0, 401), 2.0) == pytest.approx(4.0, rel=1e-10)


@pytest.mark.parametrize("R, expect", [(1.0, 6.0), (2.0, 1.5)])
def test_extremal_parameter(R, expect):
    est = estimate_Lambda(power(1.0), 1.0, Grid.interval(R, 2001), tol_lambda=2e-3)
    assert est.Lambda_hat == pytest.approx(expect, abs=0.01)
    lo, hi = est.bracket
    assert lo <= est.Lambda_hat <= hi and hi - lo <= 2e-3


def test_estimate_is_inapplicable_without_threshold():
    with pytest.raises(InapplicableError):
        estimate_Lambda(power(2.0), 1.0, Grid.interval(1.0, 201))


def test_report_gamma_half_ordering():
    rep = threshold_report(power(0.5), 1.0, Grid.interval(1.0, 801))
    assert rep.regime == "FiniteThreshold"
    assert rep.lambda_ne_upper is not None and rep.Lambda_hat is not None
    assert rep.check_ordering(rep.tol_lambda)
    assert rep.lambda_ne_upper >= rep.Lambda_hat
    # regression anchor; shooting gives a critical value near 3.499
    assert rep.Lambda_hat == pytest.approx(3.4936, abs=0.02)


def test_report_gamma_two():
    rep = threshold_report(power(2.0), 1.0, Grid.interval(1.0, 201))
    assert rep.regime == "AlwaysExists"
    assert rep.Lambda_hat is None and rep.lambda_ne_upper is None


def test_report_gamma_one_lower_bound():
    rep = threshold_report(power(1.0), 1.0, Grid.interval(1.0, 801), estimate=False)
    assert rep.lambda_lower_linear == pytest.approx(2.0, rel=1e-9)
    assert rep.lambda_sub_certificate == pytest.approx(12.0, rel=1e-9)
