import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flatzone.core import (DomainError, Nonlinearity, SingularLimit, Transform, classify,
                           eval_G, eval_g, eval_g_prime, eval_H, eval_psi, eval_psi_inv,
                           find_sigma_n, touching_case, truncate)

GAMMAS = [0.5, 1.0, 1.5, 2.0]

# γ = 0.5 oracle values, frozen from an mpmath quadrature of ∫(1-t)^(-1/2)
# and ∫exp(-H(s)) ds (see the oracle notes in the README)
H_SIGMA_HALF = 2.0
PSI_SIGMA_HALF = 0.56766764161830634595


@pytest.fixture(scope="module")
def model1():
    return Transform(Nonlinearity.power(1.0, 1.0, 1.0))


@pytest.fixture(scope="module", params=GAMMAS)
def family(request):
    return Transform(Nonlinearity.power(1.0, request.param, 1.0))


def test_power_rejects_bad_parameters():
    for A, g, s in [(0, 1, 1), (1, -1, 1), (1, 1, 0), (-1, 1, 1)]:
        with pytest.raises(DomainError):
            Nonlinearity.power(A, g, s)


def test_table_must_be_increasing():
    with pytest.raises(DomainError):
        Nonlinearity.tabulated([0.0, 0.5, 0.4], [1.0, 2.0, 3.0], 1.0)
    with pytest.raises(DomainError):
        Nonlinearity.tabulated([0.0, 0.5, 0.8], [1.0, 2.0, 2.0], 1.0)


def test_h_blows_up_at_sigma(family):
    nl = family.source
    vals = [float(nl.h(1.0 - 10.0 ** -k)) for k in range(1, 9)]
    assert all(b > a for a, b in zip(vals, vals[1:]))
    assert vals[-1] > 1e3


def test_H_values(model1):
    assert eval_H(model1, 0.0) == 0.0
    assert eval_H(model1, 0.5) == pytest.approx(math.log(2.0), rel=1e-14)
    half = Transform(Nonlinearity.power(1.0, 0.5, 1.0))
    assert half.source.H_sigma == pytest.approx(H_SIGMA_HALF, rel=1e-13)
    assert float(half.H(1.0 - 1e-12)) == pytest.approx(H_SIGMA_HALF, abs=3e-6)


def test_H_at_sigma_is_guarded(model1):
    with pytest.raises(DomainError):
        eval_H(model1, 1.0)


def test_psi_values(model1):
    assert eval_psi(model1, 0.8) == pytest.approx(0.48, abs=1e-14)
    assert eval_psi(model1, 0.0) == 0.0
    assert eval_psi(model1, 1.0) == pytest.approx(0.5, abs=1e-15)
    half = Transform(Nonlinearity.power(1.0, 0.5, 1.0))
    assert half.L == pytest.approx(PSI_SIGMA_HALF, rel=1e-12)


def test_psi_inv_values(model1):
    assert eval_psi_inv(model1, 0.5) == pytest.approx(1.0, abs=1e-12)
    assert eval_psi_inv(model1, 0.0) == 0.0
    assert eval_psi_inv(model1, 0.375) == pytest.approx(0.5, abs=1e-14)


def test_g_values(model1):
    assert eval_g(model1, 0.375) == pytest.approx(0.5, abs=1e-14)
    assert eval_g(model1, 0.0) == 1.0
    assert eval_g(model1, 0.5) == 0.0


def test_g_prime_values(model1):
    assert eval_g_prime(model1, 0.0) == pytest.approx(-1.0, abs=1e-14)
    assert eval_g_prime(model1, 0.375) == pytest.approx(-2.0, abs=1e-13)
    t2 = Transform(Nonlinearity.power(1.0, 2.0, 1.0))
    lim = eval_g_prime(t2, t2.L)
    assert isinstance(lim, SingularLimit) and lim.value == -math.inf


def test_G_values(model1):
    assert eval_G(model1, 0.5) == pytest.approx(1.0 / 3.0, abs=1e-14)
    assert eval_G(model1, 0.0) == 0.0
    assert eval_G(model1, 0.375) == pytest.approx((1 - 0.25 ** 1.5) / 3, abs=1e-14)


def test_domain_errors(model1):
    with pytest.raises(DomainError):
        model1.psi(1.5)
    with pytest.raises(DomainError):
        model1.g(0.6)
    with pytest.raises(DomainError):
        model1.psi_inv(-0.1)


def test_classify_regimes():
    expect = {2.0: (False, False), 1.0: (True, False), 0.5: (True, True)}
    for g, (sq, hi) in expect.items():
        rep = classify(Nonlinearity.power(1.0, g, 1.0))
        assert (rep.sqrt_h_integrable, rep.h_integrable) == (sq, hi)
    assert classify(Nonlinearity.power(1.0, 2.0, 1.0)).regime == "AlwaysExists"
    assert classify(Nonlinearity.power(1.0, 1.5, 1.0)).regime == "FiniteThreshold"


def test_touching_case_tags():
    tags = [touching_case(Nonlinearity.power(1.0, g, 1.0)) for g in GAMMAS]
    assert tags == ["I", "II", "III", "inapplicable"]


def test_truncation_examples(model1):
    assert find_sigma_n(model1.source, 10.0) == pytest.approx(0.9, abs=1e-12)
    tr = truncate(model1, 10.0)
    assert float(tr.h_n(0.95)) == 10.0
    assert float(tr.g_n(tr.psi_sigma_n)) == pytest.approx(float(model1._g(tr.psi_sigma_n)), rel=1e-12)


def test_tabulated_matches_power_law_on_its_breakpoints():
    s = np.linspace(0.0, 0.99, 400)
    nl = Nonlinearity.tabulated(s, 1.0 / (1.0 - s), 1.0)
    t = Transform(nl)
    assert t.report.regime == "FiniteThreshold"
    assert t.L == pytest.approx(0.5, abs=2e-3)


# -- properties over the model family ------------------------------------

def test_psi_monotone_and_endpoints(family):
    s = np.linspace(0.0, 1.0, 2001)
    p = family._psi(s)
    assert p[0] == 0.0 and p[-1] == pytest.approx(family.L, rel=1e-12)
    assert np.all(np.diff(p) >= 0)
    # ψ rounds to L well before σ when γ ≥ 1.5; the deficit keeps the digits
    # until it underflows (the deficit decays like exp(-H))
    deficit = family._psi_deficit(s[:-1])
    assert np.all(deficit >= 0) and np.all(np.diff(deficit) <= 0)
    live = deficit > 1e-150
    assert np.all(np.diff(deficit[live]) < 0)


def test_g_monotone_and_endpoints(family):
    v = np.linspace(0.0, family.L, 2001)
    g = family._g(v)
    assert g[0] == pytest.approx(1.0, abs=1e-14)
    # g(L) = exp(-H(σ)): zero only when h is not integrable
    assert g[-1] == pytest.approx(math.exp(-family.source.H_sigma), abs=1e-12)
    assert np.all(np.diff(g) < 0)


@settings(max_examples=60, deadline=None)
@given(x=st.floats(0.0, 0.999999))
def test_psi_round_trip(x):
    for g in GAMMAS:
        t = _cached(g)
        s = x * t.sigma
        back = float(t._psi_inv(t._psi(s)))
        # ψ is flat to rounding near σ, so the v comparison is the sharp one there
        assert float(t._psi(back)) == pytest.approx(float(t._psi(s)), abs=1e-13)
        if x < 0.9:
            assert back == pytest.approx(s, abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(frac=st.floats(0.01, 0.95))
def test_g_prime_matches_finite_differences(frac):
    for g in GAMMAS:
        t = _cached(g)
        v = frac * t.L
        e = 1e-6 * t.L
        fd = (float(t._g(v + e)) - float(t._g(v - e))) / (2 * e)
        assert float(t._g_prime(v)) == pytest.approx(fd, rel=2e-5, abs=1e-8)


@settings(max_examples=30, deadline=None)
@given(n1=st.floats(2.0, 1e6), ratio=st.floats(1.0, 50.0))
def test_truncation_schedule_monotone(n1, ratio):
    n2 = n1 * ratio
    for g in GAMMAS:
        t = _cached(g)
        a, b = truncate(t, n1), truncate(t, n2)
        assert a.sigma_n <= b.sigma_n < t.sigma
        s = np.linspace(0.0, 0.999, 50)
        assert np.all(a.h_n(s) <= b.h_n(s) + 1e-12)
        assert np.all(b.h_n(s) <= t._h(s) + 1e-12)
        v = np.linspace(0.0, t.L, 50)
        assert np.all(a.g_n(v) >= b.g_n(v) - 1e-12)
        assert np.all(b.g_n(v) >= t._g(v) - 1e-12)


_CACHE = {}


def _cached(g):
    if g not in _CACHE:
        _CACHE[g] = Transform(Nonlinearity.power(1.0, g, 1.0))
    return _CACHE[g]
