import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dpmlbench.accountant import (DEFAULT_ORDERS, Gaussian, Laplace, PrivacyLedger, PrivacySpec,
                                  RandomizedResponse, RdpCurve, SubsampledGaussian, calibrate, calibrate_sigma,
                                  compose, convert_convention, epsilon_of, event_curve, rdp_gaussian,
                                  rdp_laplace, rdp_randomized_response, rdp_subsampled_gaussian, rr_epsilon,
                                  rr_params, to_dp)
from dpmlbench.errors import BudgetError, CalibrationError, DomainError

from oracles import subsampled_gaussian_rdp


def test_order_grid_shape():
    assert len(DEFAULT_ORDERS) == 74
    assert DEFAULT_ORDERS[0] == pytest.approx(1.1)
    assert DEFAULT_ORDERS[-2:] == (128.0, 256.0)
    assert all(a < b for a, b in zip(DEFAULT_ORDERS, DEFAULT_ORDERS[1:]))


def test_full_batch_is_plain_gaussian():
    for sigma in (0.5, 1.0, 3.7):
        c = rdp_subsampled_gaussian(1.0, sigma)
        a, e = c.as_arrays()
        np.testing.assert_allclose(e, a / (2 * sigma**2), rtol=0, atol=1e-9)


def test_second_order_closed_form():
    # A_2 = 1 + q^2 (e^{1/sigma^2} - 1) for the add/remove subsampled Gaussian
    for q, sigma in [(0.1, 1.0), (0.01, 0.7), (0.3, 2.5)]:
        expect = math.log1p(q * q * math.expm1(1 / sigma**2))
        got = rdp_subsampled_gaussian(q, sigma, [2.0]).eps_rdp[0]
        assert got == pytest.approx(expect, rel=1e-12)


def test_frozen_quadrature_value():
    # mpmath quadrature at q=0.1, sigma=1, alpha=2 (40 digits)
    assert rdp_subsampled_gaussian(0.1, 1.0, [2.0]).eps_rdp[0] == pytest.approx(0.017036863236176553, rel=1e-4)


@pytest.mark.parametrize("q,sigma", [(0.1, 1.0), (0.01, 0.8), (0.05, 2.0)])
@pytest.mark.parametrize("alpha", [1.5, 2.5, 4.0, 16.0])
def test_subsampled_matches_quadrature(q, sigma, alpha):
    got = rdp_subsampled_gaussian(q, sigma, [alpha]).eps_rdp[0]
    assert got == pytest.approx(subsampled_gaussian_rdp(q, sigma, alpha), rel=1e-4)


def test_integer_and_fractional_paths_agree_near_each_other():
    # eps(alpha) is smooth: fractional neighbours bracket the integer value
    c = rdp_subsampled_gaussian(0.05, 1.2, [1.9, 2.0, 2.1])
    assert c.eps_rdp[0] < c.eps_rdp[1] < c.eps_rdp[2]


@given(st.floats(0.001, 1.0), st.floats(0.3, 20.0))
def test_subsampled_bounded_by_unsampled_and_monotone(q, sigma):
    sub = rdp_subsampled_gaussian(q, sigma, [2.0, 8.0, 32.0])
    full = rdp_gaussian(sigma, 1.0, [2.0, 8.0, 32.0])
    for s, f in zip(sub.eps_rdp, full.eps_rdp):
        assert s <= f * (1 + 1e-9) + 1e-12
    assert all(a <= b + 1e-12 for a, b in zip(sub.eps_rdp, sub.eps_rdp[1:]))


def test_to_dp_single_order():
    curve = RdpCurve((32.0,), (0.5,))
    assert to_dp(curve, 1e-5) == pytest.approx(0.5 + math.log(1e5) / 31, abs=1e-12)
    assert to_dp(curve, 1e-5) == pytest.approx(0.8714, abs=1e-4)


def test_to_dp_picks_minimum():
    curve = RdpCurve((2.0, 10.0), (0.1, 5.0))
    assert to_dp(curve, 1e-5) == pytest.approx(min(0.1 + math.log(1e5), 5.0 + math.log(1e5) / 9))


def test_composition_is_additive():
    a = SubsampledGaussian(0.02, 1.1, 10)
    b = SubsampledGaussian(0.02, 1.1, 30)
    whole = compose([SubsampledGaussian(0.02, 1.1, 40)])
    parts = compose([a, b])
    np.testing.assert_allclose(whole.eps_rdp, parts.eps_rdp, rtol=1e-12)


def test_gaussian_count_scales():
    c1 = event_curve(Gaussian(3.0, math.sqrt(2), 5))
    c2 = rdp_gaussian(3.0, math.sqrt(2)).scale(5)
    assert c1 == c2


def test_curve_addition_aligns_orders():
    a = RdpCurve((2.0, 3.0, 4.0), (1.0, 2.0, 3.0))
    b = RdpCurve((3.0, 4.0), (1.0, 1.0))
    s = a + b
    assert s.orders == (3.0, 4.0)
    assert s.eps_rdp == (3.0, 4.0)


def test_curve_rejects_bad_values():
    with pytest.raises(DomainError):
        RdpCurve((1.0,), (0.1,))
    with pytest.raises(DomainError):
        RdpCurve((2.0,), (-1.0,))
    with pytest.raises(DomainError):
        RdpCurve((2.0, 3.0), (0.1,))


def test_laplace_rdp_limits():
    # large orders approach the pure-DP bound 1/lambda from below
    b = 2.0
    c = rdp_laplace(b, 1.0, [256.0])
    assert c.eps_rdp[0] <= 1 / b + 1e-12
    assert c.eps_rdp[0] > 0.9 / b


def test_randomized_response_rdp_bounded_by_pure_epsilon():
    for k, eps in [(2, 1.0), (4, 0.5), (10, 3.0)]:
        c = rdp_randomized_response(k, eps)
        assert max(c.eps_rdp) <= eps + 1e-12


def test_rr_params_round_trip():
    for k in (2, 3, 10):
        for eps in (0.1, 1.0, 5.0):
            assert rr_epsilon(k, rr_params(eps, k)) == pytest.approx(eps)
    assert rr_params(math.inf, 4) == 1.0


def test_convention_conversion():
    assert convert_convention(1.0, "unbounded", "bounded") == 2.0
    assert convert_convention(2.0, "bounded", "unbounded") == 1.0
    assert convert_convention(1.5, "bounded", "bounded") == 1.5
    with pytest.raises(DomainError):
        convert_convention(1.0, "bounded", "sideways")


def test_privacy_spec_validation():
    assert not PrivacySpec(math.inf).is_private
    with pytest.raises(DomainError):
        PrivacySpec(0.0)
    with pytest.raises(DomainError):
        PrivacySpec(1.0, delta=1.0)


@pytest.mark.parametrize("eps", [0.2, 1.0, 8.0, 1000.0])
def test_calibration_round_trip(eps):
    target = PrivacySpec(eps)
    sigma = calibrate_sigma(target, 0.05, 500)
    got = epsilon_of([SubsampledGaussian(0.05, sigma, 500)])
    assert eps * (1 - 1e-3) <= got <= eps


def test_calibration_infinite_and_unreachable():
    assert calibrate_sigma(PrivacySpec(math.inf), 0.1, 10) == 0.0
    with pytest.raises(CalibrationError):
        calibrate_sigma(PrivacySpec(1e-6), 1.0, 100000)
    with pytest.raises(CalibrationError):
        calibrate(lambda s: [SubsampledGaussian(0.001, s)], PrivacySpec(1e6))


def test_calibrate_generic_events():
    target = PrivacySpec(2.0)
    s = calibrate(lambda s: [Gaussian(s, math.sqrt(2), 50)], target, hi=1e6)
    assert epsilon_of([Gaussian(s, math.sqrt(2), 50)]) <= 2.0


def test_ledger_accumulates_and_refuses():
    ledger = PrivacyLedger(PrivacySpec(1.0))
    sigma = calibrate_sigma(PrivacySpec(1.0), 0.1, 20)
    for i in range(20):
        ledger.record(SubsampledGaussian(0.1, sigma), "step", i)
    assert ledger.epsilon() <= 1.0
    assert len(ledger) == 20 and ledger.count("step") == 20
    with pytest.raises(BudgetError):
        ledger.record(SubsampledGaussian(0.1, sigma), "step", 20)
    assert len(ledger) == 20
    with pytest.raises(BudgetError):
        ledger.check(None)


def test_ledger_trace_csv(tmp_path):
    ledger = PrivacyLedger()
    ledger.record(SubsampledGaussian(0.1, 1.0), "step", 0)
    ledger.record(Laplace(2.0), "lap", 1)
    ledger.record(RandomizedResponse(3, 1.0), "", 2)
    path = tmp_path / "trace.csv"
    ledger.write_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "step,mechanism,q,sigma,eps_at_delta"
    assert lines[1].startswith("0,step,0.1,1.0,")
    assert lines[2].startswith("1,lap,,2.0,")
    assert lines[3].startswith("2,randomized-response,,,")
    eps = [float(l.split(",")[-1]) for l in lines[1:]]
    assert eps == sorted(eps)


def test_ledger_nonprivate_event_is_infinite():
    ledger = PrivacyLedger()
    ledger.record(None, "plain")
    assert ledger.epsilon() == math.inf


def test_event_validation():
    with pytest.raises(DomainError):
        SubsampledGaussian(0.0, 1.0)
    with pytest.raises(DomainError):
        SubsampledGaussian(0.5, 0.0)
    with pytest.raises(DomainError):
        Gaussian(1.0, count=0)
    with pytest.raises(DomainError):
        compose([])
