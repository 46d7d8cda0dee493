import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mlsadjust.exceptions import (
    DegenerateSampleError, InsufficientSampleError, InvalidInputError,
)
from mlsadjust.stats import (
    AXES, ErrorSample, chi2_critical, chi2_test, compare_methods, horizontal_errors,
    improvement, spatial_errors, summarize, t_critical, tau_test,
)
from mlsadjust.stats import test_report as make_report  # alias keeps pytest from collecting it

import oracles

finite = st.floats(-100, 100, allow_nan=False)


def sample_with(mean, stdev, n):
    """Sample of size ``n`` with exactly the requested mean and sample stdev."""
    z = np.linspace(-1.0, 1.0, n)
    z = (z - z.mean()) / z.std(ddof=1)
    return ErrorSample("x", mean + stdev * z)


def test_summarize_examples():
    mean, stdev, rms, lo, hi = summarize(ErrorSample("a", [1, 2, 3, 4]))
    assert mean == pytest.approx(2.5, abs=1e-15)
    assert stdev == pytest.approx(1.2909944487358056, abs=1e-15)
    assert rms == pytest.approx(2.7386127875258306, abs=1e-15)
    assert (lo, hi) == (1.0, 4.0)
    mean, stdev, rms, *_ = summarize(ErrorSample("b", [-1, 1]))
    assert mean == 0.0 and stdev == pytest.approx(np.sqrt(2)) and rms == 1.0


def test_summarize_constant():
    mean, stdev, rms, *_ = summarize(ErrorSample("c", [-3.0] * 5))
    assert mean == -3.0 and stdev == 0.0 and rms == 3.0


def test_summarize_needs_two():
    with pytest.raises(InsufficientSampleError):
        summarize(ErrorSample("d", [1.0]))


def test_error_sample_rejects_nonfinite():
    with pytest.raises(InvalidInputError):
        ErrorSample("e", [1.0, np.inf])


@settings(max_examples=200)
@given(st.lists(finite, min_size=2, max_size=50))
def test_rms_identity(values):
    e = np.asarray(values)
    mean, stdev, rms, *_ = summarize(ErrorSample("f", e))
    n = e.size
    rhs = mean ** 2 + (n - 1) / n * stdev ** 2
    assert rms ** 2 == pytest.approx(rhs, rel=1e-9, abs=1e-300)


def test_tau_examples():
    tau, crit, reject = tau_test(sample_with(-1.80, 2.03, 20))
    assert tau == pytest.approx(-3.965, abs=5e-4)
    assert tau == pytest.approx(-1.80 / 2.03 * np.sqrt(20), rel=1e-12)
    assert reject and crit == pytest.approx(2.093024054408263, rel=1e-12)
    assert tau_test(sample_with(1.0, 1.0, 16))[0] == pytest.approx(4.0, rel=1e-12)
    tau, _, reject = tau_test(ErrorSample("z", [-1, 1, -2, 2]))
    assert tau == 0.0 and not reject


def test_tau_degenerate():
    with pytest.raises(DegenerateSampleError):
        tau_test(ErrorSample("c", [2.0, 2.0, 2.0]))
    with pytest.raises(InsufficientSampleError):
        tau_test(ErrorSample("c", [2.0, 2.0, 2.0]))


def test_alpha_validation():
    with pytest.raises(InvalidInputError):
        tau_test(ErrorSample("a", [1, 2, 3]), alpha=1.5)
    with pytest.raises(InvalidInputError):
        chi2_test(ErrorSample("a", [1, 2, 3]), 0.0)


def test_chi2_examples():
    chi2, crit, reject, _ = chi2_test(sample_with(0.3, 2.0, 20), 2.0)
    assert chi2 == pytest.approx(19.0, rel=1e-12) and not reject
    chi2, *_ = chi2_test(sample_with(0.3, 4.0, 20), 2.0)
    assert chi2 == pytest.approx(76.0, rel=1e-12)
    assert crit == pytest.approx(30.14352720564616, rel=1e-12)
    *_, sigma_a = chi2_test(sample_with(0.0, 1.51, 20), 1.0)
    assert sigma_a == pytest.approx(1.51 * np.sqrt(19 / 30.14352720564616), rel=1e-12)
    assert sigma_a == pytest.approx(1.199, abs=5e-4)


def test_sigma_achieved_is_the_pass_boundary():
    s = sample_with(0.0, 1.7, 12)
    *_, sigma_a = chi2_test(s, 1.0)
    assert not chi2_test(s, sigma_a * (1 + 1e-9))[2]
    assert chi2_test(s, sigma_a * (1 - 1e-6))[2]


def test_quantiles_against_mpmath():
    rng = np.random.default_rng(5)
    for _ in range(40):
        dof = int(rng.integers(1, 200))
        alpha = float(rng.uniform(0.001, 0.2))
        assert t_critical(alpha, dof) == pytest.approx(
            oracles.t_quantile(1 - alpha / 2, dof), rel=1e-9)
        assert chi2_critical(alpha, dof) == pytest.approx(
            oracles.chi2_quantile(1 - alpha, dof), rel=1e-9)


@settings(max_examples=50)
@given(st.lists(finite, min_size=3, max_size=30), st.floats(0.01, 100))
def test_tau_scale_invariant(values, c):
    s = ErrorSample("s", values)
    if summarize(s)[1] <= 1e-6 * max(1.0, np.max(np.abs(values))):
        return
    t1 = tau_test(s)[0]
    t2 = tau_test(ErrorSample("s", np.asarray(values) * c))[0]
    assert t2 == pytest.approx(t1, rel=1e-12, abs=1e-12)


@settings(max_examples=50)
@given(st.lists(finite, min_size=3, max_size=30), st.floats(0.01, 100))
def test_chi2_scales_quadratically(values, c):
    s = ErrorSample("s", values)
    c1 = chi2_test(s, 1.5)[0]
    c2 = chi2_test(ErrorSample("s", np.asarray(values) * c), 1.5)[0]
    assert c2 == pytest.approx(c ** 2 * c1, rel=1e-10, abs=1e-300)


def test_report_zero_spread_reports_nan_tau():
    rep = make_report(ErrorSample("c", [0.0, 0.0, 0.0]), 2.0)
    assert np.isnan(rep.tau) and not rep.tau_reject
    assert rep.chi2 == 0.0 and rep.sigma_achieved == 0.0
    assert set(rep.to_dict()) >= {"tau", "chi2", "sigma_achieved", "rms"}


def test_improvement_examples():
    assert improvement(2.52, 1.82) == pytest.approx(27.777777777777786, rel=1e-12)
    assert improvement(1.0, 1.0) == 0.0
    assert improvement(0.0, 0.0) == 0.0


def test_horizontal_and_spatial_norms(rng):
    n, e, u = rng.normal(size=(3, 10))
    assert np.allclose(horizontal_errors(n, e), np.sqrt(n ** 2 + e ** 2))
    assert np.allclose(spatial_errors(n, e, u), np.sqrt(n ** 2 + e ** 2 + u ** 2))


def test_compare_methods_structure(rng):
    a = tuple(rng.normal(size=(3, 20)))
    b = tuple(0.5 * x for x in a)
    out = compare_methods({"LS": a, "TLS": b, "SAME": a})
    assert set(out["reports"]["LS"]) == set(AXES)
    rep_3d = out["reports"]["LS"]["3D"]
    expected = summarize(ErrorSample("3d", spatial_errors(a[0], a[1], a[2])))
    assert rep_3d.mean == pytest.approx(expected[0])
    assert rep_3d.sigma0 == pytest.approx(np.hypot(2.0, 3.0))
    assert out["reports"]["LS"]["U"].sigma0 == 3.0
    for axis in AXES:
        assert out["improvement"]["LS"]["SAME"][axis] == 0.0
        assert out["improvement"]["LS"]["TLS"][axis] == pytest.approx(50.0)


def test_compare_methods_mismatched_n(rng):
    with pytest.raises(InvalidInputError):
        compare_methods({"A": tuple(rng.normal(size=(3, 5))), "B": tuple(rng.normal(size=(3, 6)))})
    with pytest.raises(InvalidInputError):
        compare_methods({})
