"""Accuracy statistics and hypothesis tests for control-point errors.

Errors are in centimetres.  ``stdev`` always uses the n-1 divisor and
``rms`` the n divisor, so ``rms**2 == mean**2 + (n-1)/n * stdev**2``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy import stats as _st

from .exceptions import DegenerateSampleError, InsufficientSampleError, InvalidInputError

__all__ = [
    "AXES",
    "ErrorSample",
    "TestReport",
    "summarize",
    "tau_test",
    "chi2_test",
    "t_critical",
    "chi2_critical",
    "horizontal_errors",
    "spatial_errors",
    "test_report",
    "improvement",
    "compare_methods",
]

AXES = ("N", "E", "U", "2D", "3D")


@dataclass
class ErrorSample:
    label: str
    errors: np.ndarray

    def __post_init__(self):
        self.errors = np.asarray(self.errors, dtype=float).reshape(-1)
        if not np.all(np.isfinite(self.errors)):
            raise InvalidInputError(f"sample {self.label!r} contains non-finite errors")

    @property
    def n(self):
        return self.errors.size


@dataclass
class TestReport:
    __test__ = False  # keep pytest from collecting this

    label: str
    n: int
    mean: float
    stdev: float
    rms: float
    min: float
    max: float
    tau: float
    tau_critical: float
    tau_reject: bool
    chi2: float
    chi2_critical: float
    chi2_reject: bool
    sigma0: float
    sigma_achieved: float

    def to_dict(self):
        return asdict(self)


def _require(sample, n_min=2):
    if sample.n < n_min:
        raise InsufficientSampleError(
            f"sample {sample.label!r} has {sample.n} entries, need at least {n_min}"
        )


def summarize(sample):
    """Return ``(mean, stdev, rms, min, max)`` of the sample."""
    _require(sample)
    e = sample.errors
    mean = float(np.mean(e))
    stdev = float(np.std(e, ddof=1))
    rms = float(np.sqrt(np.mean(e * e)))
    return mean, stdev, rms, float(np.min(e)), float(np.max(e))


def t_critical(alpha, dof):
    """Two-tailed Student-t critical value."""
    return float(_st.t.ppf(1.0 - alpha / 2.0, dof))


def chi2_critical(alpha, dof):
    """Upper-tail chi-square critical value."""
    return float(_st.chi2.ppf(1.0 - alpha, dof))


def _check_alpha(alpha):
    if not 0.0 < alpha < 1.0:
        raise InvalidInputError(f"significance level must be in (0, 1), got {alpha!r}")


def tau_test(sample, alpha=0.05):
    """Test H0: mean error is zero.  Returns ``(tau, critical, reject)``."""
    _check_alpha(alpha)
    mean, stdev, *_ = summarize(sample)
    if stdev == 0.0:
        raise DegenerateSampleError(f"sample {sample.label!r} has zero spread")
    n = sample.n
    tau = mean / stdev * np.sqrt(n)
    crit = t_critical(alpha, n - 1)
    return float(tau), crit, bool(abs(tau) > crit)


def chi2_test(sample, sigma0, alpha=0.05):
    """Test H0: sigma == sigma0 against sigma > sigma0.

    Returns
    -------
    chi2, critical, reject, sigma_achieved
        ``sigma_achieved`` is the smallest accuracy level the sample passes.
    """
    _check_alpha(alpha)
    if not sigma0 > 0:
        raise InvalidInputError("sigma0 must be positive")
    _, stdev, *_ = summarize(sample)
    dof = sample.n - 1
    chi2 = stdev ** 2 * dof / sigma0 ** 2
    crit = chi2_critical(alpha, dof)
    sigma_a = stdev * np.sqrt(dof / crit)
    return float(chi2), crit, bool(chi2 > crit), float(sigma_a)


def horizontal_errors(e_n, e_e):
    return np.hypot(np.asarray(e_n, dtype=float), np.asarray(e_e, dtype=float))


def spatial_errors(e_n, e_e, e_u):
    e_n, e_e, e_u = (np.asarray(v, dtype=float) for v in (e_n, e_e, e_u))
    return np.sqrt(e_n ** 2 + e_e ** 2 + e_u ** 2)


def test_report(sample, sigma0, alpha=0.05):
    """Full :class:`TestReport` for one sample.

    A sample with zero spread reports ``tau = nan`` rather than raising, so
    exact (noiseless) data can still be tabulated.
    """
    mean, stdev, rms, lo, hi = summarize(sample)
    if stdev > 0.0:
        tau, tcrit, treject = tau_test(sample, alpha)
    else:
        tau, tcrit, treject = float("nan"), t_critical(alpha, sample.n - 1), False
    chi2, ccrit, creject, sigma_a = chi2_test(sample, sigma0, alpha)
    return TestReport(
        label=sample.label, n=sample.n, mean=mean, stdev=stdev, rms=rms, min=lo, max=hi,
        tau=tau, tau_critical=tcrit, tau_reject=treject,
        chi2=chi2, chi2_critical=ccrit, chi2_reject=creject,
        sigma0=float(sigma0), sigma_achieved=sigma_a,
    )


def improvement(sigma_ref, sigma_method):
    """Percentage accuracy gain of ``sigma_method`` over ``sigma_ref``."""
    if sigma_ref == 0.0:
        return 0.0 if sigma_method == 0.0 else float("-inf")
    return 100.0 * (sigma_ref - sigma_method) / sigma_ref


def _axis_sigma0(axis, sigma0_h, sigma0_v):
    if axis in ("N", "E", "2D"):
        return sigma0_h
    if axis == "U":
        return sigma0_v
    return float(np.hypot(sigma0_h, sigma0_v))


def compare_methods(samples, sigma0_h=2.0, sigma0_v=3.0, alpha=0.05):
    """Tabulate tests per method and axis plus pairwise improvements.

    Parameters
    ----------
    samples : dict
        ``{method: (e_n, e_e, e_u)}`` with per-point axis errors in cm.  The
        2D and 3D samples are the per-point norms of the axis errors.
    sigma0_h, sigma0_v : float
        Required horizontal and vertical accuracy (cm).  N, E and 2D use the
        horizontal value, U the vertical one and 3D their quadrature sum.

    Returns
    -------
    dict
        ``{"reports": {method: {axis: TestReport}},
        "improvement": {ref: {method: {axis: percent}}}}``
    """
    if not samples:
        raise InvalidInputError("no samples to compare")
    sizes = set()
    reports = {}
    for method, (e_n, e_e, e_u) in samples.items():
        e_n, e_e, e_u = (np.asarray(v, dtype=float).reshape(-1) for v in (e_n, e_e, e_u))
        if not e_n.size == e_e.size == e_u.size:
            raise InvalidInputError(f"axis samples of {method!r} differ in length")
        sizes.add(e_n.size)
        by_axis = {
            "N": e_n, "E": e_e, "U": e_u,
            "2D": horizontal_errors(e_n, e_e),
            "3D": spatial_errors(e_n, e_e, e_u),
        }
        reports[method] = {
            axis: test_report(
                ErrorSample(f"{method}/{axis}", values),
                _axis_sigma0(axis, sigma0_h, sigma0_v),
                alpha,
            )
            for axis, values in by_axis.items()
        }
    if len(sizes) != 1:
        raise InvalidInputError(f"methods have different sample sizes: {sorted(sizes)}")

    gains = {}
    for ref in reports:
        gains[ref] = {}
        for method in reports:
            if method == ref:
                continue
            gains[ref][method] = {
                axis: improvement(
                    reports[ref][axis].sigma_achieved, reports[method][axis].sigma_achieved
                )
                for axis in AXES
            }
    return {"reports": reports, "improvement": gains}
