"""Control-point adjustment of georeferenced scans: LS, TLS, RWTLS, RWTLS-FIMLOE.

Every observation contributes three rows to an errors-in-variables model of a
12-parameter affine correction of the georeferenced coordinates,

    X_surveyed = M @ x_georeferenced + t.

The coefficient matrix rows are ``[x_j, 1]`` blocks, so the random entries are
the georeferenced coordinates (each repeated in three rows) and the constant
ones are deterministic.  The coordinates' cofactor comes from first-order
propagation of the sensor noise; the observation cofactor from the survey
accuracy of each control point.

The four methods differ as follows:

``LS``
    coefficient errors ignored (``B = 0``), no reweighting.
``TLS``
    structured WTLS, no reweighting.
``RWTLS``
    structured WTLS with IGG-III reweighting.
``RWTLS-FIMLOE``
    RWTLS after replacing the nominal mounting with the calibrated one.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.stats import chi2

from .exceptions import ConfigurationError, InvalidInputError
from .fimloe import CalibrationResult, CalibratorOptions, calibrate, observation_covariances
from .frames import BoresightParams
from .rwtls import EivProblem, SolverOptions, igg3_weights, solve
from .stats import compare_methods

__all__ = [
    "METHODS",
    "N_AFFINE",
    "build_affine_problem",
    "affine_from_phi",
    "combine_observations",
    "AdjustmentResult",
    "adjust",
    "run_methods",
]

METHODS = ("LS", "TLS", "RWTLS", "RWTLS-FIMLOE")
N_AFFINE = 12
_METERS_TO_CM = 100.0
# cofactor used when the noise model is identically zero (exact synthetic data)
_EXACT_COFACTOR = 1e-6
# median of sqrt(chi2_3 / 3), the standardized Mahalanobis norm of a clean 3-vector
_CHI3_MEDIAN_SCALE = float(np.sqrt(chi2.median(3) / 3.0))


def build_affine_problem(coords, cov, targets, target_sigmas, center=None):
    """Errors-in-variables problem for the affine correction.

    Parameters
    ----------
    coords : (N, 3) ndarray
        Georeferenced observation coordinates (the random coefficients).
    cov : (N, 3, 3) ndarray
        Cofactor of each georeferenced coordinate triple.
    targets : (N, 3) ndarray
        Surveyed coordinates of the control point each observation hits.
    target_sigmas : (N,) ndarray
        Survey standard deviation per observation's control point.
    center : (3,) array_like, optional
        Origin shift applied to both coordinate sets for conditioning.

    Returns
    -------
    EivProblem
        ``phi`` is laid out as ``[M[0], t[0], M[1], t[1], M[2], t[2]]``.
    """
    coords = np.asarray(coords, dtype=float).reshape(-1, 3)
    targets = np.asarray(targets, dtype=float).reshape(-1, 3)
    n_obs = coords.shape[0]
    center = np.zeros(3) if center is None else np.asarray(center, dtype=float)
    m = 3 * n_obs
    k = 3 * n_obs
    rows = np.arange(m)
    comp = rows % 3

    h = np.zeros(m * N_AFFINE)
    h[(4 * comp + 3) * m + rows] = 1.0

    # a[3j + l] sits at A[3j + c, 4c + l] for every output component c
    b_rows, b_cols = [], []
    for c in range(3):
        for lidx in range(3):
            r = 3 * np.arange(n_obs) + c
            b_rows.append((4 * c + lidx) * m + r)
            b_cols.append(3 * np.arange(n_obs) + lidx)
    b_rows = np.concatenate(b_rows)
    b_cols = np.concatenate(b_cols)
    b_mat = sp.csr_matrix((np.ones(b_rows.size), (b_rows, b_cols)), shape=(m * N_AFFINE, k))

    q_a = np.zeros((k, k))
    cov = np.asarray(cov, dtype=float).reshape(n_obs, 3, 3)
    for j in range(n_obs):
        q_a[3 * j:3 * j + 3, 3 * j:3 * j + 3] = 0.5 * (cov[j] + cov[j].T)
    sig = np.repeat(np.asarray(target_sigmas, dtype=float).reshape(n_obs), 3)
    q_p = np.diag(sig ** 2)
    return EivProblem(
        p=(targets - center).reshape(-1),
        h=h,
        b_mat=b_mat,
        a=(coords - center).reshape(-1),
        q_p=q_p,
        q_a=q_a,
        n=N_AFFINE,
    )


def affine_from_phi(phi):
    """Split the parameter vector into ``(M, t)``."""
    phi = np.asarray(phi, dtype=float).reshape(3, 4)
    return phi[:, :3].copy(), phi[:, 3].copy()


def combine_observations(values, covs, robust=False, k0=1.5, k1=2.5, max_iter=50):
    """Generalized-least-squares mean of repeated 3-D estimates of one point.

    With ``robust=True`` each observation gets an IGG-III weight from its
    standardized Mahalanobis residual, starting from the coordinate-wise
    median so a large outlier share cannot anchor the first estimate.

    Returns
    -------
    estimate : (3,) ndarray
    cofactor : (3, 3) ndarray
    weights : (N,) ndarray
    """
    values = np.asarray(values, dtype=float).reshape(-1, 3)
    covs = np.asarray(covs, dtype=float).reshape(-1, 3, 3)
    inv_covs = np.linalg.inv(covs)
    weights = np.ones(values.shape[0])

    def gls(w):
        w = np.maximum(w, 1e-8)[:, None, None]
        info = (w * inv_covs).sum(axis=0)
        rhs = np.einsum("nij,nj->i", w * inv_covs, values)
        q_hat = np.linalg.inv(info)
        return q_hat @ rhs, q_hat

    est, q_hat = gls(weights)
    if robust and values.shape[0] >= 3:
        est = np.median(values, axis=0)
        for _ in range(max_iter):
            r = values - est
            u = np.sqrt(np.einsum("ni,nij,nj->n", r, inv_covs, r) / 3.0)
            scale = np.median(u) / _CHI3_MEDIAN_SCALE
            if not scale > 0.0:
                break
            new_w = igg3_weights(u / scale, k0, k1)
            new_est, new_q = gls(new_w)
            done = np.max(np.abs(new_est - est)) < 1e-12
            est, q_hat, weights = new_est, new_q, new_w
            if done:
                break
    return est, q_hat, weights


def _regularized(cov):
    """Lift a rank-deficient propagated covariance to positive definite.

    Georeferencing noise can leave a direction unexcited (a zero noise model
    leaves every direction unexcited); a relative floor of ``1e-12`` of the
    largest variance keeps the cofactor invertible without moving the
    estimate at working precision.
    """
    top = float(np.max(np.einsum("nii->n", cov))) if cov.size else 0.0
    floor = 1e-12 * top if top > 0.0 else _EXACT_COFACTOR
    return cov + floor * np.eye(3)


@dataclass
class AdjustmentResult:
    method: str
    boresight: BoresightParams
    phi: np.ndarray
    solution: object
    point_ids: list
    used_ids: list
    estimates: np.ndarray
    estimate_sigmas: np.ndarray
    errors_cm: np.ndarray
    reports: dict = field(default_factory=dict)

    @property
    def axis_errors(self):
        """``(e_N, e_E, e_U)`` in centimetres, one entry per control point."""
        return self.errors_cm[:, 1], self.errors_cm[:, 0], self.errors_cm[:, 2]

    @property
    def rms_3d(self):
        return float(np.sqrt(np.mean(np.sum(self.errors_cm ** 2, axis=1))))


def adjust(data, method, boresight, control_sigmas, subset=None, solver_options=None,
           evaluate_ids=None, reference=None, sigma0_h=2.0, sigma0_v=3.0, alpha=0.05):
    """Adjust the campaign with one method and score it against the survey.

    Parameters
    ----------
    data : CalibrationDataset
    method : {"LS", "TLS", "RWTLS", "RWTLS-FIMLOE"}
    boresight : BoresightParams
        Mounting used for georeferencing (the calibration for RWTLS-FIMLOE,
        the nominal one otherwise).
    control_sigmas : dict
        Survey standard deviation (m) per control point id.
    subset : sequence of str, optional
        Control points used as constraints; all observed points by default.
    evaluate_ids : sequence of str, optional
        Points scored against the survey; every control point by default.
    reference : dict, optional
        Coordinates the estimates are scored against; the surveyed control
        points by default.  Simulations pass the error-free layout here.
    """
    if method not in METHODS:
        raise ConfigurationError(f"unknown method {method!r}; choose from {METHODS}")
    base = SolverOptions() if solver_options is None else solver_options
    opts = SolverOptions(base.eps0, base.max_iterations, method in ("RWTLS", "RWTLS-FIMLOE"),
                         base.k0, base.k1)

    observed = data.observed_ids
    used_ids = observed if subset is None else sorted(str(i) for i in subset)
    missing = set(used_ids) - set(data.control_points)
    if missing:
        raise ConfigurationError(f"subset references unknown control points: {sorted(missing)}")
    eval_ids = sorted(data.control_points) if evaluate_ids is None else list(evaluate_ids)
    unseen = sorted(set(eval_ids) - set(observed))
    if unseen:
        raise InvalidInputError(f"control points never observed: {unseen}")

    coords = data.georeference(boresight)
    cov = _regularized(observation_covariances(data, boresight))
    ids = np.array(data.point_ids)
    used_mask = np.isin(ids, used_ids)
    if not used_mask.any():
        raise ConfigurationError("no observations of the selected control points")
    sig_obs = np.array([control_sigmas[i] for i in data.point_ids], dtype=float)
    if not np.any(sig_obs > 0.0):
        sig_obs = np.full(sig_obs.shape, np.sqrt(_EXACT_COFACTOR))
    targets = data.targets
    center = np.mean([data.control_points[i] for i in used_ids], axis=0)

    prob = build_affine_problem(coords[used_mask], cov[used_mask], targets[used_mask],
                                sig_obs[used_mask], center)
    if method == "LS":
        prob = prob.with_fixed_coefficients()
    sol = solve(prob, opts)
    mat, t = affine_from_phi(sol.phi_hat)
    adjusted = (coords - center) @ mat.T + t + center

    if method == "LS":
        obs_cov = np.broadcast_to(np.eye(3), cov.shape) * (sig_obs ** 2)[:, None, None]
    else:
        obs_cov = np.einsum("ij,njk,lk->nil", mat, cov, mat) \
            + np.eye(3) * (sig_obs ** 2)[:, None, None]

    estimates, sigmas = [], []
    for pid in eval_ids:
        sel = ids == pid
        est, q_hat, _ = combine_observations(adjusted[sel], obs_cov[sel], robust=opts.robust,
                                             k0=opts.k0, k1=opts.k1)
        estimates.append(est)
        sigmas.append(np.sqrt(np.trace(q_hat) / 3.0))
    estimates = np.array(estimates)
    reference = data.control_points if reference is None else reference
    truth = np.array([reference[i] for i in eval_ids])
    errors = (estimates - truth) * _METERS_TO_CM

    result = AdjustmentResult(
        method=method, boresight=boresight, phi=sol.phi_hat, solution=sol,
        point_ids=eval_ids, used_ids=used_ids, estimates=estimates,
        estimate_sigmas=np.array(sigmas), errors_cm=errors,
    )
    if len(eval_ids) >= 2:
        result.reports = compare_methods({method: result.axis_errors}, sigma0_h, sigma0_v,
                                         alpha)["reports"][method]
    return result


def run_methods(data, control_sigmas, methods=METHODS, nominal=None, calibration=None,
                subset=None, solver_options=None, calibrator_options=None, psi0=None, **kw):
    """Run several methods on the same campaign (paired comparison).

    RWTLS-FIMLOE calibrates on the observations of ``subset`` unless a
    ``calibration`` result is supplied.

    Returns
    -------
    results : dict
        ``{method: AdjustmentResult}``
    calibration : CalibrationResult or None
    """
    nominal = BoresightParams() if nominal is None else nominal
    results = {}
    for method in methods:
        if method == "RWTLS-FIMLOE":
            if calibration is None:
                cal_data = data if subset is None else data.select(point_ids=subset)
                calibration = calibrate(cal_data, psi0,
                                        calibrator_options or CalibratorOptions())
            if not isinstance(calibration, CalibrationResult):
                raise ConfigurationError("RWTLS-FIMLOE needs a calibration result")
            b = calibration.psi_hat
        else:
            b = nominal
        results[method] = adjust(data, method, b, control_sigmas, subset=subset,
                                 solver_options=solver_options, **kw)
    return results, calibration
