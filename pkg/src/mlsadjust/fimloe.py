"""Maximum-likelihood calibration of the scanner mounting parameters.

With independent Gaussian errors on every measurement channel, maximizing
the likelihood of the control-point observations is a weighted nonlinear
least-squares problem in the 9-entry alignment vector

    psi = [omega, phi, kappa, lever_x, lever_y, lever_z, mirror_x, mirror_y, mirror_z]

The lever arm and mirror offset enter the georeferencing equation only through
``R_b @ mirror + lever``, so the data alone cannot separate them.  The mirror
offset is therefore tied to its nominal (manufacturer) value through a
Gaussian prior with a small standard deviation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import (
    DegenerateGeometryError,
    InvalidInputError,
    UnderdeterminedError,
    UnidentifiableGeometryError,
)
from .frames import (
    BoresightParams,
    LaserObservation,
    Pose,
    georeference,
    georeference_batch,
    georeference_jacobian_batch,
    wrap_angle,
)

__all__ = [
    "PSI_NAMES",
    "AlignmentVector",
    "NoiseModel",
    "CalibrationDataset",
    "CalibratorOptions",
    "CalibrationResult",
    "residual",
    "residuals",
    "observation_covariances",
    "residual_weights",
    "linearize",
    "calibrate",
    "BoresightCalibrator",
]

PSI_NAMES = (
    "omega", "phi", "kappa",
    "lever_x", "lever_y", "lever_z",
    "mirror_x", "mirror_y", "mirror_z",
)
_ANGLE_STEP = 1e-7
_LENGTH_STEP = 1e-6
_STEPS = np.array([_ANGLE_STEP] * 3 + [_LENGTH_STEP] * 6)

# The alignment vector shares its layout with BoresightParams.to_vector().
AlignmentVector = BoresightParams


@dataclass(frozen=True)
class NoiseModel:
    """Per-channel 1-sigma noise (radians and metres)."""

    sigma_range: float = 0.002
    sigma_scan_angle: float = np.deg2rad(0.01)
    sigma_roll_pitch: float = np.deg2rad(0.008)
    sigma_heading: float = np.deg2rad(0.012)
    sigma_position: float = 0.01

    def __post_init__(self):
        for name in ("sigma_range", "sigma_scan_angle", "sigma_roll_pitch",
                     "sigma_heading", "sigma_position"):
            v = float(getattr(self, name))
            if not (np.isfinite(v) and v >= 0):
                raise InvalidInputError(f"{name} must be finite and non-negative")
            object.__setattr__(self, name, v)

    def channel_variances(self):
        """Variances ordered like the columns of the measurement Jacobian."""
        sa = self.sigma_scan_angle
        return np.array([
            self.sigma_range, sa, sa,
            self.sigma_roll_pitch, self.sigma_roll_pitch, self.sigma_heading,
            self.sigma_position, self.sigma_position, self.sigma_position,
        ]) ** 2


@dataclass
class CalibrationDataset:
    """Laser observations of surveyed control points with their IMU poses.

    Observations are stored column-wise; ``point_ids[j]`` names the control
    point hit by observation ``j``.  ``positions`` and ``attitudes`` hold the
    IMU pose at each observation time.
    """

    t: np.ndarray
    rho: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    positions: np.ndarray
    attitudes: np.ndarray
    point_ids: list
    control_points: dict
    noise_model: NoiseModel = field(default_factory=NoiseModel)

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float).reshape(-1)
        n = self.t.size
        self.rho = np.asarray(self.rho, dtype=float).reshape(n)
        self.alpha = np.asarray(self.alpha, dtype=float).reshape(n)
        self.beta = np.asarray(self.beta, dtype=float).reshape(n)
        self.positions = np.asarray(self.positions, dtype=float).reshape(n, 3)
        self.attitudes = np.asarray(self.attitudes, dtype=float).reshape(n, 3)
        self.point_ids = [str(i) for i in self.point_ids]
        if len(self.point_ids) != n:
            raise InvalidInputError("point_ids must name one control point per observation")
        self.control_points = {
            str(k): np.asarray(v, dtype=float).reshape(3) for k, v in self.control_points.items()
        }
        missing = sorted(set(self.point_ids) - set(self.control_points))
        if missing:
            raise InvalidInputError(f"observations reference unknown control points: {missing}")

    def __len__(self):
        return self.t.size

    @classmethod
    def from_records(cls, records, control_points, noise_model=None):
        """Build from ``(LaserObservation, Pose, point_id)`` triples."""
        records = list(records)
        return cls(
            t=[o.t for o, _, _ in records],
            rho=[o.rho for o, _, _ in records],
            alpha=[o.alpha for o, _, _ in records],
            beta=[o.beta for o, _, _ in records],
            positions=np.array([p.position for _, p, _ in records]).reshape(-1, 3),
            attitudes=np.array([p.attitude.as_array() for _, p, _ in records]).reshape(-1, 3),
            point_ids=[i for _, _, i in records],
            control_points=control_points,
            noise_model=noise_model or NoiseModel(),
        )

    def records(self):
        """Iterate ``(LaserObservation, Pose, point_id)`` triples."""
        for j in range(len(self)):
            obs = LaserObservation(self.t[j], self.rho[j], self.alpha[j], self.beta[j])
            pose = Pose(self.t[j], self.positions[j], self.attitudes[j])
            yield obs, pose, self.point_ids[j]

    @property
    def targets(self):
        return np.array([self.control_points[i] for i in self.point_ids]).reshape(-1, 3)

    @property
    def observed_ids(self):
        return sorted(set(self.point_ids))

    def take(self, index):
        index = np.asarray(index)
        if index.dtype == bool:
            index = np.flatnonzero(index)
        return CalibrationDataset(
            t=self.t[index], rho=self.rho[index], alpha=self.alpha[index],
            beta=self.beta[index], positions=self.positions[index],
            attitudes=self.attitudes[index],
            point_ids=[self.point_ids[j] for j in index],
            control_points=self.control_points, noise_model=self.noise_model,
        )

    def select(self, point_ids=None, time_range=None):
        """Subset of observations by control point and/or time window."""
        mask = np.ones(len(self), dtype=bool)
        if point_ids is not None:
            wanted = {str(i) for i in point_ids}
            unknown = wanted - set(self.control_points)
            if unknown:
                raise InvalidInputError(f"unknown control point ids: {sorted(unknown)}")
            mask &= np.array([i in wanted for i in self.point_ids], dtype=bool)
        if time_range is not None:
            lo, hi = time_range
            mask &= (self.t >= lo) & (self.t <= hi)
        return self.take(mask)

    def georeference(self, b):
        return georeference_batch(self.rho, self.alpha, self.beta, self.positions,
                                  self.attitudes, b)


@dataclass
class CalibratorOptions:
    lambda0: float = 1e-3
    lambda_max: float = 1e10
    gtol: float = 1e-10
    xtol: float = 1e-12
    # relative predicted cost decrease below which the optimum is at round-off
    ftol: float = 1e-14
    max_iterations: int = 100
    mirror_offset_nominal: np.ndarray = field(default_factory=lambda: np.zeros(3))
    # None disables the prior and leaves the offset/lever split to the damping.
    mirror_offset_sigma: float = 1e-3
    rank_tol: float = 1e-12


@dataclass
class CalibrationResult:
    psi_hat: BoresightParams
    covariance: np.ndarray
    residuals: np.ndarray
    iterations: int
    converged: bool
    neg_log_likelihood: float
    cost: float
    initial_cost: float
    gradient_norm: float
    cost_history: list = field(default_factory=list)
    n_observations: int = 0
    # "gtol", "xtol" or "ftol" when converged, else "max_iterations" or "no_descent"
    termination: str = ""

    @property
    def psi_vector(self):
        return self.psi_hat.to_vector()


def residual(obs, pose, psi, target):
    """World-frame misclosure of one observation against its control point."""
    return georeference(obs, pose, psi) - np.asarray(target, dtype=float)


def residuals(psi, data):
    """Stacked (N, 3) misclosures for every observation in ``data``."""
    b = psi if isinstance(psi, BoresightParams) else BoresightParams.from_vector(psi)
    return data.georeference(b) - data.targets


def observation_covariances(data, b, noise=None):
    """First-order world-frame covariance of every georeferenced observation.

    Returns an (N, 3, 3) array built from the range, scan-angle, attitude and
    position noise of ``noise`` (defaults to ``data.noise_model``).
    """
    noise = data.noise_model if noise is None else noise
    jac = georeference_jacobian_batch(data.rho, data.alpha, data.beta, data.positions,
                                      data.attitudes, b)
    var = noise.channel_variances()
    return np.einsum("nik,k,njk->nij", jac, var, jac)


def residual_weights(data, b, noise=None):
    """Diagonal inverse-variance weights, shape (N, 3).

    An all-zero noise model (exact synthetic data) gives unit weights.
    """
    cov = observation_covariances(data, b, noise)
    var = np.einsum("nii->ni", cov)
    top = float(np.max(var)) if var.size else 0.0
    if top <= 0.0:
        return np.ones_like(var)
    return 1.0 / np.maximum(var, 1e-12 * top)


def _raw_residuals(vec, data):
    b = BoresightParams(vec[0], vec[1], vec[2], vec[3:6], vec[6:9])
    return (data.georeference(b) - data.targets).reshape(-1)


def linearize(psi_nominal, data):
    """Residual vector and 9-column Jacobian at ``psi_nominal``.

    The Jacobian is taken by central differences (1e-7 rad, 1e-6 m).

    Returns
    -------
    r : (3N,) ndarray
        Stacked ``georeferenced - surveyed`` misclosures.
    H : (3N, 9) ndarray
    """
    psi = psi_nominal.to_vector() if isinstance(psi_nominal, BoresightParams) \
        else np.asarray(psi_nominal, dtype=float)
    r = _raw_residuals(psi, data)
    bad = ~np.isfinite(r.reshape(-1, 3)).all(axis=1)
    if np.any(bad):
        j = int(np.flatnonzero(bad)[0])
        raise DegenerateGeometryError(f"non-finite residual for observation {j} (t={data.t[j]!r})")
    jac = np.empty((r.size, 9))
    for col in range(9):
        step = np.zeros(9)
        step[col] = _STEPS[col]
        jac[:, col] = (_raw_residuals(psi + step, data) - _raw_residuals(psi - step, data)) \
            / (2.0 * _STEPS[col])
    if not np.all(np.isfinite(jac)):
        raise DegenerateGeometryError("non-finite Jacobian entries")
    return r, jac


class _Objective:
    """Weighted cost with the optional mirror-offset prior rows appended."""

    def __init__(self, data, weights, opts):
        self.data = data
        self.w = weights.reshape(-1)
        self.opts = opts
        self.prior = opts.mirror_offset_sigma is not None
        if self.prior:
            if not opts.mirror_offset_sigma > 0:
                raise InvalidInputError("mirror_offset_sigma must be positive or None")
            self.nominal = np.asarray(opts.mirror_offset_nominal, dtype=float).reshape(3)

    def prior_residual(self, psi):
        return (psi[6:9] - self.nominal) / self.opts.mirror_offset_sigma

    def cost(self, psi, r=None):
        r = _raw_residuals(psi, self.data) if r is None else r
        c = float(np.sum(self.w * r * r))
        if self.prior:
            pr = self.prior_residual(psi)
            c += float(pr @ pr)
        return c

    def normal(self, psi, r, jac):
        wj = jac * self.w[:, None]
        n_mat = jac.T @ wj
        g = wj.T @ r
        if self.prior:
            inv = 1.0 / self.opts.mirror_offset_sigma
            n_mat[6:9, 6:9] += np.eye(3) * inv ** 2
            g[6:9] += self.prior_residual(psi) * inv
        return 0.5 * (n_mat + n_mat.T), g


def _check_identifiable(n_mat, tol):
    d = np.sqrt(np.diag(n_mat))
    if np.any(d == 0):
        names = [PSI_NAMES[i] for i in np.flatnonzero(d == 0)]
        raise UnidentifiableGeometryError(f"parameters without any sensitivity: {names}")
    scaled = n_mat / np.outer(d, d)
    ev = np.linalg.eigvalsh(scaled)
    if ev[0] <= tol * ev[-1]:
        raise UnidentifiableGeometryError(
            f"normal matrix is rank deficient (condition {ev[-1] / max(ev[0], 1e-300):.3g}); "
            "control-point geometry does not determine the alignment"
        )


def calibrate(data, psi0=None, opts=None):
    """Estimate the alignment vector by damped Gauss-Newton.

    Parameters
    ----------
    data : CalibrationDataset
    psi0 : BoresightParams, optional
        Starting point, zeros by default.
    opts : CalibratorOptions, optional

    Raises
    ------
    UnderdeterminedError
        Fewer than two control points or fewer than nine residual equations.
    UnidentifiableGeometryError
        The normal matrix at ``psi0`` is numerically singular.
    """
    opts = CalibratorOptions() if opts is None else opts
    psi0 = BoresightParams() if psi0 is None else psi0
    n_points = len(data.observed_ids)
    if n_points < 2:
        raise UnderdeterminedError(
            f"observations cover {n_points} control point(s); at least 2 are required"
        )
    if 3 * len(data) < 9:
        raise UnderdeterminedError(f"{3 * len(data)} residual equations for 9 unknowns")

    # a canonical order fixes every accumulation, so results ignore input order
    order = np.lexsort((data.beta, data.alpha, data.rho, np.array(data.point_ids), data.t))
    data = data.take(order)
    weights = residual_weights(data, psi0)
    obj = _Objective(data, weights, opts)
    psi = psi0.to_vector()
    r, jac = linearize(psi, data)
    cost = obj.cost(psi, r)
    initial_cost = cost
    n_mat, g = obj.normal(psi, r, jac)
    _check_identifiable(n_mat, opts.rank_tol)

    lam = opts.lambda0
    history = [cost]
    converged = False
    termination = "max_iterations"
    iterations = 0
    for iterations in range(1, opts.max_iterations + 1):
        if np.max(np.abs(g)) < opts.gtol:
            converged, termination = True, "gtol"
            break
        accepted = False
        while lam <= opts.lambda_max:
            try:
                step = -np.linalg.solve(n_mat + lam * np.eye(9), g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            predicted = -(2.0 * g @ step + step @ n_mat @ step)
            if np.linalg.norm(step) < opts.xtol:
                converged, termination = True, "xtol"
                break
            if predicted <= opts.ftol * cost:
                converged, termination = True, "ftol"
                break
            cand = psi + step
            cand[:3] = wrap_angle(cand[:3])
            r_c = _raw_residuals(cand, data)
            cost_c = obj.cost(cand, r_c) if np.all(np.isfinite(r_c)) else np.inf
            if cost_c <= cost:
                psi = cand
                cost = cost_c
                lam = max(lam / 10.0, 1e-12)
                accepted = True
                break
            lam *= 10.0
        if converged:
            break
        if not accepted:
            termination = "no_descent"
            break
        history.append(cost)
        r, jac = linearize(psi, data)
        n_mat, g = obj.normal(psi, r, jac)

    n_res = r.size + (3 if obj.prior else 0)
    dof = max(n_res - 9, 1)
    try:
        cov = np.linalg.inv(n_mat) * (cost / dof)
    except np.linalg.LinAlgError:
        cov = np.full((9, 9), np.nan)
    cov = 0.5 * (cov + cov.T)
    var = 1.0 / weights.reshape(-1)
    nll = 0.5 * cost + 0.5 * float(np.sum(np.log(2.0 * np.pi * var)))
    return CalibrationResult(
        psi_hat=BoresightParams.from_vector(psi),
        covariance=cov,
        residuals=r.reshape(-1, 3)[np.argsort(order)],
        iterations=iterations,
        converged=converged,
        neg_log_likelihood=nll,
        cost=cost,
        initial_cost=initial_cost,
        gradient_norm=float(np.max(np.abs(g))),
        cost_history=history,
        n_observations=len(data),
        termination=termination,
    )


class BoresightCalibrator(TransformerMixin, BaseEstimator):
    """Estimator interface to :func:`calibrate`.

    ``fit`` estimates the alignment from a :class:`CalibrationDataset`;
    ``transform`` georeferences a dataset with the fitted alignment.
    """

    def __init__(self, psi0=None, lambda0=1e-3, gtol=1e-10, xtol=1e-12, ftol=1e-14,
                 max_iterations=100, mirror_offset_nominal=(0.0, 0.0, 0.0),
                 mirror_offset_sigma=1e-3):
        self.psi0 = psi0
        self.lambda0 = lambda0
        self.gtol = gtol
        self.xtol = xtol
        self.ftol = ftol
        self.max_iterations = max_iterations
        self.mirror_offset_nominal = mirror_offset_nominal
        self.mirror_offset_sigma = mirror_offset_sigma

    def _options(self):
        return CalibratorOptions(
            lambda0=self.lambda0, gtol=self.gtol, xtol=self.xtol, ftol=self.ftol,
            max_iterations=self.max_iterations,
            mirror_offset_nominal=np.asarray(self.mirror_offset_nominal, dtype=float),
            mirror_offset_sigma=self.mirror_offset_sigma,
        )

    def fit(self, data, y=None):
        if not isinstance(data, CalibrationDataset):
            raise InvalidInputError("fit expects a CalibrationDataset")
        self.result_ = calibrate(data, self.psi0, self._options())
        self.psi_ = self.result_.psi_hat
        self.covariance_ = self.result_.covariance
        self.n_iter_ = self.result_.iterations
        return self

    def transform(self, data):
        check_is_fitted(self, "psi_")
        return data.georeference(self.psi_)
