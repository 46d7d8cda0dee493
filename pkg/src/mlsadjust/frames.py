"""Coordinate frames and direct georeferencing of polar laser measurements.

Three frames are involved: the world frame {W} (local level, ENU), the IMU
body frame {I} and the laser scanner frame {L}.  A polar measurement
(range, vertical angle, horizontal angle) is mapped into {W} by

    P_W = R_x(tx) R_y(ty) R_z(tz) N (R_b P_L + T_LI) + T_IW

with ``N`` the constant NED to ENU swap, ``R_b`` the boresight rotation and
``P_L`` the scanner-frame point including the mirror-centre offset.

Every angle is in radians and every length in metres.  Scalar helpers work on
the small dataclasses below; the ``*_batch`` functions operate on arrays of
observations and are what the simulator and the calibrator use.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import DegenerateGeometryError, InvalidInputError, OutOfRangeError

__all__ = [
    "MAX_RANGE",
    "EulerAttitude",
    "Rotation",
    "Pose",
    "LaserObservation",
    "BoresightParams",
    "PHI_NAMES",
    "wrap_angle",
    "rotation_about_axis",
    "ned_to_enu",
    "boresight_rotation",
    "polar_to_scanner",
    "georeference",
    "invert_georeference",
    "observation_parameter_vector",
    "georeference_vector",
    "attitude_matrices",
    "rotation_matrix_xyz",
    "georeference_batch",
    "invert_georeference_batch",
    "georeference_jacobian_batch",
]

MAX_RANGE = 200.0
_TIME_TOL = 1e-9
# targets closer than this to the scanner origin have no defined direction
_ORIGIN_TOL = 1e-9

NED_TO_ENU = np.array([[0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, -1.0]])

PHI_NAMES = (
    "theta_x", "theta_y", "theta_z",
    "omega", "phi", "kappa",
    "rho", "alpha", "beta",
    "mirror_x", "mirror_y", "mirror_z",
    "lever_x", "lever_y", "lever_z",
    "pos_x", "pos_y", "pos_z",
)


def wrap_angle(angle):
    """Wrap angles to the half-open interval (-pi, pi]."""
    a = np.asarray(angle, dtype=float)
    out = np.pi - np.mod(np.pi - a, 2.0 * np.pi)
    if out.ndim == 0:
        return float(out)
    return out


def _finite_vector(v, name, size=3):
    arr = np.asarray(v, dtype=float).reshape(-1)
    if arr.shape != (size,):
        raise InvalidInputError(f"{name} must have {size} components, got shape {np.shape(v)}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} must be finite")
    return arr


@dataclass(frozen=True)
class EulerAttitude:
    """Attitude as three axis-named angles (radians)."""

    theta_x: float = 0.0
    theta_y: float = 0.0
    theta_z: float = 0.0

    def __post_init__(self):
        for name in ("theta_x", "theta_y", "theta_z"):
            value = float(getattr(self, name))
            if not np.isfinite(value):
                raise InvalidInputError(f"{name} must be finite")
            object.__setattr__(self, name, wrap_angle(value))

    def as_array(self):
        return np.array([self.theta_x, self.theta_y, self.theta_z])

    def matrix(self):
        return rotation_matrix_xyz(self.theta_x, self.theta_y, self.theta_z)


@dataclass(frozen=True, eq=False)
class Rotation:
    """A 3x3 orthonormal matrix.

    Proper and improper orthonormal matrices are both representable;
    anything else is rejected.
    """

    m: np.ndarray

    def __post_init__(self):
        m = np.array(self.m, dtype=float)
        if m.shape != (3, 3) or not np.all(np.isfinite(m)):
            raise InvalidInputError("rotation must be a finite 3x3 matrix")
        if np.max(np.abs(m.T @ m - np.eye(3))) >= 1e-12:
            raise InvalidInputError("rotation matrix is not orthonormal")
        if abs(abs(np.linalg.det(m)) - 1.0) >= 1e-12:
            raise InvalidInputError("rotation determinant must be +1 or -1")
        m.setflags(write=False)
        object.__setattr__(self, "m", m)

    @property
    def det(self):
        return float(np.linalg.det(self.m))

    def apply(self, v):
        return self.m @ np.asarray(v, dtype=float)

    def __matmul__(self, other):
        if isinstance(other, Rotation):
            return Rotation(self.m @ other.m)
        return self.m @ np.asarray(other, dtype=float)

    def __eq__(self, other):
        return isinstance(other, Rotation) and np.array_equal(self.m, other.m)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class Pose:
    """IMU body pose in the world frame at time ``t``."""

    t: float
    position: np.ndarray
    attitude: EulerAttitude = field(default_factory=EulerAttitude)

    def __post_init__(self):
        if not np.isfinite(self.t):
            raise InvalidInputError("pose time must be finite")
        object.__setattr__(self, "t", float(self.t))
        object.__setattr__(self, "position", _finite_vector(self.position, "position"))
        if not isinstance(self.attitude, EulerAttitude):
            object.__setattr__(self, "attitude", EulerAttitude(*self.attitude))

    def __eq__(self, other):
        return (
            isinstance(other, Pose)
            and self.t == other.t
            and np.array_equal(self.position, other.position)
            and self.attitude == other.attitude
        )

    __hash__ = None


@dataclass(frozen=True)
class LaserObservation:
    """One polar laser return.

    ``beta`` is folded into [0, 2*pi); ``rho`` must lie in (0, max_range]
    and ``alpha`` in [-pi/2, pi/2].
    """

    t: float
    rho: float
    alpha: float
    beta: float
    max_range: float = MAX_RANGE

    def __post_init__(self):
        values = [float(v) for v in (self.t, self.rho, self.alpha, self.beta)]
        if not all(np.isfinite(values)):
            raise InvalidInputError("laser observation fields must be finite")
        t, rho, alpha, beta = values
        if not 0.0 < rho <= self.max_range:
            raise OutOfRangeError(f"range {rho!r} m outside (0, {self.max_range}]")
        if abs(alpha) > np.pi / 2:
            raise InvalidInputError(f"vertical angle {alpha!r} outside [-pi/2, pi/2]")
        beta = float(np.mod(beta, 2.0 * np.pi))
        if beta >= 2.0 * np.pi:
            beta = 0.0
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "rho", rho)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "beta", beta)


@dataclass(frozen=True, eq=False)
class BoresightParams:
    """Scanner mounting parameters.

    Boresight angles (``omega``, ``phi``, ``kappa``) rotate about X, Y and Z
    of the scanner frame respectively.  ``lever_arm`` is the scanner origin
    expressed in the IMU frame and ``mirror_offset`` the mirror centre in the
    scanner frame.  ``to_vector`` / ``from_vector`` use the 9-entry layout
    ``[omega, phi, kappa, lever(3), mirror(3)]``.
    """

    omega: float = 0.0
    phi: float = 0.0
    kappa: float = 0.0
    lever_arm: np.ndarray = field(default_factory=lambda: np.zeros(3))
    mirror_offset: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        for name in ("omega", "phi", "kappa"):
            value = float(getattr(self, name))
            if not np.isfinite(value):
                raise InvalidInputError(f"{name} must be finite")
            object.__setattr__(self, name, wrap_angle(value))
        object.__setattr__(self, "lever_arm", _finite_vector(self.lever_arm, "lever_arm"))
        object.__setattr__(
            self, "mirror_offset", _finite_vector(self.mirror_offset, "mirror_offset")
        )

    @property
    def angles(self):
        return np.array([self.omega, self.phi, self.kappa])

    def to_vector(self):
        return np.concatenate([self.angles, self.lever_arm, self.mirror_offset])

    @classmethod
    def from_vector(cls, v):
        v = _finite_vector(v, "alignment vector", size=9)
        return cls(v[0], v[1], v[2], v[3:6], v[6:9])

    def __eq__(self, other):
        return isinstance(other, BoresightParams) and np.array_equal(
            self.to_vector(), other.to_vector()
        )

    __hash__ = None


# --- elementary rotations ------------------------------------------------------

def _rx(c, s):
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _ry(c, s):
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rz(c, s):
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


_TEMPLATES = {"X": _rx, "Y": _ry, "Z": _rz}


def rotation_about_axis(axis, angle):
    """Elementary right-handed rotation about ``axis`` ('X', 'Y' or 'Z')."""
    key = str(axis).upper()
    if key not in _TEMPLATES:
        raise InvalidInputError(f"unknown axis {axis!r}")
    angle = float(angle)
    if not np.isfinite(angle):
        raise InvalidInputError("rotation angle must be finite")
    return Rotation(_TEMPLATES[key](np.cos(angle), np.sin(angle)))


def ned_to_enu():
    """The constant NED to ENU axis swap.

    The x/y swap and the z sign flip are two reflections, so the matrix is an
    involution with determinant +1 (a half turn about (1, 1, 0)).
    """
    return Rotation(NED_TO_ENU)


def rotation_matrix_xyz(ax, ay, az):
    """Return ``R_x(ax) @ R_y(ay) @ R_z(az)`` as a plain array."""
    return (
        _rx(np.cos(ax), np.sin(ax))
        @ _ry(np.cos(ay), np.sin(ay))
        @ _rz(np.cos(az), np.sin(az))
    )


def boresight_rotation(b):
    """Scanner-to-IMU rotation built as ``R_x(omega) R_y(phi) R_z(kappa)``."""
    return Rotation(rotation_matrix_xyz(b.omega, b.phi, b.kappa))


def polar_to_scanner(obs, mirror_offset):
    """Scanner-frame Cartesian point of a polar observation."""
    off = _finite_vector(mirror_offset, "mirror_offset")
    ca = np.cos(obs.alpha)
    return off + obs.rho * np.array(
        [ca * np.sin(obs.beta), ca * np.cos(obs.beta), np.sin(obs.alpha)]
    )


def georeference(obs, pose, b):
    """World coordinates of a laser observation taken at ``pose``.

    Raises
    ------
    InvalidInputError
        If the observation and pose timestamps differ by more than 1 ns.
    """
    if abs(obs.t - pose.t) > _TIME_TOL:
        raise InvalidInputError(
            f"observation time {obs.t!r} does not match pose time {pose.t!r}"
        )
    p_l = polar_to_scanner(obs, b.mirror_offset)
    bracket = boresight_rotation(b).m @ p_l + b.lever_arm
    return pose.attitude.matrix() @ (NED_TO_ENU @ bracket) + pose.position


def invert_georeference(world_point, pose, b, max_range=MAX_RANGE, return_flag=False):
    """Polar observation that georeferences exactly onto ``world_point``.

    When the target lies on the scanner's vertical axis the horizontal angle
    is undefined; it is returned as 0 and, with ``return_flag=True``, the
    second return value is True.
    """
    w = _finite_vector(world_point, "world_point")
    rho, alpha, beta, singular = invert_georeference_batch(
        w[None, :], pose.position[None, :], pose.attitude.as_array()[None, :], b,
        max_range=max_range,
    )
    obs = LaserObservation(pose.t, rho[0], alpha[0], beta[0], max_range=max_range)
    if return_flag:
        return obs, bool(singular[0])
    return obs


def observation_parameter_vector(obs, pose, b):
    """The 18-entry parameter vector in the order given by ``PHI_NAMES``."""
    return np.concatenate(
        [
            pose.attitude.as_array(),
            b.angles,
            [obs.rho, obs.alpha, obs.beta],
            b.mirror_offset,
            b.lever_arm,
            pose.position,
        ]
    )


def georeference_vector(phi):
    """Evaluate the georeferencing equation directly on an 18-vector.

    Angles are not wrapped, which keeps the map smooth for finite-difference
    work.
    """
    phi = np.asarray(phi, dtype=float)
    if phi.shape != (18,):
        raise InvalidInputError("parameter vector must have 18 entries")
    r_pose = rotation_matrix_xyz(*phi[0:3])
    r_b = rotation_matrix_xyz(*phi[3:6])
    rho, alpha, beta = phi[6:9]
    p_l = phi[9:12] + rho * np.array(
        [np.cos(alpha) * np.sin(beta), np.cos(alpha) * np.cos(beta), np.sin(alpha)]
    )
    return r_pose @ (NED_TO_ENU @ (r_b @ p_l + phi[12:15])) + phi[15:18]


# --- batch versions --------------------------------------------------------------

def _apply(mat, v):
    """Row-wise ``mat @ v[n]`` with a fixed summation order.

    BLAS kernels pick blocking by array size, which would make results depend
    on how a batch is partitioned; three explicit terms do not.
    """
    mat = mat if mat.ndim == 3 else mat[None]
    return (mat[:, :, 0] * v[:, None, 0] + mat[:, :, 1] * v[:, None, 1]
            + mat[:, :, 2] * v[:, None, 2])


def attitude_matrices(angles):
    """Stack of ``R_x R_y R_z`` matrices for an (N, 3) array of angles."""
    angles = np.asarray(angles, dtype=float).reshape(-1, 3)
    cx, cy, cz = np.cos(angles).T
    sx, sy, sz = np.sin(angles).T
    out = np.empty((angles.shape[0], 3, 3))
    # closed form of Rx @ Ry @ Rz
    out[:, 0, 0] = cy * cz
    out[:, 0, 1] = -cy * sz
    out[:, 0, 2] = sy
    out[:, 1, 0] = sx * sy * cz + cx * sz
    out[:, 1, 1] = -sx * sy * sz + cx * cz
    out[:, 1, 2] = -sx * cy
    out[:, 2, 0] = -cx * sy * cz + sx * sz
    out[:, 2, 1] = cx * sy * sz + sx * cz
    out[:, 2, 2] = cx * cy
    return out


def georeference_batch(rho, alpha, beta, positions, attitudes, b):
    """Vectorised georeferencing.

    Parameters
    ----------
    rho, alpha, beta : (N,) array_like
        Polar measurements.
    positions : (N, 3) array_like
        IMU positions in the world frame.
    attitudes : (N, 3) array_like
        ``theta_x, theta_y, theta_z`` per observation.
    b : BoresightParams

    Returns
    -------
    (N, 3) ndarray
    """
    rho = np.asarray(rho, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    beta = np.asarray(beta, dtype=float)
    ca = np.cos(alpha)
    p_l = np.stack([ca * np.sin(beta), ca * np.cos(beta), np.sin(alpha)], axis=-1)
    p_l = b.mirror_offset + rho[:, None] * p_l
    r_b = boresight_rotation(b).m
    bracket = _apply(r_b, p_l) + b.lever_arm
    body = _apply(NED_TO_ENU, bracket)
    r_pose = attitude_matrices(attitudes)
    return _apply(r_pose, body) + np.asarray(positions, dtype=float)


def invert_georeference_batch(points, positions, attitudes, b, max_range=MAX_RANGE):
    """Vectorised inverse of :func:`georeference_batch`.

    Returns
    -------
    rho, alpha, beta : (N,) ndarray
    singular : (N,) bool ndarray
        True where the target sits on the scanner's vertical axis.

    Raises
    ------
    DegenerateGeometryError
        Target coincides with the scanner origin.
    OutOfRangeError
        Target farther than ``max_range``.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    r_pose = attitude_matrices(attitudes)
    local = _apply(np.swapaxes(r_pose, 1, 2), points - np.asarray(positions, dtype=float))
    bracket = _apply(NED_TO_ENU, local)  # N is symmetric and its own inverse
    p_l = _apply(boresight_rotation(b).m.T, bracket - b.lever_arm)
    d = p_l - b.mirror_offset
    rho = np.sqrt(d[:, 0] ** 2 + d[:, 1] ** 2 + d[:, 2] ** 2)
    if np.any(rho < _ORIGIN_TOL):
        raise DegenerateGeometryError("target coincides with the scanner origin")
    if np.any(rho > max_range):
        raise OutOfRangeError(f"target beyond maximum range {max_range} m")
    horiz = np.hypot(d[:, 0], d[:, 1])
    alpha = np.arctan2(d[:, 2], horiz)
    singular = horiz == 0.0
    beta = np.mod(np.arctan2(d[:, 0], d[:, 1]), 2.0 * np.pi)
    beta = np.where(singular | (beta >= 2.0 * np.pi), 0.0, beta)
    return rho, alpha, beta, singular


def _d_attitude_matrices(angles):
    """Partial derivatives of ``R_x R_y R_z`` w.r.t. each of the three angles."""
    angles = np.asarray(angles, dtype=float).reshape(-1, 3)
    n = angles.shape[0]
    c = np.cos(angles)
    s = np.sin(angles)

    def stack(builder, col):
        out = np.zeros((n, 3, 3))
        builder(out, c[:, col], s[:, col])
        return out

    def rx(o, cc, ss):
        o[:, 0, 0] = 1.0
        o[:, 1, 1], o[:, 1, 2], o[:, 2, 1], o[:, 2, 2] = cc, -ss, ss, cc

    def drx(o, cc, ss):
        o[:, 1, 1], o[:, 1, 2], o[:, 2, 1], o[:, 2, 2] = -ss, -cc, cc, -ss

    def ry(o, cc, ss):
        o[:, 1, 1] = 1.0
        o[:, 0, 0], o[:, 0, 2], o[:, 2, 0], o[:, 2, 2] = cc, ss, -ss, cc

    def dry(o, cc, ss):
        o[:, 0, 0], o[:, 0, 2], o[:, 2, 0], o[:, 2, 2] = -ss, cc, -cc, -ss

    def rz(o, cc, ss):
        o[:, 2, 2] = 1.0
        o[:, 0, 0], o[:, 0, 1], o[:, 1, 0], o[:, 1, 1] = cc, -ss, ss, cc

    def drz(o, cc, ss):
        o[:, 0, 0], o[:, 0, 1], o[:, 1, 0], o[:, 1, 1] = -ss, -cc, cc, -ss

    mx, my, mz = stack(rx, 0), stack(ry, 1), stack(rz, 2)
    dx, dy, dz = stack(drx, 0), stack(dry, 1), stack(drz, 2)
    return (
        dx @ my @ mz,
        mx @ dy @ mz,
        mx @ my @ dz,
    )


def georeference_jacobian_batch(rho, alpha, beta, positions, attitudes, b):
    """Analytic Jacobian of the world point w.r.t. the measured quantities.

    Columns are ordered ``[rho, alpha, beta, theta_x, theta_y, theta_z,
    pos_x, pos_y, pos_z]``; the result has shape (N, 3, 9).
    """
    rho = np.asarray(rho, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    beta = np.asarray(beta, dtype=float)
    ca, sa, cb, sb = np.cos(alpha), np.sin(alpha), np.cos(beta), np.sin(beta)
    u = np.stack([ca * sb, ca * cb, sa], axis=-1)
    du_da = np.stack([-sa * sb, -sa * cb, ca], axis=-1)
    du_db = np.stack([ca * cb, -ca * sb, np.zeros_like(ca)], axis=-1)
    nr = NED_TO_ENU @ boresight_rotation(b).m
    r_pose = attitude_matrices(attitudes)
    full = np.einsum("nij,jk->nik", r_pose, nr)

    p_l = b.mirror_offset + rho[:, None] * u
    body = (p_l @ boresight_rotation(b).m.T + b.lever_arm) @ NED_TO_ENU.T
    d_att = _d_attitude_matrices(attitudes)

    jac = np.empty((rho.size, 3, 9))
    jac[:, :, 0] = np.einsum("nij,nj->ni", full, u)
    jac[:, :, 1] = np.einsum("nij,nj->ni", full, rho[:, None] * du_da)
    jac[:, :, 2] = np.einsum("nij,nj->ni", full, rho[:, None] * du_db)
    for col, d in enumerate(d_att):
        jac[:, :, 3 + col] = np.einsum("nij,nj->ni", d, body)
    jac[:, :, 6:9] = np.eye(3)
    return jac
