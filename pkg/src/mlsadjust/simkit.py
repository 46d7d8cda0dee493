"""Deterministic synthetic mobile-laser-scanning campaigns.

A campaign drives a constant-speed platform around a loop of waypoints,
scans a network of control points on the surrounding walls and perturbs the
IMU poses and laser measurements with Gaussian noise.  Every random draw comes
from a stream spawned from ``Scenario.seed``, one stream per purpose, so a
scenario always reproduces the same campaign bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import EmptyCampaignError, InvalidInputError
from .fimloe import CalibrationDataset, NoiseModel
from .frames import BoresightParams, Pose, invert_georeference_batch, wrap_angle

__all__ = [
    "SensorSpec",
    "TrajectorySpec",
    "ControlPointLayout",
    "SurveySpec",
    "Scenario",
    "Trajectory",
    "Campaign",
    "generate_trajectory",
    "layout_control_points",
    "scan_campaign",
    "default_scenario",
    "noiseless_scenario",
]

# stream order is part of the reproducibility contract
_STREAMS = ("trajectory", "layout", "laser", "outliers")


@dataclass(frozen=True)
class SensorSpec:
    """Sensor accuracies and rates (radians, metres, Hz)."""

    sigma_range: float = 0.002
    sigma_scan_angle: float = np.deg2rad(0.01)
    sigma_heading: float = np.deg2rad(0.012)
    sigma_roll_pitch: float = np.deg2rad(0.008)
    sigma_position: float = 0.01
    max_range: float = 200.0
    scan_rate: float = 976_000.0
    imu_rate: float = 300.0

    def __post_init__(self):
        for name in ("sigma_range", "sigma_scan_angle", "sigma_heading",
                     "sigma_roll_pitch", "sigma_position"):
            if not getattr(self, name) >= 0:
                raise InvalidInputError(f"{name} must be non-negative")
        for name in ("max_range", "scan_rate", "imu_rate"):
            if not getattr(self, name) > 0:
                raise InvalidInputError(f"{name} must be positive")

    def noise_model(self):
        return NoiseModel(
            sigma_range=self.sigma_range,
            sigma_scan_angle=self.sigma_scan_angle,
            sigma_roll_pitch=self.sigma_roll_pitch,
            sigma_heading=self.sigma_heading,
            sigma_position=self.sigma_position,
        )

    @classmethod
    def noiseless(cls, **kw):
        zero = dict(sigma_range=0.0, sigma_scan_angle=0.0, sigma_heading=0.0,
                    sigma_roll_pitch=0.0, sigma_position=0.0)
        zero.update(kw)
        return cls(**zero)


@dataclass(frozen=True)
class TrajectorySpec:
    """Piecewise-linear path.

    ``waypoints`` are (x, y) or (x, y, z); 2-D waypoints are lifted to
    ``height``.  With ``closed=True`` the path returns to the first waypoint,
    and ``passes`` repeats it, reversing direction on every other pass when
    ``alternate`` is set.
    """

    waypoints: tuple
    speed: float = 1.0
    height: float = 1.8
    closed: bool = False
    passes: int = 1
    alternate: bool = True

    def __post_init__(self):
        wp = np.asarray(self.waypoints, dtype=float)
        if wp.ndim != 2 or wp.shape[1] not in (2, 3) or wp.shape[0] < 2:
            raise InvalidInputError("need at least two 2-D or 3-D waypoints")
        if not np.all(np.isfinite(wp)):
            raise InvalidInputError("waypoints must be finite")
        if not self.speed > 0:
            raise InvalidInputError("speed must be positive")
        if self.passes < 1:
            raise InvalidInputError("passes must be at least 1")
        object.__setattr__(self, "waypoints", tuple(map(tuple, wp.tolist())))

    def points(self):
        wp = np.asarray(self.waypoints, dtype=float)
        if wp.shape[1] == 2:
            wp = np.column_stack([wp, np.full(len(wp), self.height)])
        return wp


@dataclass(frozen=True)
class ControlPointLayout:
    """Control points on the four vertical walls of an axis-aligned box."""

    count: int = 20
    box_min: tuple = (-6.0, -6.0, 0.0)
    box_max: tuple = (46.0, 26.0, 4.0)

    def __post_init__(self):
        object.__setattr__(self, "box_min", tuple(float(v) for v in self.box_min))
        object.__setattr__(self, "box_max", tuple(float(v) for v in self.box_max))


@dataclass(frozen=True)
class SurveySpec:
    """Total-station accuracy: ``const + ppm * distance`` from ``station``.

    With ``noisy`` set, the surveyed coordinates carry one isotropic Gaussian
    error of that size per point, shared by every scan of the point.
    """

    sigma_const: float = 0.003
    ppm: float = 1.5
    station: tuple = (0.0, 0.0, 0.0)
    noisy: bool = True

    def sigmas(self, points):
        d = np.linalg.norm(np.asarray(points, dtype=float) - np.asarray(self.station), axis=-1)
        return self.sigma_const + self.ppm * 1e-6 * d

    def observe(self, points, rng):
        """Surveyed coordinates of the true ``points``."""
        points = np.asarray(points, dtype=float)
        if not self.noisy:
            return points.copy()
        return points + rng.normal(0.0, 1.0, points.shape) * self.sigmas(points)[:, None]


@dataclass(frozen=True)
class Scenario:
    seed: int = 0
    trajectory: TrajectorySpec = None
    layout: ControlPointLayout = field(default_factory=ControlPointLayout)
    sensor: SensorSpec = field(default_factory=SensorSpec)
    true_boresight: BoresightParams = field(default_factory=BoresightParams)
    outlier_fraction: float = 0.0
    outlier_magnitude: float = 0.5
    scan_interval: float = 20.0
    survey: SurveySpec = field(default_factory=SurveySpec)

    def __post_init__(self):
        if self.trajectory is None:
            object.__setattr__(self, "trajectory", default_trajectory())
        if not 0.0 <= self.outlier_fraction <= 1.0:
            raise InvalidInputError("outlier_fraction must be in [0, 1]")
        if self.layout.count < 2:
            raise InvalidInputError("a scenario needs at least 2 control points")
        if not self.scan_interval > 0:
            raise InvalidInputError("scan_interval must be positive")
        object.__setattr__(self, "seed", int(self.seed))

    def streams(self):
        seq = np.random.SeedSequence(self.seed)
        return dict(zip(_STREAMS, (np.random.default_rng(s) for s in seq.spawn(len(_STREAMS)))))


def default_trajectory():
    return TrajectorySpec(
        waypoints=((0.0, 0.0), (40.0, 0.0), (40.0, 20.0), (0.0, 20.0)),
        speed=1.5, height=1.8, closed=True, passes=4, alternate=True,
    )


def default_scenario(seed=0, **overrides):
    """Indoor loop with the nominal sensor accuracies of the reference rig.

    The injected mounting error is (0.5, -0.3, 0.8) degrees of boresight and a
    (0.05, -0.02, 0.10) m lever arm.
    """
    kw = dict(
        seed=seed,
        true_boresight=BoresightParams(
            np.deg2rad(0.5), np.deg2rad(-0.3), np.deg2rad(0.8), [0.05, -0.02, 0.10], [0, 0, 0]
        ),
    )
    kw.update(overrides)
    return Scenario(**kw)


def noiseless_scenario(seed=0, **overrides):
    """:func:`default_scenario` with error-free sensors and survey."""
    kw = dict(sensor=SensorSpec.noiseless(), survey=SurveySpec(noisy=False))
    kw.update(overrides)
    return default_scenario(seed, **kw)


class Trajectory:
    """Time-ordered pose samples with interpolation.

    Supports ``len`` and indexing (returning :class:`Pose`), so it can be
    used wherever a list of poses is expected.
    """

    def __init__(self, t, positions, attitudes, pass_index=None):
        self.t = np.asarray(t, dtype=float).reshape(-1)
        n = self.t.size
        self.positions = np.asarray(positions, dtype=float).reshape(n, 3)
        self.attitudes = wrap_angle(np.asarray(attitudes, dtype=float).reshape(n, 3))
        self.pass_index = (np.zeros(n, dtype=int) if pass_index is None
                           else np.asarray(pass_index, dtype=int).reshape(n))
        if n and np.any(np.diff(self.t) <= 0):
            raise InvalidInputError("trajectory timestamps must be strictly increasing")
        if not (np.all(np.isfinite(self.positions)) and np.all(np.isfinite(self.attitudes))):
            raise InvalidInputError("trajectory contains non-finite samples")

    def __len__(self):
        return self.t.size

    def __getitem__(self, i):
        return Pose(self.t[i], self.positions[i], self.attitudes[i])

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def pass_ranges(self):
        """``{pass: (t_start, t_end)}``."""
        out = {}
        for k in np.unique(self.pass_index):
            ts = self.t[self.pass_index == k]
            out[int(k)] = (float(ts[0]), float(ts[-1]))
        return out

    def interpolate(self, times):
        """Poses at ``times``: linear in position, per-angle shortest-arc in attitude.

        Returns
        -------
        positions, attitudes : (M, 3) ndarray
        """
        times = np.asarray(times, dtype=float).reshape(-1)
        if times.size and (times.min() < self.t[0] or times.max() > self.t[-1]):
            raise InvalidInputError("interpolation time outside the trajectory span")
        i = np.searchsorted(self.t, times, side="right") - 1
        i = np.clip(i, 0, len(self) - 2) if len(self) > 1 else np.zeros_like(i)
        if len(self) == 1:
            return self.positions[i].copy(), self.attitudes[i].copy()
        t0, t1 = self.t[i], self.t[i + 1]
        f = ((times - t0) / (t1 - t0))[:, None]
        pos = self.positions[i] + f * (self.positions[i + 1] - self.positions[i])
        d_att = wrap_angle(self.attitudes[i + 1] - self.attitudes[i])
        att = wrap_angle(self.attitudes[i] + f * d_att)
        exact = (f[:, 0] == 0.0)
        pos[exact] = self.positions[i[exact]]
        att[exact] = self.attitudes[i[exact]]
        return pos, att


def _path_vertices(spec):
    wp = spec.points()
    if np.any(np.all(np.diff(wp, axis=0) == 0.0, axis=1)):
        raise InvalidInputError("duplicate consecutive waypoints")
    if spec.closed:
        if np.all(wp[-1] == wp[0]):
            raise InvalidInputError("closed path repeats its first waypoint at the end")
        wp = np.vstack([wp, wp[:1]])
    passes = []
    for k in range(spec.passes):
        seg = wp[::-1] if (spec.alternate and k % 2 == 1) else wp
        passes.append(seg)
    return passes


def _sample_polyline(vertices, speed, rate, t0):
    seg = np.diff(vertices, axis=0)
    seg_len = np.linalg.norm(seg, axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    total = cum[-1]
    n = int(np.floor(total / speed * rate + 1e-9)) + 1
    idx = np.arange(n)
    s = idx / rate * speed
    k = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(seg) - 1)
    frac = (s - cum[k]) / seg_len[k]
    pos = vertices[k] + frac[:, None] * seg[k]
    heading = np.arctan2(-seg[k, 0], seg[k, 1])
    t = t0 + idx / rate
    return t, pos, heading, total / speed


def generate_trajectory(spec, sensor, rng=None, noisy=True):
    """Sample the path at the IMU rate.

    Heading (``theta_z``) follows the path tangent and ``theta_x``/``theta_y``
    are nominally zero.  With ``noisy=True`` independent Gaussian errors of
    the sensor's position and attitude accuracy are added per sample.

    Parameters
    ----------
    rng : numpy.random.Generator or int, optional
        Random stream (or seed) for the pose noise.
    """
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    p_all, h_all, k_all = [], [], []
    for k, verts in enumerate(_path_vertices(spec)):
        _, pos, heading, _ = _sample_polyline(verts, spec.speed, sensor.imu_rate, 0.0)
        if k > 0:
            pos, heading = pos[1:], heading[1:]
        p_all.append(pos)
        h_all.append(heading)
        k_all.append(np.full(len(pos), k))
    # one integer time grid keeps every timestamp an exact multiple of 1/rate
    n = sum(len(p) for p in p_all)
    t = np.arange(n) / sensor.imu_rate
    pos = np.vstack(p_all)
    att = np.column_stack([np.zeros(n), np.zeros(n), np.concatenate(h_all)])
    if noisy:
        pos = pos + rng.normal(0.0, 1.0, size=(n, 3)) * sensor.sigma_position
        att = att + rng.normal(0.0, 1.0, size=(n, 3)) * np.array(
            [sensor.sigma_roll_pitch, sensor.sigma_roll_pitch, sensor.sigma_heading]
        )
    return Trajectory(t, pos, att, np.concatenate(k_all))


def layout_control_points(layout, seed=None):
    """Place ``layout.count`` points uniformly on the four vertical walls.

    Returns
    -------
    dict
        ``{"CP01": array([x, y, z]), ...}`` in id order.
    """
    if layout.count < 2:
        raise InvalidInputError("need at least 2 control points")
    lo = np.asarray(layout.box_min, dtype=float)
    hi = np.asarray(layout.box_max, dtype=float)
    size = hi - lo
    if lo.shape != (3,) or hi.shape != (3,) or np.any(size <= 0):
        raise InvalidInputError("control-point box must have positive extent on every axis")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    perim = 2.0 * (size[0] + size[1])
    s = rng.uniform(0.0, perim, layout.count)
    z = rng.uniform(lo[2], hi[2], layout.count)
    pts = np.empty((layout.count, 3))
    for j, sj in enumerate(s):
        if sj < size[0]:
            xy = (lo[0] + sj, lo[1])
        elif sj < size[0] + size[1]:
            xy = (hi[0], lo[1] + sj - size[0])
        elif sj < 2 * size[0] + size[1]:
            xy = (hi[0] - (sj - size[0] - size[1]), hi[1])
        else:
            xy = (lo[0], hi[1] - (sj - 2 * size[0] - size[1]))
        pts[j] = (xy[0], xy[1], z[j])
    width = max(2, len(str(layout.count)))
    return {f"CP{j + 1:0{width}d}": pts[j] for j in range(layout.count)}


@dataclass
class Campaign:
    """A simulated campaign: the calibration dataset plus what produced it."""

    scenario: Scenario
    dataset: CalibrationDataset
    trajectory: Trajectory
    true_trajectory: Trajectory
    control_sigmas: dict
    true_control_points: dict
    outlier_mask: np.ndarray
    epoch_times: np.ndarray


def scan_campaign(scenario):
    """Forward-simulate laser scans of the control network.

    One observation is produced per visible control point (range within
    ``max_range``) per scan epoch; epochs are every ``scan_interval`` seconds
    on the IMU sample grid.  The dataset carries the surveyed control
    coordinates; the error-free layout stays on the returned campaign.
    """
    streams = scenario.streams()
    sensor = scenario.sensor
    truth = generate_trajectory(scenario.trajectory, sensor, noisy=False)
    noisy = generate_trajectory(scenario.trajectory, sensor, rng=streams["trajectory"])
    points = layout_control_points(scenario.layout, streams["layout"])
    ids = list(points)
    cps = np.array([points[i] for i in ids])
    sig = scenario.survey.sigmas(cps)
    surveyed = scenario.survey.observe(cps, streams["layout"])

    stride = max(1, int(round(scenario.scan_interval * sensor.imu_rate)))
    epochs = np.arange(0, len(truth), stride)
    n_cp = len(ids)
    e_idx = np.repeat(epochs, n_cp)
    c_idx = np.tile(np.arange(n_cp), epochs.size)
    rho, alpha, beta, _ = invert_georeference_batch(
        cps[c_idx], truth.positions[e_idx], truth.attitudes[e_idx],
        scenario.true_boresight, max_range=np.inf,
    )
    visible = rho <= sensor.max_range
    if not np.any(visible):
        raise EmptyCampaignError("no control point is ever within range")
    e_idx, c_idx = e_idx[visible], c_idx[visible]
    rho, alpha, beta = rho[visible], alpha[visible], beta[visible]
    n_obs = rho.size

    laser = streams["laser"]
    noise = laser.normal(0.0, 1.0, size=(n_obs, 3))
    rho = rho + noise[:, 0] * sensor.sigma_range
    alpha = alpha + noise[:, 1] * sensor.sigma_scan_angle
    beta = np.mod(beta + noise[:, 2] * sensor.sigma_scan_angle, 2.0 * np.pi)
    outliers = streams["outliers"].random(n_obs) < scenario.outlier_fraction
    rho = rho + np.where(outliers, scenario.outlier_magnitude, 0.0)

    t_obs = truth.t[e_idx]
    pos, att = noisy.interpolate(t_obs)
    dataset = CalibrationDataset(
        t=t_obs, rho=rho, alpha=alpha, beta=beta, positions=pos, attitudes=att,
        point_ids=[ids[c] for c in c_idx], control_points=dict(zip(ids, surveyed)),
        noise_model=sensor.noise_model(),
    )
    return Campaign(
        scenario=scenario,
        dataset=dataset,
        trajectory=noisy,
        true_trajectory=truth,
        control_sigmas=dict(zip(ids, sig)),
        true_control_points=points,
        outlier_mask=outliers,
        epoch_times=truth.t[epochs],
    )
