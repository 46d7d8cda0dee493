"""Run configuration and its JSON mapping.

The JSON form uses degrees for every angle and names units in the keys.
Missing keys take the defaults below; unknown keys are rejected so that a
typo cannot silently fall back to a default.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigurationError, InvalidInputError
from .fimloe import CalibratorOptions
from .frames import BoresightParams
from .pipeline import METHODS
from .rwtls import SolverOptions
from .simkit import (
    ControlPointLayout,
    Scenario,
    SensorSpec,
    SurveySpec,
    TrajectorySpec,
    default_scenario,
)

__all__ = ["RunConfig", "DEFAULT_CONFIG", "load_config", "boresight_to_dict", "boresight_from_dict"]

_DEG = np.rad2deg
_RAD = np.deg2rad


def boresight_to_dict(b):
    return {
        "omega_deg": float(_DEG(b.omega)),
        "phi_deg": float(_DEG(b.phi)),
        "kappa_deg": float(_DEG(b.kappa)),
        "lever_arm_m": [float(v) for v in b.lever_arm],
        "mirror_offset_m": [float(v) for v in b.mirror_offset],
    }


def boresight_from_dict(d):
    d = _strict(d, ("omega_deg", "phi_deg", "kappa_deg", "lever_arm_m", "mirror_offset_m"),
                "boresight")
    return BoresightParams(
        _RAD(float(d.get("omega_deg", 0.0))),
        _RAD(float(d.get("phi_deg", 0.0))),
        _RAD(float(d.get("kappa_deg", 0.0))),
        d.get("lever_arm_m", [0.0, 0.0, 0.0]),
        d.get("mirror_offset_m", [0.0, 0.0, 0.0]),
    )


def _strict(d, allowed, where):
    if not isinstance(d, dict):
        raise ConfigurationError(f"{where}: expected an object, got {type(d).__name__}")
    unknown = sorted(set(d) - set(allowed))
    if unknown:
        raise ConfigurationError(f"{where}: unknown keys {unknown}")
    return d


def _scenario_to_dict(sc):
    s, tr, ly, sv = sc.sensor, sc.trajectory, sc.layout, sc.survey
    return {
        "seed": sc.seed,
        "outlier_fraction": sc.outlier_fraction,
        "outlier_magnitude_m": sc.outlier_magnitude,
        "scan_interval_s": sc.scan_interval,
        "sensor": {
            "sigma_range_m": s.sigma_range,
            "sigma_scan_angle_deg": float(_DEG(s.sigma_scan_angle)),
            "sigma_heading_deg": float(_DEG(s.sigma_heading)),
            "sigma_roll_pitch_deg": float(_DEG(s.sigma_roll_pitch)),
            "sigma_position_m": s.sigma_position,
            "max_range_m": s.max_range,
            "scan_rate_hz": s.scan_rate,
            "imu_rate_hz": s.imu_rate,
        },
        "trajectory": {
            "waypoints_m": [list(w) for w in tr.waypoints],
            "speed_mps": tr.speed,
            "height_m": tr.height,
            "closed": tr.closed,
            "passes": tr.passes,
            "alternate": tr.alternate,
        },
        "layout": {
            "count": ly.count,
            "box_min_m": list(ly.box_min),
            "box_max_m": list(ly.box_max),
        },
        "survey": {
            "sigma_const_m": sv.sigma_const,
            "ppm": sv.ppm,
            "station_m": list(sv.station),
            "noisy": sv.noisy,
        },
        "true_boresight": boresight_to_dict(sc.true_boresight),
    }


def _scenario_from_dict(d, base):
    d = _strict(d, ("seed", "outlier_fraction", "outlier_magnitude_m", "scan_interval_s",
                    "noiseless", "sensor", "trajectory", "layout", "survey", "true_boresight"),
                "scenario")
    cur = _scenario_to_dict(base)
    sensor = _strict(d.get("sensor", {}), cur["sensor"], "scenario.sensor")
    traj = _strict(d.get("trajectory", {}), cur["trajectory"], "scenario.trajectory")
    layout = _strict(d.get("layout", {}), cur["layout"], "scenario.layout")
    survey = _strict(d.get("survey", {}), cur["survey"], "scenario.survey")
    s = {**cur["sensor"], **sensor}
    t = {**cur["trajectory"], **traj}
    ly = {**cur["layout"], **layout}
    sv = {**cur["survey"], **survey}
    if d.get("noiseless", False):
        for key in ("sigma_range_m", "sigma_scan_angle_deg", "sigma_heading_deg",
                    "sigma_roll_pitch_deg", "sigma_position_m"):
            s[key] = 0.0
        sv["noisy"] = False
    bore = d.get("true_boresight")
    return Scenario(
        seed=_int(d.get("seed", base.seed), "scenario.seed"),
        trajectory=TrajectorySpec(
            waypoints=tuple(tuple(float(v) for v in w) for w in t["waypoints_m"]),
            speed=float(t["speed_mps"]), height=float(t["height_m"]),
            closed=bool(t["closed"]), passes=_int(t["passes"], "trajectory.passes"),
            alternate=bool(t["alternate"]),
        ),
        layout=ControlPointLayout(
            count=_int(ly["count"], "layout.count"),
            box_min=tuple(ly["box_min_m"]), box_max=tuple(ly["box_max_m"]),
        ),
        sensor=SensorSpec(
            sigma_range=float(s["sigma_range_m"]),
            sigma_scan_angle=float(_RAD(s["sigma_scan_angle_deg"])),
            sigma_heading=float(_RAD(s["sigma_heading_deg"])),
            sigma_roll_pitch=float(_RAD(s["sigma_roll_pitch_deg"])),
            sigma_position=float(s["sigma_position_m"]),
            max_range=float(s["max_range_m"]),
            scan_rate=float(s["scan_rate_hz"]),
            imu_rate=float(s["imu_rate_hz"]),
        ),
        true_boresight=base.true_boresight if bore is None else boresight_from_dict(bore),
        outlier_fraction=float(d.get("outlier_fraction", base.outlier_fraction)),
        outlier_magnitude=float(d.get("outlier_magnitude_m", base.outlier_magnitude)),
        scan_interval=float(d.get("scan_interval_s", base.scan_interval)),
        survey=SurveySpec(
            sigma_const=float(sv["sigma_const_m"]), ppm=float(sv["ppm"]),
            station=tuple(float(v) for v in sv["station_m"]), noisy=bool(sv["noisy"]),
        ),
    )


def _int(v, where):
    if isinstance(v, bool) or not float(v) == int(v):
        raise ConfigurationError(f"{where}: expected an integer, got {v!r}")
    return int(v)


@dataclass
class RunConfig:
    """Everything one CLI invocation needs besides its input files."""

    scenario: Scenario = field(default_factory=default_scenario)
    methods: tuple = METHODS
    control_point_subset: tuple = None
    solver: SolverOptions = field(default_factory=SolverOptions)
    calibrator: CalibratorOptions = field(default_factory=CalibratorOptions)
    nominal_boresight: BoresightParams = field(default_factory=BoresightParams)
    alpha: float = 0.05
    sigma0_h: float = 2.0
    sigma0_v: float = 3.0
    drive_pass: int = None
    output_dir: str = "out"

    def __post_init__(self):
        self.methods = tuple(self.methods)
        if not self.methods:
            raise ConfigurationError("at least one method is required")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ConfigurationError(f"unknown methods {bad}; choose from {list(METHODS)}")
        if len(set(self.methods)) != len(self.methods):
            raise ConfigurationError("methods must not repeat")
        if not (self.sigma0_h > 0 and self.sigma0_v > 0):
            raise ConfigurationError("sigma0 values must be positive")
        if not 0.0 < self.alpha < 1.0:
            raise ConfigurationError("alpha must be in (0, 1)")
        if self.control_point_subset is not None:
            self.control_point_subset = tuple(str(i) for i in self.control_point_subset)
            width = max(2, len(str(self.scenario.layout.count)))
            known = {f"CP{j + 1:0{width}d}" for j in range(self.scenario.layout.count)}
            unknown = sorted(set(self.control_point_subset) - known)
            if unknown:
                raise ConfigurationError(f"subset ids not in the scenario: {unknown}")
            if len(self.control_point_subset) < 2:
                raise ConfigurationError("a control-point subset needs at least 2 points")

    def to_dict(self):
        c = self.calibrator
        return {
            "scenario": _scenario_to_dict(self.scenario),
            "methods": list(self.methods),
            "control_point_subset": (None if self.control_point_subset is None
                                     else list(self.control_point_subset)),
            "solver": {
                "eps0": self.solver.eps0,
                "max_iterations": self.solver.max_iterations,
                "k0": self.solver.k0,
                "k1": self.solver.k1,
            },
            "calibrator": {
                "lambda0": c.lambda0,
                "gtol": c.gtol,
                "xtol": c.xtol,
                "ftol": c.ftol,
                "max_iterations": c.max_iterations,
                "mirror_offset_nominal_m": [float(v) for v in c.mirror_offset_nominal],
                "mirror_offset_sigma_m": c.mirror_offset_sigma,
            },
            "nominal_boresight": boresight_to_dict(self.nominal_boresight),
            "alpha": self.alpha,
            "sigma0_cm": {"horizontal": self.sigma0_h, "vertical": self.sigma0_v},
            "pass": self.drive_pass,
            "output_dir": self.output_dir,
        }

    @classmethod
    def from_dict(cls, d):
        """Build from a (possibly partial) JSON object."""
        d = _strict(d, DEFAULT_CONFIG, "config")
        try:
            base = cls()
            scenario = _scenario_from_dict(d.get("scenario", {}), base.scenario)
            solver = _strict(d.get("solver", {}), DEFAULT_CONFIG["solver"], "solver")
            solver = {**DEFAULT_CONFIG["solver"], **solver}
            cal = _strict(d.get("calibrator", {}), DEFAULT_CONFIG["calibrator"], "calibrator")
            cal = {**DEFAULT_CONFIG["calibrator"], **cal}
            s0 = _strict(d.get("sigma0_cm", {}), ("horizontal", "vertical"), "sigma0_cm")
            drive_pass = d.get("pass")
            return cls(
                scenario=scenario,
                methods=tuple(d.get("methods", METHODS)),
                control_point_subset=d.get("control_point_subset"),
                solver=SolverOptions(
                    eps0=float(solver["eps0"]),
                    max_iterations=_int(solver["max_iterations"], "solver.max_iterations"),
                    k0=float(solver["k0"]), k1=float(solver["k1"]),
                ),
                calibrator=CalibratorOptions(
                    lambda0=float(cal["lambda0"]), gtol=float(cal["gtol"]),
                    xtol=float(cal["xtol"]), ftol=float(cal["ftol"]),
                    max_iterations=_int(cal["max_iterations"], "calibrator.max_iterations"),
                    mirror_offset_nominal=np.asarray(cal["mirror_offset_nominal_m"], dtype=float),
                    mirror_offset_sigma=(None if cal["mirror_offset_sigma_m"] is None
                                         else float(cal["mirror_offset_sigma_m"])),
                ),
                nominal_boresight=boresight_from_dict(d.get("nominal_boresight", {})),
                alpha=float(d.get("alpha", 0.05)),
                sigma0_h=float(s0.get("horizontal", 2.0)),
                sigma0_v=float(s0.get("vertical", 3.0)),
                drive_pass=None if drive_pass is None else _int(drive_pass, "pass"),
                output_dir=str(d.get("output_dir", "out")),
            )
        except (InvalidInputError, TypeError, ValueError, KeyError) as exc:
            if isinstance(exc, ConfigurationError):
                raise
            raise ConfigurationError(f"invalid configuration: {exc}") from exc

    def replace(self, **kw):
        out = copy.deepcopy(self)
        for k, v in kw.items():
            setattr(out, k, v)
        out.__post_init__()
        return out

    def with_seed(self, seed):
        d = self.to_dict()
        d["scenario"]["seed"] = int(seed)
        return RunConfig.from_dict(d)


DEFAULT_CONFIG = RunConfig().to_dict()


def load_config(path):
    """Read a JSON run configuration; ``None`` gives the defaults."""
    if path is None:
        return RunConfig()
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}:{exc.lineno}: invalid JSON: {exc.msg}") from exc
    return RunConfig.from_dict(raw)
