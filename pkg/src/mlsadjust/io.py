"""Campaign files and JSON reports.

CSV files are UTF-8 with LF line endings, one header line and ``.`` as the
decimal separator.  Floats are written with ``repr``, the shortest string
that parses back to the same double, so ``parse(serialize(x)) == x`` holds
exactly for every record type.  Angles are degrees in files and radians in
memory; the conversion happens once, when records become arrays.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import re
from dataclasses import astuple, dataclass

import numpy as np

from .exceptions import FormatError, InvalidInputError
from .fimloe import CalibrationDataset, NoiseModel
from .simkit import Trajectory

__all__ = [
    "FORMAT_VERSION",
    "ControlPointRecord",
    "TrajectoryRecord",
    "ObservationRecord",
    "CONTROL_POINTS_HEADER",
    "TRAJECTORY_HEADER",
    "OBSERVATIONS_HEADER",
    "serialize_control_points",
    "parse_control_points",
    "serialize_trajectory",
    "parse_trajectory",
    "serialize_observations",
    "parse_observations",
    "serialize_json",
    "parse_json",
    "write_text",
    "read_text",
    "sha256_file",
    "sha256_bytes",
    "format_float",
    "CAMPAIGN_FILES",
    "campaign_records",
    "write_campaign",
    "load_campaign",
    "LoadedCampaign",
]

FORMAT_VERSION = "1.0"
_NUMBER = re.compile(r"[+-]?(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?")

CONTROL_POINTS_HEADER = ("id", "x_m", "y_m", "z_m", "sigma_mm")
TRAJECTORY_HEADER = ("t_s", "x_m", "y_m", "z_m", "theta_x_deg", "theta_y_deg", "theta_z_deg")
OBSERVATIONS_HEADER = ("t_s", "rho_m", "alpha_deg", "beta_deg", "control_point_id")


@dataclass(frozen=True)
class ControlPointRecord:
    id: str
    x_m: float
    y_m: float
    z_m: float
    sigma_mm: float


@dataclass(frozen=True)
class TrajectoryRecord:
    t_s: float
    x_m: float
    y_m: float
    z_m: float
    theta_x_deg: float
    theta_y_deg: float
    theta_z_deg: float


@dataclass(frozen=True)
class ObservationRecord:
    t_s: float
    rho_m: float
    alpha_deg: float
    beta_deg: float
    control_point_id: str


def format_float(x):
    x = float(x)
    if not math.isfinite(x):
        raise InvalidInputError(f"cannot write non-finite value {x!r}")
    # normalize -0.0 so equal values always serialize identically
    return repr(x + 0.0)


def _check_id(value):
    s = str(value)
    if not s or s != s.strip() or any(c in s for c in ",\r\n\"'"):
        raise InvalidInputError(f"invalid identifier {s!r}")
    return s


def _serialize(header, rows):
    lines = [",".join(header)]
    lines.extend(",".join(row) for row in rows)
    return "\n".join(lines) + "\n"


def _lines(text, header, path):
    if not text:
        raise FormatError("empty file", path, 1)
    if "\r" in text:
        line = text[: text.index("\r")].count("\n") + 1
        raise FormatError("CR line endings are not allowed", path, line)
    if not text.endswith("\n"):
        raise FormatError("missing final newline", path, text.count("\n") + 1)
    lines = text[:-1].split("\n")
    if tuple(lines[0].split(",")) != header:
        raise FormatError(f"expected header {','.join(header)!r}", path, 1)
    for n, line in enumerate(lines[1:], start=2):
        fields = line.split(",")
        if len(fields) != len(header):
            raise FormatError(f"expected {len(header)} fields, found {len(fields)}", path, n)
        yield n, fields


def _float(s, name, path, line):
    if not _NUMBER.fullmatch(s):
        raise FormatError(f"{name}: not a finite decimal number: {s!r}", path, line)
    v = float(s)
    if not math.isfinite(v):
        raise FormatError(f"{name}: value out of range: {s!r}", path, line)
    return v


def _ident(s, name, path, line):
    try:
        return _check_id(s)
    except InvalidInputError:
        raise FormatError(f"{name}: invalid identifier {s!r}", path, line) from None


def serialize_control_points(records):
    rows, seen = [], set()
    for r in records:
        pid = _check_id(r.id)
        if pid in seen:
            raise InvalidInputError(f"duplicate control point id {pid!r}")
        seen.add(pid)
        rows.append([pid] + [format_float(v) for v in astuple(r)[1:]])
    return _serialize(CONTROL_POINTS_HEADER, rows)


def parse_control_points(text, path="control_points.csv"):
    out, seen = [], set()
    for n, f in _lines(text, CONTROL_POINTS_HEADER, path):
        pid = _ident(f[0], "id", path, n)
        if pid in seen:
            raise FormatError(f"duplicate control point id {pid!r}", path, n)
        seen.add(pid)
        vals = [_float(v, h, path, n) for v, h in zip(f[1:], CONTROL_POINTS_HEADER[1:])]
        if not vals[3] >= 0:
            raise FormatError("sigma_mm must be non-negative", path, n)
        out.append(ControlPointRecord(pid, *vals))
    return out


def serialize_trajectory(records):
    rows, last = [], -math.inf
    for r in records:
        if not r.t_s > last:
            raise InvalidInputError("trajectory timestamps must be strictly increasing")
        last = r.t_s
        rows.append([format_float(v) for v in astuple(r)])
    return _serialize(TRAJECTORY_HEADER, rows)


def parse_trajectory(text, path="trajectory.csv"):
    out, last = [], -math.inf
    for n, f in _lines(text, TRAJECTORY_HEADER, path):
        vals = [_float(v, h, path, n) for v, h in zip(f, TRAJECTORY_HEADER)]
        if not vals[0] > last:
            raise FormatError("t_s must be strictly increasing", path, n)
        last = vals[0]
        out.append(TrajectoryRecord(*vals))
    return out


def serialize_observations(records):
    rows = []
    for r in records:
        rows.append([format_float(v) for v in astuple(r)[:4]] + [_check_id(r.control_point_id)])
    return _serialize(OBSERVATIONS_HEADER, rows)


def parse_observations(text, path="observations.csv"):
    out = []
    for n, f in _lines(text, OBSERVATIONS_HEADER, path):
        vals = [_float(v, h, path, n) for v, h in zip(f[:4], OBSERVATIONS_HEADER)]
        if not vals[1] > 0:
            raise FormatError("rho_m must be positive", path, n)
        out.append(ObservationRecord(*vals, _ident(f[4], "control_point_id", path, n)))
    return out


def _sanitize(obj):
    """Make ``obj`` strict-JSON: numpy scalars to Python, non-finite floats to null."""
    if isinstance(obj, dict):
        return {str(k): _sanitize(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_sanitize(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _sanitize(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v + 0.0 if math.isfinite(v) else None
    return obj


def serialize_json(obj):
    """Deterministic JSON text: 2-space indent, insertion order, final LF."""
    return json.dumps(_sanitize(obj), indent=2, ensure_ascii=False, allow_nan=False) + "\n"


def parse_json(text, path="report.json", kind=None):
    """Parse a report; checks ``format_version`` (and ``kind`` when given)."""
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid JSON: {exc.msg}", path, exc.lineno) from None
    if not isinstance(obj, dict):
        raise FormatError("top level must be an object", path, 1)
    version = obj.get("format_version")
    if version is None:
        raise FormatError("missing format_version", path, 1)
    if str(version).split(".")[0] != FORMAT_VERSION.split(".")[0]:
        raise FormatError(
            f"incompatible format_version {version!r} (expected {FORMAT_VERSION})", path, 1
        )
    if kind is not None and obj.get("kind") != kind:
        raise FormatError(f"expected a {kind!r} document, found {obj.get('kind')!r}", path, 1)
    return obj


def write_text(path, text):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def read_text(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        return raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError("not valid UTF-8", str(path), raw[: exc.start].count(b"\n") + 1) from None


def sha256_bytes(data):
    return hashlib.sha256(data).hexdigest()


def sha256_file(path):
    with open(path, "rb") as fh:
        return sha256_bytes(fh.read())


CAMPAIGN_FILES = ("control_points.csv", "trajectory.csv", "observations.csv")
MANIFEST = "manifest.json"


def campaign_records(campaign):
    """File records ``(control_points, trajectory, observations)`` of a campaign."""
    data, traj = campaign.dataset, campaign.trajectory
    cps = [
        ControlPointRecord(pid, *(float(v) for v in data.control_points[pid]),
                           float(campaign.control_sigmas[pid]) * 1e3)
        for pid in data.control_points
    ]
    att = np.rad2deg(traj.attitudes)
    trj = [
        TrajectoryRecord(float(traj.t[i]), *(float(v) for v in traj.positions[i]),
                         *(float(v) for v in att[i]))
        for i in range(len(traj))
    ]
    alpha, beta = np.rad2deg(data.alpha), np.rad2deg(data.beta)
    obs = [
        ObservationRecord(float(data.t[j]), float(data.rho[j]), float(alpha[j]), float(beta[j]),
                          data.point_ids[j])
        for j in range(len(data))
    ]
    return cps, trj, obs


def write_campaign(directory, campaign, config=None, inputs=None):
    """Write the three campaign files and a manifest into ``directory``.

    Returns the manifest dictionary.
    """
    os.makedirs(directory, exist_ok=True)
    cps, trj, obs = campaign_records(campaign)
    texts = dict(zip(CAMPAIGN_FILES, (serialize_control_points(cps), serialize_trajectory(trj),
                                      serialize_observations(obs))))
    files = {}
    for name, text in texts.items():
        write_text(os.path.join(directory, name), text)
        files[name] = sha256_bytes(text.encode("utf-8"))
    traj = campaign.trajectory
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": "campaign",
        "inputs": dict(inputs or {}),
        "files": files,
        "counts": {"control_points": len(cps), "trajectory": len(trj), "observations": len(obs)},
        "passes": [
            {"pass": k, "t_start_s": lo, "t_end_s": hi}
            for k, (lo, hi) in traj.pass_ranges().items()
        ],
        "config": config,
    }
    write_text(os.path.join(directory, MANIFEST), serialize_json(manifest))
    return manifest


@dataclass
class LoadedCampaign:
    dataset: CalibrationDataset
    trajectory: Trajectory
    control_sigmas: dict
    manifest: dict
    hashes: dict
    observation_lines: np.ndarray

    def pass_window(self, k):
        for p in (self.manifest or {}).get("passes", []):
            if p.get("pass") == k:
                return float(p["t_start_s"]), float(p["t_end_s"])
        return None


def load_campaign(directory, noise_model=None):
    """Parse a campaign directory into a :class:`CalibrationDataset`.

    Observation poses are interpolated from the trajectory at each ``t_s``.
    The manifest is optional; without one there is no per-pass metadata.
    """
    texts, hashes = {}, {}
    for name in CAMPAIGN_FILES:
        path = os.path.join(directory, name)
        texts[name] = read_text(path)
        hashes[name] = sha256_bytes(texts[name].encode("utf-8"))
    mpath = os.path.join(directory, MANIFEST)
    manifest = None
    if os.path.exists(mpath):
        manifest = parse_json(read_text(mpath), mpath, kind="campaign")

    cpath, tpath, opath = (os.path.join(directory, name) for name in CAMPAIGN_FILES)
    cps = parse_control_points(texts["control_points.csv"], cpath)
    trj = parse_trajectory(texts["trajectory.csv"], tpath)
    obs = parse_observations(texts["observations.csv"], opath)
    if not trj:
        raise FormatError("trajectory has no samples", tpath, 2)

    points = {r.id: np.array([r.x_m, r.y_m, r.z_m]) for r in cps}
    sigmas = {r.id: r.sigma_mm * 1e-3 for r in cps}
    tr = np.array([astuple(r) for r in trj], dtype=float)
    trajectory = Trajectory(tr[:, 0], tr[:, 1:4], np.deg2rad(tr[:, 4:7]))

    t = np.array([r.t_s for r in obs], dtype=float)
    for j, r in enumerate(obs):
        if r.control_point_id not in points:
            raise FormatError(f"unknown control point {r.control_point_id!r}", opath, j + 2)
        if not trajectory.t[0] <= r.t_s <= trajectory.t[-1]:
            raise FormatError(f"t_s {r.t_s!r} outside the trajectory span", opath, j + 2)
    pos, att = trajectory.interpolate(t) if t.size else (np.zeros((0, 3)), np.zeros((0, 3)))
    try:
        dataset = CalibrationDataset(
            t=t,
            rho=[r.rho_m for r in obs],
            alpha=np.deg2rad([r.alpha_deg for r in obs]),
            beta=np.deg2rad([r.beta_deg for r in obs]),
            positions=pos, attitudes=att,
            point_ids=[r.control_point_id for r in obs],
            control_points=points,
            noise_model=noise_model or NoiseModel(),
        )
    except InvalidInputError as exc:
        raise FormatError(str(exc), opath) from None
    return LoadedCampaign(dataset, trajectory, sigmas, manifest, hashes,
                          np.arange(2, len(obs) + 2))
