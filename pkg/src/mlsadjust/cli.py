"""Command-line interface: ``mlsadjust simulate|calibrate|adjust|evaluate|run``.

Exit status: 0 success, 1 unexpected failure, 2 malformed input file,
3 invalid configuration or arguments, 4 numerical failure (including
non-convergence, reported after the output is written), 5 I/O failure.
"""

from __future__ import annotations

import argparse
import os
import sys
import time

import numpy as np

from . import __version__
from .config import RunConfig, boresight_from_dict, boresight_to_dict, load_config
from .exceptions import (
    ConfigurationError,
    DegenerateGeometryError,
    EmptyCampaignError,
    FormatError,
    IllConditionedError,
    InsufficientSampleError,
    InvalidInputError,
    MLSError,
    UnderdeterminedError,
    UnidentifiableGeometryError,
)
from .fimloe import calibrate
from .io import (
    FORMAT_VERSION,
    ControlPointRecord,
    load_campaign,
    parse_json,
    read_text,
    serialize_control_points,
    serialize_json,
    sha256_bytes,
    sha256_file,
    write_campaign,
    write_text,
)
from .pipeline import adjust
from .simkit import scan_campaign
from .stats import AXES, compare_methods

__all__ = ["main", "build_parser", "EXIT_CODES"]

EXIT_CODES = {"ok": 0, "error": 1, "format": 2, "config": 3, "numerical": 4, "io": 5}
_NUMERICAL = (IllConditionedError, UnderdeterminedError, UnidentifiableGeometryError,
              DegenerateGeometryError)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CODES["config"], f"{self.prog}: error: {message}\n")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON run configuration")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("--alpha", type=float, help="test significance level (default 0.05)")
    common.add_argument("--timings", action="store_true",
                        help="add wall-clock timings to reports (breaks byte-identical reruns)")

    method = argparse.ArgumentParser(add_help=False)
    method.add_argument("--method", action="append", metavar="NAME",
                        help="LS, TLS, RWTLS or RWTLS-FIMLOE; repeat for several")
    sel = argparse.ArgumentParser(add_help=False)
    sel.add_argument("--pass", dest="drive_pass", type=int, metavar="K",
                     help="use only drive-pass K (default: pool every pass)")

    p = _Parser(prog="mlsadjust", description="Mobile laser scanning boresight calibration "
                                              "and control-point adjustment.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", parents=[common], help="write a synthetic campaign")
    s.add_argument("--seed", type=int, help="override the scenario seed")

    c = sub.add_parser("calibrate", parents=[common, sel], help="estimate the boresight")
    c.add_argument("campaign", help="campaign directory")

    a = sub.add_parser("adjust", parents=[common, method, sel],
                       help="adjust a campaign and score it against the control points")
    a.add_argument("campaign", help="campaign directory")
    a.add_argument("--calibration", metavar="PATH", help="calibration.json (for RWTLS-FIMLOE)")

    e = sub.add_parser("evaluate", parents=[common], help="compare run reports")
    e.add_argument("reports", nargs="+", help="report.json files")

    r = sub.add_parser("run", parents=[common, method, sel],
                       help="simulate, calibrate, adjust and evaluate in one go")
    r.add_argument("--seed", type=int, help="override the scenario seed")
    return p


def _config(args, base=None):
    """``--config`` (else ``base``, else defaults) with command-line overrides."""
    if args.config is not None or base is None:
        cfg = load_config(args.config)
    else:
        cfg = base
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    overrides = {}
    if getattr(args, "method", None):
        overrides["methods"] = tuple(args.method)
    if args.alpha is not None:
        overrides["alpha"] = args.alpha
    if getattr(args, "drive_pass", None) is not None:
        overrides["drive_pass"] = args.drive_pass
    if args.out is not None:
        overrides["output_dir"] = args.out
    return cfg.replace(**overrides) if overrides else cfg


def _echo(cfg):
    """Config recorded in outputs; the output location is left out so reruns
    into another directory stay byte-identical."""
    d = cfg.to_dict()
    d.pop("output_dir")
    return d


def _config_inputs(args):
    return {"config": None if args.config is None else sha256_file(args.config)}


def _select(loaded, cfg, point_subset=False):
    data = loaded.dataset
    if cfg.drive_pass is not None:
        window = loaded.pass_window(cfg.drive_pass)
        if window is None:
            raise ConfigurationError(f"campaign has no drive-pass {cfg.drive_pass}")
        data = data.select(time_range=window)
    if point_subset and cfg.control_point_subset is not None:
        data = data.select(point_ids=cfg.control_point_subset)
    if len(data) == 0:
        raise ConfigurationError("selection leaves no observations")
    return data


def _load(directory, cfg):
    if not os.path.isdir(directory):
        raise FileNotFoundError(f"campaign directory not found: {directory}")
    return load_campaign(directory, cfg.scenario.sensor.noise_model())


def _configured(args, directory):
    """Config for a command reading a campaign; defaults to the one it was made with."""
    base = None
    mpath = os.path.join(directory, "manifest.json")
    if args.config is None and os.path.exists(mpath):
        recorded = parse_json(read_text(mpath), mpath, kind="campaign").get("config")
        if recorded is not None:
            base = RunConfig.from_dict(recorded)
    return _config(args, base)


def _campaign_inputs(loaded, args):
    out = dict(_config_inputs(args))
    out.update(loaded.hashes)
    return out


def cmd_simulate(args):
    cfg = _config(args)
    out = cfg.output_dir
    t0 = time.perf_counter()
    campaign = scan_campaign(cfg.scenario)
    manifest = write_campaign(out, campaign, _echo(cfg), _config_inputs(args))
    if args.timings:
        manifest["timings_s"] = {"simulate": time.perf_counter() - t0}
        write_text(os.path.join(out, "manifest.json"), serialize_json(manifest))
    print(f"wrote {manifest['counts']['observations']} observations of "
          f"{manifest['counts']['control_points']} control points to {out}")
    return EXIT_CODES["ok"]


def _calibration_doc(cfg, cal, inputs, timings=None):
    cov = np.array(cal.covariance, dtype=float)
    scale = np.array([np.rad2deg(1.0)] * 3 + [1.0] * 6)
    res = np.asarray(cal.residuals, dtype=float).reshape(-1, 3)
    norms = np.linalg.norm(res, axis=1)
    doc = {
        "format_version": FORMAT_VERSION,
        "kind": "calibration",
        "inputs": inputs,
        "pass": cfg.drive_pass,
        "control_point_subset": (None if cfg.control_point_subset is None
                                 else list(cfg.control_point_subset)),
        "psi": boresight_to_dict(cal.psi_hat),
        "covariance": (cov * scale[:, None] * scale[None, :]).tolist(),
        "covariance_order": ["omega_deg", "phi_deg", "kappa_deg", "lever_x_m", "lever_y_m",
                             "lever_z_m", "mirror_x_m", "mirror_y_m", "mirror_z_m"],
        "converged": bool(cal.converged),
        "termination": cal.termination,
        "iterations": int(cal.iterations),
        "cost": cal.cost,
        "initial_cost": cal.initial_cost,
        "gradient_norm": cal.gradient_norm,
        "neg_log_likelihood": cal.neg_log_likelihood,
        "n_observations": int(cal.n_observations),
        "cost_history": list(cal.cost_history),
        "residual_summary": {
            "rms_m": np.sqrt(np.mean(res ** 2, axis=0)).tolist() if res.size else [0.0] * 3,
            "rms_3d_m": float(np.sqrt(np.mean(norms ** 2))) if res.size else 0.0,
            "max_3d_m": float(norms.max()) if res.size else 0.0,
        },
    }
    if timings is not None:
        doc["timings_s"] = timings
    return doc


def _run_calibration(cfg, loaded, inputs, timings):
    data = _select(loaded, cfg, point_subset=True)
    t0 = time.perf_counter()
    cal = calibrate(data, cfg.nominal_boresight, cfg.calibrator)
    elapsed = {"calibrate": time.perf_counter() - t0} if timings else None
    return cal, _calibration_doc(cfg, cal, inputs, elapsed)


def cmd_calibrate(args):
    cfg = _configured(args, args.campaign)
    loaded = _load(args.campaign, cfg)
    cal, doc = _run_calibration(cfg, loaded, _campaign_inputs(loaded, args), args.timings)
    os.makedirs(cfg.output_dir, exist_ok=True)
    path = os.path.join(cfg.output_dir, "calibration.json")
    write_text(path, serialize_json(doc))
    print(f"calibration written to {path} (converged={cal.converged}, "
          f"iterations={cal.iterations})")
    return EXIT_CODES["ok"] if cal.converged else EXIT_CODES["numerical"]


def _read_calibration(path):
    text = read_text(path)
    doc = parse_json(text, path, kind="calibration")
    try:
        psi = boresight_from_dict(doc["psi"])
    except (KeyError, TypeError, ValueError, ConfigurationError, InvalidInputError) as exc:
        raise FormatError(f"malformed calibration psi: {exc}", path) from None
    return psi, doc, sha256_bytes(text.encode("utf-8"))


def _method_report(res, cfg):
    sol = res.solution
    points = []
    e_n, e_e, e_u = res.axis_errors
    for j, pid in enumerate(res.point_ids):
        x, y, z = res.estimates[j]
        points.append({
            "id": pid, "x_m": x, "y_m": y, "z_m": z,
            "sigma_mm": res.estimate_sigmas[j] * 1e3,
            "e_n_cm": e_n[j], "e_e_cm": e_e[j], "e_u_cm": e_u[j],
        })
    return {
        "boresight": boresight_to_dict(res.boresight),
        "phi": list(res.phi),
        "used_control_points": list(res.used_ids),
        "convergence": {
            "converged": bool(sol.converged),
            "iterations": int(sol.iterations),
            "final_step_norm": sol.final_step_norm,
            "sigma0_sq": sol.sigma0_sq,
            "objective_history": list(sol.objective_history),
            "scale_degenerate": bool(sol.scale_degenerate),
        },
        "points": points,
        "rms_3d_cm": res.rms_3d,
        "statistics": {axis: rep.to_dict() for axis, rep in res.reports.items()},
    }


def _adjust_all(cfg, loaded, calibration, inputs, timings):
    data = _select(loaded, cfg)
    methods = {}
    elapsed = {}
    converged = True
    for method in cfg.methods:
        if method == "RWTLS-FIMLOE":
            if calibration is None:
                raise ConfigurationError("RWTLS-FIMLOE needs --calibration")
            b = calibration
        else:
            b = cfg.nominal_boresight
        t0 = time.perf_counter()
        res = adjust(data, method, b, loaded.control_sigmas, subset=cfg.control_point_subset,
                     solver_options=cfg.solver, evaluate_ids=data.observed_ids,
                     sigma0_h=cfg.sigma0_h, sigma0_v=cfg.sigma0_v, alpha=cfg.alpha)
        elapsed[method] = time.perf_counter() - t0
        converged &= bool(res.solution.converged)
        methods[method] = (res, _method_report(res, cfg))
    doc = {
        "format_version": FORMAT_VERSION,
        "kind": "run",
        "inputs": inputs,
        "config": _echo(cfg),
        "alpha": cfg.alpha,
        "sigma0_cm": {"horizontal": cfg.sigma0_h, "vertical": cfg.sigma0_v},
        "methods": {m: rep for m, (_, rep) in methods.items()},
    }
    if timings:
        doc["timings_s"] = elapsed
    return methods, doc, converged


def _write_adjusted(out, methods):
    for method, (res, _) in methods.items():
        recs = [ControlPointRecord(pid, *res.estimates[j], res.estimate_sigmas[j] * 1e3)
                for j, pid in enumerate(res.point_ids)]
        write_text(os.path.join(out, f"adjusted_{method}.csv"), serialize_control_points(recs))


def cmd_adjust(args):
    cfg = _configured(args, args.campaign)
    if "RWTLS-FIMLOE" in cfg.methods and args.calibration is None:
        raise ConfigurationError("RWTLS-FIMLOE needs --calibration")
    loaded = _load(args.campaign, cfg)
    inputs = _campaign_inputs(loaded, args)
    psi = None
    if args.calibration is not None:
        psi, _, digest = _read_calibration(args.calibration)
        inputs["calibration.json"] = digest
    methods, doc, converged = _adjust_all(cfg, loaded, psi, inputs, args.timings)
    os.makedirs(cfg.output_dir, exist_ok=True)
    write_text(os.path.join(cfg.output_dir, "report.json"), serialize_json(doc))
    _write_adjusted(cfg.output_dir, methods)
    for method, (res, _) in methods.items():
        print(f"{method:>13s}  3D RMS {res.rms_3d:.4f} cm")
    return EXIT_CODES["ok"] if converged else EXIT_CODES["numerical"]


def _format_table(comparison):
    cols = ("mean", "stdev", "rms", "tau", "tau_critical", "tau_reject", "chi2",
            "chi2_critical", "chi2_reject", "sigma_achieved")
    lines = ["method         axis " + " ".join(f"{c:>14s}" for c in cols)]
    for method, by_axis in comparison["reports"].items():
        for axis in AXES:
            rep = by_axis[axis]
            cells = []
            for c in cols:
                v = getattr(rep, c)
                cells.append(f"{str(v):>14s}" if isinstance(v, bool) else f"{v:14.6f}")
            lines.append(f"{method:<14s} {axis:<4s} " + " ".join(cells))
    gains = comparison["improvement"]
    if any(gains.values()):
        lines.append("")
        lines.append("improvement of sigma_achieved (percent)")
        lines.append("reference      method         " + " ".join(f"{a:>9s}" for a in AXES))
        for ref, others in gains.items():
            for method, by_axis in others.items():
                lines.append(f"{ref:<14s} {method:<14s} "
                             + " ".join(f"{by_axis[a]:9.3f}" for a in AXES))
    return "\n".join(lines) + "\n"


def _evaluate(docs, alpha, sigma0_h, sigma0_v):
    samples = {}
    for name, doc in docs:
        for method, rep in doc.get("methods", {}).items():
            label = method if method not in samples else f"{method}@{name}"
            k = 2
            while label in samples:
                label = f"{method}@{name}#{k}"
                k += 1
            try:
                pts = rep["points"]
                samples[label] = tuple(np.array([p[key] for p in pts], dtype=float)
                                       for key in ("e_n_cm", "e_e_cm", "e_u_cm"))
            except (KeyError, TypeError, ValueError) as exc:
                raise FormatError(f"malformed method section {method!r}: {exc}", name) from None
    if not samples:
        raise ConfigurationError("no method sections in the given reports")
    return compare_methods(samples, sigma0_h, sigma0_v, alpha)


def _comparison_doc(comparison, inputs, alpha, sigma0_h, sigma0_v):
    return {
        "format_version": FORMAT_VERSION,
        "kind": "comparison",
        "inputs": inputs,
        "alpha": alpha,
        "sigma0_cm": {"horizontal": sigma0_h, "vertical": sigma0_v},
        "reports": {m: {a: r.to_dict() for a, r in by.items()}
                    for m, by in comparison["reports"].items()},
        "improvement": comparison["improvement"],
    }


def _write_comparison(out, docs, inputs, cfg_alpha, cfg_sigma):
    comparison = _evaluate(docs, cfg_alpha, *cfg_sigma)
    os.makedirs(out, exist_ok=True)
    write_text(os.path.join(out, "comparison.json"),
               serialize_json(_comparison_doc(comparison, inputs, cfg_alpha, *cfg_sigma)))
    table = _format_table(comparison)
    write_text(os.path.join(out, "comparison.txt"), table)
    return table


def cmd_evaluate(args):
    docs, inputs = [], dict(_config_inputs(args))
    for k, path in enumerate(args.reports):
        text = read_text(path)
        name = f"report{k + 1}:{os.path.basename(path)}"
        docs.append((os.path.basename(path), parse_json(text, path, kind="run")))
        inputs[name] = sha256_bytes(text.encode("utf-8"))
    if args.config is not None:
        cfg = _config(args)
        alpha, sigma = cfg.alpha, (cfg.sigma0_h, cfg.sigma0_v)
    else:
        first = docs[0][1]
        s0 = first.get("sigma0_cm", {})
        alpha = args.alpha if args.alpha is not None else float(first.get("alpha", 0.05))
        sigma = (float(s0.get("horizontal", 2.0)), float(s0.get("vertical", 3.0)))
    if not 0.0 < alpha < 1.0:
        raise ConfigurationError("alpha must be in (0, 1)")
    out = args.out if args.out is not None else "out"
    table = _write_comparison(out, docs, inputs, alpha, sigma)
    sys.stdout.write(table)
    return EXIT_CODES["ok"]


def cmd_run(args):
    cfg = _config(args)
    out = cfg.output_dir
    campaign_dir = os.path.join(out, "campaign")
    campaign = scan_campaign(cfg.scenario)
    write_campaign(campaign_dir, campaign, _echo(cfg), _config_inputs(args))
    loaded = _load(campaign_dir, cfg)
    inputs = _campaign_inputs(loaded, args)
    status = EXIT_CODES["ok"]
    psi = None
    if "RWTLS-FIMLOE" in cfg.methods:
        cal, cal_doc = _run_calibration(cfg, loaded, inputs, args.timings)
        text = serialize_json(cal_doc)
        write_text(os.path.join(out, "calibration.json"), text)
        inputs = dict(inputs, **{"calibration.json": sha256_bytes(text.encode("utf-8"))})
        psi = cal.psi_hat
        if not cal.converged:
            status = EXIT_CODES["numerical"]
    methods, doc, converged = _adjust_all(cfg, loaded, psi, inputs, args.timings)
    text = serialize_json(doc)
    write_text(os.path.join(out, "report.json"), text)
    _write_adjusted(out, methods)
    table = _write_comparison(out, [("report.json", doc)],
                              {"report.json": sha256_bytes(text.encode("utf-8"))},
                              cfg.alpha, (cfg.sigma0_h, cfg.sigma0_v))
    sys.stdout.write(table)
    if not converged:
        status = EXIT_CODES["numerical"]
    return status


_COMMANDS = {"simulate": cmd_simulate, "calibrate": cmd_calibrate, "adjust": cmd_adjust,
             "evaluate": cmd_evaluate, "run": cmd_run}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except FormatError as exc:
        code, msg = EXIT_CODES["format"], f"format error: {exc}"
    except (ConfigurationError, InvalidInputError, EmptyCampaignError,
            InsufficientSampleError) as exc:
        code, msg = EXIT_CODES["config"], f"configuration error: {exc}"
    except _NUMERICAL as exc:
        code, msg = EXIT_CODES["numerical"], f"numerical failure: {exc}"
    except OSError as exc:
        code, msg = EXIT_CODES["io"], f"I/O error: {exc}"
    except MLSError as exc:
        code, msg = EXIT_CODES["error"], f"error: {exc}"
    print(f"mlsadjust: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
