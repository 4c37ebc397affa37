"""Command-line interface.

Subcommands: make-leadfield, simulate, solve, ramus, params, metrics,
report, sweep.  All randomness is controlled by explicit seeds and every
command exits 0 on success.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import fileio
from .errors import CepramusError
from .forward import (
    NoiseSpec,
    ShellModel,
    ball_source_space,
    build_leadfield,
    fibonacci_cap_layout,
    preset_configuration,
    simulate_measurement,
)
from .harness import load_config, run_experiment, sweep
from .hyperprior import (
    REFERENCE_KAPPA,
    expectation_ratio,
    solve_kappa_match,
    theta_from_noise,
)
from .metrics import evaluate_estimate
from .model import Dipole, DipoleConfig, HyperParams, MeasurementVector, Updater
from .multires import RamusConfig, ScalingMode, run_ramus
from .solvers import run_cep


def _add_model_args(parser):
    parser.add_argument("--radii", type=float, nargs=3, default=(82.0, 86.0, 92.0),
                        metavar=("R1", "R2", "R3"), help="shell radii in mm")
    parser.add_argument("--conductivities", type=float, nargs=3,
                        default=(0.33, 0.0042, 0.33), metavar=("S1", "S2", "S3"),
                        help="shell conductivities in S/m")
    parser.add_argument("--series-terms", type=int, default=200)
    parser.add_argument("--electrodes", type=int, default=128)
    parser.add_argument("--cap-degrees", type=float, default=120.0)
    parser.add_argument("--n-sources", type=int, default=1000)
    parser.add_argument("--source-radius", type=float, default=78.0)
    parser.add_argument("--source-seed", type=int, default=101)


def _model_from_args(args):
    model = ShellModel(radii=tuple(args.radii),
                       conductivities=tuple(args.conductivities),
                       series_terms=args.series_terms)
    layout = fibonacci_cap_layout(args.electrodes, radius=model.outer_radius,
                                  cap_extent=np.radians(args.cap_degrees))
    space = ball_source_space(args.n_sources, radius=args.source_radius,
                              seed=args.source_seed)
    return model, layout, space


def _cmd_make_leadfield(args) -> int:
    model, layout, space = _model_from_args(args)
    leadfield = build_leadfield(model, space, layout)
    meta = fileio.write_leadfield(args.out, leadfield)
    print(f"wrote {args.out} ({leadfield.n_channels} x {leadfield.n_cols}) "
          f"and sidecar {meta}")
    return 0


def _parse_dipole(spec: str) -> Dipole:
    """Parse 'px,py,pz;mx,my,mz;amplitude' (mm, unit vector, A*m)."""
    parts = spec.split(";")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(
            "dipole spec must be 'px,py,pz;mx,my,mz;amplitude'")
    position = np.array([float(v) for v in parts[0].split(",")])
    moment = np.array([float(v) for v in parts[1].split(",")])
    moment = moment / np.linalg.norm(moment)
    return Dipole(position=position, moment=moment, amplitude=float(parts[2]))


def _cmd_simulate(args) -> int:
    leadfield = fileio.read_leadfield(args.leadfield, sidecar=args.sidecar)
    if args.preset is not None:
        config = preset_configuration(args.preset, leadfield.source_space)
    elif args.dipole:
        config = DipoleConfig(dipoles=tuple(args.dipole), label="custom")
    else:
        print("simulate: provide --preset or at least one --dipole", file=sys.stderr)
        return 2
    sim = simulate_measurement(leadfield, config,
                               NoiseSpec(rel_std=args.noise, seed=args.seed))
    fileio.write_measurement_csv(args.out_measurement, sim.measurement)
    fileio.write_truth_json(args.out_truth, config, seed=sim.seed,
                            scale_to_unit=sim.measurement.scale_to_unit,
                            noise_rel_std=args.noise,
                            snap_distances_mm=sim.snap_distances_mm,
                            snap_warning=sim.snap_warning)
    if sim.snap_warning:
        print(f"warning: dipole snapped more than 5 mm "
              f"(distances {[round(d, 2) for d in sim.snap_distances_mm]})")
    print(f"wrote {args.out_measurement} and {args.out_truth}")
    return 0


def _hyper_params_from_toml(path) -> tuple[HyperParams, int]:
    raw = tomllib.loads(Path(path).read_text(encoding="utf-8"))
    from .hyperprior import reference_theta

    q = int(raw.get("q", 2))
    hp = HyperParams(
        q=q,
        kappa=float(raw.get("kappa", REFERENCE_KAPPA)),
        theta=float(raw.get("theta", reference_theta(q))),
        sigma=float(raw.get("sigma", 0.05)),
        outer_iters=int(raw.get("outer_iters", 10)),
        inner_lasso_iters=int(raw.get("inner_lasso_iters", 15)),
        updater=Updater(raw.get("updater", "em")),
        park_sigma_scaling=bool(raw.get("park_sigma_scaling", True)),
    )
    return hp, int(raw.get("seed", 0))


def _load_measurement(path, sigma: float) -> MeasurementVector:
    values = fileio.read_measurement_csv(path)
    return MeasurementVector(values=values, scale_to_unit=1.0,
                             noise_rel_std=min(sigma, 0.999))


def _cmd_solve(args) -> int:
    leadfield = fileio.read_leadfield(args.leadfield, sidecar=args.sidecar)
    hp, _ = _hyper_params_from_toml(args.config)
    y = fileio.read_measurement_csv(args.measurement)
    result = run_cep(leadfield, y, hp)
    fileio.write_estimate_csv(args.out_estimate, result.estimate,
                              leadfield.source_space)
    fileio.write_trace_csv(args.out_trace, result.trace)
    print(f"wrote {args.out_estimate} and {args.out_trace}")
    return 0


def _cmd_ramus(args) -> int:
    leadfield = fileio.read_leadfield(args.leadfield, sidecar=args.sidecar)
    hp, _ = _hyper_params_from_toml(args.config)
    y = fileio.read_measurement_csv(args.measurement)
    cfg = RamusConfig(decompositions=args.decompositions, sparsity=args.sparsity,
                      coarsest_count=args.coarsest,
                      scaling_mode=ScalingMode(args.scaling))
    result = run_ramus(leadfield, y, hp, cfg, master_seed=args.master_seed,
                       workers=args.workers)
    fileio.write_estimate_csv(args.out_estimate, result.estimate,
                              leadfield.source_space)
    archive = {
        "master_seed": args.master_seed,
        "scale": result.scale,
        "decompositions": [
            {
                "seed": seed,
                "levels": [
                    {
                        "step_norm": trace.step_norm.tolist(),
                        "misfit": trace.misfit.tolist(),
                        "penalty": trace.penalty.tolist(),
                        "log_posterior": trace.log_posterior.tolist(),
                    }
                    for trace in traces
                ],
            }
            for seed, traces in zip(result.decomposition_seeds, result.traces)
        ],
    }
    Path(args.out_traces).write_text(json.dumps(archive) + "\n", encoding="utf-8")
    print(f"wrote {args.out_estimate} and {args.out_traces}")
    return 0


def _cmd_params(args) -> int:
    kappa = solve_kappa_match() if args.kappa is None else args.kappa
    payload = {
        "kappa": kappa,
        "expectation_ratio": expectation_ratio(args.q, kappa),
        "theta": theta_from_noise(args.rel_noise, args.amplitude, kappa, args.q),
        "q": args.q,
        "rel_noise": args.rel_noise,
        "amplitude_am": args.amplitude,
    }
    print(json.dumps(payload, indent=2))
    return 0


def _cmd_metrics(args) -> int:
    leadfield = fileio.read_leadfield(args.leadfield, sidecar=args.sidecar)
    coeffs = fileio.read_estimate_csv(args.estimate)
    truth, meta = fileio.read_truth_json(args.truth)
    scale = meta.get("scale_to_unit")
    if args.unscale and scale:
        coeffs = coeffs / scale
    report = evaluate_estimate(coeffs, leadfield.source_space, truth,
                               roi_radius=args.roi_radius,
                               emd_limit=args.emd_limit,
                               seed=meta.get("seed"))
    fileio.write_report_json(args.out, report)
    print(f"wrote {args.out}")
    return 0


def _cmd_report(args) -> int:
    import csv as _csv

    reports = [fileio.read_report_json(p) for p in sorted(args.reports)]
    if not reports:
        print("report: no input reports", file=sys.stderr)
        return 2
    n_dipoles = len(reports[0].per_dipole)
    measures = ["position_error_mm", "angle_error_deg", "amplitude_log_ratio",
                "hard_threshold_fraction", "emd_mm"]
    with Path(args.out_boxplot).open("w", newline="", encoding="utf-8") as fh:
        writer = _csv.writer(fh)
        writer.writerow(["measure", "dipole", "q05", "q25", "q50", "q75", "q95"])
        for measure in measures:
            indices = (-1,) if measure == "emd_mm" else range(n_dipoles)
            for di in indices:
                if measure == "emd_mm":
                    values = np.array([r.emd_mm for r in reports])
                else:
                    values = np.array([getattr(r.per_dipole[di], measure)
                                       for r in reports])
                qs = np.quantile(values, (0.05, 0.25, 0.5, 0.75, 0.95))
                writer.writerow([measure, di, *[repr(float(v)) for v in qs]])
    with Path(args.out_histogram).open("w", newline="", encoding="utf-8") as fh:
        writer = _csv.writer(fh)
        writer.writerow(["measure", "dipole", "bin_left", "bin_right", "count"])
        for measure in measures:
            indices = (-1,) if measure == "emd_mm" else range(n_dipoles)
            for di in indices:
                if measure == "emd_mm":
                    values = np.array([r.emd_mm for r in reports])
                else:
                    values = np.array([getattr(r.per_dipole[di], measure)
                                       for r in reports])
                counts, edges = np.histogram(values, bins=args.bins)
                for b in range(args.bins):
                    writer.writerow([measure, di, repr(float(edges[b])),
                                     repr(float(edges[b + 1])), int(counts[b])])
    print(f"wrote {args.out_boxplot} and {args.out_histogram}")
    return 0


def _cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    manifest = sweep(cfg, force=args.force, log=sys.stderr)
    if manifest["n_failed"]:
        print(f"sweep finished with {manifest['n_failed']} failed cells",
              file=sys.stderr)
        return 1
    print(f"sweep complete: outputs under {cfg.directory}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cepramus",
        description="Sparse hierarchical-Bayesian source localization on an "
                    "analytic three-shell sphere with randomized "
                    "multiresolution scanning.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-leadfield", help="build and store a spherical leadfield")
    _add_model_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_make_leadfield)

    p = sub.add_parser("simulate", help="synthesize a noisy measurement")
    p.add_argument("--leadfield", required=True)
    p.add_argument("--sidecar", default=None)
    p.add_argument("--preset", choices=("I", "II"), default=None)
    p.add_argument("--dipole", action="append", type=_parse_dipole, default=[],
                   help="explicit dipole 'px,py,pz;mx,my,mz;amplitude'")
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-measurement", required=True)
    p.add_argument("--out-truth", required=True)
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("solve", help="single-grid reconstruction")
    p.add_argument("--leadfield", required=True)
    p.add_argument("--sidecar", default=None)
    p.add_argument("--measurement", required=True)
    p.add_argument("--config", required=True, help="TOML solver parameters")
    p.add_argument("--out-estimate", required=True)
    p.add_argument("--out-trace", required=True)
    p.set_defaults(func=_cmd_solve)

    p = sub.add_parser("ramus", help="multiresolution-averaged reconstruction")
    p.add_argument("--leadfield", required=True)
    p.add_argument("--sidecar", default=None)
    p.add_argument("--measurement", required=True)
    p.add_argument("--config", required=True, help="TOML solver parameters")
    p.add_argument("--decompositions", type=int, default=25)
    p.add_argument("--sparsity", type=float, default=10.0)
    p.add_argument("--coarsest", type=int, default=10)
    p.add_argument("--scaling", choices=("datafit", "geometric"), default="datafit")
    p.add_argument("--master-seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out-estimate", required=True)
    p.add_argument("--out-traces", required=True)
    p.set_defaults(func=_cmd_ramus)

    p = sub.add_parser("params", help="hyperprior shape/scale selection")
    p.add_argument("--q", type=int, choices=(1, 2), required=True)
    p.add_argument("--rel-noise", type=float, required=True)
    p.add_argument("--amplitude", type=float, default=1e-8)
    p.add_argument("--kappa", type=float, default=None,
                   help="skip the shape search and use this value")
    p.set_defaults(func=_cmd_params)

    p = sub.add_parser("metrics", help="evaluate an estimate against truth")
    p.add_argument("--leadfield", required=True)
    p.add_argument("--sidecar", default=None)
    p.add_argument("--estimate", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--roi-radius", type=float, default=30.0)
    p.add_argument("--emd-limit", type=float, default=45.0)
    p.add_argument("--no-unscale", dest="unscale", action="store_false",
                   help="skip converting the estimate to physical units")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_metrics)

    p = sub.add_parser("report", help="aggregate report JSONs into figure data")
    p.add_argument("--reports", nargs="+", required=True)
    p.add_argument("--bins", type=int, default=20)
    p.add_argument("--out-boxplot", required=True)
    p.add_argument("--out-histogram", required=True)
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("sweep", help="run a full experiment config")
    p.add_argument("--config", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=_cmd_sweep)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CepramusError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
