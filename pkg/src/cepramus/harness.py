"""End-to-end experiment orchestration.

A single TOML config fixes the spherical model, the truth configuration,
the noise protocol, the solver cells (updater and prior degree
combinations), and the multiresolution settings; every random stage
derives its seed from config values, so a rerun writes byte-identical
artifacts.  Cells whose outputs already exist are skipped (and verified
into the manifest), which makes regeneration after deleting a single
cell's files both possible and minimal.

Artifacts per run directory:

    sim/<level>_r<realization>.csv / .truth.json  -- shared measurements
    cells/<cell>/<level>_r<realization>.estimate.csv / .report.json
    aggregate/boxplot.csv, aggregate/histogram.csv
    manifest.json
"""

from __future__ import annotations

import hashlib
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from threadpoolctl import threadpool_limits

from . import fileio
from .errors import ConfigError
from .forward import (
    ElectrodeLayout,
    NoiseSpec,
    ShellModel,
    ball_source_space,
    build_leadfield,
    fibonacci_cap_layout,
    preset_configuration,
    simulate_measurement,
)
from .hyperprior import REFERENCE_KAPPA, reference_theta
from .metrics import evaluate_estimate
from .model import Dipole, DipoleConfig, HyperParams, Updater
from .multires import RamusConfig, ScalingMode, run_ramus
from .seeding import derive_seed

__all__ = [
    "ExperimentConfig",
    "SolverCellConfig",
    "load_config",
    "run_experiment",
    "sweep",
    "quantile_rows",
    "histogram_rows",
]

_QUANTILES = (0.05, 0.25, 0.50, 0.75, 0.95)
_HISTOGRAM_BINS = 20
_MEASURES = ("position_error_mm", "angle_error_deg", "amplitude_log_ratio",
             "hard_threshold_fraction", "emd_mm")


@dataclass(frozen=True)
class SolverCellConfig:
    updater: Updater
    q: int
    kappa: float = REFERENCE_KAPPA
    theta: float | None = None
    sigma: float | None = None  # defaults to the noise level of each run
    outer_iters: int = 10
    inner_lasso_iters: int = 15
    park_sigma_scaling: bool = True

    @property
    def name(self) -> str:
        return f"{self.updater.value}_q{self.q}"

    def hyper_params(self, noise_level: float) -> HyperParams:
        return HyperParams(
            q=self.q,
            kappa=self.kappa,
            theta=reference_theta(self.q) if self.theta is None else self.theta,
            sigma=noise_level if self.sigma is None else self.sigma,
            outer_iters=self.outer_iters,
            inner_lasso_iters=self.inner_lasso_iters,
            updater=self.updater,
            park_sigma_scaling=self.park_sigma_scaling,
        )


@dataclass(frozen=True)
class ExperimentConfig:
    # model block
    radii: tuple[float, float, float] = (82.0, 86.0, 92.0)
    conductivities: tuple[float, float, float] = (0.33, 0.0042, 0.33)
    series_terms: int = 200
    electrodes: int = 128
    cap_degrees: float = 120.0
    n_sources: int = 1000
    source_radius_mm: float = 78.0
    source_seed: int = 101
    # truth block
    preset: str | None = "I"
    explicit_dipoles: tuple[dict, ...] = ()
    # noise block
    noise_levels: tuple[float, ...] = (0.05,)
    realizations: int = 25
    noise_seed: int = 7001
    # solver block
    cells: tuple[SolverCellConfig, ...] = (
        SolverCellConfig(updater=Updater.EM, q=1),
        SolverCellConfig(updater=Updater.EM, q=2),
        SolverCellConfig(updater=Updater.IAS, q=1),
        SolverCellConfig(updater=Updater.IAS, q=2),
    )
    # ramus block
    decompositions: int = 25
    sparsity: float = 10.0
    coarsest: int = 10
    scaling: str = "datafit"
    ramus_seed: int = 9001
    # output block
    directory: str = "run"
    workers: int = 1

    def __post_init__(self):
        if self.realizations < 1:
            raise ConfigError("realizations must be at least 1")
        if not self.noise_levels:
            raise ConfigError("noise level list must be non-empty")
        if self.preset is None and not self.explicit_dipoles:
            raise ConfigError("truth block needs a preset or explicit dipoles")

    def ramus_config(self) -> RamusConfig:
        return RamusConfig(decompositions=self.decompositions,
                           sparsity=self.sparsity,
                           coarsest_count=self.coarsest,
                           scaling_mode=ScalingMode(self.scaling))


def load_config(path) -> ExperimentConfig:
    """Parse a TOML experiment configuration (all keys optional)."""
    raw = tomllib.loads(Path(path).read_text(encoding="utf-8"))
    return config_from_dict(raw, base_dir=Path(path).resolve().parent)


def config_from_dict(raw: dict, base_dir: Path | None = None) -> ExperimentConfig:
    model = raw.get("model", {})
    truth = raw.get("truth", {})
    noise = raw.get("noise", {})
    solver = raw.get("solver", {})
    ramus = raw.get("ramus", {})
    output = raw.get("output", {})

    cells = []
    for cell in solver.get("cells", ()):
        cells.append(SolverCellConfig(
            updater=Updater(cell.get("updater", "em")),
            q=int(cell.get("q", 2)),
            kappa=float(cell.get("kappa", REFERENCE_KAPPA)),
            theta=cell.get("theta"),
            sigma=cell.get("sigma"),
            outer_iters=int(cell.get("outer_iters", 10)),
            inner_lasso_iters=int(cell.get("inner_lasso_iters", 15)),
            park_sigma_scaling=bool(cell.get("park_sigma_scaling", True)),
        ))
    kwargs = {}
    if cells:
        kwargs["cells"] = tuple(cells)

    directory = output.get("directory", "run")
    if base_dir is not None and not Path(directory).is_absolute():
        directory = str(base_dir / directory)

    return ExperimentConfig(
        radii=tuple(model.get("radii", (82.0, 86.0, 92.0))),
        conductivities=tuple(model.get("conductivities", (0.33, 0.0042, 0.33))),
        series_terms=int(model.get("series_terms", 200)),
        electrodes=int(model.get("electrodes", 128)),
        cap_degrees=float(model.get("cap_degrees", 120.0)),
        n_sources=int(model.get("n_sources", 1000)),
        source_radius_mm=float(model.get("source_radius_mm", 78.0)),
        source_seed=int(model.get("source_seed", 101)),
        preset=truth.get("preset", "I" if "dipoles" not in truth else None),
        explicit_dipoles=tuple(truth.get("dipoles", ())),
        noise_levels=tuple(float(v) for v in noise.get("levels", (0.05,))),
        realizations=int(noise.get("realizations", 25)),
        noise_seed=int(noise.get("seed", 7001)),
        decompositions=int(ramus.get("decompositions", 25)),
        sparsity=float(ramus.get("sparsity", 10.0)),
        coarsest=int(ramus.get("coarsest", 10)),
        scaling=str(ramus.get("scaling", "datafit")),
        ramus_seed=int(ramus.get("seed", 9001)),
        directory=str(directory),
        workers=int(output.get("workers", 1)),
        **kwargs,
    )


def _build_problem(cfg: ExperimentConfig):
    model = ShellModel(radii=cfg.radii, conductivities=cfg.conductivities,
                       series_terms=cfg.series_terms)
    layout = fibonacci_cap_layout(cfg.electrodes, radius=model.outer_radius,
                                  cap_extent=np.radians(cfg.cap_degrees))
    space = ball_source_space(cfg.n_sources, radius=cfg.source_radius_mm,
                              seed=cfg.source_seed)
    leadfield = build_leadfield(model, space, layout)
    if cfg.preset is not None:
        truth = preset_configuration(cfg.preset, space)
    else:
        dipoles = tuple(
            Dipole(position=np.asarray(d["position_mm"], dtype=float),
                   moment=np.asarray(d["moment"], dtype=float),
                   amplitude=float(d["amplitude_am"]))
            for d in cfg.explicit_dipoles
        )
        truth = DipoleConfig(dipoles=dipoles, label="custom")
    return model, layout, space, leadfield, truth


def _atomic_write(path: Path, writer) -> None:
    tmp = path.with_name(path.name + ".tmp")
    writer(tmp)
    os.replace(tmp, path)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _run_tag(level_index: int, realization: int) -> str:
    return f"noise{level_index}_r{realization:03d}"


def run_experiment(cfg: ExperimentConfig, force: bool = False,
                   log=None) -> dict:
    """Execute every (cell, noise level, realization) and aggregate.

    Returns the manifest dictionary (also written to ``manifest.json``).
    Existing cell outputs are left untouched unless ``force`` is set.
    Failures are recorded per cell; independent cells still run.
    """
    out = Path(cfg.directory)
    sim_dir = out / "sim"
    agg_dir = out / "aggregate"
    sim_dir.mkdir(parents=True, exist_ok=True)
    agg_dir.mkdir(parents=True, exist_ok=True)

    t_start = time.perf_counter()
    _, _, space, leadfield, truth = _build_problem(cfg)

    simulations = {}
    for li, level in enumerate(cfg.noise_levels):
        for r in range(cfg.realizations):
            seed = derive_seed(cfg.noise_seed, li, r)
            sim = simulate_measurement(leadfield, truth,
                                       NoiseSpec(rel_std=level, seed=seed))
            simulations[(li, r)] = sim
            tag = _run_tag(li, r)
            meas_path = sim_dir / f"{tag}.csv"
            truth_path = sim_dir / f"{tag}.truth.json"
            if force or not meas_path.exists():
                _atomic_write(meas_path,
                              lambda p, s=sim: fileio.write_measurement_csv(p, s.measurement))
            if force or not truth_path.exists():
                _atomic_write(truth_path, lambda p, s=sim: fileio.write_truth_json(
                    p, truth, seed=s.seed,
                    scale_to_unit=s.measurement.scale_to_unit,
                    noise_rel_std=s.measurement.noise_rel_std,
                    snap_distances_mm=s.snap_distances_mm,
                    snap_warning=s.snap_warning))

    jobs = []
    for cell in cfg.cells:
        cell_dir = out / "cells" / cell.name
        cell_dir.mkdir(parents=True, exist_ok=True)
        for li, level in enumerate(cfg.noise_levels):
            for r in range(cfg.realizations):
                jobs.append((cell, li, level, r))

    statuses = {}

    def run_job(job):
        cell, li, level, r = job
        tag = _run_tag(li, r)
        cell_dir = out / "cells" / cell.name
        est_path = cell_dir / f"{tag}.estimate.csv"
        rep_path = cell_dir / f"{tag}.report.json"
        if not force and est_path.exists() and rep_path.exists():
            return (cell.name, tag, "skipped", None)
        try:
            sim = simulations[(li, r)]
            hp = cell.hyper_params(level)
            result = run_ramus(leadfield, sim.measurement, hp,
                               cfg.ramus_config(), master_seed=cfg.ramus_seed,
                               workers=1)
            physical = result.estimate / sim.measurement.scale_to_unit
            report = evaluate_estimate(physical, space, truth,
                                       seed=sim.seed, label=truth.label,
                                       extra={"cell": cell.name,
                                              "noise_level": level,
                                              "realization": r})
            _atomic_write(est_path,
                          lambda p: fileio.write_estimate_csv(p, result.estimate, space))
            _atomic_write(rep_path, lambda p: fileio.write_report_json(p, report))
            return (cell.name, tag, "done", None)
        except Exception as exc:  # noqa: BLE001 - per-cell isolation
            return (cell.name, tag, "failed", f"{type(exc).__name__}: {exc}")

    with threadpool_limits(limits=1):
        if cfg.workers > 1:
            with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
                outcomes = list(pool.map(run_job, jobs))
        else:
            outcomes = [run_job(j) for j in jobs]
    for cell_name, tag, status, error in outcomes:
        statuses[f"{cell_name}/{tag}"] = ({"status": status} if error is None
                                          else {"status": status, "error": error})
        if log is not None and error is not None:
            print(f"[cepramus] {cell_name}/{tag} failed: {error}", file=log)

    reports = _collect_reports(cfg, out)
    box_rows = quantile_rows(cfg, reports)
    hist_rows = histogram_rows(cfg, reports)
    _atomic_write(agg_dir / "boxplot.csv", lambda p: _write_rows(
        p, ("cell", "noise_level", "measure", "dipole",
            "q05", "q25", "q50", "q75", "q95"), box_rows))
    _atomic_write(agg_dir / "histogram.csv", lambda p: _write_rows(
        p, ("cell", "noise_level", "measure", "dipole",
            "bin_left", "bin_right", "count"), hist_rows))

    artifacts = {}
    for path in sorted(out.rglob("*")):
        if path.is_file() and path.name != "manifest.json":
            artifacts[str(path.relative_to(out))] = _sha256(path)

    manifest = {
        "config": _config_echo(cfg),
        "versions": {
            "python": sys.version.split()[0],
            "numpy": np.__version__,
        },
        "cells": statuses,
        "artifacts": artifacts,
        "n_failed": sum(1 for s in statuses.values() if s["status"] == "failed"),
        "elapsed_s": round(time.perf_counter() - t_start, 3),
    }
    _atomic_write(out / "manifest.json", lambda p: p.write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"))
    return manifest


def _config_echo(cfg: ExperimentConfig) -> dict:
    echo = {}
    for key, value in cfg.__dict__.items():
        if isinstance(value, tuple) and value and isinstance(value[0], SolverCellConfig):
            echo[key] = [
                {**{k: (v.value if isinstance(v, Updater) else v)
                    for k, v in c.__dict__.items()}}
                for c in value
            ]
        elif isinstance(value, tuple):
            echo[key] = list(value)
        else:
            echo[key] = value
    return echo


def _collect_reports(cfg: ExperimentConfig, out: Path) -> dict:
    reports = {}
    for cell in cfg.cells:
        for li in range(len(cfg.noise_levels)):
            bundle = []
            for r in range(cfg.realizations):
                path = out / "cells" / cell.name / f"{_run_tag(li, r)}.report.json"
                if path.exists():
                    bundle.append(fileio.read_report_json(path))
            reports[(cell.name, li)] = bundle
    return reports


def _measure_values(bundle, measure, dipole_index):
    if measure == "emd_mm":
        return np.array([rep.emd_mm for rep in bundle])
    return np.array([getattr(rep.per_dipole[dipole_index], measure)
                     for rep in bundle])


def quantile_rows(cfg: ExperimentConfig, reports: dict) -> list:
    """Boxplot rows (5/25/50/75/95 percent quantiles) per cell, level,
    measure, and dipole; the EMD rows use dipole index -1."""
    rows = []
    for (cell_name, li), bundle in sorted(reports.items()):
        if not bundle:
            continue
        level = cfg.noise_levels[li]
        n_dipoles = len(bundle[0].per_dipole)
        for measure in _MEASURES:
            indices = (-1,) if measure == "emd_mm" else range(n_dipoles)
            for di in indices:
                values = _measure_values(bundle, measure, di)
                qs = np.quantile(values, _QUANTILES, method="linear")
                rows.append([cell_name, level, measure, di,
                             *[repr(float(v)) for v in qs]])
    return rows


def histogram_rows(cfg: ExperimentConfig, reports: dict,
                   bins: int = _HISTOGRAM_BINS) -> list:
    rows = []
    for (cell_name, li), bundle in sorted(reports.items()):
        if not bundle:
            continue
        level = cfg.noise_levels[li]
        n_dipoles = len(bundle[0].per_dipole)
        for measure in _MEASURES:
            indices = (-1,) if measure == "emd_mm" else range(n_dipoles)
            for di in indices:
                values = _measure_values(bundle, measure, di)
                counts, edges = np.histogram(values, bins=bins)
                for b in range(bins):
                    rows.append([cell_name, level, measure, di,
                                 repr(float(edges[b])), repr(float(edges[b + 1])),
                                 int(counts[b])])
    return rows


def _write_rows(path: Path, header, rows) -> None:
    import csv

    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def sweep(cfg: ExperimentConfig, force: bool = False, log=None) -> dict:
    """Run the experiment over all configured noise levels and return the
    manifest plus the per-level quantile table."""
    manifest = run_experiment(cfg, force=force, log=log)
    out = Path(cfg.directory)
    reports = _collect_reports(cfg, out)
    manifest["sweep_table"] = quantile_rows(cfg, reports)
    return manifest
