"""On-disk formats: leadfield binary + sidecar, CSVs, and JSON records.

Leadfield binary layout (little-endian): magic ``LFLD``, format version
(u32), channel count m (u32), column count (u32), reference tag (u8;
0 = average, 1 = common electrode, whose index lives in the sidecar),
followed by the gain matrix as row-major float64.  A sidecar text file
(UTF-8 ``key = value`` lines) carries the source positions, orientation
mode, units, and reference details.  A CSV leadfield (header
``channel,col_0,...``) is accepted as an alternative body format with
the same sidecar.
"""

from __future__ import annotations

import csv
import json
import struct
from pathlib import Path

import numpy as np

from .errors import ShapeError
from .model import (
    CurrentEstimate,
    Dipole,
    DipoleConfig,
    LeadField,
    MeasurementVector,
    OrientationMode,
    Reference,
    SourceSpace,
    amplitude_field,
)
from .metrics import MetricsReport
from .solvers import SolverTrace

__all__ = [
    "write_leadfield",
    "read_leadfield",
    "read_leadfield_csv",
    "write_measurement_csv",
    "read_measurement_csv",
    "write_truth_json",
    "read_truth_json",
    "write_estimate_csv",
    "read_estimate_csv",
    "write_trace_csv",
    "write_report_json",
    "read_report_json",
]

_MAGIC = b"LFLD"
_FORMAT_VERSION = 1
_REFERENCE_TAGS = {"average": 0, "common": 1}
_TAG_REFERENCES = {v: k for k, v in _REFERENCE_TAGS.items()}


def sidecar_path(path) -> Path:
    return Path(str(path) + ".meta")


def _write_sidecar(path: Path, leadfield: LeadField) -> None:
    space = leadfield.source_space
    lines = [
        "format = cepramus-leadfield-sidecar",
        "units = V/(A*m)",
        "positions_unit = mm",
        f"orientation_mode = {space.orientation_mode.value}",
        f"reference = {leadfield.reference.kind}",
    ]
    if leadfield.reference.kind == "common":
        lines.append(f"reference_electrode = {leadfield.reference.electrode}")
    lines.append(f"n_sources = {space.n_sources}")
    for i, pos in enumerate(space.positions):
        lines.append(f"position_{i} = {pos[0]!r} {pos[1]!r} {pos[2]!r}")
    if space.constraint_dirs is not None:
        for i, d in enumerate(space.constraint_dirs):
            lines.append(f"constraint_{i} = {d[0]!r} {d[1]!r} {d[2]!r}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _read_sidecar(path: Path) -> dict:
    entries = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        entries[key.strip()] = value.strip()
    return entries


def _space_from_sidecar(entries: dict) -> SourceSpace:
    n = int(entries["n_sources"])
    positions = np.array([
        [float(v) for v in entries[f"position_{i}"].split()] for i in range(n)
    ])
    mode = OrientationMode(entries.get("orientation_mode", "free"))
    dirs = None
    if mode is OrientationMode.CONSTRAINED:
        dirs = np.array([
            [float(v) for v in entries[f"constraint_{i}"].split()] for i in range(n)
        ])
    return SourceSpace(positions=positions, orientation_mode=mode, constraint_dirs=dirs)


def _reference_from_sidecar(entries: dict, tag: int) -> Reference:
    kind = _TAG_REFERENCES.get(tag)
    if kind is None:
        raise ShapeError(f"unknown reference tag {tag}")
    if kind == "common":
        return Reference.common(int(entries["reference_electrode"]))
    return Reference.average()


def write_leadfield(path, leadfield: LeadField) -> Path:
    """Write the binary leadfield and its sidecar; returns the sidecar path."""
    path = Path(path)
    m, cols = leadfield.gain.shape
    header = struct.pack("<4sIIIB", _MAGIC, _FORMAT_VERSION, m, cols,
                         _REFERENCE_TAGS[leadfield.reference.kind])
    body = np.ascontiguousarray(leadfield.gain, dtype="<f8").tobytes()
    path.write_bytes(header + body)
    meta = sidecar_path(path)
    _write_sidecar(meta, leadfield)
    return meta


def read_leadfield(path, sidecar=None) -> LeadField:
    """Read a binary leadfield; the sidecar defaults to ``<path>.meta``."""
    path = Path(path)
    blob = path.read_bytes()
    head_len = struct.calcsize("<4sIIIB")
    magic, version, m, cols, tag = struct.unpack("<4sIIIB", blob[:head_len])
    if magic != _MAGIC:
        raise ShapeError(f"{path} is not a leadfield file (bad magic {magic!r})")
    if version != _FORMAT_VERSION:
        raise ShapeError(f"unsupported leadfield format version {version}")
    expected = head_len + 8 * m * cols
    if len(blob) != expected:
        raise ShapeError(f"leadfield body has {len(blob) - head_len} bytes, "
                         f"expected {8 * m * cols}")
    gain = np.frombuffer(blob, dtype="<f8", offset=head_len).reshape(m, cols)
    entries = _read_sidecar(Path(sidecar) if sidecar else sidecar_path(path))
    space = _space_from_sidecar(entries)
    reference = _reference_from_sidecar(entries, tag)
    return LeadField(gain=gain.astype(float), source_space=space, reference=reference)


def read_leadfield_csv(path, sidecar) -> LeadField:
    """Read a CSV leadfield (header ``channel,col_0,...``) plus sidecar."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not header or header[0] != "channel":
            raise ShapeError("leadfield CSV must start with a 'channel' header column")
        rows = [[float(v) for v in row[1:]] for row in reader if row]
    gain = np.asarray(rows, dtype=float)
    entries = _read_sidecar(Path(sidecar))
    space = _space_from_sidecar(entries)
    kind = entries.get("reference", "average")
    reference = (Reference.common(int(entries["reference_electrode"]))
                 if kind == "common" else Reference.average())
    return LeadField(gain=gain, source_space=space, reference=reference)


def write_measurement_csv(path, measurement: MeasurementVector) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["channel", "value"])
        for i, v in enumerate(measurement.values):
            writer.writerow([i, repr(float(v))])


def read_measurement_csv(path) -> np.ndarray:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader)
        values = [float(row[1]) for row in reader if row]
    return np.asarray(values, dtype=float)


def write_truth_json(path, config: DipoleConfig, *, seed: int | None = None,
                     scale_to_unit: float | None = None,
                     noise_rel_std: float | None = None,
                     snap_distances_mm=None, snap_warning: bool | None = None) -> None:
    data = {
        "label": config.label,
        "dipoles": [
            {
                "position_mm": [float(v) for v in d.position],
                "moment": [float(v) for v in d.moment],
                "amplitude_am": float(d.amplitude),
            }
            for d in config.dipoles
        ],
        "seed": seed,
        "scale_to_unit": scale_to_unit,
        "noise_rel_std": noise_rel_std,
        "snap_distances_mm": (None if snap_distances_mm is None
                              else [float(v) for v in snap_distances_mm]),
        "snap_warning": snap_warning,
    }
    Path(path).write_text(json.dumps(data, indent=2) + "\n", encoding="utf-8")


def read_truth_json(path):
    """Returns ``(DipoleConfig, metadata dict)``."""
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    dipoles = tuple(
        Dipole(position=np.array(d["position_mm"]), moment=np.array(d["moment"]),
               amplitude=d["amplitude_am"])
        for d in data["dipoles"]
    )
    config = DipoleConfig(dipoles=dipoles, label=data.get("label", ""))
    meta = {k: data.get(k) for k in ("seed", "scale_to_unit", "noise_rel_std",
                                     "snap_distances_mm", "snap_warning")}
    return config, meta


def write_estimate_csv(path, estimate, space: SourceSpace) -> None:
    """Columns: position index, coefficient components, amplitude."""
    coeffs = estimate.coeffs if isinstance(estimate, CurrentEstimate) else np.asarray(estimate)
    amps = amplitude_field(coeffs, space)
    comps = space.components_per_source
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        if comps == 3:
            writer.writerow(["index", "x", "y", "z", "amplitude"])
            blocks = coeffs.reshape(space.n_sources, 3)
            for i, (vec, amp) in enumerate(zip(blocks, amps)):
                writer.writerow([i, repr(vec[0]), repr(vec[1]), repr(vec[2]), repr(float(amp))])
        else:
            writer.writerow(["index", "coefficient", "amplitude"])
            for i, (v, amp) in enumerate(zip(coeffs, amps)):
                writer.writerow([i, repr(float(v)), repr(float(amp))])


def read_estimate_csv(path) -> np.ndarray:
    """Coefficient vector from an estimate CSV (free or constrained layout)."""
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        n_comp = len(header) - 2
        rows = [[float(v) for v in row[1:1 + n_comp]] for row in reader if row]
    return np.asarray(rows, dtype=float).ravel()


def write_trace_csv(path, trace: SolverTrace) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "step_norm", "misfit", "penalty", "log_posterior"])
        for i in range(len(trace)):
            writer.writerow([i + 1, repr(float(trace.step_norm[i])),
                             repr(float(trace.misfit[i])),
                             repr(float(trace.penalty[i])),
                             repr(float(trace.log_posterior[i]))])


def write_report_json(path, report: MetricsReport) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2) + "\n",
                          encoding="utf-8")


def read_report_json(path) -> MetricsReport:
    return MetricsReport.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
