"""Accuracy and focality measures for estimates against truth dipoles.

Accuracy compares each true dipole with the amplitude-weighted mass
center, summed vector moment, and total amplitude of the reconstruction
inside a 30 mm region of interest around the true position.  Focality is
measured two ways: the fraction of ROI positions whose amplitude reaches
75 percent of the ROI maximum (hard threshold), and the exact optimal
transport cost of moving the normalized reconstruction mass within a
45 mm moving limit onto the true dipole positions (limited earth mover's
distance, in mm).

Estimate coefficients and truth amplitudes must share units; divide a
scaled estimate by its measurement ``scale_to_unit`` first when physical
amplitudes matter (position, angle, hard threshold, and EMD are
invariant under global positive scaling).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog
from scipy.sparse import coo_matrix

from .errors import EmptyRoiError, ZeroMassError
from .model import (
    CurrentEstimate,
    DipoleConfig,
    OrientationMode,
    SourceSpace,
    amplitude_field,
)

__all__ = [
    "RoiSpec",
    "DipoleMetrics",
    "MetricsReport",
    "roi_mass_center",
    "accuracy_measures",
    "hard_threshold_focality",
    "limited_emd",
    "evaluate_estimate",
]

DEFAULT_ROI_RADIUS_MM = 30.0
DEFAULT_EMD_LIMIT_MM = 45.0
HARD_THRESHOLD_LEVEL = 0.75


@dataclass(frozen=True)
class RoiSpec:
    """Spherical region of interest around a point."""

    center: np.ndarray
    radius: float = DEFAULT_ROI_RADIUS_MM

    def __post_init__(self):
        center = np.asarray(self.center, dtype=float).reshape(3)
        if not self.radius > 0.0:
            raise ValueError("ROI radius must be positive")
        object.__setattr__(self, "center", center)


def _coeff_vectors(x, space: SourceSpace) -> np.ndarray:
    """Per-position 3-vector moments of an estimate (n, 3)."""
    coeffs = x.coeffs if isinstance(x, CurrentEstimate) else np.asarray(x, dtype=float).ravel()
    if space.orientation_mode is OrientationMode.CONSTRAINED:
        return coeffs[:, None] * space.constraint_dirs
    return coeffs.reshape(space.n_sources, 3)


def _roi_mask(space: SourceSpace, roi: RoiSpec) -> np.ndarray:
    dists = np.linalg.norm(space.positions - roi.center[None, :], axis=1)
    return dists <= roi.radius


def roi_mass_center(estimate, space: SourceSpace, roi: RoiSpec):
    """Amplitude-weighted mass center, summed moment vector, and total
    amplitude of the estimate inside the ROI.

    Returns ``(position, mean_vector, total_amplitude)`` where the total
    amplitude is the Euclidean norm of the summed moment vectors.
    """
    mask = _roi_mask(space, roi)
    if not mask.any():
        raise EmptyRoiError(f"no source positions within {roi.radius} mm of {roi.center}")
    vectors = _coeff_vectors(estimate, space)[mask]
    amps = np.linalg.norm(vectors, axis=1)
    total = amps.sum()
    if total == 0.0:
        raise ZeroMassError("ROI carries zero reconstruction amplitude")
    position = (amps[:, None] * space.positions[mask]).sum(axis=0) / total
    mean_vector = vectors.sum(axis=0)
    return position, mean_vector, float(np.linalg.norm(mean_vector))


def accuracy_measures(estimate, space: SourceSpace, truth: DipoleConfig,
                      roi_radius: float = DEFAULT_ROI_RADIUS_MM):
    """Per-dipole (position error mm, angle error deg, log10 amplitude ratio).

    Each true dipole is compared against the ROI mass center around its
    own position; the angle is between the summed ROI moment vector and
    the true moment; the amplitude measure is the base-10 log of the
    reconstructed-to-true amplitude ratio.
    """
    results = []
    for dip in truth.dipoles:
        roi = RoiSpec(center=dip.position, radius=roi_radius)
        position, mean_vec, total = roi_mass_center(estimate, space, roi)
        pos_err = float(np.linalg.norm(position - dip.position))
        cosine = float(mean_vec @ dip.moment / (np.linalg.norm(mean_vec)
                                                * np.linalg.norm(dip.moment)))
        angle = float(np.degrees(np.arccos(np.clip(cosine, -1.0, 1.0))))
        amp_log_ratio = float(np.log10(total / dip.amplitude))
        results.append((pos_err, angle, amp_log_ratio))
    return results


def hard_threshold_focality(estimate, space: SourceSpace, roi: RoiSpec) -> float:
    """Fraction of ROI positions with amplitude at or above 75 percent of
    the ROI maximum."""
    mask = _roi_mask(space, roi)
    if not mask.any():
        raise EmptyRoiError(f"no source positions within {roi.radius} mm of {roi.center}")
    amps = amplitude_field(estimate, space)[mask]
    peak = amps.max()
    if peak == 0.0:
        raise ZeroMassError("ROI amplitude maximum is zero")
    return float(np.count_nonzero(amps >= HARD_THRESHOLD_LEVEL * peak) / amps.size)


def solve_transport(supplies: np.ndarray, demands: np.ndarray,
                    costs: np.ndarray) -> float:
    """Exact cost of the balanced transportation problem (LP, HiGHS)."""
    n_s, n_d = costs.shape
    rows = []
    cols = []
    for i in range(n_s):
        rows.extend([i] * n_d)
        cols.extend(range(i * n_d, (i + 1) * n_d))
    for j in range(n_d):
        rows.extend([n_s + j] * n_s)
        cols.extend(range(j, n_s * n_d, n_d))
    a_eq = coo_matrix((np.ones(2 * n_s * n_d), (rows, cols)),
                      shape=(n_s + n_d, n_s * n_d))
    b_eq = np.concatenate([supplies, demands])
    res = linprog(costs.ravel(), A_eq=a_eq, b_eq=b_eq, bounds=(0, None),
                  method="highs")
    if not res.success:
        raise RuntimeError(f"transport LP failed: {res.message}")
    return float(res.fun)


def limited_emd(estimate, space: SourceSpace, truth: DipoleConfig,
                limit_mm: float = DEFAULT_EMD_LIMIT_MM) -> float:
    """Earth mover's distance (mm) with a moving limit.

    Supply: the estimate's amplitude field restricted to positions within
    ``limit_mm`` of any true dipole, normalized to unit mass.  Demand:
    point masses at the true positions proportional to true amplitudes,
    also normalized.  Mass beyond the limit is excluded before
    normalization so baseline clutter far from every source cannot
    dominate the measure.
    """
    amps = amplitude_field(estimate, space)
    true_pos = np.stack([d.position for d in truth.dipoles])
    dists = np.linalg.norm(space.positions[:, None, :] - true_pos[None, :, :], axis=2)
    mask = (dists.min(axis=1) <= limit_mm) & (amps > 0.0)
    if not mask.any():
        raise ZeroMassError(f"no reconstruction mass within {limit_mm} mm of any dipole")
    supplies = amps[mask] / amps[mask].sum()
    true_amps = np.array([d.amplitude for d in truth.dipoles])
    demands = true_amps / true_amps.sum()
    return solve_transport(supplies, demands, dists[mask])


@dataclass(frozen=True)
class DipoleMetrics:
    position_error_mm: float
    angle_error_deg: float
    amplitude_log_ratio: float
    hard_threshold_fraction: float


@dataclass(frozen=True)
class MetricsReport:
    """All accuracy and focality measures of one estimate."""

    per_dipole: tuple[DipoleMetrics, ...]
    emd_mm: float
    seed: int | None = None
    label: str = ""
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "seed": self.seed,
            "emd_mm": self.emd_mm,
            "per_dipole": [
                {
                    "position_error_mm": d.position_error_mm,
                    "angle_error_deg": d.angle_error_deg,
                    "amplitude_log_ratio": d.amplitude_log_ratio,
                    "hard_threshold_fraction": d.hard_threshold_fraction,
                }
                for d in self.per_dipole
            ],
            "extra": self.extra,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MetricsReport":
        per_dipole = tuple(
            DipoleMetrics(
                position_error_mm=d["position_error_mm"],
                angle_error_deg=d["angle_error_deg"],
                amplitude_log_ratio=d["amplitude_log_ratio"],
                hard_threshold_fraction=d["hard_threshold_fraction"],
            )
            for d in data["per_dipole"]
        )
        return cls(per_dipole=per_dipole, emd_mm=data["emd_mm"],
                   seed=data.get("seed"), label=data.get("label", ""),
                   extra=data.get("extra", {}))


def evaluate_estimate(estimate, space: SourceSpace, truth: DipoleConfig,
                      roi_radius: float = DEFAULT_ROI_RADIUS_MM,
                      emd_limit: float = DEFAULT_EMD_LIMIT_MM,
                      seed: int | None = None, label: str | None = None,
                      extra: dict | None = None) -> MetricsReport:
    """Assemble the full report for one estimate against one truth."""
    accuracy = accuracy_measures(estimate, space, truth, roi_radius=roi_radius)
    per_dipole = []
    for dip, (pos_err, angle, amp_ratio) in zip(truth.dipoles, accuracy):
        roi = RoiSpec(center=dip.position, radius=roi_radius)
        fraction = hard_threshold_focality(estimate, space, roi)
        per_dipole.append(DipoleMetrics(
            position_error_mm=pos_err,
            angle_error_deg=angle,
            amplitude_log_ratio=amp_ratio,
            hard_threshold_fraction=fraction,
        ))
    emd = limited_emd(estimate, space, truth, limit_mm=emd_limit)
    return MetricsReport(per_dipole=tuple(per_dipole), emd_mm=emd, seed=seed,
                         label=truth.label if label is None else label,
                         extra=extra or {})
