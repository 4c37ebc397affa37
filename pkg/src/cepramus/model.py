"""Core domain types: source spaces, leadfields, measurements, estimates.

Unit conventions
----------------
Positions and radii are in millimeters.  Leadfield gains are stored with
SI numeric values (V per A*m).  Measurement vectors are kept in the scaled
system in which the largest absolute channel value equals one microvolt;
the multiplier that was applied is recorded so physical units can be
recovered (``raw = values / scale_to_unit``).

All types are immutable after construction (arrays are marked read-only),
so they can be shared freely across parallel workers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import (
    ConstraintError,
    DegenerateDataError,
    ShapeError,
)

__all__ = [
    "OrientationMode",
    "Reference",
    "SourceSpace",
    "LeadField",
    "MeasurementVector",
    "CurrentEstimate",
    "Updater",
    "HyperParams",
    "Dipole",
    "DipoleConfig",
    "project_to_constraint",
    "scale_measurement",
    "amplitude_field",
]

_UNIT_NORM_TOL = 1e-12
_COLUMN_SUM_TOL = 1e-10


def _frozen_array(values, shape_hint=None, dtype=float) -> np.ndarray:
    arr = np.array(values, dtype=dtype, copy=True)
    if shape_hint is not None and arr.shape != shape_hint:
        raise ShapeError(f"expected shape {shape_hint}, got {arr.shape}")
    arr.setflags(write=False)
    return arr


class OrientationMode(Enum):
    FREE_CARTESIAN = "free"
    CONSTRAINED = "constrained"


@dataclass(frozen=True)
class Reference:
    """Electrode reference convention of a leadfield.

    ``kind`` is ``"average"`` or ``"common"``; a common reference carries
    the index of the reference electrode.
    """

    kind: str = "average"
    electrode: int | None = None

    def __post_init__(self):
        if self.kind not in ("average", "common"):
            raise ValueError(f"unknown reference kind {self.kind!r}")
        if self.kind == "common" and (self.electrode is None or self.electrode < 0):
            raise ValueError("common reference requires a non-negative electrode index")
        if self.kind == "average" and self.electrode is not None:
            raise ValueError("average reference takes no electrode index")

    @classmethod
    def average(cls) -> "Reference":
        return cls("average")

    @classmethod
    def common(cls, electrode: int) -> "Reference":
        return cls("common", electrode)


@dataclass(frozen=True)
class SourceSpace:
    """Candidate source positions plus their orientation convention.

    positions : (n, 3) array, mm.
    orientation_mode : free Cartesian triplets or a fixed unit direction
        per position.
    constraint_dirs : (n, 3) unit vectors, present iff constrained.
    """

    positions: np.ndarray
    orientation_mode: OrientationMode = OrientationMode.FREE_CARTESIAN
    constraint_dirs: np.ndarray | None = None

    def __post_init__(self):
        pos = np.atleast_2d(np.asarray(self.positions, dtype=float))
        if pos.ndim != 2 or pos.shape[1] != 3 or pos.shape[0] < 1:
            raise ShapeError(f"positions must be (n, 3) with n >= 1, got {pos.shape}")
        if not np.all(np.isfinite(pos)):
            raise ValueError("source positions must be finite")
        object.__setattr__(self, "positions", _frozen_array(pos))

        if self.orientation_mode is OrientationMode.CONSTRAINED:
            if self.constraint_dirs is None:
                raise ConstraintError("constrained source space requires constraint_dirs")
            dirs = _frozen_array(self.constraint_dirs, shape_hint=pos.shape)
            norms = np.linalg.norm(dirs, axis=1)
            if not np.all(np.abs(norms - 1.0) <= _UNIT_NORM_TOL):
                raise ValueError("constraint directions must be unit vectors (tol 1e-12)")
            object.__setattr__(self, "constraint_dirs", dirs)
        elif self.constraint_dirs is not None:
            raise ConstraintError("constraint_dirs given for a free-orientation space")

    @property
    def n_sources(self) -> int:
        return self.positions.shape[0]

    @property
    def components_per_source(self) -> int:
        return 1 if self.orientation_mode is OrientationMode.CONSTRAINED else 3

    @property
    def coeff_len(self) -> int:
        """Length of a coefficient vector over this space (3n free, n constrained)."""
        return self.n_sources * self.components_per_source


@dataclass(frozen=True)
class LeadField:
    """Dense gain matrix mapping source coefficients to channel potentials.

    gain : (m, cols) array in V/(A*m); cols is 3n (free) or n (constrained).
    """

    gain: np.ndarray
    source_space: SourceSpace
    reference: Reference = field(default_factory=Reference.average)

    def __post_init__(self):
        gain = np.asarray(self.gain, dtype=float)
        if gain.ndim != 2:
            raise ShapeError(f"gain must be 2-D, got {gain.ndim}-D")
        if not np.all(np.isfinite(gain)):
            raise ValueError("leadfield entries must be finite")
        if gain.shape[1] != self.source_space.coeff_len:
            raise ShapeError(
                f"gain has {gain.shape[1]} columns, source space expects "
                f"{self.source_space.coeff_len}"
            )
        if self.reference.kind == "average":
            col_sums = np.abs(gain.sum(axis=0))
            col_max = np.abs(gain).max(axis=0)
            bad = col_sums > _COLUMN_SUM_TOL * np.maximum(col_max, 1e-300)
            if np.any(bad):
                raise ValueError(
                    "average-referenced leadfield columns must sum to zero "
                    f"(violated by {int(bad.sum())} columns)"
                )
        object.__setattr__(self, "gain", _frozen_array(gain))

    @property
    def n_channels(self) -> int:
        return self.gain.shape[0]

    @property
    def n_cols(self) -> int:
        return self.gain.shape[1]


@dataclass(frozen=True)
class MeasurementVector:
    """Channel data scaled so that max |value| = 1 (one microvolt).

    ``scale_to_unit`` is the multiplier that was applied to the raw data;
    ``noise_rel_std`` is the relative noise standard deviation (fraction
    of the largest absolute noiseless value).
    """

    values: np.ndarray
    scale_to_unit: float = 1.0
    noise_rel_std: float = 0.0

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float).ravel()
        if vals.size == 0 or not np.all(np.isfinite(vals)):
            raise ValueError("measurement values must be a non-empty finite vector")
        if abs(np.abs(vals).max() - 1.0) > 1e-12:
            raise ValueError("measurement must be scaled to max |value| = 1")
        if not (0.0 <= self.noise_rel_std < 1.0):
            raise ValueError("noise_rel_std must lie in [0, 1)")
        object.__setattr__(self, "values", _frozen_array(vals))

    @property
    def n_channels(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class CurrentEstimate:
    """Reconstructed coefficient vector matching a leadfield's columns."""

    coeffs: np.ndarray

    def __post_init__(self):
        coeffs = np.asarray(self.coeffs, dtype=float).ravel()
        if not np.all(np.isfinite(coeffs)):
            raise ValueError("estimate coefficients must be finite")
        object.__setattr__(self, "coeffs", _frozen_array(coeffs))

    def amplitudes(self, space: SourceSpace) -> np.ndarray:
        """Per-position amplitude field (see :func:`amplitude_field`)."""
        return amplitude_field(self, space)


class Updater(Enum):
    """Hyperparameter refresh rule: conditional expectation or mode."""

    EM = "em"
    IAS = "ias"


@dataclass(frozen=True)
class HyperParams:
    """Prior degree, gamma hyperprior shape/scale, and iteration budgets."""

    q: int
    kappa: float
    theta: float
    sigma: float
    outer_iters: int = 10
    inner_lasso_iters: int = 15
    updater: Updater = Updater.EM
    park_sigma_scaling: bool = True

    def __post_init__(self):
        if self.q not in (1, 2):
            raise ValueError("prior degree q must be 1 or 2")
        if not self.kappa > 1.0:
            raise ValueError("kappa must exceed 1 (finite marginal expectation)")
        if not self.theta > 0.0:
            raise ValueError("theta must be positive")
        if not self.sigma > 0.0:
            raise ValueError("sigma must be positive")
        if self.outer_iters < 1 or self.inner_lasso_iters < 1:
            raise ValueError("iteration budgets must be at least 1")
        if not isinstance(self.updater, Updater):
            object.__setattr__(self, "updater", Updater(self.updater))


@dataclass(frozen=True)
class Dipole:
    """A point source: position (mm), unit moment, amplitude (A*m)."""

    position: np.ndarray
    moment: np.ndarray
    amplitude: float

    def __post_init__(self):
        pos = _frozen_array(self.position, shape_hint=(3,))
        mom = _frozen_array(self.moment, shape_hint=(3,))
        if abs(np.linalg.norm(mom) - 1.0) > _UNIT_NORM_TOL:
            raise ValueError("dipole moment must be a unit vector (tol 1e-12)")
        if not self.amplitude > 0.0:
            raise ValueError("dipole amplitude must be positive")
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "moment", mom)


@dataclass(frozen=True)
class DipoleConfig:
    """A labeled collection of ground-truth dipoles."""

    dipoles: tuple[Dipole, ...]
    label: str = ""

    def __post_init__(self):
        object.__setattr__(self, "dipoles", tuple(self.dipoles))

    def __len__(self) -> int:
        return len(self.dipoles)


def project_to_constraint(leadfield_free: LeadField, source_space: SourceSpace) -> LeadField:
    """Collapse a free-orientation leadfield onto fixed unit directions.

    Output column ``mu`` is the linear combination of the three Cartesian
    columns of source ``mu`` weighted by its constraint direction.
    """
    if leadfield_free.source_space.orientation_mode is not OrientationMode.FREE_CARTESIAN:
        raise ConstraintError("input leadfield must be free-orientation")
    if source_space.orientation_mode is not OrientationMode.CONSTRAINED:
        raise ConstraintError("target source space must be constrained")
    n = source_space.n_sources
    if leadfield_free.n_cols != 3 * n:
        raise ShapeError(
            f"leadfield has {leadfield_free.n_cols} columns, expected {3 * n}"
        )
    blocks = leadfield_free.gain.reshape(leadfield_free.n_channels, n, 3)
    gain = np.einsum("mnk,nk->mn", blocks, source_space.constraint_dirs)
    return LeadField(gain=gain, source_space=source_space, reference=leadfield_free.reference)


def scale_measurement(raw, noise_rel_std: float = 0.0) -> MeasurementVector:
    """Scale raw channel data so the largest absolute value is one.

    The applied multiplier is recorded in ``scale_to_unit``; dividing the
    scaled values by it recovers the raw data.
    """
    raw = np.asarray(raw, dtype=float).ravel()
    peak = np.abs(raw).max() if raw.size else 0.0
    if peak == 0.0:
        raise DegenerateDataError("cannot scale an all-zero measurement")
    scale = 1.0 / peak
    return MeasurementVector(values=raw * scale, scale_to_unit=scale,
                             noise_rel_std=noise_rel_std)


def amplitude_field(x: CurrentEstimate | np.ndarray, space: SourceSpace) -> np.ndarray:
    """Per-position amplitude: Euclidean norm of each 3-vector block
    (free orientation) or absolute coefficient (constrained)."""
    coeffs = x.coeffs if isinstance(x, CurrentEstimate) else np.asarray(x, dtype=float).ravel()
    if coeffs.shape[0] != space.coeff_len:
        raise ShapeError(
            f"coefficient vector has length {coeffs.shape[0]}, "
            f"source space expects {space.coeff_len}"
        )
    if space.orientation_mode is OrientationMode.CONSTRAINED:
        return np.abs(coeffs)
    return np.linalg.norm(coeffs.reshape(space.n_sources, 3), axis=1)
