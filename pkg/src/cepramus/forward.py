"""Analytic concentric three-shell spherical forward model.

A current dipole inside the innermost shell of a piecewise-homogeneous
concentric sphere (the classic Ary head model: brain, skull, scalp)
produces a surface potential that can be written as a Legendre series.
With normalized radius ``u = r / R_out`` each harmonic order ``n``
contributes ``A u^n + B u^-(n+1)`` per layer; matching potential and
normal current density at the interfaces and imposing zero current
through the outer surface yields one scalar transfer factor ``tau_n``
per order.  The electrode potential for a dipole at radius ``b`` with
radial moment ``m_r`` and tangential moment vector ``m_t`` is then

    V(e) = 1 / (4 pi sigma_1 R^2) * sum_n bhat^(n-1) tau_n
           * [ n m_r P_n(c_e) + (s_e . m_t) P'_n(c_e) ],

with ``bhat = b / R_out``, ``c_e`` the cosine between the source and
electrode directions and ``s_e`` the electrode unit vector.  For a
homogeneous sphere ``tau_n = (2n + 1) / n`` and the series sums to the
known closed form, which the test suite uses as an independent oracle.

Distances are millimeters externally; the prefactor converts the outer
radius to meters so gains come out in V/(A*m).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import qmc

from .errors import (
    ConfigError,
    DegenerateDataError,
    SeriesTruncationError,
    ShapeError,
    SourceOutOfDomainError,
)
from .model import (
    Dipole,
    DipoleConfig,
    LeadField,
    MeasurementVector,
    OrientationMode,
    Reference,
    SourceSpace,
    scale_measurement,
)

__all__ = [
    "ShellModel",
    "ElectrodeLayout",
    "NoiseSpec",
    "SimulationResult",
    "ary_shell_model",
    "fibonacci_cap_layout",
    "ball_source_space",
    "dipole_potential",
    "build_leadfield",
    "preset_configuration",
    "simulate_measurement",
]

#: margin (mm) between a dipole and the innermost shell boundary
_SOURCE_MARGIN_MM = 1.0
#: relative series tail above which the expansion is considered unconverged
_TAIL_TOL = 1e-8
_SNAP_WARN_MM = 5.0


@dataclass(frozen=True)
class ShellModel:
    """Concentric shells: ascending radii (mm) and conductivities (S/m)."""

    radii: tuple[float, float, float] = (82.0, 86.0, 92.0)
    conductivities: tuple[float, float, float] = (0.33, 0.0042, 0.33)
    series_terms: int = 200

    def __post_init__(self):
        radii = tuple(float(r) for r in self.radii)
        sigmas = tuple(float(s) for s in self.conductivities)
        if len(radii) != len(sigmas) or len(radii) < 1:
            raise ShapeError("radii and conductivities must have equal nonzero length")
        if any(r2 <= r1 for r1, r2 in zip(radii, radii[1:])) or radii[0] <= 0:
            raise ValueError("shell radii must be positive and strictly ascending")
        if any(s <= 0 for s in sigmas):
            raise ValueError("conductivities must be positive")
        if self.series_terms < 20:
            raise ValueError("series_terms must be at least 20")
        object.__setattr__(self, "radii", radii)
        object.__setattr__(self, "conductivities", sigmas)

    @property
    def brain_radius(self) -> float:
        return self.radii[0]

    @property
    def outer_radius(self) -> float:
        return self.radii[-1]


def ary_shell_model(series_terms: int = 200) -> ShellModel:
    """Three-shell model with 82/86/92 mm radii and 0.33/0.0042/0.33 S/m."""
    return ShellModel(series_terms=series_terms)


@dataclass(frozen=True)
class ElectrodeLayout:
    """Electrode positions on the outer shell surface.

    positions : (m, 3) array, mm, all at distance ``radius`` from origin.
    cap_extent : polar angle (rad) of the covered cap.
    """

    positions: np.ndarray
    radius: float
    cap_extent: float

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=float)
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise ShapeError(f"electrode positions must be (m, 3), got {pos.shape}")
        if pos.shape[0] < 16:
            raise ValueError("at least 16 electrodes are required")
        norms = np.linalg.norm(pos, axis=1)
        if np.any(np.abs(norms - self.radius) > 1e-9):
            raise ValueError("all electrodes must lie on the outer shell (tol 1e-9 mm)")
        pos = pos.copy()
        pos.setflags(write=False)
        object.__setattr__(self, "positions", pos)

    @property
    def n_electrodes(self) -> int:
        return self.positions.shape[0]


def fibonacci_cap_layout(n_electrodes: int = 128, radius: float = 92.0,
                         cap_extent: float = 2.0 * np.pi / 3.0) -> ElectrodeLayout:
    """Quasi-uniform Fibonacci-spiral layout on the upper spherical cap."""
    i = np.arange(n_electrodes)
    z = 1.0 - (1.0 - np.cos(cap_extent)) * (i + 0.5) / n_electrodes
    phi = i * np.pi * (3.0 - np.sqrt(5.0))
    rho = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    unit = np.column_stack([rho * np.cos(phi), rho * np.sin(phi), z])
    # renormalize to kill rounding drift before scaling to the shell
    unit /= np.linalg.norm(unit, axis=1, keepdims=True)
    return ElectrodeLayout(positions=radius * unit, radius=radius, cap_extent=cap_extent)


@dataclass(frozen=True)
class NoiseSpec:
    """Relative measurement noise level and RNG seed."""

    rel_std: float
    seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.rel_std < 1.0):
            raise ValueError("rel_std must lie strictly between 0 and 1")


def ball_source_space(n_sources: int = 1000, radius: float = 78.0,
                      seed: int = 0) -> SourceSpace:
    """Quasi-uniform positions inside a ball, from a scrambled Halton set.

    Deterministic for a given seed; the default 78 mm keeps a 4 mm margin
    to the 82 mm brain shell.
    """
    sampler = qmc.Halton(d=3, scramble=True, seed=seed)
    points = np.empty((0, 3))
    while points.shape[0] < n_sources:
        cand = (2.0 * sampler.random(4 * n_sources) - 1.0) * radius
        keep = cand[np.linalg.norm(cand, axis=1) <= radius]
        points = np.vstack([points, keep])
    return SourceSpace(positions=points[:n_sources])


def _transfer_factors(model: ShellModel, n_max: int) -> np.ndarray:
    """Per-order surface transfer factors tau_n, n = 1..n_max.

    Propagates the (A, B) radial coefficients of each harmonic through
    the shell interfaces with 2x2 transfer matrices and applies the
    insulating outer boundary condition.  Reduces to (2n+1)/n when all
    conductivities are equal.
    """
    n = np.arange(1, n_max + 1, dtype=float)
    radii = np.asarray(model.radii) / model.outer_radius
    sigmas = np.asarray(model.conductivities)
    # running 2x2 matrix, entrywise over n, mapping layer-1 (A, B) to layer-K
    m11 = np.ones_like(n)
    m12 = np.zeros_like(n)
    m21 = np.zeros_like(n)
    m22 = np.ones_like(n)
    for k in range(len(radii) - 1):
        beta = sigmas[k] / sigmas[k + 1]
        rk = radii[k]
        denom = 2.0 * n + 1.0
        p = ((n + 1.0) + n * beta) / denom
        qq = (n + 1.0) * (1.0 - beta) / denom * rk ** (-(2.0 * n + 1.0))
        s = n * (1.0 - beta) / denom * rk ** (2.0 * n + 1.0)
        u = (n + (n + 1.0) * beta) / denom
        m11, m12, m21, m22 = (p * m11 + qq * m21, p * m12 + qq * m22,
                              s * m11 + u * m21, s * m12 + u * m22)
    # insulating exterior: n A_K = (n+1) B_K fixes the layer-1 regular part
    a1 = -(n * m12 - (n + 1.0) * m22) / (n * m11 - (n + 1.0) * m21)
    b_out = m21 * a1 + m22
    return (2.0 * n + 1.0) / n * b_out


def _series_sums(model: ShellModel, positions: np.ndarray,
                 electrodes: ElectrodeLayout):
    """Legendre-series accumulators for a batch of source positions.

    Returns ``(cosines, f_rad, f_tan, tail_rel)`` where ``f_rad[i, e]``
    sums ``bhat^(n-1) tau_n n P_n`` and ``f_tan[i, e]`` sums
    ``bhat^(n-1) tau_n P'_n``; ``tail_rel[i]`` is a conservative estimate
    of the truncated relative tail for source ``i``.
    """
    n_max = model.series_terms
    tau = _transfer_factors(model, n_max)
    b_hat = np.linalg.norm(positions, axis=1) / model.outer_radius
    radial_unit = np.divide(positions, (b_hat * model.outer_radius)[:, None],
                            out=np.tile(np.array([0.0, 0.0, 1.0]), (len(positions), 1)),
                            where=b_hat[:, None] > 0)
    s_unit = electrodes.positions / electrodes.radius
    c = radial_unit @ s_unit.T  # (n_src, m)

    # bhat^(n-1) tau_n, laid out (n_src, n_max)
    powers = np.cumprod(np.concatenate([np.ones((len(b_hat), 1)),
                                        np.tile(b_hat[:, None], (1, n_max - 1))], axis=1),
                        axis=1)
    coeff = powers * tau[None, :]

    p_prev = np.ones_like(c)   # P_0
    p_cur = c.copy()           # P_1
    dp_prev = np.zeros_like(c)  # P'_0
    dp_cur = np.ones_like(c)   # P'_1
    f_rad = np.zeros_like(c)
    f_tan = np.zeros_like(c)
    bound_sum = np.zeros_like(c)
    bound_last = np.zeros(len(b_hat))
    for idx in range(n_max):
        order = idx + 1
        cn = coeff[:, idx][:, None]
        f_rad += cn * order * p_cur
        f_tan += cn * dp_cur
        bound = np.abs(cn) * (order * np.abs(p_cur) + np.abs(dp_cur))
        bound_sum += bound
        if idx == n_max - 1:
            bound_last = bound.max(axis=1)
        # ascending recurrences for P_n and P'_n
        p_next = ((2.0 * order + 1.0) * c * p_cur - order * p_prev) / (order + 1.0)
        dp_next = dp_prev + (2.0 * order + 1.0) * p_cur
        p_prev, p_cur = p_cur, p_next
        dp_prev, dp_cur = dp_cur, dp_next

    ratio = np.minimum(b_hat * (1.0 + 3.0 / n_max), 1.0 - 1e-12)
    tail = 5.0 * bound_last * ratio / (1.0 - ratio)
    scale = np.maximum(bound_sum.max(axis=1), 1e-300)
    return c, f_rad, f_tan, tail / scale


def _check_sources_inside(model: ShellModel, positions: np.ndarray) -> None:
    norms = np.linalg.norm(np.atleast_2d(positions), axis=1)
    limit = model.brain_radius - _SOURCE_MARGIN_MM
    if np.any(norms >= limit):
        worst = float(norms.max())
        raise SourceOutOfDomainError(
            f"source at radius {worst:.2f} mm violates the {limit:.2f} mm limit"
        )


def _check_tail(tail_rel: np.ndarray) -> None:
    worst = float(np.max(tail_rel))
    if worst > _TAIL_TOL:
        raise SeriesTruncationError(
            f"series tail {worst:.2e} exceeds {_TAIL_TOL:.0e}; "
            "increase series_terms or move sources deeper"
        )


def _apply_reference(values: np.ndarray, reference: Reference) -> np.ndarray:
    if reference.kind == "average":
        return values - values.mean(axis=0, keepdims=True)
    return values - values[reference.electrode]


def dipole_potential(model: ShellModel, position, moment,
                     electrodes: ElectrodeLayout,
                     reference: Reference | None = None) -> np.ndarray:
    """Electrode potentials (V) of one dipole; linear in the moment.

    position : 3-vector, mm, strictly inside the brain shell.
    moment : 3-vector, A*m.
    """
    if abs(electrodes.radius - model.outer_radius) > 1e-9:
        raise ShapeError("electrode layout radius does not match the outer shell")
    position = np.asarray(position, dtype=float).reshape(3)
    moment = np.asarray(moment, dtype=float).reshape(3)
    _check_sources_inside(model, position[None, :])
    if not np.any(moment):
        return np.zeros(electrodes.n_electrodes)

    c, f_rad, f_tan, tail_rel = _series_sums(model, position[None, :], electrodes)
    _check_tail(tail_rel)
    b = np.linalg.norm(position)
    r_hat = position / b if b > 0 else np.array([0.0, 0.0, 1.0])
    m_r = float(moment @ r_hat)
    s_unit = electrodes.positions / electrodes.radius
    tangential = s_unit @ moment - c[0] * m_r

    prefactor = 1.0 / (4.0 * np.pi * model.conductivities[0]
                       * (model.outer_radius * 1e-3) ** 2)
    v = prefactor * (m_r * f_rad[0] + tangential * f_tan[0])
    if reference is None:
        reference = Reference.average()
    return _apply_reference(v, reference)


def build_leadfield(model: ShellModel, space: SourceSpace,
                    electrodes: ElectrodeLayout,
                    reference: Reference | None = None) -> LeadField:
    """Assemble the gain matrix column block by column block.

    Free orientation: columns ``3 mu + k`` hold the potentials of a unit
    moment along Cartesian axis ``k`` at source ``mu``.  Constrained
    spaces get one column per source along the constraint direction.
    """
    if abs(electrodes.radius - model.outer_radius) > 1e-9:
        raise ShapeError("electrode layout radius does not match the outer shell")
    _check_sources_inside(model, space.positions)
    if reference is None:
        reference = Reference.average()

    positions = space.positions
    n_src = space.n_sources
    m = electrodes.n_electrodes
    c, f_rad, f_tan, tail_rel = _series_sums(model, positions, electrodes)
    _check_tail(tail_rel)

    b = np.linalg.norm(positions, axis=1)
    r_hat = np.divide(positions, b[:, None],
                      out=np.tile(np.array([0.0, 0.0, 1.0]), (n_src, 1)),
                      where=b[:, None] > 0)
    s_unit = electrodes.positions / electrodes.radius
    prefactor = 1.0 / (4.0 * np.pi * model.conductivities[0]
                       * (model.outer_radius * 1e-3) ** 2)

    if space.orientation_mode is OrientationMode.CONSTRAINED:
        moments = space.constraint_dirs  # (n_src, 3)
        m_r = np.einsum("ik,ik->i", moments, r_hat)
        tangential = moments @ s_unit.T - c * m_r[:, None]
        columns = prefactor * (m_r[:, None] * f_rad + tangential * f_tan)
        gain = _apply_reference(columns.T, reference)
        return LeadField(gain=gain, source_space=space, reference=reference)

    gain = np.empty((m, 3 * n_src))
    for k in range(3):
        m_r = r_hat[:, k]
        tangential = s_unit[None, :, k] - c * m_r[:, None]
        columns = prefactor * (m_r[:, None] * f_rad + tangential * f_tan)
        gain[:, k::3] = columns.T
    gain = _apply_reference(gain, reference)
    return LeadField(gain=gain, source_space=space, reference=reference)


#: polar angle of the nominal superficial source; lateral placement keeps
#: its 30 mm ROI well separated from the deep source while staying inside
#: the electrode cap
_SUPERFICIAL_POLAR_RAD = np.radians(70.0)


def preset_configuration(name: str, space: SourceSpace) -> DipoleConfig:
    """Synthetic SEP-style source configurations on the spherical model.

    ``"I"``: a superficial tangential dipole (nominal radius 70 mm,
    lateral) at 70 % amplitude plus a deep vertical dipole (nominal
    radius 30 mm) at 10 nAm.  ``"II"``: the deep vertical dipole alone.
    Nominal positions are snapped to the nearest source-space position
    and recorded as the ground truth.
    """
    key = str(name).strip().upper()
    amp = 1e-8
    deep_nominal = np.array([0.0, 0.0, 30.0])
    if key == "I":
        sup_nominal = 70.0 * np.array([np.sin(_SUPERFICIAL_POLAR_RAD), 0.0,
                                       np.cos(_SUPERFICIAL_POLAR_RAD)])
        sup_pos = _nearest_position(space, sup_nominal)
        deep_pos = _nearest_position(space, deep_nominal)
        dipoles = (
            Dipole(position=sup_pos, moment=_meridian_tangent(sup_pos), amplitude=0.7 * amp),
            Dipole(position=deep_pos, moment=np.array([0.0, 0.0, 1.0]), amplitude=amp),
        )
        return DipoleConfig(dipoles=dipoles, label="I")
    if key == "II":
        deep_pos = _nearest_position(space, deep_nominal)
        dipoles = (
            Dipole(position=deep_pos, moment=np.array([0.0, 0.0, 1.0]), amplitude=amp),
        )
        return DipoleConfig(dipoles=dipoles, label="II")
    raise ConfigError(f"unknown preset configuration {name!r} (expected 'I' or 'II')")


def _nearest_position(space: SourceSpace, target: np.ndarray) -> np.ndarray:
    idx = int(np.argmin(np.linalg.norm(space.positions - target[None, :], axis=1)))
    return space.positions[idx].copy()


def _meridian_tangent(position: np.ndarray) -> np.ndarray:
    """Unit vector tangential to the sphere through ``position``, in the
    meridian plane (falls back to an azimuthal tangent on the pole axis)."""
    r_hat = position / np.linalg.norm(position)
    for axis in (np.array([0.0, 0.0, 1.0]), np.array([1.0, 0.0, 0.0])):
        t = axis - (axis @ r_hat) * r_hat
        norm = np.linalg.norm(t)
        if norm > 1e-6:
            return t / norm
    raise ValueError("degenerate position for tangent construction")


@dataclass(frozen=True)
class SimulationResult:
    """Synthetic measurement plus the snapped ground-truth representation."""

    measurement: MeasurementVector
    true_coeffs: np.ndarray
    snapped_indices: tuple[int, ...]
    snap_distances_mm: tuple[float, ...]
    snap_warning: bool
    clean_values: np.ndarray
    seed: int


def simulate_measurement(leadfield: LeadField, config: DipoleConfig,
                         noise: NoiseSpec) -> SimulationResult:
    """Forward-map a dipole configuration and add seeded Gaussian noise.

    Each dipole is snapped to its nearest source position (distances
    above 5 mm set the warning flag).  Noise is zero-mean i.i.d. per
    channel with standard deviation ``rel_std * max |clean|``; the noisy
    vector is then scaled to max-abs one.
    """
    if len(config) == 0:
        raise DegenerateDataError("dipole configuration is empty")
    space = leadfield.source_space
    coeffs = np.zeros(leadfield.n_cols)
    indices = []
    distances = []
    for dip in config.dipoles:
        dists = np.linalg.norm(space.positions - dip.position[None, :], axis=1)
        idx = int(np.argmin(dists))
        indices.append(idx)
        distances.append(float(dists[idx]))
        if space.orientation_mode is OrientationMode.CONSTRAINED:
            coeffs[idx] += dip.amplitude * float(dip.moment @ space.constraint_dirs[idx])
        else:
            coeffs[3 * idx:3 * idx + 3] += dip.amplitude * dip.moment

    clean = leadfield.gain @ coeffs
    peak = np.abs(clean).max()
    if peak == 0.0:
        raise DegenerateDataError("configuration produces identically zero data")
    rng = np.random.default_rng(np.uint64(noise.seed))
    noisy = clean + rng.standard_normal(clean.shape[0]) * (noise.rel_std * peak)
    measurement = scale_measurement(noisy, noise_rel_std=noise.rel_std)
    return SimulationResult(
        measurement=measurement,
        true_coeffs=coeffs,
        snapped_indices=tuple(indices),
        snap_distances_mm=tuple(distances),
        snap_warning=any(d > _SNAP_WARN_MM for d in distances),
        clean_values=clean,
        seed=noise.seed,
    )
