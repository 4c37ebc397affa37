"""Randomized multiresolution scanning over the source space.

The source set is partitioned at several resolution levels: level ``r``
of a decomposition holds ``n_r = floor(n * s^(r-R))`` cells (``s`` the
sparsity factor), each cell collecting the fine sources nearest to a
randomly drawn center.  A reconstruction run proceeds coarse to fine
within each decomposition, propagating the hyperparameter vector as the
initial guess of the next level, and averages the prolonged estimates of
every level across decompositions.  Coarse levels keep weakly detectable
deep sources alive; fine levels sharpen superficial detail; the Monte
Carlo average marginalizes the discretization choices.

Centers are drawn uniformly without replacement from the fine source
positions themselves, which makes every cell non-empty, the cell
representative (the fine source nearest the center) coincide with the
center, and the finest level an exact permutation of the full space.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.spatial import cKDTree

from .errors import LevelSizeError, ShapeError
from .model import HyperParams, LeadField, SourceSpace
from .seeding import derive_seed
from .solvers import CepResult, run_cep, _as_gain, _as_vector, _check_gamma

__all__ = [
    "RamusConfig",
    "ScalingMode",
    "MultiresolutionDecomposition",
    "RamusResult",
    "plan_level_sizes",
    "sample_decomposition",
    "restrict_gain",
    "restrict_leadfield",
    "prolong_estimate",
    "prolong_gamma",
    "run_ramus",
]


class ScalingMode(Enum):
    """Final rescaling of the averaged estimate."""

    DATA_FIT = "datafit"
    LITERAL_GEOMETRIC_SUM = "geometric"


@dataclass(frozen=True)
class RamusConfig:
    """Decomposition count, sparsity ladder, and final scaling mode."""

    decompositions: int = 100
    sparsity: float = 10.0
    coarsest_count: int = 10
    scaling_mode: ScalingMode = ScalingMode.DATA_FIT

    def __post_init__(self):
        if self.sparsity <= 1.0:
            raise ValueError("sparsity factor must exceed 1")
        if self.decompositions < 1:
            raise ValueError("at least one decomposition is required")
        if self.coarsest_count < 1:
            raise ValueError("coarsest_count must be at least 1")
        if not isinstance(self.scaling_mode, ScalingMode):
            object.__setattr__(self, "scaling_mode", ScalingMode(self.scaling_mode))


@dataclass(frozen=True)
class MultiresolutionDecomposition:
    """Per-level nearest-center partitions of the fine source set.

    representatives[r] : fine indices of the level-r cells, in cell order.
    assignments[r] : for each fine source, the index of its level-r cell.
    """

    level_sizes: tuple[int, ...]
    representatives: tuple[np.ndarray, ...]
    assignments: tuple[np.ndarray, ...]
    seed: int

    @property
    def n_levels(self) -> int:
        return len(self.level_sizes)

    @property
    def n_fine(self) -> int:
        return self.assignments[0].shape[0]


def plan_level_sizes(n_sources: int, cfg: RamusConfig) -> tuple[int, ...]:
    """Level sizes floor(n * s^(r-R)), finest forced to n.

    The level count is chosen so the coarsest level holds roughly
    ``cfg.coarsest_count`` sources: R = floor(log_s(n / coarsest)) + 1.
    """
    if cfg.coarsest_count > n_sources:
        raise LevelSizeError(
            f"coarsest_count {cfg.coarsest_count} exceeds source count {n_sources}"
        )
    ratio = n_sources / cfg.coarsest_count
    levels = 1 + max(0, math.floor(math.log(ratio) / math.log(cfg.sparsity) + 1e-12))
    sizes = [int(math.floor(n_sources * cfg.sparsity ** float(r - levels)))
             for r in range(1, levels)]
    sizes.append(n_sources)
    if any(s2 <= s1 for s1, s2 in zip(sizes, sizes[1:])) or sizes[0] < 1:
        raise LevelSizeError(f"degenerate level ladder {sizes}")
    return tuple(sizes)


def sample_decomposition(space: SourceSpace, cfg: RamusConfig,
                         seed: int) -> MultiresolutionDecomposition:
    """Draw one multiresolution decomposition (deterministic per seed).

    For each level, ``n_r`` centers are drawn uniformly without
    replacement from the source positions and every fine source is
    assigned to its nearest center (Euclidean distance in mm).
    """
    sizes = plan_level_sizes(space.n_sources, cfg)
    rng = np.random.default_rng(np.uint64(seed))
    reps = []
    assignments = []
    positions = space.positions
    for n_r in sizes:
        if n_r > space.n_sources:
            raise LevelSizeError(f"level size {n_r} exceeds {space.n_sources}")
        centers = rng.choice(space.n_sources, size=n_r, replace=False)
        if n_r == space.n_sources:
            assign = np.empty(space.n_sources, dtype=np.intp)
            assign[centers] = np.arange(n_r)
        else:
            _, assign = cKDTree(positions[centers]).query(positions, k=1)
            assign = assign.astype(np.intp)
        reps.append(centers.astype(np.intp))
        assignments.append(assign)
    return MultiresolutionDecomposition(
        level_sizes=sizes,
        representatives=tuple(reps),
        assignments=tuple(assignments),
        seed=seed,
    )


def _component_columns(reps: np.ndarray, components: int) -> np.ndarray:
    """Column indices of the representatives' coefficient blocks."""
    if components == 1:
        return reps
    return (components * reps[:, None] + np.arange(components)[None, :]).ravel()


def restrict_gain(gain: np.ndarray, decomp: MultiresolutionDecomposition,
                  level: int, components: int) -> np.ndarray:
    """Representative column blocks of a raw gain matrix, in cell order."""
    reps = decomp.representatives[level]
    return gain[:, _component_columns(reps, components)]


def restrict_leadfield(leadfield: LeadField, decomp: MultiresolutionDecomposition,
                       level: int) -> LeadField:
    """Leadfield over a level's representative sources only."""
    if not 0 <= level < decomp.n_levels:
        raise ShapeError(f"level {level} outside 0..{decomp.n_levels - 1}")
    space = leadfield.source_space
    reps = decomp.representatives[level]
    sub_space = SourceSpace(
        positions=space.positions[reps],
        orientation_mode=space.orientation_mode,
        constraint_dirs=None if space.constraint_dirs is None
        else space.constraint_dirs[reps],
    )
    gain = restrict_gain(leadfield.gain, decomp, level, space.components_per_source)
    return LeadField(gain=gain, source_space=sub_space, reference=leadfield.reference)


def prolong_estimate(x_coarse, decomp: MultiresolutionDecomposition,
                     level: int, components: int = 3) -> np.ndarray:
    """Piecewise-constant interpolation of a level's coefficients onto
    the fine space (every cell member receives its representative's
    coefficient block)."""
    x_coarse = np.asarray(x_coarse, dtype=float).ravel()
    n_r = decomp.level_sizes[level]
    if x_coarse.shape[0] != components * n_r:
        raise ShapeError(
            f"coarse vector has length {x_coarse.shape[0]}, "
            f"level {level} expects {components * n_r}"
        )
    cells = decomp.assignments[level]
    if components == 1:
        return x_coarse[cells]
    return x_coarse.reshape(n_r, components)[cells].ravel()


def prolong_gamma(gamma_coarse, decomp: MultiresolutionDecomposition,
                  level: int, level_next: int, components: int = 3) -> np.ndarray:
    """Carry a level's hyperparameters to the next level's representatives.

    Each representative of ``level_next`` inherits the gamma block of the
    ``level`` cell that contains it; with ``level_next == level`` this is
    the identity.
    """
    if level_next not in (level, level + 1):
        raise ShapeError("gamma propagation runs between consecutive levels")
    gamma_coarse = _check_gamma(gamma_coarse)
    n_r = decomp.level_sizes[level]
    if gamma_coarse.shape[0] != components * n_r:
        raise ShapeError(
            f"gamma vector has length {gamma_coarse.shape[0]}, "
            f"level {level} expects {components * n_r}"
        )
    reps_next = decomp.representatives[level_next]
    owner = decomp.assignments[level][reps_next]
    if components == 1:
        return gamma_coarse[owner]
    return gamma_coarse.reshape(n_r, components)[owner].ravel()


@dataclass(frozen=True)
class RamusResult:
    estimate: np.ndarray
    scale: float
    decomposition_seeds: tuple[int, ...]
    traces: tuple  # per decomposition: tuple of per-level SolverTrace


def _scan_one(gain: np.ndarray, y: np.ndarray, hp: HyperParams,
              space: SourceSpace, cfg: RamusConfig, seed: int):
    """Coarse-to-fine pass over one decomposition; returns the summed
    prolonged estimates of all levels and the per-level traces."""
    comps = space.components_per_source
    decomp = sample_decomposition(space, cfg, seed)
    accum = np.zeros(gain.shape[1])
    traces = []
    gamma_prev: np.ndarray | None = None
    for level in range(decomp.n_levels):
        sub_gain = restrict_gain(gain, decomp, level, comps)
        gamma_init = None
        if level > 0 and gamma_prev is not None:
            gamma_init = prolong_gamma(gamma_prev, decomp, level - 1, level, comps)
        result: CepResult = run_cep(sub_gain, y, hp, gamma_init=gamma_init)
        accum += prolong_estimate(result.estimate, decomp, level, comps)
        gamma_prev = result.gamma
        traces.append(result.trace)
    return accum, tuple(traces)


def run_ramus(leadfield, y, hp: HyperParams, cfg: RamusConfig,
              master_seed: int, space: SourceSpace | None = None,
              workers: int = 1) -> RamusResult:
    """Average coarse-to-fine reconstructions over seeded decompositions.

    Per-decomposition seeds derive from ``master_seed`` by index, and the
    accumulation runs in fixed decomposition order, so the result is
    bit-identical for any ``workers`` count.  The averaged estimate is
    rescaled either by the least-squares data-fit scalar
    ``<L xhat, y> / ||L xhat||^2`` (default) or by the literal divisor
    ``sum_r s^r`` of the geometric level ladder.
    """
    gain = _as_gain(leadfield)
    y_vec = _as_vector(y)
    if space is None:
        if not isinstance(leadfield, LeadField):
            raise ShapeError("space must be given when leadfield is a raw array")
        space = leadfield.source_space
    if gain.shape[1] != space.coeff_len:
        raise ShapeError("gain columns do not match the source space")

    seeds = tuple(derive_seed(master_seed, k) for k in range(cfg.decompositions))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(
                lambda s: _scan_one(gain, y_vec, hp, space, cfg, s), seeds))
    else:
        outcomes = [_scan_one(gain, y_vec, hp, space, cfg, s) for s in seeds]

    estimate = np.zeros(gain.shape[1])
    for partial, _ in outcomes:  # fixed reduction order
        estimate += partial / cfg.decompositions

    if cfg.scaling_mode is ScalingMode.LITERAL_GEOMETRIC_SUM:
        n_levels = len(plan_level_sizes(space.n_sources, cfg))
        scale = 1.0 / sum(cfg.sparsity ** r for r in range(1, n_levels + 1))
    else:
        forward = gain @ estimate
        power = float(forward @ forward)
        scale = float(forward @ y_vec) / power if power > 0.0 else 1.0
    return RamusResult(
        estimate=estimate * scale,
        scale=scale,
        decomposition_seeds=seeds,
        traces=tuple(t for _, t in outcomes),
    )
