import numpy as np
import pytest

from cepramus.errors import (
    ConfigError,
    DegenerateDataError,
    SeriesTruncationError,
    SourceOutOfDomainError,
)
from cepramus.forward import (
    ElectrodeLayout,
    NoiseSpec,
    ShellModel,
    ary_shell_model,
    ball_source_space,
    build_leadfield,
    dipole_potential,
    fibonacci_cap_layout,
    preset_configuration,
    simulate_measurement,
)
from cepramus.model import Dipole, DipoleConfig, Reference, SourceSpace

from oracles import homogeneous_sphere_potential


@pytest.fixture(scope="module")
def layout():
    return fibonacci_cap_layout(64, radius=92.0)


@pytest.fixture(scope="module")
def shells():
    return ary_shell_model()


class TestShellModel:
    def test_defaults_are_three_shell_head(self, shells):
        assert shells.radii == (82.0, 86.0, 92.0)
        assert shells.conductivities == (0.33, 0.0042, 0.33)

    @pytest.mark.parametrize("kwargs", [
        {"radii": (86.0, 82.0, 92.0)},
        {"conductivities": (0.33, 0.0, 0.33)},
        {"series_terms": 10},
    ])
    def test_validation(self, kwargs):
        with pytest.raises(ValueError):
            ShellModel(**kwargs)


class TestElectrodeLayout:
    def test_fibonacci_on_shell_within_cap(self, layout):
        norms = np.linalg.norm(layout.positions, axis=1)
        np.testing.assert_allclose(norms, 92.0, atol=1e-9)
        polar = np.arccos(layout.positions[:, 2] / 92.0)
        assert polar.max() <= layout.cap_extent + 1e-12

    def test_off_shell_rejected(self):
        pos = fibonacci_cap_layout(32, radius=92.0).positions.copy()
        pos[0] *= 1.001
        with pytest.raises(ValueError):
            ElectrodeLayout(positions=pos, radius=92.0, cap_extent=2.0)

    def test_minimum_count(self):
        with pytest.raises(ValueError):
            fibonacci_cap_layout(8, radius=92.0)


class TestNoiseSpec:
    @pytest.mark.parametrize("rel", [0.0, 1.0, -0.1])
    def test_range(self, rel):
        with pytest.raises(ValueError):
            NoiseSpec(rel_std=rel)

    def test_listed_levels_accepted(self):
        for rel in (0.03, 0.05, 0.07, 0.09, 0.11, 0.13, 0.15):
            NoiseSpec(rel_std=rel)


class TestDipolePotential:
    def test_zero_moment_zero_potential(self, shells, layout):
        v = dipole_potential(shells, [10.0, 0.0, 40.0], np.zeros(3), layout)
        np.testing.assert_array_equal(v, np.zeros(layout.n_electrodes))

    def test_homogeneous_sphere_closed_form(self, layout, rng):
        model = ShellModel(conductivities=(0.33, 0.33, 0.33))
        for _ in range(20):
            direction = rng.standard_normal(3)
            direction /= np.linalg.norm(direction)
            pos = direction * rng.uniform(2.0, 70.0)
            moment = rng.standard_normal(3) * 1e-8
            series = dipole_potential(model, pos, moment, layout)
            closed = homogeneous_sphere_potential(92.0, 0.33, pos, moment,
                                                  layout.positions)
            closed = closed - closed.mean()
            err = np.abs(series - closed).max() / np.abs(closed).max()
            assert err < 1e-8

    def test_mirror_symmetry_exact(self, shells, layout):
        refl = np.diag([1.0, -1.0, 1.0])
        pos = np.array([25.0, 18.0, 33.0])
        mom = np.array([4e-9, -7e-9, 2e-9])
        mirrored_layout = ElectrodeLayout(positions=layout.positions @ refl,
                                          radius=92.0,
                                          cap_extent=layout.cap_extent)
        a = dipole_potential(shells, pos, mom, layout)
        b = dipole_potential(shells, refl @ pos, refl @ mom, mirrored_layout)
        np.testing.assert_array_equal(a, b)

    def test_linear_in_moment(self, shells, layout):
        pos = np.array([0.0, 20.0, 40.0])
        m1 = np.array([1e-8, 0.0, 0.0])
        m2 = np.array([0.0, -3e-9, 5e-9])
        lhs = dipole_potential(shells, pos, 2.0 * m1 + m2, layout)
        rhs = (2.0 * dipole_potential(shells, pos, m1, layout)
               + dipole_potential(shells, pos, m2, layout))
        np.testing.assert_allclose(lhs, rhs, rtol=1e-12, atol=1e-18)

    def test_source_outside_brain_rejected(self, shells, layout):
        with pytest.raises(SourceOutOfDomainError):
            dipole_potential(shells, [0.0, 0.0, 81.5], [0.0, 0.0, 1e-8], layout)

    def test_unconverged_series_rejected(self, layout):
        shallow_model = ShellModel(series_terms=20)
        with pytest.raises(SeriesTruncationError):
            dipole_potential(shallow_model, [0.0, 0.0, 79.0],
                             [1e-8, 0.0, 0.0], layout)

    def test_common_electrode_reference(self, shells, layout):
        v = dipole_potential(shells, [0.0, 10.0, 40.0], [1e-8, 0.0, 0.0],
                             layout, reference=Reference.common(3))
        assert v[3] == 0.0


class TestBuildLeadfield:
    def test_columns_stack_unit_moment_potentials(self, shells, layout):
        space = SourceSpace(positions=np.array([[12.0, -8.0, 30.0]]))
        lf = build_leadfield(shells, space, layout)
        for k, axis in enumerate(np.eye(3)):
            v = dipole_potential(shells, space.positions[0], axis, layout)
            np.testing.assert_allclose(lf.gain[:, k], v, rtol=1e-12, atol=1e-18)

    def test_superposition_matches_per_dipole_sum(self, shells, layout):
        space = ball_source_space(40, radius=65.0, seed=2)
        lf = build_leadfield(shells, space, layout)
        dipoles = (
            Dipole(position=space.positions[5], moment=np.array([0.0, 0.0, 1.0]),
                   amplitude=1e-8),
            Dipole(position=space.positions[17], moment=np.array([1.0, 0.0, 0.0]),
                   amplitude=7e-9),
        )
        coeffs = np.zeros(lf.n_cols)
        expected = np.zeros(layout.n_electrodes)
        for d in dipoles:
            idx = int(np.argmin(np.linalg.norm(space.positions - d.position, axis=1)))
            coeffs[3 * idx:3 * idx + 3] += d.amplitude * d.moment
            expected += d.amplitude * dipole_potential(shells, space.positions[idx],
                                                       d.moment, layout)
        np.testing.assert_allclose(lf.gain @ coeffs, expected,
                                   rtol=1e-12, atol=1e-20)

    def test_depth_attenuation(self, shells, layout):
        space = SourceSpace(positions=np.array([[0.0, 0.0, 30.0],
                                                [0.0, 0.0, 70.0]]))
        lf = build_leadfield(shells, space, layout)
        deep = np.linalg.norm(lf.gain[:, 0:3], axis=0)
        shallow = np.linalg.norm(lf.gain[:, 3:6], axis=0)
        assert np.all(deep < shallow)

    def test_average_reference_column_sums(self, shells, layout):
        space = ball_source_space(30, radius=70.0, seed=4)
        lf = build_leadfield(shells, space, layout)
        sums = np.abs(lf.gain.sum(axis=0))
        peaks = np.abs(lf.gain).max(axis=0)
        assert np.all(sums <= 1e-10 * peaks)

    def test_depth_monotone_decay_along_rays(self, shells, rng):
        # max-channel magnitude should not increase as the source moves
        # radially inward (5 mm steps, 50 random rays and moments); full
        # sphere coverage so that inward always means away from sensors
        full = fibonacci_cap_layout(128, radius=92.0, cap_extent=np.pi)
        for _ in range(50):
            direction = rng.standard_normal(3)
            direction /= np.linalg.norm(direction)
            moment = rng.standard_normal(3)
            moment *= 1e-8 / np.linalg.norm(moment)
            radii = np.arange(75.0, 4.0, -5.0)
            peaks = []
            for r in radii:
                v = dipole_potential(shells, r * direction, moment, full)
                peaks.append(np.abs(v).max())
            peaks = np.array(peaks)
            assert np.all(np.diff(peaks) <= 1e-12 * peaks[:-1])

    def test_truncation_insensitive_at_default_order(self, layout):
        space = ball_source_space(15, radius=78.0, seed=9)
        lf_base = build_leadfield(ary_shell_model(), space, layout)
        lf_fine = build_leadfield(ary_shell_model(series_terms=400), space, layout)
        delta = np.abs(lf_base.gain - lf_fine.gain).max()
        assert delta < 1e-8 * np.abs(lf_fine.gain).max()

    def test_constrained_space_single_column(self, shells, layout):
        positions = np.array([[0.0, 15.0, 40.0]])
        dirs = np.array([[0.0, 0.0, 1.0]])
        from cepramus.model import OrientationMode
        space = SourceSpace(positions=positions,
                            orientation_mode=OrientationMode.CONSTRAINED,
                            constraint_dirs=dirs)
        lf = build_leadfield(shells, space, layout)
        v = dipole_potential(shells, positions[0], dirs[0], layout)
        np.testing.assert_allclose(lf.gain[:, 0], v, rtol=1e-12, atol=1e-18)


class TestBallSourceSpace:
    def test_deterministic_and_bounded(self):
        a = ball_source_space(200, radius=78.0, seed=5)
        b = ball_source_space(200, radius=78.0, seed=5)
        np.testing.assert_array_equal(a.positions, b.positions)
        assert np.linalg.norm(a.positions, axis=1).max() <= 78.0

    def test_seed_changes_points(self):
        a = ball_source_space(50, seed=1)
        b = ball_source_space(50, seed=2)
        assert not np.array_equal(a.positions, b.positions)


@pytest.fixture(scope="module")
def preset_space():
    return ball_source_space(400, radius=78.0, seed=31)


class TestPresets:

    def test_config_one_two_dipoles_amplitude_ratio(self, preset_space):
        cfg = preset_configuration("I", preset_space)
        assert len(cfg) == 2
        amps = sorted(d.amplitude for d in cfg.dipoles)
        assert amps[0] / amps[1] == pytest.approx(0.7, abs=1e-12)

    def test_config_two_single_dipole(self, preset_space):
        cfg = preset_configuration("II", preset_space)
        assert len(cfg) == 1
        assert cfg.dipoles[0].amplitude == pytest.approx(1e-8, abs=0)
        np.testing.assert_array_equal(cfg.dipoles[0].moment, [0.0, 0.0, 1.0])

    def test_positions_live_on_the_source_grid(self, preset_space):
        cfg = preset_configuration("I", preset_space)
        for d in cfg.dipoles:
            dists = np.linalg.norm(preset_space.positions - d.position[None, :], axis=1)
            assert dists.min() == 0.0

    def test_superficial_is_tangential(self, preset_space):
        cfg = preset_configuration("I", preset_space)
        sup = max(cfg.dipoles, key=lambda d: np.linalg.norm(d.position))
        r_hat = sup.position / np.linalg.norm(sup.position)
        assert abs(sup.moment @ r_hat) < 1e-10

    def test_unknown_name(self, preset_space):
        with pytest.raises(ConfigError):
            preset_configuration("III", preset_space)


@pytest.fixture(scope="module")
def problem():
    model = ary_shell_model()
    layout = fibonacci_cap_layout(48, radius=92.0)
    space = ball_source_space(120, radius=70.0, seed=8)
    lf = build_leadfield(model, space, layout)
    return lf, preset_configuration("II", space)


class TestSimulateMeasurement:

    def test_tiny_noise_limit_matches_scaled_clean(self, problem):
        lf, cfg = problem
        sim = simulate_measurement(lf, cfg, NoiseSpec(rel_std=1e-12, seed=3))
        clean_scaled = sim.clean_values / np.abs(sim.clean_values).max()
        np.testing.assert_allclose(sim.measurement.values, clean_scaled,
                                   rtol=0, atol=1e-10)

    def test_seed_determinism(self, problem):
        lf, cfg = problem
        a = simulate_measurement(lf, cfg, NoiseSpec(rel_std=0.05, seed=42))
        b = simulate_measurement(lf, cfg, NoiseSpec(rel_std=0.05, seed=42))
        np.testing.assert_array_equal(a.measurement.values, b.measurement.values)

    def test_noise_std_statistics(self, problem):
        # sample std over 1e4 draws within 3 percent of the target
        lf, cfg = problem
        target = None
        draws = []
        for seed in range(10000):
            sim = simulate_measurement(lf, cfg, NoiseSpec(rel_std=0.05, seed=seed))
            if target is None:
                target = 0.05 * np.abs(sim.clean_values).max()
            draws.append(sim.clean_values[0]
                         + (sim.measurement.values[0] / sim.measurement.scale_to_unit
                            - sim.clean_values[0]))
        noise0 = np.array(draws) - lf.gain[0] @ simulate_measurement(
            lf, cfg, NoiseSpec(rel_std=0.05, seed=0)).true_coeffs
        assert abs(noise0.std(ddof=1) - target) < 0.03 * target

    def test_scaled_peak_is_one(self, problem):
        lf, cfg = problem
        sim = simulate_measurement(lf, cfg, NoiseSpec(rel_std=0.05, seed=1))
        assert np.abs(sim.measurement.values).max() == pytest.approx(1.0, abs=1e-15)

    def test_empty_config_raises(self, problem):
        lf, _ = problem
        with pytest.raises((DegenerateDataError, ValueError)):
            simulate_measurement(lf, DipoleConfig(dipoles=()),
                                 NoiseSpec(rel_std=0.05, seed=0))

    def test_snap_warning_flag(self, problem):
        lf, _ = problem
        far = DipoleConfig(dipoles=(
            Dipole(position=np.array([1.0, 2.0, 3.0]),
                   moment=np.array([0.0, 0.0, 1.0]), amplitude=1e-8),
        ))
        sim = simulate_measurement(lf, far, NoiseSpec(rel_std=0.05, seed=0))
        assert sim.snap_warning == (max(sim.snap_distances_mm) > 5.0)
