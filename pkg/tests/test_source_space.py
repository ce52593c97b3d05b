import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from esbn.container import MAGIC
from esbn.errors import (
    ConfigurationError,
    DegenerateOrientationError,
    FormatError,
    GeometryError,
    PayloadLengthError,
)
from esbn.source_space import (
    LeadField,
    analytic_leadfield,
    apply_loose_orientation,
    build_grid_source_space,
    build_head_model,
    collapse_leadfield,
    export_leadfield,
    hemisphere_sensors,
    import_leadfield,
    principal_orientation,
    source_depth_score,
)


def lattice_count(radius, spacing):
    """Brute-force count of lattice points p * spacing with |p * spacing| <= radius."""
    half = int(radius // spacing) + 1
    count = 0
    for p in itertools.product(range(-half, half + 1), repeat=3):
        if (p[0] ** 2 + p[1] ** 2 + p[2] ** 2) * spacing ** 2 <= radius ** 2:
            count += 1
    return count


class TestGrid:
    def test_radius_equal_spacing_gives_seven(self):
        space = build_grid_source_space(7.0, 7.0, min_sources=1)
        assert space.n_sources == 7
        assert lattice_count(7, 7) == 7
        expected = {(0, 0, 0), (7, 0, 0), (-7, 0, 0), (0, 7, 0), (0, -7, 0), (0, 0, 7), (0, 0, -7)}
        assert {tuple(p) for p in space.positions.astype(int)} == expected

    def test_half_spacing_gives_origin_only(self):
        space = build_grid_source_space(5.0, 10.0, origin=(1.0, 2.0, 3.0), min_sources=1)
        assert space.n_sources == 1
        np.testing.assert_array_equal(space.positions[0], [1.0, 2.0, 3.0])

    def test_desk_grid_matches_enumeration(self):
        space = build_grid_source_space(70.0, 10.0)
        # frozen from lattice_count(70, 10)
        assert space.n_sources == 1419
        assert lattice_count(70, 10) == 1419

    def test_too_few_sources_rejected(self):
        with pytest.raises(ConfigurationError):
            build_grid_source_space(7.0, 7.0)

    def test_nonpositive_spacing_rejected(self):
        with pytest.raises(ConfigurationError):
            build_grid_source_space(10.0, 0.0)

    def test_positions_follow_index_exactly(self):
        space = build_grid_source_space(30.0, 6.0, origin=(0.5, -1.25, 2.0))
        np.testing.assert_array_equal(
            space.positions, space.grid_origin + space.grid_index * space.grid_spacing)
        assert len({tuple(g) for g in space.grid_index}) == space.n_sources
        assert np.all(space.grid_index >= 0)
        assert np.all(space.grid_index < np.array(space.grid_dims))

    def test_deterministic(self):
        a = build_grid_source_space(40.0, 10.0)
        b = build_grid_source_space(40.0, 10.0)
        assert a.positions.tobytes() == b.positions.tobytes()
        np.testing.assert_array_equal(a.grid_index, b.grid_index)

    def test_arrays_read_only(self):
        space = build_grid_source_space(20.0, 10.0)
        with pytest.raises(ValueError):
            space.positions[0, 0] = 1.0

    @settings(max_examples=25, deadline=None)
    @given(radius=st.floats(5.0, 40.0), spacing=st.floats(4.0, 15.0))
    def test_count_matches_enumeration(self, radius, spacing):
        expected = lattice_count(radius, spacing)
        space = build_grid_source_space(radius, spacing, min_sources=1)
        # points exactly on the sphere may be resolved differently by the tolerance
        assert abs(space.n_sources - expected) == 0 or np.isclose(
            radius / spacing, np.round(radius / spacing))


class TestAnalyticLeadfield:
    def test_on_axis_potential(self):
        space = build_grid_source_space(0.5, 1.0, min_sources=1)
        d = 80.0
        lf = analytic_leadfield(space, np.array([[0.0, 0.0, d]]), conductivity=0.33, reference=False)
        np.testing.assert_allclose(lf.gain_free[0, 2], 1.0 / (4 * np.pi * 0.33 * d ** 2), rtol=1e-14)
        np.testing.assert_allclose(lf.gain_free[0, :2], 0.0, atol=1e-20)

    def test_mirror_sensors_antisymmetric(self):
        space = build_grid_source_space(0.5, 1.0, min_sources=1)
        sensors = np.array([[10.0, 20.0, 50.0], [10.0, 20.0, -50.0]])
        lf = analytic_leadfield(space, sensors, reference=False)
        np.testing.assert_allclose(lf.gain_free[0, 2], -lf.gain_free[1, 2], rtol=1e-14)

    def test_referenced_columns_sum_to_zero(self, small_head):
        space, _ = small_head
        lf = analytic_leadfield(space, hemisphere_sensors(16))
        scale = np.abs(lf.gain_free).max()
        assert np.all(np.abs(lf.gain_free.sum(axis=0)) < 1e-12 * scale)

    def test_sensor_on_source_rejected(self):
        space = build_grid_source_space(0.5, 1.0, min_sources=1)
        with pytest.raises(GeometryError):
            analytic_leadfield(space, np.array([[0.0, 0.0, 0.5]]))

    def test_decays_along_ray(self):
        sensors = np.array([[0.0, 0.0, 100.0]])
        mags = []
        for z in np.linspace(-60.0, 80.0, 15):
            sp = build_grid_source_space(0.5, 1.0, origin=(0.0, 0.0, z), min_sources=1)
            lf = analytic_leadfield(sp, sensors, reference=False)
            mags.append(abs(lf.gain_free[0, 2]))
        assert np.all(np.diff(mags) > 0)


class TestOrientation:
    def _lf_with_sums(self, sums):
        # two channels whose sum over channels equals ``sums`` per source
        g = np.vstack([np.asarray(sums, float) / 2, np.asarray(sums, float) / 2])
        return LeadField(gain_free=g)

    def test_z_axis(self):
        np.testing.assert_array_equal(principal_orientation(self._lf_with_sums([0, 0, 2])), [[0, 0, 1]])

    def test_pythagorean(self):
        np.testing.assert_allclose(principal_orientation(self._lf_with_sums([3, 4, 0])),
                                   [[0.6, 0.8, 0.0]], atol=1e-15)

    def test_random_matches_oracle(self, rng):
        g = rng.standard_normal((8, 15))
        d = principal_orientation(LeadField(gain_free=g))
        for n in range(5):
            s = np.array([sum(g[m, 3 * n + a] for m in range(8)) for a in range(3)])
            np.testing.assert_allclose(d[n], s / np.sqrt(np.sum(s ** 2)), atol=1e-12)

    def test_degenerate_lists_sources(self):
        g = np.zeros((2, 9))
        g[0, 0] = 1.0
        with pytest.raises(DegenerateOrientationError) as info:
            principal_orientation(LeadField(gain_free=g))
        assert info.value.sources == [1, 2]

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2 ** 32 - 1), scale=st.floats(1e-3, 1e3))
    def test_scale_invariant(self, seed, scale):
        g = np.random.default_rng(seed).standard_normal((6, 12))
        a = principal_orientation(LeadField(gain_free=g))
        b = principal_orientation(LeadField(gain_free=scale * g))
        np.testing.assert_allclose(a, b, atol=1e-12)


class TestLoose:
    def test_zero_loose_returns_d(self):
        d = np.array([0.0, 0.6, 0.8])
        for ori in ([1.0, 0, 0], [0, -0.6, -0.8], [0, 0, 1.0]):
            np.testing.assert_array_equal(apply_loose_orientation(d, np.array(ori), 1.0, 0.0), d)

    def test_full_loose_opposite_flips(self):
        d = np.array([0.0, 0.0, 1.0])
        np.testing.assert_allclose(apply_loose_orientation(d, -d, 3.0, 1.0), 3.0 * d)

    def test_training_condition_value(self):
        # dot(ori, d) = 0 is not positive, so ori is flipped:
        # 0.9 * (0,0,1) - 0.1 * (1,0,0) renormalised, times 2
        out = apply_loose_orientation(np.array([0, 0, 1.0]), np.array([1.0, 0, 0]), 2.0, 0.1)
        norm = np.sqrt(0.81 + 0.01)
        np.testing.assert_allclose(out, [-2 * 0.1 / norm, 0.0, 2 * 0.9 / norm], rtol=1e-14)
        tilted = apply_loose_orientation(np.array([0, 0, 1.0]), np.array([0.6, 0, 0.8]), 2.0, 0.1)
        mix = np.array([0.06, 0.0, 0.9 + 0.08])
        np.testing.assert_allclose(tilted, 2 * mix / np.linalg.norm(mix), rtol=1e-14)

    def test_invalid_loose(self):
        with pytest.raises(ConfigurationError):
            apply_loose_orientation(np.array([0, 0, 1.0]), np.array([1.0, 0, 0]), 1.0, 1.5)

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2 ** 32 - 1), act=st.floats(-5, 5))
    def test_full_loose_is_plus_minus_ori(self, seed, act):
        r = np.random.default_rng(seed)
        d, ori = r.standard_normal(3), r.standard_normal(3)
        d /= np.linalg.norm(d)
        ori /= np.linalg.norm(ori)
        out = apply_loose_orientation(d, ori, act, 1.0)
        sign = 1.0 if ori @ d > 0 else -1.0
        np.testing.assert_allclose(out, act * sign * ori, atol=1e-12)
        zero = apply_loose_orientation(d, ori, act, 0.0)
        np.testing.assert_allclose(zero, act * d, atol=0)


class TestCollapse:
    def test_x_axis_selects_columns(self, rng):
        g = rng.standard_normal((4, 12))
        lf = collapse_leadfield(LeadField(gain_free=g), np.tile([1.0, 0, 0], (4, 1)))
        np.testing.assert_array_equal(lf.gain_fixed, g[:, 0::3])

    def test_zero_orientation_rejected(self, rng):
        g = rng.standard_normal((4, 6))
        with pytest.raises(ConfigurationError):
            collapse_leadfield(LeadField(gain_free=g), np.zeros((2, 3)))

    def test_random_matches_oracle(self, rng):
        g = rng.standard_normal((5, 21))
        o = rng.standard_normal((7, 3))
        o /= np.linalg.norm(o, axis=1, keepdims=True)
        lf = collapse_leadfield(LeadField(gain_free=g), o)
        for n in range(7):
            ref = g[:, 3 * n:3 * n + 3] @ o[n]
            np.testing.assert_allclose(lf.gain_fixed[:, n], ref, rtol=1e-12, atol=1e-15)


class TestDepthScore:
    def test_zero_column(self):
        lf = LeadField(gain_free=None, gain_fixed=np.array([[0.0, 1.0], [0.0, -1.0], [0.0, 2.0]]))
        assert source_depth_score(lf, 0) == 0.0
        assert source_depth_score(lf, 1) == 4.0

    def test_decreases_with_depth(self):
        sensors = hemisphere_sensors(32)
        scores = []
        for depth in (10.0, 20.0, 40.0, 60.0):
            z = 100.0 - depth
            sp = build_grid_source_space(0.5, 1.0, origin=(0.0, 0.0, z), min_sources=1)
            _, lf = build_head_model(sp, sensors)
            scores.append(source_depth_score(lf, 0))
        assert np.all(np.diff(scores) < 0)

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 2 ** 32 - 1))
    def test_channel_permutation_invariant(self, seed):
        r = np.random.default_rng(seed)
        k = r.standard_normal((9, 5))
        perm = r.permutation(9)
        a = source_depth_score(LeadField(gain_free=None, gain_fixed=k))
        b = source_depth_score(LeadField(gain_free=None, gain_fixed=k[perm]))
        np.testing.assert_allclose(a, b, rtol=1e-14)


class TestHeadModel:
    def test_orientation_and_collapse_invariants(self, small_head):
        space, lf = small_head
        np.testing.assert_allclose(np.linalg.norm(space.orientations, axis=1), 1.0, atol=1e-9)
        blocks = lf.gain_free.reshape(lf.n_sensors, -1, 3)
        ref = np.einsum("mna,na->mn", blocks, space.orientations)
        np.testing.assert_allclose(lf.gain_fixed, ref, rtol=1e-12, atol=1e-18)
        assert lf.referenced


class TestLeadfieldFiles:
    def test_round_trip_bit_identical(self, tmp_path, rng):
        g = rng.standard_normal((8, 30))
        export_leadfield(LeadField(gain_free=g), tmp_path / "lf.esiw")
        back = import_leadfield(tmp_path / "lf.esiw")
        assert back.gain_free.tobytes() == g.tobytes()

    def test_truncated_payload(self, tmp_path, rng):
        path = tmp_path / "lf.esiw"
        export_leadfield(LeadField(gain_free=rng.standard_normal((8, 30))), path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-5])
        with pytest.raises(PayloadLengthError):
            import_leadfield(path)

    def test_wrong_magic(self, tmp_path, rng):
        path = tmp_path / "lf.esiw"
        export_leadfield(LeadField(gain_free=rng.standard_normal((8, 30))), path)
        raw = path.read_bytes()
        assert raw[:4] == MAGIC
        path.write_bytes(b"XXXX" + raw[4:])
        with pytest.raises(FormatError):
            import_leadfield(path)
