import math

import numpy as np
import pytest
from scipy.spatial.transform import Rotation as ScipyRotation
from scipy.stats import kstest

from so3density.rotation import (
    AxisAngle,
    DegenerateMatrix,
    Rotation,
    as_quat_array,
    canonicalize_quats,
    compose,
    convert,
    geodesic_distance,
    project_to_so3,
    quat_angles,
    quats_from_bytes,
    quats_to_bytes,
    sample_uniform,
    sample_uniform_quats,
)


def random_rotations(seed, n):
    return [Rotation(q) for q in sample_uniform_quats(seed, n)]


def trace_angle(a, b):
    """Independent oracle: rotation angle of a^-1 b from the matrix trace."""
    m = compose(a.inverse(), b).matrix
    return math.acos(min(1.0, max(-1.0, (np.trace(m) - 1.0) / 2.0)))


class TestRotationType:
    def test_unit_norm_and_canonical_sign(self):
        for q in sample_uniform_quats(3, 50):
            r = Rotation(q * 3.7)  # constructor renormalizes
            assert abs(np.linalg.norm(r.quaternion) - 1.0) < 1e-9
            assert r.quaternion[0] >= 0.0

    def test_negated_quaternion_is_same_rotation(self):
        q = sample_uniform_quats(4, 1)[0]
        assert np.allclose(Rotation(q).quaternion, Rotation(-q).quaternion)

    def test_sign_tie_break_first_nonzero_positive(self):
        r = Rotation((0.0, 0.0, 0.0, -1.0))
        assert r.quaternion[3] == 1.0
        r = Rotation((0.0, -0.5, 0.5, 0.0))
        assert r.quaternion[1] > 0.0

    def test_matrix_is_orthogonal_with_unit_det(self):
        for r in random_rotations(5, 25):
            m = r.matrix
            assert np.abs(m.T @ m - np.eye(3)).max() < 1e-7
            assert abs(np.linalg.det(m) - 1.0) < 1e-7

    def test_matrix_round_trip(self):
        for r in random_rotations(6, 25):
            back = Rotation.from_matrix(r.matrix)
            assert geodesic_distance(r, back) < 1e-7


class TestCompose:
    def test_identity(self):
        r = random_rotations(7, 1)[0]
        assert geodesic_distance(compose(Rotation.identity(), r), r) < 1e-12

    def test_same_axis_angles_add(self):
        lhs = compose(Rotation.rot_z(math.pi / 2), Rotation.rot_z(math.pi / 2))
        assert geodesic_distance(lhs, Rotation.rot_z(math.pi)) < 1e-12

    def test_inverse_gives_identity(self):
        for r in random_rotations(8, 10):
            assert geodesic_distance(compose(r, r.inverse()), Rotation.identity()) < 1e-12

    def test_apply_order(self):
        # compose(a, b) applies b first, then a.
        a, b = random_rotations(9, 2)
        v = np.array([0.3, -0.2, 0.9])
        assert np.allclose(compose(a, b).apply(v), a.apply(b.apply(v)))


class TestGeodesicDistance:
    def test_identity_distance_zero(self):
        assert geodesic_distance(Rotation.identity(), Rotation.identity()) == 0.0

    def test_single_axis(self):
        assert geodesic_distance(Rotation.identity(), Rotation.rot_z(math.pi / 2)) == \
            pytest.approx(math.pi / 2, abs=1e-12)

    def test_same_axis_difference_against_trace_oracle(self):
        a, b = Rotation.rot_x(0.3), Rotation.rot_x(1.1)
        assert geodesic_distance(a, b) == pytest.approx(0.8, abs=1e-12)
        assert geodesic_distance(a, b) == pytest.approx(trace_angle(a, b), abs=1e-9)

    def test_matches_trace_formula_on_random_pairs(self):
        rots = random_rotations(10, 60)
        for a, b in zip(rots[::2], rots[1::2]):
            assert geodesic_distance(a, b) == pytest.approx(trace_angle(a, b), abs=1e-9)

    def test_metric_axioms_on_random_triples(self):
        qs = sample_uniform_quats(11, 3000)
        a, b, c = qs[0::3], qs[1::3], qs[2::3]
        dab = quat_angles(a, b)
        dba = quat_angles(b, a)
        dac = quat_angles(a, c)
        dbc = quat_angles(b, c)
        assert np.abs(dab - dba).max() == 0.0
        assert np.all(dac <= dab + dbc + 1e-9)
        assert np.all(quat_angles(a, a) == 0.0)
        assert np.all(dab > 0.0)  # distinct random rotations

    def test_bi_invariance(self):
        rots = random_rotations(12, 40)
        g = random_rotations(13, 1)[0]
        for a, b in zip(rots[::2], rots[1::2]):
            d0 = geodesic_distance(a, b)
            dl = geodesic_distance(compose(g, a), compose(g, b))
            dr = geodesic_distance(compose(a, g), compose(b, g))
            assert abs(dl - d0) < 1e-9
            assert abs(dr - d0) < 1e-9


class TestSampleUniform:
    def test_mean_angle_from_identity(self):
        rots = sample_uniform(7, 1000)
        angles = [geodesic_distance(Rotation.identity(), r) for r in rots]
        # E[theta] under (1 - cos t)/pi on [0, pi] is pi/2 + 2/pi.
        assert np.mean(angles) == pytest.approx(math.pi / 2 + 2 / math.pi, abs=0.05)

    def test_determinism(self):
        a = sample_uniform(7, 3)
        b = sample_uniform(7, 3)
        for ra, rb in zip(a, b):
            assert np.array_equal(ra.quaternion, rb.quaternion)

    def test_fraction_below_right_angle(self):
        qs = sample_uniform_quats(7, 10000)
        angles = quat_angles(qs, np.array([1.0, 0.0, 0.0, 0.0]))
        expected = 0.5 - 1.0 / math.pi  # integral of the angle density to pi/2
        assert np.mean(angles < math.pi / 2) == pytest.approx(expected, abs=0.02)

    def test_haar_angle_distribution_ks(self):
        qs = sample_uniform_quats(99, 100_000)
        angles = quat_angles(qs, np.array([1.0, 0.0, 0.0, 0.0]))
        cdf = lambda t: (t - np.sin(t)) / math.pi
        stat = kstest(angles, cdf).statistic
        assert stat < 0.02

    def test_rejects_nonpositive_count(self):
        with pytest.raises(ValueError):
            sample_uniform(0, 0)


def _local_procrustes_search(target, start, rounds=4, samples=400):
    """Brute-force local minimizer of ||R - target||_F over rotations near start."""
    rng = np.random.default_rng(0)
    best = start
    best_err = np.linalg.norm(best.matrix - target)
    scale = 0.02
    for _ in range(rounds):
        for _ in range(samples):
            delta = rng.standard_normal(3) * scale
            angle = np.linalg.norm(delta)
            cand = compose(Rotation.from_axis_angle(delta if angle else [0, 0, 1],
                                                    angle), best)
            err = np.linalg.norm(cand.matrix - target)
            if err < best_err:
                best, best_err = cand, err
        scale /= 4.0
    return best, best_err


class TestProjectToSO3:
    def test_fixed_point(self):
        for r in random_rotations(14, 10):
            assert geodesic_distance(project_to_so3(r.matrix), r) < 1e-9

    def test_scale_invariance(self):
        r = random_rotations(15, 1)[0]
        assert geodesic_distance(project_to_so3(1.7 * r.matrix), r) < 1e-9

    def test_small_perturbation_vs_brute_force(self):
        rng = np.random.default_rng(16)
        for r in random_rotations(17, 5):
            noise = rng.standard_normal((3, 3))
            noise *= 1e-3 / np.linalg.norm(noise)
            target = r.matrix + noise
            proj = project_to_so3(target)
            assert geodesic_distance(proj, r) < 2e-3
            _, brute_err = _local_procrustes_search(target, r)
            assert np.linalg.norm(proj.matrix - target) <= brute_err + 1e-9

    def test_degenerate_matrix_raises(self):
        with pytest.raises(DegenerateMatrix):
            project_to_so3(np.zeros((3, 3)))
        with pytest.raises(DegenerateMatrix):
            m = np.diag([1.0, 1.0, 0.0])
            project_to_so3(m)


class TestConvert:
    def test_identity_matrix(self):
        assert np.array_equal(convert(Rotation.identity(), "matrix"), np.eye(3))

    def test_half_angle_quaternion(self):
        q = convert(Rotation.rot_z(math.pi / 2), "quaternion")
        assert np.allclose(q, [math.sqrt(2) / 2, 0.0, 0.0, math.sqrt(2) / 2])

    def test_round_trips(self):
        for r in random_rotations(18, 30):
            assert geodesic_distance(Rotation.from_matrix(convert(r, "matrix")), r) < 1e-7
            assert geodesic_distance(Rotation(convert(r, "quaternion")), r) < 1e-7
            aa = convert(r, "axis_angle")
            assert isinstance(aa, AxisAngle)
            assert abs(np.linalg.norm(aa.axis) - 1.0) < 1e-9
            assert 0.0 <= aa.angle <= math.pi
            assert geodesic_distance(Rotation.from_axis_angle(aa.axis, aa.angle), r) < 1e-7

    def test_euler_round_trip_away_from_gimbal_lock(self):
        count = 0
        for r in random_rotations(19, 60):
            yaw, pitch, roll = convert(r, "euler_zyx")
            if abs(abs(pitch) - math.pi / 2) < 0.15:
                continue
            count += 1
            back = Rotation.from_euler_zyx(yaw, pitch, roll)
            assert geodesic_distance(back, r) < 1e-7
        assert count > 40

    def test_euler_matches_composition_oracle(self):
        # Rebuilding from elementary rotations must reproduce the matrix.
        for r in random_rotations(20, 20):
            yaw, pitch, roll = convert(r, "euler_zyx")
            oracle = (Rotation.rot_z(yaw).matrix
                      @ Rotation.rot_y(pitch).matrix
                      @ Rotation.rot_x(roll).matrix)
            assert np.abs(oracle - r.matrix).max() < 1e-7

    def test_against_scipy(self):
        for r in random_rotations(21, 20):
            sp = ScipyRotation.from_matrix(r.matrix)
            assert np.abs(sp.as_matrix() - convert(r, "matrix")).max() < 1e-12
            q_sp = sp.as_quat()  # xyzw
            ours = convert(r, "quaternion")
            dot = abs(q_sp[3] * ours[0] + np.dot(q_sp[:3], ours[1:]))
            assert dot == pytest.approx(1.0, abs=1e-9)

    def test_unknown_format(self):
        with pytest.raises(ValueError):
            convert(Rotation.identity(), "cayley")


class TestSerialization:
    def test_round_trip_and_layout(self):
        qs = sample_uniform_quats(22, 7)
        raw = quats_to_bytes(qs)
        assert len(raw) == 7 * 4 * 8
        back = quats_from_bytes(raw, count=7)
        assert np.array_equal(back, canonicalize_quats(qs))
        # little-endian f64 layout
        first = np.frombuffer(raw[:8], dtype="<f8")[0]
        assert first == qs[0, 0]

    def test_count_mismatch(self):
        raw = quats_to_bytes(sample_uniform_quats(23, 3))
        with pytest.raises(ValueError):
            quats_from_bytes(raw, count=4)

    def test_as_quat_array_accepts_all_forms(self):
        r = Rotation.rot_x(0.5)
        assert as_quat_array(r).shape == (1, 4)
        assert as_quat_array([r, r]).shape == (2, 4)
        assert as_quat_array(r.quaternion).shape == (1, 4)
