import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import kstest

from ebmpose.errors import BadSpec, ConfigError, ParseError, RejectionBudgetExceeded, VersionMismatch
from ebmpose.geom import RigidPose, axis_angle_matrix, pose_distance, random_rotation
from ebmpose.simulator import (
    GraspSpec,
    SensorConfig,
    ShapeSpec,
    TactileImprint,
    augment_depth,
    compose_grasp_pose,
    contact_fractions,
    default_grasps,
    draw_sample,
    generate_dataset,
    generate_trajectory,
    make_shape,
    parse_shape,
    read_dataset,
    render_batch,
    render_imprint,
    render_oracle,
    synthesize_grasp,
    write_dataset,
)

SENSOR = SensorConfig()


@pytest.fixture(scope="module")
def box():
    return make_shape(parse_shape("box:20,10,6"))


@pytest.fixture(scope="module")
def cylinder():
    return make_shape(parse_shape("cylinder:5,20"))


# --- shapes ----------------------------------------------------------------


def test_cube_diameter():
    cube = make_shape(parse_shape("box:10,10,10"))
    assert cube.diameter == pytest.approx(10 * np.sqrt(3), rel=0.01)
    assert cube.symmetry.kind == "quarter_turn"


def test_cylinder_surface(cylinder):
    r = np.hypot(cylinder.points[:, 0], cylinder.points[:, 1])
    on_side = np.abs(r - 5.0) < 1e-6
    on_cap = np.abs(np.abs(cylinder.points[:, 2]) - 10.0) < 1e-6
    assert np.all(on_side | on_cap)
    assert cylinder.symmetry.kind == "revolute"


def test_tube_revolute_adds_zero():
    tube = make_shape(parse_shape("tube:5,3,10"))
    assert tube.symmetry.kind == "revolute"
    assert np.allclose(tube.symmetry.axis, (0, 0, 1))
    gt = RigidPose(axis_angle_matrix([1, 0, 1], 0.6), [1.0, -2.0, 0.5])
    est = gt.compose(RigidPose(axis_angle_matrix([0, 0, 1], np.deg2rad(30)), np.zeros(3)))
    assert pose_distance(est, gt, tube) < 1e-9


@pytest.mark.parametrize("spec", ["box:20,10,6", "cylinder:5,20", "tube:5,3,10", "l_bracket:20,12,8,3", "notched_plate:24,16,4,8,6"])
def test_shapes_valid(spec):
    m = make_shape(parse_shape(spec))
    assert len(m.points) >= 1024
    assert np.linalg.norm(m.points.mean(axis=0)) <= 1e-6 * m.diameter
    m.check()


@pytest.mark.parametrize("spec", [ShapeSpec("box", (0, 1, 1)), ShapeSpec("cylinder", (-1, 2)), ShapeSpec("sphere", (1,)), ShapeSpec("box", (1, 2))])
def test_bad_shapes(spec):
    with pytest.raises(BadSpec):
        make_shape(spec)


def test_parse_shape_errors():
    with pytest.raises(BadSpec):
        parse_shape("box20,10,6")
    with pytest.raises(BadSpec):
        parse_shape("box:a,b,c")


# --- rendering -------------------------------------------------------------


def test_no_contact_outside_columns(box):
    far = RigidPose(np.eye(3), [0.0, 100.0, 0.0])
    im = render_imprint(box, far, SENSOR, 0.5, gap=10.0)
    assert not im.depth.any()
    assert np.array_equal(im.contact_fraction, [0.0, 0.0])


def test_flush_face_reads_indentation(box):
    # the 20 mm axis lies along the closing direction; both 10x6 faces touch a plate.
    # The closed face [-5, 5] x [-3, 3] meets 11 x 7 half-open pixel cells.
    delta = 0.37
    im = render_imprint(box, RigidPose.identity(), SENSOR, delta, gap=10.0)
    for s in range(2):
        touched = im.depth[s][im.depth[s] > 0]
        assert touched.size == 11 * 7
        assert np.all(touched == delta)


@pytest.mark.parametrize("seed", range(6))
def test_render_matches_oracle(seed, box, cylinder):
    rng = np.random.default_rng(seed)
    model = cylinder if seed % 2 else box
    R = random_rotation(rng)
    pose = RigidPose(R, rng.uniform(-2, 2, 3))
    gap = float(np.abs(pose.apply(model.points)[:, 0]).max()) - 0.2
    fast = render_imprint(model, pose, SENSOR, 0.8, gap).depth
    assert np.abs(fast - render_oracle(model, pose, SENSOR, 0.8, gap)).max() < 1e-12


def test_cylinder_side_profile(cylinder):
    # axis along TCP z, parallel to both plates
    pose = RigidPose(np.eye(3), np.zeros(3))
    ind = 1.0
    d = render_imprint(cylinder, pose, SENSOR, ind, gap=5.0).depth
    assert np.abs(d - render_oracle(cylinder, pose, SENSOR, ind, 5.0)).max() < 1e-12
    row = d[0, 8]
    peak = int(np.argmax(row))
    assert peak in (7, 8)
    assert np.all(np.diff(row[peak:]) <= 1e-12) and np.all(np.diff(row[: peak + 1]) >= -1e-12)


def test_translation_equivariance(box):
    pose = RigidPose(axis_angle_matrix([1, 0.3, 0.2], 0.4), [0.0, -1.3, 0.4])
    gap = float(np.abs(pose.apply(box.points)[:, 0]).max())
    a = render_imprint(box, pose, SENSOR, 0.7, gap).depth
    shifted = RigidPose(pose.rotation, pose.translation + [0.0, SENSOR.pixel_pitch, 0.0])
    b = render_imprint(box, shifted, SENSOR, 0.7, gap).depth
    assert np.abs(b[:, :, 2:-1] - a[:, :, 1:-2]).max() < 1e-9


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.05, 1.0))
def test_depth_bounds_and_contact_fraction(seed, ind):
    box = make_shape(parse_shape("box:20,10,6"))
    rng = np.random.default_rng(seed)
    pose = RigidPose(random_rotation(rng), rng.uniform(-3, 3, 3))
    im = render_imprint(box, pose, SENSOR, ind, gap=rng.uniform(2, 12))
    assert im.depth.min() >= 0.0
    assert im.depth.max() <= ind
    assert np.array_equal(contact_fractions(im.depth), im.contact_fraction)


def test_render_deterministic(box):
    rng = np.random.default_rng(4)
    R = np.stack([random_rotation(rng) for _ in range(8)])
    t = rng.normal(size=(8, 3))
    a = render_batch(box.points, R, t, SENSOR, 6.0, 0.5)
    b = render_batch(box.points, R, t, SENSOR, 6.0, 0.5)
    assert np.array_equal(a, b)
    # batch rows are independent of each other
    c = render_batch(box.points, R[3:4], t[3:4], SENSOR, 6.0, 0.5)
    assert np.array_equal(a[3], c[0])


def test_render_indentation_domain(box):
    with pytest.raises(ConfigError):
        render_imprint(box, RigidPose.identity(), SENSOR, 0.0)
    with pytest.raises(ConfigError):
        render_imprint(box, RigidPose.identity(), SENSOR, 1.5)


# --- grasp synthesis -------------------------------------------------------


def test_degenerate_randomization_is_constant(box):
    g = GraspSpec((1, 0, 0), (0.5, 0.5), (0.0, 0.0), 0.0)
    a = synthesize_grasp(box, g, SENSOR, np.random.default_rng(1))
    b = synthesize_grasp(box, g, SENSOR, np.random.default_rng(999))
    assert a is not None and a == b


def test_indentation_uniform_ks(box):
    samples = generate_dataset(box, 10_000, SENSOR, seed=5)
    res = kstest([s.indentation for s in samples], "uniform", args=(0.2, 0.8))
    assert res.pvalue > 0.01


def test_thin_object_rejected():
    pencil = make_shape(parse_shape("cylinder:0.3,4"))
    g = GraspSpec((1, 0, 0), (0.2, 1.0), (0.0, 0.0), 0.0)
    assert synthesize_grasp(pencil, g, SENSOR, np.random.default_rng(0)) is None
    with pytest.raises(RejectionBudgetExceeded):
        draw_sample(pencil, [g], SENSOR, np.random.default_rng(0))


def test_grasp_validation(box):
    with pytest.raises(ConfigError):
        synthesize_grasp(box, GraspSpec((1, 0, 0), (0.2, 1.5)), SENSOR, np.random.default_rng(0))
    with pytest.raises(ConfigError):
        synthesize_grasp(box, GraspSpec((1, 0, 0), (0.2, 1.0), (50.0, 1.0)), SENSOR, np.random.default_rng(0))


def test_grasp_pose_is_centred(box):
    for g in default_grasps(box):
        pose, gap = compose_grasp_pose(box, g, 0.7, (1.0, -0.5))
        x = pose.apply(box.points)[:, 0]
        assert x.min() == pytest.approx(-gap, abs=1e-12) and x.max() == pytest.approx(gap, abs=1e-12)


def test_samples_pass_contact_filter(box):
    for s in generate_dataset(box, 200, SENSOR, seed=3, mask_prob=0.3):
        im = s.imprint
        assert im.present.any()
        assert np.any(im.contact_fraction[im.present] >= 0.05)
        assert 0.0 <= im.depth.min() and im.depth.max() <= SENSOR.max_depth


def test_dataset_sample_seeding(box):
    a = generate_dataset(box, 20, SENSOR, seed=9)
    b = generate_dataset(box, 30, SENSOR, seed=9)
    assert all(x == y for x, y in zip(a, b[:20]))
    c = generate_dataset(box, 20, SENSOR, seed=9, stream=1)
    assert not any(x == y for x, y in zip(a, c))


def test_augment_depth_nonnegative():
    rng = np.random.default_rng(0)
    d = np.abs(rng.normal(size=(5, 2, 16, 16))) * (rng.random((5, 2, 16, 16)) > 0.6)
    out = augment_depth(d, rng)
    assert out.shape == d.shape and out.min() >= 0.0
    assert not np.array_equal(out, d)


# --- trajectories ----------------------------------------------------------


def test_trajectory_zero_steps(box):
    traj = generate_trajectory(box, 6, (0.0, 0.0), SENSOR, np.random.default_rng(0))
    for s in traj[1:]:
        assert np.array_equal(s.pose.rotation, traj[0].pose.rotation)
        assert np.array_equal(s.pose.translation, traj[0].pose.translation)


def test_trajectory_increment_bound(box):
    traj = generate_trajectory(box, 50, (0.5, 0.02), SENSOR, np.random.default_rng(1))
    assert len(traj) == 50
    bound = box.diameter * np.sin(0.02) + 0.5
    steps = [pose_distance(b.pose, a.pose, box) for a, b in zip(traj, traj[1:])]
    assert max(steps) <= bound


def test_trajectory_imprints_vary_continuously(box):
    rng = np.random.default_rng(2)
    per_step, first = [], []
    for _ in range(100):
        traj = generate_trajectory(box, 4, (0.5, 0.02), SENSOR, rng)
        per_step += [np.linalg.norm(b.imprint.depth - a.imprint.depth) for a, b in zip(traj, traj[1:])]
        first.append(traj[0].imprint.depth)
    independent = [np.linalg.norm(a - b) for a, b in zip(first, first[1:])]
    assert np.mean(per_step) < np.mean(independent)


def test_trajectory_needs_two_steps(box):
    with pytest.raises(ConfigError):
        generate_trajectory(box, 1)


# --- dataset IO ------------------------------------------------------------


def test_dataset_roundtrip(tmp_path, box):
    samples = generate_dataset(box, 1000, SENSOR, seed=1, mask_prob=0.2)
    path = tmp_path / "d.jsonl"
    write_dataset(samples, path)
    back = read_dataset(path)
    assert len(back) == 1000 and all(a == b for a, b in zip(samples, back))


def test_dataset_truncated_record(tmp_path, box):
    path = tmp_path / "d.jsonl"
    write_dataset(generate_dataset(box, 5, SENSOR, seed=1), path)
    lines = path.read_text().splitlines()
    lines[3] = lines[3][: len(lines[3]) // 2]
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(ParseError, match="line 4"):
        read_dataset(path)


def test_dataset_version(tmp_path, box):
    path = tmp_path / "d.jsonl"
    write_dataset(generate_dataset(box, 2, SENSOR, seed=1), path)
    path.write_text(path.read_text().replace("ebmpose-dataset v1", "ebmpose-dataset v2", 1))
    with pytest.raises(VersionMismatch):
        read_dataset(path)


def test_imprint_masked_keeps_depth():
    d = np.zeros((2, 16, 16))
    d[0, 3, 3] = 0.4
    im = TactileImprint(d, [True, True], 5.0)
    m = im.masked([True, False])
    assert np.array_equal(m.depth, d) and list(m.present) == [True, False]
