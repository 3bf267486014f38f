import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import mc_collision, random_scene_pose

from orbitgrasp import so3
from orbitgrasp.orbit import GraspPose, GripperSpec, orbit_rotation_matrices
from orbitgrasp.scenegen.oracle import GraspOracle, gripper_boxes, gripper_layout, grasp_oracle
from orbitgrasp.scenegen.scene import Scene
from orbitgrasp.scenegen.shapes import Primitive

GRIPPER = GripperSpec()


def pose(closing, approach, t):
    y, z = so3.normalize(np.asarray(closing, float)), so3.normalize(np.asarray(approach, float))
    return GraspPose(so3.Rotation(np.stack([np.cross(y, z), y, z], axis=1)), np.asarray(t, float))


def free(*prims):
    return Scene(tuple(prims), table=False)


# -------------------------------------------------------------- examples

@settings(max_examples=30)
@given(st.integers(0, 10 ** 6))
def test_sphere_through_centre_always_succeeds(seed):
    rng = np.random.default_rng(seed)
    c = rng.uniform(-1, 1, size=3)
    scene = free(Primitive.sphere(0.03, position=c, obj_id=1))
    n = so3.normalize(rng.normal(size=3))
    for M in orbit_rotation_matrices(n, 12):
        res = grasp_oracle(scene, GraspPose(so3.Rotation(M), c))
        assert res.success and res.reason == "ok" and res.target == 1


def test_wide_box_exceeds_opening():
    scene = free(Primitive.box([0.05, 0.02, 0.02], obj_id=1))
    res = grasp_oracle(scene, pose([1, 0, 0], [0, 0, -1], [0, 0, 0]))
    assert not res and res.reason == "exceeds_opening"
    # the same box closed across its 4 cm side is fine
    assert grasp_oracle(scene, pose([0, 1, 0], [0, 0, -1], [0, 0, 0])).success


def test_neighbour_box_collision_matches_monte_carlo(rng):
    target = Primitive.sphere(0.03, obj_id=1)
    blocker = Primitive.box([0.01, 0.01, 0.01], position=[0.048, 0.0, 0.02], obj_id=2)
    scene = free(target, blocker)
    p = pose([1, 0, 0], [0, 0, -1], [0, 0, 0])
    res = grasp_oracle(scene, p)
    assert not res and res.reason == "collision"
    hit, depth, _ = mc_collision(scene, gripper_boxes(p, GRIPPER), 1, rng)
    assert hit and depth > 1e-3
    # moving the blocker clear of the finger removes the collision in both checks
    moved = free(target, blocker.moved(position=[0.048, 0.05, 0.02]))
    assert grasp_oracle(moved, p).success
    assert not mc_collision(moved, gripper_boxes(p, GRIPPER), 1, rng)[0]


def test_table_collision():
    ball = Primitive.sphere(0.02, position=[0.15, 0.15, 0.02], obj_id=1)
    side = pose([0, 1, 0], [1, 0, 0], ball.position)
    # fingers are 2 cm wide, centred on the closing line
    assert grasp_oracle(Scene((ball,)), side).success
    small = Primitive.sphere(0.006, position=[0.15, 0.15, 0.006], obj_id=1)
    assert grasp_oracle(Scene((small,)), pose([0, 1, 0], [1, 0, 0], small.position)).reason == "collision"
    assert grasp_oracle(free(small), pose([0, 1, 0], [1, 0, 0], small.position)).success
    top = pose([0, 1, 0], [0, 0, -1], ball.position)
    assert grasp_oracle(Scene((ball,)), top).success


def test_friction_cone():
    box = free(Primitive.box([0.02, 0.02, 0.02], obj_id=1))
    a = math.radians(45)
    tilted = pose([math.cos(a), math.sin(a), 0], [0, 0, -1], [0, 0, 0])
    assert grasp_oracle(box, tilted).reason == "friction"
    # a cone wider than 45 degrees admits it
    assert grasp_oracle(box, tilted, mu=1.1).success
    a = math.radians(25)
    assert grasp_oracle(box, pose([math.cos(a), math.sin(a), 0], [0, 0, -1], [0, 0, 0])).success


def test_thin_plate_fails_finger_overlap():
    plate = free(Primitive.box([0.02, 0.02, 0.0015], obj_id=1))
    assert grasp_oracle(plate, pose([1, 0, 0], [0, 0, -1], [0, 0, 0])).reason == "overlap"
    thick = free(Primitive.box([0.02, 0.02, 0.004], obj_id=1))
    assert grasp_oracle(thick, pose([1, 0, 0], [0, 0, -1], [0, 0, 0])).success


def test_no_contact():
    box = free(Primitive.box([0.02, 0.02, 0.02], obj_id=1))
    assert grasp_oracle(box, pose([1, 0, 0], [0, 0, -1], [0, 0, 0.1])).reason == "no_contact"
    assert grasp_oracle(free(), pose([1, 0, 0], [0, 0, -1], [0, 0, 0])).reason == "no_contact"


def test_explicit_target():
    a = Primitive.sphere(0.02, position=[0.0, 0, 0], obj_id=1)
    b = Primitive.sphere(0.02, position=[0.3, 0, 0], obj_id=2)
    p = pose([1, 0, 0], [0, 0, -1], [0, 0, 0])
    assert grasp_oracle(free(a, b), p, target=2).reason == "no_contact"
    assert grasp_oracle(free(a, b), p, target=1).success


def test_validation():
    with pytest.raises(ValueError):
        GraspOracle(free(), mu=-1)
    with pytest.raises(ValueError):
        gripper_layout(GRIPPER, inflate=-0.1)


def test_gripper_layout_geometry():
    boxes = gripper_boxes(pose([0, 1, 0], [0, 0, -1], [0, 0, 0]), GRIPPER)
    # finger inner faces sit exactly at half the opening
    inner = boxes["finger_pos"].position[1] - boxes["finger_pos"].dims[1]
    assert inner == pytest.approx(GRIPPER.max_opening / 2)
    # fingertips reach tip_offset past the closing line along the approach
    assert boxes["finger_pos"].position[2] - boxes["finger_pos"].dims[2] == pytest.approx(-GRIPPER.tip_offset)


# -------------------------------------------------------- Monte-Carlo check

def test_collision_verdicts_match_monte_carlo():
    rng = np.random.default_rng(1)
    for _ in range(20):
        scene, p, tid = random_scene_pose(rng)
        ours = GraspOracle(scene).collides(p, tid)
        hit, depth, clearance = mc_collision(scene, gripper_boxes(p, GRIPPER), tid, rng)
        if ours != hit:
            # only grazing contacts may differ
            assert (depth if hit else clearance) <= 1e-3


# ----------------------------------------------------------- invariance

def _random_poses(scene, rng, n=15):
    poses = []
    for _ in range(n):
        prim = scene.primitives[int(rng.integers(len(scene)))]
        M = orbit_rotation_matrices(so3.normalize(rng.normal(size=3)), 1, phase=rng.uniform(0, 7))[0]
        poses.append(GraspPose(so3.Rotation(M), prim.position + 0.01 * rng.normal(size=3)))
    return poses


def _verdicts(scene, poses):
    o = GraspOracle(scene)
    return [(r.success, r.reason) for r in map(o, poses)]


def test_verdict_invariant_under_vertical_rotation():
    rng = np.random.default_rng(3)
    seen = set()
    for _ in range(5):
        scene, _, _ = random_scene_pose(rng)
        poses = _random_poses(scene, rng)
        R = so3.rot_z(rng.uniform(0, 2 * math.pi))
        t = np.r_[rng.uniform(-1, 1, size=2), 0.0]
        ref = _verdicts(scene, poses)
        assert _verdicts(scene.transformed(R, t), [p.transformed(R, t) for p in poses]) == ref
        seen.update(r for _, r in ref)
    assert len(seen) >= 2


def test_verdict_invariant_under_any_rigid_motion_without_table():
    rng = np.random.default_rng(4)
    seen = set()
    for _ in range(5):
        scene, _, _ = random_scene_pose(rng, table=False)
        poses = _random_poses(scene, rng)
        g = so3.sample_uniform_rotation(rng).matrix
        t = rng.normal(size=3)
        ref = _verdicts(scene, poses)
        assert _verdicts(scene.transformed(g, t), [p.transformed(g, t) for p in poses]) == ref
        seen.update(r for _, r in ref)
    assert len(seen) >= 2
