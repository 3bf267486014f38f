"""Acceptance criteria, each at its stated tolerance.

Every test records a PASS/FAIL line through the ``criterion`` fixture; the
lines are printed in the terminal summary. Full-scale learning runs only with
ORBITGRASP_FULL=1.
"""
import math
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
import torch
from conftest import full_scale
from oracles import mc_collision, random_scene_pose

from orbitgrasp import so3
from orbitgrasp.bench import ModelPolicy, RandomPolicy, RoundResult, metrics, run_bench, run_round
from orbitgrasp.cli import main
from orbitgrasp.cloud import build_neighborhoods
from orbitgrasp.config import RunConfig
from orbitgrasp.equinet.training import backprop, finite_difference, load_training_data, torch_bce, train
from orbitgrasp.equinet.unet import EquiUNet, NetworkConfig, prepare_input
from orbitgrasp.orbit import GripperSpec, orbit_approaches, orbit_rotation_matrices
from orbitgrasp.scenegen.dataset import generate_dataset
from orbitgrasp.scenegen.oracle import GraspOracle, gripper_boxes
from orbitgrasp.scenegen.render import camera_rig, observe
from orbitgrasp.scenegen.scene import SceneSpec, spawn_scene

DESK = RunConfig(n_scenes=20)
FULL = RunConfig(n_scenes=200)


def scene_cloud(seed: int, n_objects: int = 5):
    rng = np.random.default_rng(seed)
    scene = spawn_scene(SceneSpec(n_objects=n_objects, seed=seed))
    return observe(scene, camera_rig(scene.workspace, "multi", rng), rng, (2000, 3000))


def best_accuracy(history):
    """Epoch with the highest balanced validation accuracy."""
    return max(history, key=lambda r: r["val_bal_acc"])


def run_learning(cfg: RunConfig, root: Path):
    t0 = time.perf_counter()
    summary = generate_dataset(cfg.data(), root)
    net_cfg, tcfg = cfg.network(), cfg.training()
    data = load_training_data(root, net_cfg, tcfg)
    res = train(net_cfg, tcfg, data)
    return summary, res, time.perf_counter() - t0


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    """CI-scale dataset and trained default network, shared by the learning and benchmark criteria."""
    root = tmp_path_factory.mktemp("desk")
    summary, res, elapsed = run_learning(DESK, root)
    return root, summary, res, elapsed


# ------------------------------------------------------------- 1: SO(3) math

def test_criterion_1_so3_math(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    u = so3.fibonacci_sphere(5000)
    Y = so3.sh_basis(u, 3)
    gram = np.abs(Y.T @ Y * (4 * math.pi / len(u)) - np.eye(16)).max()

    hom = orth = 0.0
    for _ in range(100):
        g1, g2 = so3.sample_uniform_rotation(rng), so3.sample_uniform_rotation(rng)
        for l in range(4):
            D1, D2, D12 = so3.wigner_d(l, g1), so3.wigner_d(l, g2), so3.wigner_d(l, g1 @ g2)
            hom = max(hom, np.abs(D1 @ D2 - D12).max())
            orth = max(orth, np.abs(D1.T @ D1 - np.eye(2 * l + 1)).max(), np.abs(D1 @ D1.T - np.eye(2 * l + 1)).max())

    rot_eval = 0.0
    for _ in range(1000):
        c = so3.FourierCoeffs(3, rng.normal(size=16))
        g = so3.sample_uniform_rotation(rng)
        x = so3.normalize(rng.normal(size=3))
        lhs = so3.eval_signal(so3.rotate_coeffs(c, g), g.matrix @ x)
        rot_eval = max(rot_eval, abs(lhs - so3.eval_signal(c, x)))
    elapsed = time.perf_counter() - t0

    ok = gram <= 2e-2 and hom <= 1e-10 and orth <= 1e-10 and rot_eval <= 1e-9 and elapsed < 10
    criterion(1, "so3", ok, f"gram {gram:.1e}, homomorphism {hom:.1e}, orthogonality {orth:.1e}, "
                            f"rotate-evaluate {rot_eval:.1e}, {elapsed:.1f} s")
    assert ok


# ------------------------------------------------------ 2: network equivariance

def _equivariance(dtype: str, clouds, rng) -> float:
    cfg = NetworkConfig(dtype=dtype, seed=2)
    net = EquiUNet(cfg).eval()
    worst = 0.0
    for cloud in clouds:
        centers = rng.choice(len(cloud), size=25, replace=False)
        for nb in build_neighborhoods(cloud, centers, cfg.r_l, DESK.m):
            g = so3.sample_uniform_rotation(rng)
            ctx = nb.context_indices
            pos, nrm = cloud.positions[ctx], cloud.normals[ctx]
            R = g.matrix
            with torch.no_grad():
                a = net(prepare_input(cfg, pos, nrm, nb.center, nb.query_in_context)).double().numpy()
                b = net(prepare_input(cfg, pos @ R.T, nrm @ R.T, R @ nb.center, nb.query_in_context)).double().numpy()
            expect = a @ so3.block_diag_wigner(cfg.L_out, g).T
            worst = max(worst, np.abs(b - expect).max() / np.abs(expect).max())
    return worst


def _translation_exact(dtype: str, rng) -> bool:
    cfg = NetworkConfig(dtype=dtype, seed=2)
    net = EquiUNet(cfg).eval()
    # dyadic coordinates make shift and re-centering exact in floating point
    pos = rng.integers(-48, 48, size=(400, 3)) / 1024.0
    nrm = so3.normalize(rng.normal(size=(400, 3)))
    same = True
    for _ in range(5):
        t = rng.integers(-256, 256, size=3) / 256.0
        with torch.no_grad():
            a = net(prepare_input(cfg, pos, nrm, pos[0]))
            b = net(prepare_input(cfg, pos + t, nrm, pos[0] + t))
        same &= bool(torch.equal(a, b))
    return same


def test_criterion_2_network_equivariance(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    clouds = [scene_cloud(20), scene_cloud(21)]
    d32 = _equivariance("float32", clouds, rng)
    d64 = _equivariance("float64", clouds, rng)
    exact = _translation_exact("float32", rng) and _translation_exact("float64", rng)
    elapsed = time.perf_counter() - t0
    ok = d32 <= 1e-4 and d64 <= 1e-9 and exact and elapsed < 120
    criterion(2, "equivariance", ok, f"50 neighborhoods, f32 {d32:.1e}, f64 {d64:.1e}, "
                                     f"translation exact {exact}, {elapsed:.1f} s")
    assert ok


# ---------------------------------------------------------------- 3: gradients

def test_criterion_3_gradients(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    cfg = NetworkConfig(dtype="float64", seed=3)
    net = EquiUNet(cfg)
    cloud = scene_cloud(30)
    nb = build_neighborhoods(cloud, [int(np.argmax(cloud.positions[:, 2]))], cfg.r_l, DESK.m)[0]
    ctx = nb.context_indices
    inp = prepare_input(cfg, cloud.positions[ctx], cloud.normals[ctx], nb.center, nb.query_in_context)
    n = nb.query_indices.size
    dirs_sh = torch.as_tensor(so3.sh_basis(so3.normalize(rng.normal(size=(n, 4, 3))), cfg.L_out))
    labels = torch.as_tensor(rng.integers(0, 2, size=n * 4), dtype=torch.float64)

    def loss():
        logits = (net(inp)[:, None, :] * dirs_sh).sum(-1).reshape(-1)
        return torch_bce(logits, labels)

    grads = backprop(loss(), net)
    probes = []
    while len(probes) < 8:
        pi = int(rng.integers(len(grads)))
        fi = int(rng.integers(grads[pi].size))
        if abs(grads[pi].ravel()[fi]) > 1e-6 and (pi, fi) not in probes:
            probes.append((pi, fi))
    fd = finite_difference(loss, net, probes, eps=1e-3)
    err = max(abs(grads[pi].ravel()[fi] - num) / max(abs(grads[pi].ravel()[fi]), abs(num))
              for (pi, fi), num in zip(probes, fd))
    elapsed = time.perf_counter() - t0
    ok = err <= 1e-4 and elapsed < 120
    criterion(3, "gradients", ok, f"{len(probes)} parameters, max relative error {err:.1e}, {elapsed:.1f} s")
    assert ok


# ----------------------------------------------------------- 4: orbit geometry

def test_criterion_4_orbit_geometry(criterion):
    rng = np.random.default_rng(4)
    frame = spacing = 0.0
    gauge = 0.0
    for _ in range(200):
        n = so3.normalize(rng.normal(size=3))
        for M in orbit_rotation_matrices(n, 36):
            frame = max(frame, np.abs(M.T @ M - np.eye(3)).max(), abs(np.linalg.det(M) - 1),
                        np.abs(M[:, 1] - n).max(), abs(M[:, 1] @ M[:, 2]),
                        np.abs(M[:, 0] - np.cross(M[:, 1], M[:, 2])).max())
        r3 = orbit_approaches(n, 36)
        nxt = np.roll(r3, -1, axis=0)
        ang = np.degrees(np.arctan2(np.linalg.norm(np.cross(r3, nxt), axis=1), np.sum(r3 * nxt, axis=1)))
        spacing = max(spacing, np.abs(ang - 10.0).max())
        c = rng.normal(size=9)
        best = []
        for anchor in (None, rng.normal(size=3)):
            dense = orbit_approaches(n, 360, anchor=anchor)
            best.append(dense[np.argmax(so3.sh_basis(dense, 2) @ c)])
        gauge = max(gauge, math.acos(np.clip(best[0] @ best[1], -1, 1)))
    ok = frame <= 1e-9 and spacing <= 1e-9 and gauge <= 2 * math.pi / 360 + 1e-12
    criterion(4, "orbit", ok, f"frame invariants {frame:.1e}, spacing error {spacing:.1e} deg, "
                              f"argmax shift {math.degrees(gauge):.3f} deg")
    assert ok


# ------------------------------------------------------ 5: oracle equivalence

def test_criterion_5_oracle_matches_monte_carlo(criterion):
    rng = np.random.default_rng(5)
    gripper = GripperSpec()
    outside_band = grazing = hits = 0
    for _ in range(200):
        scene, pose, target = random_scene_pose(rng)
        ours = GraspOracle(scene, gripper).collides(pose, target)
        hit, depth, clearance = mc_collision(scene, gripper_boxes(pose, gripper), target, rng)
        hits += hit
        if ours != hit:
            if (depth if hit else clearance) <= 1e-3:
                grazing += 1
            else:
                outside_band += 1
    ok = outside_band == 0
    criterion(5, "oracle", ok, f"200 pairs ({hits} colliding), {outside_band} disagreements outside 1 mm, "
                               f"{grazing} inside")
    assert ok


# ------------------------------------------------------------ 6: learning signal

@pytest.mark.slow
def test_criterion_6_learning_ci(desk, criterion):
    _, summary, res, elapsed = desk
    best = best_accuracy(res.history)
    ok = best["val_bal_acc"] >= 0.80 and elapsed <= 600
    criterion(6, "ci", ok, f"{summary['scenes']} scenes, {summary['poses']} poses, balanced accuracy "
                           f"{best['val_bal_acc']:.3f} (raw {best['val_acc']:.3f}) at epoch {best['epoch']}, "
                           f"{elapsed / 60:.1f} min")
    assert ok


@pytest.mark.slow
def test_criterion_6_learning_full(tmp_path, criterion):
    if not full_scale():
        criterion(6, "full", None, "skipped, set ORBITGRASP_FULL=1")
        pytest.skip("full-scale run needs ORBITGRASP_FULL=1")
    summary, res, elapsed = run_learning(FULL, tmp_path)
    best = best_accuracy(res.history[:15])
    ok = (summary["scenes"] >= 200 and summary["poses"] >= 100_000 and best["val_bal_acc"] >= 0.90
          and elapsed <= 7200)
    criterion(6, "full", ok, f"{summary['scenes']} scenes, {summary['poses']} poses, balanced accuracy "
                             f"{best['val_bal_acc']:.3f} (raw {best['val_acc']:.3f}) at epoch {best['epoch']}, "
                             f"{elapsed / 60:.1f} min")
    assert ok


# ------------------------------------------------------------ 7: context ablation

@pytest.mark.slow
def test_criterion_7_context_ablation(desk, criterion):
    root, _, full, _ = desk
    net_cfg = DESK.network()
    tcfg = replace(DESK.training(), context="query")
    query = train(net_cfg, tcfg, load_training_data(root, net_cfg, tcfg))
    lf, lq = full.history[-1]["val_loss"], query.history[-1]["val_loss"]
    ok = lq > lf
    criterion(7, "ablation", ok, f"validation loss full context {lf:.4f}, query only {lq:.4f}")
    assert ok


# ----------------------------------------------------------- 8: declutter protocol

@pytest.mark.slow
def test_criterion_8_declutter(desk, criterion):
    _, _, res, _ = desk
    cfg = DESK.bench()
    policy = ModelPolicy(res.checkpoint.build().eval(), cfg.gripper, DESK.k_centers, DESK.m, DESK.threshold,
                         DESK.band, DESK.K)
    model = run_bench(policy, cfg)
    rand = run_bench(RandomPolicy(cfg.gripper), cfg)
    terminated = all(any(r.termination == "two-failures" for r in rep.rounds) for rep in (model, rand))
    table = metrics([RoundResult(108, 96, 97, 100, "two-failures")])
    arithmetic = round(100 * table.gsr, 1) == 88.9 and round(100 * table.dr, 1) == 97.0

    # the protocol itself must not care about a quarter turn of scene and cameras together
    turned = [run_round(cfg.scene(0, i), policy, cfg, cfg.round_seed(0, i), math.pi / 2, 0, i) for i in range(10)]
    invariant = sum(a.outcomes == b.outcomes for a, b in zip(model.rounds[:10], turned))

    margin = model.gsr - rand.gsr
    ok = margin >= 0.20 and terminated and arithmetic and invariant == 10
    criterion(8, "declutter", ok, f"model GSR {100 * model.gsr:.1f} % DR {100 * model.dr:.1f} %, random GSR "
                                  f"{100 * rand.gsr:.1f} % DR {100 * rand.dr:.1f} %, margin {100 * margin:.1f} pp, "
                                  f"termination rule used {terminated}, 96/108 -> {100 * table.gsr:.1f}, "
                                  f"quarter-turn identical {invariant}/10")
    assert ok


# ---------------------------------------------------------------- 9: determinism

def test_criterion_9_determinism(tmp_path, capsys, criterion):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("n_scenes = 3\nn_objects = 3\npoints_per_object = 16\nhidden = 8x0+4x1+2x2\nL_out = 2\nstages = 2\n"
                   "knn_k = 8\nm = 128\nepochs = 2\ndtype = float64\n")
    for name in ("a", "b"):
        assert main(["gen-data", "--config", str(cfg), "--seed", "9", "--out", str(tmp_path / name)]) == 0
        assert main(["train", "--config", str(cfg), "--seed", "9", "--data", str(tmp_path / name),
                     "--out", str(tmp_path / f"{name}.ogsh")]) == 0
    capsys.readouterr()
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    same_data = all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files)
    same_ckpt = (tmp_path / "a.ogsh").read_bytes() == (tmp_path / "b.ogsh").read_bytes()
    ok = same_data and same_ckpt and len(files) >= 4
    criterion(9, "determinism", ok, f"{len(files)} dataset files identical {same_data}, "
                                    f"float64 checkpoints identical {same_ckpt}")
    assert ok
