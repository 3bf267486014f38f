import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from orbitgrasp import so3
from orbitgrasp.cloud import PointCloud, build_neighborhoods
from orbitgrasp.equinet.layers import EquivariantLinear
from orbitgrasp.equinet.training import (adam_init, adam_step, backprop, finite_difference, flat_weights,
                                         parameter_list, torch_bce)
from orbitgrasp.equinet.unet import EquiUNet, NetworkConfig, forward, prepare_input

SMALL = dict(hidden="6x0+3x1+2x2", L_out=2, n_stages=2, k=8)


def blob_cloud(rng, n=160):
    """Two noisy surface patches with outward normals, roughly 5 cm across."""
    u = so3.normalize(rng.normal(size=(n, 3)))
    r = 0.03 * (1 + 0.2 * rng.uniform(size=(n, 1)))
    pos = u * r * [1.0, 0.7, 0.5] + rng.normal(size=3) * 0.1
    nrm = so3.normalize(u + 0.1 * rng.normal(size=(n, 3)))
    return PointCloud(pos, nrm)


def rotated(cloud: PointCloud, R):
    return PointCloud(cloud.positions @ R.T, cloud.normals @ R.T)


def rel_dev(a, b):
    return float(np.abs(a - b).max() / max(np.abs(b).max(), 1e-30))


def equivariance_deviation(cfg, seed, m=96):
    rng = np.random.default_rng(seed)
    cloud = blob_cloud(rng)
    net = EquiUNet(cfg)
    g = so3.sample_uniform_rotation(rng)
    ci = int(rng.integers(len(cloud)))
    nb = build_neighborhoods(cloud, [ci], 0.03, m)[0]
    nb_g = build_neighborhoods(rotated(cloud, g.matrix), [ci], 0.03, m)[0]
    assert np.array_equal(nb.query_indices, nb_g.query_indices)
    a = forward(net, nb, cloud).data
    b = forward(net, nb_g, rotated(cloud, g.matrix)).data
    return rel_dev(b, a @ so3.block_diag_wigner(cfg.L_out, g).T), a, b, g, nb


# ------------------------------------------------------------- contracts

def test_config_validation():
    with pytest.raises(ValueError):
        NetworkConfig(L_out=3, hidden="4x0+2x1+2x2")
    with pytest.raises(ValueError):
        NetworkConfig(ratio=0.0)
    with pytest.raises(ValueError):
        NetworkConfig(dtype="float16")
    with pytest.raises(ValueError):
        NetworkConfig(edge_lmax=4)
    assert NetworkConfig().stage_k(2) == 64
    assert NetworkConfig().L_edge == 2 and NetworkConfig(hidden="4x0+2x1", L_out=1, edge_lmax=3).L_edge == 1
    assert NetworkConfig.from_dict(NetworkConfig(seed=3).to_dict()) == NetworkConfig(seed=3)


def test_field_length_is_query_count(rng):
    cloud = blob_cloud(rng)
    net = EquiUNet(NetworkConfig(**SMALL))
    for r in (0.01, 0.02, 0.05):
        nb = build_neighborhoods(cloud, [0], r, 100)[0]
        f = forward(net, nb, cloud)
        assert len(f) == nb.query_indices.size and f.L == 2


def test_zero_head_gives_zero_field(rng):
    cloud = blob_cloud(rng)
    net = EquiUNet(NetworkConfig(**SMALL))
    with torch.no_grad():
        for p in net.head.parameters():
            p.zero_()
    f = forward(net, build_neighborhoods(cloud, [5], 0.03, 80)[0], cloud)
    assert np.all(f.data == 0)


def test_missing_normals_rejected(rng):
    cloud = blob_cloud(rng)
    net = EquiUNet(NetworkConfig(**SMALL))
    with pytest.raises(ValueError):
        forward(net, build_neighborhoods(cloud, [5], 0.03, 80)[0], PointCloud(cloud.positions))


def test_same_seed_same_network(rng):
    cfg = NetworkConfig(**SMALL, dtype="float64", seed=9)
    assert np.array_equal(flat_weights(EquiUNet(cfg)), flat_weights(EquiUNet(cfg)))
    other = NetworkConfig(**SMALL, dtype="float64", seed=10)
    assert not np.array_equal(flat_weights(EquiUNet(cfg)), flat_weights(EquiUNet(other)))


# ----------------------------------------------------------- equivariance

@settings(max_examples=10)
@given(st.integers(0, 10 ** 6))
def test_end_to_end_equivariance_f32(seed):
    dev, *_ = equivariance_deviation(NetworkConfig(**SMALL, seed=seed % 100), seed)
    assert dev <= 1e-4


@settings(max_examples=10)
@given(st.integers(0, 10 ** 6))
def test_end_to_end_equivariance_f64(seed):
    dev, *_ = equivariance_deviation(NetworkConfig(**SMALL, dtype="float64", seed=seed % 100), seed)
    assert dev <= 1e-9


@pytest.mark.parametrize("edge_lmax", [1, 2, 3])
def test_degree_three_equivariance_f64(edge_lmax):
    cfg = NetworkConfig(dtype="float64", L_out=3, hidden="8x0+4x1+2x2+2x3", edge_lmax=edge_lmax)
    dev, *_ = equivariance_deviation(cfg, 5, m=160)
    assert dev <= 1e-9


def test_grasp_quality_invariance():
    _, a, b, g, nb = equivariance_deviation(NetworkConfig(**SMALL, dtype="float64"), 11)
    u = so3.normalize(np.random.default_rng(0).normal(size=(50, 3)))
    for p in range(0, len(a), 7):
        qa = so3.sh_basis(u, 2) @ a[p]
        qb = so3.sh_basis(u @ g.matrix.T, 2) @ b[p]
        assert np.abs(qa - qb).max() <= 1e-9 * max(1.0, np.abs(qa).max())


@given(st.integers(0, 10 ** 6))
def test_translation_invariance_exact(seed):
    rng = np.random.default_rng(seed)
    cfg = NetworkConfig(**SMALL, dtype="float64")
    net = EquiUNet(cfg)
    # dyadic coordinates: shifting and re-centering is exact, so the output must be bitwise equal
    pos = rng.integers(-64, 64, size=(90, 3)) / 1024.0
    nrm = so3.normalize(rng.normal(size=(90, 3)))
    t = rng.integers(-512, 512, size=3) / 256.0
    with torch.no_grad():
        a = net(prepare_input(cfg, pos, nrm, pos[0]))
        b = net(prepare_input(cfg, pos + t, nrm, pos[0] + t))
    assert torch.equal(a, b)


@given(st.integers(0, 10 ** 6))
def test_translation_invariance_generic(seed):
    rng = np.random.default_rng(seed)
    cfg = NetworkConfig(**SMALL, dtype="float64")
    cloud = blob_cloud(rng)
    net = EquiUNet(cfg)
    t = rng.normal(size=3)
    moved = PointCloud(cloud.positions + t, cloud.normals)
    nb = build_neighborhoods(cloud, [3], 0.03, 90)[0]
    nb_t = build_neighborhoods(moved, [3], 0.03, 90)[0]
    assert np.array_equal(nb_t.context_indices, nb.context_indices)
    a, b = forward(net, nb, cloud).data, forward(net, nb_t, moved).data
    assert rel_dev(b, a) <= 1e-9


# -------------------------------------------------------------- gradients

def _probe_loss(net, inp, dirs_sh, labels):
    coeffs = net(inp)
    logits = (coeffs[:, None, :] * dirs_sh).sum(-1).reshape(-1)
    return torch_bce(logits, labels)


def test_full_network_gradient_matches_finite_differences(rng):
    cfg = NetworkConfig(**SMALL, dtype="float64", seed=4)
    net = EquiUNet(cfg)
    cloud = blob_cloud(rng, 120)
    nb = build_neighborhoods(cloud, [0], 0.03, 120)[0]
    inp = prepare_input(cfg, cloud.positions[nb.context_indices], cloud.normals[nb.context_indices], nb.center,
                        nb.query_in_context)
    n = nb.query_indices.size
    dirs_sh = torch.as_tensor(so3.sh_basis(so3.normalize(rng.normal(size=(n, 4, 3))), 2))
    labels = torch.as_tensor(rng.integers(0, 2, size=n * 4), dtype=torch.float64)
    grads = backprop(_probe_loss(net, inp, dirs_sh, labels), net)
    sizes = [g.size for g in grads]
    probes = []
    while len(probes) < 8:
        pi = int(rng.integers(len(grads)))
        fi = int(rng.integers(sizes[pi]))
        # probe entries that carry signal; exact zeros are checked separately
        if abs(grads[pi].ravel()[fi]) > 1e-6:
            probes.append((pi, fi))
    fd = finite_difference(lambda: _probe_loss(net, inp, dirs_sh, labels), net, probes, eps=1e-3)
    for (pi, fi), num in zip(probes, fd):
        ana = grads[pi].ravel()[fi]
        assert abs(ana - num) <= 1e-4 * max(abs(ana), abs(num))


def test_unused_outputs_get_zero_gradients(rng):
    cfg = NetworkConfig(**SMALL, dtype="float64")
    net = EquiUNet(cfg)
    cloud = blob_cloud(rng, 80)
    nb = build_neighborhoods(cloud, [0], 0.05, 80)[0]
    coeffs = net(prepare_input(cfg, cloud.positions, cloud.normals, nb.center))
    grads = dict(zip([k for k, _ in sorted(net.named_parameters())], backprop(coeffs[:, 0].sum(), net)))
    assert np.all(grads["head.weights.1"] == 0) and np.all(grads["head.weights.2"] == 0)
    assert np.any(grads["head.weights.0"] != 0)


def test_backprop_requires_recorded_graph(rng):
    from orbitgrasp.equinet.training import TrainingError

    net = EquiUNet(NetworkConfig(**SMALL))
    with pytest.raises(TrainingError):
        backprop(torch.tensor(1.0), net)


def test_linear_regression_reaches_least_squares(rng):
    from orbitgrasp.equinet.irreps import IrrepsSpec
    from orbitgrasp.equinet.training import cosine_lr

    lin = EquivariantLinear(IrrepsSpec.parse("3x0"), IrrepsSpec.parse("1x0"), bias=False).double()
    X = rng.normal(size=(40, 3))
    y = X @ [0.5, -1.0, 2.0] + 0.1 * rng.normal(size=40)
    x_t = {0: torch.as_tensor(X[:, :, None])}
    y_t = torch.as_tensor(y)
    state = adam_init([p.detach().numpy() for p in parameter_list(lin)])
    steps = 3000
    for step in range(steps):
        loss = ((lin(x_t)[0][:, 0, 0] - y_t) ** 2).mean()
        new, state = adam_step([p.detach().numpy() for p in parameter_list(lin)], backprop(loss, lin), state,
                               cosine_lr(step, steps, 0.05, 0.0), weight_decay=0.0)
        with torch.no_grad():
            for p, v in zip(parameter_list(lin), new):
                p.copy_(torch.from_numpy(v))
    w_ls, *_ = np.linalg.lstsq(X, y, rcond=None)
    assert np.abs(lin.weights["0"].detach().numpy().ravel() - w_ls).max() < 1e-4
