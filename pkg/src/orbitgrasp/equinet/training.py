"""Balanced BCE training of the equivariant UNet with AdamW and cosine annealing."""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
from scipy.spatial import cKDTree

from .. import so3
from ..cloud import PointCloud, build_neighborhoods
from ..orbit import orbit_approaches
from ..scenegen.dataset import (DATASET_FILE, is_validation, load_scene_cloud, mask_centers,
                                read_dataset)
from .unet import EquiUNet, NetInput, NetworkConfig, prepare_input

CKPT_MAGIC = b"OGSH"
CKPT_VERSION = 1
WEIGHT_DTYPES = {"float32": "<f4", "float64": "<f8"}


class TrainingError(RuntimeError):
    pass


class ConfigMismatch(ValueError):
    """A checkpoint's network configuration differs from the requested one."""

    def __init__(self, diff: dict):
        self.diff = diff
        lines = [f"  {k}: checkpoint={a!r} requested={b!r}" for k, (a, b) in sorted(diff.items())]
        super().__init__("checkpoint config differs:\n" + "\n".join(lines))


# ------------------------------------------------------------------ loss

def bce_loss(q, y) -> tuple[float, np.ndarray]:
    """Mean sigmoid BCE of logits ``q`` against labels ``y`` and its gradient ``(sigma(q) - y) / N``."""
    q = np.asarray(q, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if q.shape != y.shape:
        raise ValueError("logit and label counts differ")
    n = max(q.size, 1)
    loss = np.maximum(q, 0.0) - q * y + np.log1p(np.exp(-np.abs(q)))
    sig = 0.5 * (1.0 + np.tanh(0.5 * q))
    return float(loss.sum() / n), (sig - y) / n


def torch_bce(q: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    return torch.nn.functional.binary_cross_entropy_with_logits(q, y, reduction="mean")


# -------------------------------------------------------------- optimizer

def adam_init(params) -> dict:
    return {"step": 0, "m": [np.zeros_like(p) for p in params], "v": [np.zeros_like(p) for p in params]}


def adam_step(params, grads, state: dict, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, weight_decay: float = 1e-2) -> tuple[list, dict]:
    """One AdamW update with decoupled weight decay; returns new params and state."""
    if len(params) != len(grads) or len(params) != len(state["m"]):
        raise ValueError("params, grads and optimizer state must align")
    t = state["step"] + 1
    c1, c2 = 1.0 - beta1 ** t, 1.0 - beta2 ** t
    out, ms, vs = [], [], []
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError("shape mismatch between a parameter and its gradient or moments")
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        upd = (m / c1) / (np.sqrt(v / c2) + eps)
        out.append((p - lr * (upd + weight_decay * p)).astype(p.dtype, copy=False))
        ms.append(m.astype(p.dtype, copy=False))
        vs.append(v.astype(p.dtype, copy=False))
    return out, {"step": t, "m": ms, "v": vs}


def cosine_lr(step: int, total_steps: int, lr0: float = 1e-4, lr_min: float = 1e-6) -> float:
    if total_steps <= 0:
        return lr0
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr_min + (lr0 - lr_min) * (1.0 + math.cos(math.pi * step / total_steps)) / 2.0


# ------------------------------------------------------------- gradients

def parameter_list(net: torch.nn.Module) -> list[torch.nn.Parameter]:
    return [p for _, p in sorted(net.named_parameters(), key=lambda kv: kv[0])]


def backprop(loss: torch.Tensor, net: torch.nn.Module) -> list[np.ndarray]:
    """Reverse-mode gradients of ``loss`` for every parameter (zeros where unused)."""
    if not loss.requires_grad:
        raise TrainingError("loss was not recorded with gradients")
    params = parameter_list(net)
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    return [np.zeros(tuple(p.shape), dtype=p.detach().numpy().dtype) if g is None else g.detach().numpy().copy()
            for p, g in zip(params, grads)]


def finite_difference(fn, net: torch.nn.Module, probes, eps: float = 1e-3) -> list[float]:
    """Central differences of scalar ``fn()`` w.r.t. flat parameter entries ``(param index, flat index)``."""
    params = parameter_list(net)
    out = []
    with torch.no_grad():
        for pi, fi in probes:
            flat = params[pi].view(-1)
            orig = flat[fi].item()
            flat[fi] = orig + eps
            fp = float(fn())
            flat[fi] = orig - eps
            fm = float(fn())
            flat[fi] = orig
            out.append((fp - fm) / (2 * eps))
    return out


# -------------------------------------------------------------- samples

@dataclass
class Sample:
    """One neighborhood ``B_i`` with its labelled candidate points."""

    scene: int
    obj: int
    inp: NetInput | None
    rows: np.ndarray          # candidate rows in the network output (query order)
    labels: np.ndarray        # (n, K) in {0, 1}
    Y: np.ndarray             # (n, K, C) SH of the orbit approach directions
    builder: object = None    # rebuilds ``inp`` when inputs are not cached

    @property
    def n_poses(self) -> int:
        return self.labels.size

    def input(self) -> NetInput:
        return self.inp if self.inp is not None else self.builder()


@dataclass
class TrainConfig:
    epochs: int = 15
    lr: float = 1e-4
    lr_min: float = 1e-6
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: int = 1024
    context: str = "full"    # "full": B_i, "query": the inner set only
    cache_inputs: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr <= 0 or self.lr_min < 0 or self.lr_min > self.lr:
            raise ValueError("need 0 <= lr_min <= lr and lr > 0")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.m < 1:
            raise ValueError("m must be >= 1")
        if self.context not in ("full", "query"):
            raise ValueError("context must be 'full' or 'query'")


def _bits(masks: np.ndarray, K: int) -> np.ndarray:
    m = masks.astype(np.uint64)[:, None]
    return ((m >> np.arange(K, dtype=np.uint64)[None]) & np.uint64(1)).astype(np.float64)


def scene_samples(cloud: PointCloud, records: np.ndarray, K: int, net_cfg: NetworkConfig,
                  tcfg: TrainConfig, cache: bool = True) -> list[Sample]:
    """Rebuild each object's neighborhood and attach its labelled candidates."""
    if len(records) == 0:
        return []
    scene = int(records["scene"][0])
    d, idx = cKDTree(cloud.positions).query(records["position"].astype(np.float64))
    if np.max(d) > 1e-6:
        raise TrainingError(f"scene {scene}: records do not match the stored cloud")
    L = net_cfg.L_out
    out = []
    for oid, ci in mask_centers(cloud):
        nb = build_neighborhoods(cloud, [ci], net_cfg.r_l, tcfg.m)[0]
        sel = records["object"] == oid
        if not sel.any():
            continue
        pos_in_query = {int(p): r for r, p in enumerate(nb.query_indices)}
        keep = [(pos_in_query[int(i)], j) for j, i in zip(np.flatnonzero(sel), idx[sel]) if int(i) in pos_in_query]
        if not keep:
            continue
        rows = np.array([k[0] for k in keep], dtype=np.int64)
        rec_rows = np.array([k[1] for k in keep], dtype=np.int64)
        normals = cloud.normals[idx[rec_rows]]
        dirs = np.stack([orbit_approaches(n, K) for n in normals])
        Y = so3.sh_basis(dirs, L)
        if tcfg.context == "query":
            ctx, q_rows = nb.query_indices, np.arange(nb.query_indices.size)
        else:
            ctx, q_rows = nb.context_indices, nb.query_in_context

        def build(ctx=ctx, q_rows=q_rows, center=nb.center):
            return prepare_input(net_cfg, cloud.positions[ctx], cloud.normals[ctx], center, q_rows)

        out.append(Sample(scene, oid, build() if cache else None, rows, _bits(records["mask"][rec_rows], K), Y,
                          builder=build))
    return out


@dataclass
class TrainingData:
    K: int
    train: list
    valid: list

    def check_classes(self) -> None:
        lab = [s.labels for s in self.train]
        if not lab:
            raise TrainingError("no training neighborhoods")
        total = sum(float(x.sum()) for x in lab)
        n = sum(x.size for x in lab)
        if total == 0 or total == n:
            raise TrainingError(f"training labels are single-class ({'all positive' if total else 'all negative'})")


def load_training_data(dataset_dir, net_cfg: NetworkConfig, tcfg: TrainConfig) -> TrainingData:
    header, records = read_dataset(Path(dataset_dir) / DATASET_FILE)
    K = header["K"]
    train, valid = [], []
    for sid in np.unique(records["scene"]):
        cloud = load_scene_cloud(dataset_dir, int(sid))
        samples = scene_samples(cloud, records[records["scene"] == sid], K, net_cfg, tcfg, tcfg.cache_inputs)
        (valid if is_validation(int(sid)) else train).extend(samples)
    return TrainingData(K, train, valid)


def balanced_selection(labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Flat pose indices with the majority class subsampled to the minority count.

    A single-class neighborhood contributes one pose so the ratio stays within 1.
    """
    flat = labels.ravel()
    pos, neg = np.flatnonzero(flat > 0.5), np.flatnonzero(flat <= 0.5)
    k = min(pos.size, neg.size)
    if k == 0:
        pool = pos if pos.size else neg
        return np.sort(rng.choice(pool, size=1, replace=False))
    pick_p = pos if pos.size == k else rng.choice(pos, size=k, replace=False)
    pick_n = neg if neg.size == k else rng.choice(neg, size=k, replace=False)
    return np.sort(np.concatenate([pick_p, pick_n]))


def sample_logits(net: EquiUNet, s: Sample, flat_idx: np.ndarray | None = None) -> torch.Tensor:
    coeffs = net(s.input())
    dt = coeffs.dtype
    if flat_idx is None:
        Y = torch.as_tensor(s.Y, dtype=dt)
        return torch.einsum("nkc,nc->nk", Y, coeffs[torch.as_tensor(s.rows)]).reshape(-1)
    n_i, k_i = np.divmod(flat_idx, s.labels.shape[1])
    Y = torch.as_tensor(s.Y[n_i, k_i], dtype=dt)
    return (Y * coeffs[torch.as_tensor(s.rows[n_i])]).sum(-1)


# ---------------------------------------------------------------- metrics

def evaluate(net: EquiUNet, samples, seed: int = 0) -> dict:
    """Validation loss on balanced subsets plus accuracy over every pose."""
    if not samples:
        return {"val_loss": float("nan"), "val_acc": float("nan"), "val_bal_acc": float("nan")}
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xE7A1]))
    loss_sum = n_bal = 0.0
    tp = tn = n_pos = n_neg = 0
    with torch.no_grad():
        for s in samples:
            q = sample_logits(net, s).double().numpy()
            y = s.labels.ravel()
            sel = balanced_selection(s.labels, rng)
            l, _ = bce_loss(q[sel], y[sel])
            loss_sum += l * sel.size
            n_bal += sel.size
            pred = q >= 0.0
            tp += int(np.sum(pred & (y > 0.5)))
            tn += int(np.sum(~pred & (y <= 0.5)))
            n_pos += int(np.sum(y > 0.5))
            n_neg += int(np.sum(y <= 0.5))
    rates = [r for r in ((tp / n_pos) if n_pos else None, (tn / n_neg) if n_neg else None) if r is not None]
    return {"val_loss": loss_sum / n_bal, "val_acc": (tp + tn) / (n_pos + n_neg),
            "val_bal_acc": float(np.mean(rates)), "val_poses": n_pos + n_neg, "val_positive": n_pos}


# ------------------------------------------------------------- checkpoint

@dataclass
class Checkpoint:
    config: NetworkConfig
    weights: np.ndarray                 # flat, parameter order of ``parameter_list``
    meta: dict = field(default_factory=dict)
    optimizer: dict | None = None       # AdamW moments for resuming

    def build(self) -> EquiUNet:
        net = EquiUNet(self.config)
        load_weights(net, self.weights)
        return net


def flat_weights(net: EquiUNet) -> np.ndarray:
    return np.concatenate([p.detach().numpy().ravel() for p in parameter_list(net)])


def load_weights(net: EquiUNet, flat: np.ndarray) -> None:
    params = parameter_list(net)
    n = sum(p.numel() for p in params)
    if flat.size != n:
        raise ValueError(f"weight count {flat.size} does not match the config-derived count {n}")
    off = 0
    with torch.no_grad():
        for p in params:
            k = p.numel()
            p.copy_(torch.as_tensor(flat[off:off + k].reshape(p.shape), dtype=p.dtype))
            off += k


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    dt = WEIGHT_DTYPES[ckpt.config.dtype]
    header = {"config": ckpt.config.to_dict(), "meta": ckpt.meta, "n_weights": int(ckpt.weights.size),
              "weight_dtype": dt, "optimizer": ckpt.optimizer is not None}
    if ckpt.optimizer is not None:
        header["optimizer_step"] = int(ckpt.optimizer["step"])
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION), struct.pack("<I", len(blob)), blob,
             np.ascontiguousarray(ckpt.weights, dtype=dt).tobytes()]
    if ckpt.optimizer is not None:
        for key in ("m", "v"):
            parts.append(np.concatenate([a.ravel() for a in ckpt.optimizer[key]]).astype(dt).tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (n_json,) = struct.unpack_from("<I", raw, 8)
    try:
        header = json.loads(raw[12:12 + n_json].decode("utf-8"))
        cfg = NetworkConfig.from_dict(header["config"])
    except (ValueError, KeyError, TypeError) as e:
        raise ValueError(f"{path}: corrupt checkpoint header ({e})") from e
    dt = np.dtype(header["weight_dtype"])
    n = header["n_weights"]
    expected = EquiUNet(cfg).n_params()
    if n != expected:
        raise ValueError(f"{path}: {n} weights stored, config implies {expected}")
    off = 12 + n_json
    n_blocks = 3 if header.get("optimizer") else 1
    if len(raw) - off != n_blocks * n * dt.itemsize:
        raise ValueError(f"{path}: truncated or oversized weight section")
    blocks = [np.frombuffer(raw, dtype=dt, count=n, offset=off + i * n * dt.itemsize).copy()
              for i in range(n_blocks)]
    opt = None
    if n_blocks == 3:
        shapes = [tuple(p.shape) for p in parameter_list(EquiUNet(cfg))]
        opt = {"step": header["optimizer_step"], "m": _split(blocks[1], shapes), "v": _split(blocks[2], shapes)}
    return Checkpoint(cfg, blocks[0], header.get("meta", {}), opt)


def _split(flat: np.ndarray, shapes) -> list[np.ndarray]:
    out, off = [], 0
    for s in shapes:
        k = int(np.prod(s))
        out.append(flat[off:off + k].reshape(s))
        off += k
    return out


def config_diff(a: NetworkConfig, b: NetworkConfig) -> dict:
    return {f.name: (getattr(a, f.name), getattr(b, f.name)) for f in fields(NetworkConfig)
            if getattr(a, f.name) != getattr(b, f.name)}


# ----------------------------------------------------------------- train

@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list            # one dict per epoch
    step_losses: list        # (global step, loss)


def train(net_cfg: NetworkConfig, tcfg: TrainConfig, data: TrainingData, resume: Checkpoint | None = None,
          log=None, epochs_to_run: int | None = None) -> TrainResult:
    """Epochs of AdamW over balanced per-neighborhood BCE; deterministic given the seeds.

    ``resume`` continues after the checkpoint's epoch with its optimizer state.
    ``epochs_to_run`` stops early (the schedule still spans ``tcfg.epochs``).
    """
    data.check_classes()
    torch.manual_seed(tcfg.seed)
    net = EquiUNet(net_cfg)
    params = parameter_list(net)
    state = adam_init([p.detach().numpy() for p in params])
    start_epoch = 0
    if resume is not None:
        diff = config_diff(resume.config, net_cfg)
        if diff:
            raise ConfigMismatch(diff)
        load_weights(net, resume.weights)
        if resume.optimizer is not None:
            state = {"step": resume.optimizer["step"], "m": [a.copy() for a in resume.optimizer["m"]],
                     "v": [a.copy() for a in resume.optimizer["v"]]}
        start_epoch = int(resume.meta.get("epoch", 0))
    n_train = len(data.train)
    total = tcfg.epochs * n_train
    stop = tcfg.epochs if epochs_to_run is None else min(tcfg.epochs, start_epoch + epochs_to_run)
    history, step_losses = [], []
    lr = cosine_lr(min(state["step"], total), total, tcfg.lr, tcfg.lr_min)
    for epoch in range(start_epoch, stop):
        rng = np.random.default_rng(np.random.SeedSequence([tcfg.seed, epoch]))
        order = rng.permutation(n_train)
        losses = []
        correct = seen = 0
        for i in order:
            s = data.train[i]
            sel = balanced_selection(s.labels, rng)
            y = torch.as_tensor(s.labels.ravel()[sel], dtype=net_cfg.torch_dtype)
            q = sample_logits(net, s, sel)
            loss = torch_bce(q, y)
            grads = backprop(loss, net)
            if not all(np.isfinite(g).all() for g in grads):
                raise FloatingPointError(f"non-finite gradient at step {state['step']}")
            lr = cosine_lr(min(state["step"], total), total, tcfg.lr, tcfg.lr_min)
            new, state = adam_step([p.detach().numpy() for p in params], grads, state, lr,
                                   tcfg.beta1, tcfg.beta2, tcfg.eps, tcfg.weight_decay)
            with torch.no_grad():
                for p, v in zip(params, new):
                    p.copy_(torch.from_numpy(v))
            lv = float(loss.detach())
            losses.append(lv)
            step_losses.append((state["step"], lv))
            pred = q.detach().numpy() >= 0
            correct += int(np.sum(pred == (y.numpy() > 0.5)))
            seen += sel.size
        rec = {"epoch": epoch + 1, "step": state["step"], "lr": lr, "train_loss": float(np.mean(losses)),
               "train_acc": correct / max(seen, 1)}
        rec.update(evaluate(net, data.valid, tcfg.seed))
        history.append(rec)
        if log:
            log(rec)
    meta = {"epoch": stop, "lr": lr, "seed": tcfg.seed, "train": asdict(tcfg),
            "history": history if resume is None else resume.meta.get("history", []) + history}
    ckpt = Checkpoint(net_cfg, flat_weights(net), meta,
                      {"step": state["step"], "m": state["m"], "v": state["v"]})
    return TrainResult(ckpt, history, step_losses)
