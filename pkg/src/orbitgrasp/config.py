"""Plain-text ``key = value`` run configuration shared by every command."""
from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .bench import BenchConfig
from .equinet.training import TrainConfig
from .equinet.unet import NetworkConfig
from .orbit import GripperSpec
from .scenegen.dataset import DataConfig


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")


def _pos(x):
    return x > 0


def _nonneg(x):
    return x >= 0


def _one_of(*opts):
    return lambda x: x in opts


def _list_of(*opts):
    return lambda x: bool(x) and all(p.strip() in opts for p in x.split(","))


@dataclass(frozen=True)
class RunConfig:
    # scenes and data
    n_scenes: int = 10
    mode: str = "pile"
    n_objects: int = 5
    library: str = "box,cylinder,sphere"
    views: str = "multi"
    points_per_object: int = 64
    K: int = 36
    cloud_points_min: int = 2000
    cloud_points_max: int = 3000
    normal_k: int = 16
    mu: float = 0.6
    noise: float = 0.001
    workspace: float = 0.30
    # gripper
    max_opening: float = 0.08
    finger_depth: float = 0.05
    finger_thickness: float = 0.01
    finger_width: float = 0.02
    palm_clearance: float = 0.02
    tip_offset: float = 0.01
    # neighborhoods and network
    r_l: float = 0.05
    m: int = 512
    L_out: int = 3
    hidden: str = "16x0+8x1+4x2+2x3"
    edge_lmax: int = 2
    stages: int = 3
    ratio: float = 0.25
    knn_k: int = 16
    n_radial: int = 16
    dtype: str = "float32"
    dropout: float = 0.0
    # training
    epochs: int = 15
    lr: float = 3e-3
    lr_min: float = 3e-5
    weight_decay: float = 1e-2
    context: str = "full"
    cache_inputs: bool = True
    # inference and benchmark
    k_centers: int = 10
    threshold: float = 0.95
    band: float = 0.03
    rounds: int = 20
    repetitions: int = 2
    bench_modes: str = "pile"
    bench_views: str = "multi"
    policy: str = "model"
    seed: int = 0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            check = CHECKS.get(f.name)
            if isinstance(v, float) and not math.isfinite(v):
                raise ConfigError(f.name, "must be finite")
            if check is not None and not check[0](v):
                raise ConfigError(f.name, f"{v!r} violates: {check[1]}")
        if self.cloud_points_min > self.cloud_points_max:
            raise ConfigError("cloud_points_min", "exceeds cloud_points_max")
        if self.lr_min > self.lr:
            raise ConfigError("lr_min", "exceeds lr")
        if self.K <= 2 * self.L_out:
            raise ConfigError("K", f"must exceed 2*L_out = {2 * self.L_out}")
        for key, build in (("hidden", self.network), ("gripper", self.gripper)):
            try:
                build()
            except ValueError as e:
                raise ConfigError(key, str(e)) from e

    # ------------------------------------------------------- module configs

    def gripper(self) -> GripperSpec:
        return GripperSpec(max_opening=self.max_opening, finger_depth=self.finger_depth,
                           finger_thickness=self.finger_thickness, palm_clearance=self.palm_clearance,
                           finger_width=self.finger_width, tip_offset=self.tip_offset)

    def shape_library(self) -> tuple[str, ...]:
        return tuple(p.strip() for p in self.library.split(","))

    def data(self) -> DataConfig:
        return DataConfig(n_scenes=self.n_scenes, mode=self.mode, n_objects=self.n_objects,
                          library=self.shape_library(), views=self.views,
                          points_per_object=self.points_per_object, K=self.K, r_l=self.r_l, m=self.m,
                          cloud_points=(self.cloud_points_min, self.cloud_points_max), normal_k=self.normal_k,
                          mu=self.mu, noise=self.noise, workspace=self.workspace, gripper=self.gripper(),
                          seed=self.seed)

    def network(self) -> NetworkConfig:
        return NetworkConfig(L_out=self.L_out, hidden=self.hidden, edge_lmax=self.edge_lmax, n_stages=self.stages,
                             ratio=self.ratio, k=self.knn_k, n_radial=self.n_radial, r_l=self.r_l, dropout=self.dropout,
                             dtype=self.dtype, seed=self.seed)

    def training(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, lr=self.lr, lr_min=self.lr_min, weight_decay=self.weight_decay,
                           m=self.m, context=self.context, cache_inputs=self.cache_inputs, seed=self.seed)

    def bench(self, mode: str | None = None, views: str | None = None) -> BenchConfig:
        return BenchConfig(rounds=self.rounds, repetitions=self.repetitions, mode=mode or self.mode,
                           n_objects=self.n_objects, library=self.shape_library(), views=views or self.views,
                           cloud_points=(self.cloud_points_min, self.cloud_points_max), normal_k=self.normal_k,
                           noise=self.noise, mu=self.mu, workspace=self.workspace, gripper=self.gripper(),
                           seed=self.seed)

    def with_overrides(self, **kw) -> "RunConfig":
        return replace(self, **{k: v for k, v in kw.items() if v is not None})


CHECKS = {
    "n_scenes": (lambda x: x >= 1, ">= 1"),
    "mode": (_one_of("pile", "packed"), "pile or packed"),
    "n_objects": (lambda x: x >= 1, ">= 1"),
    "library": (_list_of("box", "cylinder", "sphere"), "comma list of box, cylinder, sphere"),
    "views": (_one_of("single", "multi"), "single or multi"),
    "points_per_object": (lambda x: x >= 1, ">= 1"),
    "K": (lambda x: 1 <= x <= 64, "1 <= K <= 64"),
    "cloud_points_min": (_pos, "> 0"),
    "cloud_points_max": (_pos, "> 0"),
    "normal_k": (lambda x: x >= 3, ">= 3"),
    "mu": (_nonneg, "friction coefficient mu >= 0"),
    "noise": (_nonneg, ">= 0"),
    "workspace": (_pos, "> 0"),
    "max_opening": (_pos, "> 0"),
    "finger_depth": (_pos, "> 0"),
    "finger_thickness": (_pos, "> 0"),
    "finger_width": (_pos, "> 0"),
    "palm_clearance": (_pos, "> 0"),
    "r_l": (_pos, "> 0"),
    "m": (lambda x: x >= 1, ">= 1"),
    "L_out": (lambda x: 0 <= x <= 3, "0 <= L_out <= 3"),
    "edge_lmax": (lambda x: 0 <= x <= 3, "0 <= edge_lmax <= 3"),
    "stages": (_nonneg, ">= 0"),
    "ratio": (lambda x: 0 < x <= 1, "0 < ratio <= 1"),
    "knn_k": (lambda x: x >= 1, ">= 1"),
    "n_radial": (lambda x: x >= 2, ">= 2"),
    "dtype": (_one_of("float32", "float64"), "float32 or float64"),
    "dropout": (lambda x: x == 0.0, "dropout is reserved and must be 0"),
    "epochs": (lambda x: x >= 1, ">= 1"),
    "lr": (_pos, "> 0"),
    "lr_min": (_nonneg, ">= 0"),
    "weight_decay": (_nonneg, ">= 0"),
    "context": (_one_of("full", "query"), "full or query"),
    "k_centers": (lambda x: x >= 1, ">= 1"),
    "threshold": (lambda x: 0 <= x <= 1, "0 <= threshold <= 1"),
    "band": (_nonneg, ">= 0"),
    "rounds": (lambda x: x >= 1, ">= 1"),
    "repetitions": (lambda x: x >= 1, ">= 1"),
    "bench_modes": (_list_of("pile", "packed"), "comma list of pile, packed"),
    "bench_views": (_list_of("single", "multi"), "comma list of single, multi"),
    "policy": (_one_of("model", "random", "oracle"), "model, random or oracle"),
    "seed": (lambda x: 0 <= x < 2 ** 32, "0 <= seed < 2**32"),
}

_TYPES = {f.name: f.type for f in fields(RunConfig)}


def parse_value(key: str, text: str):
    kind = _TYPES[key]
    text = text.strip()
    try:
        if kind == "bool":
            low = text.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(text)
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
    except ValueError:
        raise ConfigError(key, f"cannot parse {text!r} as {kind}") from None
    return text


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    values = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}", f"expected 'key = value', got {raw.strip()!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(key, "unknown key")
        values[key] = parse_value(key, val)
    return replace(base or RunConfig(), **values)


def load_config(path=None, overrides=()) -> RunConfig:
    """Read a config file (optional) then apply ``key=value`` overrides."""
    text = Path(path).read_text(encoding="utf-8") if path else ""
    text += "\n" + "\n".join(overrides)
    return parse_config(text)


def format_config(cfg: RunConfig) -> str:
    return "".join(f"{f.name} = {getattr(cfg, f.name)}\n" for f in fields(cfg))
