"""Command-line entry point: gen-data, train, infer, bench, export-ply, check."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


class CliError(Exception):
    def __init__(self, code: int, message: str):
        self.code = code
        super().__init__(message)


def _config(args):
    from .config import load_config

    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"seed = {args.seed}")
    return load_config(args.config, overrides)


def _say(*parts):
    print(*parts, flush=True)


# ----------------------------------------------------------------- commands

def cmd_gen_data(args) -> int:
    from .config import format_config
    from .scenegen.dataset import generate_dataset

    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(format_config(cfg), encoding="utf-8")

    def progress(sid, rec):
        if args.verbose:
            _say(f"scene {sid}: {len(rec)} points")

    s = generate_dataset(cfg.data(), out, progress)
    _say(f"scenes {s['scenes']}  points {s['points']}  poses {s['poses']}  "
         f"positive {s['positive']}  negative {s['negative']}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .equinet.training import load_checkpoint, load_training_data, save_checkpoint, train

    cfg = _config(args)
    net_cfg, tcfg = cfg.network(), cfg.training()
    resume = load_checkpoint(args.resume) if args.resume else None
    data = load_training_data(args.data, net_cfg, tcfg)
    _say(f"train neighborhoods {len(data.train)}  validation neighborhoods {len(data.valid)}")

    def log(r):
        _say(f"epoch {r['epoch']:3d}  step {r['step']:6d}  lr {r['lr']:.2e}  train_loss {r['train_loss']:.4f}  "
             f"train_acc {r['train_acc']:.4f}  val_loss {r['val_loss']:.4f}  val_acc {r['val_acc']:.4f}  "
             f"val_bal_acc {r['val_bal_acc']:.4f}")

    res = train(net_cfg, tcfg, data, resume=resume, log=log, epochs_to_run=args.epochs_to_run)
    save_checkpoint(args.out, res.checkpoint)
    _say(f"checkpoint {args.out}  epoch {res.checkpoint.meta['epoch']}  step {res.checkpoint.optimizer['step']}")
    return EXIT_OK


def _policy_from_checkpoint(path, cfg, k=None):
    from .bench import ModelPolicy
    from .equinet.training import load_checkpoint

    ck = load_checkpoint(path)
    m = int(ck.meta.get("train", {}).get("m", cfg.m))
    return ModelPolicy(ck.build().eval(), cfg.gripper(), k or cfg.k_centers, m, cfg.threshold, cfg.band, cfg.K)


def cmd_infer(args) -> int:
    from .bench import point_quality
    from .cloud import read_ply, write_ply
    from .orbit import format_grasps, select_grasp

    cfg = _config(args)
    policy = _policy_from_checkpoint(args.checkpoint, cfg, args.k)
    cloud = read_ply(args.cloud)
    if cloud.normals is None:
        raise CliError(EXIT_IO, f"{args.cloud}: cloud has no normals")
    groups = policy.analyse(cloud)
    best = select_grasp([c for g in groups for c in g.candidates], policy.threshold, policy.band)
    prefix = Path(args.out)
    text = format_grasps([best] if best else []).rstrip("\n")
    text += "\n# per-neighborhood best (center index first)\n"
    for g in groups:
        if g.best is not None:
            text += f"# center {g.center_index}\n" + format_grasps([g.best]).split("\n", 1)[1]
    Path(f"{prefix}.grasps.txt").write_text(text, encoding="utf-8")
    q = point_quality(cloud, groups)
    colors = np.stack([255 * q, np.zeros_like(q), 255 * (1 - q)], axis=1).round().astype(int)
    write_ply(f"{prefix}.ply", cloud, colors=colors, scalars={"quality": q})
    if best is None:
        _say("no grasp above threshold")
    else:
        _say(f"best grasp point {best.point_index} quality {best.quality:.4f} "
             f"at {np.array2string(best.translation, precision=4)}")
    return EXIT_OK


def cmd_bench(args) -> int:
    from .bench import OraclePolicy, RandomPolicy, run_bench

    cfg = _config(args)
    kind = args.policy or cfg.policy
    if kind == "model":
        if not args.checkpoint:
            raise CliError(EXIT_CONFIG, "policy: the model policy needs --checkpoint")
        policy = _policy_from_checkpoint(args.checkpoint, cfg)
    elif kind == "random":
        policy = RandomPolicy(cfg.gripper())
    else:
        policy = OraclePolicy(cfg.gripper(), cfg.mu, cfg.K)
    prefix = Path(args.out)
    texts, records = [], []
    for mode in cfg.bench_modes.split(","):
        for views in cfg.bench_views.split(","):
            rep = run_bench(policy, cfg.bench(mode.strip(), views.strip()))
            title = f"policy {kind}  mode {mode}  views {views}"
            texts.append(rep.text(title))
            for line in rep.jsonl().splitlines():
                d = json.loads(line)
                d.update(policy=kind, mode=mode, views=views)
                records.append(json.dumps(d, sort_keys=True))
            _say(texts[-1].splitlines()[0])
            _say("\n".join(texts[-1].splitlines()[-2:]))
    Path(f"{prefix}.txt").write_text("\n\n".join(texts) + "\n", encoding="utf-8")
    Path(f"{prefix}.jsonl").write_text("\n".join(records) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_export_ply(args) -> int:
    from .cloud import write_ply
    from .scenegen.dataset import DATASET_FILE, load_scene_cloud, read_dataset

    header, rec = read_dataset(Path(args.data) / DATASET_FILE)
    cloud = load_scene_cloud(args.data, args.scene)
    rec = rec[rec["scene"] == args.scene]
    frac = np.full(len(cloud), -1.0)
    if len(rec):
        from scipy.spatial import cKDTree

        _, idx = cKDTree(cloud.positions).query(rec["position"].astype(np.float64))
        bits = np.array([bin(int(m)).count("1") for m in rec["mask"]], dtype=np.float64)
        frac[idx] = bits / header["K"]
    palette = np.array([[160, 160, 160], [230, 25, 75], [60, 180, 75], [255, 225, 25], [0, 130, 200],
                        [245, 130, 48], [145, 30, 180], [70, 240, 240], [240, 50, 230]])
    labels = cloud.labels if cloud.labels is not None else np.zeros(len(cloud), dtype=int)
    colors = palette[np.where(labels > 0, (labels - 1) % (len(palette) - 1) + 1, 0)]
    write_ply(args.out, cloud, colors=colors, scalars={"positive_fraction": frac})
    _say(f"wrote {args.out}: {len(cloud)} points, {len(rec)} labelled")
    return EXIT_OK


def cmd_check(args) -> int:
    import pytest

    tests = Path(__file__).resolve().parents[2] / "tests"
    if not tests.is_dir():
        raise CliError(EXIT_IO, f"property suite not found at {tests}")
    extra = ["-m", "not slow"] if not args.all else []
    if args.k:
        extra += ["-k", args.k]
    return int(pytest.main([str(tests), "-q", *extra]))


# ------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="orbitgrasp", description="Equivariant grasp-quality fields on orbits.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="key = value configuration file")
            sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        sp.add_argument("--seed", type=int, help="seed for every random stream")

    g = sub.add_parser("gen-data", help="render, label and write a dataset")
    common(g)
    g.add_argument("--out", required=True)
    g.add_argument("-v", "--verbose", action="store_true")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train the network on a dataset")
    common(t)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--epochs-to-run", type=int, help="stop after this many epochs")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="grasps for a point cloud")
    common(i)
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--cloud", required=True)
    i.add_argument("--k", type=int, help="number of neighborhood centers (default 10)")
    i.add_argument("--out", required=True, help="output prefix")
    i.set_defaults(func=cmd_infer)

    b = sub.add_parser("bench", help="declutter benchmark")
    common(b)
    b.add_argument("--checkpoint")
    b.add_argument("--policy", choices=("model", "random", "oracle"))
    b.add_argument("--out", required=True, help="output prefix")
    b.set_defaults(func=cmd_bench)

    e = sub.add_parser("export-ply", help="colored PLY of one dataset scene")
    e.add_argument("--data", required=True)
    e.add_argument("--scene", type=int, default=0)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_export_ply)

    c = sub.add_parser("check", help="run the property test suite")
    c.add_argument("--all", action="store_true", help="include slow tests")
    c.add_argument("-k", help="only run tests matching this expression")
    c.set_defaults(func=cmd_check)
    return p


def main(argv=None) -> int:
    from .config import ConfigError
    from .equinet.training import ConfigMismatch, TrainingError

    args = build_parser().parse_args(argv)
    if args.command == "infer" and args.k is not None and args.k < 1:
        print("error: k: must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except (ConfigError, ConfigMismatch) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_IO
    except (FloatingPointError, np.linalg.LinAlgError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError, KeyError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
