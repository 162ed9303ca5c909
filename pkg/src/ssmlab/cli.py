"""Command-line entry point: train / eval / bench / ablate / merge-demo / synth."""

from __future__ import annotations

import argparse
import csv
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import bench as bn
from . import data as ds
from . import model as mdl
from . import reduce as rd
from . import train as tr
from .config import ConfigError, RunConfig
from .reduce import TokenBatch
from .tensor import Tensor, TensorError

EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


def worker_cap():
    raw = os.environ.get("MEETO_THREADS", "1")
    try:
        cap = int(raw)
    except ValueError:
        raise ConfigError(f"MEETO_THREADS must be an integer, got {raw!r}")
    if cap < 1:
        raise ConfigError("MEETO_THREADS must be >= 1")
    return cap


def _load_datasets(cfg: RunConfig):
    source = cfg.get("data.source")
    if source == "synth":
        image_size = cfg.get_int("model.image_size")
        train = ds.synth_dataset(cfg.get_int("data.per_class"),
                                 cfg.get_int("data.classes"), image_size,
                                 cfg.get_int("data.seed"),
                                 cfg.get_float("data.noise_sigma"))
        evald = ds.synth_dataset(cfg.get_int("data.eval_per_class"),
                                 cfg.get_int("data.classes"), image_size,
                                 cfg.get_int("data.seed") + 1,
                                 cfg.get_float("data.noise_sigma"))
        return train, evald
    if source == "idx":
        train = ds.load_idx(cfg.get("data.images"), cfg.get("data.labels"))
        if cfg.get("data.eval_images"):
            evald = ds.load_idx(cfg.get("data.eval_images"),
                                cfg.get("data.eval_labels"))
        else:
            evald = train
        return train, evald
    raise ConfigError(f"unknown data.source {source!r}")


def _build_model(cfg: RunConfig):
    model_cfg = cfg.model_config()
    init = cfg.get("run.init_checkpoint")
    if init:
        model = mdl.load_checkpoint(init)
        # weights come from the checkpoint; the reduction policy from this run
        model.cfg = replace(model.cfg, reduction=model_cfg.reduction)
        if (model.cfg.depth, model.cfg.d_model) != (model_cfg.depth,
                                                    model_cfg.d_model):
            raise ConfigError("checkpoint architecture does not match config")
        return model
    return mdl.init_model(model_cfg, seed=cfg.get_int("run.seed"))


def _prepare_out(cfg: RunConfig, out_override=None):
    if out_override:
        cfg.set("run.out", str(out_override))
    out = Path(cfg.get("run.out"))
    out.mkdir(parents=True, exist_ok=True)
    cfg.dump(out / "resolved_config.txt")
    return out


def cmd_train(cfg: RunConfig, out_dir):
    out = _prepare_out(cfg, out_dir)
    train_data, eval_data = _load_datasets(cfg)
    model = _build_model(cfg)
    report = tr.retrain(model, train_data, cfg.train_config(), eval_data)
    mdl.save_checkpoint(model, out / "checkpoint.bin")
    report.write_csv(out / "report.csv")
    print(f"final accuracy {report.final_accuracy:.4f}")
    return 0


def cmd_eval(cfg: RunConfig, out_dir):
    out = _prepare_out(cfg, out_dir)
    _, eval_data = _load_datasets(cfg)
    model = _build_model(cfg)
    acc = tr.evaluate(model, eval_data)
    (out / "eval.txt").write_text(f"accuracy={acc:.6f}\n")
    print(f"accuracy {acc:.4f}")
    return 0


def cmd_bench(cfg: RunConfig, out_dir):
    out = _prepare_out(cfg, out_dir)
    model = _build_model(cfg)
    r_values = [int(s) for s in cfg.get("bench.r_values").split(",") if s]
    dataset = _load_datasets(cfg)[1] if cfg.get("bench.dataset") == "eval" else None
    dtype = np.float32 if cfg.get("bench.dtype") == "float32" else np.float64
    results = bn.sweep(model, r_values, dataset=dataset,
                       batch=cfg.get_int("bench.batch"),
                       warmup=cfg.get_int("bench.warmup"),
                       iters=cfg.get_int("bench.iters"), dtype=dtype,
                       seed=cfg.get_int("run.seed"))
    bn.write_csv(results, out / "bench.csv")
    for b in results:
        print(f"r={b.r} ratio={b.reduction_ratio:.2f} "
              f"imgs/s={b.images_per_second:.1f} speedup={b.speedup:.2f}x")
    return 0


ABLATION_AXES = {
    "distance": ("reduce.distance", ["cosine", "l1", "l2"]),
    "feature": ("reduce.feature", ["x", "c", "b", "delta"]),
    "merge_op": ("reduce.merge_op", ["sum", "mean", "max", "min"]),
    "shuffle": ("reduce.shuffle_ratio", ["0.1", "0.3", "0.5", "0.7"]),
    "grouping": ("reduce.grouping", ["odd_even", "front_behind", "random"]),
    "selection": ("reduce.selection", ["top_r", "random_r"]),
    "pairing": ("reduce.pairing", ["nearest", "random_pair"]),
    "rank": ("reduce.pair_rank", ["1", "3", "5", "7", "14"]),
    "interval": ("interval", ["2", "4", "6", "8"]),
    "sites": ("reduce.sites", ["even", "odd"]),
}


def cmd_ablate(cfg: RunConfig, axis, out_dir):
    if axis not in ABLATION_AXES:
        raise ConfigError(f"unknown ablation axis {axis!r}; "
                          f"choose from {sorted(ABLATION_AXES)}")
    out = _prepare_out(cfg, out_dir)
    key, values = ABLATION_AXES[axis]
    train_data, eval_data = _load_datasets(cfg)
    rows = []
    for value in values:
        cell = RunConfig(dict(cfg.values))
        if key == "interval":
            k = int(value)
            depth = cell.get_int("model.depth")
            cell.set("reduce.sites",
                     ",".join(str(b) for b in range(k, depth, k)))
        else:
            cell.set(key, value)
        model = _build_model(cell)
        training_free = tr.evaluate(model, eval_data)
        report = tr.retrain(model, train_data, cell.train_config(), eval_data)
        retrained = report.final_accuracy
        rows.append((value, training_free, retrained))
        print(f"{axis}={value} training-free={training_free:.4f} "
              f"re-trained={retrained:.4f}")
    with open(out / f"ablate_{axis}.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow([axis, "training_free", "retrained", "delta"])
        for value, tf, rt in rows:
            w.writerow([value, f"{tf:.6f}", f"{rt:.6f}", f"{rt - tf:.6f}"])
    return 0


def _read_token_file(path):
    rows = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            try:
                rows.append([float(v) for v in line.split()])
            except ValueError as e:
                raise ds.DataError(f"{path}:{lineno}: bad token line") from e
    if not rows or any(len(r) != len(rows[0]) for r in rows):
        raise ds.DataError("token file must be a rectangular float table")
    return np.asarray(rows)


def cmd_merge_demo(cfg: RunConfig, tokens_path, out_dir):
    out = _prepare_out(cfg, out_dir)
    values = _read_token_file(tokens_path)
    red = cfg.reduction_config()
    t_len, _ = values.shape
    lines = [f"tokens {t_len} dim {values.shape[1]}"]
    g1, g2 = rd.grouping(t_len, red.grouping,
                         np.random.default_rng(cfg.get_int("run.seed")))
    lines.append("group1 " + " ".join(str(i) for i in g1))
    lines.append("group2 " + " ".join(str(i) for i in g2))
    dists = rd.pairwise_distance(values[g1], values[g2], red.distance)
    for a, i in enumerate(g1):
        row = " ".join(f"{dists[a, b]:.6f}" for b in range(len(g2)))
        lines.append(f"dist {i} | {row}")
    r_eff = rd.effective_r(t_len, red.r)
    if r_eff == 0:
        lines.append("no pairs")
        merged = TokenBatch(Tensor(values[None]), [np.arange(t_len)])
    else:
        plan = rd.select_pairs(dists, r_eff, red.pair_rank, red.selection,
                               red.pairing,
                               rng=np.random.default_rng(cfg.get_int("run.seed")),
                               g1=g1, g2=g2)
        lines.append("plan")
        lines.append(plan.serialize().rstrip("\n"))
        batch = TokenBatch(Tensor(values[None]), [np.arange(t_len)])
        if red.mode is rd.Mode.MERGE:
            merged = rd.merge(batch, plan, red.merge_op)
        else:
            merged = rd.prune(batch, plan)
    lines.append("merged")
    for row, pos in zip(merged.values.data[0], merged.positions[0]):
        lines.append(f"{pos} " + " ".join(f"{v:.6f}" for v in row))
    text = "\n".join(lines) + "\n"
    (out / "merge_demo.txt").write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_synth(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset = ds.synth_dataset(args.per_class, args.classes, args.image_size,
                               args.seed, args.noise_sigma)
    ds.write_idx(dataset, out / "images.idx3-ubyte", out / "labels.idx1-ubyte")
    print(f"wrote {dataset.size} images to {out}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="ssmlab",
                                description="Bidirectional selective-SSM lab "
                                            "with token merging and re-training")
    sub = p.add_subparsers(dest="command", required=True)

    def add_config(sp):
        sp.add_argument("--config", required=True, help="key=value run config")
        sp.add_argument("--out", default=None, help="output directory override")
        sp.add_argument("--seed", type=int, default=None, help="run seed override")

    add_config(sub.add_parser("train", help="(re-)train a model per config"))
    add_config(sub.add_parser("eval", help="evaluate a model per config"))
    add_config(sub.add_parser("bench", help="throughput sweep over r values"))
    ab = sub.add_parser("ablate", help="run one ablation axis")
    add_config(ab)
    ab.add_argument("--axis", required=True, choices=sorted(ABLATION_AXES))
    md = sub.add_parser("merge-demo", help="trace one reduction step")
    add_config(md)
    md.add_argument("tokens", help="text file, one token per line")
    sy = sub.add_parser("synth", help="write a synthetic IDX dataset")
    sy.add_argument("--classes", type=int, default=10)
    sy.add_argument("--per-class", type=int, default=32)
    sy.add_argument("--image-size", type=int, default=28)
    sy.add_argument("--seed", type=int, default=1234)
    sy.add_argument("--noise-sigma", type=float, default=0.1)
    sy.add_argument("--out", required=True)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        worker_cap()
        if args.command == "synth":
            return cmd_synth(args)
        cfg = RunConfig.load(args.config)
        if args.seed is not None:
            cfg.set("run.seed", str(args.seed))
        if args.command == "train":
            return cmd_train(cfg, args.out)
        if args.command == "eval":
            return cmd_eval(cfg, args.out)
        if args.command == "bench":
            return cmd_bench(cfg, args.out)
        if args.command == "ablate":
            return cmd_ablate(cfg, args.axis, args.out)
        if args.command == "merge-demo":
            return cmd_merge_demo(cfg, args.tokens, args.out)
        raise ConfigError(f"unknown command {args.command}")
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (ds.DataError, FileNotFoundError, mdl.ModelError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (tr.NumericError, TensorError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
