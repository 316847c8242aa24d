"""Command-line surface: gen-data | train | eval | render | gradcheck | compare.

Exit codes: 0 success, 1 usage, 2 validation/corruption, 3 numerical failure.
TPMTL_THREADS caps worker concurrency for the compare harness.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from tpmtl import autodiff as ad
from tpmtl.evaluate import evaluate_records
from tpmtl.metrics import MetricReport, ValidationError
from tpmtl.mtl import (NonFiniteLossError, TrainConfig, load_checkpoint, train)
from tpmtl.renderer import Camera, RenderConfig, render_tasks
from tpmtl.scenes import (DatasetCorruptionError, apply_label_noise, generate_scene,
                          make_pair, read_dataset, split_records, trace_labels,
                          write_dataset)
from tpmtl.taskfields import ConfigError
from tpmtl.triplane import encode_triplane

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3

SEG_PALETTE = np.array([
    [40, 40, 40], [230, 80, 60], [70, 160, 230], [90, 200, 90],
    [240, 200, 70], [180, 100, 220], [240, 140, 60], [120, 220, 220],
    [200, 120, 120], [150, 150, 90],
], dtype=np.uint8)


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def worker_count() -> int:
    raw = os.environ.get("TPMTL_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"TPMTL_THREADS must be an integer, got {raw!r}")


def _parse_size(text: str):
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except Exception:
        raise ConfigError(f"size must look like 64x64, got {text!r}")


def build_parser() -> _Parser:
    parser = _Parser(prog="tpmtl", description=__doc__)
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train", type=int, default=64, dest="train_count")
    p.add_argument("--test", type=int, default=16, dest="test_count")
    p.add_argument("--size", default="64x64")
    p.add_argument("--k", type=int, default=6)
    p.add_argument("--paired", action="store_true",
                   help="store a second translated view per sample")
    p.add_argument("--seg-noise", type=float, default=0.0)
    p.add_argument("--depth-noise", type=float, default=0.0)

    p = sub.add_parser("train", help="run the training loop")
    p.add_argument("--config", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--cross-view", action="store_true", default=None)
    p.add_argument("--aux-heads", action="store_true", default=None)
    p.add_argument("--render-size", default=None)
    p.add_argument("--samples", type=int, default=None)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--split", default="test", choices=["train", "test", "all"])

    p = sub.add_parser("render", help="write regularizer-branch images for samples")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ids", default=None, help="comma-separated sample ids")
    p.add_argument("--render-size", default="32x32")
    p.add_argument("--samples", type=int, default=32)

    p = sub.add_parser("gradcheck", help="finite-difference suite over all primitives")
    p.add_argument("--seeds", type=int, default=20)

    p = sub.add_parser("compare", help="paired A/B trainings over seeds")
    p.add_argument("--data", required=True)
    p.add_argument("--out", default="compare_out")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--iters", type=int, default=250)
    p.add_argument("--alpha", type=float, default=4.0)
    p.add_argument("--aux-heads", action="store_true",
                   help="include the auxiliary-heads baseline condition")
    p.add_argument("--render-size", default="32x32")
    p.add_argument("--samples", type=int, default=32)
    return parser


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    h, w = _parse_size(args.size)
    rng = np.random.default_rng(args.seed)
    records = []
    total = args.train_count + args.test_count
    for i in range(total):
        scene = generate_scene(rng, k_classes=args.k)
        if args.paired:
            shift = rng.uniform(-0.25, 0.25, 2)
            from tpmtl.renderer import RigidTransform
            dv = RigidTransform(np.eye(3), [shift[0], shift[1], 0.0])
            rec = make_pair(scene, Camera.identity(), dv, h, w, f"{i:04d}")
        else:
            rec = trace_labels(scene, Camera.identity(), h, w, f"{i:04d}")
        rec.split = "train" if i < args.train_count else "test"
        if rec.split == "train" and (args.seg_noise > 0 or args.depth_noise > 0):
            apply_label_noise(rec, rng, args.seg_noise, args.depth_noise, args.k)
        records.append(rec)
    out = write_dataset(records, args.out, k_classes=args.k, seed=args.seed,
                        generator_params={"train": args.train_count,
                                          "test": args.test_count,
                                          "size": [h, w], "paired": args.paired,
                                          "seg_noise": args.seg_noise,
                                          "depth_noise": args.depth_noise})
    print(f"wrote {total} samples ({args.train_count} train / {args.test_count} test) "
          f"to {out}")
    return EXIT_OK


def _config_from_args(args) -> TrainConfig:
    base: Dict = {}
    if args.config:
        base = json.loads(Path(args.config).read_text())
    cfg = TrainConfig.from_dict(base) if base else TrainConfig()
    if args.data is not None:
        cfg.data_dir = args.data
    if args.out is not None:
        cfg.out_dir = args.out
    if args.seed is not None:
        cfg.seed = args.seed
    if args.iters is not None:
        cfg.total_iters = args.iters
    if args.alpha is not None:
        cfg.alpha_max = args.alpha
    if args.cross_view:
        cfg.cross_view = True
    if args.aux_heads:
        cfg.aux_heads = True
    if args.render_size is not None:
        cfg.render_height, cfg.render_width = _parse_size(args.render_size)
    if args.samples is not None:
        cfg.render_samples = args.samples
    if not cfg.data_dir:
        raise ConfigError("no dataset: pass --data or set data_dir in the config")
    return cfg


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    records, manifest = read_dataset(cfg.data_dir)
    if manifest["k_classes"] != cfg.k_classes:
        cfg.k_classes = manifest["k_classes"]
    train_recs, _ = split_records(records)
    if not train_recs:
        train_recs = records
    result = train(cfg, train_recs)
    print(f"checkpoint: {result.checkpoint}")
    print(f"metrics log: {result.log_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, index = load_checkpoint(args.checkpoint)
    model.set_mode("eval")
    records, manifest = read_dataset(args.data)
    train_recs, test_recs = split_records(records)
    chosen = {"train": train_recs, "test": test_recs, "all": records}[args.split]
    if not chosen:
        chosen = records
    report = evaluate_records(model, chosen, manifest["k_classes"],
                              index.get("extra", {}).get("config_digest", ""))
    print(report.to_table())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(report.to_json())
        print(f"report: {out / 'report.json'}")
    return EXIT_OK


def _write_ppm(path: Path, rgb: np.ndarray) -> None:
    h, w, _ = rgb.shape
    data = np.clip(rgb * 255.0 + 0.5, 0, 255).astype(np.uint8)
    path.write_bytes(b"P6\n%d %d\n255\n" % (w, h) + data.tobytes())


def _task_to_rgb(name: str, arr: np.ndarray, k: int) -> np.ndarray:
    if name == "segmentation":
        classes = arr.argmax(axis=-1)
        return SEG_PALETTE[classes % len(SEG_PALETTE)] / 255.0
    if name == "depth":
        x = np.clip(arr[..., 0] / 2.0, 0.0, 1.0)
        return np.repeat(x[..., None], 3, axis=-1)
    if name == "normal":
        return (arr + 1.0) * 0.5
    return np.repeat(np.clip(arr[..., :1], 0, 1), 3, axis=-1)


def cmd_render(args) -> int:
    model, index = load_checkpoint(args.checkpoint)
    if not model.has_regularizer:
        raise ConfigError("checkpoint has no regularizer branch (stripped model?)")
    model.set_mode("eval")
    records, manifest = read_dataset(args.data)
    by_id = {r.sample_id: r for r in records}
    ids = args.ids.split(",") if args.ids else [records[0].sample_id]
    h, w = _parse_size(args.render_size)
    rcfg = RenderConfig(h, w, args.samples, "midpoint")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    k = manifest["k_classes"]
    rng = np.random.default_rng(0)
    for sid in ids:
        if sid not in by_id:
            raise ValidationError(f"sample id {sid!r} not in dataset")
        rec = by_id[sid]
        img = ad.Tensor(rec.image.transpose(2, 0, 1)[None])
        fmap = model.encode(img)
        fmap0 = ad.reshape(ad.narrow(fmap, 0, 0, 1), fmap.shape[1:])
        tp = encode_triplane(model.triplane_encoder, fmap0, "eval", rng)
        out = render_tasks(tp, model.field_net, Camera(rec.pose), rcfg)
        for name, tensor in out.tasks.items():
            arr = tensor.data
            base = out_dir / f"{sid}_{name}"
            _write_ppm(base.with_suffix(".ppm"), _task_to_rgb(name, arr, k))
            base.with_suffix(".f32").write_bytes(
                np.ascontiguousarray(arr, dtype="<f4").tobytes())
            base.with_suffix(".json").write_text(json.dumps(
                {"task": name, "shape": list(arr.shape), "dtype": "float32",
                 "byte_order": "little"}))
        print(f"rendered {sid} -> {out_dir}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from tpmtl.gradcheck import END_TO_END_TOL, REL_TOL, run_full_suite
    t0 = time.time()
    prim, e2e, ok = run_full_suite(seeds=args.seeds)
    for name in sorted(prim):
        flag = "ok" if prim[name] < REL_TOL else "FAIL"
        print(f"{name:<28}{prim[name]:>12.3e}  {flag}")
    flag = "ok" if e2e < END_TO_END_TOL else "FAIL"
    print(f"{'end_to_end_render_loss':<28}{e2e:>12.3e}  {flag}")
    print(f"({args.seeds} seeds per check, {time.time() - t0:.1f}s)")
    return EXIT_OK if ok else EXIT_NUMERICAL


def _compare_conditions(args) -> List[dict]:
    conds = [{"name": "alpha0", "alpha_max": 0.0, "aux_heads": False},
             {"name": f"alpha{args.alpha:g}", "alpha_max": args.alpha,
              "aux_heads": False}]
    if args.aux_heads:
        conds.append({"name": "aux_heads", "alpha_max": args.alpha, "aux_heads": True})
    return conds


def cmd_compare(args) -> int:
    records, manifest = read_dataset(args.data)
    train_recs, test_recs = split_records(records)
    if not train_recs or not test_recs:
        raise ValidationError("compare needs a dataset with train and test splits")
    k = manifest["k_classes"]
    h, w = _parse_size(args.render_size)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    conditions = _compare_conditions(args)

    def run_one(cond: dict, seed: int) -> dict:
        cfg = TrainConfig(
            k_classes=k, total_iters=args.iters, seed=seed, batch_size=2,
            alpha_max=cond["alpha_max"], aux_heads=cond["aux_heads"],
            render_height=h, render_width=w, render_samples=args.samples,
            out_dir=str(out_dir / f"{cond['name']}_s{seed}"), ckpt_every=0)
        result = train(cfg, train_recs)
        model, _ = load_checkpoint(result.checkpoint)
        report = evaluate_records(model, test_recs, k, cfg.digest())
        row = {"condition": cond["name"], "seed": seed}
        row.update({k2: v for k2, v in report.to_dict().items()
                    if isinstance(v, (int, float)) and v is not None})
        return row

    jobs = [(cond, seed) for cond in conditions for seed in range(args.seeds)]
    threads = worker_count()
    t0 = time.time()
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(lambda cs: run_one(*cs), jobs))
    else:
        rows = [run_one(cond, seed) for cond, seed in jobs]
    wall = time.time() - t0

    metric_keys = ["segmentation_miou", "depth_rmse", "normal_mean_err_deg",
                   "boundary_max_f1"]
    header = f"{'condition':<12}{'seed':>5}" + "".join(f"{k:>22}" for k in metric_keys)
    lines = [header, "-" * len(header)]
    means: Dict[str, dict] = {}
    for cond in conditions:
        crows = [r for r in rows if r["condition"] == cond["name"]]
        for r in crows:
            lines.append(f"{r['condition']:<12}{r['seed']:>5}"
                         + "".join(f"{r.get(k, float('nan')):>22.4f}" for k in metric_keys))
        mean = {k: float(np.mean([r[k] for r in crows if k in r])) for k in metric_keys}
        means[cond["name"]] = mean
        lines.append(f"{cond['name'] + ' mean':<17}"
                     + "".join(f"{mean[k]:>22.4f}" for k in metric_keys))
        lines.append("-" * len(header))

    alpha_name = conditions[1]["name"]
    deltas = []
    for seed in range(args.seeds):
        a0 = next(r for r in rows if r["condition"] == "alpha0" and r["seed"] == seed)
        a1 = next(r for r in rows if r["condition"] == alpha_name and r["seed"] == seed)
        deltas.append({k: a1[k] - a0[k] for k in metric_keys})
        lines.append(f"{'delta s' + str(seed):<17}"
                     + "".join(f"{deltas[-1][k]:>+22.4f}" for k in metric_keys))
    mean_delta = {k: float(np.mean([d[k] for d in deltas])) for k in metric_keys}
    lines.append(f"{'delta mean':<17}"
                 + "".join(f"{mean_delta[k]:>+22.4f}" for k in metric_keys))
    wins = sum(1 for d in deltas if d["depth_rmse"] <= 0)
    lines.append(f"held-out depth RMSE at {alpha_name} <= alpha0 in "
                 f"{wins}/{args.seeds} seeds")
    lines.append(f"wall time: {wall:.0f}s with {threads} worker(s)")

    table = "\n".join(lines)
    print(table)
    (out_dir / "compare.txt").write_text(table)
    (out_dir / "compare.json").write_text(json.dumps(
        {"rows": rows, "means": means, "deltas": deltas, "mean_delta": mean_delta,
         "depth_wins": wins, "seeds": args.seeds, "iters": args.iters,
         "wall_seconds": wall}, indent=1))
    return EXIT_OK


def cli(argv: Optional[List[str]] = None) -> int:
    """Dispatch a command line; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage()
            return EXIT_USAGE
        handler = {
            "gen-data": cmd_gen_data,
            "train": cmd_train,
            "eval": cmd_eval,
            "render": cmd_render,
            "gradcheck": cmd_gradcheck,
            "compare": cmd_compare,
        }[args.command]
        return handler(args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValidationError, ConfigError, DatasetCorruptionError, ad.ShapeError,
            FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (NonFiniteLossError, ad.TapeError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


def main() -> None:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    sys.exit(cli())


if __name__ == "__main__":
    main()
