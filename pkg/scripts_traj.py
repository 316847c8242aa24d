"""Dev: density carving under cross-view training on one scene."""
import json
import sys
import time

import numpy as np

from tpmtl import autodiff as ad
from tpmtl.metrics import rmse_depth
from tpmtl.mtl import (AdamState, TrainConfig, adam_step, build_model,
                       downsample_label, objective)
from tpmtl.renderer import (Camera, RenderConfig, RigidTransform,
                            depth_from_density, render_tasks)
from tpmtl.scenes import Box, Plane, Scene, Sphere, make_pair, trace_labels
from tpmtl.taskfields import default_tasks
from tpmtl.triplane import encode_triplane


def rot(axis, a):
    c, s = np.cos(a), np.sin(a)
    if axis == "y":
        return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


scene = Scene([
    Sphere(np.array([-0.15, 0.12, 0.25]), 0.34, 2, np.array([0.9, 0.3, 0.2])),
    Box(np.array([0.18, -0.48, -0.15]), np.array([0.62, -0.05, 0.38]),
        4, np.array([0.25, 0.6, 0.9])),
    Sphere(np.array([0.3, 0.42, 0.62]), 0.22, 1, np.array([0.4, 0.85, 0.4])),
    Plane(np.array([0.0, 0.0, 1.0]), np.array([0.0, 0.0, -1.0]),
          0, np.array([0.55, 0.5, 0.45])),
])

iters = int(sys.argv[1]) if len(sys.argv) > 1 else 2000
lr = float(sys.argv[2]) if len(sys.argv) > 2 else 3e-3
bias = float(sys.argv[3]) if len(sys.argv) > 3 else -2.5
pair_every = int(sys.argv[4]) if len(sys.argv) > 4 else 1
xres = int(sys.argv[5]) if len(sys.argv) > 5 else 16

poses = [RigidTransform.identity()]
for a in (0.15, 0.3, 0.45, 0.6):
    for axis in ("y", "x"):
        poses.append(RigidTransform(rot(axis, a), np.zeros(3)))
        poses.append(RigidTransform(rot(axis, -a), np.zeros(3)))

records = []
for i, p in enumerate(poses):
    if i % pair_every == 0:
        j = (i + 3) % len(poses)  # partner a few poses over for real parallax
        dv = poses[j].compose(p.inverse())
        rec = make_pair(scene, Camera(p), dv, 64, 64, str(i))
    else:
        rec = trace_labels(scene, Camera(p), 64, 64, str(i))
    records.append(rec)
print(f"{len(records)} views, paired: {sum(r.pair is not None for r in records)}")

tasks = {t.name: t for t in default_tasks(6)}
depth_small = downsample_label(tasks["depth"], records[0].depth, 32, 32)
seg_small = downsample_label(tasks["segmentation"], records[0].seg, 32, 32)

cfg = TrainConfig(k_classes=6, batch_size=1, total_iters=iters, lr=lr, seed=0,
                  render_height=32, render_width=32, render_samples=32,
                  render_sampling="stratified", cross_view=True,
                  cross_height=xres, cross_width=xres,
                  out_dir="/tmp/unused", ckpt_every=0)
rng = np.random.default_rng(cfg.seed)
model = build_model(default_tasks(6), rng)
model.field_net.density_head.b.data[...] = bias
model.set_mode("train")
sched = cfg.schedule()
params = list(model.named_parameters().values())
state = AdamState(params)


def snapshot(it):
    model.set_mode("eval")
    rec = records[0]
    img = ad.Tensor(rec.image.transpose(2, 0, 1)[None])
    fmap = model.encode(img)
    fmap0 = ad.reshape(ad.narrow(fmap, 0, 0, 1), fmap.shape[1:])
    tp = encode_triplane(model.triplane_encoder, fmap0, "eval", np.random.default_rng(0))
    out = render_tasks(tp, model.field_net, Camera.identity(),
                       RenderConfig(32, 32, 32, "midpoint"))
    est = depth_from_density(out.weights.data, out.rays.t_samples).reshape(32, 32)
    binw = (2.0 - 1e-3) / 32
    gt_bin = np.clip((depth_small / binw).astype(int), 0, 31)
    peak_bin = out.weights.data.argmax(axis=1).reshape(32, 32)
    model.set_mode("train")
    return {
        "iter": it,
        "depth_rmse": round(rmse_depth(out.tasks["depth"].data[..., 0], depth_small), 4),
        "seg_acc": round(float((out.tasks["segmentation"].data.argmax(-1) == seg_small).mean()), 4),
        "term_binw": round(rmse_depth(est, depth_small) / binw, 2),
        "peak_bin_err": round(float(np.abs(peak_bin - gt_bin).mean()), 2),
        "Tfin": round(float(out.transmittance_final.data.mean()), 4),
    }


t0 = time.time()
for it in range(iters):
    idx = rng.integers(0, len(records), size=cfg.batch_size)
    batch = [records[i] for i in idx]
    with ad.Tape():
        parts = objective(model, batch, it, sched, cfg, rng)
    for p in params:
        p.grad = None
    ad.backward(parts.total)
    grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    adam_step(params, grads, state, cfg.lr)
    if (it + 1) % 400 == 0 or it == 0:
        snap = snapshot(it + 1)
        snap["ms_per_iter"] = round((time.time() - t0) / (it + 1) * 1000)
        print(json.dumps(snap), flush=True)
print(f"wall {time.time() - t0:.0f}s")
