"""Dev calibration: criterion-6/7 overfit on one scene seen from several poses."""
import json
import sys
import time

import numpy as np

from tpmtl import autodiff as ad
from tpmtl.metrics import mean_angular_error, rmse_depth
from tpmtl.mtl import TrainConfig, downsample_label, load_checkpoint, train
from tpmtl.renderer import (Camera, RenderConfig, RigidTransform, depth_from_density,
                            render_tasks)
from tpmtl.scenes import Box, Plane, Scene, Sphere, trace_labels
from tpmtl.taskfields import default_tasks
from tpmtl.triplane import encode_triplane


def rot_y(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def rot_x(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


scene = Scene([
    Sphere(np.array([-0.15, 0.12, 0.25]), 0.34, 2, np.array([0.9, 0.3, 0.2])),
    Box(np.array([0.18, -0.48, -0.15]), np.array([0.62, -0.05, 0.38]),
        4, np.array([0.25, 0.6, 0.9])),
    Sphere(np.array([0.3, 0.42, 0.62]), 0.22, 1, np.array([0.4, 0.85, 0.4])),
    Plane(np.array([0.0, 0.0, 1.0]), np.array([0.0, 0.0, -1.0]),
          0, np.array([0.55, 0.5, 0.45])),
])

n_views = int(sys.argv[1]) if len(sys.argv) > 1 else 9
iters = int(sys.argv[2]) if len(sys.argv) > 2 else 2000
lr = float(sys.argv[3]) if len(sys.argv) > 3 else 1e-3

angles = [(0.0, "i")]
for a in (0.2, -0.2, 0.4, -0.4):
    angles.append((a, "y"))
for a in (0.2, -0.2, 0.35, -0.35):
    angles.append((a, "x"))
poses = []
for a, axis in angles[:n_views]:
    rot = np.eye(3) if axis == "i" else (rot_y(a) if axis == "y" else rot_x(a))
    poses.append(RigidTransform(rot, np.zeros(3)))

records = [trace_labels(scene, Camera(p), 64, 64, str(i)) for i, p in enumerate(poses)]
cfg = TrainConfig(k_classes=6, batch_size=1, total_iters=iters, lr=lr, seed=0,
                  render_height=32, render_width=32, render_samples=32,
                  render_sampling="stratified", out_dir="/tmp/overfit_mv",
                  log_every=200, ckpt_every=0)
t0 = time.time()
result = train(cfg, records)
wall = time.time() - t0
print(f"train wall: {wall:.1f}s ({wall / iters * 1000:.0f} ms/iter), {n_views} views")

model, _ = load_checkpoint(result.checkpoint)
model.set_mode("eval")
rec = records[0]
img = ad.Tensor(rec.image.transpose(2, 0, 1)[None])
fmap = model.encode(img)
fmap0 = ad.reshape(ad.narrow(fmap, 0, 0, 1), fmap.shape[1:])
tp = encode_triplane(model.triplane_encoder, fmap0, "eval", np.random.default_rng(0))
rcfg = RenderConfig(32, 32, 32, "midpoint")
out = render_tasks(tp, model.field_net, Camera.identity(), rcfg)

tasks = {t.name: t for t in default_tasks(6)}
depth_small = downsample_label(tasks["depth"], rec.depth, 32, 32)
seg_small = downsample_label(tasks["segmentation"], rec.seg, 32, 32)
normal_small = downsample_label(tasks["normal"], rec.normal, 32, 32)
est = depth_from_density(out.weights.data, out.rays.t_samples).reshape(32, 32)
bin_w = (2.0 - rcfg.near_offset) / 32
res = {
    "depth_rmse": rmse_depth(out.tasks["depth"].data[..., 0], depth_small),
    "seg_acc": float((out.tasks["segmentation"].data.argmax(-1) == seg_small).mean()),
    "normal_mErr": mean_angular_error(out.tasks["normal"].data, normal_small),
    "term_depth_rmse": rmse_depth(est, depth_small),
    "term_over_binw": rmse_depth(est, depth_small) / bin_w,
    "T_final_mean": float(out.transmittance_final.data.mean()),
    "main0": sum(v for k, v in result.rows[0].items() if k.endswith("_main_loss")),
    "main1": sum(v for k, v in result.rows[-1].items() if k.endswith("_main_loss")),
}
print(json.dumps(res, indent=1))
