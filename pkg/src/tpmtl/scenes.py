"""Procedural synthetic scenes with analytic ray-traced ground truth.

Scenes live in the cube [-1, 1]^3 and always contain a back plane at
z = +1 so every ray terminates. Tracing shares the renderer's camera and
ray conventions, so rendered predictions and labels align by construction.
Depth labels are ray parameters measured from the ray origin on the near
plane, i.e. values in [0, 2].
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from tpmtl.renderer import Camera, RigidTransform, make_rays

logger = logging.getLogger(__name__)

DATASET_FORMAT = "tpmtl-dataset-v1"
HIT_EPS = 1e-9
DEFAULT_LIGHT = (-0.4, 0.5, -0.75)
AMBIENT = 0.1


class DatasetCorruptionError(RuntimeError):
    """A dataset file disagrees with its manifest."""


@dataclass
class Sphere:
    center: np.ndarray
    radius: float
    class_id: int
    albedo: np.ndarray

    kind = "sphere"

    def intersect(self, origins: np.ndarray, dirs: np.ndarray):
        oc = origins - np.asarray(self.center)
        b = np.einsum("pi,pi->p", oc, dirs)
        c0 = np.einsum("pi,pi->p", oc, oc) - self.radius ** 2
        disc = b * b - c0
        valid = disc >= 0.0
        sq = np.sqrt(np.maximum(disc, 0.0))
        t1 = -b - sq
        t2 = -b + sq
        t = np.where(t1 > HIT_EPS, t1, np.where(t2 > HIT_EPS, t2, np.inf))
        return np.where(valid, t, np.inf)

    def normals(self, points: np.ndarray) -> np.ndarray:
        return (points - np.asarray(self.center)) / self.radius


@dataclass
class Box:
    vmin: np.ndarray
    vmax: np.ndarray
    class_id: int
    albedo: np.ndarray

    kind = "box"

    def intersect(self, origins: np.ndarray, dirs: np.ndarray):
        vmin, vmax = np.asarray(self.vmin), np.asarray(self.vmax)
        d = np.where(np.abs(dirs) < 1e-12, np.copysign(1e-12, dirs) + 1e-15, dirs)
        inv = 1.0 / d
        t1 = (vmin - origins) * inv
        t2 = (vmax - origins) * inv
        tmin = np.minimum(t1, t2)
        tmax = np.maximum(t1, t2)
        tnear = tmin.max(axis=1)
        tfar = tmax.min(axis=1)
        hit = (tnear <= tfar) & (tfar > HIT_EPS)
        t = np.where(tnear > HIT_EPS, tnear, tfar)
        return np.where(hit, t, np.inf)

    def normals(self, points: np.ndarray) -> np.ndarray:
        vmin, vmax = np.asarray(self.vmin), np.asarray(self.vmax)
        center = 0.5 * (vmin + vmax)
        half = 0.5 * (vmax - vmin)
        rel = (points - center) / half
        axis = np.argmax(np.abs(rel), axis=1)
        n = np.zeros_like(points)
        n[np.arange(len(points)), axis] = np.sign(rel[np.arange(len(points)), axis])
        return n


@dataclass
class Plane:
    point: np.ndarray
    normal: np.ndarray
    class_id: int
    albedo: np.ndarray

    kind = "plane"

    def intersect(self, origins: np.ndarray, dirs: np.ndarray):
        n = np.asarray(self.normal, dtype=np.float64)
        n = n / np.linalg.norm(n)
        denom = dirs @ n
        num = (np.asarray(self.point) - origins) @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(np.abs(denom) > 1e-12, num / denom, np.inf)
        t = np.where(t > HIT_EPS, t, np.inf)
        # clip the infinite plane to the scene cube
        pts = origins + t[:, None] * dirs
        inside = np.all(np.abs(pts) <= 1.0 + 1e-6, axis=1)
        return np.where(inside, t, np.inf)

    def normals(self, points: np.ndarray) -> np.ndarray:
        n = np.asarray(self.normal, dtype=np.float64)
        n = n / np.linalg.norm(n)
        return np.broadcast_to(n, points.shape).copy()


@dataclass
class Scene:
    primitives: List
    light_dir: np.ndarray = field(default_factory=lambda: np.array(DEFAULT_LIGHT))
    background_class: int = 0

    def __post_init__(self):
        self.light_dir = np.asarray(self.light_dir, dtype=np.float64)
        self.light_dir = self.light_dir / np.linalg.norm(self.light_dir)

    def trace(self, origins: np.ndarray, dirs: np.ndarray):
        """Nearest-hit t and primitive index (-1 for a miss) per ray."""
        p = origins.shape[0]
        best_t = np.full(p, np.inf)
        best_i = np.full(p, -1, dtype=np.int64)
        for i, prim in enumerate(self.primitives):
            t = prim.intersect(origins, dirs)
            closer = t < best_t
            best_t = np.where(closer, t, best_t)
            best_i = np.where(closer, i, best_i)
        return best_t, best_i


@dataclass
class PairedView:
    delta_v: RigidTransform
    image: np.ndarray
    seg: np.ndarray
    depth: np.ndarray
    normal: np.ndarray
    boundary: np.ndarray


@dataclass
class SampleRecord:
    sample_id: str
    image: np.ndarray       # (H, W, 3) in [0, 1]
    seg: np.ndarray         # (H, W) int
    depth: np.ndarray       # (H, W) ray-parameter units in [0, 2]
    normal: np.ndarray      # (H, W, 3) unit vectors
    boundary: np.ndarray    # (H, W) binary
    pose: RigidTransform = field(default_factory=RigidTransform.identity)
    split: str = "train"
    pair: Optional[PairedView] = None

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]


def generate_scene(rng: np.random.Generator,
                   n_objects: Tuple[int, int] = (2, 5),
                   size: Tuple[float, float] = (0.12, 0.3),
                   k_classes: int = 6) -> Scene:
    """Random spheres and boxes inside the cube, plus the mandatory back plane.

    Object class ids are drawn from [1, k_classes); the back plane carries
    the background class 0.
    """
    if k_classes < 2:
        raise ValueError(f"need at least 2 classes, got {k_classes}")
    count = int(rng.integers(n_objects[0], n_objects[1] + 1))
    prims: List = []
    for _ in range(count):
        class_id = int(rng.integers(1, k_classes))
        albedo = rng.uniform(0.25, 1.0, 3)
        half = rng.uniform(size[0], size[1])
        # containment margin keeps geometry inside the cube and off the back plane
        cx, cy = rng.uniform(-1.0 + half, 1.0 - half, 2)
        cz = rng.uniform(-0.6, 0.9 - half)
        if rng.random() < 0.5:
            prims.append(Sphere(np.array([cx, cy, cz]), half, class_id, albedo))
        else:
            he = rng.uniform(size[0], size[1], 3)
            he = np.minimum(he, half)
            center = np.array([cx, cy, cz])
            prims.append(Box(center - he, center + he, class_id, albedo))
    prims.append(Plane(np.array([0.0, 0.0, 1.0]), np.array([0.0, 0.0, -1.0]),
                       0, rng.uniform(0.3, 0.7, 3)))
    return Scene(prims)


def boundary_from_seg(seg: np.ndarray) -> np.ndarray:
    """1-pixel-wide edges where the class changes to the right or below."""
    b = np.zeros(seg.shape, dtype=np.float64)
    b[:, :-1] = seg[:, :-1] != seg[:, 1:]
    b[:-1, :] = np.maximum(b[:-1, :], seg[:-1, :] != seg[1:, :])
    return b


def trace_labels(scene: Scene, cam: Camera, height: int, width: int,
                 sample_id: str = "0") -> SampleRecord:
    """Analytic per-pixel ground truth for all four tasks plus a shaded image."""
    rays = make_rays(cam, height, width)
    t, idx = scene.trace(rays.origins, rays.directions)

    miss = idx < 0
    t = np.where(miss, rays.t_far, t)
    points = rays.origins + t[:, None] * rays.directions

    normals = np.zeros((rays.count, 3))
    class_ids = np.full(rays.count, scene.background_class, dtype=np.int64)
    albedo = np.full((rays.count, 3), 0.5)
    for i, prim in enumerate(scene.primitives):
        sel = idx == i
        if not sel.any():
            continue
        normals[sel] = prim.normals(points[sel])
        class_ids[sel] = prim.class_id
        albedo[sel] = prim.albedo
    normals[miss] = -rays.directions[miss]
    # camera-facing sign convention: n . d < 0
    flip = np.einsum("pi,pi->p", normals, rays.directions) > 0
    normals[flip] = -normals[flip]
    norms = np.linalg.norm(normals, axis=1, keepdims=True)
    normals = normals / np.where(norms > 0, norms, 1.0)

    shade = np.maximum(0.0, normals @ scene.light_dir)
    image = np.clip(albedo * shade[:, None] + AMBIENT, 0.0, 1.0)

    seg = class_ids.reshape(height, width)
    return SampleRecord(
        sample_id=sample_id,
        image=image.reshape(height, width, 3),
        seg=seg,
        depth=t.reshape(height, width),
        normal=normals.reshape(height, width, 3),
        boundary=boundary_from_seg(seg),
        pose=cam.pose,
    )


def make_pair(scene: Scene, cam: Camera, delta_v: RigidTransform,
              height: int, width: int, sample_id: str = "0") -> SampleRecord:
    """Trace the scene from cam and from delta_v o cam, storing delta_v."""
    rec = trace_labels(scene, cam, height, width, sample_id)
    cam2 = Camera(delta_v.compose(cam.pose))
    rec2 = trace_labels(scene, cam2, height, width, sample_id + "-v2")
    for r in (rec, rec2):
        border = np.concatenate([r.seg[0], r.seg[-1], r.seg[:, 0], r.seg[:, -1]])
        if (border != scene.background_class).any():
            logger.warning("sample %s: objects touch the view border; consider "
                           "regenerating with a smaller delta_v", sample_id)
            break
    rec.pair = PairedView(delta_v=delta_v, image=rec2.image, seg=rec2.seg,
                          depth=rec2.depth, normal=rec2.normal, boundary=rec2.boundary)
    return rec


def apply_label_noise(rec: SampleRecord, rng: np.random.Generator,
                      seg_noise: float = 0.0, depth_sigma: float = 0.0,
                      k_classes: int = 6) -> SampleRecord:
    """Flip a fraction of seg labels and add gaussian noise to depth, in place."""
    if seg_noise > 0.0:
        flip = rng.random(rec.seg.shape) < seg_noise
        noise = rng.integers(0, k_classes, rec.seg.shape)
        rec.seg = np.where(flip, noise, rec.seg)
    if depth_sigma > 0.0:
        rec.depth = rec.depth + rng.normal(0.0, depth_sigma, rec.depth.shape)
    return rec


# ---------------------------------------------------------------------------
# dataset serialization: manifest.json + per-sample little-endian f32 blobs
# ---------------------------------------------------------------------------

_FIELDS = ("image", "seg", "depth", "normal", "boundary")


def _write_blob(path: Path, arr: np.ndarray) -> None:
    path.write_bytes(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_blob(path: Path, shape, sample_id: str) -> np.ndarray:
    if not path.exists():
        raise DatasetCorruptionError(f"sample {sample_id}: missing blob {path.name}")
    raw = path.read_bytes()
    expected = int(np.prod(shape)) * 4
    if len(raw) != expected:
        raise DatasetCorruptionError(
            f"sample {sample_id}: {path.name} holds {len(raw)} bytes, "
            f"manifest shape {list(shape)} needs {expected}")
    return np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float64)


def _pose_to_json(pose: RigidTransform) -> dict:
    return {"rotation": pose.rotation.reshape(-1).tolist(),
            "translation": pose.translation.tolist()}


def _pose_from_json(d: dict) -> RigidTransform:
    return RigidTransform(np.array(d["rotation"]).reshape(3, 3),
                          np.array(d["translation"]))


def write_dataset(records: List[SampleRecord], out_dir, k_classes: int,
                  seed: int = 0, generator_params: Optional[dict] = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    samples = []
    for rec in records:
        sdir = out / rec.sample_id
        sdir.mkdir(exist_ok=True)
        shapes = {}
        for name in _FIELDS:
            arr = getattr(rec, name)
            shapes[name] = list(arr.shape)
            _write_blob(sdir / f"{name}.f32", arr)
        entry = {"id": rec.sample_id, "split": rec.split, "shapes": shapes,
                 "pose": _pose_to_json(rec.pose), "paired": rec.pair is not None}
        if rec.pair is not None:
            for name in _FIELDS:
                arr = getattr(rec.pair, name)
                shapes[f"view2_{name}"] = list(arr.shape)
                _write_blob(sdir / f"view2_{name}.f32", arr)
            (sdir / "delta_v.json").write_text(
                json.dumps(_pose_to_json(rec.pair.delta_v)))
        samples.append(entry)
    manifest = {"format": DATASET_FORMAT, "k_classes": k_classes, "seed": seed,
                "generator": generator_params or {}, "samples": samples}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return out


def read_dataset(data_dir) -> Tuple[List[SampleRecord], dict]:
    """Load every sample listed in the manifest; inverse of write_dataset."""
    root = Path(data_dir)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise DatasetCorruptionError(f"no manifest.json under {root}")
    manifest = json.loads(mpath.read_text())
    if manifest.get("format") != DATASET_FORMAT:
        raise DatasetCorruptionError(
            f"unsupported dataset format {manifest.get('format')!r}")
    records = []
    for entry in manifest["samples"]:
        sid = entry["id"]
        sdir = root / sid
        shapes = entry["shapes"]
        arrays = {name: _read_blob(sdir / f"{name}.f32", shapes[name], sid)
                  for name in _FIELDS}
        rec = SampleRecord(
            sample_id=sid,
            image=arrays["image"],
            seg=np.rint(arrays["seg"]).astype(np.int64),
            depth=arrays["depth"],
            normal=arrays["normal"],
            boundary=arrays["boundary"],
            pose=_pose_from_json(entry["pose"]),
            split=entry.get("split", "train"),
        )
        if entry.get("paired"):
            varrays = {name: _read_blob(sdir / f"view2_{name}.f32",
                                        shapes[f"view2_{name}"], sid)
                       for name in _FIELDS}
            rec.pair = PairedView(
                delta_v=_pose_from_json(json.loads((sdir / "delta_v.json").read_text())),
                image=varrays["image"],
                seg=np.rint(varrays["seg"]).astype(np.int64),
                depth=varrays["depth"],
                normal=varrays["normal"],
                boundary=varrays["boundary"])
        records.append(rec)
    return records, manifest


def split_records(records: List[SampleRecord]):
    train = [r for r in records if r.split == "train"]
    test = [r for r in records if r.split == "test"]
    return train, test
