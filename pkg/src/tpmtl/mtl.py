"""Full multi-task model: shared encoder, per-task decoders, and the
tri-plane rendering regularizer branch, with its training loop.

The training objective is

    sum_t w_t * L_t(main_t) + alpha(i) * sum_t w_t * L_t(render_t)
        [+ alpha(i) * sum_t w_t * L_t(render_t^dv) for the cross-view term]

where alpha ramps linearly from 0 to alpha_max over the first half of
training by default. The regularizer branch only exists in train mode and
strip_regularizer() removes it entirely for inference.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from tpmtl import autodiff as ad
from tpmtl.layers import Conv3x3, ConvBNRelu, Linear
from tpmtl.renderer import Camera, RenderConfig, RenderOutput, RigidTransform, render_tasks
from tpmtl.scenes import SampleRecord
from tpmtl.taskfields import ConfigError, TaskFieldNet, TaskSpec, default_tasks
from tpmtl.triplane import TriPlaneEncoder, encode_triplane

logger = logging.getLogger(__name__)

BOUNDARY_POS_WEIGHT = 0.95
IGNORE_INDEX = 255
ENCODER_WIDTHS = (32, 64, 64)   # then the configured feature width C
DECODER_WIDTH = 24


class NonFiniteLossError(RuntimeError):
    """Training hit a NaN/inf loss; carries batch statistics for diagnosis."""

    def __init__(self, message: str, stats: dict):
        super().__init__(message + "\n" + json.dumps(stats, indent=1, default=str))
        self.stats = stats


@dataclass
class AlphaSchedule:
    """alpha(i) = alpha_max * min(1, i / ramp_iters), then flat."""

    alpha_max: float = 4.0
    ramp_iters: int = 20_000
    total_iters: int = 40_000

    @staticmethod
    def for_run(total_iters: int, alpha_max: float = 4.0,
                ramp_iters: Optional[int] = None) -> "AlphaSchedule":
        if ramp_iters is None:
            ramp_iters = max(1, total_iters // 2)
        return AlphaSchedule(alpha_max, ramp_iters, total_iters)


def alpha_at(schedule: AlphaSchedule, iteration: int) -> float:
    if iteration < 0:
        raise ValueError(f"iteration must be >= 0, got {iteration}")
    if schedule.alpha_max == 0.0:
        return 0.0
    return schedule.alpha_max * min(1.0, iteration / schedule.ramp_iters)


@dataclass
class TrainConfig:
    k_classes: int = 6
    image_size: int = 64
    batch_size: int = 4
    total_iters: int = 2000
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    data_dir: str = ""
    out_dir: str = "runs/default"
    cross_view: bool = False
    aux_heads: bool = False
    alpha_max: float = 4.0
    ramp_iters: Optional[int] = None
    # cross-view render size; None inherits the regularizer render size
    cross_height: Optional[int] = None
    cross_width: Optional[int] = None
    encoder_channels: int = 64
    plane_channels: int = 64
    per_task_density: bool = False
    render_height: int = 32
    render_width: int = 32
    render_samples: int = 32
    render_sampling: str = "stratified"
    task_weights: Dict[str, float] = field(default_factory=dict)
    log_every: int = 50
    ckpt_every: int = 1000

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")

    def schedule(self) -> AlphaSchedule:
        return AlphaSchedule.for_run(self.total_iters, self.alpha_max, self.ramp_iters)

    def render_config(self) -> RenderConfig:
        return RenderConfig(self.render_height, self.render_width,
                            self.render_samples, self.render_sampling)

    def cross_render_config(self) -> RenderConfig:
        return RenderConfig(self.cross_height or self.render_height,
                            self.cross_width or self.render_width,
                            self.render_samples, self.render_sampling)

    def weight(self, task: str) -> float:
        return float(self.task_weights.get(task, 1.0))

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        return TrainConfig(**d)

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:12]


def model_config_from_train(cfg: TrainConfig) -> dict:
    return {"k_classes": cfg.k_classes,
            "encoder_channels": cfg.encoder_channels,
            "plane_channels": cfg.plane_channels,
            "per_task_density": cfg.per_task_density,
            "aux_heads": cfg.aux_heads,
            "with_regularizer": True}


class _Decoder:
    """2-block conv decoder with nearest-neighbour upsampling to label size.

    The output projection is a per-pixel linear map (1x1 conv).
    """

    def __init__(self, c_in: int, value_dim: int, rng: np.random.Generator):
        self.value_dim = value_dim
        self.block1 = ConvBNRelu(c_in, DECODER_WIDTH, rng)
        self.block2 = ConvBNRelu(DECODER_WIDTH, DECODER_WIDTH, rng)
        self.out = Linear(DECODER_WIDTH, value_dim, rng)

    def __call__(self, x: ad.Tensor, mode: str) -> ad.Tensor:
        y = ad.upsample_nearest2x(self.block1(x, mode))
        y = ad.upsample_nearest2x(self.block2(y, mode))
        b, c, h, w = y.shape
        flat = ad.reshape(ad.permute(y, (0, 2, 3, 1)), (b * h * w, c))
        proj = ad.reshape(self.out(flat), (b, h, w, self.value_dim))
        return ad.permute(proj, (0, 3, 1, 2))

    def layers(self):
        return [("block1", self.block1), ("block2", self.block2), ("out", self.out)]


class MultiTaskModel:
    """Shared conv encoder, per-task decoders, optional regularizer branch."""

    def __init__(self, tasks: List[TaskSpec], rng: np.random.Generator,
                 encoder_channels: int = 64, plane_channels: int = 64,
                 per_task_density: bool = False, aux_heads: bool = False,
                 with_regularizer: bool = True):
        self.tasks = list(tasks)
        self.encoder_channels = encoder_channels
        self.plane_channels = plane_channels
        self.mode = "train"

        w1, w2, w3 = ENCODER_WIDTHS
        self.enc1 = ConvBNRelu(3, w1, rng)
        self.enc2 = ConvBNRelu(w1, w2, rng)
        self.enc3 = ConvBNRelu(w2, w3, rng)
        self.enc4 = ConvBNRelu(w3, encoder_channels, rng)
        self.heads = {t.name: _Decoder(encoder_channels, t.value_dim, rng)
                      for t in self.tasks}
        self.aux_heads = ({t.name: _Decoder(encoder_channels, t.value_dim, rng)
                           for t in self.tasks} if aux_heads else None)
        if with_regularizer:
            self.triplane_encoder = TriPlaneEncoder(encoder_channels, plane_channels, rng)
            self.field_net = TaskFieldNet(plane_channels, self.tasks, rng,
                                          per_task_density=per_task_density)
        else:
            self.triplane_encoder = None
            self.field_net = None

    # -- mode -------------------------------------------------------------
    def set_mode(self, mode: str) -> "MultiTaskModel":
        if mode not in ("train", "eval"):
            raise ConfigError(f"unknown mode {mode!r}")
        self.mode = mode
        return self

    @property
    def has_regularizer(self) -> bool:
        return self.triplane_encoder is not None

    # -- forward ----------------------------------------------------------
    def encode(self, images: ad.Tensor) -> ad.Tensor:
        """(B, 3, H, W) -> (B, C, H/4, W/4)."""
        h, w = images.shape[-2], images.shape[-1]
        if h % 4 or w % 4:
            raise ad.ShapeError(
                f"encoder needs spatial size divisible by 4, got {h}x{w}")
        y = self.enc1(images, self.mode)
        y = ad.avg_pool2x2(y)
        y = self.enc2(y, self.mode)
        y = ad.avg_pool2x2(y)
        y = self.enc3(y, self.mode)
        return self.enc4(y, self.mode)

    def decode_main(self, fmap: ad.Tensor, heads: Optional[dict] = None) -> Dict[str, ad.Tensor]:
        heads = self.heads if heads is None else heads
        return {name: dec(fmap, self.mode) for name, dec in heads.items()}

    def regularizer_render(self, fmap_one: ad.Tensor, cam: Camera,
                           cfg: RenderConfig, rng: np.random.Generator,
                           delta_v: Optional[RigidTransform] = None) -> RenderOutput:
        if not self.has_regularizer:
            raise ConfigError("model has no regularizer branch (stripped?)")
        tp = encode_triplane(self.triplane_encoder, fmap_one, self.mode, rng)
        return render_tasks(tp, self.field_net, cam, cfg, rng, delta_v)

    # -- registry ----------------------------------------------------------
    def _modules(self):
        yield "encoder.b1", self.enc1
        yield "encoder.b2", self.enc2
        yield "encoder.b3", self.enc3
        yield "encoder.b4", self.enc4
        for name, dec in self.heads.items():
            for sub, layer in dec.layers():
                yield f"head.{name}.{sub}", layer
        if self.aux_heads is not None:
            for name, dec in self.aux_heads.items():
                for sub, layer in dec.layers():
                    yield f"aux.{name}.{sub}", layer
        if self.triplane_encoder is not None:
            yield "reg.triplane", self.triplane_encoder
            yield "reg.field", self.field_net

    def named_parameters(self) -> Dict[str, ad.Tensor]:
        out: Dict[str, ad.Tensor] = {}
        for prefix, module in self._modules():
            for n, t in module.named_parameters():
                out[f"{prefix}.{n}"] = t
        return out

    def named_buffers(self) -> Dict[str, np.ndarray]:
        out: Dict[str, np.ndarray] = {}
        for prefix, module in self._modules():
            for n, a in module.named_buffers():
                out[f"{prefix}.{n}"] = a
        return out

    def parameter_count(self) -> int:
        return sum(t.size for t in self.named_parameters().values())

    def regularizer_parameter_count(self) -> int:
        if not self.has_regularizer:
            return 0
        return (self.triplane_encoder.parameter_count()
                + self.field_net.parameter_count())


def build_model(tasks: List[TaskSpec], seed_or_rng, **kw) -> MultiTaskModel:
    rng = (seed_or_rng if isinstance(seed_or_rng, np.random.Generator)
           else np.random.default_rng(seed_or_rng))
    return MultiTaskModel(tasks, rng, **kw)


def forward_main(model: MultiTaskModel, images: ad.Tensor) -> Dict[str, ad.Tensor]:
    """Per-task dense predictions (B, D, H, W) at label resolution."""
    return model.decode_main(model.encode(images))


def forward_regularizer(model: MultiTaskModel, images: ad.Tensor, cam: Camera,
                        cfg: RenderConfig, rng: np.random.Generator) -> List[RenderOutput]:
    """Rendered per-task predictions for each image in the batch (train mode only)."""
    if model.mode != "train":
        raise ConfigError("forward_regularizer requires train mode; "
                          "the regularizer branch never runs at inference")
    fmap = model.encode(images)
    outs = []
    b, c, r, _ = fmap.shape
    for i in range(b):
        fmap_i = ad.reshape(ad.narrow(fmap, 0, i, 1), (c, r, r))
        outs.append(model.regularizer_render(fmap_i, cam, cfg, rng))
    return outs


def strip_regularizer(model: MultiTaskModel) -> MultiTaskModel:
    """Eval-mode model sharing the encoder/head weights, regularizer removed."""
    stripped = MultiTaskModel.__new__(MultiTaskModel)
    stripped.tasks = model.tasks
    stripped.encoder_channels = model.encoder_channels
    stripped.plane_channels = model.plane_channels
    stripped.mode = "eval"
    stripped.enc1, stripped.enc2 = model.enc1, model.enc2
    stripped.enc3, stripped.enc4 = model.enc3, model.enc4
    stripped.heads = model.heads
    stripped.aux_heads = None
    stripped.triplane_encoder = None
    stripped.field_net = None
    return stripped


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def task_loss(spec: TaskSpec, pred: ad.Tensor, label: np.ndarray) -> ad.Tensor:
    """Mean-reduced loss over valid pixels; pred is channel-last (N, D) raw values.

    Segmentation and boundary consume pre-activation values (softmax /
    sigmoid folded into the stable loss forms); normals are unit-normalized
    inside the loss; depth is compared raw.
    """
    n = pred.shape[0]
    if spec.loss == "cross-entropy":
        label = np.asarray(label).reshape(n).astype(np.int64)
        valid = label != IGNORE_INDEX
        count = int(valid.sum())
        if count == 0:
            logger.warning("task %s: every pixel carries the ignore index; zero loss",
                           spec.name)
            return ad.Tensor(0.0)
        onehot = np.zeros((n, spec.value_dim))
        onehot[np.arange(n)[valid], label[valid]] = 1.0 / count
        return ad.neg(ad.tensor_sum(ad.mul(ad.log_softmax_lastdim(pred), ad.Tensor(onehot))))
    if spec.loss == "l1":
        label = np.asarray(label, dtype=np.float64).reshape(pred.shape)
        return ad.tensor_mean(ad.absolute(ad.sub(pred, ad.Tensor(label))))
    if spec.loss == "l1-on-normalized":
        label = np.asarray(label, dtype=np.float64).reshape(pred.shape)
        unit = ad.l2_normalize_lastdim(pred)
        return ad.tensor_mean(ad.absolute(ad.sub(unit, ad.Tensor(label))))
    if spec.loss == "binary-cross-entropy":
        label = np.asarray(label, dtype=np.float64).reshape(pred.shape)
        # w*y*softplus(-z) + (1-y)*softplus(z), the overflow-safe BCE-with-logits
        pos = ad.mul(ad.softplus(ad.neg(pred)),
                     ad.Tensor(BOUNDARY_POS_WEIGHT * label / pred.size))
        negt = ad.mul(ad.softplus(pred), ad.Tensor((1.0 - label) / pred.size))
        return ad.add(ad.tensor_sum(pos), ad.tensor_sum(negt))
    raise ConfigError(f"unknown loss {spec.loss!r} for task {spec.name!r}")


def downsample_label(task: TaskSpec, label: np.ndarray, h_r: int, w_r: int) -> np.ndarray:
    """Match a full-resolution label to the render grid.

    Class-like maps (segmentation, boundary) use nearest cell centers;
    continuous maps use the block mean, re-normalized for normals.
    """
    h, w = label.shape[0], label.shape[1]
    if h == h_r and w == w_r:
        return label
    if h % h_r or w % w_r:
        raise ConfigError(
            f"label size {h}x{w} is not an integer multiple of render size {h_r}x{w_r}")
    fh, fw = h // h_r, w // w_r
    if task.name in ("segmentation", "boundary"):
        return label[fh // 2::fh, fw // 2::fw]
    blocks = label.reshape(h_r, fh, w_r, fw, -1).mean(axis=(1, 3))
    if task.name == "normal":
        norms = np.linalg.norm(blocks, axis=-1, keepdims=True)
        blocks = blocks / np.where(norms > 0, norms, 1.0)
    return blocks.squeeze(-1) if label.ndim == 2 else blocks


# ---------------------------------------------------------------------------
# batches and the objective
# ---------------------------------------------------------------------------

LABEL_KEYS = ("seg", "depth", "normal", "boundary")
TASK_TO_LABEL = {"segmentation": "seg", "depth": "depth",
                 "normal": "normal", "boundary": "boundary"}


def batch_images(records: List[SampleRecord]) -> ad.Tensor:
    return ad.Tensor(np.stack([r.image.transpose(2, 0, 1) for r in records]))


def _label_array(rec, task: TaskSpec, pair: bool) -> np.ndarray:
    src = rec.pair if pair else rec
    return getattr(src, TASK_TO_LABEL[task.name])


def _flatten_pred(pred: ad.Tensor, value_dim: int) -> ad.Tensor:
    b, d, h, w = pred.shape
    return ad.reshape(ad.permute(pred, (0, 2, 3, 1)), (b * h * w, d))


def main_branch_losses(model: MultiTaskModel, fmap: ad.Tensor,
                       records: List[SampleRecord],
                       heads: Optional[dict] = None) -> Dict[str, ad.Tensor]:
    preds = model.decode_main(fmap, heads)
    losses = {}
    for t in model.tasks:
        label = np.stack([_label_array(r, t, pair=False) for r in records])
        losses[t.name] = task_loss(t, _flatten_pred(preds[t.name], t.value_dim), label)
    return losses


def _mean_terms(per_task: Dict[str, List[ad.Tensor]], count: int) -> Dict[str, ad.Tensor]:
    out = {}
    for name, items in per_task.items():
        total = items[0]
        for term in items[1:]:
            total = ad.add(total, term)
        out[name] = ad.scale(total, 1.0 / count)
    return out


def _render_losses(model: MultiTaskModel, fmap: ad.Tensor, records,
                   cfg: RenderConfig, xcfg: RenderConfig,
                   rng: np.random.Generator, cross_view: bool):
    """Per-task mean rendered losses over the batch.

    Returns (reg, cross) dicts; cross is empty unless cross_view is set.
    The cross term covers the records that carry a paired view (matching
    the partially-annotated-pairs setting), rendered from the same
    tri-plane encoding as the single-view term; that shared encoding (one
    dropout draw) is what makes the cross term degenerate to the
    single-view term bit-exactly at identity delta_v under midpoint
    sampling.
    """
    b, c, r, _ = fmap.shape
    reg: Dict[str, List[ad.Tensor]] = {t.name: [] for t in model.tasks}
    cross: Dict[str, List[ad.Tensor]] = {t.name: [] for t in model.tasks}
    paired = 0

    def add_losses(sink, out, rec, rcfg, pair: bool):
        for t in model.tasks:
            label = _label_array(rec, t, pair=pair)
            small = downsample_label(t, label, rcfg.height, rcfg.width)
            flat = ad.reshape(out.raw[t.name], (rcfg.height * rcfg.width, t.value_dim))
            sink[t.name].append(task_loss(t, flat, small))

    for i, rec in enumerate(records):
        fmap_i = ad.reshape(ad.narrow(fmap, 0, i, 1), (c, r, r))
        tp = encode_triplane(model.triplane_encoder, fmap_i, model.mode, rng)
        cam = Camera(rec.pose)
        add_losses(reg, render_tasks(tp, model.field_net, cam, cfg, rng), rec, cfg, False)
        if cross_view and rec.pair is not None:
            out2 = render_tasks(tp, model.field_net, cam, xcfg, rng,
                                delta_v=rec.pair.delta_v)
            add_losses(cross, out2, rec, xcfg, True)
            paired += 1
    cross_terms = _mean_terms(cross, paired) if (cross_view and paired) else {}
    return _mean_terms(reg, len(records)), cross_terms


@dataclass
class ObjectiveParts:
    total: ad.Tensor
    main: Dict[str, float]
    reg: Dict[str, float]
    crossview: Dict[str, float]
    alpha: float

    def main_total(self) -> float:
        return float(sum(self.main.values()))

    def reg_total(self) -> float:
        return float(sum(self.reg.values())) if self.reg else 0.0


def objective(model: MultiTaskModel, records: List[SampleRecord], iteration: int,
              schedule: AlphaSchedule, cfg: TrainConfig,
              rng: np.random.Generator, cross_view: Optional[bool] = None) -> ObjectiveParts:
    """Training objective at one iteration; alpha weights the render terms.

    With alpha == 0 the regularizer branch is skipped entirely, reproducing
    the plain multi-task objective. The aux-heads baseline swaps the render
    terms for duplicate 2D decoder heads at the same alpha weighting.
    """
    cross = cfg.cross_view if cross_view is None else cross_view
    alpha = alpha_at(schedule, iteration)
    images = batch_images(records)
    fmap = model.encode(images)

    main = main_branch_losses(model, fmap, records)
    main_sum = None
    for t in model.tasks:
        term = ad.scale(main[t.name], cfg.weight(t.name))
        main_sum = term if main_sum is None else ad.add(main_sum, term)

    parts = ObjectiveParts(total=main_sum,
                           main={k: float(v.data) for k, v in main.items()},
                           reg={}, crossview={}, alpha=alpha)
    if alpha == 0.0:
        return parts

    rcfg = cfg.render_config()
    if model.aux_heads is not None:
        if cross:
            raise ConfigError("cross_view is not defined for the aux-heads baseline")
        reg = main_branch_losses(model, fmap, records, heads=model.aux_heads)
        xv = {}
    else:
        if cross and all(rec.pair is None for rec in records):
            raise ConfigError("cross_view objective needs batches carrying paired "
                              "views with a relative transform and second-view labels")
        reg, xv = _render_losses(model, fmap, records, rcfg,
                                 cfg.cross_render_config(), rng, cross_view=cross)
    reg_sum = None
    for t in model.tasks:
        term = ad.scale(reg[t.name], cfg.weight(t.name))
        reg_sum = term if reg_sum is None else ad.add(reg_sum, term)
    parts.reg = {k: float(v.data) for k, v in reg.items()}
    total = ad.add(main_sum, ad.scale(reg_sum, alpha))

    if cross and xv:
        xv_sum = None
        for t in model.tasks:
            term = ad.scale(xv[t.name], cfg.weight(t.name))
            xv_sum = term if xv_sum is None else ad.add(xv_sum, term)
        parts.crossview = {k: float(v.data) for k, v in xv.items()}
        # alpha' = alpha: the cross-view term shares the single-view weight
        total = ad.add(total, ad.scale(xv_sum, alpha))

    parts.total = total
    return parts


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class AdamState:
    """First/second moments kept in flat buffers spanning all parameters."""

    def __init__(self, params: List[ad.Tensor]):
        self.sizes = [p.size for p in params]
        self.offsets = np.concatenate([[0], np.cumsum(self.sizes)])
        total = int(self.offsets[-1])
        self.m = np.zeros(total)
        self.v = np.zeros(total)
        self.flat_grad = np.empty(total)
        self.step = 0


def adam_step(params: List[ad.Tensor], grads: List[np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """Bias-corrected Adam update, in place on the parameter buffers."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    g = state.flat_grad
    for p, grad, off, size in zip(params, grads, state.offsets, state.sizes):
        if grad.shape != p.data.shape:
            raise ad.ShapeError(f"adam_step: grad shape {grad.shape} vs param {p.data.shape}")
        g[off:off + size] = grad.reshape(-1)
    m, v = state.m, state.v
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    update = (m / bc1) / (np.sqrt(v / bc2) + eps)
    update *= lr
    for p, off, size in zip(params, state.offsets, state.sizes):
        p.data -= update[off:off + size].reshape(p.data.shape)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_FORMAT = "tpmtl-v1"


def save_checkpoint(model: MultiTaskModel, path, iteration: int,
                    model_config: dict, extra: Optional[dict] = None) -> Path:
    """Index JSON (name -> shape, byte offset) plus one float64 LE blob."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    tensors = dict(model.named_parameters())
    buffers = model.named_buffers()
    index = {"format": CHECKPOINT_FORMAT, "iter": iteration,
             "model_config": model_config, "extra": extra or {},
             "tensors": {}, "buffers": {}}
    blob = bytearray()
    for section, items in (("tensors", {k: v.data for k, v in tensors.items()}),
                           ("buffers", buffers)):
        for name in sorted(items):
            arr = np.ascontiguousarray(items[name], dtype="<f8")
            index[section][name] = {"shape": list(arr.shape), "offset": len(blob),
                                    "bytes": arr.nbytes}
            blob.extend(arr.tobytes())
    (out / "data.bin").write_bytes(bytes(blob))
    (out / "index.json").write_text(json.dumps(index, indent=1, sort_keys=True))
    return out


def load_checkpoint(path) -> Tuple[MultiTaskModel, dict]:
    root = Path(path)
    index = json.loads((root / "index.json").read_text())
    if index.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"unsupported checkpoint format {index.get('format')!r}")
    mc = index["model_config"]
    tasks = default_tasks(mc["k_classes"])
    model = build_model(
        tasks, 0,
        encoder_channels=mc["encoder_channels"],
        plane_channels=mc["plane_channels"],
        per_task_density=mc.get("per_task_density", False),
        aux_heads=mc.get("aux_heads", False),
        with_regularizer=mc.get("with_regularizer", True))
    blob = (root / "data.bin").read_bytes()

    def read_into(meta: dict, name: str) -> np.ndarray:
        start, nbytes = meta["offset"], meta["bytes"]
        if start + nbytes > len(blob):
            raise ConfigError(f"checkpoint blob truncated at tensor {name!r}")
        arr = np.frombuffer(blob[start:start + nbytes], dtype="<f8")
        return arr.reshape(meta["shape"]).copy()

    params = model.named_parameters()
    for name, meta in index["tensors"].items():
        if name not in params:
            raise ConfigError(f"checkpoint tensor {name!r} has no home in the model")
        params[name].data = read_into(meta, name)
    buffers = model.named_buffers()
    for name, meta in index["buffers"].items():
        if name not in buffers:
            raise ConfigError(f"checkpoint buffer {name!r} has no home in the model")
        buffers[name][...] = read_into(meta, name)
    return model, index


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    checkpoint: Path
    log_path: Path
    rows: List[dict]
    final_parts: ObjectiveParts


def _csv_columns(tasks: List[TaskSpec]) -> List[str]:
    cols = ["iter", "alpha"]
    for t in tasks:
        cols += [f"{t.name}_main_loss", f"{t.name}_reg_loss", f"{t.name}_crossview_loss"]
    return cols


def _log_row(iteration: int, parts: ObjectiveParts, tasks: List[TaskSpec]) -> dict:
    row = {"iter": iteration, "alpha": parts.alpha}
    for t in tasks:
        row[f"{t.name}_main_loss"] = parts.main.get(t.name, 0.0)
        row[f"{t.name}_reg_loss"] = parts.reg.get(t.name, 0.0)
        row[f"{t.name}_crossview_loss"] = parts.crossview.get(t.name, 0.0)
    return row


def _batch_stats(records: List[SampleRecord], parts: ObjectiveParts) -> dict:
    return {
        "samples": [r.sample_id for r in records],
        "image_min": float(min(r.image.min() for r in records)),
        "image_max": float(max(r.image.max() for r in records)),
        "depth_range": [float(min(r.depth.min() for r in records)),
                        float(max(r.depth.max() for r in records))],
        "main_losses": parts.main,
        "reg_losses": parts.reg,
        "alpha": parts.alpha,
    }


def train(cfg: TrainConfig, records: List[SampleRecord]) -> TrainResult:
    """Run the optimization loop; writes a CSV metrics log and checkpoints.

    Checkpoints land every cfg.ckpt_every iterations and at the end under
    cfg.out_dir; losses are logged every cfg.log_every iterations.
    """
    if not records:
        raise ConfigError("empty training set")
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tasks = default_tasks(cfg.k_classes)
    rng = np.random.default_rng(cfg.seed)
    model = build_model(tasks, rng,
                        encoder_channels=cfg.encoder_channels,
                        plane_channels=cfg.plane_channels,
                        per_task_density=cfg.per_task_density,
                        aux_heads=cfg.aux_heads)
    model.set_mode("train")
    schedule = cfg.schedule()
    params = list(model.named_parameters().values())
    state = AdamState(params)
    mc = model_config_from_train(cfg)

    rows: List[dict] = []
    parts = None
    for it in range(cfg.total_iters):
        idx = rng.integers(0, len(records), size=cfg.batch_size)
        batch = [records[i] for i in idx]
        with ad.Tape():
            parts = objective(model, batch, it, schedule, cfg, rng)
        if not np.isfinite(parts.total.data):
            raise NonFiniteLossError(
                f"non-finite objective at iteration {it}", _batch_stats(batch, parts))
        for p in params:
            p.grad = None
        ad.backward(parts.total)
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data)
                 for p in params]
        adam_step(params, grads, state, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)

        if it % cfg.log_every == 0 or it == cfg.total_iters - 1:
            rows.append(_log_row(it, parts, tasks))
        if cfg.ckpt_every and (it + 1) % cfg.ckpt_every == 0 and it + 1 < cfg.total_iters:
            save_checkpoint(model, out_dir / f"ckpt_{it + 1:06d}", it + 1, mc,
                            {"config_digest": cfg.digest()})

    ckpt = save_checkpoint(model, out_dir / "checkpoint", cfg.total_iters, mc,
                           {"config_digest": cfg.digest()})
    log_path = out_dir / "metrics.csv"
    with log_path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=_csv_columns(tasks))
        writer.writeheader()
        writer.writerows(rows)
    return TrainResult(ckpt, log_path, rows, parts)
