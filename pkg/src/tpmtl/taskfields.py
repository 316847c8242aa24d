"""Neural task fields: per-point density plus per-task value vectors.

A shared 2-layer trunk MLP (hidden width 64, leaky ReLU slope 0.2) reads
tri-plane features; one density head and one linear head per task branch
from it, so every task's rendering is conditioned on the same density.
A per-task-density ablation mode is available behind a flag.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Tuple, Union

import numpy as np

from tpmtl import autodiff as ad
from tpmtl.layers import Linear

TRUNK_HIDDEN = 64
LEAKY_SLOPE = 0.2

TASK_DEFAULTS = {
    # name: (value_dim or None for K, post_activation, loss)
    "segmentation": (None, "softmax", "cross-entropy"),
    "depth": (1, "identity", "l1"),
    "normal": (3, "l2-normalize", "l1-on-normalized"),
    "boundary": (1, "sigmoid", "binary-cross-entropy"),
}


class ConfigError(ValueError):
    """A task/model configuration is inconsistent."""


@dataclass(frozen=True)
class TaskSpec:
    name: str
    value_dim: int
    post_activation: str
    loss: str

    def __post_init__(self):
        if self.post_activation == "softmax" and self.value_dim < 2:
            raise ConfigError(
                f"task {self.name!r}: softmax needs value_dim >= 2, got {self.value_dim}")
        if self.post_activation in ("identity", "sigmoid") and self.value_dim != 1:
            raise ConfigError(
                f"task {self.name!r}: scalar activation with value_dim {self.value_dim}")


def default_tasks(k_classes: int) -> List[TaskSpec]:
    """The standard four-task set at a given segmentation class count."""
    specs = []
    for name, (dim, act, loss) in TASK_DEFAULTS.items():
        specs.append(TaskSpec(name, k_classes if dim is None else dim, act, loss))
    return specs


class TaskFieldNet:
    """Trunk MLP with a density head and one value head per task."""

    def __init__(self, c_in: int, tasks: List[TaskSpec], rng: np.random.Generator,
                 hidden: int = TRUNK_HIDDEN, per_task_density: bool = False):
        if not tasks:
            raise ConfigError("TaskFieldNet needs at least one task")
        self.tasks = list(tasks)
        self.c_in = c_in
        self.hidden = hidden
        self.per_task_density = per_task_density
        self.fc1 = Linear(c_in, hidden, rng)
        self.fc2 = Linear(hidden, hidden, rng)
        self.heads = {t.name: Linear(hidden, t.value_dim, rng) for t in tasks}
        if per_task_density:
            self.density_heads = {t.name: Linear(hidden, 1, rng) for t in tasks}
        else:
            self.density_head = Linear(hidden, 1, rng)

    def named_parameters(self) -> List[Tuple[str, ad.Tensor]]:
        out = []
        for prefix, layer in self._layers():
            out.extend((f"{prefix}.{n}", t) for n, t in layer.named_parameters())
        return out

    def named_buffers(self):
        return []

    def _layers(self):
        yield "fc1", self.fc1
        yield "fc2", self.fc2
        if self.per_task_density:
            for name, layer in self.density_heads.items():
                yield f"density.{name}", layer
        else:
            yield "density", self.density_head
        for name, layer in self.heads.items():
            yield f"head.{name}", layer

    def parameter_count(self) -> int:
        return sum(t.size for _, t in self.named_parameters())


def fused_head_params(net: TaskFieldNet):
    """Concatenated head weights/bias: density column(s) first, then task values.

    The per-head parameters stay separate tensors and receive their own
    gradients back through the concat.
    """
    head_layers = []
    for t in net.tasks:
        head = net.heads.get(t.name)
        if head is None:
            raise ConfigError(f"no value head configured for task {t.name!r}")
        head_layers.append(head)
    if net.per_task_density:
        density_layers = [net.density_heads[t.name] for t in net.tasks]
    else:
        density_layers = [net.density_head]
    layers = density_layers + head_layers
    w_all = ad.concat_lastdim([layer.w for layer in layers])
    b_all = ad.concat_lastdim([layer.b for layer in layers])
    return w_all, b_all


def query_field_fused(net: TaskFieldNet, feats: ad.Tensor,
                      w_all: ad.Tensor, b_all: ad.Tensor) -> ad.Tensor:
    """Trunk plus all heads as one affine map; columns follow fused_head_params."""
    if feats.ndim != 2 or feats.shape[1] != net.c_in:
        raise ad.ShapeError(
            f"query_field: features must be (N, {net.c_in}), got {feats.shape}")
    h = ad.linear_leaky_relu(feats, net.fc1.w, net.fc1.b, LEAKY_SLOPE)
    h = ad.linear_leaky_relu(h, net.fc2.w, net.fc2.b, LEAKY_SLOPE)
    return ad.linear(h, w_all, b_all)


def split_field_columns(net: TaskFieldNet, out_all: ad.Tensor):
    """Slice the fused head output back into (sigma_raw, per-task values)."""
    col = 0

    def take(width: int) -> ad.Tensor:
        nonlocal col
        piece = ad.narrow(out_all, 1, col, width)
        col += width
        return piece

    if net.per_task_density:
        sigma: Union[ad.Tensor, Dict[str, ad.Tensor]] = {
            t.name: take(1) for t in net.tasks}
    else:
        sigma = take(1)
    values: Dict[str, ad.Tensor] = {t.name: take(t.value_dim) for t in net.tasks}
    return sigma, values


def query_field(net: TaskFieldNet, feats: ad.Tensor):
    """Raw density and per-task value vectors for N feature rows.

    Returns (sigma_raw, values) where sigma_raw is (N, 1) in the shared
    density mode or a task -> (N, 1) dict in per-task mode, and values
    maps task -> (N, value_dim). Everything stays pre-activation.
    """
    w_all, b_all = fused_head_params(net)
    return split_field_columns(net, query_field_fused(net, feats, w_all, b_all))


def activate_density(sigma_raw: ad.Tensor) -> ad.Tensor:
    """Non-negative density via softplus."""
    return ad.softplus(sigma_raw)
