"""Small parameterized building blocks shared by the model components.

Each block exposes named_parameters() / named_buffers() so models can be
flattened into the checkpoint format, and takes an explicit mode string
("train" or "eval") wherever batch statistics are involved.
"""

from __future__ import annotations

from typing import Dict, Iterable, List, Tuple

import numpy as np

from tpmtl import autodiff as ad


def he_conv_weight(rng: np.random.Generator, c_out: int, c_in: int) -> np.ndarray:
    fan_in = c_in * 9
    return rng.standard_normal((c_out, c_in, 3, 3)) * np.sqrt(2.0 / fan_in)


def he_linear_weight(rng: np.random.Generator, d_in: int, d_out: int) -> np.ndarray:
    return rng.standard_normal((d_in, d_out)) * np.sqrt(2.0 / d_in)


class Linear:
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        self.w = ad.Tensor(he_linear_weight(rng, d_in, d_out), requires_grad=True)
        self.b = ad.Tensor(np.zeros(d_out), requires_grad=True)

    def __call__(self, x: ad.Tensor) -> ad.Tensor:
        return ad.linear(x, self.w, self.b)

    def named_parameters(self) -> List[Tuple[str, ad.Tensor]]:
        return [("w", self.w), ("b", self.b)]

    def named_buffers(self) -> List[Tuple[str, np.ndarray]]:
        return []


class ConvBNRelu:
    """conv2d_3x3 -> batchnorm -> ReLU, the standard encoder/decoder block."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator):
        self.w = ad.Tensor(he_conv_weight(rng, c_out, c_in), requires_grad=True)
        self.b = ad.Tensor(np.zeros(c_out), requires_grad=True)
        self.gamma = ad.Tensor(np.ones(c_out), requires_grad=True)
        self.beta = ad.Tensor(np.zeros(c_out), requires_grad=True)
        self.stats = ad.BatchNormStats(c_out)

    def __call__(self, x: ad.Tensor, mode: str) -> ad.Tensor:
        y = ad.conv2d_3x3(x, self.w, self.b)
        y = ad.batchnorm2d(y, self.gamma, self.beta, self.stats, mode)
        return ad.relu(y)

    def named_parameters(self) -> List[Tuple[str, ad.Tensor]]:
        return [("w", self.w), ("b", self.b), ("gamma", self.gamma), ("beta", self.beta)]

    def named_buffers(self) -> List[Tuple[str, np.ndarray]]:
        return [("running_mean", self.stats.mean), ("running_var", self.stats.var)]


class Conv3x3:
    """Plain conv2d_3x3 with bias, no normalization or activation."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator):
        self.w = ad.Tensor(he_conv_weight(rng, c_out, c_in), requires_grad=True)
        self.b = ad.Tensor(np.zeros(c_out), requires_grad=True)

    def __call__(self, x: ad.Tensor) -> ad.Tensor:
        return ad.conv2d_3x3(x, self.w, self.b)

    def named_parameters(self) -> List[Tuple[str, ad.Tensor]]:
        return [("w", self.w), ("b", self.b)]

    def named_buffers(self) -> List[Tuple[str, np.ndarray]]:
        return []


def collect_parameters(prefix: str, module) -> Dict[str, ad.Tensor]:
    return {f"{prefix}.{n}": t for n, t in module.named_parameters()}


def collect_buffers(prefix: str, module) -> Dict[str, np.ndarray]:
    return {f"{prefix}.{n}": a for n, a in module.named_buffers()}


def flatten_named(groups: Iterable[Tuple[str, object]], kind: str) -> Dict[str, object]:
    """Flatten (prefix, module) pairs into one name -> tensor/array dict."""
    out: Dict[str, object] = {}
    for prefix, module in groups:
        pairs = module.named_parameters() if kind == "params" else module.named_buffers()
        for n, t in pairs:
            out[f"{prefix}.{n}"] = t
    return out
