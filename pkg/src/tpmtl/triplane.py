"""Tri-plane feature volume: encoding from a 2D feature map and 3D queries.

A point (x, y, z) in the cube [-1, 1]^3 is answered by projecting onto the
three axis-aligned planes, bilinearly sampling each, and summing:

    e(x, y, z) = e_xy(x, y) + e_yz(y, z) + e_xz(x, z)

Plane axes follow (x, y), (y, z), (x, z) in that order; for each plane the
first named coordinate is u (columns) and the second is v (rows).
"""

from __future__ import annotations

from typing import List, Tuple

import numpy as np

from tpmtl import autodiff as ad
from tpmtl.layers import ConvBNRelu, Conv3x3

DROPOUT_RATE = 0.15


class TriPlane:
    """Three square feature planes, each (R, R, C'), over the cube [-1, 1]^3."""

    __slots__ = ("plane_xy", "plane_yz", "plane_xz")

    def __init__(self, plane_xy: ad.Tensor, plane_yz: ad.Tensor, plane_xz: ad.Tensor):
        shapes = {plane_xy.shape, plane_yz.shape, plane_xz.shape}
        if len(shapes) != 1:
            raise ad.ShapeError(f"tri-plane shapes differ: {sorted(shapes)}")
        (r, r2, _), = shapes
        if r != r2:
            raise ad.ShapeError(f"tri-plane planes must be square, got {plane_xy.shape}")
        self.plane_xy = plane_xy
        self.plane_yz = plane_yz
        self.plane_xz = plane_xz

    @property
    def resolution(self) -> int:
        return self.plane_xy.shape[0]

    @property
    def channels(self) -> int:
        return self.plane_xy.shape[2]

    def planes(self) -> List[ad.Tensor]:
        return [self.plane_xy, self.plane_yz, self.plane_xz]


class TriPlaneEncoder:
    """Two conv blocks mapping a (C, R, R) feature map to 3 * C' plane channels.

    conv -> batchnorm -> ReLU -> conv, then dropout (rate 0.15) on the plane
    features in train mode.
    """

    def __init__(self, c_in: int, c_plane: int, rng: np.random.Generator,
                 dropout_rate: float = DROPOUT_RATE):
        self.c_plane = c_plane
        self.dropout_rate = dropout_rate
        self.conv1 = ConvBNRelu(c_in, c_in, rng)
        self.conv2 = Conv3x3(c_in, 3 * c_plane, rng)

    def named_parameters(self) -> List[Tuple[str, ad.Tensor]]:
        return ([("conv1." + n, t) for n, t in self.conv1.named_parameters()]
                + [("conv2." + n, t) for n, t in self.conv2.named_parameters()])

    def named_buffers(self) -> List[Tuple[str, np.ndarray]]:
        return [("conv1." + n, a) for n, a in self.conv1.named_buffers()]

    def parameter_count(self) -> int:
        return sum(t.size for _, t in self.named_parameters())


def encode_triplane(enc: TriPlaneEncoder, fmap: ad.Tensor, mode: str,
                    rng: np.random.Generator) -> TriPlane:
    """Project a square (C, R, R) feature map into a TriPlane.

    The 3*C'-channel conv output is carved into the xy, yz, xz planes in
    that fixed order; each slice is transposed to (R, R, C') with rows as
    the plane's v axis and columns as u.
    """
    if fmap.ndim != 3:
        raise ad.ShapeError(f"encode_triplane: expected (C, H, W) feature map, got {fmap.shape}")
    _, h, w = fmap.shape
    if h != w:
        raise ad.ShapeError(f"encode_triplane: feature map must be square, got {h}x{w}")
    y = enc.conv1(fmap, mode)
    y = enc.conv2(y)
    y = ad.dropout(y, enc.dropout_rate, rng, mode)
    cp = enc.c_plane
    planes = []
    for i in range(3):
        sl = ad.narrow(y, 0, i * cp, cp)          # (C', R, R)
        planes.append(ad.permute(sl, (1, 2, 0)))  # rows=v, cols=u, channels last
    return TriPlane(*planes)


def sample_triplane(tp: TriPlane, points: ad.Tensor) -> ad.Tensor:
    """Sum of the three plane features at N points, shape (N, 3) -> (N, C').

    Differentiable with respect to the planes and the points; out-of-cube
    coordinates clamp to each plane's border.
    """
    points = points if isinstance(points, ad.Tensor) else ad.Tensor(points)
    if points.ndim != 2 or points.shape[1] != 3:
        raise ad.ShapeError(f"sample_triplane: points must be (N, 3), got {points.shape}")
    if points.requires_grad or points.tape is not None:
        x = ad.narrow(points, 1, 0, 1)
        y = ad.narrow(points, 1, 1, 1)
        z = ad.narrow(points, 1, 2, 1)
        uv_xy = ad.concat_lastdim([x, y])
        uv_yz = ad.concat_lastdim([y, z])
        uv_xz = ad.concat_lastdim([x, z])
    else:
        uv_xy = ad.Tensor(points.data[:, [0, 1]])
        uv_yz = ad.Tensor(points.data[:, [1, 2]])
        uv_xz = ad.Tensor(points.data[:, [0, 2]])
    return ad.bilinear_sample_sum(
        [(tp.plane_xy, uv_xy), (tp.plane_yz, uv_yz), (tp.plane_xz, uv_xz)])
