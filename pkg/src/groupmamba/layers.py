"""Composite blocks: scan orders, VSSS, the grouped operator and CAM.

A feature map (B, H, W, C) is mixed in three moves. The grouped operator
splits channels into four contiguous groups, flattens each group's grid in
its own direction (left-to-right, right-to-left, top-to-bottom,
bottom-to-top), and runs an independent VSSS block per group. Channel
affinity modulation then rescales the concatenated result with per-channel
gates computed from globally pooled statistics, restoring cross-group
communication. Finally a norm + feed-forward residual closes the layer.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .rng import Rng
from .ssm import SsmParams, selective_scan
from .tensor import (
    Tensor,
    ShapeError,
    concat,
    conv2d,
    dwconv1d,
    gelu,
    layer_norm,
    matmul,
    mul,
    narrow,
    parameter,
    permute_tokens,
    relu,
    reshape,
    sigmoid,
    silu,
    tmean,
)

# Fault hook for the verification CLI ("perm" corrupts the TB order).
_FAULT: str | None = None


class ScanDirection(enum.Enum):
    LR = "lr"
    RL = "rl"
    TB = "tb"
    BT = "bt"


# Fixed group-to-direction assignment for the four channel groups.
GROUP_DIRECTIONS = (ScanDirection.LR, ScanDirection.RL, ScanDirection.TB, ScanDirection.BT)


@dataclass(frozen=True)
class ScanPermutation:
    """Bijective flattening of an H x W grid plus its inverse.

    `forward[j]` is the row-major grid index visited at sequence position j;
    `inverse` restores grid order from sequence order.
    """

    direction: ScanDirection
    h: int
    w: int
    forward: np.ndarray
    inverse: np.ndarray


def scan_permutation(direction: ScanDirection, h: int, w: int) -> ScanPermutation:
    if h < 1 or w < 1:
        raise ShapeError(f"grid dims must be positive, got {h}x{w}")
    lr = np.arange(h * w, dtype=np.int64)
    tb = lr.reshape(h, w).T.reshape(-1)
    if _FAULT == "perm" and h * w >= 2:
        tb = tb.copy()
        tb[0], tb[1] = tb[1], tb[0]
    if direction is ScanDirection.LR:
        fwd = lr
    elif direction is ScanDirection.RL:
        fwd = lr[::-1]
    elif direction is ScanDirection.TB:
        fwd = tb
    else:
        fwd = tb[::-1]
    inv = np.argsort(fwd, kind="stable")
    return ScanPermutation(direction, h, w, fwd.copy(), inv)


# -- parameter containers ----------------------------------------------------


@dataclass
class LayerNormParams:
    gamma: Tensor
    beta: Tensor
    eps: float = 1e-5

    @staticmethod
    def create(dim: int, dtype=np.float32) -> "LayerNormParams":
        return LayerNormParams(
            gamma=parameter(np.ones(dim), "gamma", dtype),
            beta=parameter(np.zeros(dim), "beta", dtype),
        )

    def params(self, prefix: str = ""):
        yield prefix + "gamma", self.gamma
        yield prefix + "beta", self.beta


@dataclass
class FfnParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @staticmethod
    def create(dim: int, hidden: int, rng: Rng, dtype=np.float32) -> "FfnParams":
        return FfnParams(
            w1=parameter(rng.split("w1").truncated_normal((dim, hidden)), "w1", dtype),
            b1=parameter(np.zeros(hidden), "b1", dtype),
            w2=parameter(rng.split("w2").truncated_normal((hidden, dim)), "w2", dtype),
            b2=parameter(np.zeros(dim), "b2", dtype),
        )

    def params(self, prefix: str = ""):
        yield prefix + "w1", self.w1
        yield prefix + "b1", self.b1
        yield prefix + "w2", self.w2
        yield prefix + "b2", self.b2


def ffn(x: Tensor, p: FfnParams) -> Tensor:
    """GELU(x W1 + b1) W2 + b2."""
    return matmul(gelu(matmul(x, p.w1) + p.b1), p.w2) + p.b2


@dataclass
class Conv2dParams:
    w: Tensor
    b: Tensor
    stride: int
    padding: int

    @staticmethod
    def create(kh, kw, cin, cout, rng: Rng, stride=1, padding=0, dtype=np.float32):
        # He-scaled fan-in init; the transformer-style 0.02 starves deep
        # ReLU/GELU conv stacks.
        std = math.sqrt(2.0 / (kh * kw * cin))
        return Conv2dParams(
            w=parameter(rng.truncated_normal((kh, kw, cin, cout), std=std), "w", dtype),
            b=parameter(np.zeros(cout), "b", dtype),
            stride=stride,
            padding=padding,
        )

    def params(self, prefix: str = ""):
        yield prefix + "w", self.w
        yield prefix + "b", self.b


def conv(x: Tensor, p: Conv2dParams) -> Tensor:
    return conv2d(x, p.w, p.b, stride=p.stride, padding=p.padding)


@dataclass
class MambaBlockParams:
    """Gated scan mixer: in-projection, depthwise conv, SSM, out-projection."""

    dim: int
    d_expand: int
    in_proj: Tensor
    conv_w: Tensor
    conv_b: Tensor
    ssm: SsmParams
    out_proj: Tensor

    @staticmethod
    def create(
        dim: int,
        rng: Rng,
        expand: int = 2,
        d_state: int = 16,
        conv_kernel: int = 3,
        use_skip: bool = True,
        dtype=np.float32,
    ) -> "MambaBlockParams":
        de = expand * dim
        return MambaBlockParams(
            dim=dim,
            d_expand=de,
            in_proj=parameter(rng.split("in").truncated_normal((dim, 2 * de)), "in_proj", dtype),
            conv_w=parameter(rng.split("conv").truncated_normal((de, conv_kernel)), "conv_w", dtype),
            conv_b=parameter(np.zeros(de), "conv_b", dtype),
            ssm=SsmParams.create(de, d_state, rng.split("ssm"), use_skip, dtype),
            out_proj=parameter(rng.split("out").truncated_normal((de, dim)), "out_proj", dtype),
        )

    def params(self, prefix: str = ""):
        yield prefix + "in_proj", self.in_proj
        yield prefix + "conv_w", self.conv_w
        yield prefix + "conv_b", self.conv_b
        yield from self.ssm.params(prefix + "ssm.")
        yield prefix + "out_proj", self.out_proj


def mamba_block(z: Tensor, p: MambaBlockParams) -> Tensor:
    """Content branch: conv -> SiLU -> scan; gate branch: SiLU; then mix."""
    de = p.d_expand
    xz = matmul(z, p.in_proj)
    x = narrow(xz, 2, 0, de)
    g = narrow(xz, 2, de, de)
    x = silu(dwconv1d(x, p.conv_w, p.conv_b))
    y = selective_scan(x, p.ssm)
    return matmul(mul(y, silu(g)), p.out_proj)


@dataclass
class VsssParams:
    """One residual scan mixer plus one residual channel mixer."""

    dim: int
    norm1: LayerNormParams
    mamba: MambaBlockParams
    norm2: LayerNormParams
    ffn: FfnParams

    @staticmethod
    def create(
        dim: int,
        rng: Rng,
        ssm_expand: int = 2,
        d_state: int = 16,
        conv_kernel: int = 3,
        ffn_ratio: int = 3,
        use_skip: bool = True,
        dtype=np.float32,
    ) -> "VsssParams":
        return VsssParams(
            dim=dim,
            norm1=LayerNormParams.create(dim, dtype),
            mamba=MambaBlockParams.create(
                dim, rng.split("mamba"), ssm_expand, d_state, conv_kernel, use_skip, dtype
            ),
            norm2=LayerNormParams.create(dim, dtype),
            ffn=FfnParams.create(dim, ffn_ratio * dim, rng.split("ffn"), dtype),
        )

    def params(self, prefix: str = ""):
        yield from self.norm1.params(prefix + "norm1.")
        yield from self.mamba.params(prefix + "mamba.")
        yield from self.norm2.params(prefix + "norm2.")
        yield from self.ffn.params(prefix + "ffn.")


def vsss_forward(z: Tensor, p: VsssParams) -> Tensor:
    if z.shape[-1] != p.dim:
        raise ShapeError(f"sequence channels {z.shape[-1]} != block dim {p.dim}")
    z = z + mamba_block(layer_norm(z, p.norm1.gamma, p.norm1.beta, p.norm1.eps), p.mamba)
    return z + ffn(layer_norm(z, p.norm2.gamma, p.norm2.beta, p.norm2.eps), p.ffn)


# -- channel affinity modulation ---------------------------------------------


@dataclass
class CamParams:
    reduction: int
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @staticmethod
    def create(channels: int, rng: Rng, reduction: int = 4, dtype=np.float32) -> "CamParams":
        hidden = max(1, channels // reduction)
        return CamParams(
            reduction=reduction,
            w1=parameter(rng.split("w1").truncated_normal((channels, hidden)), "w1", dtype),
            b1=parameter(np.zeros(hidden), "b1", dtype),
            w2=parameter(rng.split("w2").truncated_normal((hidden, channels)), "w2", dtype),
            b2=parameter(np.zeros(channels), "b2", dtype),
        )

    def params(self, prefix: str = ""):
        yield prefix + "w1", self.w1
        yield prefix + "b1", self.b1
        yield prefix + "w2", self.w2
        yield prefix + "b2", self.b2


def channel_stat(x: Tensor) -> Tensor:
    """Global average pool: (B, H, W, C) -> (B, C)."""
    if x.ndim != 4:
        raise ShapeError(f"channel_stat expects (B, H, W, C), got {x.shape}")
    return tmean(x, axis=(1, 2))


def affinity(x: Tensor, p: CamParams) -> Tensor:
    """Per-channel gates in (0, 1): sigmoid(W2 relu(W1 pooled + b1) + b2)."""
    s = channel_stat(x)
    return sigmoid(matmul(relu(matmul(s, p.w1) + p.b1), p.w2) + p.b2)


def cam_modulate(x_gm: Tensor, aff: Tensor) -> Tensor:
    """Scale every spatial position's channel c by aff[b, c]."""
    if x_gm.ndim != 4 or aff.ndim != 2 or x_gm.shape[3] != aff.shape[1]:
        raise ShapeError(f"cam_modulate shapes {x_gm.shape} vs {aff.shape}")
    return mul(x_gm, reshape(aff, (aff.shape[0], 1, 1, aff.shape[1])))


# -- grouped operator and the full layer -------------------------------------


@dataclass
class GroupMambaLayerParams:
    """Four direction-specialized VSSS groups, CAM, and the outer mixer."""

    channels: int
    groups: list[VsssParams]
    cam: CamParams
    norm: LayerNormParams
    ffn: FfnParams
    affinity_from_input: bool = True

    @staticmethod
    def create(
        channels: int,
        rng: Rng,
        ssm_expand: int = 2,
        d_state: int = 16,
        conv_kernel: int = 3,
        vsss_ffn_ratio: int = 3,
        outer_ffn_ratio: int = 2,
        cam_reduction: int = 4,
        use_skip: bool = True,
        affinity_from_input: bool = True,
        dtype=np.float32,
    ) -> "GroupMambaLayerParams":
        if channels % 4 != 0:
            raise ValueError(f"channel count {channels} not divisible by 4")
        c = channels // 4
        groups = [
            VsssParams.create(
                c, rng.split(f"group{g}"), ssm_expand, d_state, conv_kernel,
                vsss_ffn_ratio, use_skip, dtype,
            )
            for g in range(4)
        ]
        return GroupMambaLayerParams(
            channels=channels,
            groups=groups,
            cam=CamParams.create(channels, rng.split("cam"), cam_reduction, dtype),
            norm=LayerNormParams.create(channels, dtype),
            ffn=FfnParams.create(channels, outer_ffn_ratio * channels, rng.split("ffn"), dtype),
            affinity_from_input=affinity_from_input,
        )

    def params(self, prefix: str = ""):
        for g, vp in enumerate(self.groups):
            yield from vp.params(prefix + f"group{g}.")
        yield from self.cam.params(prefix + "cam.")
        yield from self.norm.params(prefix + "norm.")
        yield from self.ffn.params(prefix + "ffn.")


def grouped_mamba(x: Tensor, groups: list[VsssParams]) -> Tensor:
    """Split channels four ways, scan each group in its direction, rejoin.

    Group g takes contiguous channels [g*C/4, (g+1)*C/4); its grid is
    flattened by GROUP_DIRECTIONS[g], mixed by the group's VSSS block, and
    restored to grid order before concatenation in original channel order.
    """
    if x.ndim != 4:
        raise ShapeError(f"grouped_mamba expects (B, H, W, C), got {x.shape}")
    b, h, w, c_total = x.shape
    if c_total % 4 != 0:
        raise ShapeError(f"channel count {c_total} not divisible by 4")
    c = c_total // 4
    outs = []
    for g, direction in enumerate(GROUP_DIRECTIONS):
        perm = scan_permutation(direction, h, w)
        xg = reshape(narrow(x, 3, g * c, c), (b, h * w, c))
        seq = permute_tokens(xg, perm.forward)
        seq = vsss_forward(seq, groups[g])
        seq = permute_tokens(seq, perm.inverse)
        outs.append(reshape(seq, (b, h, w, c)))
    return concat(outs, axis=3)


def modulated_group_mamba(x: Tensor, p: GroupMambaLayerParams) -> Tensor:
    """Grouped scan, affinity recalibration, then the outer FFN residual.

    The affinity is computed from the layer input by default; setting
    `affinity_from_input=False` derives it from the grouped output instead
    (the alternative reading of the recalibration step).
    """
    if x.shape[-1] != p.channels:
        raise ShapeError(f"input channels {x.shape[-1]} != layer channels {p.channels}")
    x_gm = grouped_mamba(x, p.groups)
    aff_src = x if p.affinity_from_input else x_gm
    x_cam = cam_modulate(x_gm, affinity(aff_src, p.cam))
    return x + ffn(layer_norm(x_cam, p.norm.gamma, p.norm.beta, p.norm.eps), p.ffn)
