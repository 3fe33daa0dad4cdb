"""Grouping-efficiency study: grouped layer vs full-width 4-direction layer.

The baseline applies one VSSS-style block to all C channels and runs the
scan once per direction with direction-specific state-space parameters,
summing the four results (the conventional multi-direction design). The
grouped layer instead gives each direction a quarter of the channels. At
equal C the grouped layer does roughly a quarter of the scan work and a
fraction of the projection work, so it has strictly fewer parameters and
should not be slower; this module measures both.
"""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass

import numpy as np

from .layers import (
    FfnParams,
    GroupMambaLayerParams,
    LayerNormParams,
    ScanDirection,
    GROUP_DIRECTIONS,
    ffn,
    grouped_mamba,
    layer_norm,
    scan_permutation,
)
from .rng import Rng
from .ssm import SsmParams, selective_scan
from .tensor import Tensor, dwconv1d, matmul, mul, narrow, no_grad, parameter, permute_tokens, reshape, silu


@dataclass
class FullWidthLayerParams:
    """Single full-C VSSS block whose scan runs in all four directions."""

    channels: int
    d_expand: int
    norm1: LayerNormParams
    in_proj: Tensor
    conv_w: Tensor
    conv_b: Tensor
    ssm_dirs: list[SsmParams]
    out_proj: Tensor
    norm2: LayerNormParams
    ffn: FfnParams

    @staticmethod
    def create(
        channels: int,
        rng: Rng,
        ssm_expand: int = 2,
        d_state: int = 16,
        conv_kernel: int = 3,
        ffn_ratio: int = 3,
        use_skip: bool = True,
        dtype=np.float32,
    ) -> "FullWidthLayerParams":
        de = ssm_expand * channels
        return FullWidthLayerParams(
            channels=channels,
            d_expand=de,
            norm1=LayerNormParams.create(channels, dtype),
            in_proj=parameter(rng.split("in").truncated_normal((channels, 2 * de)), "in_proj", dtype),
            conv_w=parameter(rng.split("conv").truncated_normal((de, conv_kernel)), "conv_w", dtype),
            conv_b=parameter(np.zeros(de), "conv_b", dtype),
            ssm_dirs=[
                SsmParams.create(de, d_state, rng.split(f"ssm{d}"), use_skip, dtype)
                for d in range(4)
            ],
            out_proj=parameter(rng.split("out").truncated_normal((de, channels)), "out_proj", dtype),
            norm2=LayerNormParams.create(channels, dtype),
            ffn=FfnParams.create(channels, ffn_ratio * channels, rng.split("ffn"), dtype),
        )

    def params(self, prefix: str = ""):
        yield from self.norm1.params(prefix + "norm1.")
        yield prefix + "in_proj", self.in_proj
        yield prefix + "conv_w", self.conv_w
        yield prefix + "conv_b", self.conv_b
        for d, p in enumerate(self.ssm_dirs):
            yield from p.params(prefix + f"ssm{d}.")
        yield prefix + "out_proj", self.out_proj
        yield from self.norm2.params(prefix + "norm2.")
        yield from self.ffn.params(prefix + "ffn.")

    def param_count(self) -> int:
        return sum(int(t.size) for _, t in self.params())


def full_width_forward(x: Tensor, p: FullWidthLayerParams) -> Tensor:
    """Token/channel mixing with one full-width scan per direction."""
    b, h, w, c = x.shape
    seq = reshape(x, (b, h * w, c))
    z = layer_norm(seq, p.norm1.gamma, p.norm1.beta, p.norm1.eps)
    xz = matmul(z, p.in_proj)
    content = narrow(xz, 2, 0, p.d_expand)
    gate = narrow(xz, 2, p.d_expand, p.d_expand)
    content = silu(dwconv1d(content, p.conv_w, p.conv_b))
    mixed = None
    for direction, ssm in zip(GROUP_DIRECTIONS, p.ssm_dirs):
        perm = scan_permutation(direction, h, w)
        y = permute_tokens(selective_scan(permute_tokens(content, perm.forward), ssm), perm.inverse)
        mixed = y if mixed is None else mixed + y
    seq = seq + matmul(mul(mixed, silu(gate)), p.out_proj)
    seq = seq + ffn(layer_norm(seq, p.norm2.gamma, p.norm2.beta, p.norm2.eps), p.ffn)
    return reshape(seq, (b, h, w, c))


def grouped_layer_param_count(layer: GroupMambaLayerParams) -> int:
    """Buffers of the grouped mixer alone (the comparable part)."""
    return sum(int(t.size) for g in layer.groups for _, t in g.params())


def _time_forward(fn, reps: int, warmup: int) -> list[float]:
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return times


def bench_grouping(
    channels: int = 64,
    h: int = 16,
    w: int = 16,
    batch: int = 16,
    reps: int = 5,
    warmup: int = 3,
    seed: int = 0,
) -> dict:
    """Median forward throughput and parameters for both designs."""
    if reps < 3 or warmup < 3:
        raise ValueError("reps and warmup must both be >= 3")
    rng = Rng(seed)
    grouped = GroupMambaLayerParams.create(channels, rng.split("grouped"))
    full = FullWidthLayerParams.create(channels, rng.split("full"))
    x = Tensor(rng.split("x").normal((batch, h, w, channels), std=1.0).astype(np.float32))

    # Both counts cover a complete token/channel mixer at width C: the four
    # quarter-width VSSS blocks (with their norms and FFNs) against the one
    # full-width block (with its norms and FFN).
    grouped_params = grouped_layer_param_count(grouped)
    full_params = full.param_count()

    with no_grad():
        g_times = _time_forward(lambda: grouped_mamba(x, grouped.groups), reps, warmup)
        f_times = _time_forward(lambda: full_width_forward(x, full), reps, warmup)

    g_med = statistics.median(g_times)
    f_med = statistics.median(f_times)
    return {
        "channels": channels,
        "resolution": [h, w],
        "batch": batch,
        "reps": reps,
        "grouped_params": grouped_params,
        "full_params": full_params,
        "grouped_samples_per_s": batch / g_med,
        "full_samples_per_s": batch / f_med,
        "throughput_ratio": f_med / g_med,
        "grouped_times_s": g_times,
        "full_times_s": f_times,
    }
