"""Four-stage hierarchical backbone with exact parameter/MAC accounting.

The stem halves resolution twice (two 3x3 stride-2 convolutions), so stage
i runs at (H / 2^(i+1), W / 2^(i+1)). Stages are stacks of modulated group
mamba layers joined by 3x3 stride-2 downsampling convolutions; the head is
global average pool -> LayerNorm -> linear.

`count_params` and `count_flops` are closed-form: they recompute the exact
integer totals from the configuration alone, and the test suite pins them
against brute-force buffer enumeration and an instrumented forward pass.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass, asdict, replace

import numpy as np

from .rng import Rng
from .layers import (
    Conv2dParams,
    FfnParams,
    GroupMambaLayerParams,
    LayerNormParams,
    conv,
    gelu,
    layer_norm,
    matmul,
    modulated_group_mamba,
)
from .tensor import Tensor, ShapeError, parameter, tmean

CHECKPOINT_MAGIC = b"GMBA"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    stage_dims: tuple[int, int, int, int]
    stage_depths: tuple[int, int, int, int]
    stem_mid_dim: int
    num_classes: int
    d_state: int = 16
    ssm_expand: int = 2
    conv_kernel: int = 3
    vsss_ffn_ratio: int = 3
    outer_ffn_ratio: int = 2
    cam_reduction: int = 4
    use_skip: bool = True
    affinity_from_input: bool = True

    def __post_init__(self):
        if len(self.stage_dims) != 4 or len(self.stage_depths) != 4:
            raise ValueError("exactly four stages required")
        for c in self.stage_dims:
            if c % 4 != 0:
                raise ValueError(f"stage dim {c} not divisible by 4")
        for d in self.stage_depths:
            if d < 1:
                raise ValueError("stage depths must be >= 1")

    def to_json(self) -> str:
        d = asdict(self)
        d["stage_dims"] = list(self.stage_dims)
        d["stage_depths"] = list(self.stage_depths)
        return json.dumps(d, sort_keys=True, separators=(",", ":"))

    @staticmethod
    def from_json(s: str) -> "ModelConfig":
        d = json.loads(s)
        d["stage_dims"] = tuple(d["stage_dims"])
        d["stage_depths"] = tuple(d["stage_depths"])
        return ModelConfig(**d)


def micro_config(num_classes: int = 10) -> ModelConfig:
    """Desk-scale variant exercising every layer type at CI speed."""
    return ModelConfig((16, 32, 64, 128), (1, 1, 2, 1), 8, num_classes)


def tiny_config(num_classes: int = 1000) -> ModelConfig:
    return ModelConfig((96, 192, 368, 760), (2, 2, 9, 2), 32, num_classes)


def small_config(num_classes: int = 1000) -> ModelConfig:
    return ModelConfig((96, 192, 384, 768), (2, 2, 20, 2), 64, num_classes)


def base_config(num_classes: int = 1000) -> ModelConfig:
    return ModelConfig((128, 256, 496, 1012), (2, 2, 20, 2), 64, num_classes)


VARIANTS = {
    "micro": micro_config,
    "tiny": tiny_config,
    "small": small_config,
    "base": base_config,
}


@dataclass
class GroupMambaModel:
    config: ModelConfig
    stem_conv1: Conv2dParams
    stem_norm1: LayerNormParams
    stem_conv2: Conv2dParams
    stem_norm2: LayerNormParams
    stages: list[list[GroupMambaLayerParams]]
    down_convs: list[Conv2dParams]
    down_norms: list[LayerNormParams]
    head_norm: LayerNormParams
    head_w: Tensor
    head_b: Tensor

    def named_params(self):
        """All parameter buffers in fixed traversal order."""
        yield from self.stem_conv1.params("stem.conv1.")
        yield from self.stem_norm1.params("stem.norm1.")
        yield from self.stem_conv2.params("stem.conv2.")
        yield from self.stem_norm2.params("stem.norm2.")
        for i, stage in enumerate(self.stages):
            for j, layer in enumerate(stage):
                yield from layer.params(f"stage{i}.block{j}.")
            if i < len(self.down_convs):
                yield from self.down_convs[i].params(f"down{i}.conv.")
                yield from self.down_norms[i].params(f"down{i}.norm.")
        yield from self.head_norm.params("head.norm.")
        yield "head.w", self.head_w
        yield "head.b", self.head_b

    def param_count(self) -> int:
        return sum(int(t.size) for _, t in self.named_params())


def build(config: ModelConfig, rng: Rng, dtype=np.float32) -> GroupMambaModel:
    """Construct and initialize a model; deterministic for a given rng seed."""
    dims = config.stage_dims
    stem1 = Conv2dParams.create(3, 3, 3, config.stem_mid_dim, rng.split("stem1"),
                                stride=2, padding=1, dtype=dtype)
    stem2 = Conv2dParams.create(3, 3, config.stem_mid_dim, dims[0], rng.split("stem2"),
                                stride=2, padding=1, dtype=dtype)
    stages = []
    for i, (dim, depth) in enumerate(zip(dims, config.stage_depths)):
        stage = [
            GroupMambaLayerParams.create(
                dim,
                rng.split(f"stage{i}.block{j}"),
                ssm_expand=config.ssm_expand,
                d_state=config.d_state,
                conv_kernel=config.conv_kernel,
                vsss_ffn_ratio=config.vsss_ffn_ratio,
                outer_ffn_ratio=config.outer_ffn_ratio,
                cam_reduction=config.cam_reduction,
                use_skip=config.use_skip,
                affinity_from_input=config.affinity_from_input,
                dtype=dtype,
            )
            for j in range(depth)
        ]
        stages.append(stage)
    down_convs = [
        Conv2dParams.create(3, 3, dims[i], dims[i + 1], rng.split(f"down{i}"),
                            stride=2, padding=1, dtype=dtype)
        for i in range(3)
    ]
    down_norms = [LayerNormParams.create(dims[i + 1], dtype) for i in range(3)]
    return GroupMambaModel(
        config=config,
        stem_conv1=stem1,
        stem_norm1=LayerNormParams.create(config.stem_mid_dim, dtype),
        stem_conv2=stem2,
        stem_norm2=LayerNormParams.create(dims[0], dtype),
        stages=stages,
        down_convs=down_convs,
        down_norms=down_norms,
        head_norm=LayerNormParams.create(dims[3], dtype),
        head_w=parameter(rng.split("head").truncated_normal((dims[3], config.num_classes)),
                         "head.w", dtype),
        head_b=parameter(np.zeros(config.num_classes), "head.b", dtype),
    )


def forward(model: GroupMambaModel, images) -> Tensor:
    """Images (B, H, W, 3) with H, W divisible by 32 -> logits (B, classes)."""
    x = images if isinstance(images, Tensor) else Tensor(
        np.asarray(images, dtype=model.head_w.dtype)
    )
    if x.ndim != 4 or x.shape[3] != 3:
        raise ShapeError(f"expected (B, H, W, 3) images, got {x.shape}")
    if x.shape[1] % 32 != 0 or x.shape[2] % 32 != 0 or x.shape[1] < 32 or x.shape[2] < 32:
        raise ShapeError(f"resolution {x.shape[1]}x{x.shape[2]} not divisible by 32")
    if x.dtype != model.head_w.dtype:
        x = Tensor(x.data.astype(model.head_w.dtype))

    x = gelu(layer_norm(conv(x, model.stem_conv1), model.stem_norm1.gamma,
                        model.stem_norm1.beta, model.stem_norm1.eps))
    x = gelu(layer_norm(conv(x, model.stem_conv2), model.stem_norm2.gamma,
                        model.stem_norm2.beta, model.stem_norm2.eps))
    for i, stage in enumerate(model.stages):
        for layer in stage:
            x = modulated_group_mamba(x, layer)
        if i < len(model.down_convs):
            x = layer_norm(conv(x, model.down_convs[i]), model.down_norms[i].gamma,
                           model.down_norms[i].beta, model.down_norms[i].eps)
    pooled = tmean(x, axis=(1, 2))
    pooled = layer_norm(pooled, model.head_norm.gamma, model.head_norm.beta,
                        model.head_norm.eps)
    return matmul(pooled, model.head_w) + model.head_b


# -- closed-form accounting ---------------------------------------------------


def _ln_p(d: int) -> int:
    return 2 * d


def _ffn_p(d: int, hidden: int) -> int:
    return d * hidden + hidden + hidden * d + d


def _conv_p(kh: int, kw: int, cin: int, cout: int) -> int:
    return kh * kw * cin * cout + cout


def _ssm_p(d: int, cfg: ModelConfig) -> int:
    n = cfg.d_state
    r = max(1, math.ceil(d / 16))
    total = d * n + d * 2 * n + d * r + r * d + d
    if cfg.use_skip:
        total += d
    return total


def _vsss_p(c: int, cfg: ModelConfig) -> int:
    de = cfg.ssm_expand * c
    mamba = c * 2 * de + de * cfg.conv_kernel + de + _ssm_p(de, cfg) + de * c
    return 2 * _ln_p(c) + mamba + _ffn_p(c, cfg.vsss_ffn_ratio * c)


def _cam_p(channels: int, cfg: ModelConfig) -> int:
    hidden = max(1, channels // cfg.cam_reduction)
    return channels * hidden + hidden + hidden * channels + channels


def layer_param_count(channels: int, cfg: ModelConfig) -> int:
    """Parameters of one modulated group mamba layer at width `channels`."""
    c = channels // 4
    return (
        4 * _vsss_p(c, cfg)
        + _cam_p(channels, cfg)
        + _ln_p(channels)
        + _ffn_p(channels, cfg.outer_ffn_ratio * channels)
    )


def count_params(config: ModelConfig) -> dict:
    """Exact scalar-parameter count, independent of input resolution."""
    dims = config.stage_dims
    stem = (
        _conv_p(3, 3, 3, config.stem_mid_dim)
        + _ln_p(config.stem_mid_dim)
        + _conv_p(3, 3, config.stem_mid_dim, dims[0])
        + _ln_p(dims[0])
    )
    stages = [
        depth * layer_param_count(dim, config)
        for dim, depth in zip(dims, config.stage_depths)
    ]
    downs = sum(_conv_p(3, 3, dims[i], dims[i + 1]) + _ln_p(dims[i + 1]) for i in range(3))
    head = _ln_p(dims[3]) + dims[3] * config.num_classes + config.num_classes
    total = stem + sum(stages) + downs + head
    return {
        "stem": stem,
        "stages": stages,
        "downsamplers": downs,
        "head": head,
        "total": total,
    }


def _vsss_macs(l: int, c: int, cfg: ModelConfig) -> int:
    """MACs of one VSSS block on an L-token sequence (batch 1).

    Mirrors the op sequence of `vsss_forward` under the counting rules in
    `tensor`: matmuls, the depthwise conv, the fused scan, layer norms, the
    gate/skip elementwise products, and the 1/n scalings of softplus means
    are all accounted; activations count zero.
    """
    de = cfg.ssm_expand * c
    n = cfg.d_state
    r = max(1, math.ceil(de / 16))
    macs = 3 * l * c                        # norm1
    macs += l * c * 2 * de                  # in-projection
    macs += l * cfg.conv_kernel * de        # depthwise conv
    macs += l * de * 2 * n                  # B_t, C_t projection
    macs += l * de * r + l * r * de         # low-rank step-size projection
    macs += 6 * l * de * n                  # fused scan recurrence
    if cfg.use_skip:
        macs += l * de                      # feedthrough product
    macs += l * de                          # gate product
    macs += l * de * c                      # out-projection
    macs += 3 * l * c                       # norm2
    macs += 2 * l * c * (cfg.vsss_ffn_ratio * c)  # FFN
    return macs


def layer_macs(l: int, channels: int, cfg: ModelConfig) -> int:
    """MACs of one modulated group mamba layer on an H*W = L token grid."""
    c = channels // 4
    hidden = max(1, channels // cfg.cam_reduction)
    macs = 4 * _vsss_macs(l, c, cfg)
    macs += channels                         # channel_stat mean scaling
    macs += channels * hidden + hidden * channels  # affinity projections
    macs += l * channels                     # modulation product
    macs += 3 * l * channels                 # outer norm
    macs += 2 * l * channels * (cfg.outer_ffn_ratio * channels)  # outer FFN
    return macs


def stage_resolutions(h: int, w: int) -> list[tuple[int, int]]:
    """Feature-map size per stage: the stem divides by 4, then each
    downsampler halves, so stage i runs at (h / 2^(i+1), w / 2^(i+1))."""
    return [(h >> (i + 2), w >> (i + 2)) for i in range(4)]


def count_flops(config: ModelConfig, h: int, w: int) -> dict:
    """Analytic MAC count of a single-image forward pass at h x w.

    Returns MACs and FLOPs (= 2 * MACs) separately. The total matches an
    instrumented forward pass exactly under the op counting rules.
    """
    if h % 32 != 0 or w % 32 != 0:
        raise ShapeError(f"resolution {h}x{w} not divisible by 32")
    dims = config.stage_dims
    h2, w2 = h // 2, w // 2
    resolutions = stage_resolutions(h, w)
    h4, w4 = resolutions[0]
    stem = h2 * w2 * 9 * 3 * config.stem_mid_dim + 3 * h2 * w2 * config.stem_mid_dim
    stem += h4 * w4 * 9 * config.stem_mid_dim * dims[0] + 3 * h4 * w4 * dims[0]
    stages = []
    downs = 0
    for i, (dim, depth) in enumerate(zip(dims, config.stage_depths)):
        l = resolutions[i][0] * resolutions[i][1]
        stages.append(depth * layer_macs(l, dim, config))
        if i < 3:
            nh, nw = resolutions[i + 1]
            downs += nh * nw * 9 * dim * dims[i + 1]
            downs += 3 * nh * nw * dims[i + 1]
    head = dims[3] + 3 * dims[3] + dims[3] * config.num_classes
    macs = stem + sum(stages) + downs + head
    return {
        "stem": stem,
        "stages": stages,
        "downsamplers": downs,
        "head": head,
        "macs": macs,
        "flops": 2 * macs,
    }


# -- checkpoint container ------------------------------------------------------


def save_checkpoint(model: GroupMambaModel, path: str) -> None:
    """Write magic, version, config JSON, then named buffers in order.

    All lengths are 64-bit little-endian; buffers are raw little-endian
    floats in C order. Reload is bit-exact.
    """
    names = list(model.named_params())
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        cfg = model.config.to_json().encode("utf-8")
        f.write(struct.pack("<Q", len(cfg)))
        f.write(cfg)
        f.write(struct.pack("<Q", len(names)))
        for name, t in names:
            nb = name.encode("utf-8")
            f.write(struct.pack("<Q", len(nb)))
            f.write(nb)
            arr = np.ascontiguousarray(t.data)
            le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            f.write(struct.pack("<B", arr.dtype.itemsize))
            f.write(struct.pack("<Q", le.nbytes))
            f.write(le.tobytes())


class CheckpointError(ValueError):
    pass


def load_checkpoint(path: str) -> GroupMambaModel:
    with open(path, "rb") as f:
        raw = f.read()
    buf = io.BytesIO(raw)
    if buf.read(4) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    (version,) = struct.unpack("<I", buf.read(4))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    (cfg_len,) = struct.unpack("<Q", buf.read(8))
    config = ModelConfig.from_json(buf.read(cfg_len).decode("utf-8"))
    (n_buffers,) = struct.unpack("<Q", buf.read(8))

    entries = []
    for _ in range(n_buffers):
        (name_len,) = struct.unpack("<Q", buf.read(8))
        name = buf.read(name_len).decode("utf-8")
        (itemsize,) = struct.unpack("<B", buf.read(1))
        (nbytes,) = struct.unpack("<Q", buf.read(8))
        entries.append((name, itemsize, buf.read(nbytes)))
    if buf.read(1):
        raise CheckpointError(f"{path}: trailing bytes")

    dtype = {4: np.float32, 8: np.float64}[entries[0][1]]
    model = build(config, Rng(0), dtype=dtype)
    named = list(model.named_params())
    if len(named) != len(entries):
        raise CheckpointError(
            f"{path}: {len(entries)} buffers for a model with {len(named)}"
        )
    for (name, t), (saved_name, itemsize, payload) in zip(named, entries):
        if name != saved_name:
            raise CheckpointError(f"{path}: buffer order mismatch at {saved_name!r}")
        want = {4: np.dtype("<f4"), 8: np.dtype("<f8")}[itemsize]
        arr = np.frombuffer(payload, dtype=want).astype(dtype).reshape(t.shape)
        t.data = arr.copy()
    return model
