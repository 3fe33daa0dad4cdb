"""Grouped four-direction selective-scan vision backbone, desk scale.

Feature maps are (batch, height, width, channel) float tensors on a
minimal numpy autodiff core. The layer stack: zero-order-hold discretized
selective scans, four direction-specialized channel groups, channel
affinity modulation, and a hierarchical four-stage backbone trained with
an optional hard-label distillation objective.
"""

from .rng import Rng
from .tensor import Tensor, count_macs, grad_check, gradients, no_grad, parameter
from .ssm import SsmParams, ode_oracle, selective_scan, zoh_discretize
from .layers import (
    CamParams,
    GroupMambaLayerParams,
    ScanDirection,
    ScanPermutation,
    VsssParams,
    affinity,
    cam_modulate,
    channel_stat,
    grouped_mamba,
    modulated_group_mamba,
    scan_permutation,
    vsss_forward,
)
from .model import (
    GroupMambaModel,
    ModelConfig,
    base_config,
    build,
    count_flops,
    count_params,
    forward,
    load_checkpoint,
    micro_config,
    save_checkpoint,
    small_config,
    tiny_config,
)
from .losses import DistillLossInput, cross_entropy, distilled_loss
from .training import (
    AdamW,
    OptimConfig,
    TrainingDiverged,
    cosine_lr,
    load_teacher_cache,
    save_teacher_cache,
    train,
    train_teacher,
)
from .data import (
    DatasetSpec,
    LabeledImage,
    encode_cifar10,
    read_cifar10,
    split_shuffle,
    synthesize,
)

__version__ = "0.1.0"
