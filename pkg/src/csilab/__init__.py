"""csilab: a self-contained lab for deep-learning CSI feedback.

Implements the CRNet multi-resolution autoencoder and the CsiNet baseline
on top of a minimal reverse-mode autodiff core, together with the
angular-delay channel pipeline, warm-up cosine training, NMSE evaluation,
and an exact per-layer flops auditor.
"""

from .autograd import (
    Tensor,
    Tape,
    add,
    backward,
    concat_channels,
    grad_check,
    leaky_relu,
    matmul,
    mse_loss,
    mul,
    no_grad,
    permute,
    reshape,
    sigmoid,
    tensor_sum,
)
from .layers import BatchNorm2d, Conv2d, Linear, layer_flops, xavier_init
from .channel import (
    ChannelDataset,
    GeneratorParams,
    NormSpec,
    compute_norm,
    denormalize_images,
    dft_transform,
    generate_channels,
    inverse_dft,
    load_dataset,
    nmse,
    normalize_channels,
    save_dataset,
    truncate,
    zero_fill,
)
from .models import (
    CRNET_KIND,
    CSINET_KIND,
    ModelConfig,
    crnet_build,
    csinet_build,
    model_flops,
    parse_ratio,
)
from .training import (
    Adam,
    Checkpoint,
    CurveLog,
    TrainConfig,
    evaluate,
    load_checkpoint,
    lr_at,
    rebuild_model,
    save_checkpoint,
    train,
)

__version__ = "0.1.0"
