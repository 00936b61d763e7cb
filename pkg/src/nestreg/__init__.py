"""Deformable 3-D image registration on a small numpy autodiff core.

A dual-attention (efficient + channel) transformer encoder feeds a decoder
that mixes dual-attention and large-kernel-attention stages through nested
attention fusion of skip connections; the predicted displacement field warps
the moving volume with a differentiable trilinear resampler, trained end to
end with a windowed-NCC + smoothness composite loss.
"""

from .attention import (
    AttentionParams,
    DualBlockParams,
    LayerNormParams,
    MixFfnParams,
    channel_attention,
    dual_attention_block,
    efficient_attention,
    mix_ffn,
    tokens_to_volume,
    volume_to_tokens,
)
from .decoder import (
    DecoderConfig,
    FusionParams,
    LkaParams,
    feature_extract,
    global_extract,
    lka_block,
    nested_attention_fusion,
)
from .diagnostics import CheckResult, run_gradcheck_suite
from .encoder import EncoderConfig, FeaturePyramid, encoder_forward, overlap_patch_embed
from .errors import (
    ConfigError,
    ContractError,
    EngineError,
    NumericError,
    ShapeError,
    UndefinedMetricError,
    VolumeFormatError,
)
from .gradcheck import check_gradients, gradcheck
from .losses import CompositeLoss, LossConfig, composite_loss, ncc_loss, smoothness_loss
from .metrics import (
    JacobianStats,
    RegistrationReport,
    hd95,
    mask_from_volume,
    sdlogj,
    ssim,
    surface_voxels,
)
from .model import (
    ModelConfig,
    ParamTable,
    RegistrationModel,
    build_model,
    count_params,
    register,
)
from .synth import synth_pair
from .tensor import (
    GradTape,
    Parameter,
    Tensor,
    concat,
    conv3d,
    gelu,
    global_pool,
    layernorm,
    make_op,
    matmul,
    same_padding,
    sigmoid,
    softmax,
    tanh,
    tmean,
    tsum,
    upsample_trilinear,
)
from .train import (
    Checkpoint,
    EpochStats,
    TrainingCurve,
    TrainResult,
    load_checkpoint,
    model_from_checkpoint,
    read_curve_csv,
    save_checkpoint,
    sgd_step,
    split_pairs,
    train,
    write_curve_csv,
)
from .volio import (
    ENGINE_VERSION,
    config_hash,
    field_from_file,
    load_volume,
    save_volume,
    volume_from_file,
    write_report,
)
from .warp import DeformationField, Volume, identity_field, warp_trilinear

__version__ = ENGINE_VERSION

__all__ = [
    "AttentionParams",
    "Checkpoint",
    "CheckResult",
    "CompositeLoss",
    "ConfigError",
    "ContractError",
    "DecoderConfig",
    "DeformationField",
    "DualBlockParams",
    "ENGINE_VERSION",
    "EncoderConfig",
    "EngineError",
    "EpochStats",
    "FeaturePyramid",
    "FusionParams",
    "GradTape",
    "JacobianStats",
    "LayerNormParams",
    "LkaParams",
    "LossConfig",
    "MixFfnParams",
    "ModelConfig",
    "NumericError",
    "Parameter",
    "ParamTable",
    "RegistrationModel",
    "RegistrationReport",
    "ShapeError",
    "Tensor",
    "TrainResult",
    "TrainingCurve",
    "UndefinedMetricError",
    "Volume",
    "VolumeFormatError",
    "build_model",
    "channel_attention",
    "check_gradients",
    "composite_loss",
    "concat",
    "config_hash",
    "conv3d",
    "count_params",
    "dual_attention_block",
    "efficient_attention",
    "encoder_forward",
    "feature_extract",
    "field_from_file",
    "gelu",
    "global_extract",
    "global_pool",
    "gradcheck",
    "hd95",
    "identity_field",
    "layernorm",
    "lka_block",
    "load_checkpoint",
    "load_volume",
    "make_op",
    "mask_from_volume",
    "matmul",
    "mix_ffn",
    "model_from_checkpoint",
    "ncc_loss",
    "nested_attention_fusion",
    "overlap_patch_embed",
    "read_curve_csv",
    "register",
    "run_gradcheck_suite",
    "same_padding",
    "save_checkpoint",
    "save_volume",
    "sdlogj",
    "sgd_step",
    "sigmoid",
    "smoothness_loss",
    "softmax",
    "split_pairs",
    "ssim",
    "surface_voxels",
    "synth_pair",
    "tanh",
    "tmean",
    "tokens_to_volume",
    "train",
    "tsum",
    "upsample_trilinear",
    "volume_from_file",
    "volume_to_tokens",
    "warp_trilinear",
    "write_curve_csv",
    "write_report",
]
