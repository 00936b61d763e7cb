"""Decoder: attention blocks deep-to-shallow, trilinear upsampling with 1x1x1
channel projection, nested attention fusion against each encoder skip, and a
zero-initialized 1x1x1 head that emits the 3-channel displacement field.

The deepest ``dae_blocks`` stages reuse the dual-attention block; the
remaining ``lka_blocks`` stages use large-kernel attention (gated depthwise /
dilated-depthwise / pointwise convolution).
"""

from __future__ import annotations

from dataclasses import dataclass

from .attention import dual_attention_block, tokens_to_volume, volume_to_tokens
from .encoder import EncoderConfig, FeaturePyramid
from .errors import ConfigError, ShapeError
from .tensor import (
    Tensor,
    conv3d,
    global_pool,
    layernorm,
    matmul,
    reshape,
    same_padding,
    sigmoid,
    softmax,
    upsample_trilinear,
)


@dataclass
class DecoderConfig:
    dae_blocks: int = 2
    lka_blocks: int = 2

    @property
    def stages(self) -> int:
        return self.dae_blocks + self.lka_blocks

    def validate(self, encoder_stages: int | None = None) -> list[str]:
        problems = []
        if self.dae_blocks < 0 or self.lka_blocks < 0:
            problems.append(
                f"block counts must be >= 0, got dae={self.dae_blocks} lka={self.lka_blocks}"
            )
        if encoder_stages is not None and self.stages != encoder_stages:
            problems.append(
                f"dae_blocks + lka_blocks = {self.stages} must equal the "
                f"{encoder_stages} encoder stages"
            )
        return problems


@dataclass
class LkaParams:
    dw_w: Tensor
    dw_b: Tensor
    dwd_w: Tensor
    dwd_b: Tensor
    pw_w: Tensor
    pw_b: Tensor


@dataclass
class FusionParams:
    # global extraction (on the skip): shared projection of avg/max descriptors
    g_w: Tensor
    g_b: Tensor
    # feature extraction (on the decoder stream)
    fe_dw_w: Tensor
    fe_dw_b: Tensor
    fe_pw_w: Tensor
    fe_pw_b: Tensor
    fe_dwd_w: Tensor
    fe_dwd_b: Tensor
    fe_red_w: Tensor
    fe_red_b: Tensor
    # channel layernorm of the merged descriptor
    norm_gamma: Tensor
    norm_beta: Tensor
    # selection softmax conv and the two output projection convs
    sel_w: Tensor
    sel_b: Tensor
    inner_w: Tensor
    inner_b: Tensor
    outer_w: Tensor
    outer_b: Tensor
    kernel: int = 3


@dataclass
class DecoderStageParams:
    kind: str                      # "dae" | "lka"
    block: object                  # DualBlockParams | LkaParams
    proj_w: Tensor | None = None   # 1x1x1 channel projection after upsampling
    proj_b: Tensor | None = None
    fusion: FusionParams | None = None


def lka_block(x: Tensor, p: LkaParams) -> Tensor:
    """x + A(x) * x with A = pointwise(dilated-depthwise(depthwise(x)))."""
    c = x.shape[0]
    a = conv3d(x, p.dw_w, p.dw_b, padding=(same_padding(3),) * 3, groups=c)
    a = conv3d(a, p.dwd_w, p.dwd_b, padding=(same_padding(3, 2),) * 3, dilation=2, groups=c)
    a = conv3d(a, p.pw_w, p.pw_b)
    return x + a * x


def global_extract(x: Tensor, p: FusionParams) -> Tensor:
    """Per-channel avg and max descriptors through one shared projection, summed.

    Returns [C, 1, 1, 1], ready to broadcast over space.
    """
    c = x.shape[0]
    avg = reshape(global_pool(x, "avg"), (1, c))
    mx = reshape(global_pool(x, "max"), (1, c))
    proj = (matmul(avg, p.g_w) + p.g_b) + (matmul(mx, p.g_w) + p.g_b)
    return reshape(proj, (c, 1, 1, 1))


def feature_extract(x: Tensor, p: FusionParams) -> Tensor:
    """Depthwise -> pointwise -> dilated depthwise -> 1x1x1 reduction, extent-preserving."""
    c = x.shape[0]
    k = p.kernel
    out = conv3d(x, p.fe_dw_w, p.fe_dw_b, padding=(same_padding(k),) * 3, groups=c)
    out = conv3d(out, p.fe_pw_w, p.fe_pw_b)
    out = conv3d(out, p.fe_dwd_w, p.fe_dwd_b, padding=(same_padding(k, 2),) * 3, dilation=2, groups=c)
    out = conv3d(out, p.fe_red_w, p.fe_red_b)
    return out


def nested_attention_fusion(x1: Tensor, x2: Tensor, p: FusionParams) -> Tensor:
    """Fuse decoder features x1 with the encoder skip x2 (equal shapes).

    A channel-softmax selection map modulates both streams residually, the
    streams gate each other through sigmoids, and the result is projected and
    re-gated against x1 — so a zero x1 yields zero output (zero biases).
    """
    if x1.shape != x2.shape:
        raise ShapeError(f"fusion inputs must match, got {x1.shape} vs {x2.shape}")
    u = feature_extract(x1, p) + global_extract(x2, p)
    u = layernorm(u, p.norm_gamma, p.norm_beta, axis=0)
    sm = softmax(conv3d(u, p.sel_w, p.sel_b), axis=0)
    x1s = sm * x1 + x1
    x2s = sm * x2 + x2
    mutual = (x1s * sigmoid(x2s)) * (x2s * sigmoid(x1s))
    gate = sigmoid(conv3d(mutual, p.inner_w, p.inner_b))
    return conv3d(gate * x1, p.outer_w, p.outer_b)


@dataclass
class DecoderHeadParams:
    w: Tensor
    b: Tensor


def decoder_forward(
    pyramid: FeaturePyramid,
    enc_cfg: EncoderConfig,
    dec_cfg: DecoderConfig,
    stages: list,
    head: DecoderHeadParams,
) -> Tensor:
    """Consume the pyramid deep-to-shallow and emit the [3, D, H, W] field."""
    n = len(pyramid)
    if dec_cfg.stages != n:
        raise ConfigError(
            f"decoder has {dec_cfg.stages} attention stages but the pyramid has {n}"
        )
    if len(stages) != n:
        raise ConfigError(f"decoder got {len(stages)} parameter sets for {n} stages")
    x = pyramid[n - 1]
    for i, sp in enumerate(stages):
        if sp.kind == "dae":
            spatial = x.shape[1:]
            tokens = dual_attention_block(volume_to_tokens(x), spatial, sp.block)
            x = tokens_to_volume(tokens, spatial)
        elif sp.kind == "lka":
            x = lka_block(x, sp.block)
        else:
            raise ConfigError(f"unknown decoder stage kind {sp.kind!r}")
        stage_idx = n - 1 - i  # encoder stage this decoder stage sits on
        x = upsample_trilinear(x, enc_cfg.strides[stage_idx])
        if stage_idx > 0:
            x = conv3d(x, sp.proj_w, sp.proj_b)
            x = nested_attention_fusion(x, pyramid[stage_idx - 1], sp.fusion)
    return conv3d(x, head.w, head.b)
