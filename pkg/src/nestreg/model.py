"""Model assembly: configuration, deterministic parameter initialization,
the end-to-end registration network, and parameter accounting.

The registration network concatenates moving and fixed volumes on channels,
encodes them into a feature pyramid, decodes with fusion against the skips,
and emits a dense displacement field from a zero-initialized head — so a
freshly built model computes the identity transform.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .attention import AttentionParams, DualBlockParams, LayerNormParams, MixFfnParams
from .decoder import (
    DecoderConfig,
    DecoderHeadParams,
    DecoderStageParams,
    FusionParams,
    LkaParams,
    decoder_forward,
)
from .encoder import EncoderConfig, EncoderStageParams, PatchEmbedParams, encoder_forward
from .errors import ConfigError, ContractError, ShapeError
from .tensor import DTYPES, Parameter, Tensor, concat
from .losses import LossConfig
from .warp import DeformationField, Volume


@dataclass
class ModelConfig:
    """Everything needed to rebuild a model and its training run."""

    # architecture
    channels: tuple = (8, 16, 32, 64)
    strides: tuple = (4, 2, 2, 2)
    kernels: tuple = (7, 3, 3, 3)
    blocks_per_stage: int = 1
    heads: int = 2
    patch_kernel: int = 3
    use_efficient: bool = True
    use_channel: bool = True
    dae_blocks: int = 2
    lka_blocks: int = 2
    in_channels: int = 2
    # loss
    ncc_window: int = 5
    ncc_eps: float = 1e-5
    smooth_weight: float = 1.0
    # optimizer / training (full-scale reference: lr 1e-4, wd 3e-5, 100 epochs,
    # batch 4). The desk-scale lr sits in the measured stable band of plain SGD
    # on 32^3 synthetic pairs: 0.1 diverges, 0.03 under-converges in 50 epochs.
    lr: float = 0.05
    weight_decay: float = 3e-5
    epochs: int = 50
    batch_size: int = 2
    # numerics
    precision: int = 32
    seed: int = 0
    init_std: float = 0.02

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            in_channels=self.in_channels,
            channels=tuple(self.channels),
            strides=tuple(self.strides),
            kernels=tuple(self.kernels),
            blocks_per_stage=self.blocks_per_stage,
            heads=self.heads,
            ffn_kernel=self.patch_kernel,
            use_efficient=self.use_efficient,
            use_channel=self.use_channel,
        )

    def decoder_config(self) -> DecoderConfig:
        return DecoderConfig(dae_blocks=self.dae_blocks, lka_blocks=self.lka_blocks)

    def loss_config(self) -> LossConfig:
        return LossConfig(
            ncc_window=self.ncc_window,
            ncc_eps=self.ncc_eps,
            smooth_weight=self.smooth_weight,
        )

    def validate(self) -> list[str]:
        problems = self.encoder_config().validate()
        problems += self.decoder_config().validate(encoder_stages=len(self.channels))
        problems += self.loss_config().validate()
        if self.lr <= 0:
            problems.append(f"lr must be positive, got {self.lr}")
        if self.weight_decay < 0:
            problems.append(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.epochs < 1:
            problems.append(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            problems.append(f"batch_size must be >= 1, got {self.batch_size}")
        if self.precision not in DTYPES:
            problems.append(f"precision must be 32 or 64, got {self.precision}")
        if self.init_std <= 0:
            problems.append(f"init_std must be positive, got {self.init_std}")
        return problems

    def validated(self) -> "ModelConfig":
        problems = self.validate()
        if problems:
            raise ConfigError(problems)
        return self

    def to_dict(self) -> dict:
        out = asdict(self)
        for key in ("channels", "strides", "kernels"):
            out[key] = list(out[key])
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError([f"unknown config key {k!r}" for k in unknown])
        kwargs = dict(data)
        for key in ("channels", "strides", "kernels"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)


# ---------------------------------------------------------------------------
# Parameter building
# ---------------------------------------------------------------------------


class _Builder:
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator | None):
        self.cfg = cfg
        self.rng = rng
        self.dtype = DTYPES[cfg.precision]
        self.registry: dict[str, Parameter] = {}

    def _register(self, name: str, data: np.ndarray) -> Parameter:
        if name in self.registry:
            raise ContractError(f"duplicate parameter name {name!r}")
        p = Parameter(np.ascontiguousarray(data, dtype=self.dtype), name=name)
        self.registry[name] = p
        return p

    def weight(self, name: str, shape) -> Parameter:
        """Truncated-normal (resampled beyond ±2σ) weights.

        Convolution kernels [out, in/groups, kd, kh, kw] use a fan-in-scaled
        σ = sqrt(2/fan_in): the decoder's projection/fusion convs sit on
        non-residual paths, and a fixed small σ would shrink features by
        orders of magnitude per stage, silencing the gradient at the head.
        Plain projection matrices (which all live inside residual blocks or
        ahead of a layernorm) use the configured init_std.
        """
        if self.rng is None:
            return self._register(name, np.zeros(shape))
        if len(shape) == 5:
            fan_in = shape[1] * shape[2] * shape[3] * shape[4]
            std = math.sqrt(2.0 / fan_in)
        else:
            std = self.cfg.init_std
        out = self.rng.normal(0.0, std, size=shape)
        bad = np.abs(out) > 2.0 * std
        while bad.any():
            out[bad] = self.rng.normal(0.0, std, size=int(bad.sum()))
            bad = np.abs(out) > 2.0 * std
        return self._register(name, out)

    def zeros(self, name: str, shape) -> Parameter:
        return self._register(name, np.zeros(shape))

    def ones(self, name: str, shape) -> Parameter:
        return self._register(name, np.ones(shape))

    def const(self, name: str, value) -> Parameter:
        return self._register(name, np.asarray(value))

    # -- composite pieces ---------------------------------------------------

    def layernorm(self, prefix: str, width: int) -> LayerNormParams:
        return LayerNormParams(
            gamma=self.ones(f"{prefix}.gamma", (width,)),
            beta=self.zeros(f"{prefix}.beta", (width,)),
        )

    def attention(self, prefix: str, width: int, with_tau: bool) -> AttentionParams:
        heads = self.cfg.heads
        p = AttentionParams(
            wq=self.weight(f"{prefix}.wq", (width, width)),
            wk=self.weight(f"{prefix}.wk", (width, width)),
            wv=self.weight(f"{prefix}.wv", (width, width)),
            wo=self.weight(f"{prefix}.wo", (width, width)),
            heads=heads,
            log_tau=None,
        )
        if with_tau:
            d_head = width // heads
            p.log_tau = self.const(
                f"{prefix}.log_tau", np.full(heads, math.log(math.sqrt(d_head)))
            )
        return p

    def mix_ffn(self, prefix: str, width: int) -> MixFfnParams:
        hidden = 4 * width
        k = self.cfg.patch_kernel
        return MixFfnParams(
            w1=self.weight(f"{prefix}.w1", (width, hidden)),
            b1=self.zeros(f"{prefix}.b1", (hidden,)),
            dw_w=self.weight(f"{prefix}.dw_w", (hidden, 1, k, k, k)),
            dw_b=self.zeros(f"{prefix}.dw_b", (hidden,)),
            w2=self.weight(f"{prefix}.w2", (hidden, width)),
            b2=self.zeros(f"{prefix}.b2", (width,)),
            kernel=k,
        )

    def dual_block(self, prefix: str, width: int) -> DualBlockParams:
        cfg = self.cfg
        return DualBlockParams(
            efficient=self.attention(f"{prefix}.ea", width, with_tau=False)
            if cfg.use_efficient
            else None,
            channel=self.attention(f"{prefix}.ca", width, with_tau=True)
            if cfg.use_channel
            else None,
            ln1=self.layernorm(f"{prefix}.ln1", width),
            ffn1=self.mix_ffn(f"{prefix}.ffn1", width),
            ln2=self.layernorm(f"{prefix}.ln2", width),
            ffn2=self.mix_ffn(f"{prefix}.ffn2", width),
        )

    def lka(self, prefix: str, width: int) -> LkaParams:
        return LkaParams(
            dw_w=self.weight(f"{prefix}.dw_w", (width, 1, 3, 3, 3)),
            dw_b=self.zeros(f"{prefix}.dw_b", (width,)),
            dwd_w=self.weight(f"{prefix}.dwd_w", (width, 1, 3, 3, 3)),
            dwd_b=self.zeros(f"{prefix}.dwd_b", (width,)),
            pw_w=self.weight(f"{prefix}.pw_w", (width, width, 1, 1, 1)),
            pw_b=self.zeros(f"{prefix}.pw_b", (width,)),
        )

    def fusion(self, prefix: str, width: int) -> FusionParams:
        k = self.cfg.patch_kernel
        return FusionParams(
            g_w=self.weight(f"{prefix}.g_w", (width, width)),
            g_b=self.zeros(f"{prefix}.g_b", (width,)),
            fe_dw_w=self.weight(f"{prefix}.fe_dw_w", (width, 1, k, k, k)),
            fe_dw_b=self.zeros(f"{prefix}.fe_dw_b", (width,)),
            fe_pw_w=self.weight(f"{prefix}.fe_pw_w", (width, width, 1, 1, 1)),
            fe_pw_b=self.zeros(f"{prefix}.fe_pw_b", (width,)),
            fe_dwd_w=self.weight(f"{prefix}.fe_dwd_w", (width, 1, k, k, k)),
            fe_dwd_b=self.zeros(f"{prefix}.fe_dwd_b", (width,)),
            fe_red_w=self.weight(f"{prefix}.fe_red_w", (width, width, 1, 1, 1)),
            fe_red_b=self.zeros(f"{prefix}.fe_red_b", (width,)),
            norm_gamma=self.ones(f"{prefix}.norm.gamma", (width,)),
            norm_beta=self.zeros(f"{prefix}.norm.beta", (width,)),
            sel_w=self.weight(f"{prefix}.sel_w", (width, width, 1, 1, 1)),
            sel_b=self.zeros(f"{prefix}.sel_b", (width,)),
            inner_w=self.weight(f"{prefix}.inner_w", (width, width, 1, 1, 1)),
            inner_b=self.zeros(f"{prefix}.inner_b", (width,)),
            outer_w=self.weight(f"{prefix}.outer_w", (width, width, 1, 1, 1)),
            outer_b=self.zeros(f"{prefix}.outer_b", (width,)),
            kernel=k,
        )


def _build(cfg: ModelConfig, rng: np.random.Generator | None):
    b = _Builder(cfg, rng)
    channels = list(cfg.channels)
    n = len(channels)

    enc_stages = []
    prev = cfg.in_channels
    for i, (c, k) in enumerate(zip(channels, cfg.kernels), start=1):
        prefix = f"encoder.stage{i}"
        embed = PatchEmbedParams(
            w=b.weight(f"{prefix}.embed.w", (c, prev, k, k, k)),
            b=b.zeros(f"{prefix}.embed.b", (c,)),
            gamma=b.ones(f"{prefix}.embed.gamma", (c,)),
            beta=b.zeros(f"{prefix}.embed.beta", (c,)),
        )
        blocks = [
            b.dual_block(f"{prefix}.block{j}", c)
            for j in range(1, cfg.blocks_per_stage + 1)
        ]
        enc_stages.append(
            EncoderStageParams(
                embed=embed,
                blocks=blocks,
                out_gamma=b.ones(f"{prefix}.out.gamma", (c,)),
                out_beta=b.zeros(f"{prefix}.out.beta", (c,)),
            )
        )
        prev = c

    dec_stages = []
    dae_seen = lka_seen = 0
    for i in range(cfg.dae_blocks + cfg.lka_blocks):
        stage_idx = n - 1 - i           # encoder stage the block runs on
        width = channels[stage_idx]
        if i < cfg.dae_blocks:
            dae_seen += 1
            prefix = f"decoder.dae{dae_seen}"
            kind, block = "dae", b.dual_block(prefix, width)
        else:
            lka_seen += 1
            prefix = f"decoder.lka{lka_seen}"
            kind, block = "lka", b.lka(prefix, width)
        sp = DecoderStageParams(kind=kind, block=block)
        if stage_idx > 0:
            target = channels[stage_idx - 1]
            sp.proj_w = b.weight(f"decoder.proj{i + 1}.w", (target, width, 1, 1, 1))
            sp.proj_b = b.zeros(f"decoder.proj{i + 1}.b", (target,))
            sp.fusion = b.fusion(f"decoder.fuse{i + 1}", target)
        dec_stages.append(sp)

    head = DecoderHeadParams(
        w=b.zeros("head.w", (3, channels[0], 1, 1, 1)),
        b=b.zeros("head.b", (3,)),
    )
    return enc_stages, dec_stages, head, b.registry


class RegistrationModel:
    """Built parameters plus the forward pass moving x fixed -> field."""

    def __init__(self, config, enc_stages, dec_stages, head, registry):
        self.config = config
        self.enc_stages = enc_stages
        self.dec_stages = dec_stages
        self.head = head
        self.registry = registry

    @property
    def dtype(self):
        return DTYPES[self.config.precision]

    def parameters(self) -> dict[str, Parameter]:
        return self.registry

    @property
    def num_params(self) -> int:
        return sum(p.data.size for p in self.registry.values())

    def _volume_tensor(self, v, what: str) -> Tensor:
        t = v.values if isinstance(v, Volume) else v
        if not isinstance(t, Tensor):
            t = Tensor(t, dtype=self.dtype)
        if t.ndim == 3:
            t = Tensor(t.data[None], requires_grad=t.requires_grad)
        if t.ndim != 4 or t.shape[0] != 1:
            raise ShapeError(f"{what} must be a [1,D,H,W] volume, got {t.shape}")
        if t.dtype != self.dtype:
            raise ShapeError(
                f"{what} dtype {t.dtype.name} != model precision "
                f"{np.dtype(self.dtype).name}; cast explicitly"
            )
        return t

    def forward(self, moving, fixed) -> DeformationField:
        m = self._volume_tensor(moving, "moving")
        f = self._volume_tensor(fixed, "fixed")
        if m.shape != f.shape:
            raise ShapeError(f"moving shape {m.shape} != fixed shape {f.shape}")
        x = concat([m, f], axis=0)
        pyramid = encoder_forward(x, self.config.encoder_config(), self.enc_stages)
        u = decoder_forward(
            pyramid,
            self.config.encoder_config(),
            self.config.decoder_config(),
            self.dec_stages,
            self.head,
        )
        return DeformationField(u)

    # -- state ---------------------------------------------------------------

    def state(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.registry.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = sorted(set(self.registry) - set(state))
        extra = sorted(set(state) - set(self.registry))
        if missing or extra:
            raise ContractError(
                f"checkpoint/model parameter mismatch; missing={missing[:5]} extra={extra[:5]}"
            )
        for name, p in self.registry.items():
            arr = np.asarray(state[name])
            if arr.shape != p.data.shape:
                raise ContractError(
                    f"parameter {name}: checkpoint shape {arr.shape} != model {p.data.shape}"
                )
            p.data = np.ascontiguousarray(arr, dtype=self.dtype)
            p.grad = None


def build_model(cfg: ModelConfig, seed: int | None = None) -> RegistrationModel:
    """Deterministically initialize a model (truncated-normal weights, zero
    biases, zero deformation head, log-tau at log sqrt(d_head))."""
    cfg.validated()
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed if seed is None else seed, 0]))
    return RegistrationModel(cfg, *_build(cfg, rng))


def register(model: RegistrationModel, moving: Volume, fixed: Volume):
    """Predict the field for one pair and evaluate it.

    Returns (field, warped, report); runs without a tape (no gradients).
    """
    from .losses import composite_loss
    from .metrics import RegistrationReport, hd95, mask_from_volume, sdlogj, ssim

    if not isinstance(moving, Volume):
        moving = Volume(values=moving)
    if not isinstance(fixed, Volume):
        fixed = Volume(values=fixed)
    moving = moving.astype(model.config.precision)
    fixed = fixed.astype(model.config.precision)
    field = model.forward(moving, fixed)
    out = composite_loss(fixed, moving, field, model.config.loss_config())
    warped = out.warped
    jac = sdlogj(field)
    report = RegistrationReport(
        ssim_initial=ssim(moving, fixed),
        ssim=ssim(warped, fixed),
        hd95_initial=hd95(mask_from_volume(moving), mask_from_volume(fixed)),
        hd95=hd95(mask_from_volume(warped), mask_from_volume(fixed)),
        sdlogj=jac.sdlogj,
        folding_fraction=jac.nonpositive_fraction,
        ncc=1.0 - out.similarity.item(),
        loss_total=out.total.item(),
        loss_similarity=out.similarity.item(),
        loss_smoothness=out.smoothness.item(),
    )
    report.validate()
    return field, warped, report


# ---------------------------------------------------------------------------
# Parameter accounting
# ---------------------------------------------------------------------------


@dataclass
class ParamTable:
    rows: list = field(default_factory=list)  # (group, count)

    @property
    def total(self) -> int:
        return sum(c for _, c in self.rows)

    def group(self, name: str) -> int:
        for g, c in self.rows:
            if g == name:
                return c
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {"rows": [[g, c] for g, c in self.rows], "total": self.total}

    def render(self) -> str:
        width = max(len(g) for g, _ in self.rows + [("Total", 0)])
        lines = [f"{g:<{width}}  {c:>12,}" for g, c in self.rows]
        lines.append("-" * (width + 14))
        lines.append(f"{'Total':<{width}}  {self.total:>12,}")
        return "\n".join(lines)


def _group_of(name: str) -> str:
    if name.startswith("encoder."):
        return "Encoder"
    if name.startswith("decoder.dae"):
        return "DAE-Former " + name.split(".")[1][3:]
    if name.startswith("decoder.lka"):
        return "LKA-Former " + name.split(".")[1][3:]
    return "Other"


def count_params(cfg: ModelConfig) -> ParamTable:
    """Per-group parameter counts (Encoder / DAE-Former i / LKA-Former i / Other)."""
    cfg.validated()
    _, _, _, registry = _build(cfg, rng=None)
    counts: dict[str, int] = {}
    order: list[str] = []
    for name, p in registry.items():
        g = _group_of(name)
        if g not in counts:
            counts[g] = 0
            order.append(g)
        counts[g] += p.size
    # stable presentation order: Encoder, DAE-Former i, LKA-Former i, Other
    def key(g: str):
        if g == "Encoder":
            return (0, 0)
        if g.startswith("DAE-Former"):
            return (1, int(g.split()[-1]))
        if g.startswith("LKA-Former"):
            return (2, int(g.split()[-1]))
        return (3, 0)

    table = ParamTable(rows=[(g, counts[g]) for g in sorted(order, key=key)])
    return table
