"""The prompted contextual transformer.

An hourglass of five stages (two encoder stages, a bottleneck, two decoder
stages). Every stage runs two pathways side by side: the source pathway
carries the image being restored and the context pathway carries the
incomplete/full phantom pair. Pathways meet only inside the contextual
mixer, and each pathway is modulated by its own view-aware prompts.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from .autograd import (
    RngState,
    ShapeError,
    Tensor,
    concat,
    fft2,
    ifft2,
    matmul,
    pad2d,
    real_part,
    relu,
    rescaled_layer_norm,
    softmax,
    window_merge,
    window_partition,
)
from .autograd.tensor import add, mul, reshape, transpose
from .nn import Conv2d, ConvTranspose2d, MLP, Module, parameter
from .prompting import StagePrompts, ViewPrompter, encode_prompts, modulate, zero_prompts

N_STAGES = 5


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    embed_dims: tuple = (24, 48, 96, 48, 24)
    n_blocks: tuple = (8, 8, 8, 4, 4)
    n_heads: tuple = (2, 4, 6, 1, 1)
    window: int = 8
    mlp_ratios: tuple = (2.0, 4.0, 4.0, 2.0, 2.0)
    attn_ratios: tuple = (0.0, 0.5, 1.0, 0.0, 0.0)
    n_full_views: int = 720
    in_channels: int = 1
    context_channels: int = 2
    prompt_hidden: tuple = (128, 64)

    def __post_init__(self):
        for f in ("embed_dims", "n_blocks", "n_heads", "mlp_ratios", "attn_ratios", "prompt_hidden"):
            object.__setattr__(self, f, tuple(getattr(self, f)))
        self.validate()

    def validate(self) -> None:
        for name in ("embed_dims", "n_blocks", "n_heads", "mlp_ratios", "attn_ratios"):
            if len(getattr(self, name)) != N_STAGES:
                raise ConfigError(f"{name} needs {N_STAGES} entries, got {len(getattr(self, name))}")
        if min(self.embed_dims) < 1 or min(self.n_blocks) < 1 or self.window < 1:
            raise ConfigError("dims, block counts and window must be positive")
        for s in range(N_STAGES):
            r = self.attn_ratios[s]
            if not 0.0 <= r <= 1.0:
                raise ConfigError(f"attention ratio {r} of stage {s} outside [0, 1]")
            if self.n_attention(s) and self.embed_dims[s] % self.n_heads[s]:
                raise ConfigError(f"stage {s}: {self.n_heads[s]} heads do not divide dim {self.embed_dims[s]}")

    def n_attention(self, stage: int) -> int:
        """Attention sits in the last ceil(ratio * n) blocks of a stage."""
        return math.ceil(self.attn_ratios[stage] * self.n_blocks[stage] - 1e-9)

    def has_attention(self, stage: int, block: int) -> bool:
        return block >= self.n_blocks[stage] - self.n_attention(stage)

    def to_text(self) -> str:
        lines = []
        for key, value in asdict(self).items():
            if isinstance(value, (tuple, list)):
                value = ",".join(repr(float(x)) if isinstance(x, float) else str(x) for x in value)
            lines.append(f"{key}={value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        kinds = {f.name: f.default for f in fields(cls)}
        values = {}
        for line in text.strip().splitlines():
            key, _, raw = line.partition("=")
            key = key.strip()
            if key not in kinds:
                raise ConfigError(f"unknown model config key {key!r}")
            default = kinds[key]
            if isinstance(default, tuple):
                cast = float if isinstance(default[0], float) else int
                values[key] = tuple(cast(x) for x in raw.split(","))
            else:
                values[key] = int(raw)
        return cls(**values)


def full_config() -> ModelConfig:
    return ModelConfig()


def desk_config(n_full_views: int = 720) -> ModelConfig:
    return ModelConfig(
        embed_dims=(8, 16, 32, 16, 8),
        n_blocks=(2, 2, 2, 1, 1),
        n_heads=(1, 2, 4, 1, 1),
        window=8,
        mlp_ratios=(2.0, 4.0, 4.0, 2.0, 2.0),
        attn_ratios=(0.0, 0.5, 1.0, 0.0, 0.0),
        n_full_views=n_full_views,
    )


# -- layers -------------------------------------------------------------------
class RescaledNorm(Module):
    """Layer norm that also hands back a rescale/rebias derived from the input statistics."""

    def __init__(self, rng, dim: int, dtype=np.float32):
        self.weight = parameter(np.ones(dim, dtype))
        self.bias = parameter(np.zeros(dim, dtype))
        self.meta1 = Conv2d(rng, 1, dim, dtype=dtype)
        self.meta2 = Conv2d(rng, 1, dim, dtype=dtype)
        self.meta1.bias.data[:] = 1.0

    def forward(self, x: Tensor):
        normed, mu, std = rescaled_layer_norm(x)
        c = x.shape[1]
        out = add(mul(normed, reshape(self.weight, (1, c, 1, 1))), reshape(self.bias, (1, c, 1, 1)))
        return out, self.meta1(std), self.meta2(mu)


class ContextualMixer(Module):
    """Windowed self-attention on the source plus a spatial/frequency interaction branch."""

    def __init__(self, rng, dim: int, heads: int, window: int, attention: bool, dtype=np.float32):
        self.dim, self.heads, self.window, self.attention = dim, heads, window, attention
        if attention:
            self.qk = Conv2d(rng, dim, 2 * dim, dtype=dtype)
        self.v = Conv2d(rng, dim, dim, dtype=dtype)
        self.v_ctx = Conv2d(rng, dim, dim, dtype=dtype)
        self.spat_dw = Conv2d(rng, 2 * dim, 2 * dim, kernel=3, groups=2 * dim, dtype=dtype)
        self.spat_pw = Conv2d(rng, 2 * dim, dim, dtype=dtype)
        # 1x1 convolutions acting on stacked real/imaginary spectra
        self.freq_in = Conv2d(rng, 4 * dim, 4 * dim, dtype=dtype)
        self.freq_out = Conv2d(rng, 4 * dim, 2 * dim, dtype=dtype)
        self.conv_src = Conv2d(rng, dim, dim, dtype=dtype)
        self.conv_ctx = Conv2d(rng, dim, dim, dtype=dtype)
        self.proj = Conv2d(rng, dim, dim, dtype=dtype)

    def frequency(self, vv: Tensor) -> Tensor:
        n, c2, h, w = vv.shape
        spec = fft2(vv)  # [N, 2C, H, W, 2]
        spec = reshape(transpose(spec, (0, 4, 1, 2, 3)), (n, 2 * c2, h, w))
        spec = self.freq_out(relu(self.freq_in(spec)))
        spec = transpose(reshape(spec, (n, 2, c2 // 2, h, w)), (0, 2, 3, 4, 1))
        return real_part(ifft2(spec))

    def attend(self, f: Tensor, v: Tensor) -> Tensor:
        n, c, h, w = f.shape
        win = min(self.window, h, w)
        qk = self.qk(f)
        q, k = qk[:, :c], qk[:, c:]
        heads, d = self.heads, c // self.heads

        def split(t):
            t = window_partition(t, win)  # [B, T, C]
            b, tokens, _ = t.shape
            return transpose(reshape(t, (b, tokens, heads, d)), (0, 2, 1, 3))

        qw, kw, vw = split(q), split(k), split(v)
        scores = mul(matmul(qw, transpose(kw, (0, 1, 3, 2))), 1.0 / math.sqrt(d))
        out = matmul(softmax(scores, axis=-1), vw)  # [B, heads, T, d]
        b, _, tokens, _ = out.shape
        out = reshape(transpose(out, (0, 2, 1, 3)), (b, tokens, c))
        return window_merge(out, win, f.shape)

    def forward(self, f: Tensor, f_ctx: Tensor):
        if f.shape != f_ctx.shape:
            raise ShapeError(f"pathway shapes differ: {f.shape} vs {f_ctx.shape}")
        v = self.v(f)
        vv = concat([v, self.v_ctx(f_ctx)], axis=1)
        mixed = add(self.spat_pw(self.spat_dw(vv)), self.frequency(vv))
        g_intr = relu(self.conv_src(mixed))
        g_ctx = relu(self.conv_ctx(mixed))
        if self.attention:
            g_intr = add(self.attend(f, v), g_intr)
        return self.proj(g_intr), g_ctx


class Block(Module):
    def __init__(self, rng, dim: int, heads: int, window: int, mlp_ratio: float, attention: bool, dtype=np.float32):
        self.norm1 = RescaledNorm(rng, dim, dtype)
        self.norm1_ctx = RescaledNorm(rng, dim, dtype)
        self.mixer = ContextualMixer(rng, dim, heads, window, attention, dtype)
        self.norm2 = RescaledNorm(rng, dim, dtype)
        self.norm2_ctx = RescaledNorm(rng, dim, dtype)
        self.mlp = MLP(rng, dim, mlp_ratio, dtype)
        self.mlp_ctx = MLP(rng, dim, mlp_ratio, dtype)

    def forward(self, h: Tensor, h_ctx: Tensor, p: Tensor, p_ctx: Tensor):
        return block_forward(self, h, h_ctx, p, p_ctx)


def block_forward(block: Block, h: Tensor, h_ctx: Tensor, p: Tensor, p_ctx: Tensor):
    n, scale, shift = block.norm1(h)
    n_ctx, scale_ctx, shift_ctx = block.norm1_ctx(h_ctx)
    g, g_ctx = block.mixer(n, n_ctx)
    h = modulate(h, p, add(mul(g, scale), shift))
    h_ctx = modulate(h_ctx, p_ctx, add(mul(g_ctx, scale_ctx), shift_ctx))

    n, scale, shift = block.norm2(h)
    h = modulate(h, p, add(mul(block.mlp(n), scale), shift))
    n_ctx, scale_ctx, shift_ctx = block.norm2_ctx(h_ctx)
    h_ctx = modulate(h_ctx, p_ctx, add(mul(block.mlp_ctx(n_ctx), scale_ctx), shift_ctx))
    return h, h_ctx


def contextual_mixer(f: Tensor, f_ctx: Tensor, mixer: ContextualMixer):
    return mixer(f, f_ctx)


class Pathway(Module):
    """Per-pathway embedding and resampling layers."""

    def __init__(self, rng, in_channels: int, dims, dtype=np.float32):
        self.embed = Conv2d(rng, in_channels, dims[0], kernel=3, dtype=dtype)
        self.down = [
            Conv2d(rng, dims[0], dims[1], kernel=2, stride=2, padding=0, dtype=dtype),
            Conv2d(rng, dims[1], dims[2], kernel=2, stride=2, padding=0, dtype=dtype),
        ]
        self.up = [ConvTranspose2d(rng, dims[2], dims[3], dtype=dtype), ConvTranspose2d(rng, dims[3], dims[4], dtype=dtype)]
        self.skip = [Conv2d(rng, dims[1], dims[3], dtype=dtype), Conv2d(rng, dims[0], dims[4], dtype=dtype)]


class ProCT(Module):
    def __init__(self, config: ModelConfig, rng, dtype=np.float32):
        self.config = config
        dims = config.embed_dims
        self.prompter = ViewPrompter(rng, config.n_full_views, dims, config.prompt_hidden, dtype=dtype)
        self.prompter_ctx = ViewPrompter(rng, config.n_full_views, dims, config.prompt_hidden, dtype=dtype)
        self.source = Pathway(rng, config.in_channels, dims, dtype)
        self.context = Pathway(rng, config.context_channels, dims, dtype)
        self.stages = [
            [
                Block(rng, dims[s], config.n_heads[s], config.window, config.mlp_ratios[s], config.has_attention(s, b), dtype)
                for b in range(config.n_blocks[s])
            ]
            for s in range(N_STAGES)
        ]
        self.unembed = Conv2d(rng, dims[4], config.in_channels, kernel=3, bias=False, dtype=dtype)

    @property
    def dtype(self):
        return self.unembed.weight.dtype

    def prompts(self, v) -> tuple[StagePrompts, StagePrompts]:
        return encode_prompts(self.prompter, v), encode_prompts(self.prompter_ctx, v)

    def forward(self, x, context, v=None, prompts=None) -> Tensor:
        return forward(self, x, context, v, prompts)


def _stage(model: ProCT, s: int, h, h_ctx, p, p_ctx):
    for block in model.stages[s]:
        h, h_ctx = block(h, h_ctx, p[s], p_ctx[s])
    return h, h_ctx


def forward(model: ProCT, x, context, v=None, prompts=None) -> Tensor:
    """Restore ``x`` [N,1,H,W] given the context pair [N,2,H,W] and view vector ``v``.

    ``prompts`` overrides the prompters with an explicit ``(source, context)`` pair.
    """
    x = x if isinstance(x, Tensor) else Tensor(x, dtype=model.dtype)
    context = context if isinstance(context, Tensor) else Tensor(context, dtype=model.dtype)
    if x.ndim != 4 or context.ndim != 4 or x.shape[2:] != context.shape[2:] or x.shape[0] != context.shape[0]:
        raise ShapeError(f"source {x.shape} and context {context.shape} must be [N,C,H,W] of equal size")
    if x.shape[1] != model.config.in_channels or context.shape[1] != model.config.context_channels:
        raise ShapeError(f"expected {model.config.in_channels}+{model.config.context_channels} channels")
    if prompts is None:
        if v is None:
            raise ValueError("either a sampling vector or explicit prompts is required")
        prompts = model.prompts(v)
    p, p_ctx = prompts

    H, W = x.shape[2:]
    ph, pw = (-H) % 4, (-W) % 4
    xin = pad2d(x, (0, ph, 0, pw), "reflect") if ph or pw else x
    cin = pad2d(context, (0, ph, 0, pw), "reflect") if ph or pw else context

    src, ctx = model.source, model.context
    h, h_ctx = src.embed(xin), ctx.embed(cin)
    h, h_ctx = _stage(model, 0, h, h_ctx, p, p_ctx)
    skips = [(h, h_ctx)]
    h, h_ctx = src.down[0](h), ctx.down[0](h_ctx)
    h, h_ctx = _stage(model, 1, h, h_ctx, p, p_ctx)
    skips.append((h, h_ctx))
    h, h_ctx = src.down[1](h), ctx.down[1](h_ctx)
    h, h_ctx = _stage(model, 2, h, h_ctx, p, p_ctx)
    for i, s in enumerate((3, 4)):
        skip, skip_ctx = skips[1 - i]
        h = add(src.up[i](h), src.skip[i](skip))
        h_ctx = add(ctx.up[i](h_ctx), ctx.skip[i](skip_ctx))
        h, h_ctx = _stage(model, s, h, h_ctx, p, p_ctx)

    last = p[4]
    residual = model.unembed(mul(reshape(last, (last.shape[0], last.shape[1], 1, 1)), h))
    if ph or pw:
        residual = residual[:, :, :H, :W]
    return add(x, residual)


def init_model(config: ModelConfig, rng=0, dtype=np.float32) -> ProCT:
    """Build a model; the same seed always yields identical parameter bytes."""
    if isinstance(rng, (int, np.integer)):
        rng = RngState(int(rng))
    if isinstance(rng, RngState):
        rng = rng.child("proct").generator()
    return ProCT(config, rng, dtype)


def count_params(model: Module) -> int:
    return int(sum(p.size for p in model.parameters()))


def zeroed_prompts(model: ProCT, batch: int = 1):
    dims = model.config.embed_dims
    return zero_prompts(dims, batch, model.dtype), zero_prompts(dims, batch, model.dtype)
