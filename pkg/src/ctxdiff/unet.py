"""Denoising UNet with cross-attention over the conditioning sequence.

The network follows the familiar downsample / mid / upsample layout with
skip concatenation.  Every attention site runs three residual sub-layers:
self-attention over spatial positions, cross-attention whose keys and values
come from the 24-token conditioning sequence (8 text + 16 projected vision
tokens), and a feed-forward block.  All residual branches end in a
zero-initialized projection, so a freshly built network computes exactly the
identity in those branches -- the same trick that makes the control branch a
no-op at initialization.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .conditioning import DEFAULT_VOCAB
from .errors import ConfigError, ShapeError, UsageError
from .params import ParameterTree, he_normal, xavier_normal
from .rng import SeededRng
from .tensor import Tensor

# --------------------------------------------------------------------------- #
# configuration
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    in_channels: int = 3
    base_channels: int = 32
    channel_mults: tuple[int, ...] = (1, 2, 4)
    blocks_per_level: int = 2
    attention_levels: tuple[int, ...] = (1, 2)
    heads: int = 4
    d_cond: int = 64
    n_text: int = 8
    n_vision: int = 16
    d_vision: int = 48
    patch: int = 8
    k_max: int = 3
    timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    norm_groups: int = 8
    time_embed_mult: int = 4
    vocab: tuple[str, ...] = field(default=DEFAULT_VOCAB)
    # ablation switches (0/1 ints so they serialize like every other field):
    # context images may carry extra channels (e.g. a derived map stacked onto
    # each context), and context features may be summed into the query stem
    # instead of entering through cross-attention.
    context_channels: int = 3
    context_to_query: int = 0

    @property
    def levels(self) -> int:
        return len(self.channel_mults)

    @property
    def time_embed_dim(self) -> int:
        return self.base_channels * self.time_embed_mult

    @property
    def cond_len(self) -> int:
        return self.n_text + self.n_vision

    def level_channels(self) -> list[int]:
        return [self.base_channels * m for m in self.channel_mults]

    def validate(self) -> None:
        if self.levels < 1:
            raise ConfigError("at least one resolution level required")
        if self.blocks_per_level < 1:
            raise ConfigError("blocks_per_level must be >= 1")
        down = 2 ** (self.levels - 1)
        if self.image_size % down != 0:
            raise ConfigError(f"image size {self.image_size} not divisible by 2^{self.levels - 1}")
        if self.image_size % self.patch != 0:
            raise ConfigError(f"image size {self.image_size} not divisible by patch {self.patch}")
        if (self.image_size // self.patch) ** 2 != self.n_vision:
            raise ConfigError(f"n_vision {self.n_vision} inconsistent with image "
                              f"{self.image_size} and patch {self.patch}")
        if any(l < 0 or l >= self.levels for l in self.attention_levels):
            raise ConfigError(f"attention levels {self.attention_levels} outside "
                              f"0..{self.levels - 1}")
        for ch in self.level_channels():
            if ch % self.norm_groups != 0:
                raise ConfigError(f"channel width {ch} not divisible by "
                                  f"{self.norm_groups} norm groups")
            if ch % self.heads != 0:
                raise ConfigError(f"channel width {ch} not divisible by {self.heads} heads")
        if self.base_channels % 2 != 0:
            raise ConfigError("base_channels must be even (sinusoidal embedding width)")
        if self.timesteps < 1:
            raise ConfigError("timesteps must be >= 1")
        if not (0.0 < self.beta_start < self.beta_end < 1.0):
            raise ConfigError(f"beta range ({self.beta_start}, {self.beta_end}) invalid")
        if self.k_max < 1:
            raise ConfigError("k_max must be >= 1")
        if len(self.vocab) < 2:
            raise ConfigError("vocabulary must contain <pad> plus at least one word")
        if self.context_channels < 1:
            raise ConfigError("context_channels must be >= 1")
        if self.context_to_query not in (0, 1):
            raise ConfigError("context_to_query must be 0 or 1")
        if self.context_to_query and self.patch & (self.patch - 1):
            raise ConfigError("context_to_query needs a power-of-two patch size "
                              "(token grid is upsampled by repeated doubling)")

    def control_tap_shapes(self, batch: int) -> list[tuple[int, int, int, int]]:
        """Expected (B, C, H, W) of each injected residual: skips then mid."""
        shapes = []
        s = self.image_size
        chans = self.level_channels()
        ch = chans[0]
        shapes.append((batch, ch, s, s))  # stem
        for lvl in range(self.levels):
            ch = chans[lvl]
            for _ in range(self.blocks_per_level):
                shapes.append((batch, ch, s, s))
            if lvl < self.levels - 1:
                s //= 2
                shapes.append((batch, ch, s, s))
        shapes.append((batch, ch, s, s))  # mid
        return shapes


PRESETS = {
    "default": ModelConfig(),
    "small": ModelConfig(base_channels=16, channel_mults=(1, 2), attention_levels=(1,)),
}


# --------------------------------------------------------------------------- #
# timestep embedding
# --------------------------------------------------------------------------- #


def timestep_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal features of an integer timestep (or a batch of them).

    Returns (dim,) for a scalar, (B, dim) for an array.  t = 0 gives zeros in
    the sine half and ones in the cosine half.
    """
    if dim % 2 != 0:
        raise UsageError(f"sinusoidal embedding width must be even, got {dim}")
    tv = np.asarray(t, dtype=np.float64)
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half, dtype=np.float64) / half)
    angles = tv[..., None] * freqs
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=-1).astype(np.float32)


class TimeEmbed:
    """Sinusoid -> 2-layer SiLU MLP; validates the timestep range."""

    def __init__(self, tree: ParameterTree, cfg: ModelConfig, rng: SeededRng,
                 prefix: str = "time_embed"):
        sin_dim, out_dim = cfg.base_channels, cfg.time_embed_dim
        self.timesteps = cfg.timesteps
        self.sin_dim = sin_dim
        self.w1 = tree.add(f"{prefix}.lin1.weight", xavier_normal(rng, (sin_dim, out_dim), sin_dim))
        self.b1 = tree.add(f"{prefix}.lin1.bias", np.zeros(out_dim, np.float32))
        self.w2 = tree.add(f"{prefix}.lin2.weight", xavier_normal(rng, (out_dim, out_dim), out_dim))
        self.b2 = tree.add(f"{prefix}.lin2.bias", np.zeros(out_dim, np.float32))

    def __call__(self, t) -> Tensor:
        tv = np.atleast_1d(np.asarray(t))
        if tv.dtype.kind not in "iu":
            raise UsageError(f"timesteps must be integers, got dtype {tv.dtype}")
        if tv.min() < 0 or tv.max() >= self.timesteps:
            raise UsageError(f"timestep out of range [0, {self.timesteps}): "
                             f"{int(tv.min())}..{int(tv.max())}")
        sin = Tensor(timestep_embedding(tv, self.sin_dim))
        return ops.linear(ops.silu(ops.linear(sin, self.w1, self.b1)), self.w2, self.b2)


# --------------------------------------------------------------------------- #
# building blocks
# --------------------------------------------------------------------------- #


class ResBlock:
    """GN -> SiLU -> conv, add time embedding, GN -> SiLU -> conv, skip add.

    The second conv is zero-initialized so the block starts as its skip path.
    """

    def __init__(self, tree, prefix, cin, cout, emb_dim, groups, rng):
        self.groups = groups
        self.cin, self.cout = cin, cout
        self.g1 = tree.add(f"{prefix}.gn1.gamma", np.ones(cin, np.float32))
        self.b1 = tree.add(f"{prefix}.gn1.beta", np.zeros(cin, np.float32))
        self.w1 = tree.add(f"{prefix}.conv1.weight", he_normal(rng, (cout, cin, 3, 3), cin * 9))
        self.c1b = tree.add(f"{prefix}.conv1.bias", np.zeros(cout, np.float32))
        self.ew = tree.add(f"{prefix}.emb.weight", xavier_normal(rng, (emb_dim, cout), emb_dim))
        self.eb = tree.add(f"{prefix}.emb.bias", np.zeros(cout, np.float32))
        self.g2 = tree.add(f"{prefix}.gn2.gamma", np.ones(cout, np.float32))
        self.b2 = tree.add(f"{prefix}.gn2.beta", np.zeros(cout, np.float32))
        self.w2 = tree.add(f"{prefix}.conv2.weight", np.zeros((cout, cout, 3, 3), np.float32))
        self.c2b = tree.add(f"{prefix}.conv2.bias", np.zeros(cout, np.float32))
        if cin != cout:
            self.sw = tree.add(f"{prefix}.skip.weight", he_normal(rng, (cout, cin, 1, 1), cin))
            self.sb = tree.add(f"{prefix}.skip.bias", np.zeros(cout, np.float32))
        else:
            self.sw = self.sb = None

    def __call__(self, x: Tensor, emb: Tensor) -> Tensor:
        h = ops.conv2d(ops.silu(ops.group_norm(x, self.g1, self.b1, self.groups)),
                       self.w1, self.c1b, padding=1)
        e = ops.linear(ops.silu(emb), self.ew, self.eb)
        h = h + ops.reshape(e, (e.shape[0], self.cout, 1, 1))
        h = ops.conv2d(ops.silu(ops.group_norm(h, self.g2, self.b2, self.groups)),
                       self.w2, self.c2b, padding=1)
        skip = x if self.sw is None else ops.conv2d(x, self.sw, self.sb)
        return h + skip


def _split_heads(x: Tensor, heads: int) -> Tensor:
    B, L, C = x.shape
    return ops.transpose(ops.reshape(x, (B, L, heads, C // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    B, h, L, dh = x.shape
    return ops.reshape(ops.transpose(x, (0, 2, 1, 3)), (B, L, h * dh))


class CrossAttention:
    """Residual multi-head attention sub-layer with pre-layer-norm.

    Keys/values come from ``source`` when given (cross-attention over the
    conditioning sequence) or from the input itself (self-attention).  The
    output projection starts at zero: the sub-layer is the identity until
    training moves it.
    """

    def __init__(self, tree, prefix, width, kv_width, heads, rng):
        self.heads = heads
        self.ln_g = tree.add(f"{prefix}.ln.gamma", np.ones(width, np.float32))
        self.ln_b = tree.add(f"{prefix}.ln.beta", np.zeros(width, np.float32))
        self.wq = tree.add(f"{prefix}.q.weight", xavier_normal(rng, (width, width), width))
        self.wk = tree.add(f"{prefix}.k.weight", xavier_normal(rng, (kv_width, width), kv_width))
        self.wv = tree.add(f"{prefix}.v.weight", xavier_normal(rng, (kv_width, width), kv_width))
        self.wo = tree.add(f"{prefix}.out.weight", np.zeros((width, width), np.float32))
        self.bo = tree.add(f"{prefix}.out.bias", np.zeros(width, np.float32))

    def __call__(self, x: Tensor, source: Tensor | None = None) -> Tensor:
        h = ops.layer_norm(x, self.ln_g, self.ln_b)
        kv = h if source is None else source
        q = _split_heads(ops.linear(h, self.wq), self.heads)
        k = _split_heads(ops.linear(kv, self.wk), self.heads)
        v = _split_heads(ops.linear(kv, self.wv), self.heads)
        att = _merge_heads(ops.attention(q, k, v))
        return x + ops.linear(att, self.wo, self.bo)


class TransformerBlock:
    """Self-attention, cross-attention over the conditioning, feed-forward."""

    def __init__(self, tree, prefix, width, d_cond, heads, rng):
        self.attn_self = CrossAttention(tree, f"{prefix}.self", width, width, heads, rng)
        self.attn_cross = CrossAttention(tree, f"{prefix}.cross", width, d_cond, heads, rng)
        self.ln_g = tree.add(f"{prefix}.ff.ln.gamma", np.ones(width, np.float32))
        self.ln_b = tree.add(f"{prefix}.ff.ln.beta", np.zeros(width, np.float32))
        self.w1 = tree.add(f"{prefix}.ff.lin1.weight", xavier_normal(rng, (width, 4 * width), width))
        self.b1 = tree.add(f"{prefix}.ff.lin1.bias", np.zeros(4 * width, np.float32))
        self.w2 = tree.add(f"{prefix}.ff.lin2.weight", np.zeros((4 * width, width), np.float32))
        self.b2 = tree.add(f"{prefix}.ff.lin2.bias", np.zeros(width, np.float32))

    def __call__(self, x: Tensor, cond: Tensor) -> Tensor:
        B, C, H, W = x.shape
        seq = ops.reshape(ops.transpose(x, (0, 2, 3, 1)), (B, H * W, C))
        seq = self.attn_self(seq)
        seq = self.attn_cross(seq, cond)
        h = ops.layer_norm(seq, self.ln_g, self.ln_b)
        seq = seq + ops.linear(ops.silu(ops.linear(h, self.w1, self.b1)), self.w2, self.b2)
        return ops.transpose(ops.reshape(seq, (B, H, W, C)), (0, 3, 1, 2))


class Downsample:
    def __init__(self, tree, prefix, ch, rng):
        self.w = tree.add(f"{prefix}.weight", he_normal(rng, (ch, ch, 3, 3), ch * 9))
        self.b = tree.add(f"{prefix}.bias", np.zeros(ch, np.float32))

    def __call__(self, x):
        return ops.conv2d(x, self.w, self.b, stride=2, padding=1)


class Upsample:
    def __init__(self, tree, prefix, ch, rng):
        self.w = tree.add(f"{prefix}.weight", he_normal(rng, (ch, ch, 3, 3), ch * 9))
        self.b = tree.add(f"{prefix}.bias", np.zeros(ch, np.float32))

    def __call__(self, x):
        return ops.conv2d(ops.upsample_nearest2x(x), self.w, self.b, padding=1)


# --------------------------------------------------------------------------- #
# encoder stack (shared by the backbone and the trainable control copy)
# --------------------------------------------------------------------------- #


class EncoderStack:
    """Stem conv plus the downsampling half; returns all skip features."""

    def __init__(self, tree, prefix, cfg: ModelConfig, rng: SeededRng):
        chans = cfg.level_channels()
        emb_dim = cfg.time_embed_dim
        self.stem_w = tree.add(f"{prefix}.stem.weight",
                               he_normal(rng, (chans[0], cfg.in_channels, 3, 3),
                                         cfg.in_channels * 9))
        self.stem_b = tree.add(f"{prefix}.stem.bias", np.zeros(chans[0], np.float32))
        self.levels: list[list] = []
        self.downs: list[Downsample | None] = []
        ch = chans[0]
        for lvl in range(cfg.levels):
            blocks = []
            for b in range(cfg.blocks_per_level):
                res = ResBlock(tree, f"{prefix}.enc.{lvl}.{b}.res", ch, chans[lvl],
                               emb_dim, cfg.norm_groups, rng)
                ch = chans[lvl]
                attn = None
                if lvl in cfg.attention_levels:
                    attn = TransformerBlock(tree, f"{prefix}.enc.{lvl}.{b}.attn",
                                            ch, cfg.d_cond, cfg.heads, rng)
                blocks.append((res, attn))
            self.levels.append(blocks)
            self.downs.append(Downsample(tree, f"{prefix}.enc.{lvl}.down", ch, rng)
                              if lvl < cfg.levels - 1 else None)

    def stem(self, z: Tensor) -> Tensor:
        return ops.conv2d(z, self.stem_w, self.stem_b, padding=1)

    def walk(self, h: Tensor, emb: Tensor, cond: Tensor) -> tuple[Tensor, list[Tensor]]:
        """Run the encoder from the stem output; returns (deepest, taps)."""
        taps = [h]
        for blocks, down in zip(self.levels, self.downs):
            for res, attn in blocks:
                h = res(h, emb)
                if attn is not None:
                    h = attn(h, cond)
                taps.append(h)
            if down is not None:
                h = down(h)
                taps.append(h)
        return h, taps


# --------------------------------------------------------------------------- #
# full UNet
# --------------------------------------------------------------------------- #


class UNet:
    """Backbone: encoder stack, mid block, skip-concatenating decoder."""

    def __init__(self, tree: ParameterTree, cfg: ModelConfig, rng: SeededRng,
                 prefix: str = "backbone"):
        cfg.validate()
        self.cfg = cfg
        chans = cfg.level_channels()
        emb_dim = cfg.time_embed_dim
        self.encoder = EncoderStack(tree, prefix, cfg, rng)

        ch = chans[-1]
        self.mid_res1 = ResBlock(tree, f"{prefix}.mid.res1", ch, ch, emb_dim,
                                 cfg.norm_groups, rng)
        self.mid_attn = TransformerBlock(tree, f"{prefix}.mid.attn", ch, cfg.d_cond,
                                         cfg.heads, rng)
        self.mid_res2 = ResBlock(tree, f"{prefix}.mid.res2", ch, ch, emb_dim,
                                 cfg.norm_groups, rng)

        # decoder: blocks_per_level + 1 blocks per level, each eats one skip
        self.dec_levels: list[list] = []
        self.ups: list[Upsample | None] = []
        skip_chans = self._skip_channels()
        for lvl in reversed(range(cfg.levels)):
            blocks = []
            for b in range(cfg.blocks_per_level + 1):
                cin = ch + skip_chans.pop()
                res = ResBlock(tree, f"{prefix}.dec.{lvl}.{b}.res", cin, chans[lvl],
                               emb_dim, cfg.norm_groups, rng)
                ch = chans[lvl]
                attn = None
                if lvl in cfg.attention_levels:
                    attn = TransformerBlock(tree, f"{prefix}.dec.{lvl}.{b}.attn",
                                            ch, cfg.d_cond, cfg.heads, rng)
                blocks.append((res, attn))
            self.dec_levels.append(blocks)
            self.ups.append(Upsample(tree, f"{prefix}.dec.{lvl}.up", ch, rng)
                            if lvl > 0 else None)

        self.out_g = tree.add(f"{prefix}.out.gn.gamma", np.ones(chans[0], np.float32))
        self.out_b = tree.add(f"{prefix}.out.gn.beta", np.zeros(chans[0], np.float32))
        self.out_w = tree.add(f"{prefix}.out.conv.weight",
                              np.zeros((cfg.in_channels, chans[0], 3, 3), np.float32))
        self.out_cb = tree.add(f"{prefix}.out.conv.bias", np.zeros(cfg.in_channels, np.float32))

    def _skip_channels(self) -> list[int]:
        cfg = self.cfg
        chans = cfg.level_channels()
        out = [chans[0]]
        for lvl in range(cfg.levels):
            out.extend([chans[lvl]] * cfg.blocks_per_level)
            if lvl < cfg.levels - 1:
                out.append(chans[lvl])
        return out

    def _check_control(self, control, batch):
        expected = self.cfg.control_tap_shapes(batch)
        if len(control) != len(expected):
            raise ShapeError(f"expected {len(expected)} control residuals "
                             f"(skips + mid), got {len(control)}")
        for i, (r, exp) in enumerate(zip(control, expected)):
            if tuple(r.shape) != exp:
                where = "mid-block" if i == len(expected) - 1 else f"skip {i}"
                raise ShapeError(f"control residual at {where}: expected shape {exp}, "
                                 f"got {tuple(r.shape)}")

    def forward(self, z: Tensor, emb: Tensor, cond: Tensor,
                control: list[Tensor] | None = None) -> Tensor:
        cfg = self.cfg
        if z.ndim != 4 or z.shape[1:] != (cfg.in_channels, cfg.image_size, cfg.image_size):
            raise ShapeError(f"unet input must be (B, {cfg.in_channels}, {cfg.image_size}, "
                             f"{cfg.image_size}), got {z.shape}")
        if cond.ndim != 3 or cond.shape[1:] != (cfg.cond_len, cfg.d_cond):
            raise ShapeError(f"conditioning must be (B, {cfg.cond_len}, {cfg.d_cond}), "
                             f"got {cond.shape}")
        if z.shape[0] != cond.shape[0]:
            raise ShapeError(f"batch mismatch: input {z.shape} vs conditioning {cond.shape}")
        if control is not None:
            self._check_control(control, z.shape[0])

        h, taps = self.encoder.walk(self.encoder.stem(z), emb, cond)
        h = self.mid_res1(h, emb)
        h = self.mid_attn(h, cond)
        h = self.mid_res2(h, emb)
        if control is not None:
            h = h + control[-1]
            taps = [t + c for t, c in zip(taps, control[:-1])]

        for blocks, up in zip(self.dec_levels, self.ups):
            for res, attn in blocks:
                h = res(ops.concat([h, taps.pop()], axis=1), emb)
                if attn is not None:
                    h = attn(h, cond)
            if up is not None:
                h = up(h)

        h = ops.silu(ops.group_norm(h, self.out_g, self.out_b, cfg.norm_groups))
        return ops.conv2d(h, self.out_w, self.out_cb, padding=1)
