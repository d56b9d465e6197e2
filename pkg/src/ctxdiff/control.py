"""Query-image control branch: trainable encoder copy plus zero convolutions.

The layout-defining query image never enters the backbone directly.  A small
conv stem embeds it, the result is added to a *trainable copy* of the
backbone's (frozen) encoder stem output, and the copy's features are tapped
at every skip position plus the deepest point.  Each tap passes through a
1x1 convolution initialized to zero before being added to the corresponding
backbone feature, so at initialization the whole branch contributes exactly
nothing and the denoiser's behavior is untouched.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .errors import ShapeError, UsageError
from .params import ParameterTree, he_normal
from .rng import SeededRng
from .tensor import Tensor
from .unet import EncoderStack, ModelConfig

_HINT_WIDTH = 16


class ControlBranch:
    def __init__(self, tree: ParameterTree, cfg: ModelConfig, rng: SeededRng,
                 prefix: str = "control"):
        self.cfg = cfg
        c0 = cfg.level_channels()[0]

        # hint stem: 3 convs with SiLU between; the last starts at zero so the
        # copy initially sees exactly the backbone stem output
        self.hw1 = tree.add(f"{prefix}.stem.conv1.weight",
                            he_normal(rng, (_HINT_WIDTH, cfg.in_channels, 3, 3),
                                      cfg.in_channels * 9))
        self.hb1 = tree.add(f"{prefix}.stem.conv1.bias", np.zeros(_HINT_WIDTH, np.float32))
        self.hw2 = tree.add(f"{prefix}.stem.conv2.weight",
                            he_normal(rng, (_HINT_WIDTH, _HINT_WIDTH, 3, 3), _HINT_WIDTH * 9))
        self.hb2 = tree.add(f"{prefix}.stem.conv2.bias", np.zeros(_HINT_WIDTH, np.float32))
        self.hw3 = tree.add(f"{prefix}.stem.conv3.weight",
                            np.zeros((c0, _HINT_WIDTH, 3, 3), np.float32))
        self.hb3 = tree.add(f"{prefix}.stem.conv3.bias", np.zeros(c0, np.float32))

        # trainable copy of the backbone encoder; weights are overwritten with
        # the backbone values right after construction (see model assembly)
        self.copy = EncoderStack(tree, f"{prefix}.copy", cfg, rng)

        # one zero conv per tap, plus one for the deepest (mid) feature
        self.zeros = []
        for i, shape in enumerate(cfg.control_tap_shapes(1)):
            ch = shape[1]
            w = tree.add(f"{prefix}.zero.{i}.weight", np.zeros((ch, ch, 1, 1), np.float32))
            b = tree.add(f"{prefix}.zero.{i}.bias", np.zeros(ch, np.float32))
            self.zeros.append((w, b))

    def embed_query(self, q: Tensor) -> Tensor:
        h = ops.silu(ops.conv2d(q, self.hw1, self.hb1, padding=1))
        h = ops.silu(ops.conv2d(h, self.hw2, self.hb2, padding=1))
        return ops.conv2d(h, self.hw3, self.hb3, padding=1)

    def forward(self, q: Tensor, z: Tensor, emb: Tensor, cond: Tensor,
                inject: Tensor | None = None) -> list[Tensor]:
        """Residuals to inject: one per encoder skip, then the mid residual.

        ``inject`` is an optional extra stem-space feature map (context
        summed into the query pathway instead of cross-attention).
        """
        cfg = self.cfg
        if q.shape != z.shape:
            raise ShapeError(f"query image shape {q.shape} != denoiser input {z.shape}")
        if q.ndim != 4 or q.shape[1:] != (cfg.in_channels, cfg.image_size, cfg.image_size):
            raise ShapeError(f"query image must be (B, {cfg.in_channels}, "
                             f"{cfg.image_size}, {cfg.image_size}), got {q.shape}")
        h = self.copy.stem(z) + self.embed_query(q)
        if inject is not None:
            if inject.shape != h.shape:
                raise ShapeError(f"stem injection shape {inject.shape} != stem {h.shape}")
            h = h + inject
        deepest, taps = self.copy.walk(h, emb, cond)
        feats = taps + [deepest]
        if len(feats) != len(self.zeros):
            raise UsageError(f"control branch produced {len(feats)} taps, "
                             f"expected {len(self.zeros)}")
        return [ops.conv2d(f, w, b) for f, (w, b) in zip(feats, self.zeros)]
