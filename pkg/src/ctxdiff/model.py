"""Model assembly: backbone, control branch, conditioning, freeze policy.

Construction order (and therefore parameter layout and rng consumption) is
fixed: time embedding, backbone, control branch, conditioning projection.
After construction the control copy's weights are overwritten with the
backbone encoder values, and the backbone stem + encoder are frozen -- they
stand in for the pretrained denoiser encoder that stays fixed while the
decoder half, attention conditioning pathway, and control branch train.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .conditioning import ConditioningEncoder, ContextSet
from .control import ControlBranch
from .errors import ShapeError, UsageError
from .params import ParameterTree
from .rng import SeededRng
from .tensor import Tensor
from .unet import ModelConfig, TimeEmbed, UNet

# prefixes used for the freeze audit and training diagnostics
FROZEN_GROUPS = ("text_encoder", "vision_encoder", "backbone.stem", "backbone.enc")
TRAINABLE_GROUPS = ("time_embed", "backbone.mid", "backbone.dec", "backbone.out",
                    "control.stem", "control.copy", "control.zero", "cond.project")
PARAM_GROUPS = FROZEN_GROUPS + TRAINABLE_GROUPS


class ContextDiffusion:
    """Conditional denoiser: eps_hat = f(z_t, t, prompt+context tokens, query)."""

    def __init__(self, cfg: ModelConfig, seed: int):
        cfg.validate()
        self.cfg = cfg
        self.init_seed = int(seed)
        self.tree = ParameterTree()
        rng = SeededRng(seed)

        self.time_embed = TimeEmbed(self.tree, cfg, rng)
        self.unet = UNet(self.tree, cfg, rng, prefix="backbone")
        self.control = ControlBranch(self.tree, cfg, rng, prefix="control")
        self.cond_encoder = ConditioningEncoder(
            self.tree, cfg.vocab,
            d_cond=cfg.d_cond, n_text=cfg.n_text,
            d_vision=cfg.d_vision, n_vision=cfg.n_vision,
            patch=cfg.patch, image_size=cfg.image_size, k_max=cfg.k_max,
            channels=cfg.context_channels, init_rng=rng)

        if cfg.context_to_query:
            # context features bypass cross-attention and are instead summed
            # into the query stem: vision token rows of the conditioning
            # sequence are zeroed for attention, and a learned projection maps
            # them to a spatial map added to the control-branch stem output
            c0 = cfg.level_channels()[0]
            from .params import xavier_normal
            self.inject_w = self.tree.add(
                "cond.inject.weight", xavier_normal(rng, (cfg.d_cond, c0), cfg.d_cond))
            self.inject_b = self.tree.add("cond.inject.bias", np.zeros(c0, np.float32))
            mask = np.ones((1, cfg.cond_len, 1), dtype=np.float32)
            mask[:, cfg.n_text:, :] = 0.0
            self._attn_mask = Tensor(mask)
            select = np.zeros((cfg.n_vision, cfg.cond_len), dtype=np.float32)
            for i in range(cfg.n_vision):
                select[i, cfg.n_text + i] = 1.0
            self._vision_select = Tensor(select)

        self.tree.copy_values("backbone.stem", "control.copy.stem")
        self.tree.copy_values("backbone.enc", "control.copy.enc")
        self.tree.freeze_prefix("backbone.stem")
        self.tree.freeze_prefix("backbone.enc")

    # -- conditioning ---------------------------------------------------------

    def encode_conditioning(self, prompts: list[str], context_sets) -> Tensor:
        """(B, n_text + n_vision, d_cond) sequence for cross-attention."""
        return self.cond_encoder.build(prompts, context_sets)

    def black_context(self) -> ContextSet:
        return ContextSet([], k_max=self.cfg.k_max, image_size=self.cfg.image_size,
                          channels=self.cfg.context_channels)

    # -- forward --------------------------------------------------------------

    def _prepare_query(self, query) -> Tensor:
        q = query.data if isinstance(query, Tensor) else np.asarray(query, dtype=np.float32)
        if q.ndim == 3:
            q = q[None]
        s = self.cfg.image_size
        if q.ndim != 4 or q.shape[1:] != (self.cfg.in_channels, s, s):
            raise ShapeError(f"query image must be (B, {self.cfg.in_channels}, {s}, {s}), "
                             f"got {q.shape}")
        if q.min() < -1e-6 or q.max() > 1.0 + 1e-6:
            raise UsageError(f"query image values must lie in [0, 1], got range "
                             f"[{q.min():.4f}, {q.max():.4f}]")
        return Tensor(q.astype(np.float32) * 2.0 - 1.0)  # match the [-1, 1] pixel space

    def _stem_injection(self, cond: Tensor):
        """Masked conditioning plus a stem-space context map (ablation path).

        Vision token rows are zeroed so cross-attention sees text only; the
        same rows, projected, become a (B, c0, H, W) map added after the
        control stem.
        """
        from . import ops
        masked = ops.mul(cond, self._attn_mask)
        tokens = ops.matmul(self._vision_select, cond)  # (B, n_vision, d_cond)
        feat = ops.linear(tokens, self.inject_w, self.inject_b)
        g = self.cfg.image_size // self.cfg.patch
        feat = ops.reshape(feat, (cond.shape[0], g, g, feat.shape[-1]))
        feat = ops.transpose(feat, (0, 3, 1, 2))
        for _ in range(self.cfg.patch.bit_length() - 1):
            feat = ops.upsample_nearest2x(feat)
        return masked, feat

    def predict_noise(self, z_t, t, cond: Tensor, query=None) -> Tensor:
        """Noise estimate for z_t at timestep t; query drives the control branch."""
        z = z_t if isinstance(z_t, Tensor) else Tensor(z_t)
        emb = self.time_embed(t)
        inject = None
        if self.cfg.context_to_query:
            cond, inject = self._stem_injection(cond)
        control = None
        if query is not None:
            q = self._prepare_query(query)
            if q.shape[0] != z.shape[0]:
                raise ShapeError(f"query batch {q.shape} != input batch {z.shape}")
            control = self.control.forward(q, z, emb, cond, inject)
        return self.unet.forward(z, emb, cond, control)

    # -- bookkeeping ------------------------------------------------------------

    @property
    def parameter_count(self) -> int:
        return self.tree.total_parameters()

    def group_fingerprints(self) -> dict[str, str]:
        """sha256 of each parameter group's concatenated values."""
        out = {}
        for g in PARAM_GROUPS:
            h = hashlib.sha256()
            for name, t in self.tree.group(g):
                h.update(name.encode())
                h.update(t.data.tobytes())
            out[g] = h.hexdigest()
        return out

    def frozen_fingerprint(self) -> str:
        h = hashlib.sha256()
        for name, t in self.tree.frozen():
            h.update(name.encode())
            h.update(t.data.tobytes())
        return h.hexdigest()
