"""Prompt and visual-context encoding.

The conditioning sequence fed to cross-attention is the concatenation of

* 8 text-token embeddings from a frozen lookup-table encoder (stand-in for a
  pretrained text tower; weights are fixed constants, never trained), and
* 16 projected vision tokens: each context image is split into 8x8 patches,
  linearly embedded by a frozen patch encoder, the k per-image token grids
  are summed into one grid, and a single trainable linear projection maps
  them into the text embedding width.

Summation makes the context order-free.  Because float addition is not
associative, the per-image embeddings are summed in a canonical byte order,
which makes permutation invariance exact at the bit level rather than merely
approximate.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import ops
from .errors import DataError, ShapeError, TokenizationError, UsageError
from .params import ParameterTree, xavier_normal
from .rng import SeededRng
from .tensor import Tensor

PAD_TOKEN = "<pad>"

# Closed caption vocabulary; generated datasets write this list next to the
# records so prompts and tokenizer always agree.
DEFAULT_VOCAB = (
    PAD_TOKEN,
    "a", "an", "image", "map", "of", "and", "on", "the", "make",
    "plain", "snowy", "night",
    "black", "gray", "white",
    "red", "green", "blue", "yellow", "cyan", "magenta", "orange", "purple",
    "circle", "square", "triangle",
    "background", "edge", "segmentation", "depth", "canny", "scribble",
    "professional", "detailed", "high-quality",
)

_PUNCT = ",.;:!?"

# fixed constants standing in for pretrained encoder weights; deliberately
# independent of the model seed so every model shares the same frozen towers
_TEXT_TOWER_SEED = 760_001
_VISION_TOWER_SEED = 760_002


def save_vocab(path: str | Path, words=DEFAULT_VOCAB) -> None:
    Path(path).write_text("\n".join(words) + "\n")


def load_vocab(path: str | Path) -> tuple[str, ...]:
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read vocabulary file {path}: {exc}") from exc
    words = [ln.strip() for ln in lines if ln.strip()]
    if not words:
        raise DataError(f"vocabulary file {path} is empty")
    if len(set(words)) != len(words):
        raise DataError(f"vocabulary file {path} contains duplicate tokens")
    if any(" " in w for w in words):
        raise DataError(f"vocabulary file {path} has tokens containing spaces")
    return tuple(words)


def tokenize(prompt: str, vocab=DEFAULT_VOCAB, length: int = 8) -> np.ndarray:
    """Map a prompt to ``length`` token ids; pads with id 0, truncates overflow.

    Words are lowercased and stripped of edge punctuation.  A word outside
    the vocabulary raises :class:`TokenizationError` naming the word.
    """
    if not isinstance(prompt, str):
        raise UsageError(f"prompt must be a string, got {type(prompt).__name__}")
    index = {w: i for i, w in enumerate(vocab)}
    if vocab[0] != PAD_TOKEN:
        raise DataError(f"vocabulary must start with {PAD_TOKEN!r}, got {vocab[0]!r}")
    ids = []
    for raw in prompt.lower().split():
        word = raw.strip(_PUNCT)
        if not word:
            continue
        if word not in index:
            raise TokenizationError(f"word {word!r} is not in the vocabulary")
        ids.append(index[word])
    ids = ids[:length]
    ids += [0] * (length - len(ids))
    return np.asarray(ids, dtype=np.int32)


class ContextSet:
    """Between 0 and k_max context images; empty means k_max black images."""

    def __init__(self, images, k_max: int = 3, image_size: int = 32, channels: int = 3):
        images = list(images)
        if len(images) > k_max:
            raise UsageError(f"ContextSet holds at most {k_max} images, got {len(images)}")
        if not images:
            images = [np.zeros((channels, image_size, image_size), dtype=np.float32)
                      for _ in range(k_max)]
        self.images = [_check_image(im, image_size, channels) for im in images]

    @property
    def k(self) -> int:
        return len(self.images)


def _check_image(img, image_size: int, channels: int = 3) -> np.ndarray:
    img = np.asarray(img)
    if img.shape != (channels, image_size, image_size):
        raise ShapeError(f"context/query image must be ({channels}, {image_size}, "
                         f"{image_size}), got {img.shape}")
    if img.dtype not in (np.float32, np.float64):
        img = img.astype(np.float32)
    if img.min() < -1e-6 or img.max() > 1.0 + 1e-6:
        raise UsageError(f"image values must lie in [0, 1], got range "
                         f"[{img.min():.4f}, {img.max():.4f}]")
    return img.astype(np.float32, copy=False)


def aggregate_context(embeddings: list[np.ndarray]) -> np.ndarray:
    """Order-free sum of per-image token grids (canonical byte order)."""
    if not embeddings:
        raise UsageError("aggregate_context: empty embedding list")
    shape = embeddings[0].shape
    for e in embeddings:
        if e.shape != shape:
            raise ShapeError(f"aggregate_context: mixed shapes {shape} vs {e.shape}")
    ordered = sorted(embeddings, key=lambda e: e.tobytes())
    total = ordered[0].copy()
    for e in ordered[1:]:
        total += e
    return total


class ConditioningEncoder:
    """Bundles the frozen text/vision towers and the trainable projection.

    Frozen weights are registered in the parameter tree (they appear in
    checkpoints and the freeze audit) but never receive gradients.
    """

    def __init__(self, tree: ParameterTree, vocab=DEFAULT_VOCAB, *,
                 d_cond: int = 64, n_text: int = 8,
                 d_vision: int = 48, n_vision: int = 16,
                 patch: int = 8, image_size: int = 32, k_max: int = 3,
                 channels: int = 3, init_rng: SeededRng | None = None):
        if image_size % patch != 0:
            raise UsageError(f"image size {image_size} not divisible by patch {patch}")
        if (image_size // patch) ** 2 != n_vision:
            raise UsageError(f"{n_vision} vision tokens inconsistent with "
                             f"image {image_size} / patch {patch}")
        self.vocab = tuple(vocab)
        self.d_cond, self.n_text = d_cond, n_text
        self.d_vision, self.n_vision = d_vision, n_vision
        self.patch, self.image_size, self.k_max = patch, image_size, k_max
        self.channels = channels

        trng = SeededRng(_TEXT_TOWER_SEED)
        self.table = tree.add(
            "text_encoder.table",
            trng.normal((len(self.vocab), d_cond), dtype=np.float32) * 0.5,
            trainable=False)
        self.text_pos = tree.add(
            "text_encoder.pos",
            trng.normal((n_text, d_cond), dtype=np.float32) * 0.25,
            trainable=False)

        vrng = SeededRng(_VISION_TOWER_SEED)
        pdim = patch * patch * channels
        self.patch_w = tree.add(
            "vision_encoder.weight",
            vrng.normal((pdim, d_vision), dtype=np.float32) * np.sqrt(1.0 / pdim),
            trainable=False)
        self.patch_b = tree.add(
            "vision_encoder.bias",
            vrng.normal((d_vision,), dtype=np.float32) * 0.1,
            trainable=False)
        self.vision_pos = tree.add(
            "vision_encoder.pos",
            vrng.normal((n_vision, d_vision), dtype=np.float32) * 0.25,
            trainable=False)

        prng = init_rng if init_rng is not None else SeededRng(0)
        self.proj_w = tree.add("cond.project.weight",
                               xavier_normal(prng, (d_vision, d_cond), d_vision))
        self.proj_b = tree.add("cond.project.bias", np.zeros(d_cond, dtype=np.float32))

    # -- frozen towers (plain numpy; outputs are constants) -------------------

    def encode_text(self, prompt: str | np.ndarray) -> np.ndarray:
        """(n_text, d_cond) embedding: table lookup plus positional code."""
        ids = prompt if isinstance(prompt, np.ndarray) else tokenize(prompt, self.vocab,
                                                                     self.n_text)
        if ids.shape != (self.n_text,):
            raise ShapeError(f"token ids must be ({self.n_text},), got {ids.shape}")
        if ids.min() < 0 or ids.max() >= len(self.vocab):
            raise UsageError("token id outside the vocabulary table")
        return self.table.data[ids] + self.text_pos.data

    def encode_image(self, img: np.ndarray) -> np.ndarray:
        """(n_vision, d_vision) patch tokens of one [0,1] context image."""
        img = _check_image(img, self.image_size, self.channels)
        g = self.image_size // self.patch
        patches = img.reshape(self.channels, g, self.patch, g, self.patch)
        patches = patches.transpose(1, 3, 0, 2, 4).reshape(self.n_vision, -1)
        return patches @ self.patch_w.data + self.patch_b.data + self.vision_pos.data

    def encode_context(self, images) -> np.ndarray:
        """Sum of per-image embeddings over a ContextSet or image list."""
        ctx = images if isinstance(images, ContextSet) else ContextSet(
            images, k_max=self.k_max, image_size=self.image_size,
            channels=self.channels)
        return aggregate_context([self.encode_image(im) for im in ctx.images])

    # -- trainable projection --------------------------------------------------

    def project_context(self, summed: np.ndarray | Tensor) -> Tensor:
        """Map (..., n_vision, d_vision) -> (..., n_vision, d_cond); trainable."""
        t = summed if isinstance(summed, Tensor) else Tensor(summed)
        if t.shape[-1] != self.d_vision:
            raise ShapeError(f"project_context: last dim {t.shape} != {self.d_vision}")
        return ops.linear(t, self.proj_w, self.proj_b)

    def build(self, prompts: list[str], context_sets) -> Tensor:
        """Full conditioning sequence (B, n_text + n_vision, d_cond).

        ``context_sets`` is one ContextSet/list of images per prompt.  The
        text half is constant; gradients reach only the projection weights.
        """
        if len(prompts) != len(context_sets):
            raise UsageError(f"{len(prompts)} prompts vs {len(context_sets)} context sets")
        if not prompts:
            raise UsageError("build: empty batch")
        text = np.stack([self.encode_text(p) for p in prompts])
        vis = np.stack([self.encode_context(cs) for cs in context_sets])
        projected = self.project_context(vis)
        return ops.concat([Tensor(text), projected], axis=1)
