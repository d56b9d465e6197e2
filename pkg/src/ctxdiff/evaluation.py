"""Evaluation: RMSE for image-to-map tasks, palette/layout fidelity for
map-to-image tasks, and the controls used to probe context sensitivity
(shuffled contexts, corrupted contexts, restricted context count).

Color accounting works in brightness-normalized chromaticity space so that
style-darkened renders still classify to the palette color of their shapes:
a pixel is "chromatic" when its channel spread is a meaningful fraction of
its brightness; chromatic pixels are assigned to the nearest palette color
by normalized RGB; everything else (black/gray/white backgrounds, speckle)
is ignored for palette purposes.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .diffusion import NoiseSchedule, SamplerConfig, sample
from .errors import DataError, UsageError
from .rng import SeededRng
from .taskgen import (
    FORWARD_TASKS,
    PALETTE,
    REVERSE_TASKS,
    derive_edge_map,
)

# pixels darker than this (max channel) carry no usable hue
_DARK_FLOOR = 0.08
# minimum relative channel spread for a pixel to count as chromatic
_CHROMA_FLOOR = 0.20
# a palette color must cover this fraction of an image to count as present
_PRESENCE_FLOOR = 0.01

_PALETTE_NAMES = tuple(sorted(PALETTE))
_PALETTE_CHROMA = np.stack(
    [np.asarray(PALETTE[n], np.float32) / max(sum(PALETTE[n]), 1e-9)
     for n in _PALETTE_NAMES])


# --------------------------------------------------------------------------- #
# pixel-level color accounting
# --------------------------------------------------------------------------- #


def _check_image(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float32)
    if img.ndim != 3 or img.shape[0] != 3:
        raise UsageError(f"expected a (3, H, W) image, got {img.shape}")
    return img


def classify_pixels(img) -> np.ndarray:
    """(H, W) palette indices; -1 marks dark or achromatic pixels."""
    img = _check_image(img)
    flat = img.reshape(3, -1).T  # (N, 3)
    brightness = flat.max(axis=1)
    spread = flat.max(axis=1) - flat.min(axis=1)
    chromatic = (brightness > _DARK_FLOOR) & (spread > _CHROMA_FLOOR * brightness)
    labels = np.full(flat.shape[0], -1, dtype=np.int64)
    if chromatic.any():
        pts = flat[chromatic]
        chroma = pts / pts.sum(axis=1, keepdims=True)
        d2 = ((chroma[:, None, :] - _PALETTE_CHROMA[None, :, :]) ** 2).sum(axis=2)
        labels[chromatic] = d2.argmin(axis=1)
    return labels.reshape(img.shape[1:])


def palette_histogram(img) -> dict:
    """Fraction of pixels assigned to each palette color (chromatic only)."""
    labels = classify_pixels(img)
    total = labels.size
    return {name: float((labels == i).sum()) / total
            for i, name in enumerate(_PALETTE_NAMES)}


def dominant_hue(img):
    """Most common palette color among chromatic pixels, or None."""
    hist = palette_histogram(img)
    best = max(hist, key=hist.get)
    return best if hist[best] > 0 else None


def image_palette(img) -> frozenset:
    """Palette colors covering at least 1% of the image."""
    hist = palette_histogram(img)
    return frozenset(n for n, f in hist.items() if f >= _PRESENCE_FLOOR)


def context_palette(contexts) -> frozenset:
    """Union of palette colors found across a context set."""
    out = frozenset()
    for img in contexts:
        out |= image_palette(np.asarray(img, np.float32)[:3])
    return out


def pixel_rmse(a, b) -> float:
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise UsageError(f"rmse over mismatched shapes {a.shape} vs {b.shape}")
    return float(np.sqrt(np.mean((a - b) ** 2)))


def layout_score(generated, query) -> float:
    """1 - RMSE between the generated image's edge map and the query map."""
    return 1.0 - pixel_rmse(derive_edge_map(_check_image(generated)),
                            _check_image(query))


# --------------------------------------------------------------------------- #
# context manipulation controls
# --------------------------------------------------------------------------- #


def shuffle_contexts(examples) -> list:
    """Give each example another example's context set (color-mismatched).

    Contexts are rotated by the smallest offset at which every example
    receives a donor context whose palette differs from its own; ties fall
    back to the offset mismatching the most examples.
    """
    n = len(examples)
    if n < 2:
        raise UsageError("shuffling contexts requires at least two examples")
    palettes = [context_palette(ex.contexts) for ex in examples]
    best_off, best_score = None, -1
    for off in range(1, n):
        score = sum(palettes[i] != palettes[(i + off) % n] for i in range(n))
        if score == n:
            best_off = off
            break
        if score > best_score:
            best_off, best_score = off, score
    out = []
    for i, ex in enumerate(examples):
        donor = examples[(i + best_off) % n]
        out.append(dataclasses.replace(ex, contexts=donor.contexts))
    return out


def corrupt_contexts(examples, rate: float, seed: int = 0) -> list:
    """Zero out a random ``rate`` fraction of pixels in every context image."""
    if not (0 <= rate <= 1):
        raise UsageError(f"corruption rate {rate} outside [0, 1]")
    rng = SeededRng(seed)
    out = []
    for ex in examples:
        ctx = []
        for img in ex.contexts:
            img = np.asarray(img, np.float32).copy()
            mask = rng.uniform(img.shape[1:]) < rate
            img[:, mask] = 0.0
            ctx.append(img)
        out.append(dataclasses.replace(ex, contexts=tuple(ctx)))
    return out


def limit_contexts(examples, k: int) -> list:
    if k < 1:
        raise UsageError(f"context count {k} must be >= 1")
    return [dataclasses.replace(ex, contexts=ex.contexts[:k]) for ex in examples]


# --------------------------------------------------------------------------- #
# generation plumbing
# --------------------------------------------------------------------------- #


def _schedule(model) -> NoiseSchedule:
    return NoiseSchedule.linear(model.cfg.timesteps, model.cfg.beta_start,
                                model.cfg.beta_end)


def prepare_contexts(model, contexts) -> list:
    """Match context channel count to the model (paired-source models take
    each context stacked with its derived layout map)."""
    ctx = [np.asarray(c, np.float32) for c in contexts]
    if model.cfg.context_channels == 3 or not ctx:
        return ctx
    if ctx[0].shape[0] == model.cfg.context_channels:
        return ctx
    return [np.concatenate([c, derive_edge_map(c)], axis=0) for c in ctx]


def generate(model, examples, regime: str = "C+P",
             sampler: SamplerConfig | None = None) -> np.ndarray:
    """Sample one image per example under the given regime; (B, 3, H, W)."""
    if not examples:
        raise UsageError("generate: no examples")
    sampler = sampler or SamplerConfig()
    schedule = _schedule(model)
    prompts = [ex.caption for ex in examples]
    contexts = [prepare_contexts(model, ex.contexts) for ex in examples]
    queries = np.stack([np.asarray(ex.query, np.float32) for ex in examples])
    return sample(model, schedule, prompts, contexts, queries,
                  sampler=sampler, regime=regime)


# --------------------------------------------------------------------------- #
# metrics over datasets
# --------------------------------------------------------------------------- #

_PROTOCOL_SEEDS = (0, 1, 2)


@dataclass
class EvalReport:
    regime: str
    seeds: tuple
    counts: dict = field(default_factory=dict)  # task -> n examples
    rmse: dict = field(default_factory=dict)  # reverse task -> float
    palette: dict = field(default_factory=dict)  # forward task -> float
    layout: dict = field(default_factory=dict)  # forward task -> float

    def lines(self) -> list:
        """Machine-readable key=value records, one per task/metric."""
        out = []
        for task in sorted(self.rmse):
            out.append(f"task={task} regime={self.regime} n={self.counts[task]} "
                       f"rmse={self.rmse[task]:.6f}")
        for task in sorted(self.palette):
            out.append(f"task={task} regime={self.regime} n={self.counts[task]} "
                       f"palette_score={self.palette[task]:.6f} "
                       f"layout_score={self.layout[task]:.6f}")
        return out

    def table(self) -> str:
        rows = [f"{'task':<12} {'n':>4} {'rmse':>8} {'palette':>8} {'layout':>8}"]
        for task in sorted(set(self.rmse) | set(self.palette)):
            rmse = f"{self.rmse[task]:.4f}" if task in self.rmse else "-"
            pal = f"{self.palette[task]:.4f}" if task in self.palette else "-"
            lay = f"{self.layout[task]:.4f}" if task in self.layout else "-"
            rows.append(f"{task:<12} {self.counts[task]:>4} {rmse:>8} "
                        f"{pal:>8} {lay:>8}")
        return "\n".join(rows)


def _task_examples(examples, task: str) -> list:
    chosen = [ex for ex in examples if ex.task == task]
    if not chosen:
        raise DataError(f"no examples of task {task!r} in the evaluation set")
    return chosen


def _seed_list(sampler: SamplerConfig, average_seeds: bool) -> tuple:
    return _PROTOCOL_SEEDS if average_seeds else (sampler.seed,)


def eval_rmse(model, examples, task: str, regime: str = "C+P", *,
              sampler: SamplerConfig | None = None,
              average_seeds: bool = False) -> float:
    """Mean RMSE between generated maps and ground truth for a reverse task."""
    if task not in REVERSE_TASKS:
        raise UsageError(f"RMSE protocol applies to image-to-map tasks "
                         f"{sorted(REVERSE_TASKS)}, not {task!r}")
    sampler = sampler or SamplerConfig()
    chosen = _task_examples(examples, task)
    targets = np.stack([np.asarray(ex.target, np.float32) for ex in chosen])
    totals = []
    for seed in _seed_list(sampler, average_seeds):
        gen = generate(model, chosen, regime,
                       dataclasses.replace(sampler, seed=seed))
        per_example = np.sqrt(((gen.astype(np.float64) - targets) ** 2)
                              .mean(axis=(1, 2, 3)))
        totals.append(float(per_example.mean()))
    return float(np.mean(totals))


def eval_fidelity(model, examples, task: str, regime: str = "C+P", *,
                  sampler: SamplerConfig | None = None,
                  average_seeds: bool = False,
                  shuffled_contexts: bool = False,
                  corrupt_rate: float = 0.0, corrupt_seed: int = 0,
                  k_override: int | None = None) -> tuple:
    """(palette_score, layout_score) for a map-to-image task.

    palette_score: fraction of samples whose dominant hue lies in the palette
    of the contexts they were conditioned on (the original contexts when
    ``shuffled_contexts`` is set — the control asks how often the output
    still matches a context the model never saw).
    layout_score: mean 1 - RMSE between each sample's edge map and its query.
    """
    if task not in FORWARD_TASKS:
        raise UsageError(f"fidelity protocol applies to map-to-image tasks "
                         f"{sorted(FORWARD_TASKS)}, not {task!r}")
    sampler = sampler or SamplerConfig()
    chosen = _task_examples(examples, task)
    reference = [context_palette(ex.contexts) for ex in chosen]
    conditioned = chosen
    if k_override is not None:
        conditioned = limit_contexts(conditioned, k_override)
    if shuffled_contexts:
        conditioned = shuffle_contexts(conditioned)
    if corrupt_rate > 0:
        conditioned = corrupt_contexts(conditioned, corrupt_rate, corrupt_seed)

    pal_scores, lay_scores = [], []
    for seed in _seed_list(sampler, average_seeds):
        gen = generate(model, conditioned, regime,
                       dataclasses.replace(sampler, seed=seed))
        hits = []
        for img, ref in zip(gen, reference):
            hue = dominant_hue(img)
            hits.append(hue is not None and hue in ref)
        pal_scores.append(float(np.mean(hits)))
        lay_scores.append(float(np.mean(
            [layout_score(img, ex.query) for img, ex in zip(gen, chosen)])))
    return float(np.mean(pal_scores)), float(np.mean(lay_scores))


def evaluate(model, examples, tasks, regime: str = "C+P", *,
             sampler: SamplerConfig | None = None,
             average_seeds: bool = False) -> EvalReport:
    """Run the appropriate protocol per task and collect a report."""
    sampler = sampler or SamplerConfig()
    report = EvalReport(regime=regime, seeds=_seed_list(sampler, average_seeds))
    for task in tasks:
        if task not in REVERSE_TASKS and task not in FORWARD_TASKS:
            raise UsageError(f"task {task!r} has no evaluation protocol")
        chosen = _task_examples(examples, task)
        report.counts[task] = len(chosen)
        if task in REVERSE_TASKS:
            report.rmse[task] = eval_rmse(model, examples, task, regime,
                                          sampler=sampler,
                                          average_seeds=average_seeds)
        else:
            pal, lay = eval_fidelity(model, examples, task, regime,
                                     sampler=sampler,
                                     average_seeds=average_seeds)
            report.palette[task] = pal
            report.layout[task] = lay
    return report
