"""Training loop: batch construction with conditioning dropout, Adam, checkpoints.

Determinism contract: a run is fully determined by (TrainConfig, dataset
bytes).  One seeded generator drives everything, consumed in a fixed order —
model-init seed first, then per iteration the batch draws (task, example, k,
prompt dropout, context dropout — in that order for each slot) followed by
the timestep and noise draws.  The generator state is stored in every
checkpoint, so a resumed run consumes the stream exactly where the original
left off and produces bit-identical batches.
"""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import taskgen
from .checkpoint import load_checkpoint, restore_model, save_checkpoint
from .diffusion import NoiseSchedule, training_loss
from .errors import ConfigError, DataError, NumericError
from .model import ContextDiffusion
from .rng import SeededRng
from .tensor import GradientTape
from .unet import PRESETS, ModelConfig

log = logging.getLogger("ctxdiff.train")


# --------------------------------------------------------------------------- #
# configuration
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class TrainConfig:
    dataset: str
    out_dir: str
    seed: int
    preset: str = "default"
    iterations: int = 5000
    batch_size: int = 16
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    prompt_dropout: float = 0.5
    context_dropout: float = 0.1
    k_choices: tuple[int, ...] = (1, 2, 3)
    checkpoint_every: int = 1000
    log_every: int = 50
    resume: str = ""
    # ablations (both off in the main design)
    paired_source_context: bool = False
    context_to_query: bool = False

    def validate(self) -> None:
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown model preset {self.preset!r}; "
                              f"choose from {sorted(PRESETS)}")
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")
        if not (0 <= self.prompt_dropout <= 1):
            raise ConfigError(f"prompt dropout {self.prompt_dropout} outside [0, 1]")
        if not (0 <= self.context_dropout <= 1):
            raise ConfigError(f"context dropout {self.context_dropout} outside [0, 1]")
        if not self.k_choices or any(k < 1 for k in self.k_choices):
            raise ConfigError(f"k choices {self.k_choices} must be positive and non-empty")
        if self.checkpoint_every < 1 or self.log_every < 1:
            raise ConfigError("checkpoint_every and log_every must be >= 1")

    def model_config(self, size: int) -> ModelConfig:
        base = PRESETS[self.preset]
        if size != base.image_size:
            raise DataError(f"dataset images are {size}x{size} but the "
                            f"{self.preset!r} preset expects {base.image_size}")
        return dataclasses.replace(
            base,
            context_channels=6 if self.paired_source_context else 3,
            context_to_query=1 if self.context_to_query else 0)


# --------------------------------------------------------------------------- #
# batch construction
# --------------------------------------------------------------------------- #


@dataclass
class Batch:
    prompts: list
    contexts: list  # list of list-of-(C, H, W) arrays
    queries: np.ndarray  # (B, 3, H, W) in [0, 1]
    targets: np.ndarray  # (B, 3, H, W) in [0, 1]
    tasks: list


def _pair_source(img: np.ndarray) -> np.ndarray:
    """Stack a derived layout map onto a context image (6 channels)."""
    return np.concatenate([img, taskgen.derive_edge_map(img)], axis=0)


def build_batch(examples, cfg: TrainConfig, rng: SeededRng) -> Batch:
    """Draw one training batch.

    Per slot, in a fixed order: task kind uniform over the in-domain kinds
    present, an example of that kind, k uniform over the configured choices,
    prompt dropout (caption -> empty string), context dropout (all context
    images -> black).  The two dropouts are independent draws.
    """
    by_task = {}
    for ex in examples:
        if ex.task in taskgen.IN_DOMAIN_TASKS:
            by_task.setdefault(ex.task, []).append(ex)
    if not by_task:
        raise DataError("dataset contains no in-domain task examples")
    kinds = sorted(by_task)

    prompts, contexts, queries, targets, tasks = [], [], [], [], []
    for _ in range(cfg.batch_size):
        kind = rng.choice(kinds)
        ex = rng.choice(by_task[kind])
        k = min(int(rng.choice(cfg.k_choices)), len(ex.contexts))
        caption = "" if rng.random() < cfg.prompt_dropout else ex.caption
        ctx = [np.asarray(c, dtype=np.float32) for c in ex.contexts[:k]]
        if rng.random() < cfg.context_dropout:
            ctx = [np.zeros_like(c) for c in ctx]
        if cfg.paired_source_context:
            ctx = [_pair_source(c) for c in ctx]
        prompts.append(caption)
        contexts.append(ctx)
        queries.append(np.asarray(ex.query, dtype=np.float32))
        targets.append(np.asarray(ex.target, dtype=np.float32))
        tasks.append(kind)
    return Batch(prompts=prompts, contexts=contexts,
                 queries=np.stack(queries), targets=np.stack(targets),
                 tasks=tasks)


# --------------------------------------------------------------------------- #
# optimizer
# --------------------------------------------------------------------------- #


class Adam:
    """Adam over the trainable parameters of a tree; state is serializable.

    Parameters whose gradient is None this step are skipped entirely (their
    moments stay zero), which keeps never-reached parameters bit-identical
    to initialization.
    """

    def __init__(self, tree, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.params = [(name, t) for name, t in tree.items() if t.requires_grad]
        self.m = {name: np.zeros_like(t.data) for name, t in self.params}
        self.v = {name: np.zeros_like(t.data) for name, t in self.params}
        self.step_count = 0

    def zero_grad(self) -> None:
        for _, t in self.params:
            t.grad = None

    def step(self) -> None:
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for name, p in self.params:
            g = p.grad
            if g is None:
                continue
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= np.float32(self.lr) * update

    def state_dict(self) -> dict:
        return {"kind": "adam", "step": self.step_count, "lr": self.lr,
                "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
                "m": {n: a.copy() for n, a in self.m.items()},
                "v": {n: a.copy() for n, a in self.v.items()}}

    def load_state_dict(self, state: dict) -> None:
        if state["kind"] != "adam":
            raise DataError(f"checkpoint optimizer kind {state['kind']!r} is not adam")
        missing = sorted(set(self.m) - set(state["m"]))
        unknown = sorted(set(state["m"]) - set(self.m))
        if missing or unknown:
            raise DataError(f"optimizer state does not match the model "
                            f"(missing {missing[:3]}, unknown {unknown[:3]})")
        self.step_count = int(state["step"])
        self.lr = float(state["lr"])
        self.beta1, self.beta2 = float(state["beta1"]), float(state["beta2"])
        self.eps = float(state["eps"])
        for name in self.m:
            if state["m"][name].shape != self.m[name].shape:
                raise DataError(f"optimizer moment for {name!r} has wrong shape")
            self.m[name] = state["m"][name].astype(np.float32).copy()
            self.v[name] = state["v"][name].astype(np.float32).copy()


# --------------------------------------------------------------------------- #
# training loop
# --------------------------------------------------------------------------- #


@dataclass
class TrainResult:
    final_checkpoint: Path
    checkpoints: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    model: ContextDiffusion | None = None


def _train_step(model, schedule, batch, rng, optimizer, iteration: int) -> float:
    t = rng.integers(0, schedule.timesteps, size=batch.targets.shape[0])
    t = np.asarray(t, dtype=np.int64)
    eps = rng.normal(batch.targets.shape, dtype=np.float32)
    optimizer.zero_grad()
    # the tensor engine raises NumericError the moment any op yields a
    # non-finite value; surface which step diverged
    try:
        x0 = batch.targets.astype(np.float32) * 2.0 - 1.0
        with GradientTape():
            cond = model.encode_conditioning(batch.prompts, batch.contexts)
            loss = training_loss(model, schedule, x0, t, eps, cond,
                                 query=batch.queries)
            value = float(loss.data)
            if not np.isfinite(value):
                raise NumericError("loss is non-finite")
            loss.backward()
    except NumericError as exc:
        raise NumericError(f"training diverged at iteration {iteration}: {exc}") from exc
    optimizer.step()
    return value


def train(cfg: TrainConfig, *, examples=None) -> TrainResult:
    """Run the full loop; returns checkpoint paths and the loss history.

    ``examples`` overrides the dataset on disk (used by tests); otherwise the
    dataset directory named in the config is loaded.
    """
    cfg.validate()
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if examples is None:
        examples, manifest = taskgen.load_dataset(cfg.dataset)
        size = int(manifest["size"])
    else:
        examples = list(examples)
        if not examples:
            raise DataError("empty training dataset")
        size = examples[0].target.shape[-1]

    if cfg.resume:
        ckpt = load_checkpoint(cfg.resume)
        expected = cfg.model_config(size)
        if ckpt.config != expected:
            raise DataError("resume checkpoint was trained with a different model "
                            "configuration than this run requests")
        model = restore_model(ckpt)
        rng = SeededRng(0)
        if ckpt.rng_state is None:
            raise DataError("resume checkpoint carries no rng state")
        rng.set_state(ckpt.rng_state)
        optimizer = Adam(model.tree, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
        if ckpt.optimizer is None:
            raise DataError("resume checkpoint carries no optimizer state")
        optimizer.load_state_dict(ckpt.optimizer)
        start = ckpt.iteration
    else:
        rng = SeededRng(cfg.seed)
        model_seed = int(rng.integers(0, 2 ** 31 - 1))
        model = ContextDiffusion(cfg.model_config(size), seed=model_seed)
        optimizer = Adam(model.tree, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
        start = 0

    schedule = NoiseSchedule.linear(model.cfg.timesteps, model.cfg.beta_start,
                                    model.cfg.beta_end)
    frozen_at_start = model.frozen_fingerprint()

    result = TrainResult(final_checkpoint=out_dir / "model.ckpt", model=model)
    t0 = time.monotonic()
    for i in range(start, cfg.iterations):
        batch = build_batch(examples, cfg, rng)
        value = _train_step(model, schedule, batch, rng, optimizer, i)
        result.losses.append(value)

        if i % cfg.log_every == 0 or i == cfg.iterations - 1:
            log.info("iter %d loss %.6f wall %.1fs", i, value, time.monotonic() - t0)

        if (i + 1) % cfg.checkpoint_every == 0 or i == cfg.iterations - 1:
            if model.frozen_fingerprint() != frozen_at_start:
                raise NumericError(f"frozen parameters changed by iteration {i}; "
                                   "training state is corrupt")
            path = out_dir / f"ckpt_{i + 1:06d}.ckpt"
            save_checkpoint(path, model, i + 1,
                            optimizer_state=optimizer.state_dict(),
                            rng_state=rng.get_state())
            result.checkpoints.append(path)

    save_checkpoint(result.final_checkpoint, model, cfg.iterations,
                    optimizer_state=optimizer.state_dict(),
                    rng_state=rng.get_state())
    return result
