"""Command-line interface.

Subcommands: gen-data, train, sample, eval, inspect-ckpt.  Every option can
be given as a flag or through ``--config FILE`` — a plain-text file of
``key: value`` (or ``key = value``) lines using the flag names; explicit
flags win over the file.  Exit codes: 0 success, 1 usage error, 2 data
error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import evaluation, taskgen, training
from .checkpoint import inspect_checkpoint, load_checkpoint, restore_model
from .diffusion import REGIMES, UNCOND_MODES, NoiseSchedule, SamplerConfig, sample
from .errors import ConfigError, DataError, NumericError, UsageError
from .png import read_png, write_png


class _Parser(argparse.ArgumentParser):
    """argparse that reports problems as UsageError instead of exiting."""

    def error(self, message):
        raise UsageError(message)


def _csv(text: str) -> tuple:
    return tuple(part.strip() for part in str(text).split(",") if part.strip())


def _csv_int(text) -> tuple:
    if isinstance(text, tuple):
        return tuple(int(v) for v in text)
    return tuple(int(v) for v in _csv(text))


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    value = str(text).strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"cannot read {text!r} as a boolean")


def read_config_file(path) -> dict:
    """``key: value`` / ``key = value`` lines; '#' starts a comment."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise DataError(f"cannot read config file {path}: {exc}") from exc
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        for sep in (":", "="):
            if sep in line:
                key, value = line.split(sep, 1)
                break
        else:
            raise DataError(f"{path}:{lineno}: expected 'key: value', got {raw!r}")
        values[key.strip().replace("-", "_")] = value.strip()
    return values


# --------------------------------------------------------------------------- #
# option registry: every option records its converter so config-file values
# pass through the same parsing as flags
# --------------------------------------------------------------------------- #


class _Opts:
    def __init__(self, parser):
        self.parser = parser
        self.converters = {}
        parser.add_argument("--config", default=None, metavar="FILE",
                            help="plain-text key: value option file")

    def add(self, flag, conv, default=None, required=False, choices=None,
            help=""):  # noqa: A002 - mirrors argparse
        dest = flag.lstrip("-").replace("-", "_")
        if conv is bool:
            self.parser.add_argument(flag, dest=dest, action="store_const",
                                     const=True, default=None, help=help)
        else:
            self.parser.add_argument(flag, dest=dest, type=conv, default=None,
                                     choices=choices, help=help)
        self.converters[dest] = (conv if conv is not bool else _bool,
                                 default, required, choices)

    def resolve(self, args) -> argparse.Namespace:
        """Merge flags > config file > defaults; enforce required options."""
        config = read_config_file(args.config) if args.config else {}
        unknown = sorted(set(config) - set(self.converters))
        if unknown:
            raise UsageError(f"config file sets unknown option(s): "
                             f"{', '.join(unknown)}")
        for dest, (conv, default, required, choices) in self.converters.items():
            value = getattr(args, dest)
            if value is None and dest in config:
                value = conv(config[dest])
                if choices and value not in choices:
                    raise UsageError(f"{dest} must be one of {choices}, "
                                     f"got {value!r}")
            if value is None:
                value = default
            if value is None and required:
                raise UsageError(f"--{dest.replace('_', '-')} is required "
                                 "(flag or config file)")
            setattr(args, dest, value)
        return args


# --------------------------------------------------------------------------- #
# subcommands
# --------------------------------------------------------------------------- #


def _build_gen_data(sub):
    p = sub.add_parser("gen-data", help="write a procedural dataset directory")
    o = _Opts(p)
    o.add("--out", str, required=True, help="output directory (must be empty)")
    o.add("--count", int, default=64, help="number of records")
    o.add("--seed", int, default=0)
    o.add("--size", int, default=32)
    o.add("--k", int, default=3, help="context images per record")
    o.add("--tasks", _csv, default=taskgen.IN_DOMAIN_TASKS)
    o.add("--colors", _csv, help="restrict shape colors")
    o.add("--backgrounds", _csv, help="restrict background colors")
    o.add("--styles", _csv, help="restrict style tags")
    o.add("--shapes", _csv, help="restrict shape kinds")
    o.add("--n-shapes", int, help="fixed number of shapes per scene")
    p.set_defaults(_opts=o, _run=_cmd_gen_data)


def _cmd_gen_data(a) -> int:
    constraints = {}
    if a.colors:
        constraints["colors"] = a.colors
    if a.backgrounds:
        constraints["backgrounds"] = a.backgrounds
    if a.styles:
        constraints["styles"] = a.styles
    if a.shapes:
        constraints["kinds"] = a.shapes
    if a.n_shapes:
        constraints["n_shapes"] = a.n_shapes
    taskgen.write_dataset(a.out, a.count, a.seed, tasks=a.tasks, k=a.k,
                          size=a.size, **constraints)
    print(f"wrote {a.count} records to {a.out}")
    return 0


def _build_train(sub):
    p = sub.add_parser("train", help="train a model on a dataset directory")
    o = _Opts(p)
    o.add("--dataset", str, required=True)
    o.add("--out", str, required=True, help="checkpoint output directory")
    o.add("--seed", int, required=True)
    o.add("--preset", str, default="default", choices=("default", "small"))
    o.add("--iterations", int, default=5000)
    o.add("--batch-size", int, default=16)
    o.add("--lr", float, default=1e-4)
    o.add("--prompt-dropout", float, default=0.5)
    o.add("--context-dropout", float, default=0.1)
    o.add("--k-choices", _csv_int, default=(1, 2, 3))
    o.add("--checkpoint-every", int, default=1000)
    o.add("--log-every", int, default=50)
    o.add("--resume", str, default="")
    o.add("--paired-source-context", bool, default=False)
    o.add("--context-to-query", bool, default=False)
    p.set_defaults(_opts=o, _run=_cmd_train)


def _cmd_train(a) -> int:
    cfg = training.TrainConfig(
        dataset=a.dataset, out_dir=a.out, seed=a.seed, preset=a.preset,
        iterations=a.iterations, batch_size=a.batch_size, lr=a.lr,
        prompt_dropout=a.prompt_dropout, context_dropout=a.context_dropout,
        k_choices=a.k_choices, checkpoint_every=a.checkpoint_every,
        log_every=a.log_every, resume=a.resume,
        paired_source_context=a.paired_source_context,
        context_to_query=a.context_to_query)
    result = training.train(cfg)
    print(f"final loss {result.losses[-1]:.6f}" if result.losses
          else "no iterations run")
    print(f"checkpoint {result.final_checkpoint}")
    return 0


def _build_sample(sub):
    p = sub.add_parser("sample", help="generate one image from a checkpoint")
    o = _Opts(p)
    o.add("--checkpoint", str, required=True)
    o.add("--query", str, required=True, help="layout-defining query PNG")
    o.add("--contexts", _csv, default=(), help="comma-separated context PNGs")
    o.add("--prompt", str, default="")
    o.add("--regime", str, default="C+P", choices=REGIMES)
    o.add("--steps", int, default=50)
    o.add("--guidance-weight", float, default=3.0)
    o.add("--eta", float, default=0.0)
    o.add("--cfg-uncond", str, default="both", choices=UNCOND_MODES)
    o.add("--seed", int, required=True)
    o.add("--out", str, required=True, help="output PNG path")
    p.set_defaults(_opts=o, _run=_cmd_sample)


def _cmd_sample(a) -> int:
    if a.regime == "C" and a.prompt:
        raise UsageError("regime C is context-only; do not pass --prompt")
    if a.regime == "P" and a.contexts:
        raise UsageError("regime P is prompt-only; do not pass --contexts")
    model = restore_model(load_checkpoint(a.checkpoint))
    query = read_png(a.query)
    contexts = evaluation.prepare_contexts(model, [read_png(p) for p in a.contexts])
    schedule = NoiseSchedule.linear(model.cfg.timesteps, model.cfg.beta_start,
                                    model.cfg.beta_end)
    sampler = SamplerConfig(steps=a.steps, guidance_weight=a.guidance_weight,
                            eta=a.eta, seed=a.seed)
    images = sample(model, schedule, [a.prompt], [contexts], query[None],
                    sampler=sampler, regime=a.regime, uncond=a.cfg_uncond)
    write_png(a.out, images[0])
    meta = [f"checkpoint: {a.checkpoint}", f"query: {a.query}"]
    meta += [f"context_{i}: {p}" for i, p in enumerate(a.contexts)]
    meta += [f"prompt: {a.prompt}", f"regime: {a.regime}", f"steps: {a.steps}",
             f"guidance_weight: {a.guidance_weight}", f"eta: {a.eta}",
             f"cfg_uncond: {a.cfg_uncond}", f"seed: {a.seed}"]
    Path(str(a.out) + ".meta.txt").write_text("\n".join(meta) + "\n")
    print(f"wrote {a.out}")
    return 0


def _build_eval(sub):
    p = sub.add_parser("eval", help="run the evaluation protocols")
    o = _Opts(p)
    o.add("--checkpoint", str, required=True)
    o.add("--dataset", str, required=True)
    o.add("--tasks", _csv, help="default: every evaluable task in the dataset")
    o.add("--regime", str, default="C+P", choices=REGIMES)
    o.add("--steps", int, default=50)
    o.add("--guidance-weight", float, default=3.0)
    o.add("--seed", int, default=0)
    o.add("--average-seeds", bool, default=False,
          help="average each metric over three fixed seeds")
    o.add("--records", str, help="also write machine-readable records here")
    p.set_defaults(_opts=o, _run=_cmd_eval)


def _cmd_eval(a) -> int:
    examples, _ = taskgen.load_dataset(a.dataset)
    model = restore_model(load_checkpoint(a.checkpoint))
    evaluable = set(evaluation.FORWARD_TASKS) | set(evaluation.REVERSE_TASKS)
    tasks = a.tasks or tuple(sorted({ex.task for ex in examples} & evaluable))
    if not tasks:
        raise DataError("dataset contains no tasks with an evaluation protocol")
    sampler = SamplerConfig(steps=a.steps, guidance_weight=a.guidance_weight,
                            seed=a.seed)
    report = evaluation.evaluate(model, examples, tasks, a.regime,
                                 sampler=sampler,
                                 average_seeds=a.average_seeds)
    print(report.table())
    if a.records:
        Path(a.records).write_text("\n".join(report.lines()) + "\n")
    return 0


def _build_inspect(sub):
    p = sub.add_parser("inspect-ckpt", help="summarize a checkpoint file")
    o = _Opts(p)
    o.add("--checkpoint", str, required=True)
    p.set_defaults(_opts=o, _run=_cmd_inspect)


def _cmd_inspect(a) -> int:
    for key, value in inspect_checkpoint(a.checkpoint).items():
        print(f"{key}: {value}")
    return 0


# --------------------------------------------------------------------------- #
# entry point
# --------------------------------------------------------------------------- #


def build_parser() -> _Parser:
    parser = _Parser(prog="ctxdiff",
                     description="context-conditioned diffusion toolkit")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    _build_gen_data(sub)
    _build_train(sub)
    _build_sample(sub)
    _build_eval(sub)
    _build_inspect(sub)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    try:
        args = build_parser().parse_args(argv)
        if not getattr(args, "command", None):
            raise UsageError("no command given; see --help")
        args._opts.resolve(args)
        return args._run(args)
    except (UsageError, ConfigError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
