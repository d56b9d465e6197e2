"""Binary checkpoint format.

Layout (all integers little-endian):

    magic "CTXD" | u32 version
    u32 length + UTF-8 config text ("field: value" lines, fixed order)
    u64 iteration
    u32 count + per-parameter records:
        u16 name length + name | u8 dtype tag | u8 trainable | u8 rank
        rank * u32 dims | raw little-endian float32 payload
    u8 optimizer-present; if set: u32 length + header text, u32 count +
        per-entry (u16 name length + name, u8 rank, dims, first-moment
        payload, second-moment payload)
    u8 rng-present; if set: u32 length + rng-state JSON
    u32 CRC-32 of everything above

The same model state always serializes to the same bytes (fixed field order,
no timestamps), so save -> load -> save round-trips byte-identically and a
whole-file checksum catches any single corrupted byte.
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, fields

import numpy as np

from .errors import ConfigError, DataError
from .unet import ModelConfig

MAGIC = b"CTXD"
VERSION = 1
_DTYPE_F32 = 1

_TUPLE_INT_FIELDS = {"channel_mults", "attention_levels"}
_FLOAT_FIELDS = {"beta_start", "beta_end"}


# --------------------------------------------------------------------------- #
# config text block
# --------------------------------------------------------------------------- #


def config_to_text(cfg: ModelConfig) -> str:
    lines = []
    for f in fields(ModelConfig):
        value = getattr(cfg, f.name)
        if f.name == "vocab":
            if any("," in w for w in value):
                raise ConfigError("vocabulary words must not contain commas")
            lines.append(f"vocab: {','.join(value)}")
        elif f.name in _TUPLE_INT_FIELDS:
            lines.append(f"{f.name}: {','.join(str(v) for v in value)}")
        elif f.name in _FLOAT_FIELDS:
            lines.append(f"{f.name}: {value!r}")
        else:
            lines.append(f"{f.name}: {value}")
    return "\n".join(lines) + "\n"


def config_from_text(text: str) -> ModelConfig:
    values = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        if ": " not in line:
            raise DataError(f"malformed config line {line!r}")
        key, raw = line.split(": ", 1)
        values[key] = raw
    kwargs = {}
    try:
        for f in fields(ModelConfig):
            raw = values[f.name]
            if f.name == "vocab":
                kwargs[f.name] = tuple(raw.split(","))
            elif f.name in _TUPLE_INT_FIELDS:
                kwargs[f.name] = tuple(int(v) for v in raw.split(","))
            elif f.name in _FLOAT_FIELDS:
                kwargs[f.name] = float(raw)
            else:
                kwargs[f.name] = int(raw)
    except KeyError as exc:
        raise DataError(f"checkpoint config missing field {exc.args[0]!r}") from exc
    except ValueError as exc:
        raise DataError(f"checkpoint config field unreadable: {exc}") from exc
    return ModelConfig(**kwargs)


# --------------------------------------------------------------------------- #
# serialization helpers
# --------------------------------------------------------------------------- #


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise DataError("truncated checkpoint: record extends past end of file")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def text(self) -> str:
        return self.take(self.u32()).decode("utf-8")

    def name(self) -> str:
        return self.take(self.u16()).decode("utf-8")

    def array(self, rank: int) -> np.ndarray:
        dims = tuple(self.u32() for _ in range(rank))
        count = int(np.prod(dims, dtype=np.int64)) if dims else 1
        payload = self.take(count * 4)
        return np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)


def _pack_name(name: str) -> bytes:
    raw = name.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ConfigError(f"parameter name too long: {name[:40]}...")
    return struct.pack("<H", len(raw)) + raw


def _pack_dims(shape: tuple[int, ...]) -> bytes:
    return struct.pack("<B", len(shape)) + b"".join(struct.pack("<I", d) for d in shape)


# --------------------------------------------------------------------------- #
# public API
# --------------------------------------------------------------------------- #


@dataclass
class Checkpoint:
    version: int
    config: ModelConfig
    iteration: int
    params: dict  # name -> float32 array
    trainable: dict  # name -> bool
    optimizer: dict | None  # {"kind", "step", "lr", "beta1", "beta2", "eps", "m", "v"}
    rng_state: str | None


def checkpoint_bytes(model, iteration: int, optimizer_state: dict | None = None,
                     rng_state: str | None = None) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    cfg_text = config_to_text(model.cfg).encode("utf-8")
    parts.append(struct.pack("<I", len(cfg_text)))
    parts.append(cfg_text)
    parts.append(struct.pack("<Q", int(iteration)))

    items = list(model.tree.items())
    parts.append(struct.pack("<I", len(items)))
    for name, t in items:
        parts.append(_pack_name(name))
        parts.append(struct.pack("<BB", _DTYPE_F32, 1 if t.requires_grad else 0))
        parts.append(_pack_dims(t.shape))
        parts.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())

    if optimizer_state is None:
        parts.append(b"\x00")
    else:
        parts.append(b"\x01")
        head = (f"kind: {optimizer_state['kind']}\n"
                f"step: {optimizer_state['step']}\n"
                f"lr: {optimizer_state['lr']!r}\n"
                f"beta1: {optimizer_state['beta1']!r}\n"
                f"beta2: {optimizer_state['beta2']!r}\n"
                f"eps: {optimizer_state['eps']!r}\n").encode("utf-8")
        parts.append(struct.pack("<I", len(head)))
        parts.append(head)
        names = sorted(optimizer_state["m"])
        parts.append(struct.pack("<I", len(names)))
        for name in names:
            m = np.ascontiguousarray(optimizer_state["m"][name], dtype="<f4")
            v = np.ascontiguousarray(optimizer_state["v"][name], dtype="<f4")
            if m.shape != v.shape:
                raise ConfigError(f"optimizer moments for {name} disagree in shape")
            parts.append(_pack_name(name))
            parts.append(_pack_dims(m.shape))
            parts.append(m.tobytes())
            parts.append(v.tobytes())

    if rng_state is None:
        parts.append(b"\x00")
    else:
        raw = rng_state.encode("utf-8")
        parts.append(b"\x01")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)

    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(path, model, iteration: int, optimizer_state: dict | None = None,
                    rng_state: str | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(model, iteration, optimizer_state, rng_state))


def parse_checkpoint(data: bytes) -> Checkpoint:
    if len(data) < 12:
        raise DataError("not a checkpoint: file too short")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise DataError("checkpoint failed its whole-file checksum")
    r = _Reader(body)
    if r.take(4) != MAGIC:
        raise DataError("not a checkpoint: bad magic bytes")
    version = r.u32()
    if version != VERSION:
        raise DataError(f"unsupported checkpoint version {version} (expected {VERSION})")
    config = config_from_text(r.text())
    iteration = r.u64()

    params: dict = {}
    trainable: dict = {}
    for _ in range(r.u32()):
        name = r.name()
        if name in params:
            raise DataError(f"duplicate parameter record {name!r}")
        dtype_tag = r.u8()
        if dtype_tag != _DTYPE_F32:
            raise DataError(f"unknown dtype tag {dtype_tag} for {name!r}")
        trainable[name] = bool(r.u8())
        params[name] = r.array(r.u8())

    optimizer = None
    if r.u8():
        head = {}
        for line in r.text().splitlines():
            key, raw = line.split(": ", 1)
            head[key] = raw
        optimizer = {"kind": head["kind"], "step": int(head["step"]),
                     "lr": float(head["lr"]), "beta1": float(head["beta1"]),
                     "beta2": float(head["beta2"]), "eps": float(head["eps"]),
                     "m": {}, "v": {}}
        for _ in range(r.u32()):
            name = r.name()
            rank = r.u8()
            dims = tuple(r.u32() for _ in range(rank))
            count = int(np.prod(dims, dtype=np.int64)) if dims else 1
            optimizer["m"][name] = np.frombuffer(r.take(count * 4), "<f4").reshape(dims).copy()
            optimizer["v"][name] = np.frombuffer(r.take(count * 4), "<f4").reshape(dims).copy()

    rng_state = r.text() if r.u8() else None
    if r.pos != len(body):
        raise DataError(f"checkpoint has {len(body) - r.pos} unread trailing bytes")
    return Checkpoint(version=version, config=config, iteration=iteration,
                      params=params, trainable=trainable, optimizer=optimizer,
                      rng_state=rng_state)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())


def restore_model(ckpt: Checkpoint):
    """Rebuild the model the checkpoint describes and load its weights.

    The parameter name set, shapes, and trainable flags in the file must
    exactly match what the stored configuration produces.
    """
    from .model import ContextDiffusion

    model = ContextDiffusion(ckpt.config, seed=0)
    expected = dict(model.tree.items())
    missing = sorted(set(expected) - set(ckpt.params))
    unknown = sorted(set(ckpt.params) - set(expected))
    if missing or unknown:
        raise DataError(
            f"checkpoint parameters do not match the configured model "
            f"(missing {missing[:3]}, unknown {unknown[:3]})")
    for name, t in expected.items():
        arr = ckpt.params[name]
        if arr.shape != t.shape:
            raise DataError(f"parameter {name!r} has shape {arr.shape}, expected {t.shape}")
        if ckpt.trainable[name] != t.requires_grad:
            raise DataError(f"parameter {name!r} trainability flag disagrees with the model")
        t.assign_(arr)
    return model


def inspect_checkpoint(path) -> dict:
    """Cheap structural summary for the command-line inspector."""
    ckpt = load_checkpoint(path)
    cfg = ckpt.config
    return {
        "version": ckpt.version,
        "iteration": ckpt.iteration,
        "tensors": len(ckpt.params),
        "parameters": int(sum(a.size for a in ckpt.params.values())),
        "trainable_parameters": int(sum(a.size for n, a in ckpt.params.items()
                                        if ckpt.trainable[n])),
        "image_size": cfg.image_size,
        "base_channels": cfg.base_channels,
        "levels": cfg.levels,
        "timesteps": cfg.timesteps,
        "vocab_size": len(cfg.vocab),
        "optimizer": ckpt.optimizer["kind"] if ckpt.optimizer else "none",
        "optimizer_step": ckpt.optimizer["step"] if ckpt.optimizer else 0,
        "rng_state": "present" if ckpt.rng_state else "none",
    }
