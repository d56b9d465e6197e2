"""Deterministic random number generation.

Thin wrapper over :class:`numpy.random.Generator` (PCG64) that adds:

* a single required integer seed (no global state, no implicit seeding),
* serializable state for checkpoint/resume round trips,
* deterministic child-stream spawning for independent substreams.

All stochastic code in the package draws from a ``SeededRng`` that is passed
in explicitly; nothing touches ``numpy.random`` module-level functions.
"""

from __future__ import annotations

import json

import numpy as np

from .errors import UsageError


class SeededRng:
    """PCG64-backed generator with explicit, serializable state."""

    def __init__(self, seed: int | None = None, _bit_generator=None):
        if _bit_generator is not None:
            self._bitgen = _bit_generator
        else:
            if seed is None:
                raise UsageError("SeededRng requires an explicit integer seed")
            if not isinstance(seed, (int, np.integer)):
                raise UsageError(f"seed must be an integer, got {type(seed).__name__}")
            self._bitgen = np.random.PCG64(int(seed))
        self._gen = np.random.Generator(self._bitgen)

    # -- sampling -----------------------------------------------------------

    def normal(self, shape=(), dtype=np.float32, loc=0.0, scale=1.0):
        out = self._gen.normal(loc=loc, scale=scale, size=shape)
        return np.asarray(out, dtype=dtype)

    def uniform(self, shape=(), low=0.0, high=1.0, dtype=np.float32):
        out = self._gen.uniform(low=low, high=high, size=shape)
        return np.asarray(out, dtype=dtype)

    def random(self) -> float:
        """Single float in [0, 1); used for dropout decisions."""
        return float(self._gen.random())

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high=high, size=size)

    def choice(self, seq):
        """Pick one element of a non-empty sequence."""
        if len(seq) == 0:
            raise UsageError("choice from an empty sequence")
        return seq[int(self._gen.integers(0, len(seq)))]

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def shuffle(self, seq: list) -> None:
        self._gen.shuffle(seq)

    # -- substreams ---------------------------------------------------------

    def spawn(self, n: int) -> list["SeededRng"]:
        """n independent child generators, deterministic in self's state."""
        seeds = self._gen.integers(0, 2**63 - 1, size=n)
        return [SeededRng(int(s)) for s in seeds]

    # -- state --------------------------------------------------------------

    def get_state(self) -> str:
        """JSON string capturing the exact generator state."""
        return json.dumps(self._bitgen.state)

    def set_state(self, state: str) -> None:
        try:
            self._bitgen.state = json.loads(state)
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise UsageError(f"invalid rng state payload: {exc}") from exc
