"""Named parameter storage and weight initialization helpers.

A :class:`ParameterTree` is an ordered mapping from stable dotted paths
(``"backbone.enc.0.1.res.conv1.weight"``) to leaf tensors.  Construction
order is deterministic, so iteration order, checkpoint layout, and optimizer
state keys are all reproducible.
"""

from __future__ import annotations

import numpy as np

from .errors import UsageError
from .rng import SeededRng
from .tensor import Tensor


class ParameterTree:
    """Ordered path -> Tensor registry with freeze/copy utilities."""

    def __init__(self):
        self._entries: dict[str, Tensor] = {}

    def add(self, path: str, value: np.ndarray, trainable: bool = True) -> Tensor:
        if path in self._entries:
            raise UsageError(f"parameter path already registered: {path}")
        # parameters are stored f32; guards against accidental f64 promotion
        t = Tensor(np.asarray(value, dtype=np.float32), requires_grad=trainable)
        self._entries[path] = t
        return t

    def __getitem__(self, path: str) -> Tensor:
        try:
            return self._entries[path]
        except KeyError:
            raise UsageError(f"unknown parameter path: {path}") from None

    def __contains__(self, path: str) -> bool:
        return path in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list[str]:
        return list(self._entries)

    def items(self):
        return self._entries.items()

    def trainable(self):
        return [(n, t) for n, t in self._entries.items() if t.requires_grad]

    def frozen(self):
        return [(n, t) for n, t in self._entries.items() if not t.requires_grad]

    def group(self, prefix: str):
        dotted = prefix if prefix.endswith(".") else prefix + "."
        return [(n, t) for n, t in self._entries.items()
                if n.startswith(dotted) or n == prefix]

    def freeze_prefix(self, prefix: str) -> int:
        hits = self.group(prefix)
        if not hits:
            raise UsageError(f"freeze_prefix: no parameters under {prefix!r}")
        for _, t in hits:
            t.requires_grad = False
        return len(hits)

    def copy_values(self, src_prefix: str, dst_prefix: str) -> int:
        """Copy data src -> dst for every path suffix shared by both prefixes."""
        src = dict(self.group(src_prefix))
        if not src:
            raise UsageError(f"copy_values: no parameters under {src_prefix!r}")
        n = 0
        for name, tensor in src.items():
            suffix = name[len(src_prefix):]
            dst_name = dst_prefix + suffix
            self[dst_name].assign_(tensor.data)
            n += 1
        return n

    def total_parameters(self) -> int:
        return sum(t.size for t in self._entries.values())

    def zero_grad(self) -> None:
        for t in self._entries.values():
            t.grad = None


# -- initializers -------------------------------------------------------------


def he_normal(rng: SeededRng, shape, fan_in: int) -> np.ndarray:
    return rng.normal(shape, dtype=np.float32) * np.sqrt(2.0 / fan_in)


def xavier_normal(rng: SeededRng, shape, fan_in: int) -> np.ndarray:
    return rng.normal(shape, dtype=np.float32) * np.sqrt(1.0 / fan_in)


def orthogonal_rows(rng: SeededRng, rows: int, cols: int) -> np.ndarray:
    """Matrix (rows, cols) with orthonormal rows (requires rows <= cols)."""
    if rows > cols:
        raise UsageError(f"orthogonal_rows: rows {rows} > cols {cols}")
    a = rng.normal((cols, rows), dtype=np.float64)
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))  # fix the sign convention
    return q.T.astype(np.float32)
