"""Key/value cache shared across recurrence depths.

Each position owns ``depth_slots`` ring-buffer slots per layer.  With the
default of one slot every recurrence overwrites the previous pair, so the
cache holds exactly one pair per position no matter how many recurrences
ran.  Larger values keep older recurrences around; reads always return the
most recently written slot, the other slots only count towards memory.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .errors import ContractViolation


class SharedKVCache:
    def __init__(self, num_layers: int, max_len: int, num_heads: int, head_dim: int,
                 depth_slots: int = 1, dtype=np.float64):
        if depth_slots < 1:
            raise ContractViolation("depth_slots must be >= 1")
        self.num_layers = num_layers
        self.max_len = max_len
        self.num_heads = num_heads
        self.head_dim = head_dim
        self.depth_slots = depth_slots
        self.dtype = np.dtype(dtype)
        shape = (num_layers, max_len, depth_slots, num_heads, head_dim)
        self._k = np.zeros(shape, dtype=self.dtype)
        self._v = np.zeros(shape, dtype=self.dtype)
        # per layer/position: number of writes so far, and which slot is newest
        self._writes = np.zeros((num_layers, max_len), dtype=np.int64)
        self._latest = np.zeros((num_layers, max_len), dtype=np.int64)
        self._filled = np.zeros((num_layers, max_len, depth_slots), dtype=bool)
        self.frozen_len = 0

    # ------------------------------------------------------------------ writes
    def write(self, layer: int, position: int, key, value, step: int | None = None) -> None:
        """Store one (key, value) pair; ``step`` picks the ring slot (defaults to the write count)."""
        self.write_rows(layer, np.array([position]), np.asarray(key)[None], np.asarray(value)[None],
                        None if step is None else np.array([step]))

    def write_rows(self, layer: int, positions: np.ndarray, keys: np.ndarray, values: np.ndarray,
                   steps: np.ndarray | None = None) -> None:
        positions = np.asarray(positions, dtype=np.int64)
        if positions.size == 0:
            return
        if positions.min() < self.frozen_len:
            raise ContractViolation(
                f"write to frozen position {int(positions.min())} (frozen_len={self.frozen_len})")
        if positions.max() >= self.max_len:
            raise ContractViolation(f"position {int(positions.max())} exceeds cache length {self.max_len}")
        if steps is None:
            steps = self._writes[layer, positions]
        slots = np.asarray(steps, dtype=np.int64) % self.depth_slots
        self._k[layer, positions, slots] = keys
        self._v[layer, positions, slots] = values
        self._latest[layer, positions] = slots
        self._filled[layer, positions, slots] = True
        self._writes[layer, positions] += 1

    def commit(self, up_to_position: int) -> None:
        """Mark positions ``< up_to_position`` as frozen; their newest pair becomes permanent."""
        if up_to_position < self.frozen_len:
            raise ContractViolation(
                f"commit({up_to_position}) would regress frozen_len={self.frozen_len}")
        if up_to_position > self.max_len:
            raise ContractViolation(f"commit beyond cache length {self.max_len}")
        self.frozen_len = up_to_position

    # ------------------------------------------------------------------- reads
    def keys_values(self, layer: int, length: int) -> tuple[np.ndarray, np.ndarray]:
        """Newest key/value arrays for positions ``[0, length)``, shape (length, heads, head_dim)."""
        if self.depth_slots == 1:
            return self._k[layer, :length, 0], self._v[layer, :length, 0]
        idx = np.arange(length)
        slots = self._latest[layer, :length]
        return self._k[layer, idx, slots], self._v[layer, idx, slots]

    def attend_view(self, layer: int, query_position: int) -> list[tuple[np.ndarray, np.ndarray]]:
        """Pairs a query at ``query_position`` may attend to, in position order."""
        written = self._writes[layer, :query_position + 1] > 0
        out = []
        for pos in np.flatnonzero(written):
            slot = self._latest[layer, pos]
            out.append((self._k[layer, pos, slot].copy(), self._v[layer, pos, slot].copy()))
        return out

    # -------------------------------------------------------------- accounting
    def stored_pairs(self, layer: int | None = None) -> int:
        if layer is None:
            return int(self._filled.sum())
        return int(self._filled[layer].sum())

    @property
    def pair_bytes(self) -> int:
        return 2 * self.num_heads * self.head_dim * self.dtype.itemsize

    def nbytes(self) -> int:
        """Logical footprint: bytes of every slot that has been written."""
        return self.stored_pairs() * self.pair_bytes

    def write_count(self, layer: int, position: int) -> int:
        return int(self._writes[layer, position])

    def snapshot(self) -> tuple:
        """Hashable-ish copy of the visible state, used for replay checks."""
        n = int((self._writes.sum(axis=0) > 0).sum())
        kv = [self.keys_values(layer, n) for layer in range(self.num_layers)]
        return self.frozen_len, [(k.copy(), v.copy()) for k, v in kv]

    def dump_csv(self, prefix: str | Path) -> list[Path]:
        """Write ``<prefix>_layer<i>.csv`` files with position, slot and key/value norms."""
        prefix = Path(prefix)
        paths = []
        for layer in range(self.num_layers):
            path = prefix.parent / f"{prefix.name}_layer{layer}.csv"
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["position", "slot", "key_norm", "value_norm"])
                for pos, slot in zip(*np.nonzero(self._filled[layer])):
                    w.writerow([int(pos), int(slot),
                                float(np.linalg.norm(self._k[layer, pos, slot])),
                                float(np.linalg.norm(self._v[layer, pos, slot]))])
            paths.append(path)
        return paths
