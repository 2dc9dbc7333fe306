"""Append-only key/value cache.

One cache holds per-layer, per-kv-head K and V rows.  Positions are only
ever appended — sparsity acts per attention call through a Selection, never
by evicting cache entries.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError
from .linalg import DTYPE


class KVCache:
    """Per-layer, per-kv-head appendable K/V store.

    K and V always hold the same number of positions within every layer;
    appends are strictly monotone in position.  ``keys``/``values`` return
    read-only views, so callers can hold them across appends safely only
    within one chunk.
    """

    def __init__(self, layers: int, n_kv: int, d: int, capacity: int = 0):
        if layers < 1 or n_kv < 1 or d < 1:
            raise DimensionError("layers, n_kv and d must all be >= 1")
        self.layers = layers
        self.n_kv = n_kv
        self.d = d
        cap = max(int(capacity), 0)
        self._k = [np.empty((n_kv, cap, d), dtype=DTYPE) for _ in range(layers)]
        self._v = [np.empty((n_kv, cap, d), dtype=DTYPE) for _ in range(layers)]
        self._len = [0] * layers

    def length(self, layer: int) -> int:
        return self._len[layer]

    def _grow(self, layer: int, needed: int) -> None:
        cap = self._k[layer].shape[1]
        if needed <= cap:
            return
        new_cap = max(needed, 2 * cap, 8)
        for store in (self._k, self._v):
            grown = np.empty((self.n_kv, new_cap, self.d), dtype=DTYPE)
            grown[:, : self._len[layer]] = store[layer][:, : self._len[layer]]
            store[layer] = grown

    def append(self, layer: int, k_chunk: np.ndarray, v_chunk: np.ndarray) -> None:
        """Append one chunk of keys and values to ``layer``."""
        if k_chunk.shape != v_chunk.shape:
            raise DimensionError(f"K chunk {k_chunk.shape} != V chunk {v_chunk.shape}")
        if k_chunk.ndim != 3 or k_chunk.shape[0] != self.n_kv or k_chunk.shape[2] != self.d:
            raise DimensionError(f"chunk shape {k_chunk.shape} does not match cache ({self.n_kv}, *, {self.d})")
        n = self._len[layer]
        c = k_chunk.shape[1]
        self._grow(layer, n + c)
        self._k[layer][:, n : n + c] = k_chunk
        self._v[layer][:, n : n + c] = v_chunk
        self._len[layer] = n + c

    def keys(self, layer: int) -> np.ndarray:
        view = self._k[layer][:, : self._len[layer]]
        view.flags.writeable = False
        return view

    def values(self, layer: int) -> np.ndarray:
        view = self._v[layer][:, : self._len[layer]]
        view.flags.writeable = False
        return view
