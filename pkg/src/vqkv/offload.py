"""Simulated two-tier KV cache with metered accesses.

The fast tier holds the per-head codebooks and codeword index vectors; the
slow tier holds full keys and values. Both live in host memory here, and the
split is enforced by the API: the decode path can only read slow-tier rows
through :meth:`TieredKvStore.gather`, which charges the ledger for exactly
the rows it returns.

Byte model per head and decode step (``e`` = element width, ``d`` = head dim)::

    fast tier   L * d * e + n * index_width    (codebook scan + index gather)
    slow tier   2 * |selected| * d * e         (selected keys and values)
    full equiv  2 * n * d * e                  (what dense attention would read)
"""

from __future__ import annotations

import json
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .attention import RetrievalPolicy, SelectionResult, approx_scores, gathered_attention, select_topk
from .codebook import Codebook, quantize
from .rope import RopeConfig, post_pe_keys, post_pe_query


@dataclass
class AccessLedger:
    slow_tier_bytes_read: int = 0
    fast_tier_bytes_read: int = 0
    full_attention_equivalent_bytes: int = 0
    transfer_events: int = 0
    steps: int = 0
    aux_mem: float = 0.0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def charge(self, slow: int = 0, fast: int = 0, full_equiv: int = 0, transfers: int = 0) -> None:
        if min(slow, fast, full_equiv, transfers) < 0:
            raise ValueError("ledger counters only move forward")
        with self._lock:
            self.slow_tier_bytes_read += slow
            self.fast_tier_bytes_read += fast
            self.full_attention_equivalent_bytes += full_equiv
            self.transfer_events += transfers

    def finish_step(self, aux_mem: float) -> None:
        with self._lock:
            self.steps += 1
            self.aux_mem = aux_mem

    def reset(self) -> None:
        with self._lock:
            self.slow_tier_bytes_read = self.fast_tier_bytes_read = 0
            self.full_attention_equivalent_bytes = self.transfer_events = self.steps = 0
            self.aux_mem = 0.0

    @property
    def sparsity(self) -> float:
        if self.full_attention_equivalent_bytes == 0:
            return 0.0
        return self.slow_tier_bytes_read / self.full_attention_equivalent_bytes

    def snapshot(self) -> dict:
        with self._lock:
            return {
                "slow_bytes": self.slow_tier_bytes_read,
                "fast_bytes": self.fast_tier_bytes_read,
                "full_equiv_bytes": self.full_attention_equivalent_bytes,
                "sparsity": self.sparsity,
                "aux_mem": self.aux_mem,
                "steps": self.steps,
            }

    def to_json(self) -> str:
        return json.dumps(self.snapshot(), sort_keys=True)


class TieredKvStore:
    """Per-head KV cache for one layer, split across a fast and a slow tier.

    Keys handed to :meth:`append_token` are pre-PE; the store applies the
    position embedding of ``rope`` (none when ``rope`` is ``None``) before
    caching and quantizing them. Appends are single-writer; readers work on
    snapshots and may run concurrently with each other.
    """

    def __init__(
        self,
        codebooks: Sequence[Codebook],
        rope: RopeConfig | None = None,
        element_width_bytes: int = 2,
        index_width_bytes: int = 2,
        capacity: int = 1024,
    ):
        if not codebooks:
            raise ValueError("need one codebook per head")
        dims = {cb.head_dim for cb in codebooks}
        if len(dims) != 1:
            raise ValueError("all codebooks must share head_dim")
        self.codebooks = tuple(codebooks)
        self.head_dim = dims.pop()
        if rope is not None and rope.head_dim != self.head_dim:
            raise ValueError("rope head_dim differs from codebook head_dim")
        self.rope = rope
        self.element_width_bytes = element_width_bytes
        self.index_width_bytes = index_width_bytes
        h, d = self.num_heads, self.head_dim
        self._keys = np.empty((h, capacity, d))
        self._values = np.empty((h, capacity, d))
        self._indices = np.empty((h, capacity), dtype=np.int64)
        self._n = 0
        self._lock = threading.Lock()

    @property
    def num_heads(self) -> int:
        return len(self.codebooks)

    def __len__(self) -> int:
        return self._n

    def _grow(self, needed: int) -> None:
        cap = self._keys.shape[1]
        if needed <= cap:
            return
        new_cap = max(needed, 2 * cap)
        h, d = self.num_heads, self.head_dim
        for name, shape, dtype in (
            ("_keys", (h, new_cap, d), np.float64),
            ("_values", (h, new_cap, d), np.float64),
            ("_indices", (h, new_cap), np.int64),
        ):
            old = getattr(self, name)
            new = np.empty(shape, dtype=dtype)
            new[:, : self._n] = old[:, : self._n]
            setattr(self, name, new)

    def extend(self, keys, values) -> None:
        """Append ``T`` tokens at once; ``keys``/``values`` have shape ``(heads, T, d)``."""
        keys = np.asarray(keys, dtype=np.float64)
        values = np.asarray(values, dtype=np.float64)
        h, d = self.num_heads, self.head_dim
        if keys.ndim != 3 or keys.shape[0] != h or keys.shape[2] != d or keys.shape != values.shape:
            raise ValueError(f"expected keys/values of shape ({h}, T, {d}), got {keys.shape} / {values.shape}")
        t = keys.shape[1]
        with self._lock:
            positions = np.arange(self._n, self._n + t)
            cached = post_pe_keys(keys, positions, self.rope)
            idx = np.stack([quantize(cached[i], cb) for i, cb in enumerate(self.codebooks)])
            self._grow(self._n + t)
            self._keys[:, self._n : self._n + t] = cached
            self._values[:, self._n : self._n + t] = values
            self._indices[:, self._n : self._n + t] = idx
            self._n += t

    def append_token(self, keys, values) -> "TieredKvStore":
        """Append one token; ``keys``/``values`` have shape ``(heads, d)``."""
        keys = np.asarray(keys, dtype=np.float64)
        values = np.asarray(values, dtype=np.float64)
        if keys.shape != (self.num_heads, self.head_dim) or values.shape != keys.shape:
            raise ValueError(f"expected ({self.num_heads}, {self.head_dim}) rows")
        self.extend(keys[:, None, :], values[:, None, :])
        return self

    # -- reads ---------------------------------------------------------------

    def indices(self, head: int) -> np.ndarray:
        """Fast-tier codeword index vector of ``head`` (read-only view)."""
        view = self._indices[head, : self._n]
        view.flags.writeable = False
        return view

    @property
    def fast_tier_bytes(self) -> int:
        return self._n * self.num_heads * self.index_width_bytes

    @property
    def codebook_bytes(self) -> int:
        return sum(cb.size * cb.head_dim * self.element_width_bytes for cb in self.codebooks)

    def approximate(self, head: int, post_pe_q, ledger: AccessLedger | None = None, n: int | None = None):
        n = self._n if n is None else n
        cb = self.codebooks[head]
        scores = approx_scores(post_pe_q, self._indices[head, :n], cb)
        if ledger is not None:
            ledger.charge(fast=cb.size * cb.head_dim * self.element_width_bytes + n * self.index_width_bytes)
        return scores

    def gather(self, head: int, rows, ledger: AccessLedger | None = None):
        """Selected key and value rows of ``head`` from the slow tier."""
        rows = np.asarray(rows, dtype=np.int64)
        if rows.size and (rows.min() < 0 or rows.max() >= self._n):
            raise IndexError("row index out of range")
        k = self._keys[head, rows]
        v = self._values[head, rows]
        if ledger is not None:
            ledger.charge(slow=2 * len(rows) * self.head_dim * self.element_width_bytes)
        return k, v


def aux_mem_ratio(store: TieredKvStore) -> float:
    """Index bytes relative to key bytes, per token and head."""
    return store.index_width_bytes / (store.head_dim * store.element_width_bytes)


@dataclass(frozen=True, eq=False)
class DecodeStepReport:
    selected_counts: tuple
    sparsity_ratio: float
    aux_mem_ratio: float
    outputs: np.ndarray
    selections: tuple = ()


def _run_item(store, item, position, ledger):
    head, query, selection = item
    rows = selection.selected_indices if isinstance(selection, SelectionResult) else np.asarray(selection)
    if len(rows) == 0:
        raise ValueError("empty selection")
    k, v = store.gather(head, rows, ledger)
    pos = len(store) - 1 if position is None else position
    return gathered_attention(query, k, v, rows, store.rope, pos)


def selective_attention_executor(items, store: TieredKvStore, position=None, workers: int = 1, ledger=None):
    """Run selective attention for a batch of ``(head, pre-PE query, selection)`` items.

    Each item is computed independently by the same code path, so outputs are
    bitwise identical for any ``workers``. A failing item yields its
    exception object in place of an output; other items are unaffected.
    """
    items = list(items)

    def run(item):
        try:
            return _run_item(store, item, position, ledger)
        except Exception as exc:  # isolate per-item failures
            return exc

    if workers <= 1 or len(items) <= 1:
        return [run(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run, items))


def decode_step(
    store: TieredKvStore,
    queries,
    policy: RetrievalPolicy,
    ledger: AccessLedger | None = None,
    position: int | None = None,
    workers: int = 1,
) -> DecodeStepReport:
    """Approximate, select and attend for every head.

    ``queries`` are pre-PE rows of shape ``(heads, d)``; ``position``
    defaults to the last cached token.
    """
    n = len(store)
    if n == 0:
        raise ValueError("decode step on an empty store")
    queries = np.asarray(queries, dtype=np.float64)
    if queries.shape != (store.num_heads, store.head_dim):
        raise ValueError(f"queries must have shape ({store.num_heads}, {store.head_dim})")
    if position is None:
        position = n - 1
    step = AccessLedger()
    selections = []
    for h in range(store.num_heads):
        q_pe = post_pe_query(queries[h], position, store.rope)
        scores = store.approximate(h, q_pe, step, n)
        selections.append(select_topk(scores, n, policy))
    outs = selective_attention_executor(
        [(h, queries[h], sel) for h, sel in enumerate(selections)], store, position, workers, step
    )
    for o in outs:
        if isinstance(o, Exception):
            raise o
    e, d = store.element_width_bytes, store.head_dim
    step.charge(full_equiv=store.num_heads * 2 * n * d * e, transfers=store.num_heads)
    aux = aux_mem_ratio(store)
    if ledger is not None:
        ledger.charge(
            slow=step.slow_tier_bytes_read,
            fast=step.fast_tier_bytes_read,
            full_equiv=step.full_attention_equivalent_bytes,
            transfers=step.transfer_events,
        )
        ledger.finish_step(aux)
    return DecodeStepReport(
        selected_counts=tuple(len(s) for s in selections),
        sparsity_ratio=step.sparsity,
        aux_mem_ratio=aux,
        outputs=np.stack(outs),
        selections=tuple(selections),
    )
