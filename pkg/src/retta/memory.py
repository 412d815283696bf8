"""Class-split FIFO cache of embeddings and gradients, with top-k retrieval.

The cache keeps one FIFO queue per pseudo-class (or a single queue in the
unsplit ablation mode).  Each entry stores the embedding computed at the
pretrained parameters together with that sample's entropy gradient, so later
queries can assemble an update from cached pieces without re-running the
model.  Retrieval takes the most similar entries per class queue, which makes
the returned support set class-balanced by construction whenever the queues
are warm.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import GradRecord, UNIT_NORM_TOL


@dataclass
class MemoryEntry:
    """Embedding + cached gradient + entropy for one past sample.

    `seq` and `pseudo_class` are stamped by `ClassMemory.insert`.  `domain_id`
    is carried for analysis only and never read on the adaptation path.
    """

    z: np.ndarray
    grad: GradRecord
    entropy: float
    seq: int = -1
    domain_id: str | None = None
    pseudo_class: int = -1

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=np.float64)
        dev = abs(float(np.linalg.norm(self.z)) - 1.0)
        if dev > UNIT_NORM_TOL:
            raise ValueError(f"memory entry embedding norm deviates from 1 by {dev:.3g}")


@dataclass
class SupportSet:
    """Retrieved entries plus (optionally) their aggregation weights.

    `raw_weights` are the literal weighting-formula values; `weights` are
    normalized to sum to 1.  Both are None until `weigh` runs.  The stacked
    views (embeddings, entropies, gradients) are built lazily and reused so
    weighing and aggregation stay vectorized.
    """

    entries: list[MemoryEntry] = field(default_factory=list)
    raw_weights: np.ndarray | None = None
    weights: np.ndarray | None = None
    _stacks: dict | None = field(default=None, repr=False, compare=False)

    def __len__(self) -> int:
        return len(self.entries)

    def stacks(self) -> dict:
        """Stacked per-entry arrays: z (n,d), entropy (n,), d_weight, d_bias."""
        if self._stacks is None:
            self._stacks = {
                "z": np.stack([e.z for e in self.entries]),
                "entropy": np.array([e.entropy for e in self.entries]),
                "d_weight": np.stack([e.grad.d_weight for e in self.entries]),
                "d_bias": np.stack([e.grad.d_bias for e in self.entries]),
            }
        return self._stacks

    def with_raw_weights(self, raw: np.ndarray) -> "SupportSet":
        """Same entries with explicit raw weights, normalized by their sum."""
        raw = np.asarray(raw, dtype=np.float64)
        if raw.shape != (len(self.entries),):
            raise ValueError("one raw weight per support entry required")
        if not np.all(np.isfinite(raw)) or np.any(raw <= 0.0):
            raise ValueError("raw weights must be finite and strictly positive")
        return SupportSet(entries=list(self.entries), raw_weights=raw,
                          weights=raw / raw.sum(), _stacks=self._stacks)


class ClassMemory:
    """FIFO memory over pseudo-classes with oldest-first eviction.

    split mode: one queue per class, each holding at most `capacity_per_class`
    entries.  unsplit mode: a single queue of capacity C * K (the
    no-prediction-balance ablation).
    """

    def __init__(self, num_classes: int, capacity_per_class: int, split: bool = True):
        if num_classes < 1:
            raise ValueError("num_classes must be positive")
        if capacity_per_class < 1:
            raise ValueError("capacity_per_class must be positive")
        self.num_classes = num_classes
        self.capacity_per_class = capacity_per_class
        self.split = split
        if split:
            self.queues = [deque(maxlen=capacity_per_class) for _ in range(num_classes)]
        else:
            self.queues = [deque(maxlen=num_classes * capacity_per_class)]
        self._next_seq = 0
        self._stacked: list[dict | None] = [None] * len(self.queues)

    def __len__(self) -> int:
        return sum(len(q) for q in self.queues)

    def insert(self, entry: MemoryEntry, pseudo_label: int) -> None:
        """Append an entry to its pseudo-class queue, evicting the oldest if full.

        The pseudo-label must come from the zero-shot classifier at pretrained
        parameters, since that is the model state the cached values belong to.
        """
        if not 0 <= pseudo_label < self.num_classes:
            raise ValueError(
                f"pseudo_label {pseudo_label} out of range for {self.num_classes} classes"
            )
        entry.seq = self._next_seq
        self._next_seq += 1
        entry.pseudo_class = pseudo_label
        qi = pseudo_label if self.split else 0
        self.queues[qi].append(entry)
        self._stacked[qi] = None

    def _queue_snapshot(self, qi: int) -> dict:
        """Entry list and stacked per-entry arrays, cached until the next insert."""
        cached = self._stacked[qi]
        if cached is None:
            entries = list(self.queues[qi])
            cached = {
                "entries": entries,
                "z": np.stack([e.z for e in entries]),
                "seq": np.array([e.seq for e in entries], dtype=np.int64),
                "entropy": np.array([e.entropy for e in entries]),
                "d_weight": np.stack([e.grad.d_weight for e in entries]),
                "d_bias": np.stack([e.grad.d_bias for e in entries]),
            }
            self._stacked[qi] = cached
        return cached

    def _gather(self, picks: list[tuple[dict, np.ndarray]]) -> SupportSet:
        """Assemble a SupportSet (with stacked views) from per-queue selections."""
        entries: list[MemoryEntry] = []
        for snap, idx in picks:
            snap_entries = snap["entries"]
            entries.extend(snap_entries[int(i)] for i in idx)
        if not entries:
            return SupportSet(entries=[])
        stacks = {
            key: np.concatenate([snap[key][idx] for snap, idx in picks])
            for key in ("z", "entropy", "d_weight", "d_bias")
        }
        return SupportSet(entries=entries, _stacks=stacks)

    def _per_queue_budget(self, k: int) -> int:
        return k if self.split else self.num_classes * k

    def retrieve(self, query_z: np.ndarray, k: int) -> SupportSet:
        """Top-k most similar entries from each non-empty queue (weights unset).

        Similarity is the inner product with `query_z`; ties go to the more
        recent entry.  In unsplit mode the single queue contributes the top
        C * k.  An empty memory yields an empty support set.
        """
        if k <= 0:
            raise ValueError(f"k must be positive, got {k}")
        query = np.asarray(query_z, dtype=np.float64)
        budget = self._per_queue_budget(k)
        picks = []
        for qi, q in enumerate(self.queues):
            if not q:
                continue
            snap = self._queue_snapshot(qi)
            sims = snap["z"] @ query
            # lexsort: primary key last -> sims descending, then seq descending
            order = np.lexsort((-snap["seq"], -sims))
            picks.append((snap, order[: min(budget, len(order))]))
        return self._gather(picks)

    def sample_uniform(self, k: int, rng: np.random.Generator) -> SupportSet:
        """Uniform draw without replacement, same per-queue budget as `retrieve`.

        Used by the no-domain-consistency ablation in place of top-k.
        """
        if k <= 0:
            raise ValueError(f"k must be positive, got {k}")
        budget = self._per_queue_budget(k)
        picks = []
        for qi, q in enumerate(self.queues):
            if not q:
                continue
            snap = self._queue_snapshot(qi)
            take = min(budget, len(snap["entries"]))
            idx = rng.choice(len(snap["entries"]), size=take, replace=False)
            picks.append((snap, idx))
        return self._gather(picks)

    def export_snapshot(self, path: str | Path, include_arrays: bool = False) -> None:
        """Dump entries as JSONL: {seq, pseudo_class, entropy, domain_id}.

        Embeddings and gradients are omitted unless `include_arrays` is set.
        """
        with open(path, "w") as fh:
            for q in self.queues:
                for e in q:
                    rec = {
                        "seq": e.seq,
                        "pseudo_class": e.pseudo_class,
                        "entropy": e.entropy,
                        "domain_id": e.domain_id,
                    }
                    if include_arrays:
                        rec["z"] = [float(x) for x in e.z]
                        rec["d_weight"] = [float(x) for x in e.grad.d_weight]
                        rec["d_bias"] = [float(x) for x in e.grad.d_bias]
                    fh.write(json.dumps(rec, sort_keys=True))
                    fh.write("\n")


def weigh(
    support: SupportSet,
    query_z: np.ndarray,
    beta: float,
    entropy_weighting: bool = True,
    similarity_weighting: bool = True,
) -> SupportSet:
    """Set aggregation weights: raw_j = exp(-H_j) * exp(-beta * ||query - z_j||).

    Either factor can be disabled (replaced by the constant 1) for the
    weighting ablations.  Normalized weights are computed from max-shifted
    exponentials so large beta * distance terms cannot underflow them; the
    stored raw weights are the literal formula values.
    """
    if not support.entries:
        raise ValueError("cannot weigh an empty support set")
    if beta < 0:
        raise ValueError(f"beta must be non-negative, got {beta}")
    query = np.asarray(query_z, dtype=np.float64)
    stacks = support.stacks()
    log_raw = np.zeros(len(support.entries))
    if entropy_weighting:
        log_raw = log_raw - stacks["entropy"]
    if similarity_weighting:
        diff = stacks["z"] - query
        dists = np.sqrt(np.einsum("ij,ij->i", diff, diff))
        log_raw = log_raw - beta * dists
    if not np.all(np.isfinite(log_raw)):
        raise ValueError("non-finite aggregation weights (degenerate entropies or distances)")
    raw = np.exp(log_raw)
    shifted = np.exp(log_raw - np.max(log_raw))
    total = shifted.sum()
    if total == 0.0 or raw.sum() == 0.0:
        raise ValueError("all raw aggregation weights underflowed to zero")
    return SupportSet(entries=list(support.entries), raw_weights=raw,
                      weights=shifted / total, _stacks=stacks)
