"""FIFO cache semantics, top-k retrieval vs brute force, and weighting."""

from __future__ import annotations

import json

import numpy as np
import pytest

from retta.memory import ClassMemory, MemoryEntry, SupportSet, weigh
from retta.model import GradRecord


def unit(rng, d):
    v = rng.standard_normal(d)
    return v / np.linalg.norm(v)


def entry(rng, d=4, entropy=None, domain=None):
    return MemoryEntry(
        z=unit(rng, d),
        grad=GradRecord(rng.standard_normal(d), rng.standard_normal(d)),
        entropy=float(rng.uniform(0.0, 1.2)) if entropy is None else entropy,
        domain_id=domain,
    )


# ---------------------------------------------------------------- insert


def test_fifo_keeps_the_last_k():
    rng = np.random.default_rng(0)
    mem = ClassMemory(num_classes=2, capacity_per_class=2)
    entries = [entry(rng) for _ in range(3)]
    for e in entries:
        mem.insert(e, pseudo_label=0)
    held = list(mem.queues[0])
    assert len(held) == 2
    assert held[0] is entries[1] and held[1] is entries[2]


def test_insert_leaves_other_queues_untouched():
    rng = np.random.default_rng(1)
    mem = ClassMemory(num_classes=3, capacity_per_class=4)
    for _ in range(6):
        mem.insert(entry(rng), pseudo_label=0)
    assert len(mem.queues[1]) == 0 and len(mem.queues[2]) == 0


def test_interleaved_inserts_preserve_per_class_arrival_order():
    rng = np.random.default_rng(2)
    mem = ClassMemory(num_classes=3, capacity_per_class=50)
    arrivals = {c: [] for c in range(3)}  # replay oracle
    for _ in range(120):
        c = int(rng.integers(3))
        e = entry(rng)
        arrivals[c].append(e)
        mem.insert(e, pseudo_label=c)
    for c in range(3):
        expected = arrivals[c][-50:]
        assert [id(e) for e in mem.queues[c]] == [id(e) for e in expected]


def test_seq_strictly_increases_across_all_queues():
    rng = np.random.default_rng(3)
    mem = ClassMemory(num_classes=4, capacity_per_class=10)
    last = -1
    for _ in range(100):
        e = entry(rng)
        mem.insert(e, pseudo_label=int(rng.integers(4)))
        assert e.seq > last
        last = e.seq


def test_capacity_invariants_after_many_random_inserts():
    rng = np.random.default_rng(4)
    split = ClassMemory(num_classes=5, capacity_per_class=16)
    unsplit = ClassMemory(num_classes=5, capacity_per_class=16, split=False)
    for _ in range(10_000):
        c = int(rng.integers(5))
        e = entry(rng)
        split.insert(e, c)
        unsplit.insert(entry(rng), c)
        assert all(len(q) <= 16 for q in split.queues)
        assert len(unsplit.queues[0]) <= 5 * 16
    assert len(split) == 5 * 16
    assert len(unsplit) == 5 * 16


def test_insert_rejects_out_of_range_class():
    rng = np.random.default_rng(5)
    mem = ClassMemory(num_classes=2, capacity_per_class=4)
    with pytest.raises(ValueError, match="out of range"):
        mem.insert(entry(rng), pseudo_label=2)


def test_entry_rejects_off_unit_embedding():
    with pytest.raises(ValueError, match="norm"):
        MemoryEntry(z=np.array([1.0, 1.0]), grad=GradRecord(np.zeros(2), np.zeros(2)), entropy=0.5)


# ---------------------------------------------------------------- retrieve


def brute_force_retrieve(mem: ClassMemory, query: np.ndarray, k: int):
    """Full scan-and-sort per queue: the oracle `retrieve` must match.

    Similarities use the same stacked matrix-vector product as the engine so
    the comparison exercises the selection logic, not BLAS rounding.
    """
    budget = k if mem.split else mem.num_classes * k
    picked = []
    for q in mem.queues:
        if not q:
            continue
        entries = list(q)
        sims = np.stack([e.z for e in entries]) @ query
        scored = sorted(zip(sims, entries), key=lambda t: (-t[0], -t[1].seq))
        picked.extend(e for _, e in scored[: min(budget, len(scored))])
    return picked


def test_retrieve_saturates_to_whole_memory():
    rng = np.random.default_rng(6)
    mem = ClassMemory(num_classes=3, capacity_per_class=10)
    for _ in range(12):
        mem.insert(entry(rng), pseudo_label=int(rng.integers(3)))
    support = mem.retrieve(unit(rng, 4), k=50)
    assert len(support) == len(mem)


def test_query_equal_to_stored_embedding_ranks_first():
    rng = np.random.default_rng(7)
    mem = ClassMemory(num_classes=2, capacity_per_class=10)
    target = entry(rng)
    mem.insert(target, pseudo_label=0)
    for _ in range(9):
        mem.insert(entry(rng), pseudo_label=0)
    support = mem.retrieve(target.z, k=3)
    assert support.entries[0] is target


def test_retrieve_matches_brute_force_oracle():
    rng = np.random.default_rng(8)
    for trial in range(1000):
        C = int(rng.integers(2, 6))
        K = int(rng.integers(2, 51))
        split = bool(rng.integers(2))
        mem = ClassMemory(num_classes=C, capacity_per_class=K, split=split)
        d = int(rng.integers(2, 9))
        n = int(rng.integers(0, 120))
        pool = [unit(rng, d) for _ in range(max(n // 3, 1))]
        for _ in range(n):
            # reuse embeddings from a small pool so exact similarity ties occur
            z = pool[int(rng.integers(len(pool)))]
            e = MemoryEntry(z=z, grad=GradRecord(np.zeros(d), np.zeros(d)), entropy=0.1)
            mem.insert(e, pseudo_label=int(rng.integers(C)))
        query = pool[int(rng.integers(len(pool)))] if rng.random() < 0.5 else unit(rng, d)
        k = int(rng.integers(1, 8))
        got = mem.retrieve(query, k).entries
        expected = brute_force_retrieve(mem, query, k)
        assert [id(e) for e in got] == [id(e) for e in expected], f"trial {trial}"


def test_similarity_tie_breaks_to_more_recent_entry():
    rng = np.random.default_rng(9)
    mem = ClassMemory(num_classes=1, capacity_per_class=10)
    z = unit(rng, 4)
    older = MemoryEntry(z=z, grad=GradRecord(np.zeros(4), np.zeros(4)), entropy=0.1)
    newer = MemoryEntry(z=z.copy(), grad=GradRecord(np.zeros(4), np.zeros(4)), entropy=0.1)
    mem.insert(older, 0)
    mem.insert(newer, 0)
    support = mem.retrieve(z, k=1)
    assert support.entries[0] is newer


def test_unsplit_mode_retrieves_top_ck_from_single_queue():
    rng = np.random.default_rng(10)
    mem = ClassMemory(num_classes=3, capacity_per_class=20, split=False)
    for _ in range(50):
        mem.insert(entry(rng), pseudo_label=int(rng.integers(3)))
    support = mem.retrieve(unit(rng, 4), k=4)
    assert len(support) == 3 * 4


def test_empty_memory_returns_empty_support():
    mem = ClassMemory(num_classes=2, capacity_per_class=5)
    support = mem.retrieve(np.array([1.0, 0.0]), k=3)
    assert len(support) == 0


def test_retrieve_rejects_nonpositive_k():
    mem = ClassMemory(num_classes=2, capacity_per_class=5)
    with pytest.raises(ValueError, match="k"):
        mem.retrieve(np.array([1.0, 0.0]), k=0)


def test_split_retrieval_is_class_balanced_when_queues_are_warm():
    rng = np.random.default_rng(11)
    mem = ClassMemory(num_classes=4, capacity_per_class=20)
    for c in range(4):
        for _ in range(20):
            mem.insert(entry(rng), pseudo_label=c)
    support = mem.retrieve(unit(rng, 4), k=5)
    counts = {}
    for e in support.entries:
        counts[e.pseudo_class] = counts.get(e.pseudo_class, 0) + 1
    assert counts == {0: 5, 1: 5, 2: 5, 3: 5}


def test_sample_uniform_draws_without_replacement():
    rng = np.random.default_rng(12)
    mem = ClassMemory(num_classes=2, capacity_per_class=30)
    for c in range(2):
        for _ in range(30):
            mem.insert(entry(rng), pseudo_label=c)
    support = mem.sample_uniform(k=10, rng=np.random.default_rng(0))
    assert len(support) == 20
    assert len({id(e) for e in support.entries}) == 20
    per_class = {0: 0, 1: 0}
    for e in support.entries:
        per_class[e.pseudo_class] += 1
    assert per_class == {0: 10, 1: 10}


# ---------------------------------------------------------------- weigh


def test_weights_uniform_when_both_factors_collapse():
    rng = np.random.default_rng(13)
    entries = [entry(rng, entropy=0.0) for _ in range(5)]
    support = SupportSet(entries=entries)
    weighed = weigh(support, unit(rng, 4), beta=0.0)
    np.testing.assert_allclose(weighed.raw_weights, np.ones(5), atol=1e-15)
    np.testing.assert_allclose(weighed.weights, np.full(5, 0.2), atol=1e-15)


def test_zero_distance_entry_keeps_pure_entropy_weight():
    rng = np.random.default_rng(14)
    near = entry(rng, entropy=0.7)
    far = entry(rng, entropy=0.2)
    weighed = weigh(SupportSet(entries=[near, far]), near.z, beta=3.0)
    np.testing.assert_allclose(weighed.raw_weights[0], np.exp(-0.7), rtol=1e-15)


def test_weights_match_direct_formula_oracle():
    rng = np.random.default_rng(15)
    for _ in range(50):
        entries = [entry(rng) for _ in range(int(rng.integers(1, 12)))]
        query = unit(rng, 4)
        beta = float(rng.uniform(0.0, 8.0))
        weighed = weigh(SupportSet(entries=entries), query, beta)
        raw = np.array(
            [np.exp(-e.entropy) * np.exp(-beta * np.linalg.norm(query - e.z)) for e in entries]
        )
        np.testing.assert_allclose(weighed.raw_weights, raw, rtol=1e-14)
        np.testing.assert_allclose(weighed.weights, raw / raw.sum(), rtol=1e-12)
        assert abs(weighed.weights.sum() - 1.0) < 1e-12
        assert np.all(weighed.raw_weights > 0.0)


def test_weigh_is_permutation_equivariant():
    rng = np.random.default_rng(16)
    entries = [entry(rng) for _ in range(8)]
    query = unit(rng, 4)
    base = weigh(SupportSet(entries=entries), query, beta=4.0)
    perm = np.random.default_rng(1).permutation(8)
    shuffled = weigh(SupportSet(entries=[entries[i] for i in perm]), query, beta=4.0)
    # the normalizing sum's rounding depends on entry order, so equivariance
    # holds to machine precision rather than bitwise
    np.testing.assert_allclose(shuffled.weights, base.weights[perm], rtol=1e-14)
    np.testing.assert_allclose(shuffled.raw_weights, base.raw_weights[perm], rtol=1e-14)


def test_raising_beta_shifts_weight_toward_the_nearest_entry():
    rng = np.random.default_rng(17)
    for _ in range(30):
        entries = [entry(rng) for _ in range(6)]
        query = unit(rng, 4)
        dists = [np.linalg.norm(query - e.z) for e in entries]
        near, far = int(np.argmin(dists)), int(np.argmax(dists))
        prev_ratio = None
        for beta in (0.0, 1.0, 3.0, 9.0):
            w = weigh(SupportSet(entries=entries), query, beta).weights
            ratio = w[far] / w[near]
            if prev_ratio is not None:
                assert ratio <= prev_ratio * (1.0 + 1e-12)
            prev_ratio = ratio


def test_weighting_factors_can_be_disabled():
    rng = np.random.default_rng(18)
    entries = [entry(rng) for _ in range(4)]
    query = unit(rng, 4)
    no_ent = weigh(SupportSet(entries=entries), query, beta=2.0, entropy_weighting=False)
    expected = np.array([np.exp(-2.0 * np.linalg.norm(query - e.z)) for e in entries])
    np.testing.assert_allclose(no_ent.raw_weights, expected, rtol=1e-14)
    no_sim = weigh(SupportSet(entries=entries), query, beta=2.0, similarity_weighting=False)
    expected = np.array([np.exp(-e.entropy) for e in entries])
    np.testing.assert_allclose(no_sim.raw_weights, expected, rtol=1e-14)
    neither = weigh(SupportSet(entries=entries), query, beta=0.0,
                    entropy_weighting=False, similarity_weighting=False)
    np.testing.assert_allclose(neither.weights, 0.25, atol=1e-15)


def test_weigh_rejects_empty_support_and_negative_beta():
    rng = np.random.default_rng(19)
    with pytest.raises(ValueError, match="empty"):
        weigh(SupportSet(entries=[]), unit(rng, 4), beta=1.0)
    with pytest.raises(ValueError, match="beta"):
        weigh(SupportSet(entries=[entry(rng)]), unit(rng, 4), beta=-0.5)


def test_large_beta_normalization_survives_raw_underflow_threshold():
    # log-domain shift keeps normalized weights healthy even when raw values
    # span hundreds of orders of magnitude
    rng = np.random.default_rng(20)
    entries = [entry(rng, entropy=0.5) for _ in range(4)]
    query = entries[0].z
    weighed = weigh(SupportSet(entries=entries), query, beta=500.0)
    assert abs(weighed.weights.sum() - 1.0) < 1e-12
    assert weighed.weights[0] > 0.99


def test_with_raw_weights_normalizes_by_the_sum():
    rng = np.random.default_rng(21)
    entries = [entry(rng) for _ in range(3)]
    support = SupportSet(entries=entries).with_raw_weights(np.array([1.0, 3.0, 4.0]))
    np.testing.assert_allclose(support.weights, [0.125, 0.375, 0.5], atol=1e-15)
    with pytest.raises(ValueError, match="positive"):
        SupportSet(entries=entries).with_raw_weights(np.array([1.0, 0.0, 2.0]))


# ---------------------------------------------------------------- export


def test_snapshot_export_round_trips_metadata(tmp_path):
    rng = np.random.default_rng(22)
    mem = ClassMemory(num_classes=2, capacity_per_class=5)
    for i in range(6):
        mem.insert(entry(rng, domain=f"dom{i % 2}"), pseudo_label=i % 2)
    path = tmp_path / "snapshot.jsonl"
    mem.export_snapshot(path)
    rows = [json.loads(line) for line in path.read_text().splitlines()]
    assert len(rows) == 6
    assert {r["pseudo_class"] for r in rows} == {0, 1}
    assert all("z" not in r for r in rows)
    mem.export_snapshot(path, include_arrays=True)
    rows = [json.loads(line) for line in path.read_text().splitlines()]
    assert all(len(r["z"]) == 4 and len(r["d_weight"]) == 4 for r in rows)
