"""Evaluation reports, retrieval diagnostics, and numerical verifiers.

Covers four jobs: scoring a run (per-domain accuracies with macro averaging,
plus the domain-composition matrix of the retrieved support sets), the
similarity-decile same-domain statistic, an exact check of the closed-form
feature-importance prediction for one gradient-descent step in the binary
setting, and the cached-vs-recompute timing harness.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .adapter import AdapterConfig, AdaptOutcome, adapt_and_predict, gd_step, process_batch
from .memory import ClassMemory
from .model import (
    AffineParams,
    GradRecord,
    Sample,
    TextBank,
    forward,
    predict,
    sample_grad,
)


@dataclass
class EvalReport:
    """Run-level metrics; composition rows are percentages summing to 100."""

    per_domain_accuracy: dict[str, float]
    macro_average: float
    overall_accuracy: float
    domain_order: list[str]
    composition_matrix: np.ndarray
    same_domain_ratio_bins: np.ndarray | None = None
    timing: dict[str, float] | None = None

    def to_dict(self) -> dict:
        return {
            "per_domain_accuracy": self.per_domain_accuracy,
            "macro_average": self.macro_average,
            "overall_accuracy": self.overall_accuracy,
            "domain_order": self.domain_order,
            "composition_matrix": [[float(x) for x in row] for row in self.composition_matrix],
            "same_domain_ratio_bins": (
                None
                if self.same_domain_ratio_bins is None
                else [float(x) for x in self.same_domain_ratio_bins]
            ),
            "timing": self.timing,
        }


@dataclass
class ImportanceCheck:
    """Predicted vs measured feature-importance shift after one GD step.

    `second_moment` is the probability-weighted uncentered second-moment
    matrix of the support features (weights p0 * p1), with the temperature
    already folded into the text embeddings it is paired with.
    """

    eta: float
    predicted_importance: np.ndarray
    empirical_importance: np.ndarray
    max_abs_gap: float
    second_moment: np.ndarray
    diag_only_gap: float


def evaluate(
    samples: list[Sample],
    outcomes: list[AdaptOutcome],
    same_domain_ratio_bins: np.ndarray | None = None,
    timing: dict[str, float] | None = None,
) -> EvalReport:
    """Score a run: per-domain accuracy, macro average, and support composition.

    The macro average is the unweighted mean over domains.  Composition row i
    averages, over queries from domain i with non-empty support, the fraction
    of their support drawn from each domain (as percent).  Invariant to the
    order of (sample, outcome) pairs.
    """
    if len(samples) != len(outcomes):
        raise ValueError("need exactly one outcome per sample")
    for i, s in enumerate(samples):
        if s.true_label is None or s.domain_id is None:
            raise ValueError(f"sample {i} is missing true_label or domain_id")
    domains = sorted({s.domain_id for s in samples})
    dindex = {d: i for i, d in enumerate(domains)}
    D = len(domains)

    correct = {d: 0 for d in domains}
    totals = {d: 0 for d in domains}
    comp_sums = np.zeros((D, D))
    comp_counts = np.zeros(D)
    for s, o in zip(samples, outcomes):
        totals[s.domain_id] += 1
        if o.prediction.pseudo_label == s.true_label:
            correct[s.domain_id] += 1
        if o.support_domain_ids:
            row = np.zeros(D)
            for d in o.support_domain_ids:
                if d in dindex:
                    row[dindex[d]] += 1
            row_total = row.sum()
            if row_total > 0:
                comp_sums[dindex[s.domain_id]] += row / row_total
                comp_counts[dindex[s.domain_id]] += 1

    per_domain = {d: correct[d] / totals[d] for d in domains}
    composition = np.zeros((D, D))
    for i in range(D):
        if comp_counts[i] > 0:
            composition[i] = 100.0 * comp_sums[i] / comp_counts[i]
    return EvalReport(
        per_domain_accuracy=per_domain,
        macro_average=float(np.mean([per_domain[d] for d in domains])),
        overall_accuracy=sum(correct.values()) / len(samples),
        domain_order=domains,
        composition_matrix=composition,
        same_domain_ratio_bins=same_domain_ratio_bins,
        timing=timing,
    )


def similarity_bins(
    samples: list[Sample],
    num_bins: int = 10,
    max_pairs: int = 1_000_000,
    seed: int = 0,
) -> np.ndarray:
    """Same-domain fraction per similarity decile, highest similarity first.

    Pairs are subsampled (seeded) when their count exceeds `max_pairs`; the
    statistic is stable under subsampling.
    """
    domains = {s.domain_id for s in samples}
    if len(domains) < 2:
        raise ValueError("similarity bins need at least 2 domains")
    n = len(samples)
    total_pairs = n * (n - 1) // 2
    rng = np.random.default_rng(seed)
    if total_pairs <= max_pairs:
        ii, jj = np.triu_indices(n, k=1)
    else:
        ii = rng.integers(0, n, size=max_pairs)
        jj = rng.integers(0, n - 1, size=max_pairs)
        jj = np.where(jj >= ii, jj + 1, jj)  # j != i, uniform over ordered pairs
    feats = np.stack([s.feature for s in samples])
    sims = np.einsum("ij,ij->i", feats[ii], feats[jj])
    code_of = {d: i for i, d in enumerate(sorted(domains))}
    dom_codes = np.array([code_of[s.domain_id] for s in samples])
    same = dom_codes[ii] == dom_codes[jj]
    order = np.argsort(-sims, kind="stable")
    chunks = np.array_split(same[order], num_bins)
    return np.array([float(np.mean(c)) if len(c) else 0.0 for c in chunks])


def _scaled_text_delta(bank: TextBank) -> np.ndarray:
    """Temperature folded into the text embeddings: difference of scaled rows."""
    if bank.num_classes != 2:
        raise ValueError("the closed-form importance check needs exactly 2 classes")
    t_scaled = np.exp(bank.log_temp) * bank.embeddings
    return t_scaled[1] - t_scaled[0]


def second_moment_matrix(features: list[np.ndarray], bank: TextBank) -> np.ndarray:
    """Mean of (p0 * p1) * v v^T over the support, probabilities at pretrained."""
    d = bank.dim
    M = np.zeros((d, d))
    params0 = AffineParams.pretrained(d)
    for v in features:
        v = np.asarray(v, dtype=np.float64)
        p = predict(forward(v, params0), bank).probs
        M += (p[0] * p[1]) * np.outer(v, v)
    return M / len(features)


def verify_feature_importance(
    features: list[np.ndarray], bank: TextBank, eta: float
) -> ImportanceCheck:
    """Check the closed-form importance shift against an actual GD step.

    Binary setting, pretrained initialization, one plain gradient-descent step
    on the mean support entropy.  The prediction for the h-th importance is

        r_h = (1 + eta * dt_h * (M dt)_h) / (d + eta * dt^T M dt)

    with dt the temperature-scaled text-embedding difference and M the
    probability-weighted second moment.  Requires eta small enough that no
    scale coordinate changes sign.  `diag_only_gap` measures how far the
    diagonal-M simplification sits from the full quadratic form.
    """
    if not features:
        raise ValueError("need a non-empty support")
    dt = _scaled_text_delta(bank)
    d = bank.dim
    M = second_moment_matrix(features, bank)
    Mdt = M @ dt
    quad = float(dt @ Mdt)
    numerators = 1.0 + eta * dt * Mdt
    if np.any(numerators <= 0.0):
        raise ValueError(
            "learning rate too large: the step flips the sign of a scale coordinate"
        )
    predicted = numerators / (d + eta * quad)

    params0 = AffineParams.pretrained(d)
    grads = [sample_grad(np.asarray(v, dtype=np.float64), params0, bank) for v in features]
    mean_gw = np.mean(np.stack([g.d_weight for g in grads]), axis=0)
    mean_gb = np.mean(np.stack([g.d_bias for g in grads]), axis=0)
    stepped = gd_step(params0, GradRecord(mean_gw, mean_gb), eta)
    if np.any(stepped.weight <= 0.0):
        raise ValueError(
            "learning rate too large: the step flips the sign of a scale coordinate"
        )
    empirical = np.abs(stepped.weight) / np.sum(np.abs(stepped.weight))

    diag = np.diag(M)
    diag_predicted = (1.0 + eta * dt**2 * diag) / (d + eta * float(np.sum(dt**2 * diag)))
    return ImportanceCheck(
        eta=eta,
        predicted_importance=predicted,
        empirical_importance=empirical,
        max_abs_gap=float(np.max(np.abs(predicted - empirical))),
        second_moment=M,
        diag_only_gap=float(np.max(np.abs(diag_predicted - predicted))),
    )


def reflect_across_text_bisector(v: np.ndarray, bank: TextBank) -> np.ndarray:
    """Mirror a feature across the hyperplane orthogonal to t1 - t0.

    For unit text embeddings this swaps the two class probabilities, so a
    support made of such mirror pairs has a cancelling bias gradient.
    """
    delta = bank.embeddings[1] - bank.embeddings[0]
    delta = delta / np.linalg.norm(delta)
    v = np.asarray(v, dtype=np.float64)
    reflected = v - 2.0 * float(v @ delta) * delta
    return reflected / np.linalg.norm(reflected)


def bias_gradient_check(features: list[np.ndarray], bank: TextBank) -> float:
    """Max-abs coordinate of the mean bias gradient over a support."""
    if not features:
        raise ValueError("need a non-empty support")
    params0 = AffineParams.pretrained(bank.dim)
    grads = [sample_grad(np.asarray(v, dtype=np.float64), params0, bank) for v in features]
    mean_gb = np.mean(np.stack([g.d_bias for g in grads]), axis=0)
    return float(np.max(np.abs(mean_gb)))


def bench_cache(
    stream: list[Sample],
    cfg: AdapterConfig,
    bank: TextBank,
    num_queries: int = 100,
) -> dict[str, float]:
    """Per-sample wall time of the cached engine vs gradient recomputation.

    The memory is warmed with the whole stream first; both engines are then
    run over the same queries and their adapted logits asserted identical
    before anything is timed.
    """
    mem = ClassMemory(bank.num_classes, cfg.capacity_per_class, split=cfg.split_memory)
    rng = np.random.default_rng(cfg.seed)
    for start in range(0, len(stream), cfg.batch_size):
        process_batch(stream[start : start + cfg.batch_size], mem, cfg, bank, rng=rng)
    queries = stream[: min(num_queries, len(stream))]

    for q in queries:
        cached = adapt_and_predict(q, mem, cfg, bank, rng=rng, recompute_grads=False)
        naive = adapt_and_predict(q, mem, cfg, bank, rng=rng, recompute_grads=True)
        gap = np.max(np.abs(cached.prediction.logits - naive.prediction.logits))
        scale = max(float(np.max(np.abs(naive.prediction.logits))), 1e-300)
        if gap / scale > 1e-12:
            raise AssertionError(
                f"cached and recomputed engines disagree: rel err {gap / scale:.3e}"
            )

    t0 = time.perf_counter_ns()
    for q in queries:
        adapt_and_predict(q, mem, cfg, bank, rng=rng, recompute_grads=False)
    cached_ns = (time.perf_counter_ns() - t0) / len(queries)

    t0 = time.perf_counter_ns()
    for q in queries:
        adapt_and_predict(q, mem, cfg, bank, rng=rng, recompute_grads=True)
    naive_ns = (time.perf_counter_ns() - t0) / len(queries)

    return {"cached_ns_per_sample": cached_ns, "naive_ns_per_sample": naive_ns}


def write_report_files(report: EvalReport, out_dir: str | Path) -> list[Path]:
    """Write report.json, per_domain.csv, composition.csv, and bins.csv."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    report_path = out / "report.json"
    with open(report_path, "w") as fh:
        json.dump(report.to_dict(), fh, sort_keys=True, indent=2)
        fh.write("\n")
    written.append(report_path)

    per_domain_path = out / "per_domain.csv"
    with open(per_domain_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["domain", "accuracy"])
        for d in report.domain_order:
            writer.writerow([d, f"{report.per_domain_accuracy[d]:.6f}"])
        writer.writerow(["macro_average", f"{report.macro_average:.6f}"])
        writer.writerow(["overall", f"{report.overall_accuracy:.6f}"])
    written.append(per_domain_path)

    composition_path = out / "composition.csv"
    with open(composition_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["query_domain"] + list(report.domain_order))
        for d, row in zip(report.domain_order, report.composition_matrix):
            writer.writerow([d] + [f"{x:.4f}" for x in row])
    written.append(composition_path)

    bins_path = out / "bins.csv"
    with open(bins_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin", "same_domain_ratio"])
        if report.same_domain_ratio_bins is not None:
            for i, r in enumerate(report.same_domain_ratio_bins, start=1):
                writer.writerow([i, f"{r:.6f}"])
    written.append(bins_path)
    return written
