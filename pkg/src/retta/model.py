"""Normalized-feature classifier head with exact per-sample entropy gradients.

The model is deliberately tiny: a unit-norm feature vector goes through an
element-wise affine transform (scale and shift, the trainable part of a
normalization layer) and is scored against a fixed bank of unit-norm class
text embeddings by temperature-scaled inner products.  Softmax entropy of the
resulting distribution is the adaptation objective, and its gradient with
respect to the affine parameters has a closed form that this module computes
exactly (and can cross-check against central finite differences).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

UNIT_NORM_TOL = 1e-9


def _as_f64(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def _ensure_unit(v: np.ndarray, name: str, accept_tol: float, renormalize: bool) -> np.ndarray:
    """Return a unit vector, keeping bit-exact inputs that are already unit.

    Vectors within UNIT_NORM_TOL of unit norm pass through untouched so that
    serialization round-trips are exact; larger deviations are rescaled when
    `renormalize` is set or when they fall inside `accept_tol`, and rejected
    otherwise.
    """
    norm = float(np.linalg.norm(v))
    dev = abs(norm - 1.0)
    if dev <= UNIT_NORM_TOL:
        return v
    if renormalize or dev <= accept_tol:
        if norm == 0.0:
            raise ValueError(f"{name} has zero norm, cannot normalize")
        return v / norm
    raise ValueError(
        f"{name} has L2 norm {norm:.12g}, deviating from 1 by more than {accept_tol:g}"
    )


@dataclass(frozen=True)
class TextBank:
    """Fixed class text embeddings plus the log temperature of the logit scale.

    `embeddings` has one unit-norm row per class; logits are
    exp(log_temp) * (z . t_c).
    """

    embeddings: np.ndarray
    log_temp: float
    class_names: list[str]

    def __post_init__(self):
        emb = _as_f64(self.embeddings, "embeddings")
        if emb.ndim != 2:
            raise ValueError("embeddings must be a 2-D array of shape (C, d)")
        C, d = emb.shape
        if C < 2 or d < 2:
            raise ValueError(f"need at least 2 classes and 2 dimensions, got C={C}, d={d}")
        if len(self.class_names) != C:
            raise ValueError(f"{len(self.class_names)} class names for {C} embedding rows")
        norms = np.linalg.norm(emb, axis=1)
        if np.max(np.abs(norms - 1.0)) > UNIT_NORM_TOL:
            raise ValueError("every text embedding row must have unit L2 norm (tol 1e-9)")
        if not math.isfinite(self.log_temp):
            raise ValueError("log_temp must be finite")
        object.__setattr__(self, "embeddings", emb)

    @property
    def num_classes(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]


@dataclass(frozen=True)
class AffineParams:
    """Trainable element-wise scale and shift of the normalization layer."""

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        w = _as_f64(self.weight, "weight")
        b = _as_f64(self.bias, "bias")
        if w.ndim != 1 or b.shape != w.shape:
            raise ValueError("weight and bias must be 1-D arrays of equal length")
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)

    @classmethod
    def pretrained(cls, dim: int) -> "AffineParams":
        """Identity transform: all-ones scale, all-zeros shift."""
        return cls(weight=np.ones(dim), bias=np.zeros(dim))

    @property
    def dim(self) -> int:
        return self.weight.shape[0]


@dataclass(frozen=True)
class Sample:
    """One unit-norm feature from the stream.

    `true_label` and `domain_id` exist for evaluation only; the adaptation
    path never reads them.
    """

    feature: np.ndarray
    true_label: int | None = None
    domain_id: str | None = None

    def __post_init__(self):
        v = _as_f64(self.feature, "feature")
        if v.ndim != 1:
            raise ValueError("feature must be a 1-D vector")
        dev = abs(float(np.linalg.norm(v)) - 1.0)
        if dev > UNIT_NORM_TOL:
            raise ValueError(f"feature norm deviates from 1 by {dev:.3g} (tol 1e-9)")
        object.__setattr__(self, "feature", v)


@dataclass(frozen=True)
class Prediction:
    logits: np.ndarray
    probs: np.ndarray
    pseudo_label: int
    entropy: float


@dataclass(frozen=True)
class GradRecord:
    """Entropy gradient w.r.t. the affine scale (d_weight) and shift (d_bias)."""

    d_weight: np.ndarray
    d_bias: np.ndarray

    def __post_init__(self):
        gw = _as_f64(self.d_weight, "d_weight")
        gb = _as_f64(self.d_bias, "d_bias")
        if gw.ndim != 1 or gb.shape != gw.shape:
            raise ValueError("d_weight and d_bias must be 1-D arrays of equal length")
        object.__setattr__(self, "d_weight", gw)
        object.__setattr__(self, "d_bias", gb)


def forward(feature: np.ndarray, params: AffineParams) -> np.ndarray:
    """Element-wise affine transform z = v * weight + bias (not re-normalized)."""
    v = np.asarray(feature, dtype=np.float64)
    if v.shape != params.weight.shape:
        raise ValueError(f"feature dim {v.shape} does not match params dim {params.weight.shape}")
    return v * params.weight + params.bias


def _posterior(z: np.ndarray, bank: TextBank):
    """Logits, stabilized log-probs, probs, and entropy for an embedding."""
    if z.shape[0] != bank.dim:
        raise ValueError(f"embedding dim {z.shape[0]} does not match bank dim {bank.dim}")
    logits = math.exp(bank.log_temp) * (bank.embeddings @ z)
    if not np.all(np.isfinite(logits)):
        raise ValueError("non-finite logits")
    shifted = logits - np.max(logits)
    log_probs = shifted - math.log(float(np.sum(np.exp(shifted))))
    probs = np.exp(log_probs)
    # p * log p -> 0 as p -> 0; guard the 0 * -inf corner explicitly.
    plogp = np.where(probs > 0.0, probs * log_probs, 0.0)
    entropy = float(-np.sum(plogp))
    return logits, log_probs, probs, entropy


def predict(z: np.ndarray, bank: TextBank) -> Prediction:
    """Temperature-scaled cosine-logit softmax prediction for one embedding."""
    logits, _, probs, entropy = _posterior(np.asarray(z, dtype=np.float64), bank)
    return Prediction(
        logits=logits,
        probs=probs,
        pseudo_label=int(np.argmax(probs)),  # ties resolve to the lowest index
        entropy=entropy,
    )


def sample_grad(feature: np.ndarray, params: AffineParams, bank: TextBank) -> GradRecord:
    """Closed-form gradient of the prediction entropy w.r.t. the affine params.

    Chain rule through the softmax: dH/dl_c = -p_c (log p_c + H), then
    dH/dz = exp(log_temp) * T^T dH/dl, dH/dweight = dH/dz * v and
    dH/dbias = dH/dz.
    """
    v = np.asarray(feature, dtype=np.float64)
    z = forward(v, params)
    _, log_probs, probs, entropy = _posterior(z, bank)
    dH_dl = np.where(probs > 0.0, -probs * (log_probs + entropy), 0.0)
    dH_dz = math.exp(bank.log_temp) * (bank.embeddings.T @ dH_dl)
    if not np.all(np.isfinite(dH_dz)):
        raise ValueError("non-finite intermediate in entropy gradient")
    return GradRecord(d_weight=dH_dz * v, d_bias=dH_dz)


def batch_grads(
    batch: list[Sample], params: AffineParams, bank: TextBank
) -> list[tuple[Prediction, GradRecord]]:
    """Prediction and entropy gradient for each sample, order preserved.

    Every element is computed independently, so the output is identical for
    any partitioning of the batch.
    """
    if not batch:
        raise ValueError("batch must be non-empty")
    out = []
    for i, sample in enumerate(batch):
        try:
            pred = predict(forward(sample.feature, params), bank)
            grad = sample_grad(sample.feature, params, bank)
        except ValueError as exc:
            raise ValueError(f"batch element {i}: {exc}") from exc
        out.append((pred, grad))
    return out


def entropy_at(feature: np.ndarray, params: AffineParams, bank: TextBank) -> float:
    """Prediction entropy of a feature under the given affine params."""
    return predict(forward(feature, params), bank).entropy


def finite_diff_grad(
    feature: np.ndarray, params: AffineParams, bank: TextBank, step: float
) -> GradRecord:
    """Central-difference entropy gradient, the oracle for `sample_grad`.

    Deliberately a scalar loop over coordinates so it shares nothing with the
    closed-form path.
    """
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")
    v = np.asarray(feature, dtype=np.float64)
    d = params.dim
    gw = np.zeros(d)
    gb = np.zeros(d)
    for h in range(d):
        w_plus = params.weight.copy()
        w_minus = params.weight.copy()
        w_plus[h] += step
        w_minus[h] -= step
        gw[h] = (
            entropy_at(v, AffineParams(w_plus, params.bias), bank)
            - entropy_at(v, AffineParams(w_minus, params.bias), bank)
        ) / (2.0 * step)
        b_plus = params.bias.copy()
        b_minus = params.bias.copy()
        b_plus[h] += step
        b_minus[h] -= step
        gb[h] = (
            entropy_at(v, AffineParams(params.weight, b_plus), bank)
            - entropy_at(v, AffineParams(params.weight, b_minus), bank)
        ) / (2.0 * step)
    return GradRecord(d_weight=gw, d_bias=gb)


def load_text_bank(path: str | Path, renormalize: bool = False) -> TextBank:
    """Load a text bank from JSON: {"log_temp", "class_names", "embeddings"}.

    Rows whose norm deviates from 1 by more than 1e-6 are rejected unless
    `renormalize` is set; accepted off-unit rows are rescaled.
    """
    with open(path) as fh:
        data = json.load(fh)
    for key in ("log_temp", "class_names", "embeddings"):
        if key not in data:
            raise ValueError(f"text bank file missing field '{key}'")
    rows = [np.asarray(row, dtype=np.float64) for row in data["embeddings"]]
    if not rows:
        raise ValueError("text bank has no embedding rows")
    fixed = [_ensure_unit(row, f"embedding row {i}", accept_tol=1e-6, renormalize=renormalize)
             for i, row in enumerate(rows)]
    return TextBank(
        embeddings=np.stack(fixed),
        log_temp=float(data["log_temp"]),
        class_names=list(data["class_names"]),
    )


def save_text_bank(bank: TextBank, path: str | Path) -> None:
    payload = {
        "log_temp": bank.log_temp,
        "class_names": bank.class_names,
        "embeddings": [[float(x) for x in row] for row in bank.embeddings],
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True)
        fh.write("\n")
