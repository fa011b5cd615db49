"""Prior-weighted logistic-regression score fusion.

K subsystem scores per trial are combined into one affine fused score
f = b + w . s. Training minimizes the prior-weighted binary cross entropy

    C(w, b) = p/N_b * sum_bona softplus(-(f_i + theta))
            + (1-p)/N_s * sum_spoof softplus(f_i + theta),   theta = logit(p),

by full-batch gradient descent with Armijo backtracking from b=0, w=1/K.
The objective is convex, so the stopping rule (gradient inf-norm < 1e-8 or
10000 iterations) lands at the global optimum to tolerance.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .metrics import ScoreSet
from .protocol import ProtocolTable, label_to_int

GRAD_TOL = 1e-8
MAX_ITERS = 10000


@dataclass
class FusionModel:
    bias: float
    weights: np.ndarray
    effective_prior: float

    def __post_init__(self) -> None:
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 1 or self.weights.size < 1:
            raise ValueError("weights must be a non-empty vector")
        if not (np.isfinite(self.bias) and np.all(np.isfinite(self.weights))):
            raise ValueError("fusion parameters must be finite")


@dataclass
class ScoreMatrix:
    utt_ids: tuple[str, ...]
    matrix: np.ndarray   # (N, K)
    labels: np.ndarray   # (N,) 0 bonafide / 1 spoof


def align_scores(sets: list[ScoreSet], protocol: ProtocolTable) -> ScoreMatrix:
    """Stack K score sets into protocol-ordered rows.

    All sets must cover the same utt_id universe; rows follow protocol
    record order regardless of input file order.
    """
    if not sets:
        raise ValueError("need at least one score set")
    universe = set(sets[0].ids)
    for k, s in enumerate(sets[1:], start=1):
        other = set(s.ids)
        if other != universe:
            missing = sorted(universe ^ other)
            raise ValueError(
                f"score set {k} coverage mismatch; differing ids: "
                + ", ".join(missing))
    unknown = sorted(u for u in universe if u not in protocol)
    if unknown:
        raise ValueError("utt_ids not in protocol: " + ", ".join(unknown))
    ordered = [r.utt_id for r in protocol.records if r.utt_id in universe]
    matrix = np.column_stack([[s.score_of(u) for u in ordered] for s in sets])
    labels = np.array([label_to_int(protocol.get(u).label) for u in ordered])
    return ScoreMatrix(utt_ids=tuple(ordered), matrix=matrix, labels=labels)


def fusion_objective(matrix: np.ndarray, labels: np.ndarray, bias: float,
                     weights: np.ndarray, prior: float):
    """Objective value and its exact gradient (d_bias, d_weights)."""
    theta = np.log(prior / (1.0 - prior))
    f = bias + matrix @ weights + theta
    bona = labels == 0
    spoof = labels == 1
    n_b, n_s = int(bona.sum()), int(spoof.sum())

    def sigmoid(z):
        return 0.5 * (1.0 + np.tanh(0.5 * z))

    value = (prior / n_b * np.logaddexp(0.0, -f[bona]).sum()
             + (1.0 - prior) / n_s * np.logaddexp(0.0, f[spoof]).sum())
    d_f = np.zeros_like(f)
    d_f[bona] = -prior / n_b * sigmoid(-f[bona])
    d_f[spoof] = (1.0 - prior) / n_s * sigmoid(f[spoof])
    return float(value), float(d_f.sum()), d_f @ matrix


def train_fusion(m: ScoreMatrix, effective_prior: float = 0.05) -> FusionModel:
    """Fit the fusion by gradient descent with backtracking line search."""
    if not 0.0 < effective_prior < 1.0:
        raise ValueError("effective_prior must be in (0, 1)")
    if np.sum(m.labels == 0) == 0 or np.sum(m.labels == 1) == 0:
        raise ValueError("need both classes to train a fusion")
    k = m.matrix.shape[1]
    bias = 0.0
    weights = np.full(k, 1.0 / k)
    value, d_b, d_w = fusion_objective(m.matrix, m.labels, bias, weights,
                                       effective_prior)
    step = 1.0
    for _ in range(MAX_ITERS):
        grad_norm = max(abs(d_b), float(np.max(np.abs(d_w))) if k else 0.0)
        if grad_norm < GRAD_TOL:
            break
        sq = d_b * d_b + float(d_w @ d_w)
        # Armijo backtracking; the step carries over between iterations so
        # well-scaled problems rarely backtrack twice.
        step = min(step * 2.0, 1e8)
        accepted = False
        while step >= 1e-18:
            nb = bias - step * d_b
            nw = weights - step * d_w
            nv, nd_b, nd_w = fusion_objective(m.matrix, m.labels, nb, nw,
                                              effective_prior)
            if nv <= value - 1e-4 * step * sq:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        bias, weights, value, d_b, d_w = nb, nw, nv, nd_b, nd_w
    return FusionModel(bias=float(bias), weights=weights,
                       effective_prior=float(effective_prior))


def apply_fusion(model: FusionModel, row: np.ndarray):
    """Fused score b + w . s; accepts one row (K,) or a matrix (N, K)."""
    row = np.asarray(row, dtype=np.float64)
    if row.shape[-1] != model.weights.size:
        raise ValueError(
            f"expected {model.weights.size} subsystem scores, got {row.shape[-1]}")
    out = model.bias + row @ model.weights
    return float(out) if out.ndim == 0 else out


def save_fusion(path, model: FusionModel) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"bias": model.bias, "weights": model.weights.tolist(),
                   "prior": model.effective_prior}, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_fusion(path) -> FusionModel:
    with open(path, "r", encoding="utf-8") as fh:
        d = json.load(fh)
    return FusionModel(bias=float(d["bias"]),
                       weights=np.asarray(d["weights"], dtype=np.float64),
                       effective_prior=float(d["prior"]))
