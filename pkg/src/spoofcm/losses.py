"""One-class loss family and inference scoring.

Labels are integers: 0 = bonafide, 1 = spoof. The margin losses share one
per-sample form,

    l_i = log(1 + exp(alpha * (m_{y_i} - s_i) * (-1)^{y_i}))

so bonafide samples are penalized when their score falls below m0 and spoof
samples when it rises above m1. OC-Softmax scores against one learned unit
direction; SAMO scores against per-speaker attractors (nearest attractor
under maxscore, speaker-matched otherwise; spoof is always pushed from the
nearest). Class weights enter as per-sample multipliers inside the batch
mean, so weights of (1, 1) reproduce the unweighted loss bit-exactly.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

ATTRACTOR_MAGIC = b"ATR1"


class MissingAttractorError(KeyError):
    """A bonafide sample's speaker has no attractor (maxscore=false path)."""


@dataclass(frozen=True)
class ClassWeights:
    w_bonafide: float = 0.9
    w_spoof: float = 0.1

    def __post_init__(self) -> None:
        if self.w_bonafide <= 0 or self.w_spoof <= 0:
            raise ValueError("class weights must be positive")

    def per_sample(self, labels: np.ndarray) -> np.ndarray:
        return np.where(labels == 0, self.w_bonafide, self.w_spoof)


@dataclass
class OcSoftmaxParams:
    w: np.ndarray
    alpha: float = 20.0
    m0: float = 0.9
    m1: float = 0.2

    def __post_init__(self) -> None:
        self.w = np.asarray(self.w, dtype=np.float64)
        if self.m0 <= self.m1:
            raise ValueError("m0 must exceed m1")


@dataclass
class SamoConfig:
    alpha: float = 20.0
    m0: float = 0.7
    m1: float = 0.0
    update_interval: int = 1
    maxscore: bool = False
    use_enrollment: bool = True
    weighted: bool = False

    def __post_init__(self) -> None:
        if self.m0 <= self.m1:
            raise ValueError("m0 must exceed m1")
        if self.update_interval < 1:
            raise ValueError("update_interval must be >= 1")

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha, "m0": self.m0, "m1": self.m1,
            "update_interval": self.update_interval, "maxscore": self.maxscore,
            "use_enrollment": self.use_enrollment, "weighted": self.weighted,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SamoConfig":
        return cls(**d)


class AttractorSet:
    """Unit-norm attractors keyed by speaker, kept in sorted speaker order
    so argmax ties break toward the lexicographically lowest speaker."""

    def __init__(self, attractors: dict[str, np.ndarray]):
        if not attractors:
            raise ValueError("attractor set is empty")
        self.speakers: tuple[str, ...] = tuple(sorted(attractors))
        self.matrix = np.stack(
            [np.asarray(attractors[s], dtype=np.float64) for s in self.speakers])
        norms = np.linalg.norm(self.matrix, axis=1)
        if not np.all(np.abs(norms - 1.0) <= 1e-9):
            raise ValueError("attractors must be unit-norm")
        self._row = {s: i for i, s in enumerate(self.speakers)}

    @property
    def size(self) -> int:
        return len(self.speakers)

    def __contains__(self, speaker_id: str) -> bool:
        return speaker_id in self._row

    def get(self, speaker_id: str) -> np.ndarray:
        try:
            return self.matrix[self._row[speaker_id]]
        except KeyError:
            raise MissingAttractorError(speaker_id) from None

    def row(self, speaker_id: str) -> int:
        try:
            return self._row[speaker_id]
        except KeyError:
            raise MissingAttractorError(speaker_id) from None

    def content_hash(self) -> bytes:
        h = hashlib.sha256()
        for s in self.speakers:
            h.update(s.encode("utf-8"))
        h.update(np.ascontiguousarray(self.matrix).tobytes())
        return h.digest()


def _softplus(z: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, z)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _margin_loss_terms(scores: np.ndarray, labels: np.ndarray,
                       alpha: float, m0: float, m1: float):
    """Per-sample losses and d(loss)/d(score) for the shared margin form."""
    sign = np.where(labels == 0, 1.0, -1.0)          # (-1)^y
    margins = np.where(labels == 0, m0, m1)
    z = alpha * (margins - scores) * sign
    losses = _softplus(z)
    d_scores = _sigmoid(z) * alpha * (-sign)
    return losses, d_scores


def weighted_softmax_loss(logits: np.ndarray, labels: np.ndarray,
                          weights: ClassWeights | None):
    """Class-weighted cross entropy over 2-class logits.

    Returns (loss, grad_logits); grad is exact, including the 1/N mean and
    the per-sample weight.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.ndim != 2 or logits.shape[1] != 2:
        raise ValueError("logits must be (N, 2)")
    n = logits.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=1, keepdims=True)
    log_probs = shifted - np.log(exp.sum(axis=1, keepdims=True))
    u = weights.per_sample(labels) if weights is not None else np.ones(n)
    ce = -log_probs[np.arange(n), labels]
    loss = float(np.sum(u * ce) / n)
    grad = probs.copy()
    grad[np.arange(n), labels] -= 1.0
    grad *= (u / n)[:, None]
    return loss, grad


def oc_softmax_loss(params: OcSoftmaxParams, embeddings: np.ndarray,
                    labels: np.ndarray, weights: ClassWeights | None = None):
    """One-class margin loss against the learned direction w.

    Returns (loss, grad_embeddings, grad_w, scores). Gradients flow through
    the normalization of w; embeddings are assumed unit-norm.
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    n = embeddings.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    w_norm = float(np.linalg.norm(params.w))
    if w_norm == 0.0:
        raise ValueError("oc-softmax direction w has zero norm")
    w_hat = params.w / w_norm
    scores = embeddings @ w_hat
    losses, d_scores = _margin_loss_terms(
        scores, labels, params.alpha, params.m0, params.m1)
    u = weights.per_sample(labels) if weights is not None else np.ones(n)
    loss = float(np.sum(u * losses) / n)
    coeff = (u * d_scores) / n                        # (N,)
    grad_embeddings = np.outer(coeff, w_hat)
    # d(score_i)/dw = (x_i - (w_hat . x_i) w_hat) / ||w||
    grad_w = (coeff @ embeddings - float(coeff @ scores) * w_hat) / w_norm
    return loss, grad_embeddings, grad_w, scores


def samo_init_attractors(
        embeddings_by_speaker: dict[str, list[np.ndarray]]) -> AttractorSet:
    """Attractor per speaker: normalized mean of that speaker's embeddings."""
    if not embeddings_by_speaker:
        raise ValueError("no speakers given")
    attractors = {}
    for speaker, embs in embeddings_by_speaker.items():
        if len(embs) == 0:
            raise ValueError(f"speaker {speaker!r} has no embeddings")
        mean = np.mean(np.asarray(embs, dtype=np.float64), axis=0)
        nrm = float(np.linalg.norm(mean))
        if nrm == 0.0:
            raise ValueError(f"speaker {speaker!r} has a zero-norm mean embedding")
        attractors[speaker] = mean / nrm
    return AttractorSet(attractors)


def samo_update_attractors(state: AttractorSet, epoch: int, config: SamoConfig,
                           fresh_embeddings_by_speaker) -> AttractorSet:
    """Recompute all attractors on refresh epochs, otherwise pass through.

    Attractors are constants with respect to gradients; they only ever
    change through this function.
    """
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if epoch % config.update_interval != 0:
        return state
    return samo_init_attractors(fresh_embeddings_by_speaker)


def _samo_scores(state: AttractorSet, config: SamoConfig, embeddings: np.ndarray,
                 labels: np.ndarray, speaker_ids) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample score and the row of the attractor it came from."""
    sims = embeddings @ state.matrix.T               # (N, S)
    n = embeddings.shape[0]
    active_rows = np.empty(n, dtype=int)
    scores = np.empty(n)
    for i in range(n):
        if labels[i] == 1 or config.maxscore:
            # np.argmax takes the first maximum; rows are sorted by speaker,
            # so ties resolve to the lexicographically lowest speaker.
            row = int(np.argmax(sims[i]))
        else:
            row = state.row(speaker_ids[i])
        active_rows[i] = row
        scores[i] = sims[i, row]
    return scores, active_rows


def samo_loss(state: AttractorSet, config: SamoConfig, embeddings: np.ndarray,
              labels: np.ndarray, speaker_ids,
              weights: ClassWeights | None = None):
    """Speaker-attractor margin loss.

    Bonafide samples score against their own attractor (or the nearest one
    under maxscore); spoof samples always score against the nearest. The
    gradient flows through the selected attractor only (subgradient at the
    max). Returns (loss, grad_embeddings, scores).
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    n = embeddings.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    scores, active_rows = _samo_scores(state, config, embeddings, labels, speaker_ids)
    losses, d_scores = _margin_loss_terms(
        scores, labels, config.alpha, config.m0, config.m1)
    u = weights.per_sample(labels) if weights is not None else np.ones(n)
    loss = float(np.sum(u * losses) / n)
    coeff = (u * d_scores) / n
    grad_embeddings = coeff[:, None] * state.matrix[active_rows]
    return loss, grad_embeddings, scores


def samo_score(embedding: np.ndarray, attractors: AttractorSet) -> float:
    """Cosine similarity to the nearest attractor; invariant to positive
    rescaling of the embedding."""
    if attractors.size == 0:
        raise ValueError("empty attractor set")
    x = np.asarray(embedding, dtype=np.float64)
    nrm = float(np.linalg.norm(x))
    if nrm > 0:
        x = x / nrm
    return float(np.max(attractors.matrix @ x))


def oc_score(embedding: np.ndarray, params: OcSoftmaxParams) -> float:
    """Cosine similarity to the one-class direction."""
    w_norm = float(np.linalg.norm(params.w))
    if w_norm == 0.0:
        raise ValueError("oc-softmax direction w has zero norm")
    x = np.asarray(embedding, dtype=np.float64)
    nrm = float(np.linalg.norm(x))
    if nrm > 0:
        x = x / nrm
    return float((params.w / w_norm) @ x)


@dataclass
class SoftmaxHead:
    """Linear 2-class head on the embedding for the plain softmax mode."""

    weight: np.ndarray  # (D, 2)
    bias: np.ndarray    # (2,)

    def logits(self, embeddings: np.ndarray) -> np.ndarray:
        return np.asarray(embeddings, dtype=np.float64) @ self.weight + self.bias


def init_softmax_head(embed_dim: int, seed: int) -> SoftmaxHead:
    rng = np.random.default_rng(seed)
    limit = np.sqrt(6.0 / (embed_dim + 2))
    return SoftmaxHead(
        weight=rng.uniform(-limit, limit, size=(embed_dim, 2)),
        bias=np.zeros(2))


def softmax_posterior(head: SoftmaxHead, embedding: np.ndarray) -> float:
    """P(bonafide | embedding) under the softmax head."""
    logits = head.logits(embedding[None, :])[0]
    shifted = logits - logits.max()
    exp = np.exp(shifted)
    return float(exp[0] / exp.sum())


def write_attractors(path, attractors: AttractorSet) -> None:
    """Attractor file: magic ATR1, uint32 LE count and dim, then per entry a
    uint32-length-prefixed UTF-8 speaker id plus dim float64 LE values."""
    dim = attractors.matrix.shape[1]
    with open(path, "wb") as fh:
        fh.write(ATTRACTOR_MAGIC)
        fh.write(struct.pack("<II", attractors.size, dim))
        for speaker in attractors.speakers:
            sid = speaker.encode("utf-8")
            fh.write(struct.pack("<I", len(sid)))
            fh.write(sid)
            fh.write(np.ascontiguousarray(
                attractors.matrix[attractors.row(speaker)], dtype="<f8").tobytes())


def read_attractors(path) -> AttractorSet:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != ATTRACTOR_MAGIC:
            raise ValueError(f"bad attractor file magic {magic!r}")
        count, dim = struct.unpack("<II", fh.read(8))
        attractors = {}
        for _ in range(count):
            (sid_len,) = struct.unpack("<I", fh.read(4))
            speaker = fh.read(sid_len).decode("utf-8")
            vec = np.frombuffer(fh.read(dim * 8), dtype="<f8").copy()
            attractors[speaker] = vec
    return AttractorSet(attractors)
