"""Deterministic training loop.

Adam with bias correction, an epoch-granularity cosine learning-rate
schedule, per-epoch seeded shuffling (numpy PCG64, consumed in a fixed
order), SAMO attractor refresh on the configured interval at epoch start,
and best-dev-minDCF checkpoint selection. Given the same config and seed,
two runs produce byte-identical checkpoints and scores.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .embedder import (AmffParams, MlpParams, ModelConfig, backward, embed,
                       init_model, named_model_tensors, read_tensor_file,
                       write_tensor_file)
from .lfcc import read_features
from .losses import (AttractorSet, ClassWeights, OcSoftmaxParams, SamoConfig,
                     SoftmaxHead, init_softmax_head, oc_score,
                     oc_softmax_loss, read_attractors, samo_init_attractors,
                     samo_score, samo_update_attractors, samo_loss,
                     softmax_posterior, weighted_softmax_loss,
                     write_attractors)
from .metrics import DcfParams, ScoreSet, det_curve, eer, min_dcf
from .protocol import BONAFIDE, ProtocolTable, UtteranceRecord, label_to_int

LOSS_MODES = ("softmax", "oc_softmax", "samo")


class NonFiniteGradientError(RuntimeError):
    def __init__(self, tensor: str) -> None:
        super().__init__(f"non-finite gradient in tensor {tensor!r}")
        self.tensor = tensor


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: dict, grads: dict, lr: float):
    """Bias-corrected Adam update, in place on the parameter arrays."""
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape mismatch for {name!r}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        m_hat = m / (1.0 - state.beta1 ** t)
        v_hat = v / (1.0 - state.beta2 ** t)
        p -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params, state


@dataclass
class TrainConfig:
    base_lr: float = 1e-4
    epochs: int = 30
    batch_size: int = 32
    loss: str = "samo"
    samo: SamoConfig = field(default_factory=SamoConfig)
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    oc_alpha: float = 20.0
    oc_m0: float = 0.9
    oc_m1: float = 0.2
    weighted: bool = False
    class_weights: ClassWeights = field(default_factory=ClassWeights)
    dcf: DcfParams = field(default_factory=DcfParams)

    def __post_init__(self) -> None:
        if self.loss not in LOSS_MODES:
            raise ValueError(f"loss must be one of {LOSS_MODES}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")

    def to_dict(self) -> dict:
        return {
            "base_lr": self.base_lr, "epochs": self.epochs,
            "batch_size": self.batch_size, "loss": self.loss,
            "samo": self.samo.to_dict(), "seed": self.seed,
            "model": self.model.to_dict(),
            "oc_alpha": self.oc_alpha, "oc_m0": self.oc_m0, "oc_m1": self.oc_m1,
            "weighted": self.weighted,
            "class_weights": [self.class_weights.w_bonafide,
                              self.class_weights.w_spoof],
            "dcf": [self.dcf.c_miss, self.dcf.c_fa, self.dcf.p_target],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(
            base_lr=float(d["base_lr"]), epochs=int(d["epochs"]),
            batch_size=int(d["batch_size"]), loss=d["loss"],
            samo=SamoConfig.from_dict(d["samo"]), seed=int(d["seed"]),
            model=ModelConfig.from_dict(d["model"]),
            oc_alpha=float(d["oc_alpha"]), oc_m0=float(d["oc_m0"]),
            oc_m1=float(d["oc_m1"]), weighted=bool(d["weighted"]),
            class_weights=ClassWeights(*d["class_weights"]),
            dcf=DcfParams(*d["dcf"]))


def cosine_lr(epoch: int, config: TrainConfig) -> float:
    """base_lr * (1 + cos(pi * epoch / epochs)) / 2, per epoch."""
    if not 0 <= epoch < config.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {config.epochs})")
    return config.base_lr * 0.5 * (1.0 + np.cos(np.pi * epoch / config.epochs))


@dataclass
class Checkpoint:
    config: TrainConfig
    mlp: MlpParams
    amff: AmffParams | None
    oc: OcSoftmaxParams | None
    head: SoftmaxHead | None
    attractors: AttractorSet | None
    dev_min_dcf: float
    dev_eer: float
    epoch: int


@dataclass
class EpochStats:
    epoch: int
    lr: float
    mean_loss: float
    dev_eer: float
    dev_min_dcf: float
    best_min_dcf: float
    best_epoch: int


class FeatureDir:
    """Feature store over a directory of <utt_id>.lfc files, with caching."""

    def __init__(self, root):
        self.root = Path(root)
        self._cache: dict[str, np.ndarray] = {}

    def path_for(self, utt_id: str) -> Path:
        return self.root / f"{utt_id}.lfc"

    def __getitem__(self, utt_id: str) -> np.ndarray:
        if utt_id not in self._cache:
            path = self.path_for(utt_id)
            if not path.exists():
                raise FileNotFoundError(f"missing feature file {path}")
            self._cache[utt_id] = read_features(path)
        return self._cache[utt_id]


def _clone_model(mlp: MlpParams, amff: AmffParams | None):
    mlp_copy = MlpParams(
        hidden=[(w.copy(), b.copy()) for w, b in mlp.hidden],
        head=(mlp.head[0].copy(), mlp.head[1].copy()),
        projections=None if mlp.projections is None
        else [p.copy() for p in mlp.projections])
    amff_copy = None if amff is None else AmffParams(
        w1=amff.w1.copy(), b1=amff.b1.copy(),
        w2=amff.w2.copy(), b2=amff.b2.copy())
    return mlp_copy, amff_copy


def _embed_records(mlp, amff, records, features):
    embs, traces = [], []
    for rec in records:
        e, tr = embed(mlp, amff, features[rec.utt_id])
        embs.append(e)
        traces.append(tr)
    return np.array(embs), traces


def _bonafide_by_speaker(records, embeddings):
    out: dict[str, list[np.ndarray]] = {}
    for rec, emb in zip(records, embeddings):
        if rec.label == BONAFIDE:
            out.setdefault(rec.speaker_id, []).append(emb)
    return out


def score_records(loss_mode: str, mlp: MlpParams, amff: AmffParams | None,
                  oc: OcSoftmaxParams | None, head: SoftmaxHead | None,
                  attractors: AttractorSet | None,
                  records: list[UtteranceRecord], features) -> ScoreSet:
    """Deterministic per-utterance scores for the given loss mode."""
    entries = []
    for rec in records:
        e, _ = embed(mlp, amff, features[rec.utt_id])
        if loss_mode == "softmax":
            s = softmax_posterior(head, e)
        elif loss_mode == "oc_softmax":
            s = oc_score(e, oc)
        else:
            s = samo_score(e, attractors)
        entries.append((rec.utt_id, s))
    return ScoreSet(entries)


def _dev_metrics(config, loss_mode, mlp, amff, oc, head, attractors,
                 dev_records, features):
    """Dev scores and (eer, minDCF); SAMO with enrollment rebuilds the
    scoring attractors from the dev bonafide embeddings."""
    scoring_attractors = attractors
    if loss_mode == "samo" and config.samo.use_enrollment:
        embs, _ = _embed_records(mlp, amff, dev_records, features)
        by_spk = _bonafide_by_speaker(dev_records, embs)
        scoring_attractors = samo_init_attractors(by_spk)
    scores = score_records(loss_mode, mlp, amff, oc, head,
                           scoring_attractors, dev_records, features)
    labels = np.array([label_to_int(r.label) for r in dev_records])
    curve = det_curve(scores.values, labels)
    return scores, eer(curve)[0], min_dcf(curve, config.dcf)[0]


def _loss_tensors(loss_mode, oc, head):
    if loss_mode == "oc_softmax":
        return [("loss.w", oc.w)]
    if loss_mode == "softmax":
        return [("loss.head.w", head.weight), ("loss.head.b", head.bias)]
    return []


def train(protocol: ProtocolTable, features, config: TrainConfig,
          on_epoch=None) -> Checkpoint:
    """Run the full loop and return the best-dev-minDCF checkpoint."""
    train_records = protocol.for_partition("train")
    dev_records = protocol.for_partition("dev")
    if not train_records or not dev_records:
        raise ValueError("train and dev partitions must be non-empty")
    for recs, name in ((train_records, "train"), (dev_records, "dev")):
        labels = {r.label for r in recs}
        if len(labels) != 2:
            raise ValueError(f"{name} partition must contain both classes")

    mlp, amff = init_model(config.model, seed=config.seed)
    oc = head = None
    attractors = None
    if config.loss == "oc_softmax":
        rng_loss = np.random.default_rng(config.seed + 1)
        oc = OcSoftmaxParams(w=rng_loss.standard_normal(config.model.embed_dim),
                             alpha=config.oc_alpha, m0=config.oc_m0,
                             m1=config.oc_m1)
    elif config.loss == "softmax":
        head = init_softmax_head(config.model.embed_dim, config.seed + 1)

    if config.loss == "samo":
        weights = config.class_weights if config.samo.weighted else None
    else:
        weights = config.class_weights if config.weighted else None

    # Projections are fixed maps, never trained.
    params = {k: v for k, v in named_model_tensors(mlp, amff)
              if not k.startswith("projection.")}
    params.update(dict(_loss_tensors(config.loss, oc, head)))
    adam = AdamState()
    rng = np.random.default_rng(config.seed)

    best: Checkpoint | None = None
    n_train = len(train_records)
    for epoch in range(config.epochs):
        lr = cosine_lr(epoch, config)
        if config.loss == "samo" and epoch % config.samo.update_interval == 0:
            embs, _ = _embed_records(mlp, amff, train_records, features)
            by_spk = _bonafide_by_speaker(train_records, embs)
            if attractors is None:
                attractors = samo_init_attractors(by_spk)
            else:
                attractors = samo_update_attractors(
                    attractors, epoch, config.samo, by_spk)

        order = rng.permutation(n_train)
        loss_sum = 0.0
        for start in range(0, n_train, config.batch_size):
            batch_idx = order[start:start + config.batch_size]
            recs = [train_records[i] for i in batch_idx]
            embs, traces = _embed_records(mlp, amff, recs, features)
            labels = np.array([label_to_int(r.label) for r in recs])
            speaker_ids = [r.speaker_id for r in recs]

            grads: dict[str, np.ndarray] = {}
            if config.loss == "softmax":
                logits = head.logits(embs)
                loss, d_logits = weighted_softmax_loss(logits, labels, weights)
                grad_emb = d_logits @ head.weight.T
                grads["loss.head.w"] = embs.T @ d_logits
                grads["loss.head.b"] = d_logits.sum(axis=0)
            elif config.loss == "oc_softmax":
                loss, grad_emb, grad_w, _ = oc_softmax_loss(
                    oc, embs, labels, weights)
                grads["loss.w"] = grad_w
            else:
                loss, grad_emb, _ = samo_loss(
                    attractors, config.samo, embs, labels, speaker_ids, weights)

            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch {start // config.batch_size}")

            for trace, g_e in zip(traces, grad_emb):
                g = backward(trace, g_e)
                for i, (dw, db) in enumerate(g.hidden):
                    _accumulate(grads, f"hidden.{i}.w", dw)
                    _accumulate(grads, f"hidden.{i}.b", db)
                _accumulate(grads, "head.w", g.head[0])
                _accumulate(grads, "head.b", g.head[1])
                if g.amff is not None:
                    _accumulate(grads, "amff.w1", g.amff.w1)
                    _accumulate(grads, "amff.b1", g.amff.b1)
                    _accumulate(grads, "amff.w2", g.amff.w2)
                    _accumulate(grads, "amff.b2", g.amff.b2)

            try:
                adam_step(adam, params, grads, lr)
            except NonFiniteGradientError as err:
                raise TrainingDivergedError(
                    f"epoch {epoch}, batch {start // config.batch_size}: {err}"
                ) from err
            loss_sum += loss * len(recs)

        _, dev_eer_val, dev_dcf = _dev_metrics(
            config, config.loss, mlp, amff, oc, head, attractors,
            dev_records, features)

        if best is None or dev_dcf < best.dev_min_dcf:
            mlp_c, amff_c = _clone_model(mlp, amff)
            oc_c = None if oc is None else replace(oc, w=oc.w.copy())
            head_c = None if head is None else SoftmaxHead(
                weight=head.weight.copy(), bias=head.bias.copy())
            attr_c = attractors
            best = Checkpoint(config=config, mlp=mlp_c, amff=amff_c, oc=oc_c,
                              head=head_c, attractors=attr_c,
                              dev_min_dcf=dev_dcf, dev_eer=dev_eer_val,
                              epoch=epoch)
        if on_epoch is not None:
            on_epoch(EpochStats(
                epoch=epoch, lr=float(lr), mean_loss=loss_sum / n_train,
                dev_eer=dev_eer_val, dev_min_dcf=dev_dcf,
                best_min_dcf=best.dev_min_dcf, best_epoch=best.epoch))
    return best


def _accumulate(grads: dict, name: str, value: np.ndarray) -> None:
    if name in grads:
        grads[name] += value
    else:
        grads[name] = value.copy()


def _checkpoint_shapes(config: dict) -> list[tuple]:
    model = ModelConfig.from_dict(config["model"])
    shapes: list[tuple] = []
    prev = model.input_dim
    for width in model.hidden_dims:
        shapes.append((prev, width))
        shapes.append((width,))
        prev = width
    head_in = model.resolved_fuse_dim() if model.use_amff else prev
    shapes.append((head_in, model.embed_dim))
    shapes.append((model.embed_dim,))
    if model.use_amff:
        fuse = model.resolved_fuse_dim()
        for d in (model.input_dim, *model.hidden_dims):
            shapes.append((d, fuse))
        b = model.n_branches()
        b_r = max(1, b // model.amff_reduction)
        shapes.extend([(b, b_r), (b_r,), (b_r, b), (b,)])
    if config["loss"] == "oc_softmax":
        shapes.append((model.embed_dim,))
    elif config["loss"] == "softmax":
        shapes.extend([(model.embed_dim, 2), (2,)])
    return shapes


def save_checkpoint(prefix, ckpt: Checkpoint) -> None:
    """Write <prefix>.spk1 (+ .atr for SAMO) and a <prefix>.meta.json sidecar."""
    prefix = Path(prefix)
    spk_config = {
        "format": 1,
        "loss": ckpt.config.loss,
        "model": ckpt.config.model.to_dict(),
        "oc": None if ckpt.oc is None else {
            "alpha": ckpt.oc.alpha, "m0": ckpt.oc.m0, "m1": ckpt.oc.m1},
        "samo": None if ckpt.config.loss != "samo" else ckpt.config.samo.to_dict(),
    }
    tensors = [t for _, t in named_model_tensors(ckpt.mlp, ckpt.amff)]
    tensors.extend(t for _, t in _loss_tensors(ckpt.config.loss, ckpt.oc, ckpt.head))
    write_tensor_file(prefix.with_suffix(".spk1"), spk_config, tensors)
    if ckpt.attractors is not None:
        write_attractors(prefix.with_suffix(".atr"), ckpt.attractors)
    meta = {
        "epoch": ckpt.epoch,
        "dev_min_dcf": ckpt.dev_min_dcf,
        "dev_eer": ckpt.dev_eer,
        "train_config": ckpt.config.to_dict(),
    }
    with open(prefix.with_suffix(".meta.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_checkpoint(prefix) -> Checkpoint:
    prefix = Path(prefix)
    spk_config, tensors = read_tensor_file(
        prefix.with_suffix(".spk1"), _checkpoint_shapes)
    with open(prefix.with_suffix(".meta.json"), "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    config = TrainConfig.from_dict(meta["train_config"])
    model = config.model

    it = iter(tensors)
    hidden = [(next(it), next(it)) for _ in model.hidden_dims]
    head_pair = (next(it), next(it))
    projections = None
    amff = None
    if model.use_amff:
        projections = [next(it) for _ in range(model.n_branches())]
        amff = AmffParams(w1=next(it), b1=next(it), w2=next(it), b2=next(it))
    mlp = MlpParams(hidden=hidden, head=head_pair, projections=projections)
    oc = head = None
    if config.loss == "oc_softmax":
        oc_cfg = spk_config["oc"]
        oc = OcSoftmaxParams(w=next(it), alpha=oc_cfg["alpha"],
                             m0=oc_cfg["m0"], m1=oc_cfg["m1"])
    elif config.loss == "softmax":
        head = SoftmaxHead(weight=next(it), bias=next(it))
    attractors = None
    if config.loss == "samo":
        atr_path = prefix.with_suffix(".atr")
        if not atr_path.exists():
            raise FileNotFoundError(f"missing attractor file {atr_path}")
        attractors = read_attractors(atr_path)
    return Checkpoint(config=config, mlp=mlp, amff=amff, oc=oc, head=head,
                      attractors=attractors, dev_min_dcf=meta["dev_min_dcf"],
                      dev_eer=meta["dev_eer"], epoch=meta["epoch"])
