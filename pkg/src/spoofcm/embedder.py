"""Embedding network: statistics pooling, small MLP, optional AMFF gate.

Features are pooled over time (mean || population std), pushed through a
ReLU MLP, and L2-normalized into a unit embedding. With AMFF enabled, the
pooled input and every hidden activation form feature branches; each branch
is mapped to a common width by a fixed (untrained) projection, a
squeeze-style gate (average pool -> FC -> ReLU -> FC -> Sigmoid) weights the
branches, and the head consumes the gated sum instead of the last hidden
activation.

Forward and backward are fully analytic; ForwardTrace carries everything
the backward pass needs so no re-forward ever happens.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

CHECKPOINT_MAGIC = b"SPK1"
NORM_EPS = 1e-12


@dataclass
class ModelConfig:
    input_dim: int = 240
    hidden_dims: tuple[int, ...] = (128, 64)
    embed_dim: int = 32
    use_amff: bool = False
    fuse_dim: int | None = None      # defaults to the last hidden width
    amff_reduction: int = 2

    def resolved_fuse_dim(self) -> int:
        if self.fuse_dim is not None:
            return self.fuse_dim
        return self.hidden_dims[-1]

    def n_branches(self) -> int:
        return 1 + len(self.hidden_dims)

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_dims": list(self.hidden_dims),
            "embed_dim": self.embed_dim,
            "use_amff": self.use_amff,
            "fuse_dim": self.fuse_dim,
            "amff_reduction": self.amff_reduction,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            input_dim=int(d["input_dim"]),
            hidden_dims=tuple(d["hidden_dims"]),
            embed_dim=int(d["embed_dim"]),
            use_amff=bool(d["use_amff"]),
            fuse_dim=d["fuse_dim"],
            amff_reduction=int(d["amff_reduction"]),
        )


@dataclass
class AmffParams:
    """Gate parameters: descriptor (B,) -> fc1 -> ReLU -> fc2 -> Sigmoid."""

    w1: np.ndarray  # (B, B_r)
    b1: np.ndarray  # (B_r,)
    w2: np.ndarray  # (B_r, B)
    b2: np.ndarray  # (B,)

    @property
    def n_branches(self) -> int:
        return self.w1.shape[0]


@dataclass
class MlpParams:
    """Weight layout: x @ W + b with W shaped (in, out)."""

    hidden: list[tuple[np.ndarray, np.ndarray]]
    head: tuple[np.ndarray, np.ndarray]
    projections: list[np.ndarray] | None = None  # fixed branch maps, AMFF only


@dataclass
class AmffGrads:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray


@dataclass
class Gradients:
    hidden: list[tuple[np.ndarray, np.ndarray]]
    head: tuple[np.ndarray, np.ndarray]
    amff: AmffGrads | None = None


@dataclass
class ForwardTrace:
    mlp: MlpParams
    amff: AmffParams | None
    pooled: np.ndarray
    pre_acts: list[np.ndarray]
    acts: list[np.ndarray]
    head_input: np.ndarray
    raw_embedding: np.ndarray
    norm: float
    clipped: bool
    embedding: np.ndarray
    branches: list[np.ndarray] | None = None
    descriptor: np.ndarray | None = None
    gate_pre1: np.ndarray | None = None
    gate_hidden: np.ndarray | None = None
    gates: np.ndarray | None = None


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_model(config: ModelConfig, seed: int) -> tuple[MlpParams, AmffParams | None]:
    """Seeded Glorot-uniform weights, zero biases, fixed AMFF projections."""
    rng = np.random.default_rng(seed)
    hidden = []
    prev = config.input_dim
    for width in config.hidden_dims:
        hidden.append((_glorot(rng, prev, width), np.zeros(width)))
        prev = width

    if not config.use_amff:
        head = (_glorot(rng, prev, config.embed_dim), np.zeros(config.embed_dim))
        return MlpParams(hidden=hidden, head=head), None

    if config.n_branches() < 2:
        raise ValueError("AMFF needs at least two branches (>=1 hidden layer)")
    fuse = config.resolved_fuse_dim()
    branch_dims = [config.input_dim, *config.hidden_dims]
    projections = [_glorot(rng, d, fuse) for d in branch_dims]
    head = (_glorot(rng, fuse, config.embed_dim), np.zeros(config.embed_dim))
    b = config.n_branches()
    b_r = max(1, b // config.amff_reduction)
    amff = AmffParams(
        w1=_glorot(rng, b, b_r), b1=np.zeros(b_r),
        w2=_glorot(rng, b_r, b), b2=np.zeros(b))
    return MlpParams(hidden=hidden, head=head, projections=projections), amff


def pool_stats(features: np.ndarray) -> np.ndarray:
    """Temporal mean and population std per coefficient, concatenated."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] < 2:
        raise ValueError("need a (frames, dims) matrix with frames >= 2")
    return np.concatenate([features.mean(axis=0), features.std(axis=0)])


def amff_fuse(params: AmffParams, branches: list[np.ndarray],
              bypass: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Gate and sum the branches; with bypass=True all gates are forced to 1."""
    (fused, gates), _ = _amff_forward(params, branches, bypass)
    return fused, gates


def _amff_forward(params: AmffParams, branches: list[np.ndarray], bypass: bool = False):
    if len(branches) != params.n_branches:
        raise ValueError(
            f"expected {params.n_branches} branches, got {len(branches)}")
    dim = branches[0].shape[0]
    for b in branches[1:]:
        if b.shape != (dim,):
            raise ValueError("branches must share a common dimension")
    stack = np.stack(branches)                       # (B, F)
    descriptor = stack.mean(axis=1)                  # (B,)
    pre1 = descriptor @ params.w1 + params.b1
    hid = np.maximum(pre1, 0.0)
    pre2 = hid @ params.w2 + params.b2
    gates = np.ones_like(pre2) if bypass else 1.0 / (1.0 + np.exp(-pre2))
    fused = gates @ stack                            # (F,)
    return (fused, gates), (stack, descriptor, pre1, hid)


def embed(mlp: MlpParams, amff: AmffParams | None,
          features: np.ndarray) -> tuple[np.ndarray, ForwardTrace]:
    """Unit-norm embedding plus the trace needed for an exact backward pass."""
    pooled = pool_stats(features)
    pre_acts, acts = [], []
    h = pooled
    for w, b in mlp.hidden:
        z = h @ w + b
        pre_acts.append(z)
        h = np.maximum(z, 0.0)
        acts.append(h)

    branches = descriptor = pre1 = hid = gates = None
    if amff is not None:
        if mlp.projections is None:
            raise ValueError("AMFF requires projection matrices in MlpParams")
        raw_branches = [pooled, *acts]
        branches = [r @ p for r, p in zip(raw_branches, mlp.projections)]
        (fused, gates), (_, descriptor, pre1, hid) = _amff_forward(amff, branches)
        head_input = fused
    else:
        head_input = acts[-1] if acts else pooled

    w, b = mlp.head
    raw = head_input @ w + b
    nrm = float(np.linalg.norm(raw))
    clipped = nrm <= NORM_EPS
    denom = NORM_EPS if clipped else nrm
    embedding = raw / denom
    trace = ForwardTrace(
        mlp=mlp, amff=amff, pooled=pooled, pre_acts=pre_acts, acts=acts,
        head_input=head_input, raw_embedding=raw, norm=denom, clipped=clipped,
        embedding=embedding, branches=branches, descriptor=descriptor,
        gate_pre1=pre1, gate_hidden=hid, gates=gates)
    return embedding, trace


def backward(trace: ForwardTrace, grad_embedding: np.ndarray) -> Gradients:
    """Exact reverse-mode gradients for all trainable parameters."""
    grad_embedding = np.asarray(grad_embedding, dtype=np.float64)
    if grad_embedding.shape != trace.embedding.shape:
        raise ValueError("grad_embedding shape mismatch")
    mlp, amff = trace.mlp, trace.amff

    if trace.clipped:
        d_raw = grad_embedding / trace.norm
    else:
        e = trace.embedding
        d_raw = (grad_embedding - e * (e @ grad_embedding)) / trace.norm

    w_head, _ = mlp.head
    d_head_w = np.outer(trace.head_input, d_raw)
    d_head_b = d_raw.copy()
    d_head_in = d_raw @ w_head.T

    n_hidden = len(mlp.hidden)
    d_acts = [np.zeros_like(a) for a in trace.acts]
    d_pooled = np.zeros_like(trace.pooled)
    amff_grads = None

    if amff is not None:
        stack = np.stack(trace.branches)            # (B, F)
        d_gates = stack @ d_head_in                 # (B,)
        d_stack = trace.gates[:, None] * d_head_in[None, :]
        g = trace.gates
        d_pre2 = d_gates * g * (1.0 - g)
        d_w2 = np.outer(trace.gate_hidden, d_pre2)
        d_b2 = d_pre2.copy()
        d_hid = d_pre2 @ amff.w2.T
        d_pre1 = d_hid * (trace.gate_pre1 > 0.0)
        d_w1 = np.outer(trace.descriptor, d_pre1)
        d_b1 = d_pre1.copy()
        d_desc = d_pre1 @ amff.w1.T
        d_stack += d_desc[:, None] / stack.shape[1]
        amff_grads = AmffGrads(w1=d_w1, b1=d_b1, w2=d_w2, b2=d_b2)
        for idx, proj in enumerate(mlp.projections):
            d_branch_raw = d_stack[idx] @ proj.T
            if idx == 0:
                d_pooled += d_branch_raw
            else:
                d_acts[idx - 1] += d_branch_raw
    else:
        if n_hidden:
            d_acts[-1] += d_head_in
        else:
            d_pooled += d_head_in

    d_hidden: list[tuple[np.ndarray, np.ndarray]] = [None] * n_hidden
    for i in range(n_hidden - 1, -1, -1):
        d_z = d_acts[i] * (trace.pre_acts[i] > 0.0)
        prev = trace.acts[i - 1] if i > 0 else trace.pooled
        d_hidden[i] = (np.outer(prev, d_z), d_z.copy())
        w, _ = mlp.hidden[i]
        if i > 0:
            d_acts[i - 1] += d_z @ w.T
        else:
            d_pooled += d_z @ w.T

    return Gradients(hidden=d_hidden, head=(d_head_w, d_head_b), amff=amff_grads)


def named_model_tensors(mlp: MlpParams, amff: AmffParams | None) -> list[tuple[str, np.ndarray]]:
    """Declaration-order tensor list; the checkpoint format relies on it."""
    out = []
    for i, (w, b) in enumerate(mlp.hidden):
        out.append((f"hidden.{i}.w", w))
        out.append((f"hidden.{i}.b", b))
    out.append(("head.w", mlp.head[0]))
    out.append(("head.b", mlp.head[1]))
    if mlp.projections is not None:
        for i, p in enumerate(mlp.projections):
            out.append((f"projection.{i}", p))
    if amff is not None:
        out.append(("amff.w1", amff.w1))
        out.append(("amff.b1", amff.b1))
        out.append(("amff.w2", amff.w2))
        out.append(("amff.b2", amff.b2))
    return out


def write_tensor_file(path, config: dict, tensors: list[np.ndarray]) -> None:
    """Versioned binary: magic, uint32 LE JSON-config length, JSON config,
    then each tensor's float64 LE payload in declaration order."""
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for t in tensors:
            fh.write(np.ascontiguousarray(t, dtype="<f8").tobytes())


def read_tensor_file(path, shapes_from_config) -> tuple[dict, list[np.ndarray]]:
    """Inverse of write_tensor_file; shapes_from_config(config) gives the
    declaration-order shape list."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r}")
        (blob_len,) = struct.unpack("<I", fh.read(4))
        config = json.loads(fh.read(blob_len).decode("utf-8"))
        payload = fh.read()
    shapes = shapes_from_config(config)
    tensors = []
    offset = 0
    for shape in shapes:
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = count * 8
        chunk = payload[offset:offset + nbytes]
        if len(chunk) != nbytes:
            raise ValueError("checkpoint payload truncated")
        tensors.append(np.frombuffer(chunk, dtype="<f8").reshape(shape).copy())
        offset += nbytes
    if offset != len(payload):
        raise ValueError("checkpoint payload has trailing bytes")
    return config, tensors
