"""Appearance-based association with a trainable two-layer RoI embedding.

Each instance mask is cropped to its box, rescaled into a fixed RoI grid and
embedded by ``relu(x W1 + b1) W2 + b2``. Embeddings of two frames are
correlated by dot product and turned into a per-row match distribution with a
softmax; the head is trained with cross-entropy on that distribution, using
hand-derived gradients.
"""
from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from os import PathLike
from typing import Sequence

import numpy as np

from .errors import BadMagic, EmptySupervision, ShapeMismatch, TruncatedFile
from .masks import InstanceMask, crop_scale_pad
from .pixel_tracker import CorrelationMatrix

log = logging.getLogger(__name__)

CKPT_MAGIC = b"VPSE"
CKPT_VERSION = 1
PARAM_NAMES = ("W1", "b1", "W2", "b2")


@dataclass(eq=False)
class EmbeddingHeadParams:
    W1: np.ndarray  # (d_in, d_hidden)
    b1: np.ndarray  # (d_hidden,)
    W2: np.ndarray  # (d_hidden, d_embed)
    b2: np.ndarray  # (d_embed,)

    def __post_init__(self):
        for name in PARAM_NAMES:
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        d_in, d_hidden = self.W1.shape
        if self.b1.shape != (d_hidden,) or self.W2.shape[0] != d_hidden or self.b2.shape != (self.W2.shape[1],):
            raise ShapeMismatch(
                f"inconsistent head shapes W1{self.W1.shape} b1{self.b1.shape} W2{self.W2.shape} b2{self.b2.shape}"
            )

    @property
    def d_in(self) -> int:
        return self.W1.shape[0]

    @property
    def d_hidden(self) -> int:
        return self.W1.shape[1]

    @property
    def d_embed(self) -> int:
        return self.W2.shape[1]

    @classmethod
    def init(cls, d_in: int, d_hidden: int, d_embed: int, seed: int = 0) -> "EmbeddingHeadParams":
        """Uniform init in +-1/sqrt(fan_in) per layer."""
        rng = np.random.default_rng(seed)
        a1, a2 = 1.0 / np.sqrt(d_in), 1.0 / np.sqrt(d_hidden)
        return cls(
            rng.uniform(-a1, a1, (d_in, d_hidden)),
            rng.uniform(-a1, a1, d_hidden),
            rng.uniform(-a2, a2, (d_hidden, d_embed)),
            rng.uniform(-a2, a2, d_embed),
        )

    def arrays(self) -> tuple[np.ndarray, ...]:
        return tuple(getattr(self, n) for n in PARAM_NAMES)

    def copy(self) -> "EmbeddingHeadParams":
        return EmbeddingHeadParams(*(a.copy() for a in self.arrays()))

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def with_flat(self, vec: np.ndarray) -> "EmbeddingHeadParams":
        out, pos = [], 0
        for a in self.arrays():
            out.append(np.asarray(vec[pos : pos + a.size], dtype=np.float64).reshape(a.shape))
            pos += a.size
        return EmbeddingHeadParams(*out)


@dataclass(frozen=True, eq=False)
class EmbeddingSet:
    vectors: np.ndarray  # (k, d_embed)
    instance_ids: tuple = ()


@dataclass(frozen=True)
class MatchSupervision:
    """Ground-truth (row, column) correspondences; unmatched rows are simply absent."""

    pairs: tuple[tuple[int, int], ...]

    def validate(self, m: int, n: int) -> None:
        cols = [j for _, j in self.pairs]
        rows = [i for i, _ in self.pairs]
        if len(set(cols)) != len(cols) or len(set(rows)) != len(rows):
            raise ValueError("supervision pairs must be one-to-one")
        if any(not (0 <= i < m and 0 <= j < n) for i, j in self.pairs):
            raise ValueError(f"supervision index out of range for {m}x{n}")


@dataclass(frozen=True, eq=False)
class TrainingPair:
    prev_rois: np.ndarray  # (m, d_in)
    cur_rois: np.ndarray  # (n, d_in)
    supervision: MatchSupervision


@dataclass
class TrainConfig:
    lr: float = 1e-2
    epochs: int = 500
    seed: int = 0
    batch_size: int | None = None  # None = full batch
    d_hidden: int | None = None  # defaults to d_embed
    d_embed: int = 64
    loss_form: str = "categorical"
    cosine: bool = False


@dataclass
class TrainResult:
    params: EmbeddingHeadParams
    loss_trace: list[float] = field(default_factory=list)


def _forward(X: np.ndarray, params: EmbeddingHeadParams):
    Z = X @ params.W1 + params.b1
    H = np.maximum(Z, 0.0)
    E = H @ params.W2 + params.b2
    return Z, H, E


def embed(roi: np.ndarray, params: EmbeddingHeadParams) -> np.ndarray:
    x = np.asarray(roi, dtype=np.float64).ravel()
    if x.size != params.d_in:
        raise ShapeMismatch(f"RoI has {x.size} cells, head expects {params.d_in}")
    return _forward(x[None, :], params)[2][0]


def embed_batch(rois: np.ndarray, params: EmbeddingHeadParams) -> np.ndarray:
    X = np.asarray(rois, dtype=np.float64).reshape(len(rois), -1)
    if X.shape[1] != params.d_in:
        raise ShapeMismatch(f"RoI has {X.shape[1]} cells, head expects {params.d_in}")
    return _forward(X, params)[2]


def _l2_normalize(E: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.maximum(np.linalg.norm(E, axis=1, keepdims=True), 1e-12)
    return E / norms, norms


def correlate(M: EmbeddingSet | np.ndarray, N: EmbeddingSet | np.ndarray) -> np.ndarray:
    """Pairwise dot products ``logits[i, j] = <M_i, N_j>``."""
    a = M.vectors if isinstance(M, EmbeddingSet) else np.asarray(M, dtype=np.float64)
    b = N.vectors if isinstance(N, EmbeddingSet) else np.asarray(N, dtype=np.float64)
    return a @ b.T


def match_softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def expected_target(dist: np.ndarray, i: int) -> float:
    """Expected column index of row ``i`` under the match distribution."""
    row = np.asarray(dist, dtype=np.float64)[i]
    return float(np.dot(np.arange(row.size), row))


def matching_loss(dist: np.ndarray, sup: MatchSupervision, form: str = "categorical") -> float:
    """Mean cross-entropy over supervised rows.

    ``categorical``: -ln p(j|i). ``binary``: sum over all columns of
    -(y ln p + (1-y) ln(1-p)) with y the one-hot ground truth.
    """
    if not sup.pairs:
        raise EmptySupervision("no matched rows to supervise")
    P = np.asarray(dist, dtype=np.float64)
    rows = np.array([i for i, _ in sup.pairs])
    cols = np.array([j for _, j in sup.pairs])
    tiny = np.finfo(np.float64).tiny
    if form == "categorical":
        return float(np.mean(-np.log(np.maximum(P[rows, cols], tiny))))
    if form == "binary":
        Y = np.zeros((len(rows), P.shape[1]))
        Y[np.arange(len(rows)), cols] = 1.0
        Pr = P[rows]
        terms = Y * np.log(np.maximum(Pr, tiny)) + (1 - Y) * np.log(np.maximum(1 - Pr, tiny))
        return float(np.mean(-terms.sum(axis=1)))
    raise ValueError(f"unknown loss form {form!r}")


def _dlogits(P: np.ndarray, sup: MatchSupervision, form: str) -> np.ndarray:
    rows = np.array([i for i, _ in sup.pairs])
    cols = np.array([j for _, j in sup.pairs])
    k = len(rows)
    G = np.zeros_like(P)
    if form == "categorical":
        Y = np.zeros((k, P.shape[1]))
        Y[np.arange(k), cols] = 1.0
        G[rows] = (P[rows] - Y) / k
        return G
    # binary: dL/dp then back through the row softmax
    Pr = P[rows]
    Y = np.zeros_like(Pr)
    Y[np.arange(k), cols] = 1.0
    dP = -(Y / Pr - (1 - Y) / (1 - Pr)) / k
    G[rows] = Pr * (dP - np.sum(Pr * dP, axis=1, keepdims=True))
    return G


def loss_and_gradients(
    prev_rois: np.ndarray,
    cur_rois: np.ndarray,
    params: EmbeddingHeadParams,
    sup: MatchSupervision,
    form: str = "categorical",
    cosine: bool = False,
) -> tuple[float, EmbeddingHeadParams]:
    """Loss of one frame pair and its exact gradient w.r.t. every head parameter."""
    Xa = np.asarray(prev_rois, dtype=np.float64).reshape(len(prev_rois), -1)
    Xb = np.asarray(cur_rois, dtype=np.float64).reshape(len(cur_rois), -1)
    sup.validate(len(Xa), len(Xb))
    if not sup.pairs:
        raise EmptySupervision("no matched rows to supervise")
    m = len(Xa)
    X = np.vstack([Xa, Xb])
    Z, H, E = _forward(X, params)
    if cosine:
        U, norms = _l2_normalize(E)
    else:
        U = E
    logits = U[:m] @ U[m:].T
    P = match_softmax(logits)
    loss = matching_loss(P, sup, form)

    dlog = _dlogits(P, sup, form)
    dU = np.vstack([dlog @ U[m:], dlog.T @ U[:m]])
    if cosine:
        dE = (dU - U * np.sum(U * dU, axis=1, keepdims=True)) / norms
    else:
        dE = dU
    dW2 = H.T @ dE
    db2 = dE.sum(axis=0)
    dZ = (dE @ params.W2.T) * (Z > 0)
    dW1 = X.T @ dZ
    db1 = dZ.sum(axis=0)
    return loss, EmbeddingHeadParams(dW1, db1, dW2, db2)


def loss_gradients(prev_rois, cur_rois, params, sup, form="categorical", cosine=False) -> EmbeddingHeadParams:
    return loss_and_gradients(prev_rois, cur_rois, params, sup, form, cosine)[1]


def pair_loss(prev_rois, cur_rois, params, sup, form="categorical", cosine=False) -> float:
    E = embed_batch(np.vstack([np.reshape(prev_rois, (len(prev_rois), -1)), np.reshape(cur_rois, (len(cur_rois), -1))]), params)
    if cosine:
        E = _l2_normalize(E)[0]
    m = len(prev_rois)
    return matching_loss(match_softmax(E[:m] @ E[m:].T), sup, form)


def dataset_loss(data: Sequence[TrainingPair], params: EmbeddingHeadParams, form="categorical", cosine=False) -> float:
    return float(np.mean([pair_loss(p.prev_rois, p.cur_rois, params, p.supervision, form, cosine) for p in data]))


def batch_loss_and_gradients(
    data: Sequence[TrainingPair], params: EmbeddingHeadParams, form: str = "categorical", cosine: bool = False
) -> tuple[float, EmbeddingHeadParams]:
    """Mean pair loss over ``data`` and its gradient, with one forward/backward pass for all RoIs."""
    blocks = []
    for p in data:
        blocks.append(np.asarray(p.prev_rois, dtype=np.float64).reshape(len(p.prev_rois), -1))
        blocks.append(np.asarray(p.cur_rois, dtype=np.float64).reshape(len(p.cur_rois), -1))
    X = np.vstack(blocks)
    Z, H, E = _forward(X, params)
    U, norms = _l2_normalize(E) if cosine else (E, None)
    dU = np.zeros_like(U)
    losses = []
    pos = 0
    for p in data:
        m, n = len(p.prev_rois), len(p.cur_rois)
        a, b = slice(pos, pos + m), slice(pos + m, pos + m + n)
        pos += m + n
        P = match_softmax(U[a] @ U[b].T)
        losses.append(matching_loss(P, p.supervision, form))
        dlog = _dlogits(P, p.supervision, form)
        dU[a] += dlog @ U[b]
        dU[b] += dlog.T @ U[a]
    k = len(data)
    dU /= k
    dE = (dU - U * np.sum(U * dU, axis=1, keepdims=True)) / norms if cosine else dU
    dZ = (dE @ params.W2.T) * (Z > 0)
    grads = EmbeddingHeadParams(X.T @ dZ, dZ.sum(axis=0), H.T @ dE, dE.sum(axis=0))
    return math.fsum(losses) / k, grads


def train(
    data: Sequence[TrainingPair],
    config: TrainConfig = TrainConfig(),
    params: EmbeddingHeadParams | None = None,
) -> TrainResult:
    """Plain gradient descent on the mean per-pair matching loss.

    Minibatches (when ``batch_size`` is set) are drawn by a seeded shuffle, so
    runs are reproducible. The reported epoch loss is the mean of the batch
    losses seen during that epoch.
    """
    data = [p for p in data if p.supervision.pairs]
    if not data:
        raise EmptySupervision("training set has no supervised pairs")
    for p in data:
        p.supervision.validate(len(p.prev_rois), len(p.cur_rois))
    d_in = np.asarray(data[0].prev_rois).reshape(len(data[0].prev_rois), -1).shape[1]
    if params is None:
        params = EmbeddingHeadParams.init(d_in, config.d_hidden or config.d_embed, config.d_embed, config.seed)
    else:
        params = params.copy()
    rng = np.random.default_rng(config.seed)
    bs = config.batch_size or len(data)
    trace = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(data)) if config.batch_size else np.arange(len(data))
        batch_losses = []
        for start in range(0, len(data), bs):
            batch = [data[k] for k in order[start : start + bs]]
            loss, g = batch_loss_and_gradients(batch, params, config.loss_form, config.cosine)
            batch_losses.append(loss)
            for a, ga in zip(params.arrays(), g.arrays()):
                a -= config.lr * ga
        trace.append(math.fsum(batch_losses) / len(batch_losses))
        if epoch % 50 == 0:
            log.debug("epoch %d loss %.6f", epoch, trace[-1])
    return TrainResult(params, trace)


def mask_rois(masks: Sequence[InstanceMask], h_roi: int, w_roi: int, anchor: str = "top_left") -> np.ndarray:
    if not masks:
        return np.zeros((0, h_roi * w_roi))
    return np.stack([crop_scale_pad(m, h_roi, w_roi, anchor).ravel() for m in masks])


def embed_masks(
    masks: Sequence[InstanceMask], params: EmbeddingHeadParams, h_roi: int, w_roi: int, cosine: bool = False
) -> EmbeddingSet:
    if h_roi * w_roi != params.d_in:
        raise ShapeMismatch(f"RoI {h_roi}x{w_roi} does not fit head input {params.d_in}")
    E = embed_batch(mask_rois(masks, h_roi, w_roi), params) if masks else np.zeros((0, params.d_embed))
    if cosine and len(E):
        E = _l2_normalize(E)[0]
    return EmbeddingSet(E, tuple(m.instance_id for m in masks))


def embedding_correlation(M: EmbeddingSet, N: EmbeddingSet) -> CorrelationMatrix:
    m, n = len(M.vectors), len(N.vectors)
    probs = match_softmax(correlate(M, N)) if m and n else np.zeros((m, n))
    return CorrelationMatrix(probs, "instance", M.instance_ids, N.instance_ids)


def instance_correlation(
    prev: Sequence[InstanceMask],
    cur: Sequence[InstanceMask],
    params: EmbeddingHeadParams,
    h_roi: int,
    w_roi: int,
    cosine: bool = False,
) -> CorrelationMatrix:
    """Row-softmax match distribution between the instances of two frames."""
    return embedding_correlation(
        embed_masks(prev, params, h_roi, w_roi, cosine), embed_masks(cur, params, h_roi, w_roi, cosine)
    )


def roi_accuracy(data: Sequence[TrainingPair], params: EmbeddingHeadParams, cosine: bool = False) -> float:
    """Fraction of supervised rows whose argmax column is the ground-truth one."""
    hits = total = 0
    for p in data:
        E = embed_batch(np.vstack([p.prev_rois, p.cur_rois]), params)
        if cosine:
            E = _l2_normalize(E)[0]
        m = len(p.prev_rois)
        pred = np.argmax(E[:m] @ E[m:].T, axis=1)
        for i, j in p.supervision.pairs:
            hits += int(pred[i] == j)
            total += 1
    return hits / total if total else 0.0


def encode_checkpoint(params: EmbeddingHeadParams) -> bytes:
    head = CKPT_MAGIC + struct.pack("<IIII", CKPT_VERSION, params.d_in, params.d_hidden, params.d_embed)
    return head + b"".join(a.astype("<f8").tobytes() for a in params.arrays())


def decode_checkpoint(data: bytes) -> EmbeddingHeadParams:
    if len(data) < 4 or data[:4] != CKPT_MAGIC:
        raise BadMagic("not a VPSE checkpoint")
    if len(data) < 20:
        raise TruncatedFile("checkpoint header truncated")
    version, d_in, d_hidden, d_embed = struct.unpack_from("<IIII", data, 4)
    if version != CKPT_VERSION:
        raise BadMagic(f"unsupported checkpoint version {version}")
    shapes = [(d_in, d_hidden), (d_hidden,), (d_hidden, d_embed), (d_embed,)]
    need = 8 * sum(int(np.prod(s)) for s in shapes)
    if len(data) < 20 + need:
        raise TruncatedFile(f"checkpoint payload needs {need} bytes")
    out, pos = [], 20
    for s in shapes:
        n = int(np.prod(s))
        out.append(np.frombuffer(data, "<f8", count=n, offset=pos).reshape(s).copy())
        pos += 8 * n
    return EmbeddingHeadParams(*out)


def save_checkpoint(params: EmbeddingHeadParams, path: str | PathLike) -> None:
    with open(path, "wb") as f:
        f.write(encode_checkpoint(params))


def load_checkpoint(path: str | PathLike) -> EmbeddingHeadParams:
    with open(path, "rb") as f:
        return decode_checkpoint(f.read())
