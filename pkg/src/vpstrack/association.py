"""Frame-to-frame identity association.

Correlation matrices from the pixel and instance trackers are fused, turned
into a thresholded one-to-one assignment, optionally filtered by a mutual
argmax check, and instances left unmatched are offered to older frames held in
a small memory before they receive a fresh id.
"""
from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionMismatch, IdMisalignment, LengthMismatch, ShapeMismatch
from .flow import FlowField
from .instance_tracker import EmbeddingHeadParams, EmbeddingSet, embed_masks, match_softmax
from .masks import InstanceMask, SegmentationMap, extract_instances
from .pixel_tracker import CorrelationMatrix, pixel_correlation

log = logging.getLogger(__name__)

MODES = ("instance", "pixel", "hybrid")


@dataclass(frozen=True)
class FusionWeights:
    """Affine 1x1 fusion of the two single-channel score maps."""

    w_instance: float = 0.5
    w_pixel: float = 0.5
    bias: float = 0.0


@dataclass(frozen=True)
class Assignment:
    matches: tuple[tuple[int, int, float], ...]
    unmatched_rows: tuple[int, ...]
    unmatched_cols: tuple[int, ...]

    def as_dict(self) -> dict[int, int]:
        return {i: j for i, j, _ in self.matches}


def fuse(inst: CorrelationMatrix, pix: CorrelationMatrix, w: FusionWeights = FusionWeights()) -> CorrelationMatrix:
    if inst.shape != pix.shape:
        raise ShapeMismatch(f"instance {inst.shape} vs pixel {pix.shape}")
    if inst.row_ids != pix.row_ids or inst.col_ids != pix.col_ids:
        raise IdMisalignment("instance and pixel matrices index different instances")
    scores = w.w_instance * inst.scores + w.w_pixel * pix.scores + w.bias
    return CorrelationMatrix(scores, "fused", inst.row_ids, inst.col_ids)


def greedy_assign(m: CorrelationMatrix | np.ndarray, tau: float, order: str = "score") -> Assignment:
    """One-to-one assignment taking each row's best free column if it reaches ``tau``.

    ``order="score"`` serves rows by descending best remaining score (ties by
    lower row, then lower column), which makes the result independent of how
    instances are enumerated. ``order="row"`` serves rows top to bottom.
    """
    S = np.asarray(m.scores if isinstance(m, CorrelationMatrix) else m, dtype=np.float64)
    n_rows, n_cols = S.shape
    free_cols = np.ones(n_cols, dtype=bool)
    pending = list(range(n_rows))
    matches, unmatched = [], []
    while pending:
        if order == "score":
            if free_cols.any():
                best = [np.max(np.where(free_cols, S[i], -np.inf)) for i in pending]
                k = int(np.argmax(best))
            else:
                k = 0
        elif order == "row":
            k = 0
        else:
            raise ValueError(f"unknown greedy order {order!r}")
        i = pending.pop(k)
        if not free_cols.any():
            unmatched.append(i)
            continue
        row = np.where(free_cols, S[i], -np.inf)
        j = int(np.argmax(row))
        if row[j] >= tau:
            matches.append((i, j, float(row[j])))
            free_cols[j] = False
        else:
            unmatched.append(i)
    return Assignment(
        tuple(sorted(matches)), tuple(sorted(unmatched)), tuple(int(j) for j in np.flatnonzero(free_cols))
    )


def mutual_mask(S: np.ndarray) -> np.ndarray:
    """Cells that are the argmax of both their row and their column."""
    out = np.zeros(S.shape, dtype=bool)
    if S.size == 0:
        return out
    rows = np.argmax(S, axis=1)
    cols = np.argmax(S, axis=0)
    for i, j in enumerate(rows):
        if cols[j] == i:
            out[i, j] = True
    return out


def mutual_check(m: CorrelationMatrix | np.ndarray, a: Assignment) -> Assignment:
    """Drop matches whose row- and column-argmax disagree; dropped pairs become unmatched."""
    S = np.asarray(m.scores if isinstance(m, CorrelationMatrix) else m, dtype=np.float64)
    ok = mutual_mask(S)
    keep = tuple(x for x in a.matches if ok[x[0], x[1]])
    dropped = [x for x in a.matches if not ok[x[0], x[1]]]
    return Assignment(
        keep,
        tuple(sorted(set(a.unmatched_rows) | {i for i, _, _ in dropped})),
        tuple(sorted(set(a.unmatched_cols) | {j for _, j, _ in dropped})),
    )


def fit_fusion_weights(samples: Sequence[tuple[np.ndarray, np.ndarray, np.ndarray]]) -> FusionWeights:
    """Least-squares fit of (w_instance, w_pixel, bias) to 0/1 correspondence targets."""
    inst = np.concatenate([np.ravel(s[0]) for s in samples])
    pix = np.concatenate([np.ravel(s[1]) for s in samples])
    y = np.concatenate([np.ravel(s[2]) for s in samples]).astype(np.float64)
    A = np.column_stack([inst, pix, np.ones_like(inst)])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    return FusionWeights(float(coef[0]), float(coef[1]), float(coef[2]))


@dataclass
class TrackerConfig:
    mode: str = "hybrid"
    tau_match: float = 0.3
    theta: float = 0.01
    mutual_check: bool = True
    mutual_order: str = "after"  # "after" greedy_assign, or "before" (filter the matrix first)
    temporal: bool = True
    memory_window: int = 2
    weights: FusionWeights = field(default_factory=FusionWeights)
    class_gated: bool = True
    greedy_order: str = "score"
    h_roi: int = 32
    w_roi: int = 64
    cosine: bool = False
    rescue_kind: str = "same"  # "same" as the main pass, or "pixel" / "instance" / "hybrid"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.mutual_order not in ("after", "before"):
            raise ValueError("mutual_order must be 'after' or 'before'")
        if self.memory_window < 0:
            raise ValueError("memory_window must be >= 0")
        if self.rescue_kind not in ("same", *MODES):
            raise ValueError(f"rescue_kind must be 'same' or one of {MODES}")

    @property
    def uses_embeddings(self) -> bool:
        return self.mode != "pixel" or self.rescue_kind in ("instance", "hybrid")


@dataclass(eq=False)
class FrameState:
    """One processed frame: its thing masks, assigned track ids and cached embeddings."""

    index: int
    masks: list[InstanceMask]
    ids: list[int]
    embeddings: EmbeddingSet | None = None


class TrackMemory:
    """Ring buffer of recent frames plus the id counter.

    Holds the immediate predecessor and up to ``window`` older frames.
    """

    def __init__(self, window: int = 2):
        self.window = window
        self.frames: deque[FrameState] = deque(maxlen=window + 1)
        self.next_id = 1

    def push(self, state: FrameState) -> None:
        if self.frames and state.index <= self.frames[-1].index:
            raise ValueError("frame indices must be strictly increasing")
        self.frames.append(state)

    def new_id(self) -> int:
        i = self.next_id
        self.next_id += 1
        return i

    @property
    def predecessor(self) -> FrameState | None:
        return self.frames[-1] if self.frames else None

    def older(self) -> list[FrameState]:
        """Frames older than the predecessor, newest first."""
        return list(self.frames)[:-1][::-1]


class Tracker:
    """Computes the configured similarity between two frame states."""

    def __init__(self, config: TrackerConfig, params: EmbeddingHeadParams | None = None):
        self.config = config
        if params is None and config.uses_embeddings:
            log.warning("no embedding parameters given; using an untrained head")
            params = EmbeddingHeadParams.init(config.h_roi * config.w_roi, 64, 64, seed=0)
        self.params = params

    def state(self, index: int, masks: list[InstanceMask], ids: list[int]) -> FrameState:
        emb = None
        if self.config.uses_embeddings:
            c = self.config
            emb = embed_masks(masks, self.params, c.h_roi, c.w_roi, c.cosine)
        return FrameState(index, masks, ids, emb)

    def _inst(self, a: FrameState, b: FrameState) -> tuple[CorrelationMatrix, CorrelationMatrix]:
        m, n = len(a.masks), len(b.masks)
        if m and n:
            logits = a.embeddings.vectors @ b.embeddings.vectors.T
            fwd, bwd = match_softmax(logits), match_softmax(logits.T)
        else:
            fwd, bwd = np.zeros((m, n)), np.zeros((n, m))
        return (
            CorrelationMatrix(fwd, "instance", a.ids, tuple(range(n))),
            CorrelationMatrix(bwd, "instance", tuple(range(n)), a.ids),
        )

    def _pix(self, a: FrameState, b: FrameState, flows: Sequence[FlowField]) -> CorrelationMatrix:
        return pixel_correlation(a.masks, flows, b.masks, self.config.class_gated, a.ids, tuple(range(len(b.masks))))

    def similarity(
        self, a: FrameState, b: FrameState, flows: Sequence[FlowField], kind: str | None = None
    ) -> tuple[CorrelationMatrix, CorrelationMatrix]:
        """Forward (a rows x b cols) and backward (b rows x a cols) similarity.

        Dice is symmetric, so the pixel backward matrix is the transpose; the
        instance backward matrix re-normalises the transposed logits.
        """
        kind = kind or self.config.mode
        if kind == "pixel":
            f = self._pix(a, b, flows)
            return f, CorrelationMatrix(f.scores.T, "pixel", f.col_ids, f.row_ids)
        fi, bi = self._inst(a, b)
        if kind == "instance":
            return fi, bi
        fp = self._pix(a, b, flows)
        bp = CorrelationMatrix(fp.scores.T, "pixel", fp.col_ids, fp.row_ids)
        w = self.config.weights
        return fuse(fi, fp, w), fuse(bi, bp, w)


def temporal_rescue(
    unmatched_cols: Sequence[int],
    cur: FrameState,
    memory: TrackMemory,
    theta: float,
    tracker: Tracker,
    flows: Sequence[FlowField],
    taken_ids: set[int],
) -> list[tuple[int, int, float]]:
    """Re-identify unmatched current instances against older frames in memory.

    Candidates are stored instances whose ids are neither in the predecessor
    frame nor already used in the current one. A pair is adopted when its
    similarity exceeds ``theta`` in both directions and each side is the
    other's best choice. Frames are scanned newest first; an instance stops
    at its first adoption. Returns (stored id, current col, score) triples.
    """
    pred = memory.predecessor
    excluded = set(taken_ids) | (set(pred.ids) if pred else set())
    remaining = list(unmatched_cols)
    kind = None if tracker.config.rescue_kind == "same" else tracker.config.rescue_kind
    adopted = []
    for old in memory.older():
        if not remaining:
            break
        rows = [r for r, i in enumerate(old.ids) if i not in excluded]
        if not rows:
            continue
        fwd, bwd = tracker.similarity(old, cur, flows[old.index : cur.index], kind)
        F = fwd.scores[np.ix_(rows, remaining)]
        B = bwd.scores[np.ix_(remaining, rows)]
        for b, col in enumerate(remaining):
            a = int(np.argmax(F[:, b]))
            if int(np.argmax(F[a])) != b or int(np.argmax(B[b])) != a:
                continue
            if F[a, b] > theta and B[b, a] > theta:
                adopted.append((old.ids[rows[a]], col, float(F[a, b])))
        for sid, col, _ in adopted:
            excluded.add(sid)
            if col in remaining:
                remaining.remove(col)
    return adopted


@dataclass(eq=False)
class TrackedVideo:
    frames: list[SegmentationMap]
    provenance: list[dict]


def _relabel(frame: SegmentationMap, masks: Sequence[InstanceMask], ids: Sequence[int]) -> SegmentationMap:
    inst = np.zeros(frame.shape, dtype=np.uint16)
    for m, i in zip(masks, ids):
        inst[m.bits] = i
    return frame.with_instance_ids(inst)


def track_sequence(
    frames: Sequence[SegmentationMap],
    flows: Sequence[FlowField],
    config: TrackerConfig = TrackerConfig(),
    params: EmbeddingHeadParams | None = None,
    on_matrix: Callable[[int, CorrelationMatrix], None] | None = None,
) -> TrackedVideo:
    """Assign persistent instance ids across a video.

    Frame 0 things get ids 1..k in (class, input id) order. Each later frame is
    associated with its predecessor; stuff keeps id 0. ``on_matrix`` receives
    every adjacent-frame matrix (for debugging dumps).
    """
    if len(flows) != max(len(frames) - 1, 0):
        raise LengthMismatch(f"{len(frames)} frames need {len(frames) - 1} flows, got {len(flows)}")
    if frames:
        shape = frames[0].shape
        for f in (*frames, *flows):
            if f.shape != shape:
                raise DimensionMismatch(f"expected {shape}, got {f.shape}")

    tracker = Tracker(config, params)
    memory = TrackMemory(config.memory_window)
    out_frames, provenance = [], []
    for t, frame in enumerate(frames):
        masks = extract_instances(frame, things_only=True)
        n = len(masks)
        ids: list[int | None] = [None] * n
        source: list[tuple[str, float | None]] = [("new", None)] * n
        cur = tracker.state(t, masks, [0] * n)
        pred = memory.predecessor
        if pred is not None and pred.masks and n:
            fwd, _ = tracker.similarity(pred, cur, [flows[t - 1]])
            if on_matrix is not None:
                on_matrix(t, fwd)
            S = fwd.scores
            if config.mutual_check and config.mutual_order == "before":
                S = np.where(mutual_mask(S), S, -np.inf)
            assignment = greedy_assign(S, config.tau_match, config.greedy_order)
            if config.mutual_check and config.mutual_order == "after":
                assignment = mutual_check(fwd.scores, assignment)
            for i, j, s in assignment.matches:
                ids[j] = pred.ids[i]
                source[j] = ("match", s)
        if config.temporal and pred is not None:
            unmatched = [j for j in range(n) if ids[j] is None]
            if unmatched:
                taken = {i for i in ids if i is not None}
                for sid, j, s in temporal_rescue(unmatched, cur, memory, config.theta, tracker, flows, taken):
                    ids[j] = sid
                    source[j] = ("rescue", s)
        for j in range(n):
            if ids[j] is None:
                ids[j] = memory.new_id()
        cur.ids = [int(i) for i in ids]
        if cur.embeddings is not None:
            cur.embeddings = EmbeddingSet(cur.embeddings.vectors, tuple(cur.ids))
        memory.push(cur)
        out_frames.append(_relabel(frame, masks, cur.ids))
        for j in range(n):
            src, score = source[j]
            provenance.append({"frame": t, "instance_id": cur.ids[j], "source": src, "score": score})
    return TrackedVideo(out_frames, provenance)
