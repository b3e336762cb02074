"""Position-based association: flow-warped masks scored by the dice coefficient."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DimensionMismatch
from .flow import FlowField, warp_chain, warp_mask
from .masks import InstanceMask

KINDS = ("pixel", "instance", "fused")


@dataclass(frozen=True, eq=False)
class CorrelationMatrix:
    """Similarity between the m instances of an earlier frame (rows) and n of a later one."""

    scores: np.ndarray
    kind: str
    row_ids: tuple | None = None
    col_ids: tuple | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown matrix kind {self.kind!r}")
        s = np.array(self.scores, dtype=np.float64, copy=True)
        if s.ndim != 2:
            s = s.reshape(len(self.row_ids or ()), len(self.col_ids or ()))
        s.setflags(write=False)
        rows = tuple(range(s.shape[0])) if self.row_ids is None else tuple(self.row_ids)
        cols = tuple(range(s.shape[1])) if self.col_ids is None else tuple(self.col_ids)
        if (len(rows), len(cols)) != s.shape:
            raise ValueError(f"ids {len(rows)}x{len(cols)} do not match scores {s.shape}")
        object.__setattr__(self, "scores", s)
        object.__setattr__(self, "row_ids", rows)
        object.__setattr__(self, "col_ids", cols)

    @property
    def shape(self) -> tuple[int, int]:
        return self.scores.shape

    def to_tsv(self) -> str:
        lines = ["\t".join(["row\\col"] + [str(c) for c in self.col_ids])]
        for rid, row in zip(self.row_ids, self.scores):
            lines.append("\t".join([str(rid)] + [f"{x:.6f}" for x in row]))
        return "\n".join(lines) + "\n"


def dice(p: InstanceMask | np.ndarray, g: InstanceMask | np.ndarray) -> float:
    """Dice coefficient ``2 sum(p g) / (sum(p^2) + sum(g^2))``; 0 when both are empty.

    The squared form also covers soft masks; for binary masks it reduces to areas.
    """
    a = p.bits if isinstance(p, InstanceMask) else np.asarray(p)
    b = g.bits if isinstance(g, InstanceMask) else np.asarray(g)
    if a.shape != b.shape:
        raise DimensionMismatch(f"{a.shape} vs {b.shape}")
    if a.dtype == bool and b.dtype == bool:
        inter = np.count_nonzero(a & b)
        denom = np.count_nonzero(a) + np.count_nonzero(b)
    else:
        a = a.astype(np.float64)
        b = b.astype(np.float64)
        inter = float(np.sum(a * b))
        denom = float(np.sum(a * a) + np.sum(b * b))
    if denom == 0:
        return 0.0
    return 2.0 * inter / denom


def dice_matrix(a: Sequence[InstanceMask], b: Sequence[InstanceMask]) -> np.ndarray:
    """Pairwise dice between two mask lists via one matrix product."""
    if not a or not b:
        return np.zeros((len(a), len(b)))
    shapes = {m.shape for m in a} | {m.shape for m in b}
    if len(shapes) != 1:
        raise DimensionMismatch(f"inconsistent mask shapes {sorted(shapes)}")
    fa = np.stack([m.bits.ravel() for m in a]).astype(np.float64)
    fb = np.stack([m.bits.ravel() for m in b]).astype(np.float64)
    inter = fa @ fb.T
    denom = fa.sum(1)[:, None] + fb.sum(1)[None, :]
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(denom > 0, 2.0 * inter / denom, 0.0)
    return out


def class_gate(scores: np.ndarray, row_classes: Sequence[int], col_classes: Sequence[int]) -> np.ndarray:
    same = np.asarray(row_classes)[:, None] == np.asarray(col_classes)[None, :]
    return np.where(same, scores, 0.0)


def pixel_correlation(
    prev: Sequence[InstanceMask],
    flow: FlowField | Sequence[FlowField],
    cur: Sequence[InstanceMask],
    class_gated: bool = True,
    row_ids: Sequence | None = None,
    col_ids: Sequence | None = None,
) -> CorrelationMatrix:
    """Warp each earlier mask by the flow and score it against every later mask.

    ``flow`` may be a list of consecutive fields, in which case warps are chained.
    """
    flows = [flow] if isinstance(flow, FlowField) else list(flow)
    for f in flows:
        for m in (*prev, *cur):
            if m.shape != f.shape:
                raise DimensionMismatch(f"mask {m.shape} vs flow {f.shape}")
    warped = [warp_chain(m, flows) for m in prev]
    scores = dice_matrix(warped, cur)
    if class_gated and scores.size:
        scores = class_gate(scores, [m.class_id for m in prev], [m.class_id for m in cur])
    return CorrelationMatrix(
        scores.reshape(len(prev), len(cur)),
        "pixel",
        tuple(row_ids) if row_ids is not None else tuple(m.instance_id for m in prev),
        tuple(col_ids) if col_ids is not None else tuple(m.instance_id for m in cur),
    )


def compose(a: CorrelationMatrix, b: CorrelationMatrix) -> CorrelationMatrix:
    """Chain s->t and t->u similarities into s->u by matrix product."""
    if a.shape[1] != b.shape[0]:
        raise DimensionMismatch(f"cannot compose {a.shape} with {b.shape}")
    return CorrelationMatrix(a.scores @ b.scores, a.kind, a.row_ids, b.col_ids)


__all__ = ["CorrelationMatrix", "dice", "dice_matrix", "pixel_correlation", "compose", "class_gate", "warp_mask"]
