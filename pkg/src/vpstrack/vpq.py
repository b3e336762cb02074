"""Video Panoptic Quality over sliding windows of spatio-temporal tubes.

For a window of L consecutive evaluated frames, every (class, instance)
segment becomes a tube and tubes are matched across prediction and ground
truth by 3D IoU > 0.5. Per-class statistics are accumulated over all window
positions; the class score is ``sum IoU / (TP + FP/2 + FN/2)``.

Ground-truth void pixels (thing class with instance id 0) are excluded from
union and intersection, and a predicted tube lying mostly on void is not
counted as a false positive.
"""
from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DimensionMismatch, LengthMismatch
from .masks import SegmentationMap

DEFAULT_WINDOWS = (1, 2, 3, 4)
MATCH_IOU = 0.5


@dataclass(frozen=True, eq=False)
class Tube:
    class_id: int
    instance_id: int
    masks: np.ndarray  # (L, H, W) bool

    @property
    def area(self) -> int:
        return int(self.masks.sum())


def build_tubes(frames: Sequence[SegmentationMap], start: int, length: int) -> list[Tube]:
    """One tube per (class, instance) seen in ``frames[start:start+length]``; void excluded."""
    window = frames[start : start + length]
    codes = np.stack([f.codes() for f in window])
    void = np.stack([f.void_mask() for f in window])
    return [
        Tube(int(c >> 16), int(c & 0xFFFF), codes == c)
        for c in np.unique(codes[~void])
    ]


def tube_iou(a: Tube, b: Tube) -> float:
    if a.masks.shape != b.masks.shape:
        raise DimensionMismatch(f"{a.masks.shape} vs {b.masks.shape}")
    inter = np.count_nonzero(a.masks & b.masks)
    union = np.count_nonzero(a.masks | b.masks)
    return inter / union if union else 0.0


@dataclass
class ClassStats:
    ious: list[float] = field(default_factory=list)
    tp: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def iou_sum(self) -> float:
        return math.fsum(self.ious)

    @property
    def present(self) -> bool:
        return self.tp + self.fp + self.fn > 0

    @property
    def score(self) -> float:
        return self.iou_sum / (self.tp + 0.5 * self.fp + 0.5 * self.fn)

    def merge(self, other: "ClassStats") -> None:
        self.ious.extend(other.ious)
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn


def _segments(codes: np.ndarray, valid: np.ndarray) -> dict[int, int]:
    u, c = np.unique(codes[valid], return_counts=True)
    return dict(zip(u.tolist(), c.tolist()))


def window_stats(pred: Sequence[SegmentationMap], gt: Sequence[SegmentationMap]) -> dict[int, ClassStats]:
    """PQ statistics of one window, treating the stacked frames as a single volume."""
    pc = np.stack([f.codes() for f in pred]).astype(np.uint64)
    gc = np.stack([f.codes() for f in gt]).astype(np.uint64)
    if pc.shape != gc.shape:
        raise DimensionMismatch(f"prediction {pc.shape} vs ground truth {gc.shape}")
    pvalid = ~np.stack([f.void_mask() for f in pred])
    gvoid = np.stack([f.void_mask() for f in gt])
    gvalid = ~gvoid

    gt_area = _segments(gc, gvalid)
    pred_area = _segments(pc, pvalid)
    on_void = _segments(pc, pvalid & gvoid)
    both = pvalid & gvalid
    pair_codes = (gc[both] << np.uint64(32)) | pc[both]
    u, counts = np.unique(pair_codes, return_counts=True)

    stats: dict[int, ClassStats] = defaultdict(ClassStats)
    gt_hit, pred_hit = set(), set()
    for code, inter in zip(u.tolist(), counts.tolist()):
        g, p = code >> 32, code & 0xFFFFFFFF
        if g >> 16 != p >> 16:
            continue
        union = gt_area[g] + pred_area[p] - inter - on_void.get(p, 0)
        iou = inter / union
        if iou > MATCH_IOU:
            if g in gt_hit or p in pred_hit:
                raise AssertionError("IoU > 0.5 matching must be unique")
            gt_hit.add(g)
            pred_hit.add(p)
            s = stats[g >> 16]
            s.tp += 1
            s.ious.append(iou)
    for g in gt_area:
        if g not in gt_hit:
            stats[g >> 16].fn += 1
    for p, area in pred_area.items():
        if p not in pred_hit and on_void.get(p, 0) / area <= MATCH_IOU:
            stats[p >> 16].fp += 1
    return dict(stats)


def vpq_window(
    pred: Sequence[SegmentationMap], gt: Sequence[SegmentationMap], length: int
) -> dict[int, ClassStats]:
    """Accumulate per-class statistics over every window start ``0..T-L``."""
    if len(pred) != len(gt):
        raise LengthMismatch(f"{len(pred)} predicted vs {len(gt)} ground-truth frames")
    if length < 1:
        raise ValueError("window length must be >= 1")
    total: dict[int, ClassStats] = defaultdict(ClassStats)
    for start in range(len(gt) - length + 1):
        for c, s in window_stats(pred[start : start + length], gt[start : start + length]).items():
            total[c].merge(s)
    return dict(total)


def _mean_score(stats: dict[int, ClassStats], classes) -> float | None:
    scores = [stats[c].score for c in sorted(classes) if c in stats and stats[c].present]
    if not scores:
        return None
    return 100.0 * math.fsum(scores) / len(scores)


def _mean(values: list[float | None]) -> float | None:
    vals = [v for v in values if v is not None]
    return math.fsum(vals) / len(vals) if vals else None


@dataclass
class VpqReport:
    windows: tuple[int, ...]
    per_window: dict[int, tuple[float | None, float | None, float | None]]
    aggregate: tuple[float | None, float | None, float | None]
    per_class: dict[int, dict[int, dict]]
    frame_stride: int = 5
    header: dict = field(default_factory=dict)

    @property
    def vpq(self) -> float | None:
        return self.aggregate[0]

    def to_dict(self) -> dict:
        return {
            "header": self.header,
            "frame_stride": self.frame_stride,
            "windows": [
                {
                    "L": L,
                    "k": self.frame_stride * (L - 1),
                    "vpq": self.per_window[L][0],
                    "vpq_th": self.per_window[L][1],
                    "vpq_st": self.per_window[L][2],
                    "classes": {str(c): v for c, v in sorted(self.per_class[L].items())},
                }
                for L in self.windows
            ],
            "aggregate": dict(zip(("vpq", "vpq_th", "vpq_st"), self.aggregate)),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def to_table(self) -> str:
        def cell(v):
            return "/".join("-" if x is None else f"{x:.1f}" for x in v)

        cols = [f"k={self.frame_stride * (L - 1)} (L={L})" for L in self.windows] + ["VPQ"]
        vals = [cell(self.per_window[L]) for L in self.windows] + [cell(self.aggregate)]
        width = max(len(x) for x in cols + vals) + 2
        lines = [f"# window length L counts evaluated frames; k = {self.frame_stride} * (L - 1)"]
        for key, value in sorted(self.header.items()):
            lines.append(f"# {key} = {value}")
        lines.append("# cells: VPQ / VPQ^Th / VPQ^St")
        lines.append("".join(c.rjust(width) for c in cols))
        lines.append("".join(v.rjust(width) for v in vals))
        return "\n".join(lines) + "\n"


def vpq_report(
    pred: Sequence[SegmentationMap],
    gt: Sequence[SegmentationMap],
    windows: Sequence[int] = DEFAULT_WINDOWS,
    frame_stride: int = 5,
    header: dict | None = None,
) -> VpqReport:
    if not gt:
        raise ValueError("no frames to evaluate")
    cats = gt[0].categories
    things = {c.class_id for c in cats if c.is_thing}
    stuff = {c.class_id for c in cats if not c.is_thing}
    per_window, per_class = {}, {}
    for L in windows:
        stats = vpq_window(pred, gt, L)
        per_window[L] = (
            _mean_score(stats, things | stuff | set(stats)),
            _mean_score(stats, things),
            _mean_score(stats, stuff),
        )
        per_class[L] = {
            c: {"tp": s.tp, "fp": s.fp, "fn": s.fn, "iou_sum": s.iou_sum, "score": s.score}
            for c, s in stats.items()
            if s.present
        }
    aggregate = tuple(_mean([per_window[L][k] for L in windows]) for k in range(3))
    return VpqReport(tuple(windows), per_window, aggregate, per_class, frame_stride, dict(header or {}))


@dataclass
class IdSwitchStats:
    switches: int
    ids_per_track: dict[int, list[int]]


def id_switches(pred: Sequence[SegmentationMap], gt: Sequence[SegmentationMap]) -> IdSwitchStats:
    """Count changes of the predicted id covering each ground-truth thing track.

    A ground-truth segment is covered by the predicted segment it overlaps with
    IoU > 0.5; frames where it is absent or uncovered are skipped.
    """
    last: dict[int, int] = {}
    seen: dict[int, list[int]] = defaultdict(list)
    switches = 0
    for p, g in zip(pred, gt):
        things = list(g.thing_classes)
        gmask = np.isin(g.class_ids, things) & (g.instance_ids != 0)
        pmask = np.isin(p.class_ids, things) & (p.instance_ids != 0)
        gc, pc = g.codes(), p.codes()
        g_area = _segments(gc, gmask)
        p_area = _segments(pc, pmask)
        both = gmask & pmask
        pair = (gc[both].astype(np.uint64) << np.uint64(32)) | pc[both].astype(np.uint64)
        u, counts = np.unique(pair, return_counts=True)
        for code, inter in zip(u.tolist(), counts.tolist()):
            gcode, pcode = code >> 32, code & 0xFFFFFFFF
            if inter / (g_area[gcode] + p_area[pcode] - inter) <= MATCH_IOU:
                continue
            track, pid = gcode & 0xFFFF, pcode & 0xFFFF
            if track in last and last[track] != pid:
                switches += 1
            last[track] = pid
            if pid not in seen[track]:
                seen[track].append(pid)
    return IdSwitchStats(switches, dict(seen))
