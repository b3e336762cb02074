"""Sequence directory layout: ``frames/%06d.vpsg``, ``flows/%06d.flo``, ``gt_ids.json``."""
from __future__ import annotations

import json
from os import PathLike
from pathlib import Path
from typing import Iterable, Sequence

from .flow import FlowField, read_flo, write_flo
from .masks import SegmentationMap, read_segmap, write_segmap
from .simulator import SimulatedSequence, spec_from_dict


def _resolve(path: str | PathLike, sub: str) -> Path:
    """Accept either a sequence directory or the ``sub`` directory itself."""
    p = Path(path)
    return p / sub if (p / sub).is_dir() else p


def read_frames(path: str | PathLike) -> list[SegmentationMap]:
    d = _resolve(path, "frames")
    files = sorted(d.glob("*.vpsg"))
    if not files:
        raise FileNotFoundError(f"no .vpsg frames in {d}")
    return [read_segmap(f) for f in files]


def read_flows(path: str | PathLike) -> list[FlowField]:
    d = _resolve(path, "flows")
    return [read_flo(f) for f in sorted(d.glob("*.flo"))]


def write_frames(frames: Sequence[SegmentationMap], out_dir: str | PathLike) -> Path:
    d = Path(out_dir) / "frames"
    d.mkdir(parents=True, exist_ok=True)
    for t, f in enumerate(frames):
        write_segmap(f, d / f"{t:06d}.vpsg")
    return d


def write_flows(flows: Sequence[FlowField], out_dir: str | PathLike) -> Path:
    d = Path(out_dir) / "flows"
    d.mkdir(parents=True, exist_ok=True)
    for t, f in enumerate(flows):
        write_flo(f, d / f"{t:06d}.flo")
    return d


def read_gt_ids(path: str | PathLike) -> dict[int, dict[int, int]]:
    raw = json.loads((Path(path) / "gt_ids.json").read_text())
    return {int(t): {int(i): int(tid) for i, tid in m.items()} for t, m in raw.items()}


def read_sequence(path: str | PathLike) -> SimulatedSequence:
    """Load a sequence directory written by ``simulate``."""
    p = Path(path)
    frames = read_frames(p)
    flows = read_flows(p)
    gt_ids = read_gt_ids(p) if (p / "gt_ids.json").exists() else {
        t: {int(i): int(i) for i in set(f.instance_ids.ravel().tolist()) if i} for t, f in enumerate(frames)
    }
    spec = spec_from_dict(json.loads((p / "scene.json").read_text())) if (p / "scene.json").exists() else None
    return SimulatedSequence(spec, frames, flows, gt_ids)


def write_jsonl(records: Iterable[dict], path: str | PathLike) -> None:
    with open(path, "w") as f:
        for r in records:
            f.write(json.dumps(r, sort_keys=True) + "\n")
