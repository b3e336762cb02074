"""Reusable experiment drivers: head training, tracker runs and ablation grids."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, replace
from typing import Sequence

from .association import MODES, TrackerConfig, track_sequence
from .flow import add_flow_noise
from .instance_tracker import EmbeddingHeadParams, TrainConfig, roi_accuracy, train
from .simulator import PRESETS, distinct_shapes_pairs, generate, preset, scramble_ids, training_pairs
from .vpq import DEFAULT_WINDOWS, id_switches, vpq_report

THETAS = (0.001, 0.005, 0.01, 0.015, 0.02)


def train_head(
    n_pairs: int = 200, epochs: int = 50, seed: int = 0, h_roi: int = 32, w_roi: int = 64,
    d_embed: int = 64, lr: float = 1e-2,
) -> EmbeddingHeadParams:
    """Train the embedding head on the distinct-shapes scenario."""
    data = training_pairs(distinct_shapes_pairs(n_pairs, seed=seed + 1), h_roi, w_roi)
    return train(data, TrainConfig(lr=lr, epochs=epochs, seed=seed, d_embed=d_embed)).params


@dataclass
class RunResult:
    vpq: float
    per_window: dict
    switches: int
    n_ids: dict


def run_tracker(
    name: str,
    config: TrackerConfig,
    params: EmbeddingHeadParams | None = None,
    flow_sigma: float = 0.0,
    seed: int = 0,
    windows: Sequence[int] = DEFAULT_WINDOWS,
) -> RunResult:
    """Track a preset from scrambled ground-truth segmentation and score it."""
    seq = generate(preset(name, seed))
    flows = seq.flows
    if flow_sigma > 0:
        flows = [add_flow_noise(f, flow_sigma, seed * 1000 + t) for t, f in enumerate(flows)]
    frames = scramble_ids(seq.frames, seed + 7)
    out = track_sequence(frames, flows, config, params)
    rep = vpq_report(out.frames, seq.frames, windows)
    sw = id_switches(out.frames, seq.frames)
    return RunResult(rep.vpq, rep.per_window, sw.switches, {k: len(v) for k, v in sw.ids_per_track.items()})


def ablate_trackers(
    params: EmbeddingHeadParams, presets: Sequence[str] = PRESETS, flow_sigma: float = 1.5,
    base: TrackerConfig = TrackerConfig(), seed: int = 0,
) -> list[dict]:
    rows = []
    for mode, mutual, temporal in itertools.product(MODES, (False, True), (False, True)):
        cfg = replace(base, mode=mode, mutual_check=mutual, temporal=temporal)
        scores = {p: run_tracker(p, cfg, params, flow_sigma, seed).vpq for p in presets}
        rows.append({
            "mode": mode, "mutual_check": mutual, "temporal": temporal,
            "vpq": scores, "mean": sum(scores.values()) / len(scores),
        })
    return rows


def theta_sweep(
    params: EmbeddingHeadParams, name: str = "occlusion_reappear", thetas: Sequence[float] = THETAS,
    flow_sigma: float = 0.0, base: TrackerConfig = TrackerConfig(), seed: int = 0,
) -> list[dict]:
    rows = []
    for mode in MODES:
        scores = {th: run_tracker(name, replace(base, mode=mode, theta=th), params, flow_sigma, seed).vpq for th in thetas}
        rows.append({"mode": mode, "vpq": scores})
    return rows


def head_accuracy(params: EmbeddingHeadParams, n_pairs: int = 50, seed: int = 2, h_roi: int = 32, w_roi: int = 64) -> float:
    return roi_accuracy(training_pairs(distinct_shapes_pairs(n_pairs, seed=seed), h_roi, w_roi), params)
