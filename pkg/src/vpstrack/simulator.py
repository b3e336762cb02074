"""Seeded synthetic panoptic video: moving 2D shapes with exact labels and flow.

Frames are painted back to front by z-order over horizontal stuff bands. Each
object keeps one persistent instance id (its index + 1) for the whole
sequence, so the emitted label maps double as tracking ground truth.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from os import PathLike
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import SpecOutOfBounds
from .flow import FlowField, write_flo
from .masks import Category, SegmentationMap, write_segmap

DEFAULT_CATEGORIES = (
    Category(1, False, "sky"),
    Category(2, False, "road"),
    Category(11, True, "car"),
    Category(12, True, "person"),
)
PRESETS = ("occlusion_reappear", "lookalike_pair", "small_fast", "deformation", "crowd")


@dataclass(frozen=True)
class ObjectSpec:
    shape: str  # "rect" | "ellipse"
    class_id: int
    size: tuple[float, float]  # (w, h) at frame 0
    center: tuple[float, float]  # (x, y) at frame 0
    velocity: tuple[float, float] = (0.0, 0.0)
    scale: float = 1.0  # multiplicative size change per frame
    z: int = 0
    visible: tuple[tuple[int, int], ...] | None = None  # half-open [start, end) frame intervals

    def is_visible(self, t: int) -> bool:
        return self.visible is None or any(a <= t < b for a, b in self.visible)

    def center_at(self, t: int) -> tuple[float, float]:
        return self.center[0] + self.velocity[0] * t, self.center[1] + self.velocity[1] * t

    def size_at(self, t: int) -> tuple[float, float]:
        k = self.scale**t
        return self.size[0] * k, self.size[1] * k


@dataclass(frozen=True)
class SceneSpec:
    width: int
    height: int
    n_frames: int
    objects: tuple[ObjectSpec, ...]
    background: tuple[int, ...] = (1, 2)  # stuff classes painted as horizontal bands, top first
    categories: tuple[Category, ...] = DEFAULT_CATEGORIES
    seed: int = 0


@dataclass(frozen=True, eq=False)
class SimulatedSequence:
    spec: SceneSpec | None
    frames: list[SegmentationMap]
    flows: list[FlowField]
    gt_ids: dict[int, dict[int, int]] = field(default_factory=dict)

    @property
    def categories(self) -> tuple[Category, ...]:
        return self.frames[0].categories if self.frames else self.spec.categories


def validate_spec(spec: SceneSpec) -> None:
    if spec.width < 1 or spec.height < 1 or spec.n_frames < 1:
        raise SpecOutOfBounds("scene dimensions and frame count must be >= 1")
    cats = {c.class_id: c for c in spec.categories}
    if not spec.background:
        raise SpecOutOfBounds("at least one background stuff class is required")
    for c in spec.background:
        if c not in cats or cats[c].is_thing:
            raise SpecOutOfBounds(f"background class {c} is not a stuff category")
    if len(spec.objects) > 0xFFFE:
        raise SpecOutOfBounds("too many objects for u16 ids")
    for k, o in enumerate(spec.objects):
        if o.class_id not in cats or not cats[o.class_id].is_thing:
            raise SpecOutOfBounds(f"object {k}: class {o.class_id} is not a thing category")
        if o.shape not in ("rect", "ellipse"):
            raise SpecOutOfBounds(f"object {k}: unknown shape {o.shape!r}")
        w, h = o.size
        cx, cy = o.center
        if w <= 0 or h <= 0 or o.scale <= 0:
            raise SpecOutOfBounds(f"object {k}: size and scale must be positive")
        if cx - w / 2 < -0.5 or cx + w / 2 > spec.width - 0.5 or cy - h / 2 < -0.5 or cy + h / 2 > spec.height - 0.5:
            raise SpecOutOfBounds(f"object {k} does not fit the frame at t=0")
        for a, b in o.visible or ():
            if not (0 <= a < b <= spec.n_frames):
                raise SpecOutOfBounds(f"object {k}: visibility interval {(a, b)} outside [0, {spec.n_frames})")


def _footprint(o: ObjectSpec, t: int, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    cx, cy = o.center_at(t)
    w, h = o.size_at(t)
    dx, dy = xs - cx, ys - cy
    if o.shape == "rect":
        return (np.abs(dx) < w / 2) & (np.abs(dy) < h / 2)
    return (dx / (w / 2)) ** 2 + (dy / (h / 2)) ** 2 < 1.0


def _background(spec: SceneSpec) -> np.ndarray:
    bands = np.array(spec.background, dtype=np.uint16)
    rows = (np.arange(spec.height) * len(bands)) // spec.height
    return np.repeat(bands[rows][:, None], spec.width, axis=1)


def generate(spec: SceneSpec) -> SimulatedSequence:
    """Render every frame, the forward flow between consecutive frames and the id table."""
    validate_spec(spec)
    ys, xs = np.mgrid[0 : spec.height, 0 : spec.width].astype(np.float64)
    order = sorted(range(len(spec.objects)), key=lambda k: (spec.objects[k].z, k))
    bg = _background(spec)

    frames, owners = [], []
    for t in range(spec.n_frames):
        cls = bg.copy()
        inst = np.zeros_like(cls)
        owner = np.full(cls.shape, -1, dtype=np.int64)
        for k in order:
            o = spec.objects[k]
            if not o.is_visible(t):
                continue
            fp = _footprint(o, t, xs, ys)
            cls[fp] = o.class_id
            inst[fp] = k + 1
            owner[fp] = k
        frames.append(SegmentationMap(cls, inst, spec.categories))
        owners.append(owner)

    flows = []
    for t in range(spec.n_frames - 1):
        vec = np.zeros((spec.height, spec.width, 2), np.float64)
        owner = owners[t]
        for k, o in enumerate(spec.objects):
            sel = owner == k
            if not sel.any():
                continue
            c0, c1 = np.array(o.center_at(t)), np.array(o.center_at(t + 1))
            px, py = xs[sel], ys[sel]
            vec[sel, 0] = c1[0] + (px - c0[0]) * o.scale - px
            vec[sel, 1] = c1[1] + (py - c0[1]) * o.scale - py
        flows.append(FlowField(vec))

    gt_ids = {
        t: {int(i): int(i) for i in np.unique(f.instance_ids) if i != 0} for t, f in enumerate(frames)
    }
    return SimulatedSequence(spec, frames, flows, gt_ids)


def preset(name: str, seed: int = 0) -> SceneSpec:
    """Named scenes exercising one tracking difficulty each.

    occlusion_reappear  object 1 vanishes for frames 3-4 and comes back
    lookalike_pair      two identical boxes moving side by side
    small_fast          tiny objects displaced by more than their own size per frame
    deformation         objects growing/shrinking ~10% per frame
    crowd               seeded random mix of overlapping objects at distinct depths
    """
    if name == "occlusion_reappear":
        objs = (
            ObjectSpec("rect", 11, (12, 10), (30.5, 40.5), (1, 0), z=1, visible=((0, 3), (5, 10))),
            ObjectSpec("ellipse", 12, (8, 14), (70, 20), (-2, 0), z=2),
            ObjectSpec("rect", 11, (16, 8), (60.5, 52.5), (0, -1), z=0),
        )
        return SceneSpec(96, 64, 10, objs, seed=seed)
    if name == "lookalike_pair":
        objs = (
            ObjectSpec("rect", 11, (10, 10), (20.5, 26.5), (3, 0), z=0),
            ObjectSpec("rect", 11, (10, 10), (20.5, 39.5), (3, 0), z=1),
            ObjectSpec("ellipse", 12, (7, 13), (80, 20), (-1, 1), z=2),
        )
        return SceneSpec(96, 64, 10, objs, seed=seed)
    if name == "small_fast":
        objs = (
            ObjectSpec("rect", 11, (4, 4), (8.5, 12.5), (6, 1), z=0),
            ObjectSpec("ellipse", 12, (5, 3), (85, 30), (-7, 0), z=1),
            ObjectSpec("rect", 11, (3, 6), (10.5, 50), (5, -2), z=2),
        )
        return SceneSpec(96, 64, 10, objs, seed=seed)
    if name == "deformation":
        objs = (
            ObjectSpec("ellipse", 11, (10, 8), (20, 30), (2, 1), scale=1.1, z=0),
            ObjectSpec("rect", 12, (20, 16), (70.5, 30.5), (-2, 0), scale=0.92, z=1),
        )
        return SceneSpec(96, 64, 10, objs, seed=seed)
    if name == "crowd":
        return _crowd(seed)
    raise KeyError(f"unknown preset {name!r}; choose from {PRESETS}")


def _crowd(seed: int, n_objects: int = 8) -> SceneSpec:
    rng = np.random.default_rng(seed)
    width, height, n_frames = 128, 96, 10
    objs = []
    for k in range(n_objects):
        w, h = (int(v) for v in rng.integers(8, 17, size=2))
        cx = float(rng.integers(w // 2 + 1, width - w // 2 - 1)) + (0.5 if w % 2 == 0 else 0.0)
        cy = float(rng.integers(h // 2 + 1, height - h // 2 - 1)) + (0.5 if h % 2 == 0 else 0.0)
        vx, vy = (int(v) for v in rng.integers(-2, 3, size=2))
        objs.append(
            ObjectSpec(
                str(rng.choice(["rect", "ellipse"])), int(rng.choice([11, 12])), (w, h), (cx, cy), (vx, vy), z=k
            )
        )
    return SceneSpec(width, height, n_frames, tuple(objs), seed=seed)


def distinct_shapes_pairs(n_pairs: int, seed: int = 0, width: int = 96, height: int = 64) -> list[SimulatedSequence]:
    """Two-frame scenes of 3-4 objects with mutually distinct shapes.

    Shapes differ by type (rect/ellipse) and aspect ratio; sizes, positions,
    motion and a mild deformation are random, and instance ids are shuffled
    so that frame order carries no hint of the correspondence.
    """
    rng = np.random.default_rng(seed)
    vocab = [(s, a) for s in ("rect", "ellipse") for a in (0.4, 0.7, 1.0, 1.6, 2.8)]
    cells = [(cx, cy) for cy in (height * 0.25, height * 0.75) for cx in (width / 6, width / 2, 5 * width / 6)]
    out = []
    for p in range(n_pairs):
        k = int(rng.integers(3, 5))
        picks = rng.choice(len(vocab), size=k, replace=False)
        slots = rng.choice(len(cells), size=k, replace=False)
        objs = []
        for q, (vi, si) in enumerate(zip(picks, slots)):
            shape, aspect = vocab[vi]
            base = float(rng.uniform(8, 16))
            w, h = (base, base / aspect) if aspect >= 1 else (base * aspect, base)
            cx = cells[si][0] + float(rng.uniform(-3, 3))
            cy = cells[si][1] + float(rng.uniform(-2, 2))
            v = (float(rng.integers(-4, 5)), float(rng.integers(-3, 4)))
            objs.append(ObjectSpec(shape, int(rng.choice([11, 12])), (w, h), (cx, cy), v, float(rng.uniform(0.9, 1.1)), z=q))
        spec = SceneSpec(width, height, 2, tuple(objs), seed=seed * 100003 + p)
        seq = generate(spec)
        out.append(_shuffle_ids(seq, rng))
    return out


def _shuffle_ids(seq: SimulatedSequence, rng: np.random.Generator) -> SimulatedSequence:
    """Re-label frame 0 with a random permutation of ids, keeping gt_ids consistent."""
    n = len(seq.spec.objects)
    perm = rng.permutation(n) + 1
    lut = np.zeros(n + 1, dtype=np.uint16)
    lut[1:] = perm
    frames = list(seq.frames)
    frames[0] = frames[0].with_instance_ids(lut[frames[0].instance_ids])
    gt_ids = dict(seq.gt_ids)
    gt_ids[0] = {int(lut[i]): tid for i, tid in seq.gt_ids[0].items()}
    return SimulatedSequence(seq.spec, frames, seq.flows, gt_ids)


def spec_to_dict(spec: SceneSpec) -> dict:
    return {
        "width": spec.width,
        "height": spec.height,
        "n_frames": spec.n_frames,
        "background": list(spec.background),
        "categories": [[c.class_id, c.is_thing, c.name] for c in spec.categories],
        "seed": spec.seed,
        "objects": [
            {
                "shape": o.shape,
                "class_id": o.class_id,
                "size": list(o.size),
                "center": list(o.center),
                "velocity": list(o.velocity),
                "scale": o.scale,
                "z": o.z,
                "visible": [list(v) for v in o.visible] if o.visible is not None else None,
            }
            for o in spec.objects
        ],
    }


def spec_from_dict(d: dict) -> SceneSpec:
    objs = tuple(
        ObjectSpec(
            o["shape"],
            int(o["class_id"]),
            tuple(o["size"]),
            tuple(o["center"]),
            tuple(o.get("velocity", (0, 0))),
            float(o.get("scale", 1.0)),
            int(o.get("z", 0)),
            tuple(tuple(v) for v in o["visible"]) if o.get("visible") is not None else None,
        )
        for o in d["objects"]
    )
    cats = tuple(Category(int(c[0]), bool(c[1]), str(c[2])) for c in d["categories"]) if "categories" in d else DEFAULT_CATEGORIES
    return SceneSpec(
        int(d["width"]), int(d["height"]), int(d["n_frames"]), objs,
        tuple(d.get("background", (1, 2))), cats, int(d.get("seed", 0)),
    )


def write_sequence(seq: SimulatedSequence, out_dir: str | PathLike) -> Path:
    """Layout: frames/%06d.vpsg, flows/%06d.flo (flow t -> t+1), gt_ids.json, scene.json."""
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    (out / "flows").mkdir(parents=True, exist_ok=True)
    for t, f in enumerate(seq.frames):
        write_segmap(f, out / "frames" / f"{t:06d}.vpsg")
    for t, f in enumerate(seq.flows):
        write_flo(f, out / "flows" / f"{t:06d}.flo")
    gt = {str(t): {str(i): tid for i, tid in sorted(m.items())} for t, m in sorted(seq.gt_ids.items())}
    (out / "gt_ids.json").write_text(json.dumps(gt, indent=1, sort_keys=True) + "\n")
    (out / "scene.json").write_text(json.dumps(spec_to_dict(seq.spec), indent=1, sort_keys=True) + "\n")
    return out


def scramble_ids(frames: Sequence[SegmentationMap], seed: int) -> list[SegmentationMap]:
    """Independently permute thing instance ids in every frame (destroys temporal identity)."""
    rng = np.random.default_rng(seed)
    out = []
    for f in frames:
        ids = np.unique(f.instance_ids[~np.isin(f.class_ids, list(f.stuff_classes))])
        ids = ids[ids != 0]
        lut = np.arange(int(f.instance_ids.max()) + 1, dtype=np.uint16)
        if len(ids):
            lut[ids] = rng.permutation(np.arange(1, len(ids) + 1) + 1000).astype(np.uint16)
        out.append(f.with_instance_ids(lut[f.instance_ids]))
    return out


def training_pairs(seqs: Sequence[SimulatedSequence], h_roi: int = 32, w_roi: int = 64) -> list:
    """Supervised RoI pairs for every consecutive frame pair of every sequence."""
    from .instance_tracker import MatchSupervision, TrainingPair, mask_rois
    from .masks import extract_instances

    out = []
    for seq in seqs:
        for t in range(len(seq.frames) - 1):
            a = extract_instances(seq.frames[t], things_only=True)
            b = extract_instances(seq.frames[t + 1], things_only=True)
            ta = [seq.gt_ids[t][m.instance_id] for m in a]
            tb = [seq.gt_ids[t + 1][m.instance_id] for m in b]
            pairs = tuple((i, tb.index(x)) for i, x in enumerate(ta) if x in tb)
            out.append(TrainingPair(mask_rois(a, h_roi, w_roi), mask_rois(b, h_roi, w_roi), MatchSupervision(pairs)))
    return out
