"""Dense optical flow fields, Middlebury .flo I/O and forward mask warping."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from os import PathLike
from typing import Sequence

import numpy as np

from .errors import BadMagic, DimensionMismatch, DimensionOverflow, TruncatedFile
from .masks import InstanceMask

FLO_MAGIC = 202021.25
FLO_TAG = b"PIEH"
# Sanity bound on header dimensions; rejects garbage before allocating.
MAX_FLO_DIM = 1 << 15


@dataclass(frozen=True, eq=False)
class FlowField:
    """Per-pixel displacement (u, v) from one frame to the next, shape (H, W, 2)."""

    vectors: np.ndarray

    def __post_init__(self):
        v = np.array(self.vectors, dtype=np.float32, copy=True)
        if v.ndim != 3 or v.shape[2] != 2:
            raise ValueError(f"flow must have shape (H, W, 2), got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("flow values must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "vectors", v)

    @property
    def height(self) -> int:
        return self.vectors.shape[0]

    @property
    def width(self) -> int:
        return self.vectors.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.vectors.shape[:2]

    @property
    def u(self) -> np.ndarray:
        return self.vectors[..., 0]

    @property
    def v(self) -> np.ndarray:
        return self.vectors[..., 1]

    @classmethod
    def zeros(cls, height: int, width: int) -> "FlowField":
        return cls(np.zeros((height, width, 2), np.float32))

    @classmethod
    def constant(cls, height: int, width: int, u: float, v: float) -> "FlowField":
        vec = np.empty((height, width, 2), np.float32)
        vec[..., 0], vec[..., 1] = u, v
        return cls(vec)


def encode_flo(field: FlowField) -> bytes:
    header = struct.pack("<fii", FLO_MAGIC, field.width, field.height)
    return header + field.vectors.astype("<f4").tobytes()


def decode_flo(data: bytes) -> FlowField:
    if len(data) < 4 or data[:4] != FLO_TAG:
        raise BadMagic("not a .flo file")
    if len(data) < 12:
        raise TruncatedFile(".flo header truncated")
    width, height = struct.unpack_from("<ii", data, 4)
    if not (0 < width <= MAX_FLO_DIM and 0 < height <= MAX_FLO_DIM):
        raise DimensionOverflow(f"implausible .flo dimensions {width}x{height}")
    n = 2 * width * height
    if len(data) < 12 + 4 * n:
        raise TruncatedFile(f"expected {n} float32 values")
    vec = np.frombuffer(data, dtype="<f4", count=n, offset=12).reshape(height, width, 2)
    return FlowField(vec)


def write_flo(field: FlowField, path: str | PathLike) -> None:
    with open(path, "wb") as f:
        f.write(encode_flo(field))


def read_flo(path: str | PathLike) -> FlowField:
    with open(path, "rb") as f:
        return decode_flo(f.read())


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def warp_mask(mask: InstanceMask, flow: FlowField) -> InstanceMask:
    """Forward-warp a mask: every set pixel moves to round(p + flow(p)).

    Targets outside the frame are dropped; collisions OR together.
    """
    if mask.shape != flow.shape:
        raise DimensionMismatch(f"mask {mask.shape} vs flow {flow.shape}")
    ys, xs = np.nonzero(mask.bits)
    u = flow.vectors[ys, xs, 0].astype(np.float64)
    v = flow.vectors[ys, xs, 1].astype(np.float64)
    tx = round_half_away(xs + u).astype(np.int64)
    ty = round_half_away(ys + v).astype(np.int64)
    h, w = mask.shape
    keep = (tx >= 0) & (tx < w) & (ty >= 0) & (ty < h)
    out = np.zeros(mask.shape, dtype=bool)
    out[ty[keep], tx[keep]] = True
    return InstanceMask(out, mask.class_id, mask.instance_id)


def warp_chain(mask: InstanceMask, flows: Sequence[FlowField]) -> InstanceMask:
    """Warp through consecutive flows (frame s -> s+1 -> ... -> t)."""
    for f in flows:
        mask = warp_mask(mask, f)
    return mask


def add_flow_noise(field: FlowField, sigma: float, seed: int) -> FlowField:
    """Add i.i.d. Gaussian noise of std ``sigma`` px to both components."""
    rng = np.random.default_rng(seed)
    return FlowField(field.vectors + rng.normal(0.0, sigma, field.vectors.shape).astype(np.float32))
