"""Panoptic label maps, binary instance masks, RoI geometry and the .vpsg format.

A panoptic label map stores a (class_id, instance_id) pair per pixel. Stuff
classes always carry instance id 0; a thing class with instance id 0 marks a
void / unassigned pixel.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from os import PathLike
from typing import Iterable, Sequence

import numpy as np

from .errors import BadMagic, EmptyMask, TruncatedFile, UnknownClassId

VPSG_MAGIC = b"VPSG"
VPSG_VERSION = 1

__all__ = [
    "Category",
    "SegmentationMap",
    "InstanceMask",
    "extract_instances",
    "bounding_box",
    "crop_scale_pad",
    "read_segmap",
    "write_segmap",
    "encode_segmap",
    "decode_segmap",
]


@dataclass(frozen=True)
class Category:
    class_id: int
    is_thing: bool
    name: str = ""


def _frozen(a: np.ndarray, dtype) -> np.ndarray:
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class SegmentationMap:
    """Per-pixel (class_id, instance_id) labelling of one frame."""

    class_ids: np.ndarray
    instance_ids: np.ndarray
    categories: tuple[Category, ...]

    def __post_init__(self):
        cls = _frozen(self.class_ids, np.uint16)
        inst = _frozen(self.instance_ids, np.uint16)
        if cls.ndim != 2 or cls.shape != inst.shape:
            raise ValueError(f"label grids must be 2-D and equal, got {cls.shape} / {inst.shape}")
        object.__setattr__(self, "class_ids", cls)
        object.__setattr__(self, "instance_ids", inst)
        object.__setattr__(self, "categories", tuple(self.categories))

        known = {c.class_id for c in self.categories}
        if len(known) != len(self.categories):
            raise ValueError("duplicate class_id in categories")
        present = np.unique(cls)
        missing = [int(c) for c in present if int(c) not in known]
        if missing:
            raise UnknownClassId(f"class ids {missing} not in categories")
        stuff = [c.class_id for c in self.categories if not c.is_thing]
        if stuff and np.any(inst[np.isin(cls, stuff)] != 0):
            raise ValueError("stuff pixels must carry instance id 0")

    @property
    def height(self) -> int:
        return self.class_ids.shape[0]

    @property
    def width(self) -> int:
        return self.class_ids.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.class_ids.shape

    @property
    def thing_classes(self) -> frozenset[int]:
        return frozenset(c.class_id for c in self.categories if c.is_thing)

    @property
    def stuff_classes(self) -> frozenset[int]:
        return frozenset(c.class_id for c in self.categories if not c.is_thing)

    def codes(self) -> np.ndarray:
        """Pack labels as ``class_id << 16 | instance_id`` (uint32)."""
        return (self.class_ids.astype(np.uint32) << 16) | self.instance_ids.astype(np.uint32)

    def void_mask(self) -> np.ndarray:
        things = np.isin(self.class_ids, list(self.thing_classes))
        return things & (self.instance_ids == 0)

    def with_instance_ids(self, instance_ids: np.ndarray) -> "SegmentationMap":
        return SegmentationMap(self.class_ids, instance_ids, self.categories)

    @classmethod
    def from_codes(cls, codes: np.ndarray, categories: Iterable[Category]) -> "SegmentationMap":
        codes = np.asarray(codes, dtype=np.uint32)
        return cls((codes >> 16).astype(np.uint16), (codes & 0xFFFF).astype(np.uint16), tuple(categories))


@dataclass(frozen=True, eq=False)
class InstanceMask:
    bits: np.ndarray
    class_id: int
    instance_id: int = 0
    area: int = field(init=False)

    def __post_init__(self):
        bits = _frozen(self.bits, bool)
        if bits.ndim != 2:
            raise ValueError("mask bits must be 2-D")
        object.__setattr__(self, "bits", bits)
        object.__setattr__(self, "area", int(bits.sum()))

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.bits.shape


def extract_instances(segmap: SegmentationMap, things_only: bool = False) -> list[InstanceMask]:
    """Split a label map into one mask per thing instance and one per stuff class.

    Void pixels produce no mask. Output is ordered by (class_id, instance_id).
    """
    codes = segmap.codes()
    void = segmap.void_mask()
    stuff = segmap.stuff_classes
    out = []
    for code in np.unique(codes[~void]):
        class_id, instance_id = int(code >> 16), int(code & 0xFFFF)
        if things_only and class_id in stuff:
            continue
        out.append(InstanceMask(codes == code, class_id, instance_id))
    return out


def bounding_box(mask: InstanceMask) -> tuple[int, int, int, int]:
    """Inclusive (x_min, y_min, x_max, y_max) of the set bits."""
    if mask.area == 0:
        raise EmptyMask("bounding box of an empty mask")
    ys = np.flatnonzero(mask.bits.any(axis=1))
    xs = np.flatnonzero(mask.bits.any(axis=0))
    return int(xs[0]), int(ys[0]), int(xs[-1]), int(ys[-1])


def crop_scale_pad(mask: InstanceMask, h_roi: int, w_roi: int, anchor: str = "top_left") -> np.ndarray:
    """Crop a mask to its box, rescale without distortion and zero-pad to ``(h_roi, w_roi)``.

    One scale factor ``s = min(h_roi / box_h, w_roi / box_w)`` is applied to both
    axes with nearest-neighbour sampling, so the occupied region is
    ``floor(box_h * s) x floor(box_w * s)``.
    """
    if h_roi < 1 or w_roi < 1:
        raise ValueError("RoI dimensions must be >= 1")
    x0, y0, x1, y1 = bounding_box(mask)
    crop = mask.bits[y0 : y1 + 1, x0 : x1 + 1]
    box_h, box_w = crop.shape
    s = min(h_roi / box_h, w_roi / box_w)
    out_h = min(h_roi, max(1, math.floor(box_h * s + 1e-9)))
    out_w = min(w_roi, max(1, math.floor(box_w * s + 1e-9)))
    rows = np.minimum(np.floor((np.arange(out_h) + 0.5) / s).astype(int), box_h - 1)
    cols = np.minimum(np.floor((np.arange(out_w) + 0.5) / s).astype(int), box_w - 1)

    roi = np.zeros((h_roi, w_roi), dtype=np.float64)
    if anchor == "top_left":
        oy = ox = 0
    elif anchor == "center":
        oy, ox = (h_roi - out_h) // 2, (w_roi - out_w) // 2
    else:
        raise ValueError(f"unknown anchor {anchor!r}")
    roi[oy : oy + out_h, ox : ox + out_w] = crop[np.ix_(rows, cols)]
    return roi


def encode_segmap(segmap: SegmentationMap) -> bytes:
    parts = [VPSG_MAGIC, struct.pack("<IIII", VPSG_VERSION, segmap.width, segmap.height, len(segmap.categories))]
    for cat in segmap.categories:
        name = cat.name.encode("utf-8")
        if len(name) > 255:
            raise ValueError(f"category name too long: {cat.name!r}")
        parts.append(struct.pack("<HBB", cat.class_id, int(cat.is_thing), len(name)))
        parts.append(name)
    parts.append(segmap.codes().astype("<u4").tobytes())
    return b"".join(parts)


def decode_segmap(data: bytes) -> SegmentationMap:
    if len(data) < 4 or data[:4] != VPSG_MAGIC:
        raise BadMagic("not a VPSG file")
    pos = 4
    if len(data) < pos + 16:
        raise TruncatedFile("header truncated")
    version, width, height, n_cat = struct.unpack_from("<IIII", data, pos)
    pos += 16
    if version != VPSG_VERSION:
        raise BadMagic(f"unsupported VPSG version {version}")
    categories = []
    for _ in range(n_cat):
        if len(data) < pos + 4:
            raise TruncatedFile("category table truncated")
        class_id, is_thing, name_len = struct.unpack_from("<HBB", data, pos)
        pos += 4
        if len(data) < pos + name_len:
            raise TruncatedFile("category name truncated")
        name = data[pos : pos + name_len].decode("utf-8")
        pos += name_len
        categories.append(Category(class_id, bool(is_thing), name))
    n = width * height
    if len(data) < pos + 4 * n:
        raise TruncatedFile(f"expected {n} label records")
    codes = np.frombuffer(data, dtype="<u4", count=n, offset=pos).reshape(height, width)
    return SegmentationMap.from_codes(codes, categories)


def write_segmap(segmap: SegmentationMap, path: str | PathLike) -> None:
    with open(path, "wb") as f:
        f.write(encode_segmap(segmap))


def read_segmap(path: str | PathLike) -> SegmentationMap:
    with open(path, "rb") as f:
        return decode_segmap(f.read())


def masks_to_segmap(
    masks: Sequence[InstanceMask], shape: tuple[int, int], categories: Iterable[Category], fill_class: int
) -> SegmentationMap:
    """Paint masks in order onto a canvas of ``fill_class`` (later masks win)."""
    cls = np.full(shape, fill_class, dtype=np.uint16)
    inst = np.zeros(shape, dtype=np.uint16)
    for m in masks:
        cls[m.bits] = m.class_id
        inst[m.bits] = m.instance_id
    return SegmentationMap(cls, inst, tuple(categories))
