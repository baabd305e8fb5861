"""Core domain types, binary descriptor arithmetic, and the GTBF feature file format.

Descriptors are fixed-width bit vectors stored as ``uint8`` arrays of
``width_bits // 8`` bytes.  All per-image feature data is kept columnar
(numpy arrays) so the hot paths never have to touch Python objects; the
``Keypoint`` record type is materialized on demand.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

GTBF_MAGIC = b"GTBF"
GTBF_VERSION = 1
DEFAULT_DESCRIPTOR_BITS = 256


class FeatureFileError(ValueError):
    """Raised on malformed GTBF input. Carries the byte offset of the failure."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


def normalize_angle(theta_deg):
    """Map an angle (scalar or array, degrees) into [0, 360)."""
    if isinstance(theta_deg, np.ndarray):
        return theta_deg % 360.0
    return float(theta_deg) % 360.0


def angle_diff(theta_q, theta_db):
    """Directed orientation difference (theta_q - theta_db) mod 360, in [0, 360).

    Works elementwise on arrays.
    """
    d = (np.asarray(theta_q, dtype=np.float64) - np.asarray(theta_db, dtype=np.float64)) % 360.0
    if d.ndim == 0:
        return float(d)
    return d


def circular_error_deg(a, b):
    """Undirected angular distance in [0, 180]."""
    d = angle_diff(a, b)
    if isinstance(d, np.ndarray):
        return np.minimum(d, 360.0 - d)
    return min(d, 360.0 - d)


# ---------------------------------------------------------------------------
# Binary descriptor arithmetic
# ---------------------------------------------------------------------------


def descriptor_width_bits(desc: np.ndarray) -> int:
    return int(desc.shape[-1]) * 8


def _check_descriptor(desc: np.ndarray) -> np.ndarray:
    desc = np.asarray(desc, dtype=np.uint8)
    if desc.shape[-1] < 1:
        raise ValueError("descriptor must have at least one byte (8 bits)")
    return desc


def hamming_distance(a: np.ndarray, b: np.ndarray) -> int:
    """Popcount of a XOR b for two equal-width descriptors."""
    a = _check_descriptor(a)
    b = _check_descriptor(b)
    if a.shape != b.shape:
        raise ValueError(f"descriptor width mismatch: {a.shape[-1] * 8} vs {b.shape[-1] * 8} bits")
    return int(np.bitwise_count(a ^ b).sum())


def pack_u64(mat: np.ndarray) -> np.ndarray:
    """Pack an (n, n_bytes) uint8 matrix into (n, ceil(n_bytes/8)) uint64 lanes.

    Zero padding does not affect XOR popcounts.
    """
    mat = np.ascontiguousarray(np.atleast_2d(mat), dtype=np.uint8)
    n, nb = mat.shape
    pad = (-nb) % 8
    if pad:
        mat = np.concatenate([mat, np.zeros((n, pad), dtype=np.uint8)], axis=1)
    return mat.view(np.uint64)


def hamming_cross(a_packed: np.ndarray, b_packed: np.ndarray) -> np.ndarray:
    """All-pairs Hamming distances between packed descriptor sets.

    Accumulates one 64-bit lane at a time to avoid a large 3-d intermediate.
    """
    a_packed = np.atleast_2d(a_packed)
    b_packed = np.atleast_2d(b_packed)
    d = np.bitwise_count(a_packed[:, None, 0] ^ b_packed[None, :, 0]).astype(np.int32)
    for j in range(1, a_packed.shape[1]):
        d += np.bitwise_count(a_packed[:, None, j] ^ b_packed[None, :, j]).astype(np.int32)
    return d


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Pose2D:
    """Planar pose in world coordinates: millimeters and degrees in [0, 360)."""

    x_mm: float
    y_mm: float
    theta_deg: float

    def __post_init__(self):
        object.__setattr__(self, "theta_deg", float(self.theta_deg) % 360.0)
        object.__setattr__(self, "x_mm", float(self.x_mm))
        object.__setattr__(self, "y_mm", float(self.y_mm))


@dataclass(frozen=True)
class Keypoint:
    """A single planar feature. ``id`` is unique within its image."""

    id: int
    x: float
    y: float
    size: float
    orientation: float
    descriptor: np.ndarray

    def __post_init__(self):
        if self.size <= 0:
            raise ValueError(f"keypoint size must be positive, got {self.size}")
        object.__setattr__(self, "orientation", float(self.orientation) % 360.0)
        object.__setattr__(self, "descriptor", _check_descriptor(self.descriptor))


@dataclass
class ImageFeatures:
    """Columnar feature set for one image, with optional ground-truth pose.

    ``descriptors`` is (n, width_bits/8) uint8; the remaining columns are
    parallel arrays indexed like ``descriptors``.
    """

    image_id: int
    kp_ids: np.ndarray
    xy: np.ndarray
    sizes: np.ndarray
    orientations: np.ndarray
    descriptors: np.ndarray
    pose: Pose2D | None = None

    def __post_init__(self):
        self.kp_ids = np.asarray(self.kp_ids, dtype=np.uint32)
        self.xy = np.asarray(self.xy, dtype=np.float32).reshape(-1, 2)
        self.sizes = np.asarray(self.sizes, dtype=np.float32)
        self.orientations = np.asarray(self.orientations, dtype=np.float32) % np.float32(360.0)
        self.descriptors = np.atleast_2d(np.asarray(self.descriptors, dtype=np.uint8))
        n = len(self.kp_ids)
        if not (len(self.xy) == len(self.sizes) == len(self.orientations) == n):
            raise ValueError("inconsistent column lengths")
        if n and self.descriptors.shape[0] != n:
            raise ValueError("descriptor row count does not match keypoint count")
        if n and len(np.unique(self.kp_ids)) != n:
            raise ValueError(f"duplicate keypoint ids in image {self.image_id}")
        if n and self.sizes.min() <= 0:
            raise ValueError("keypoint sizes must be positive")

    def __len__(self) -> int:
        return len(self.kp_ids)

    @property
    def width_bits(self) -> int:
        return self.descriptors.shape[1] * 8

    @property
    def keypoints(self) -> list[Keypoint]:
        return [self.keypoint(i) for i in range(len(self))]

    def keypoint(self, i: int) -> Keypoint:
        return Keypoint(
            id=int(self.kp_ids[i]),
            x=float(self.xy[i, 0]),
            y=float(self.xy[i, 1]),
            size=float(self.sizes[i]),
            orientation=float(self.orientations[i]),
            descriptor=self.descriptors[i],
        )

    @classmethod
    def from_keypoints(
        cls,
        image_id: int,
        keypoints: Sequence[Keypoint],
        pose: Pose2D | None = None,
        width_bits: int = DEFAULT_DESCRIPTOR_BITS,
    ) -> "ImageFeatures":
        if keypoints:
            width_bits = descriptor_width_bits(keypoints[0].descriptor)
        nb = width_bits // 8
        return cls(
            image_id=image_id,
            kp_ids=np.array([k.id for k in keypoints], dtype=np.uint32),
            xy=np.array([[k.x, k.y] for k in keypoints], dtype=np.float32).reshape(-1, 2),
            sizes=np.array([k.size for k in keypoints], dtype=np.float32),
            orientations=np.array([k.orientation for k in keypoints], dtype=np.float32),
            descriptors=np.array([k.descriptor for k in keypoints], dtype=np.uint8).reshape(-1, nb),
            pose=pose,
        )


def empty_features(image_id: int, width_bits: int = DEFAULT_DESCRIPTOR_BITS,
                   pose: Pose2D | None = None) -> ImageFeatures:
    return ImageFeatures(
        image_id=image_id,
        kp_ids=np.zeros(0, np.uint32),
        xy=np.zeros((0, 2), np.float32),
        sizes=np.zeros(0, np.float32),
        orientations=np.zeros(0, np.float32),
        descriptors=np.zeros((0, width_bits // 8), np.uint8),
        pose=pose,
    )


# ---------------------------------------------------------------------------
# GTBF feature files
# ---------------------------------------------------------------------------
#
# Little-endian binary layout:
#   magic "GTBF" | u16 version=1 | u16 descriptor_width_bits | u32 image_count
#   per image: u64 image_id | u8 has_pose | [3 x f64 pose] | u32 keypoint_count
#   per keypoint: u32 id | f32 x | f32 y | f32 size | f32 orientation_deg
#                 | width_bits/8 raw descriptor bytes
#
# A JSON-lines twin (same field names, descriptors hex encoded) is accepted
# for debugging; files are sniffed by magic.

_HEADER = struct.Struct("<4sHHI")
_IMAGE_HEAD = struct.Struct("<QB")
_POSE = struct.Struct("<3d")
_KP_COUNT = struct.Struct("<I")
_KP_FIXED = struct.Struct("<Iffff")


def infer_width_bits(images: Sequence[ImageFeatures], default: int = DEFAULT_DESCRIPTOR_BITS) -> int:
    for im in images:
        return im.width_bits
    return default


def write_feature_file(path, images: Sequence[ImageFeatures], fmt: str | None = None) -> None:
    """Write a GTBF file. ``fmt`` is "binary" or "jsonl"; default by suffix."""
    path = Path(path)
    if fmt is None:
        fmt = "jsonl" if path.suffix == ".jsonl" else "binary"
    if fmt == "jsonl":
        _write_jsonl(path, images)
        return
    if fmt != "binary":
        raise ValueError(f"unknown feature file format {fmt!r}")

    width = infer_width_bits(images)
    nb = width // 8
    chunks = [_HEADER.pack(GTBF_MAGIC, GTBF_VERSION, width, len(images))]
    for im in images:
        if im.width_bits != width:
            raise ValueError(
                f"image {im.image_id} has width {im.width_bits}, file width is {width}"
            )
        chunks.append(_IMAGE_HEAD.pack(int(im.image_id), 1 if im.pose else 0))
        if im.pose is not None:
            chunks.append(_POSE.pack(im.pose.x_mm, im.pose.y_mm, im.pose.theta_deg))
        chunks.append(_KP_COUNT.pack(len(im)))
        for i in range(len(im)):
            chunks.append(
                _KP_FIXED.pack(
                    int(im.kp_ids[i]),
                    float(im.xy[i, 0]),
                    float(im.xy[i, 1]),
                    float(im.sizes[i]),
                    float(im.orientations[i]),
                )
            )
            chunks.append(im.descriptors[i].tobytes())
        assert im.descriptors.shape[1] == nb
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    """Cursor over raw bytes that raises FeatureFileError with byte offsets."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FeatureFileError(
                f"truncated file: need {n} bytes for {what}, have {len(self.data) - self.pos}",
                offset=self.pos,
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, st: struct.Struct, what: str):
        return st.unpack(self.take(st.size, what))


def read_feature_file(path) -> list[ImageFeatures]:
    """Read a GTBF file (binary or JSON-lines twin, sniffed by magic)."""
    data = Path(path).read_bytes()
    if not data.startswith(GTBF_MAGIC):
        if data[:1] in (b"{", b""):
            return _read_jsonl(data)
        raise FeatureFileError(f"bad magic {data[:4]!r}, expected {GTBF_MAGIC!r}", offset=0)
    r = _Reader(data)
    magic, version, width, n_images = r.unpack(_HEADER, "header")
    if version != GTBF_VERSION:
        raise FeatureFileError(f"unsupported GTBF version {version}", offset=4)
    if width % 8 != 0 or width < 8:
        raise FeatureFileError(f"invalid descriptor width {width}", offset=6)
    nb = width // 8
    images = []
    for _ in range(n_images):
        image_id, has_pose = r.unpack(_IMAGE_HEAD, "image header")
        if has_pose not in (0, 1):
            raise FeatureFileError(f"invalid has_pose flag {has_pose}", offset=r.pos - 1)
        pose = Pose2D(*r.unpack(_POSE, "pose")) if has_pose else None
        (n_kp,) = r.unpack(_KP_COUNT, "keypoint count")
        ids = np.empty(n_kp, np.uint32)
        xy = np.empty((n_kp, 2), np.float32)
        sizes = np.empty(n_kp, np.float32)
        oris = np.empty(n_kp, np.float32)
        descs = np.empty((n_kp, nb), np.uint8)
        for i in range(n_kp):
            kid, x, y, size, ori = r.unpack(_KP_FIXED, "keypoint")
            ids[i] = kid
            xy[i] = (x, y)
            sizes[i] = size
            oris[i] = ori
            descs[i] = np.frombuffer(r.take(nb, "descriptor"), dtype=np.uint8)
        images.append(
            ImageFeatures(
                image_id=image_id, kp_ids=ids, xy=xy, sizes=sizes,
                orientations=oris, descriptors=descs, pose=pose,
            )
        )
    return images


def _write_jsonl(path: Path, images: Sequence[ImageFeatures]) -> None:
    width = infer_width_bits(images)
    lines = [
        json.dumps(
            {"magic": "GTBF", "version": GTBF_VERSION,
             "descriptor_width_bits": width, "image_count": len(images)}
        )
    ]
    for im in images:
        rec = {
            "image_id": int(im.image_id),
            "pose": None
            if im.pose is None
            else {"x_mm": im.pose.x_mm, "y_mm": im.pose.y_mm, "theta_deg": im.pose.theta_deg},
            "keypoints": [
                {
                    "id": int(im.kp_ids[i]),
                    "x": float(im.xy[i, 0]),
                    "y": float(im.xy[i, 1]),
                    "size": float(im.sizes[i]),
                    "orientation_deg": float(im.orientations[i]),
                    "descriptor": im.descriptors[i].tobytes().hex(),
                }
                for i in range(len(im))
            ],
        }
        lines.append(json.dumps(rec))
    path.write_text("\n".join(lines) + "\n")


def _read_jsonl(data: bytes) -> list[ImageFeatures]:
    lines = [ln for ln in data.decode("utf-8").splitlines() if ln.strip()]
    if not lines:
        raise FeatureFileError("empty feature file", offset=0)
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise FeatureFileError(f"bad JSONL header: {e}", offset=0) from e
    if header.get("magic") != "GTBF":
        raise FeatureFileError(f"bad magic {header.get('magic')!r} in JSONL header", offset=0)
    if header.get("version") != GTBF_VERSION:
        raise FeatureFileError(f"unsupported GTBF version {header.get('version')}", offset=0)
    width = int(header["descriptor_width_bits"])
    nb = width // 8
    images = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise FeatureFileError(f"bad JSONL record on line {lineno}: {e}") from e
        kps = rec.get("keypoints", [])
        pose = rec.get("pose")
        images.append(
            ImageFeatures(
                image_id=int(rec["image_id"]),
                kp_ids=np.array([k["id"] for k in kps], np.uint32),
                xy=np.array([[k["x"], k["y"]] for k in kps], np.float32).reshape(-1, 2),
                sizes=np.array([k["size"] for k in kps], np.float32),
                orientations=np.array([k["orientation_deg"] for k in kps], np.float32),
                descriptors=np.array(
                    [np.frombuffer(bytes.fromhex(k["descriptor"]), np.uint8) for k in kps],
                    np.uint8,
                ).reshape(-1, nb),
                pose=None if pose is None else Pose2D(pose["x_mm"], pose["y_mm"], pose["theta_deg"]),
            )
        )
    return images
