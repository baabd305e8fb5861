"""Deterministic synthetic feature world and planar camera observation model.

The world is a flat sheet of point features, each with a position, a world
orientation, a discrete size level (mimicking pyramid levels of a real
extractor) and a random binary descriptor.  A camera at a planar pose sees
the features inside its footprint rectangle; observation is a pure function
of (world, pose, params), so noisy observations are reproducible.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np
from shapely.geometry import Polygon

from .core import ImageFeatures, Pose2D

_WORLD_TAG = 0x57524C44
_OBS_TAG = 0x4F425356


@dataclass(frozen=True)
class FeatureWorld:
    seed: int
    extent_mm: tuple[float, float]
    positions_mm: np.ndarray     # (n, 2) float64
    orientations_deg: np.ndarray  # (n,) float64, in [0, 360)
    size_levels: np.ndarray      # (n,) int32, in [0, n_size_levels)
    descriptors: np.ndarray      # (n, width_bits/8) uint8
    n_size_levels: int

    @property
    def n(self) -> int:
        return len(self.size_levels)

    @property
    def width_bits(self) -> int:
        return self.descriptors.shape[1] * 8


@dataclass(frozen=True)
class ObservationParams:
    """Camera footprint and noise model for one observation pass."""

    fov_mm: tuple[float, float] = (200.0, 150.0)
    bitflip_prob: float = 0.0
    orientation_jitter_deg: float = 0.0
    max_features: int = 250
    seed: int = 0
    px_per_mm: float = 1.0
    base_size_px: float = 31.0
    scale_factor: float = 1.2

    def __post_init__(self):
        if not (0.0 <= self.bitflip_prob <= 1.0):
            raise ValueError(f"bitflip_prob must be in [0, 1], got {self.bitflip_prob}")
        if self.fov_mm[0] <= 0 or self.fov_mm[1] <= 0:
            raise ValueError("fov must be positive")
        if self.orientation_jitter_deg < 0:
            raise ValueError("orientation jitter must be non-negative")

    @property
    def fov_px(self) -> tuple[float, float]:
        return (self.fov_mm[0] * self.px_per_mm, self.fov_mm[1] * self.px_per_mm)

    @property
    def image_center_px(self) -> tuple[float, float]:
        return (self.fov_px[0] / 2.0, self.fov_px[1] / 2.0)


def generate_world(
    seed: int,
    extent_mm: tuple[float, float],
    density_per_m2: float,
    size_levels: int = 8,
    width_bits: int = 256,
) -> FeatureWorld:
    """Sample a world with ~density * area features, uniform over the extent."""
    w, h = float(extent_mm[0]), float(extent_mm[1])
    if w <= 0 or h <= 0:
        raise ValueError(f"extent must be positive, got {extent_mm}")
    if density_per_m2 <= 0:
        raise ValueError("density must be positive")
    if size_levels < 1:
        raise ValueError("need at least one size level")
    area_m2 = w * h / 1e6
    n = int(round(density_per_m2 * area_m2))
    rng = np.random.default_rng([_WORLD_TAG, seed])
    positions = rng.uniform((0.0, 0.0), (w, h), size=(n, 2))
    orientations = rng.uniform(0.0, 360.0, size=n)
    levels = rng.integers(0, size_levels, size=n, dtype=np.int32)
    descriptors = rng.integers(0, 256, size=(n, width_bits // 8), dtype=np.uint8)
    return FeatureWorld(
        seed=seed,
        extent_mm=(w, h),
        positions_mm=positions,
        orientations_deg=orientations,
        size_levels=levels,
        descriptors=descriptors,
        n_size_levels=size_levels,
    )


def _rotation(theta_deg: float) -> np.ndarray:
    t = np.deg2rad(theta_deg)
    c, s = np.cos(t), np.sin(t)
    return np.array([[c, -s], [s, c]])


def _pose_rng(params: ObservationParams, pose: Pose2D) -> np.random.Generator:
    # Observation must be a pure function of (pose, params); derive the noise
    # stream from a stable hash of both.
    h = hashlib.blake2b(
        struct.pack("<3d2dQ", pose.x_mm, pose.y_mm, pose.theta_deg,
                    params.bitflip_prob, params.orientation_jitter_deg, params.seed & 0xFFFFFFFFFFFFFFFF),
        digest_size=8,
    ).digest()
    return np.random.default_rng([_OBS_TAG, params.seed, int.from_bytes(h, "little")])


def observe(
    world: FeatureWorld,
    pose: Pose2D,
    params: ObservationParams,
    image_id: int = 0,
    return_world_ids: bool = False,
):
    """Observe the world from ``pose``.

    Features inside the pose-centered, theta-rotated footprint are mapped to
    image pixel coordinates (origin at the top-left of the footprint).
    Keypoint orientation is (world_orientation - pose.theta) mod 360 plus
    optional Gaussian jitter; descriptor bits flip independently with
    ``bitflip_prob``.  When more than ``max_features`` features fall inside
    the footprint they are truncated by descending size then world id.
    """
    fw, fh = params.fov_mm
    rel = (world.positions_mm - np.array([pose.x_mm, pose.y_mm])) @ _rotation(pose.theta_deg)
    inside = (np.abs(rel[:, 0]) <= fw / 2.0) & (np.abs(rel[:, 1]) <= fh / 2.0)
    idx = np.nonzero(inside)[0]
    # deterministic truncation: largest size level first, then world id
    order = np.lexsort((idx, -world.size_levels[idx]))
    idx = idx[order][: params.max_features]
    m = len(idx)

    rng = _pose_rng(params, pose)
    xy = (rel[idx] * params.px_per_mm + np.array(params.image_center_px)).astype(np.float32)
    ori = (world.orientations_deg[idx] - pose.theta_deg) % 360.0
    if params.orientation_jitter_deg > 0:
        ori = (ori + rng.normal(0.0, params.orientation_jitter_deg, size=m)) % 360.0
    levels = world.size_levels[idx]
    sizes = (params.base_size_px * params.scale_factor ** levels).astype(np.float32)
    descs = world.descriptors[idx].copy()
    if params.bitflip_prob > 0 and m:
        flips = rng.random((m, descs.shape[1] * 8)) < params.bitflip_prob
        descs ^= np.packbits(flips, axis=1)

    feats = ImageFeatures(
        image_id=image_id,
        kp_ids=np.arange(m, dtype=np.uint32),
        xy=xy,
        sizes=sizes,
        orientations=ori.astype(np.float32),
        descriptors=descs,
        pose=pose,
    )
    if return_world_ids:
        return feats, idx.copy()
    return feats


def _footprint_polygon(pose: Pose2D, fov_mm: tuple[float, float]) -> Polygon:
    fw, fh = fov_mm
    corners = np.array(
        [[-fw / 2, -fh / 2], [fw / 2, -fh / 2], [fw / 2, fh / 2], [-fw / 2, fh / 2]]
    )
    world = corners @ _rotation(pose.theta_deg).T + np.array([pose.x_mm, pose.y_mm])
    return Polygon(world)


def overlap_ratio(pose_a: Pose2D, pose_b: Pose2D, fov_mm: tuple[float, float]) -> float:
    """Intersection area of the two footprints divided by one footprint's area."""
    pa = _footprint_polygon(pose_a, fov_mm)
    pb = _footprint_polygon(pose_b, fov_mm)
    return pa.intersection(pb).area / (fov_mm[0] * fov_mm[1])


def survey_grid_poses(world: FeatureWorld, spacing_mm: float, params: ObservationParams) -> list[Pose2D]:
    fw, fh = params.fov_mm
    w, h = world.extent_mm
    if fw > w or fh > h:
        raise ValueError("footprint does not fit inside the world extent")
    if spacing_mm <= 0 or spacing_mm >= min(fw, fh):
        raise ValueError(
            f"survey spacing must be in (0, min(fov)) to guarantee overlap, got {spacing_mm}"
        )
    xs = np.arange(fw / 2.0, w - fw / 2.0 + 1e-9, spacing_mm)
    ys = np.arange(fh / 2.0, h - fh / 2.0 + 1e-9, spacing_mm)
    return [Pose2D(x, y, 0.0) for y in ys for x in xs]


def generate_survey(world: FeatureWorld, spacing_mm: float, params: ObservationParams) -> list[ImageFeatures]:
    """Observe a regular axis-aligned grid covering the world; ids run 0..n-1."""
    poses = survey_grid_poses(world, spacing_mm, params)
    return [observe(world, p, params, image_id=i) for i, p in enumerate(poses)]


def generate_queries(
    world: FeatureWorld,
    survey: list[ImageFeatures],
    n: int,
    overlap_target_range: tuple[float, float],
    params: ObservationParams,
    seed: int,
) -> list[ImageFeatures]:
    """Sample n query observations, each overlapping >= 1 survey image by at
    least the lower overlap target (checked against a randomly chosen anchor).

    Query poses have uniformly random headings; ids run 0..n-1.
    """
    lo, hi = overlap_target_range
    if not (0.0 < lo <= hi <= 1.0):
        raise ValueError(f"invalid overlap target range {overlap_target_range}")
    if not survey:
        raise ValueError("survey is empty")
    anchors = [im.pose for im in survey if im.pose is not None]
    if len(anchors) != len(survey):
        raise ValueError("survey images must carry ground-truth poses")
    rng = np.random.default_rng([_OBS_TAG, seed, n])
    fw, fh = params.fov_mm
    w, h = world.extent_mm
    out = []
    for qi in range(n):
        for _attempt in range(10_000):
            anchor = anchors[int(rng.integers(0, len(anchors)))]
            dx = rng.uniform(-fw / 2.0, fw / 2.0)
            dy = rng.uniform(-fh / 2.0, fh / 2.0)
            theta = rng.uniform(0.0, 360.0)
            x = min(max(anchor.x_mm + dx, fw / 2.0), w - fw / 2.0)
            y = min(max(anchor.y_mm + dy, fh / 2.0), h - fh / 2.0)
            pose = Pose2D(x, y, theta)
            ov = overlap_ratio(pose, anchor, params.fov_mm)
            if lo <= ov <= hi:
                out.append(observe(world, pose, params, image_id=qi))
                break
        else:
            raise ValueError(
                f"could not sample query {qi} with overlap in [{lo}, {hi}]; "
                "geometry may make the target range unreachable"
            )
    return out


def perturbed_replay_queries(
    survey: list[ImageFeatures],
    world: FeatureWorld,
    params: ObservationParams,
    n: int,
    max_offset_mm: float,
    max_rot_deg: float,
    seed: int,
) -> list[ImageFeatures]:
    """Queries at small offsets from randomly chosen survey poses.

    Useful for localization experiments where the true pose must stay close
    to a database image.
    """
    rng = np.random.default_rng([_OBS_TAG, seed, 0x50455254, n])
    anchors = [im.pose for im in survey]
    out = []
    for qi in range(n):
        a = anchors[int(rng.integers(0, len(anchors)))]
        ang = rng.uniform(0, 2 * np.pi)
        rad = rng.uniform(0, max_offset_mm)
        dth = rng.uniform(-max_rot_deg, max_rot_deg)
        pose = Pose2D(a.x_mm + rad * np.cos(ang), a.y_mm + rad * np.sin(ang), a.theta_deg + dth)
        out.append(observe(world, pose, params, image_id=qi))
    return out
