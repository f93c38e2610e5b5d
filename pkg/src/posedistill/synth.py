"""Procedural articulated-figure images with keypoint labels, and the DPSE file format."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError

DPSE_MAGIC = b"DPSE"
DPSE_VERSION = 1
_HEADER = struct.Struct("<4sIIIII")


@dataclass(frozen=True)
class Bone:
    parent: int
    child: int
    length: tuple[float, float]
    # angle of the bone relative to its parent bone's direction (radians);
    # bones leaving the root are measured from the trunk "up" direction
    angle: tuple[float, float]


@dataclass(frozen=True)
class SkeletonSpec:
    num_keypoints: int
    bones: tuple[Bone, ...]
    trunk_tilt: tuple[float, float] = (-0.3, 0.3)
    limb_radius: tuple[float, float] = (1.2, 2.0)
    head_radius: tuple[float, float] = (2.5, 3.5)
    head_index: int | None = None
    flip_pairs: tuple[tuple[int, int], ...] = ()
    # pelvis placement as fractions of (W, H)
    root_x: tuple[float, float] = (0.3, 0.7)
    root_y: tuple[float, float] = (0.45, 0.62)
    max_invisible: int = 3

    def validate(self):
        if not self.bones:
            raise ConfigError("skeleton has no bones")
        seen = {0}
        for b in self.bones:
            if b.parent not in seen:
                raise ConfigError(f"bone {b.parent}->{b.child}: parent not yet attached to the root tree")
            if b.child in seen or not 0 < b.child < self.num_keypoints:
                raise ConfigError(f"bone {b.parent}->{b.child}: child repeated or out of range")
            seen.add(b.child)
        if len(seen) != self.num_keypoints:
            raise ConfigError(f"skeleton covers {len(seen)} of {self.num_keypoints} keypoints")

    def frozen_angles(self):
        """Copy with every angle range collapsed to its midpoint."""
        mid = lambda r: ((r[0] + r[1]) / 2,) * 2
        bones = tuple(replace(b, angle=mid(b.angle)) for b in self.bones)
        return replace(self, bones=bones, trunk_tilt=mid(self.trunk_tilt))

    def frozen_lengths(self):
        mid = lambda r: ((r[0] + r[1]) / 2,) * 2
        return replace(self, bones=tuple(replace(b, length=mid(b.length)) for b in self.bones))


def default_skeleton():
    """13-joint figure: pelvis, neck, head, two arms (shoulder/elbow/wrist), two legs (knee/ankle).

    "Left" joints sit on the image-left side; angle ranges keep limbs on their side.
    """
    pi = math.pi
    bones = (
        Bone(0, 1, (13.0, 17.0), (-0.25, 0.25)),  # pelvis -> neck
        Bone(1, 2, (5.0, 7.0), (-0.35, 0.35)),  # neck -> head
        Bone(1, 3, (4.0, 6.0), (-pi / 2 - 0.2, -pi / 2 + 0.2)),  # left shoulder
        Bone(3, 4, (7.0, 10.0), (-1.8, 0.9)),  # left elbow
        Bone(4, 5, (6.0, 9.0), (-1.2, 1.2)),  # left wrist
        Bone(1, 6, (4.0, 6.0), (pi / 2 - 0.2, pi / 2 + 0.2)),  # right shoulder
        Bone(6, 7, (7.0, 10.0), (-0.9, 1.8)),  # right elbow
        Bone(7, 8, (6.0, 9.0), (-1.2, 1.2)),  # right wrist
        Bone(0, 9, (10.0, 13.0), (pi + 0.1, pi + 0.6)),  # left knee
        Bone(9, 10, (9.0, 12.0), (-0.6, 0.6)),  # left ankle
        Bone(0, 11, (10.0, 13.0), (pi - 0.6, pi - 0.1)),  # right knee
        Bone(11, 12, (9.0, 12.0), (-0.6, 0.6)),  # right ankle
    )
    return SkeletonSpec(
        num_keypoints=13,
        bones=bones,
        head_index=2,
        flip_pairs=((3, 6), (4, 7), (5, 8), (9, 11), (10, 12)),
    )


@dataclass
class Sample:
    image: np.ndarray  # (H, W) float32 in [0, 1]
    keypoints: np.ndarray  # (K, 2) float32, (x, y) image pixels
    visibility: np.ndarray  # (K,) bool
    bbox_score: float

    def __eq__(self, other):
        return (
            isinstance(other, Sample)
            and np.array_equal(self.image, other.image)
            and np.array_equal(self.keypoints, other.keypoints)
            and np.array_equal(self.visibility, other.visibility)
            and np.float32(self.bbox_score) == np.float32(other.bbox_score)
        )


def inside(keypoints, height, width):
    x, y = keypoints[..., 0], keypoints[..., 1]
    return (x >= 0) & (x < width) & (y >= 0) & (y < height)


def pose_keypoints(spec, rng):
    """Joint positions relative to the root, shape (K, 2)."""
    pts = np.zeros((spec.num_keypoints, 2))
    up = -math.pi / 2 + rng.uniform(*spec.trunk_tilt)
    direction = {0: up}
    for b in spec.bones:
        ang = direction[b.parent] + rng.uniform(*b.angle)
        length = rng.uniform(*b.length)
        pts[b.child] = pts[b.parent] + length * np.array([math.cos(ang), math.sin(ang)])
        direction[b.child] = ang
    return pts


def _segment_distance(px, py, a, b):
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        return np.hypot(px - a[0], py - a[1])
    t = np.clip(((px - a[0]) * ab[0] + (py - a[1]) * ab[1]) / denom, 0.0, 1.0)
    return np.hypot(px - (a[0] + t * ab[0]), py - (a[1] + t * ab[1]))


def render(spec, keypoints, height, width, rng):
    """Anti-aliased capsules (one per bone) over a noisy background."""
    py, px = np.mgrid[0:height, 0:width] + 0.5
    base = rng.uniform(0.05, 0.25)
    grad = rng.uniform(-0.1, 0.1, size=2)
    img = base + grad[0] * (px / width - 0.5) + grad[1] * (py / height - 0.5)
    for b in spec.bones:
        radius = rng.uniform(*spec.limb_radius)
        level = rng.uniform(0.55, 1.0)
        d = _segment_distance(px, py, keypoints[b.parent], keypoints[b.child])
        cover = np.clip(radius + 0.5 - d, 0.0, 1.0)
        img = img * (1 - cover) + level * cover
    if spec.head_index is not None:
        radius = rng.uniform(*spec.head_radius)
        level = rng.uniform(0.55, 1.0)
        c = keypoints[spec.head_index]
        cover = np.clip(radius + 0.5 - np.hypot(px - c[0], py - c[1]), 0.0, 1.0)
        img = img * (1 - cover) + level * cover
    img = img + rng.normal(0.0, 0.04, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_sample(spec, seed, image_size, index=0):
    """Render one figure. Pure function of (spec, seed, image_size, index)."""
    height, width = image_size
    if height % 4 or width % 4:
        raise ConfigError(f"image size {image_size} must be divisible by 4")
    spec.validate()
    rng = np.random.default_rng([int(seed), int(index)])
    rel = pose_keypoints(spec, rng)
    for _ in range(1000):
        root = np.array([rng.uniform(*spec.root_x) * width, rng.uniform(*spec.root_y) * height])
        kps = (rel + root).astype(np.float32)
        vis = inside(kps, height, width)
        if vis.any() and (~vis).sum() <= spec.max_invisible:
            break
    else:
        raise ConfigError("could not place the figure with enough visible keypoints")
    image = render(spec, kps.astype(np.float64), height, width, rng)
    bbox_score = np.float32(rng.uniform(0.7, 1.0))
    return Sample(image=image, keypoints=kps, visibility=vis, bbox_score=float(bbox_score))


def generate_dataset(spec, seed, image_size, n):
    return [generate_sample(spec, seed, image_size, i) for i in range(n)]


# --- DPSE binary format ------------------------------------------------------
def dpse_size(n, height, width, k):
    return _HEADER.size + n * (4 * height * width + 8 * k + k + 4)


def write_dataset(samples, path):
    if not samples:
        raise ValueError("cannot write an empty dataset")
    height, width = samples[0].image.shape
    k = samples[0].keypoints.shape[0]
    for s in samples:
        if s.image.shape != (height, width) or s.keypoints.shape != (k, 2):
            raise ValueError("samples must share image size and keypoint count")
    parts = [_HEADER.pack(DPSE_MAGIC, DPSE_VERSION, len(samples), height, width, k)]
    for s in samples:
        parts.append(np.ascontiguousarray(s.image, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(s.keypoints, dtype="<f4").tobytes())
        parts.append(np.asarray(s.visibility, dtype=np.uint8).tobytes())
        parts.append(struct.pack("<f", s.bbox_score))
    Path(path).write_bytes(b"".join(parts))


def read_dataset(path):
    buf = Path(path).read_bytes()
    if len(buf) < _HEADER.size:
        raise FormatError(f"file too short for header ({len(buf)} bytes)", len(buf))
    magic, version, n, height, width, k = _HEADER.unpack_from(buf, 0)
    if magic != DPSE_MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != DPSE_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    expected = dpse_size(n, height, width, k)
    if len(buf) != expected:
        rec = 4 * height * width + 9 * k + 4
        at = _HEADER.size + ((len(buf) - _HEADER.size) // rec) * rec if len(buf) < expected else expected
        raise FormatError(f"size {len(buf)} != expected {expected} for {n} samples", at)
    samples = []
    off = _HEADER.size
    hw = height * width
    for _ in range(n):
        image = np.frombuffer(buf, "<f4", hw, off).reshape(height, width).astype(np.float32)
        off += 4 * hw
        kps = np.frombuffer(buf, "<f4", 2 * k, off).reshape(k, 2).astype(np.float32)
        off += 8 * k
        raw_vis = np.frombuffer(buf, np.uint8, k, off)
        if raw_vis.max(initial=0) > 1:
            raise FormatError("visibility byte not 0/1", off + int(np.argmax(raw_vis > 1)))
        vis = raw_vis.astype(bool)
        off += k
        (score,) = struct.unpack_from("<f", buf, off)
        off += 4
        samples.append(Sample(image=image, keypoints=kps, visibility=vis, bbox_score=score))
    return samples


def stack(samples):
    """Batch arrays: images (N,H,W), keypoints (N,K,2), visibility (N,K), bbox scores (N,)."""
    return (
        np.stack([s.image for s in samples]),
        np.stack([s.keypoints for s in samples]),
        np.stack([s.visibility for s in samples]),
        np.array([s.bbox_score for s in samples], dtype=np.float32),
    )
