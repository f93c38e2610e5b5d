"""Heatmap-space math shared by the teacher and the distilled student.

Coordinate convention: heatmap pixel ``j`` sits at heatmap coordinate ``j``,
and covers image pixels ``[j*stride, (j+1)*stride)``. An image coordinate
``x`` therefore maps to ``x / stride - 0.5`` and pixel ``j`` decodes to
``(j + 0.5) * stride``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


@dataclass(frozen=True)
class HeatmapGrid:
    width: int  # hW
    height: int  # hH
    stride: int = 4

    @classmethod
    def for_image(cls, image_height, image_width, stride=4):
        if image_height % stride or image_width % stride:
            raise ValueError(f"image {image_height}x{image_width} not divisible by stride {stride}")
        return cls(width=image_width // stride, height=image_height // stride, stride=stride)

    def to_grid(self, xy_image):
        return np.asarray(xy_image) / self.stride - 0.5

    def to_image(self, xy_grid):
        return (np.asarray(xy_grid) + 0.5) * self.stride


@dataclass
class StudentPrediction:
    mu: ad.Tensor  # (B, K, 2) normalized (x / W, y / H)
    sigma: ad.Tensor  # (B, K, 2) heatmap pixels
    conf: ad.Tensor  # (B, K) in [0, 1]

    def image_coords(self, image_height, image_width):
        return self.mu.data * np.array([image_width, image_height], dtype=self.mu.dtype)


def round_half_away(x):
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def render_target_heatmaps(keypoints, visibility, grid, sigma_gt=2.0, dtype=np.float32):
    """Gaussian targets; invisible keypoints give all-zero maps.

    keypoints: (..., K, 2) image pixels; visibility: (..., K). Returns (..., K, hH, hW).
    """
    if sigma_gt <= 0:
        raise ValueError("sigma_gt must be positive")
    kps = np.asarray(keypoints, dtype=np.float64)
    u = grid.to_grid(kps)
    xs = np.arange(grid.width, dtype=np.float64)
    ys = np.arange(grid.height, dtype=np.float64)
    gx = np.exp(-0.5 * (xs - u[..., 0:1]) ** 2 / sigma_gt**2)  # (..., K, hW)
    gy = np.exp(-0.5 * (ys - u[..., 1:2]) ** 2 / sigma_gt**2)  # (..., K, hH)
    hm = gy[..., :, None] * gx[..., None, :]
    hm *= np.asarray(visibility, dtype=bool)[..., None, None]
    return hm.astype(dtype)


def simulate_heatmaps(pred, grid):
    """Render each predicted (mu, sigma) as an unnormalized axis-aligned Gaussian.

    Differentiable in mu and sigma; returns a (B, K, hH, hW) tensor with peak <= 1.
    """
    mu, sigma = pred.mu, pred.sigma
    dt = mu.dtype
    B, K, _ = mu.shape
    # normalized -> heatmap coordinates
    ux = ad.scale(mu[:, :, 0], grid.width) - dt.type(0.5)
    uy = ad.scale(mu[:, :, 1], grid.height) - dt.type(0.5)
    xs = ad.Tensor(np.arange(grid.width, dtype=dt).reshape(1, 1, grid.width))
    ys = ad.Tensor(np.arange(grid.height, dtype=dt).reshape(1, 1, grid.height))
    dx = xs - ux.reshape(B, K, 1)
    dy = ys - uy.reshape(B, K, 1)
    sx = sigma[:, :, 0].reshape(B, K, 1)
    sy = sigma[:, :, 1].reshape(B, K, 1)
    gx = ad.exp(ad.scale(ad.square(dx / sx), -0.5))
    gy = ad.exp(ad.scale(ad.square(dy / sy), -0.5))
    return gy.reshape(B, K, grid.height, 1) * gx.reshape(B, K, 1, grid.width)


def simulated_heatmap_loss(sim, teacher):
    """Sum over keypoints of per-map MSE, averaged over the batch.

    The teacher stack is treated as a constant.
    """
    t = teacher.data if isinstance(teacher, ad.Tensor) else np.asarray(teacher)
    if sim.shape != t.shape:
        raise ad.ShapeError(f"simulated {sim.shape} vs teacher {t.shape}")
    k = sim.shape[-3]
    return ad.scale(ad.mse(sim, ad.Tensor(t.astype(sim.dtype, copy=False))), k)


def teacher_peak_lookup(mu, teacher, grid):
    """Teacher value at the rounded, grid-clamped student location, clamped to [0, 1].

    mu: (B, K, 2) normalized array; teacher: (B, K, hH, hW). Returns (B, K).
    """
    mu = np.asarray(mu, dtype=np.float64)
    t = np.asarray(teacher)
    ix = round_half_away(mu[..., 0] * grid.width - 0.5)
    iy = round_half_away(mu[..., 1] * grid.height - 0.5)
    ix = np.clip(ix, 0, grid.width - 1).astype(np.int64)
    iy = np.clip(iy, 0, grid.height - 1).astype(np.int64)
    vals = np.take_along_axis(
        t.reshape(*t.shape[:-2], -1), (iy * grid.width + ix)[..., None], axis=-1
    )[..., 0]
    return np.clip(vals, 0.0, 1.0)


def confidence_loss(pred, teacher, grid):
    """Sum over keypoints of |teacher peak lookup - s_k|, averaged over the batch.

    Gradient reaches the confidences only.
    """
    t = teacher.data if isinstance(teacher, ad.Tensor) else np.asarray(teacher)
    target = teacher_peak_lookup(pred.mu.data, t, grid).astype(pred.conf.dtype)
    k = pred.conf.shape[-1]
    per = ad.abs_(pred.conf - ad.Tensor(target))
    return ad.scale(ad.mean(per), k)


def instance_score(conf, bbox_score):
    """Person score: detector score times mean keypoint confidence."""
    conf = np.asarray(conf, dtype=np.float64)
    k = conf.shape[-1]
    total = conf[..., 0]
    for i in range(1, k):  # left-to-right accumulation, independent of numpy's pairwise sum
        total = total + conf[..., i]
    return np.asarray(bbox_score, dtype=np.float64) * (total / k)


def decode_heatmaps(hm, grid):
    """Plain argmax decoding. Returns (image-pixel coords (..., K, 2), scores (..., K))."""
    hm = np.asarray(hm)
    flat = hm.reshape(*hm.shape[:-2], -1)
    idx = np.argmax(flat, axis=-1)
    iy, ix = np.divmod(idx, grid.width)
    coords = np.stack([(ix + 0.5) * grid.stride, (iy + 0.5) * grid.stride], axis=-1)
    scores = np.clip(np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0], 0.0, 1.0)
    return coords.astype(np.float64), scores.astype(np.float64)
