"""Binary PGM/PPM writers and the per-sample inspection dump."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def to_u8(values, scale=None):
    """Map to 0..255. With ``scale=None`` the map is max-normalized; otherwise divided by ``scale``."""
    v = np.asarray(values, dtype=np.float64)
    if scale is None:
        top = v.max() if v.size else 0.0
        scale = top if top > 0 else 1.0
    return np.clip(np.rint(np.clip(v, 0, None) / scale * 255), 0, 255).astype(np.uint8)


def write_pgm(path, gray_u8):
    g = np.asarray(gray_u8, dtype=np.uint8)
    h, w = g.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + g.tobytes())


def write_ppm(path, rgb_u8):
    c = np.asarray(rgb_u8, dtype=np.uint8)
    h, w, _ = c.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + c.tobytes())


def read_pnm(path):
    """Parse a P5/P6 file written by this module: (magic, width, height, maxval, pixels)."""
    raw = Path(path).read_bytes()
    magic, dims, maxval, body = raw.split(b"\n", 3)
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"{path}: not a binary PGM/PPM file")
    w, h = (int(x) for x in dims.split())
    channels = 3 if magic == b"P6" else 1
    px = np.frombuffer(body, np.uint8).reshape((h, w, channels) if channels == 3 else (h, w))
    return magic.decode(), w, h, int(maxval), px


def overlay(image, pred, gt, visibility, upscale=4):
    """Grayscale input as RGB with ground truth (green) and prediction (red) marked."""
    img = np.repeat(np.repeat(np.asarray(image), upscale, 0), upscale, 1)
    rgb = np.stack([to_u8(img, 1.0)] * 3, axis=-1)
    h, w = img.shape

    def mark(xy, color):
        cx, cy = int(np.floor(xy[0] * upscale)), int(np.floor(xy[1] * upscale))
        for dx in range(-2, 3):
            for dy in range(-2, 3):
                x, y = cx + dx, cy + dy
                if (dx == 0 or dy == 0) and 0 <= x < w and 0 <= y < h:
                    rgb[y, x] = color

    for k in range(len(gt)):
        if visibility[k]:
            mark(gt[k], (0, 255, 0))
        mark(pred[k], (255, 0, 0))
    return rgb


def dump_inspection(out_dir, teacher_maps, simulated_maps, attention, patch_grid, image, pred, gt, visibility):
    """Write 3K heatmap files, K attention maps and one overlay; returns the written paths.

    Teacher and simulated maps are max-normalized per map; the difference is shown on an
    absolute scale (|teacher - simulated| with 1.0 -> 255) so that images are comparable
    between checkpoints.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for k in range(len(teacher_maps)):
        t, s = teacher_maps[k], simulated_maps[k]
        for name, img in (
            (f"kp{k:02d}_teacher.pgm", to_u8(t)),
            (f"kp{k:02d}_simulated.pgm", to_u8(s)),
            (f"kp{k:02d}_diff.pgm", to_u8(np.abs(t - s), 1.0)),
            (f"kp{k:02d}_attention.pgm", to_u8(np.asarray(attention[k]).reshape(patch_grid))),
        ):
            write_pgm(out / name, img)
            paths.append(out / name)
    write_ppm(out / "overlay.ppm", overlay(image, pred, gt, visibility))
    paths.append(out / "overlay.ppm")
    return paths
