"""Teacher and student training loops, the composite distillation loss, and prediction helpers."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .checkpoint import save_checkpoint
from .config import derive_seed
from .errors import ConfigError
from .heatmaps import (
    confidence_loss,
    decode_heatmaps,
    render_target_heatmaps,
    simulate_heatmaps,
    simulated_heatmap_loss,
)
from .metrics import evaluate
from .model import ModelConfig, PoseModel, TokenSet, token_distill_losses
from .optim import Adam, step_lr
from .synth import default_skeleton, inside, stack

LOG_HEADER = ["epoch", "lr", "l_reg", "l_kt", "l_vt", "l_sh", "l_cs", "total", "val_ap"]
TERMS = ("l_reg", "l_kt", "l_vt", "l_sh", "l_cs", "total")
EVAL_CHUNK = 128


class NonFiniteLossError(RuntimeError):
    pass


@dataclass
class LossBreakdown:
    l_reg: ad.Tensor
    l_kt: ad.Tensor
    l_vt: ad.Tensor
    l_sh: ad.Tensor
    l_cs: ad.Tensor
    total: ad.Tensor

    def values(self):
        return {name: float(getattr(self, name).data) for name in TERMS}

    def check_finite(self, where=""):
        for name in TERMS:
            v = getattr(self, name).data
            if not np.all(np.isfinite(v)):
                raise NonFiniteLossError(f"non-finite {name} ({float(v)!r}){where}")


@dataclass
class TeacherOutputs:
    """Frozen-teacher results for a batch: final tokens and heatmaps as plain arrays."""

    kpt_tokens: np.ndarray  # (B, K, D)
    vis_tokens: np.ndarray  # (B, P, D)
    heatmaps: np.ndarray  # (B, K, hH, hW)

    def take(self, idx):
        return TeacherOutputs(self.kpt_tokens[idx], self.vis_tokens[idx], self.heatmaps[idx])


# --- losses -----------------------------------------------------------------
def regression_loss(pred, keypoints, visibility, image_size, beta=1.0):
    """Smooth-L1 on normalized coordinates over keypoints that are GT-visible and predicted inside the image."""
    height, width = image_size
    norm = np.array([width, height], dtype=np.float64)
    target = (np.asarray(keypoints, dtype=np.float64) / norm).astype(pred.mu.dtype)
    pred_px = pred.mu.data.astype(np.float64) * norm
    keep = np.asarray(visibility, dtype=bool) & inside(pred_px, height, width)
    mask = np.broadcast_to(keep[..., None], target.shape)
    return ad.smooth_l1(pred.mu, ad.Tensor(target), beta=beta, mask=mask)


def teacher_heatmap_loss(heatmaps, target, visibility):
    """MSE between predicted and target heatmaps, averaged over the maps of visible keypoints."""
    vis = np.asarray(visibility, dtype=bool)
    dt = heatmaps.dtype
    n = int(vis.sum()) * heatmaps.shape[-1] * heatmaps.shape[-2]
    if n == 0:
        return ad.scale(ad.sum_(heatmaps), 0.0)
    mask = ad.Tensor(vis[..., None, None].astype(dt))
    diff = (heatmaps - ad.Tensor(np.asarray(target, dtype=dt))) * mask
    return ad.scale(ad.sum_(ad.square(diff)), 1.0 / n)


def _zero(dtype):
    return ad.Tensor(np.zeros((), dtype=dtype))


def total_loss(tokens, pred, teacher, keypoints, visibility, cfg, grid):
    """Weighted sum of the regression loss and the enabled distillation terms.

    ``teacher`` is a TeacherOutputs (or None when every distillation term is off).
    Disabled terms are constant zeros and contribute no gradient.
    """
    dt = pred.mu.dtype
    w = cfg.weights
    l_reg = regression_loss(pred, keypoints, visibility, cfg.image_size, cfg.smooth_l1_beta)
    l_kt = l_vt = l_sh = l_cs = _zero(dt)
    if cfg.use_kt or cfg.use_vt or cfg.use_sh or cfg.use_cs:
        if teacher is None:
            raise ConfigError("distillation terms enabled but no teacher outputs given")
    if cfg.use_kt or cfg.use_vt:
        t_tokens = TokenSet(ad.Tensor(teacher.kpt_tokens), ad.Tensor(teacher.vis_tokens))
        kt, vt = token_distill_losses(tokens, t_tokens)
        l_kt = kt if cfg.use_kt else l_kt
        l_vt = vt if cfg.use_vt else l_vt
    if cfg.use_sh:
        l_sh = simulated_heatmap_loss(simulate_heatmaps(pred, grid), teacher.heatmaps)
    if cfg.use_cs:
        l_cs = confidence_loss(pred, teacher.heatmaps, grid)
    total = l_reg
    for term, alpha in ((l_kt, w.alpha1), (l_vt, w.alpha2), (l_sh, w.alpha3), (l_cs, w.alpha4)):
        total = total + ad.scale(term, alpha)
    return LossBreakdown(l_reg, l_kt, l_vt, l_sh, l_cs, total)


# --- data -------------------------------------------------------------------
def flip_permutation(num_keypoints):
    perm = np.arange(num_keypoints)
    skel = default_skeleton()
    if skel.num_keypoints == num_keypoints:
        for a, b in skel.flip_pairs:
            perm[a], perm[b] = b, a
    return perm


def augment_batch(images, keypoints, visibility, rng, max_shift=3):
    """Random horizontal flip (left/right joints swapped) and integer translation with edge padding.

    A sample is left untouched if the transform would leave no visible keypoint.
    """
    images = images.copy()
    keypoints = keypoints.copy()
    visibility = visibility.copy()
    n, height, width = images.shape
    perm = flip_permutation(keypoints.shape[1])
    flips = rng.random(n) < 0.5
    shifts = rng.integers(-max_shift, max_shift + 1, size=(n, 2))
    for i in range(n):
        img, kps, vis = images[i], keypoints[i].astype(np.float64), visibility[i]
        if flips[i]:
            img = img[:, ::-1]
            kps = kps[perm]
            kps[:, 0] = width - kps[:, 0]
            vis = vis[perm]
        dx, dy = (int(s) for s in shifts[i])
        if dx or dy:
            p = max_shift
            padded = np.pad(img, p, mode="edge")
            img = padded[p - dy:p - dy + height, p - dx:p - dx + width]
            kps = kps + np.array([dx, dy])
        vis = vis & inside(kps, height, width)
        if not vis.any():
            continue
        images[i], keypoints[i], visibility[i] = img, kps.astype(keypoints.dtype), vis
    return images, keypoints, visibility


@dataclass
class Arrays:
    images: np.ndarray
    keypoints: np.ndarray
    visibility: np.ndarray
    bbox_scores: np.ndarray

    @classmethod
    def from_samples(cls, samples):
        if not samples:
            raise ConfigError("dataset is empty")
        return cls(*stack(samples))

    def __len__(self):
        return len(self.images)

    @property
    def num_keypoints(self):
        return self.keypoints.shape[1]


def _batches(n, batch_size, seed, *labels):
    order = np.random.default_rng(derive_seed(seed, *labels)).permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


# --- prediction -------------------------------------------------------------
def teacher_outputs(model, images, chunk=EVAL_CHUNK):
    parts = []
    with ad.no_grad():
        for i in range(0, len(images), chunk):
            tokens, hm = model(images[i:i + chunk])
            parts.append((tokens.kpt_tokens.data, tokens.vis_tokens.data, hm.data))
    return TeacherOutputs(*(np.concatenate(p) for p in zip(*parts)))


def predict_student(model, images, chunk=EVAL_CHUNK):
    """(image-pixel coords (N,K,2), sigma (N,K,2), conf (N,K))."""
    cfg = model.cfg
    mus, sigmas, confs = [], [], []
    with ad.no_grad():
        for i in range(0, len(images), chunk):
            _, pred = model(images[i:i + chunk])
            mus.append(pred.image_coords(cfg.image_height, cfg.image_width))
            sigmas.append(pred.sigma.data)
            confs.append(pred.conf.data)
    return np.concatenate(mus).astype(np.float64), np.concatenate(sigmas), np.concatenate(confs)


def predict_teacher(model, images, chunk=EVAL_CHUNK):
    """(image-pixel coords (N,K,2), peak scores (N,K), heatmaps)."""
    hm = teacher_outputs(model, images, chunk).heatmaps
    coords, scores = decode_heatmaps(hm, model.cfg.heatmap_grid)
    return coords, scores, hm


def evaluate_model(model, data):
    if model.cfg.head == "heatmap":
        coords, conf, _ = predict_teacher(model, data.images)
    else:
        coords, _, conf = predict_student(model, data.images)
    return evaluate(coords, conf, data.bbox_scores, data.keypoints, data.visibility, data.images.shape[1:])


# --- checkpoints and configs ------------------------------------------------
def model_config_from_state(state, cfg):
    """Rebuild a ModelConfig from checkpoint tensor shapes; heads, patch and image size come from ``cfg``."""
    try:
        k, d = state["kpt_tokens"].shape
        p = state["pos_embed"].shape[0]
        c1 = state["stem.conv1.weight"].shape[3]
        c2 = state["stem.conv2.weight"].shape[3]
        mlp = state["layer0.fc1.weight"].shape[1] // d
    except KeyError as exc:
        raise ConfigError(f"checkpoint lacks tensor {exc}") from None
    layers = 0
    while f"layer{layers}.norm1.gain" in state:
        layers += 1
    extra = 0
    while f"stem.extra{extra}.weight" in state:
        extra += 1
    head = "heatmap" if "head.fc.weight" in state else "regression"
    mc = ModelConfig(
        num_keypoints=k,
        image_height=cfg.image_height,
        image_width=cfg.image_width,
        num_layers=layers,
        embed_dim=d,
        num_heads=cfg.num_heads,
        patch_h=cfg.patch_h,
        patch_w=cfg.patch_w,
        mlp_ratio=mlp,
        stem_channels=(c1, c2),
        stem_extra=extra,
        head=head,
        isotropic_sigma=cfg.isotropic_sigma,
    )
    if mc.num_patches != p:
        raise ConfigError(f"checkpoint has {p} visual tokens but the configured patch grid gives {mc.num_patches}")
    return mc


def model_from_state(state, cfg):
    model = PoseModel(model_config_from_state(state, cfg))
    model.load_state_dict(state)
    return model


def check_teacher_compatible(student_cfg, teacher_cfg):
    s = (student_cfg.num_keypoints, student_cfg.num_patches, student_cfg.embed_dim)
    t = (teacher_cfg.num_keypoints, teacher_cfg.num_patches, teacher_cfg.embed_dim)
    if s != t:
        raise ConfigError(f"teacher token geometry (K, P, D)={t} does not match student {s}")
    if teacher_cfg.head != "heatmap":
        raise ConfigError("teacher checkpoint does not have a heatmap head")
    if teacher_cfg.heatmap_grid != student_cfg.heatmap_grid:
        raise ConfigError("teacher and student heatmap grids differ")


# --- loops ------------------------------------------------------------------
@dataclass
class TrainResult:
    model: PoseModel
    best_state: dict
    best_epoch: int
    best_val_ap: float
    log: list = field(default_factory=list)


def _fmt(v):
    return repr(float(v))


def write_log(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_HEADER)
        for r in rows:
            w.writerow([r["epoch"]] + [_fmt(r[k]) for k in LOG_HEADER[1:]])


def _run(model, cfg, train, val, seed, stage, step_fn, out_dir, progress):
    opt = Adam(model.parameters(), cfg.lr, (cfg.adam_beta1, cfg.adam_beta2), cfg.adam_eps)
    log = []
    best = (-math.inf, 0, None)
    for epoch in range(1, cfg.epochs + 1):
        opt.lr = step_lr(cfg.lr, epoch, cfg.decay_epochs, cfg.decay_factor)
        sums = dict.fromkeys(TERMS, 0.0)
        batches = _batches(len(train), cfg.batch_size, seed, stage, "order", epoch)
        for b, idx in enumerate(batches):
            parts = step_fn(idx, epoch)
            parts.check_finite(f" at epoch {epoch}, batch {b}")
            opt.zero_grad()
            ad.backward(parts.total)
            opt.step()
            for k, v in parts.values().items():
                sums[k] += v
        report = evaluate_model(model, val)
        row = {"epoch": epoch, "lr": opt.lr, **{k: v / len(batches) for k, v in sums.items()}, "val_ap": report.ap}
        log.append(row)
        if report.ap > best[0]:
            best = (report.ap, epoch, model.state_dict())
        if progress:
            progress(f"[{stage}] epoch {epoch}/{cfg.epochs} lr {opt.lr:.1e} loss {row['total']:.5f} "
                     f"val AP {report.ap:.4f} PCK {report.pck:.4f}")
    result = TrainResult(model=model, best_state=best[2], best_epoch=best[1], best_val_ap=best[0], log=log)
    if out_dir is not None:
        out = Path(out_dir)
        write_log(out / "log.csv", log)
        save_checkpoint(out / "best.dpck", result.best_state)
    return result


def train_teacher(cfg, train_samples, val_samples, seed, out_dir=None, progress=None):
    train = Arrays.from_samples(train_samples)
    val = Arrays.from_samples(val_samples)
    mcfg = cfg.teacher_model(train.num_keypoints)
    model = PoseModel(mcfg, seed=derive_seed(seed, "teacher", "init"))
    grid = mcfg.heatmap_grid
    aug_rng = np.random.default_rng(derive_seed(seed, "teacher", "augment"))

    def step(idx, epoch):
        imgs, kps, vis = train.images[idx], train.keypoints[idx], train.visibility[idx]
        if cfg.teacher_augment:
            imgs, kps, vis = augment_batch(imgs, kps, vis, aug_rng)
        target = render_target_heatmaps(kps, vis, grid, cfg.sigma_gt)
        _, hm = model(imgs)
        loss = teacher_heatmap_loss(hm, target, vis)
        z = _zero(loss.dtype)
        return LossBreakdown(loss, z, z, z, z, loss)

    return _run(model, cfg, train, val, seed, "teacher", step, out_dir, progress)


def needs_teacher(cfg):
    return cfg.use_kt or cfg.use_vt or cfg.use_sh or cfg.use_cs


def train_student(cfg, train_samples, val_samples, teacher, seed, out_dir=None, progress=None, cache=None):
    """Distil ``teacher`` (a frozen heatmap PoseModel) into a fresh regression student.

    ``cache`` may hold TeacherOutputs for the whole training set (valid only without
    student augmentation); it is computed here when needed and not supplied.
    """
    train = Arrays.from_samples(train_samples)
    val = Arrays.from_samples(val_samples)
    mcfg = cfg.student_model(train.num_keypoints)
    use_teacher = needs_teacher(cfg)
    if use_teacher:
        if teacher is None:
            raise ConfigError("distillation enabled but no teacher given")
        check_teacher_compatible(mcfg, teacher.cfg)
        teacher.set_requires_grad(False)
        if cfg.student_augment:
            cache = None
        elif cache is None:
            cache = teacher_outputs(teacher, train.images)
    model = PoseModel(mcfg, seed=derive_seed(seed, "student", "init"))
    grid = mcfg.heatmap_grid
    aug_rng = np.random.default_rng(derive_seed(seed, "student", "augment"))

    def step(idx, epoch):
        imgs, kps, vis = train.images[idx], train.keypoints[idx], train.visibility[idx]
        t_out = None
        if cfg.student_augment:
            imgs, kps, vis = augment_batch(imgs, kps, vis, aug_rng)
            if use_teacher:
                t_out = teacher_outputs(teacher, imgs)
        elif use_teacher:
            t_out = cache.take(idx)
        tokens, pred = model(imgs)
        return total_loss(tokens, pred, t_out, kps, vis, cfg, grid)

    return _run(model, cfg, train, val, seed, "student", step, out_dir, progress)
