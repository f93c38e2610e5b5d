"""Tokenized pose models: conv stem, transformer encoder over keypoint + visual tokens, and two heads.

The teacher ends in a heatmap head, the student in a coordinate regression head.
Both expose their final-layer tokens so the student can be aligned to the teacher.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError
from .heatmaps import HeatmapGrid, StudentPrediction


@dataclass(frozen=True)
class ModelConfig:
    num_keypoints: int = 13
    image_height: int = 64
    image_width: int = 48
    num_layers: int = 4
    embed_dim: int = 64
    num_heads: int = 4
    patch_h: int = 4
    patch_w: int = 3
    mlp_ratio: int = 3
    stem_channels: tuple[int, ...] = (16, 32)
    stem_extra: int = 0  # extra stride-1 conv stages at 1/4 resolution
    head: str = "regression"  # or "heatmap"
    isotropic_sigma: bool = False
    init_sigma: float = 2.0

    def __post_init__(self):
        if self.embed_dim % self.num_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.image_height % 4 or self.image_width % 4:
            raise ConfigError("image dims must be divisible by 4")
        gh, gw = self.grid_hw
        if gh % self.patch_h or gw % self.patch_w:
            raise ConfigError(f"feature grid {gh}x{gw} not divisible by patch {self.patch_h}x{self.patch_w}")
        if self.head not in ("regression", "heatmap"):
            raise ConfigError(f"unknown head {self.head!r}")
        if len(self.stem_channels) != 2:
            raise ConfigError("stem_channels needs two entries (two stride-2 convs)")

    @property
    def grid_hw(self):
        return self.image_height // 4, self.image_width // 4

    @property
    def patch_grid(self):
        gh, gw = self.grid_hw
        return gh // self.patch_h, gw // self.patch_w

    @property
    def num_patches(self):
        ph, pw = self.patch_grid
        return ph * pw

    @property
    def heatmap_grid(self):
        return HeatmapGrid.for_image(self.image_height, self.image_width)

    def token_geometry(self):
        return (self.num_layers, self.embed_dim, self.num_patches, self.num_keypoints)


@dataclass
class TokenSet:
    kpt_tokens: ad.Tensor  # (B, K, D)
    vis_tokens: ad.Tensor  # (B, P, D)


# --- parameter containers ------------------------------------------------------
class Module:
    def __init__(self):
        self._params = {}
        self._children = {}

    def param(self, name, data):
        t = ad.Tensor(data, requires_grad=True, dtype=data.dtype, name=name)
        self._params[name] = t
        return t

    def child(self, name, module):
        self._children[name] = module
        return module

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, c in self._children.items():
            yield from c.named_parameters(f"{prefix}{cname}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state, strict=True):
        own = dict(self.named_parameters())
        if strict and set(own) != set(state):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise ConfigError(f"state mismatch; missing={missing[:5]} unexpected={extra[:5]}")
        for name, arr in state.items():
            p = own[name]
            if p.shape != tuple(arr.shape):
                raise ConfigError(f"{name}: checkpoint shape {tuple(arr.shape)} vs model {p.shape}")
            p.data = np.array(arr, dtype=p.dtype)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def set_requires_grad(self, flag):
        for p in self.parameters():
            p.requires_grad = flag


def _uniform(rng, fan_in, shape, dtype):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _trunc_normal(rng, shape, dtype, std=0.02):
    x = rng.normal(0.0, std, size=shape)
    bad = np.abs(x) > 2 * std
    while bad.any():
        x[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(x) > 2 * std
    return x.astype(dtype)


class Linear(Module):
    def __init__(self, rng, d_in, d_out, dtype, bias=True):
        super().__init__()
        self.weight = self.param("weight", _uniform(rng, d_in, (d_in, d_out), dtype))
        self.bias = self.param("bias", np.zeros(d_out, dtype)) if bias else None

    def __call__(self, x):
        return ad.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim, dtype):
        super().__init__()
        self.gain = self.param("gain", np.ones(dim, dtype))
        self.bias = self.param("bias", np.zeros(dim, dtype))

    def __call__(self, x):
        return ad.layer_norm(x, self.gain, self.bias)


class Conv(Module):
    def __init__(self, rng, c_in, c_out, stride, dtype):
        super().__init__()
        self.stride = stride
        self.weight = self.param("weight", _uniform(rng, 9 * c_in, (3, 3, c_in, c_out), dtype))
        self.bias = self.param("bias", np.zeros(c_out, dtype))

    def __call__(self, x):
        return ad.relu(ad.conv2d(x, self.weight, self.bias, stride=self.stride, padding=1))


class Stem(Module):
    """Two stride-2 convs to 1/4 resolution, optionally followed by residual stride-1 stages."""

    def __init__(self, rng, channels, extra, dtype):
        super().__init__()
        c1, c2 = channels
        self.convs = [self.child("conv1", Conv(rng, 1, c1, 2, dtype)), self.child("conv2", Conv(rng, c1, c2, 2, dtype))]
        self.extra = [self.child(f"extra{i}", Conv(rng, c2, c2, 1, dtype)) for i in range(extra)]

    def __call__(self, x):
        for conv in self.convs:
            x = conv(x)
        for conv in self.extra:
            x = x + conv(x)
        return x


class Attention(Module):
    def __init__(self, rng, dim, heads, dtype):
        super().__init__()
        self.heads = heads
        self.qkv = self.child("qkv", Linear(rng, dim, 3 * dim, dtype, bias=False))
        self.proj = self.child("proj", Linear(rng, dim, dim, dtype))
        self.record = None

    def __call__(self, x):
        return self.proj(ad.multi_head_attention(self.qkv(x), self.heads, record=self.record))


class EncoderLayer(Module):
    def __init__(self, rng, dim, heads, mlp_ratio, dtype):
        super().__init__()
        self.norm1 = self.child("norm1", LayerNorm(dim, dtype))
        self.attn = self.child("attn", Attention(rng, dim, heads, dtype))
        self.norm2 = self.child("norm2", LayerNorm(dim, dtype))
        self.fc1 = self.child("fc1", Linear(rng, dim, mlp_ratio * dim, dtype))
        self.fc2 = self.child("fc2", Linear(rng, mlp_ratio * dim, dim, dtype))

    def __call__(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.fc2(ad.gelu(self.fc1(self.norm2(x))))


def _softplus_inverse(y):
    return math.log(math.expm1(y))


class HeatmapHead(Module):
    def __init__(self, rng, cfg, dtype):
        super().__init__()
        self.grid = cfg.heatmap_grid
        self.norm = self.child("norm", LayerNorm(cfg.embed_dim, dtype))
        self.fc = self.child("fc", Linear(rng, cfg.embed_dim, self.grid.height * self.grid.width, dtype))

    def __call__(self, kpt):
        B, K, _ = kpt.shape
        return self.fc(self.norm(kpt)).reshape(B, K, self.grid.height, self.grid.width)


class RegressionHead(Module):
    """Per-token MLP to (mu_x, mu_y, raw sigma_x, raw sigma_y, raw conf).

    mu and conf are squashed to [0, 1] with a logistic; sigma is a softplus plus a small floor.
    """

    SIGMA_FLOOR = 1e-3

    def __init__(self, rng, cfg, dtype):
        super().__init__()
        self.isotropic = cfg.isotropic_sigma
        d = cfg.embed_dim
        self.norm = self.child("norm", LayerNorm(d, dtype))
        self.fc1 = self.child("fc1", Linear(rng, d, d, dtype))
        self.fc2 = self.child("fc2", Linear(rng, d, 5, dtype))
        b = self.fc2.bias.data
        b[2:4] = _softplus_inverse(cfg.init_sigma - self.SIGMA_FLOOR)

    def __call__(self, kpt):
        out = self.fc2(ad.gelu(self.fc1(self.norm(kpt))))  # (B, K, 5)
        dt = out.dtype.type
        mu = ad.sigmoid(out[:, :, 0:2])
        raw_sigma = ad.concat([out[:, :, 2:3], out[:, :, 2:3]], axis=2) if self.isotropic else out[:, :, 2:4]
        sigma = ad.softplus(raw_sigma) + dt(self.SIGMA_FLOOR)
        conf = ad.sigmoid(out[:, :, 4])
        return StudentPrediction(mu=mu, sigma=sigma, conf=conf)


class PoseModel(Module):
    def __init__(self, cfg, seed=0, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        D, K, P = cfg.embed_dim, cfg.num_keypoints, cfg.num_patches
        c2 = cfg.stem_channels[1]
        self.stem = self.child("stem", Stem(rng, cfg.stem_channels, cfg.stem_extra, self.dtype))
        self.patch_embed = self.child("patch_embed", Linear(rng, c2 * cfg.patch_h * cfg.patch_w, D, self.dtype))
        self.kpt_tokens = self.param("kpt_tokens", _trunc_normal(rng, (K, D), self.dtype))
        self.pos_embed = self.param("pos_embed", _trunc_normal(rng, (P, D), self.dtype))
        self.layers = [
            self.child(f"layer{i}", EncoderLayer(rng, D, cfg.num_heads, cfg.mlp_ratio, self.dtype))
            for i in range(cfg.num_layers)
        ]
        head_cls = HeatmapHead if cfg.head == "heatmap" else RegressionHead
        self.head = self.child("head", head_cls(rng, cfg, self.dtype))

    def patchify(self, feat):
        B, gh, gw, C = feat.shape
        ph, pw = self.cfg.patch_h, self.cfg.patch_w
        nh, nw = gh // ph, gw // pw
        x = feat.reshape(B, nh, ph, nw, pw, C).transpose(0, 1, 3, 2, 4, 5)
        return x.reshape(B, nh * nw, ph * pw * C)

    def encode(self, images):
        """images: (B, H, W) array or tensor -> final TokenSet."""
        cfg = self.cfg
        x = images if isinstance(images, ad.Tensor) else ad.Tensor(np.asarray(images, dtype=self.dtype))
        if x.ndim != 3 or x.shape[1:] != (cfg.image_height, cfg.image_width):
            raise ConfigError(f"expected images (B, {cfg.image_height}, {cfg.image_width}), got {x.shape}")
        B = x.shape[0]
        feat = self.stem(x.reshape(B, cfg.image_height, cfg.image_width, 1))
        vis = self.patch_embed(self.patchify(feat)) + self.pos_embed
        kpt = ad.expand(self.kpt_tokens, (B,) + self.kpt_tokens.shape)
        z = ad.concat([kpt, vis], axis=1)
        for layer in self.layers:
            z = layer(z)
        K = cfg.num_keypoints
        return TokenSet(kpt_tokens=z[:, :K], vis_tokens=z[:, K:])

    def __call__(self, images):
        tokens = self.encode(images)
        return tokens, self.head(tokens.kpt_tokens)

    def attention_records(self, images):
        """Forward without grad, capturing per-layer q, k and attention weights."""
        records = []
        for layer in self.layers:
            layer.attn.record = {}
            records.append(layer.attn.record)
        try:
            with ad.no_grad():
                self(images)
        finally:
            for layer in self.layers:
                layer.attn.record = None
        return records


def token_distill_losses(student, teacher):
    """(keypoint-token MSE, visual-token MSE); the teacher tokens are constants."""
    for s, t in ((student.kpt_tokens, teacher.kpt_tokens), (student.vis_tokens, teacher.vis_tokens)):
        if s.shape != t.shape:
            raise ConfigError(f"token shapes differ between student {s.shape} and teacher {t.shape}")
    kt = ad.mse(student.kpt_tokens, ad.Tensor(teacher.kpt_tokens.data.astype(student.kpt_tokens.dtype, copy=False)))
    vt = ad.mse(student.vis_tokens, ad.Tensor(teacher.vis_tokens.data.astype(student.vis_tokens.dtype, copy=False)))
    return kt, vt


def attention_matrix(model, image, layer, keypoint_index):
    """Head-averaged attention of one keypoint token over the visual tokens, shape (P,)."""
    cfg = model.cfg
    if not 0 <= layer < cfg.num_layers:
        raise IndexError(f"layer {layer} out of range [0, {cfg.num_layers})")
    if not 0 <= keypoint_index < cfg.num_keypoints:
        raise IndexError(f"keypoint {keypoint_index} out of range [0, {cfg.num_keypoints})")
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[None]
    rec = model.attention_records(image[:1])[layer]
    row = rec["attn"][0, :, keypoint_index, :]  # (heads, N)
    return row[:, cfg.num_keypoints:].mean(axis=0)
