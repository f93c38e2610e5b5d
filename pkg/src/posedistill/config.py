"""Run configuration: UTF-8 ``key=value`` lines, ``#`` comments, unknown keys rejected.

Keys (defaults in parentheses)::

    image_height (64)  image_width (48)  train_size (4096)  val_size (512)
    num_layers (4)  embed_dim (64)  num_heads (4)  patch_h (4)  patch_w (3)  mlp_ratio (3)
    student_stem (8,16)  teacher_stem (32,64)  teacher_stem_extra (1)
    epochs (30)  batch_size (32)  lr (0.001)  decay_epochs (20,26)  decay_factor (0.1)
    alpha1 (0.0005)  alpha2 (0.0005)  alpha3 (1.0)  alpha4 (0.01)
    use_kt (1)  use_vt (1)  use_sh (1)  use_cs (1)  isotropic_sigma (0)
    teacher_augment (1)  student_augment (0)  sigma_gt (2.0)  smooth_l1_beta (1.0)
    adam_beta1 (0.9)  adam_beta2 (0.999)  adam_eps (1e-08)  ablation_seeds (3)
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError
from .model import ModelConfig


@dataclass(frozen=True)
class LossWeights:
    alpha1: float = 5e-4  # keypoint tokens
    alpha2: float = 5e-4  # visual tokens
    alpha3: float = 1.0  # simulated heatmaps
    alpha4: float = 1e-2  # confidence

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ConfigError(f"{f.name} must be nonnegative")


@dataclass(frozen=True)
class TrainConfig:
    image_height: int = 64
    image_width: int = 48
    train_size: int = 4096
    val_size: int = 512

    num_layers: int = 4
    embed_dim: int = 64
    num_heads: int = 4
    patch_h: int = 4
    patch_w: int = 3
    mlp_ratio: int = 3
    student_stem: tuple[int, ...] = (8, 16)
    teacher_stem: tuple[int, ...] = (32, 64)
    teacher_stem_extra: int = 1

    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    decay_epochs: tuple[int, ...] = (20, 26)
    decay_factor: float = 0.1
    alpha1: float = 5e-4
    alpha2: float = 5e-4
    alpha3: float = 1.0
    alpha4: float = 1e-2
    use_kt: bool = True
    use_vt: bool = True
    use_sh: bool = True
    use_cs: bool = True
    isotropic_sigma: bool = False
    teacher_augment: bool = True
    student_augment: bool = False
    sigma_gt: float = 2.0
    smooth_l1_beta: float = 1.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    ablation_seeds: int = 3

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        d = list(self.decay_epochs)
        if any(b <= a for a, b in zip(d, d[1:])):
            raise ConfigError(f"decay_epochs {d} must be strictly increasing")
        if d and (d[0] < 1 or d[-1] > self.epochs):
            raise ConfigError(f"decay_epochs {d} must lie within [1, {self.epochs}]")
        if self.sigma_gt <= 0 or self.smooth_l1_beta <= 0:
            raise ConfigError("sigma_gt and smooth_l1_beta must be positive")
        if self.train_size < 1 or self.val_size < 1:
            raise ConfigError("dataset sizes must be positive")
        self.weights  # validates the alphas

    @property
    def weights(self):
        return LossWeights(self.alpha1, self.alpha2, self.alpha3, self.alpha4)

    @property
    def image_size(self):
        return (self.image_height, self.image_width)

    def _model(self, **kw):
        return ModelConfig(
            image_height=self.image_height,
            image_width=self.image_width,
            num_layers=self.num_layers,
            embed_dim=self.embed_dim,
            num_heads=self.num_heads,
            patch_h=self.patch_h,
            patch_w=self.patch_w,
            mlp_ratio=self.mlp_ratio,
            **kw,
        )

    def student_model(self, num_keypoints):
        return self._model(
            num_keypoints=num_keypoints,
            stem_channels=tuple(self.student_stem),
            head="regression",
            isotropic_sigma=self.isotropic_sigma,
        )

    def teacher_model(self, num_keypoints):
        return self._model(
            num_keypoints=num_keypoints,
            stem_channels=tuple(self.teacher_stem),
            stem_extra=self.teacher_stem_extra,
            head="heatmap",
        )

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


def _parse_bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _parser_for(f):
    t = f.type if isinstance(f.type, str) else f.type.__name__
    if t.startswith("tuple"):
        return lambda s: tuple(int(v) for v in s.replace(" ", "").split(",") if v)
    return {"int": int, "float": float, "bool": _parse_bool}[t]


_FIELDS = {f.name: f for f in fields(TrainConfig)}


def parse_config(text, base=None):
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            values[key] = _parser_for(_FIELDS[key])(val)
        except (ValueError, ConfigError) as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from None
    return (base or TrainConfig()).replace(**values)


def load_config(path=None):
    if path is None:
        return TrainConfig()
    return parse_config(Path(path).read_text(encoding="utf-8"))


def format_config(cfg):
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, bool):
            s = "1" if v else "0"
        elif isinstance(v, tuple):
            s = ",".join(str(x) for x in v)
        else:
            s = repr(v)
        lines.append(f"{f.name}={s}")
    return "\n".join(lines) + "\n"


def derive_seed(seed, *labels):
    """Stable 63-bit seed for a labelled stage; independent of other stages."""
    key = ":".join([str(int(seed))] + [str(x) for x in labels]).encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little") >> 1
