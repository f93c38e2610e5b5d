"""Central finite-difference checks of every differentiable operation, in double precision.

Each check builds random float64 inputs from a seed and a scalar function of them.
Non-scalar op outputs are reduced with a fixed random weighting so every output
element contributes a distinct coefficient. Ops are looked up on their modules at
call time, so a patched op is what gets checked.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import heatmaps as hmops
from . import model as mdl
from . import train as tr
from .config import TrainConfig
from .heatmaps import HeatmapGrid, StudentPrediction

STEP = 1e-5
TOLERANCE = 1e-4
NUM_SEEDS = 10


@dataclass
class CheckResult:
    op: str
    seed: int
    error: float

    @property
    def passed(self):
        return bool(np.isfinite(self.error) and self.error < TOLERANCE)


def relative_error(analytic, numeric):
    a = np.concatenate([np.ravel(x) for x in analytic])
    n = np.concatenate([np.ravel(x) for x in numeric])
    denom = np.linalg.norm(a) + np.linalg.norm(n)
    if denom == 0:
        return 0.0
    return float(np.linalg.norm(a - n) / denom)


def _weighted(out, rng):
    """Scalar from any tensor: sum of elements times fixed random weights."""
    w = ad.Tensor(rng.uniform(0.5, 1.5, size=out.shape))
    return ad.sum_(out * w)


def check_function(fn, inputs, step=STEP):
    """Max-norm relative error between backprop and central differences of scalar ``fn``."""
    tensors = [ad.Tensor(x.copy(), requires_grad=True, dtype=np.float64) for x in inputs]
    loss = fn(*tensors)
    ad.backward(loss)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]
    numeric = []
    with ad.no_grad():
        for i, x in enumerate(inputs):
            g = np.zeros_like(x)
            for j in range(x.size):
                args = [a.copy() for a in inputs]
                flat = args[i].reshape(-1)
                flat[j] = x.flat[j] + step
                up = float(fn(*[ad.Tensor(a, dtype=np.float64) for a in args]).data)
                flat[j] = x.flat[j] - step
                down = float(fn(*[ad.Tensor(a, dtype=np.float64) for a in args]).data)
                g.flat[j] = (up - down) / (2 * step)
            numeric.append(g)
    return relative_error(analytic, numeric)


def _away_from(x, points, margin):
    """Nudge entries of ``x`` lying within ``margin`` of any kink in ``points``."""
    for p in points:
        close = np.abs(x - p) < margin
        x = np.where(close, p + np.sign(x - p + 1e-12) * margin, x)
    return x


# --- individual checks ------------------------------------------------------
# Each returns (inputs, fn) for a given rng.

_UNARY = {"exp": "exp", "log": "log", "square": "square", "abs": "abs_", "relu": "relu",
          "sigmoid": "sigmoid", "softplus": "softplus", "gelu": "gelu", "neg": "neg"}


def _elementwise(name):
    def build(rng):
        x = rng.normal(size=(3, 4))
        if name == "log":
            x = rng.uniform(0.5, 2.0, size=(3, 4))
        if name in ("abs", "relu"):
            x = _away_from(x, [0.0], 0.05)
        return [x], lambda a: _weighted(getattr(ad, _UNARY[name])(a), np.random.default_rng(7))
    return build


def _binary(name):
    def build(rng):
        a = rng.normal(size=(2, 3, 4))
        b = rng.normal(size=(3, 1))  # broadcast along two axes
        if name == "div":
            b = rng.uniform(0.5, 2.0, size=(3, 1)) * rng.choice([-1, 1], size=(3, 1))
        f = lambda x, y: _weighted(getattr(ad, name)(x, y), np.random.default_rng(7))
        return [a, b], f
    return build


def _reductions(rng):
    x = rng.normal(size=(3, 4, 5))

    def f(a):
        w = np.random.default_rng(7)
        s1 = _weighted(ad.sum_(a, axis=1), w)
        s2 = _weighted(ad.mean(a, axis=(0, 2), keepdims=True), w)
        return s1 + s2 + ad.mean(a)
    return [x], f


def _shape_ops(rng):
    x = rng.normal(size=(2, 3, 4))

    def f(a):
        w = np.random.default_rng(7)
        y = ad.transpose(ad.reshape(a, (6, 4)), (1, 0))
        z = ad.swap_last(a)
        return _weighted(y, w) + _weighted(z, w)
    return [x], f


def _getitem(rng):
    x = rng.normal(size=(4, 5))
    idx = np.array([0, 2, 2, 3])  # repeated rows accumulate

    def f(a):
        w = np.random.default_rng(7)
        return _weighted(ad.getitem(a, (slice(1, 3), slice(None, None, 2))), w) + _weighted(ad.getitem(a, idx), w)
    return [x], f


def _concat_expand(rng):
    a, b = rng.normal(size=(2, 3)), rng.normal(size=(2, 2))
    c = rng.normal(size=(3,))

    def f(x, y, z):
        w = np.random.default_rng(7)
        return _weighted(ad.concat([x, y], axis=1), w) + _weighted(ad.expand(z, (4, 3)), w)
    return [a, b, c], f


def _matmul(rng):
    a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5))
    c = rng.normal(size=(2, 5, 3))

    def f(x, y, z):
        w = np.random.default_rng(7)
        return _weighted(ad.matmul(ad.matmul(x, y), z), w)
    return [a, b, c], f


def _linear(rng):
    x, wt, bias = rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5)), rng.normal(size=(5,))
    return [x, wt, bias], lambda a, b, c: _weighted(ad.linear(a, b, c), np.random.default_rng(7))


def _softmax(rng):
    x = rng.normal(size=(3, 5)) * 2
    return [x], lambda a: _weighted(ad.softmax(a, axis=-1), np.random.default_rng(7))


def _attention(rng):
    qkv = rng.normal(size=(2, 5, 3 * 4))
    return [qkv], lambda a: _weighted(ad.multi_head_attention(a, 2), np.random.default_rng(7))


def _layer_norm(rng):
    x, g, b = rng.normal(size=(3, 6)) * 2 + 1, rng.normal(size=(6,)), rng.normal(size=(6,))
    return [x, g, b], lambda a, gg, bb: _weighted(ad.layer_norm(a, gg, bb), np.random.default_rng(7))


def _conv2d(rng):
    x, wt, b = rng.normal(size=(2, 5, 6, 2)), rng.normal(size=(3, 3, 2, 3)), rng.normal(size=(3,))

    def f(a, ww, bb):
        r = np.random.default_rng(7)
        return _weighted(ad.conv2d(a, ww, bb, stride=2, padding=1), r) + _weighted(ad.conv2d(a, ww, None, 1, 1), r)
    return [x, wt, b], f


def _mse(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    return [a, b], lambda x, y: ad.mse(x, y)


def _smooth_l1(rng):
    a, b = rng.normal(size=(4, 5)), rng.normal(size=(4, 5))
    a = b + _away_from(a - b, [-1.0, 1.0], 0.05)
    mask = rng.random((4, 5)) < 0.7
    return [a, b], lambda x, y: ad.smooth_l1(x, y, beta=1.0, mask=mask) + ad.smooth_l1(x, y, beta=0.5)


GRID = HeatmapGrid(width=6, height=8, stride=4)


def _prediction(rng, b=2, k=3):
    mu = rng.uniform(0.1, 0.9, size=(b, k, 2))
    sigma = rng.uniform(0.8, 2.5, size=(b, k, 2))
    conf = rng.uniform(0.05, 0.95, size=(b, k))
    return mu, sigma, conf


def _simulate(rng):
    mu, sigma, _ = _prediction(rng)
    f = lambda m, s: _weighted(hmops.simulate_heatmaps(StudentPrediction(m, s, None), GRID), np.random.default_rng(7))
    return [mu, sigma], f


def _sim_loss(rng):
    mu, sigma, _ = _prediction(rng)
    teacher = rng.uniform(0, 1, size=(2, 3, GRID.height, GRID.width))

    def f(m, s):
        sim = hmops.simulate_heatmaps(StudentPrediction(m, s, None), GRID)
        return hmops.simulated_heatmap_loss(sim, teacher)
    return [mu, sigma], f


def _confidence(rng):
    mu, _, conf = _prediction(rng)
    teacher = rng.uniform(-0.2, 1.2, size=(2, 3, GRID.height, GRID.width))
    target = hmops.teacher_peak_lookup(mu, teacher, GRID)
    conf = target + _away_from(conf - target, [0.0], 0.05)
    # mu enters only through the piecewise-constant lookup, so only conf is perturbed
    return [conf], lambda c: hmops.confidence_loss(StudentPrediction(ad.Tensor(mu), None, c), teacher, GRID)


def _token_losses(rng):
    ks, vs = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 5, 4))
    teacher = mdl.TokenSet(ad.Tensor(rng.normal(size=(2, 3, 4))), ad.Tensor(rng.normal(size=(2, 5, 4))))

    def f(k, v):
        kt, vt = mdl.token_distill_losses(mdl.TokenSet(k, v), teacher)
        return kt + ad.scale(vt, 0.5)
    return [ks, vs], f


def _regression(rng):
    mu, _, _ = _prediction(rng)
    kps = rng.uniform(0, 1, size=(2, 3, 2)) * np.array([GRID.width * 4, GRID.height * 4])
    vis = rng.random((2, 3)) < 0.7
    vis[0, 0] = True
    size = (GRID.height * 4, GRID.width * 4)
    f = lambda m: tr.regression_loss(StudentPrediction(m, None, None), kps, vis, size)
    return [mu], f


# tiny model for the full composite loss
TINY_CONFIG = TrainConfig(
    image_height=16, image_width=12, num_layers=1, embed_dim=8, num_heads=2,
    patch_h=2, patch_w=3, mlp_ratio=2, student_stem=(2, 3),
)


def _composite(rng):
    """Full weighted loss through a tiny student, differentiated w.r.t. every parameter.

    Draws are rejected while a ReLU input or a rounded heatmap lookup sits within
    a small margin of its kink, where central differences are meaningless.
    """
    cfg = TINY_CONFIG
    k, b = 3, 2
    mcfg = cfg.student_model(k)
    grid = mcfg.heatmap_grid
    # strong weights so every term matters numerically
    cfg = cfg.replace(alpha1=0.5, alpha2=0.5, alpha3=1.0, alpha4=0.5)
    teacher = tr.TeacherOutputs(
        kpt_tokens=rng.normal(size=(b, k, cfg.embed_dim)),
        vis_tokens=rng.normal(size=(b, mcfg.num_patches, cfg.embed_dim)),
        heatmaps=rng.uniform(0, 1, size=(b, k, grid.height, grid.width)),
    )
    kps = rng.uniform(1, 11, size=(b, k, 2))
    vis = np.ones((b, k), dtype=bool)
    vis[1, 2] = False
    for _ in range(100):
        model = mdl.PoseModel(mcfg, seed=int(rng.integers(1 << 31)), dtype=np.float64)
        names = [n for n, _ in model.named_parameters()]
        # perturb the fresh init so no parameter sits at an exact special value
        params = [p.data + rng.normal(scale=0.05, size=p.shape) for _, p in model.named_parameters()]
        images = rng.uniform(0, 1, size=(b, cfg.image_height, cfg.image_width))
        owners = _param_owners(model)

        def f(*tensors, model=model, names=names, owners=owners, images=images):
            # run the model on the check's own tensors so their gradients are the ones filled
            for name, t in zip(names, tensors):
                mod, attr = owners[name]
                mod._params[attr] = t
                setattr(mod, attr, t)
            tokens, pred = model(images)
            return tr.total_loss(tokens, pred, teacher, kps, vis, cfg, grid).total

        with ad.no_grad():
            f(*[ad.Tensor(x) for x in params])
            if not _near_kink(model, images, grid):
                break
    return params, f


def _near_kink(model, images, grid, margin=1e-3):
    x = images[..., None]
    for conv in model.stem.convs + model.stem.extra:
        pre = ad.conv2d(ad.Tensor(x), conv.weight, conv.bias, stride=conv.stride, padding=1).data
        if np.abs(pre).min() < margin:
            return True
        x = np.maximum(pre, 0) + (x if conv.stride == 1 else 0)
    _, pred = model(images)
    u = pred.mu.data * np.array([grid.width, grid.height]) - 0.5
    return bool((np.abs(u - np.floor(u) - 0.5) < margin).any())


def _param_owners(module, prefix=""):
    out = {prefix + name: (module, name) for name in module._params}
    for cname, child in module._children.items():
        out.update(_param_owners(child, f"{prefix}{cname}."))
    return out


CHECKS = {
    "add": _binary("add"),
    "sub": _binary("sub"),
    "mul": _binary("mul"),
    "div": _binary("div"),
    "neg": _elementwise("neg"),
    "exp": _elementwise("exp"),
    "log": _elementwise("log"),
    "square": _elementwise("square"),
    "abs": _elementwise("abs"),
    "relu": _elementwise("relu"),
    "sigmoid": _elementwise("sigmoid"),
    "softplus": _elementwise("softplus"),
    "gelu": _elementwise("gelu"),
    "sum/mean": _reductions,
    "reshape/transpose": _shape_ops,
    "getitem": _getitem,
    "concat/expand": _concat_expand,
    "matmul": _matmul,
    "linear": _linear,
    "softmax": _softmax,
    "multi_head_attention": _attention,
    "layer_norm": _layer_norm,
    "conv2d": _conv2d,
    "mse": _mse,
    "smooth_l1": _smooth_l1,
    "simulate_heatmaps": _simulate,
    "simulated_heatmap_loss": _sim_loss,
    "confidence_loss": _confidence,
    "token_distill_losses": _token_losses,
    "regression_loss": _regression,
    "total_loss (tiny model, all parameters)": _composite,
}


def run_checks(names=None, seeds=range(NUM_SEEDS), progress=None):
    results = []
    for name in names or CHECKS:
        build = CHECKS[name]
        for seed in seeds:
            rng = np.random.default_rng([seed, len(name)])
            try:
                inputs, fn = build(rng)
                err = check_function(fn, inputs)
            except Exception as exc:  # a crashing op is a failed check, reported by name
                err = float("inf")
                if progress:
                    progress(f"{name} seed {seed}: raised {type(exc).__name__}: {exc}")
            finally:
                ad.clear_tape()
            results.append(CheckResult(name, seed, err))
    return results


def summarize(results):
    """One line per op: worst error over seeds, with failing seeds listed."""
    lines = []
    by_op = {}
    for r in results:
        by_op.setdefault(r.op, []).append(r)
    for op, rs in by_op.items():
        worst = max(rs, key=lambda r: r.error)
        failed = [r.seed for r in rs if not r.passed]
        status = "PASS" if not failed else f"FAIL (seeds {failed})"
        lines.append(f"{op:<42s} max rel err {worst.error:.3e} (seed {worst.seed})  {status}")
    return lines


def main_report(progress=print):
    start = time.perf_counter()
    results = run_checks(progress=progress)
    for line in summarize(results):
        progress(line)
    ok = all(r.passed for r in results)
    n_ops = len({r.op for r in results})
    progress(f"{n_ops} operations x {NUM_SEEDS} seeds, {time.perf_counter() - start:.1f}s: "
             f"{'all passed' if ok else 'FAILED'}")
    return ok, results
