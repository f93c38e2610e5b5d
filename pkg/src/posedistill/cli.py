"""Command-line front end.

Exit codes: 0 success, 1 usage error, 2 runtime failure, 3 gradient-check failure.
"""

from __future__ import annotations

import argparse
import csv
import sys
import time
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .checkpoint import load_checkpoint
from .config import derive_seed, format_config, load_config
from .errors import ConfigError, FormatError
from .heatmaps import simulate_heatmaps
from .model import attention_matrix
from .synth import default_skeleton, generate_dataset, read_dataset, write_dataset
from .train import (
    Arrays,
    NonFiniteLossError,
    evaluate_model,
    model_from_state,
    teacher_outputs,
    train_student,
    train_teacher,
)

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_GRADCHECK = 0, 1, 2, 3
U64_MAX = (1 << 64) - 1

ABLATION_ROWS = (
    ("baseline", dict(use_kt=False, use_vt=False, use_sh=False, use_cs=False)),
    ("cs", dict(use_kt=False, use_vt=False, use_sh=False, use_cs=True)),
    ("sh", dict(use_kt=False, use_vt=False, use_sh=True, use_cs=False)),
    ("cs+sh", dict(use_kt=False, use_vt=False, use_sh=True, use_cs=True)),
    ("kt", dict(use_kt=True, use_vt=False, use_sh=False, use_cs=False)),
    ("vt", dict(use_kt=False, use_vt=True, use_sh=False, use_cs=False)),
    ("kt+vt", dict(use_kt=True, use_vt=True, use_sh=False, use_cs=False)),
    ("all", dict(use_kt=True, use_vt=True, use_sh=True, use_cs=True)),
)


class RuntimeFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


class _HelpFormatter(argparse.HelpFormatter):
    """Every flag's help ends with its default, or notes that it is required."""

    def _get_help_string(self, action):
        text = action.help or ""
        if action.dest == "help":
            return text
        if action.required:
            return f"{text} (required)"
        default = "unset" if action.default is None else action.default
        return f"{text} (default: {default})"


# --- flag types ---------------------------------------------------------------
def _u64(text):
    try:
        v = int(text, 10)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an unsigned 64-bit integer: {text!r}") from None
    if not 0 <= v <= U64_MAX:
        raise argparse.ArgumentTypeError(f"seed out of range [0, 2^64): {text}")
    return v


def _nonneg(text):
    try:
        v = int(text, 10)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0: {text}")
    return v


def _positive(text):
    v = _nonneg(text)
    if v == 0:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


FLAGS = {
    "config": dict(metavar="PATH", type=Path, default=None, help="key=value config file (built-in defaults if omitted)"),
    "seed": dict(metavar="U64", type=_u64, default=0, help="master seed; per-stage seeds are derived from it"),
    "out": dict(metavar="DIR", type=Path, help="output directory"),
    "dataset": dict(metavar="PATH", type=Path, help="directory holding train.dpse and val.dpse"),
    "teacher": dict(metavar="PATH", type=Path, help="teacher checkpoint (.dpck)"),
    "checkpoint": dict(metavar="PATH", type=Path, help="model checkpoint (.dpck)"),
    "sample-index": dict(metavar="N", type=_nonneg, default=0, help="validation sample to inspect"),
    "epochs": dict(metavar="N", type=_positive, default=None, help="override the configured epoch count"),
    "isotropic-sigma": dict(metavar="BOOL", type=_bool, default=None,
                            help="override isotropic_sigma (one deviation per keypoint)"),
}

COMMANDS = {
    "gen-data": ("generate the synthetic train/val datasets", ["config", "seed", "out"], ["out"]),
    "train-teacher": ("train the heatmap teacher", ["config", "seed", "out", "dataset", "epochs"], ["out", "dataset"]),
    "train-student": ("distil a regression student from a frozen teacher",
                      ["config", "seed", "out", "dataset", "teacher", "epochs", "isotropic-sigma"],
                      ["out", "dataset", "teacher"]),
    "eval": ("evaluate a checkpoint on the validation split",
             ["config", "out", "dataset", "checkpoint", "isotropic-sigma"], ["dataset", "checkpoint"]),
    "ablate": ("train the 8-row loss ablation and report AP per row",
               ["config", "seed", "out", "dataset", "teacher", "epochs", "isotropic-sigma"],
               ["out", "dataset", "teacher"]),
    "grad-check": ("finite-difference check of every differentiable op", [], []),
    "inspect": ("dump heatmaps, attention and an overlay for one sample",
                ["config", "out", "dataset", "teacher", "checkpoint", "sample-index"],
                ["out", "dataset", "teacher", "checkpoint"]),
}


def build_parser():
    parser = _Parser(prog="posedistill", description="Token and heatmap distillation for keypoint regression.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True
    for name, (help_text, flags, required) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text,
                           formatter_class=_HelpFormatter)
        for flag in flags:
            spec = dict(FLAGS[flag])
            if flag in required:
                spec.pop("default", None)
                spec["required"] = True
            p.add_argument(f"--{flag}", **spec)
    return parser


# --- helpers ------------------------------------------------------------------
def _log(msg):
    print(msg, flush=True)


def _config(args, near=None):
    """Explicit --config, else a config.snapshot beside ``near``, else defaults; then flag overrides."""
    path = getattr(args, "config", None)
    if path is None and near is not None and (Path(near).parent / "config.snapshot").is_file():
        path = Path(near).parent / "config.snapshot"
    if path is not None and not Path(path).is_file():
        raise RuntimeFailure(f"config file not found: {path}")
    cfg = load_config(path)
    if getattr(args, "epochs", None) is not None:
        decay = tuple(d for d in cfg.decay_epochs if d <= args.epochs)
        cfg = cfg.replace(epochs=args.epochs, decay_epochs=decay)
    if getattr(args, "isotropic_sigma", None) is not None:
        cfg = cfg.replace(isotropic_sigma=args.isotropic_sigma)
    return cfg


def _load_split(dataset, split):
    path = Path(dataset) / f"{split}.dpse"
    if not path.is_file():
        raise RuntimeFailure(f"dataset file not found: {path}")
    return read_dataset(path)


def _load_model(path, cfg):
    if not Path(path).is_file():
        raise RuntimeFailure(f"checkpoint not found: {path}")
    return model_from_state(load_checkpoint(path), cfg)


def _prepare_run_dir(out, cfg):
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.snapshot").write_text(format_config(cfg), encoding="utf-8")


def _write_metrics(path, report):
    Path(path).write_text(report.to_csv(), encoding="utf-8")


# --- commands -----------------------------------------------------------------
def cmd_gen_data(args):
    cfg = _config(args)
    spec = default_skeleton()
    args.out.mkdir(parents=True, exist_ok=True)
    for split, n in (("train", cfg.train_size), ("val", cfg.val_size)):
        samples = generate_dataset(spec, derive_seed(args.seed, "data", split), cfg.image_size, n)
        write_dataset(samples, args.out / f"{split}.dpse")
        _log(f"wrote {n} samples to {args.out / f'{split}.dpse'}")


def cmd_train_teacher(args):
    cfg = _config(args)
    train, val = _load_split(args.dataset, "train"), _load_split(args.dataset, "val")
    _prepare_run_dir(args.out, cfg)
    result = train_teacher(cfg, train, val, derive_seed(args.seed, "teacher"), out_dir=args.out, progress=_log)
    _finish_run(args.out, result, cfg, val)


def cmd_train_student(args):
    cfg = _config(args)
    teacher = _load_model(args.teacher, cfg if args.config else _config(args, near=args.teacher))
    train, val = _load_split(args.dataset, "train"), _load_split(args.dataset, "val")
    _prepare_run_dir(args.out, cfg)
    result = train_student(cfg, train, val, teacher, derive_seed(args.seed, "student"), out_dir=args.out, progress=_log)
    _finish_run(args.out, result, cfg, val)


def _finish_run(out, result, cfg, val):
    best = model_from_state(result.best_state, cfg)
    report = evaluate_model(best, Arrays.from_samples(val))
    _write_metrics(out / "metrics.csv", report)
    _log(f"best epoch {result.best_epoch}: {report.summary()}")


def cmd_eval(args):
    cfg = _config(args, near=args.checkpoint)
    model = _load_model(args.checkpoint, cfg)
    val = Arrays.from_samples(_load_split(args.dataset, "val"))
    report = evaluate_model(model, val)
    out = args.out if args.out is not None else Path(args.checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    _write_metrics(out / "metrics.csv", report)
    _log(report.summary())


def run_ablation(cfg, train, val, teacher, seed, progress=None, on_result=None):
    """AP per ablation row (averaged over ``cfg.ablation_seeds`` shared seeds).

    ``on_result(row, seed, result, report)`` is called after each training run.
    """
    cache = teacher_outputs(teacher, Arrays.from_samples(train).images) if not cfg.student_augment else None
    seeds = [derive_seed(seed, "ablation", i) for i in range(cfg.ablation_seeds)]
    table = []
    for name, switches in ABLATION_ROWS:
        row_cfg = cfg.replace(**switches)
        aps = []
        for s in seeds:
            t0 = time.perf_counter()
            res = train_student(row_cfg, train, val, teacher, s, cache=cache)
            best = model_from_state(res.best_state, row_cfg)
            report = evaluate_model(best, Arrays.from_samples(val))
            aps.append(report.ap)
            if on_result:
                on_result(name, s, res, report)
            if progress:
                progress(f"[ablate] {name} seed {s}: AP {aps[-1]:.4f} ({time.perf_counter() - t0:.0f}s)")
        table.append((name, switches, aps))
    return table


def ablation_csv(table):
    base = float(np.mean(table[0][2]))
    lines = [["row", "use_kt", "use_vt", "use_sh", "use_cs", "ap", "improvement"]
             + [f"ap_seed{i}" for i in range(len(table[0][2]))]]
    for name, sw, aps in table:
        ap = float(np.mean(aps))
        lines.append([name] + [int(sw[k]) for k in ("use_kt", "use_vt", "use_sh", "use_cs")]
                     + [repr(ap), repr(ap - base)] + [repr(float(a)) for a in aps])
    return lines


def cmd_ablate(args):
    cfg = _config(args)
    if not Path(args.teacher).is_file():
        raise RuntimeFailure(f"teacher checkpoint not found: {args.teacher}")
    teacher = _load_model(args.teacher, cfg)
    train, val = _load_split(args.dataset, "train"), _load_split(args.dataset, "val")
    _prepare_run_dir(args.out, cfg)
    table = run_ablation(cfg, train, val, teacher, derive_seed(args.seed, "student"), progress=_log)
    with open(args.out / "ablation.csv", "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(ablation_csv(table))
    for row in ablation_csv(table)[1:]:
        _log(f"{row[0]:<10s} AP {float(row[5]):.4f}  improvement {float(row[6]):+.4f}")


def cmd_grad_check(args):
    from .gradcheck import main_report

    ok, _ = main_report(progress=_log)
    return EXIT_OK if ok else EXIT_GRADCHECK


def cmd_inspect(args):
    cfg = _config(args, near=args.checkpoint)
    student = _load_model(args.checkpoint, cfg)
    teacher = _load_model(args.teacher, _config(args, near=args.teacher))
    val = _load_split(args.dataset, "val")
    if args.sample_index >= len(val):
        raise RuntimeFailure(f"sample index {args.sample_index} out of range (validation split has {len(val)})")
    if student.cfg.head != "regression" or teacher.cfg.head != "heatmap":
        raise RuntimeFailure("inspect needs a regression student --checkpoint and a heatmap --teacher")
    sample = val[args.sample_index]
    image = sample.image[None]
    grid = student.cfg.heatmap_grid
    with ad.no_grad():
        _, pred = student(image)
        sim = simulate_heatmaps(pred, grid).data[0]
        _, t_hm = teacher(image)
    last = student.cfg.num_layers - 1
    attn = [attention_matrix(student, image, last, k) for k in range(student.cfg.num_keypoints)]
    from .viz import dump_inspection

    coords = pred.image_coords(cfg.image_height, cfg.image_width)[0]
    paths = dump_inspection(args.out, t_hm.data[0], sim, attn, student.cfg.patch_grid, sample.image,
                            coords, sample.keypoints, sample.visibility)
    _log(f"wrote {len(paths)} files to {args.out}")


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train-teacher": cmd_train_teacher,
    "train-student": cmd_train_student,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "grad-check": cmd_grad_check,
    "inspect": cmd_inspect,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help exits 0, parse errors exit EXIT_USAGE
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        code = HANDLERS[args.command](args)
    except (RuntimeFailure, ConfigError, FormatError,
            NonFiniteLossError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK if code is None else code


if __name__ == "__main__":
    sys.exit(main())
