"""Command-line interface.

Every command resolves its options from built-in defaults, then an optional
``--config`` key=value file, then explicit flags (highest priority), and
writes the result to ``resolved_config.txt`` in the output directory before
doing any work. The echoed file is fully explicit (schedule knots are
inlined after any rescaling), so re-running a command from it reproduces the
run byte for byte.

Commands exit 0 only after all their artifacts are written.
"""
from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import checkpoint, metrics
from .generator import FRAMEWORKS, Model, ModelConfig, count_parameters
from .resample import bicubic_upsample_array
from .scheduler import MASKABLE_INPUTS, VideoSequence, input_membership, run_model
from .tensor import Tensor
from .training import (ArraySource, DegradeConfig, LossConfig, SyntheticSource,
                       TrainConfig, degrade_clip, load_frame_dir, save_frame_dir,
                       synth_clip, train)


# ---------------------------------------------------------------------------
# option parsing and echoing

def _parse_bool(s):
    v = str(s).strip().lower()
    if v in ("true", "1", "yes", "on"):
        return True
    if v in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


def _fmt_bool(v):
    return "true" if v else "false"


def _fmt_float(v):
    return repr(float(v))


def _parse_blocks(s):
    first, sep, second = str(s).partition("+")
    if not sep:
        raise ValueError(f"expected P+S block counts like 1+1, got {s!r}")
    return int(first), int(second)


def _fmt_blocks(v):
    return f"{v[0]}+{v[1]}"


def _parse_drops(s):
    if str(s).strip().lower() in ("", "none"):
        return ()
    out = []
    for part in str(s).split(","):
        it, sep, val = part.partition(":")
        if not sep:
            raise ValueError(f"expected iteration:lr pairs, got {part!r}")
        out.append((int(it), float(val)))
    return tuple(out)


def _fmt_drops(v):
    if not v:
        return "none"
    return ",".join(f"{i}:{_fmt_float(x)}" for i, x in v)


def _parse_radius(s):
    return None if str(s).strip().lower() == "auto" else int(s)


def _fmt_radius(v):
    return "auto" if v is None else str(v)


@dataclass(frozen=True)
class Opt:
    key: str
    parse: object
    default: object
    help: str
    fmt: object = str


_MODEL_OPTS = (
    Opt("framework", str, "govsr", "temporal framework: " + ", ".join(FRAMEWORKS)),
    Opt("blocks", _parse_blocks, (1, 1),
        "residual blocks per network as FIRST+SECOND, e.g. 8+4", _fmt_blocks),
    Opt("filters", int, 16, "feature channels per stream"),
    Opt("scale", int, 4, "upscaling factor, 2 or 4"),
    Opt("window", int, 3, "input frames per step (4 is an hvsr variant)"),
    Opt("upscale_width", int, 1, "width multiplier of the first upscale conv"),
    Opt("residual_base", str, "auto", "auto, precursor, or bicubic"),
)

_BLUR_OPTS = (
    Opt("sigma", float, 1.6, "degradation blur sigma", _fmt_float),
    Opt("radius", _parse_radius, None, "blur tap radius, or auto (= 3 sigma)", _fmt_radius),
)

_TRAIN_OPTS = _MODEL_OPTS + (
    Opt("data", str, "synthetic", "'synthetic' or a directory of png clips"),
    Opt("alpha", float, 0.01, "weight of the first-pass loss term", _fmt_float),
    Opt("epsilon", float, 1e-3, "Charbonnier knee", _fmt_float),
    Opt("iterations", int, 600, "optimization steps"),
    Opt("batch_size", int, 4, "clips per step"),
    Opt("patch_size", int, 32, "low-res training patch edge"),
    Opt("clip_frames", int, 3, "frames scored by the loss"),
    Opt("margin", int, 1, "extra context frames per clip end"),
    Opt("seed", int, 0, "master seed"),
    Opt("dtype", str, "float32", "float32 or float64"),
    Opt("lr_base", float, 1e-3, "initial learning rate", _fmt_float),
    Opt("lr_floor", float, 1e-4, "rate after the linear decay", _fmt_float),
    Opt("lr_decay_end", int, 120_000, "iteration where the decay ends"),
    Opt("lr_drops", _parse_drops, ((250_000, 5e-5), (300_000, 1e-5)),
        "late drops as iter:lr,iter:lr or none", _fmt_drops),
    Opt("schedule_span", int, 300_000, "run length the schedule knots refer to"),
    Opt("scale_schedule", _parse_bool, True,
        "rescale schedule knots by iterations/span", _fmt_bool),
    Opt("beta1", float, 0.9, "Adam first-moment decay", _fmt_float),
    Opt("beta2", float, 0.999, "Adam second-moment decay", _fmt_float),
    Opt("adam_eps", float, 1e-8, "Adam stabilizer", _fmt_float),
    Opt("eval_interval", int, 0, "evaluate every N iterations (0: only at the end)"),
    Opt("eval_clips", int, 2, "held-out clips"),
    Opt("eval_frames", int, 7, "frames per held-out clip"),
    Opt("eval_size", int, 32, "low-res eval frame edge"),
) + _BLUR_OPTS

_SWEEP_OPTS = (Opt("axis", str, "alpha", "sweep axis: alpha or split"),) + _TRAIN_OPTS

_EVAL_OPTS = (
    Opt("model", str, "", "checkpoint to evaluate"),
    Opt("baseline", str, "model", "'model' or 'bicubic' (needs no checkpoint)"),
    Opt("scale", int, 4, "upscaling factor when no checkpoint is given"),
    Opt("data", str, "synthetic", "'synthetic' or a directory of png clips"),
    Opt("dtype", str, "float64", "inference dtype"),
    Opt("seed", int, 0, "seed for synthetic eval clips"),
    Opt("eval_clips", int, 4, "number of clips"),
    Opt("eval_frames", int, 7, "frames per synthetic clip"),
    Opt("eval_size", int, 32, "low-res synthetic frame edge"),
    Opt("flops_w", int, 1280, "output width for the compute estimate"),
    Opt("flops_h", int, 720, "output height for the compute estimate"),
    Opt("bench", _parse_bool, False, "also time inference", _fmt_bool),
) + _BLUR_OPTS

_ABLATE_OPTS = (
    Opt("model", str, "", "checkpoint to probe"),
    Opt("data", str, "synthetic", "'synthetic' or a directory of png clips"),
    Opt("dtype", str, "float64", "inference dtype"),
    Opt("seed", int, 0, "seed for synthetic eval clips"),
    Opt("eval_clips", int, 2, "number of clips"),
    Opt("eval_frames", int, 7, "frames per synthetic clip"),
    Opt("eval_size", int, 32, "low-res synthetic frame edge"),
) + _BLUR_OPTS

_DEGRADE_OPTS = (
    Opt("input", str, "synthetic", "'synthetic' or a directory of png frames"),
    Opt("frames", int, 8, "synthetic clip length"),
    Opt("size", int, 32, "synthetic low-res frame edge"),
    Opt("seed", int, 0, "synthetic clip seed"),
    Opt("scale", int, 4, "decimation factor"),
) + _BLUR_OPTS

_BENCH_OPTS = _MODEL_OPTS + (
    Opt("model", str, "", "checkpoint to time (empty: fresh weights)"),
    Opt("dtype", str, "float32", "inference dtype"),
    Opt("seed", int, 0, "seed for fresh weights"),
    Opt("bench_size", int, 32, "low-res frame edge"),
    Opt("bench_frames", int, 5, "frames per timed run"),
    Opt("reps", int, 5, "timed repetitions (median is reported)"),
    Opt("warmup", int, 1, "untimed warmup runs"),
    Opt("flops_w", int, 1280, "output width for the compute estimate"),
    Opt("flops_h", int, 720, "output height for the compute estimate"),
)


def _parse_config_file(path):
    pairs = {}
    for no, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise ValueError(f"{path}:{no}: expected key=value, got {raw!r}")
        pairs[key.strip()] = val.strip()
    return pairs


def resolve_options(opts, args, command):
    table = {o.key: o for o in opts}
    values = {o.key: o.default for o in opts}
    cfg_path = getattr(args, "config", None)
    if cfg_path:
        pairs = _parse_config_file(cfg_path)
        written_for = pairs.pop("command", command)
        if written_for != command:
            raise ValueError(f"config file {cfg_path} was written for "
                             f"{written_for!r}, not {command!r}")
        for key, raw in pairs.items():
            if key not in table:
                raise ValueError(f"unknown config key {key!r} for {command}")
            values[key] = table[key].parse(raw)
    for o in opts:
        raw = getattr(args, o.key, None)
        if raw is not None:
            values[o.key] = o.parse(raw)
    return values


def write_resolved(out_dir, command, opts, values):
    lines = [f"command={command}"]
    lines += [f"{o.key}={o.fmt(values[o.key])}" for o in opts]
    (Path(out_dir) / "resolved_config.txt").write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# shared pieces

def _model_config(values):
    bp, bs = values["blocks"]
    return ModelConfig(framework=values["framework"], blocks_precursor=bp,
                       blocks_successor=bs, filters=values["filters"],
                       scale=values["scale"], window=values["window"],
                       upscale_width=values["upscale_width"],
                       residual_base=values["residual_base"])


def _degrade_config(values, scale):
    return DegradeConfig(scale=scale, sigma=values["sigma"], radius=values["radius"])


def _train_config(values):
    return TrainConfig(
        iterations=values["iterations"], batch_size=values["batch_size"],
        patch_size=values["patch_size"], clip_frames=values["clip_frames"],
        margin=values["margin"], seed=values["seed"], dtype=values["dtype"],
        lr_base=values["lr_base"], lr_floor=values["lr_floor"],
        lr_decay_end=values["lr_decay_end"], lr_drops=values["lr_drops"],
        schedule_span=values["schedule_span"], scale_schedule=values["scale_schedule"],
        beta1=values["beta1"], beta2=values["beta2"], adam_eps=values["adam_eps"],
        eval_interval=values["eval_interval"], eval_clips=values["eval_clips"],
        eval_frames=values["eval_frames"], eval_size=values["eval_size"],
        degrade=_degrade_config(values, values["scale"]))


def _inline_schedule(values):
    """Bake any schedule rescaling into explicit knots for the echo."""
    sched = _train_config(values).schedule()
    out = dict(values)
    out.update(lr_base=sched.base, lr_floor=sched.floor, lr_decay_end=sched.decay_end,
               lr_drops=sched.drops, scale_schedule=False,
               schedule_span=values["iterations"])
    return out


def _load_clip_dirs(path):
    p = Path(path)
    if not p.is_dir():
        raise FileNotFoundError(f"no such clip directory: {p}")
    if sorted(p.glob("*.png")):
        return [load_frame_dir(p)]
    subs = sorted(d for d in p.iterdir() if d.is_dir() and sorted(d.glob("*.png")))
    if not subs:
        raise FileNotFoundError(f"no .png frames under {p}")
    return [load_frame_dir(d) for d in subs]


def _eval_clips(values, scale):
    if values["data"] == "synthetic":
        edge = values["eval_size"] * scale
        return SyntheticSource(values["seed"]).eval_clips(
            values["eval_clips"], values["eval_frames"], edge, edge)
    clips = _load_clip_dirs(values["data"])
    return clips[:values["eval_clips"]] if values["eval_clips"] else clips


def _super_resolve(model, lr_clip, masks=()):
    seq = VideoSequence([Tensor(f[None].astype(model.dtype)) for f in lr_clip])
    result = run_model(model, seq, masks=masks)
    return [t.data[0] for t in result.sr]


def _masked_psnr(model, clips, dcfg, masks=()):
    vals = []
    for hr in clips:
        sr = _super_resolve(model, degrade_clip(hr, dcfg), masks)
        vals.append(metrics.sequence_psnr(sr, list(hr)))
    return float(np.mean(vals))


def _load_checkpoint(values):
    if not values["model"]:
        raise ValueError("--model is required")
    return checkpoint.load_model(values["model"], dtype=np.dtype(values["dtype"]))


# ---------------------------------------------------------------------------
# commands

def _run_training(values, out):
    out.mkdir(parents=True, exist_ok=True)
    values = _inline_schedule(values)
    write_resolved(out, "train", _TRAIN_OPTS, values)
    config = _model_config(values)
    model = Model(config, seed=values["seed"], dtype=np.dtype(values["dtype"]))
    if values["data"] == "synthetic":
        source = SyntheticSource(values["seed"])
    else:
        source = ArraySource(_load_clip_dirs(values["data"]), values["seed"], config.scale)
    lcfg = LossConfig(alpha=values["alpha"], epsilon=values["epsilon"])
    result = train(model, source, _train_config(values), lcfg,
                   csv_path=str(out / "loss.csv"))
    checkpoint.save_model(model, out / "model.ckpt")
    gain = result.final_eval_psnr - result.bicubic_psnr
    lines = [f"model={config.name}",
             f"parameters={count_parameters(config)['total']}",
             f"iterations={result.iterations}",
             f"final_loss={result.rows[-1]['loss']!r}",
             f"eval_psnr={result.final_eval_psnr!r}",
             f"bicubic_psnr={result.bicubic_psnr!r}",
             f"psnr_gain={gain!r}"]
    (out / "summary.txt").write_text("\n".join(lines) + "\n")
    return model, result


def cmd_train(args):
    values = resolve_options(_TRAIN_OPTS, args, "train")
    _, result = _run_training(values, Path(args.out))
    print(f"trained {values['framework']}-{_fmt_blocks(values['blocks'])}-"
          f"{values['filters']}: eval {result.final_eval_psnr:.3f} dB, "
          f"bicubic {result.bicubic_psnr:.3f} dB")
    return 0


def cmd_eval(args):
    values = resolve_options(_EVAL_OPTS, args, "eval")
    if values["baseline"] not in ("model", "bicubic"):
        raise ValueError(f"--baseline must be model or bicubic, got {values['baseline']!r}")
    bicubic_only = values["baseline"] == "bicubic"
    if bicubic_only:
        model, scale = None, values["scale"]
        name, params, flops_total = "bicubic", {"total": 0}, 0
        if values["bench"]:
            raise ValueError("--bench needs a checkpoint, not --baseline bicubic")
    else:
        model = _load_checkpoint(values)
        cfg = model.config
        scale = cfg.scale
        name, params = cfg.name, count_parameters(cfg)
        flops_total = metrics.count_flops(cfg, values["flops_w"], values["flops_h"])["total"]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_resolved(out, "eval", _EVAL_OPTS, values)
    dcfg = _degrade_config(values, scale)
    report = metrics.EvalReport(name, params, flops_total,
                                f"{values['flops_w']}x{values['flops_h']}")
    for i, hr in enumerate(_eval_clips(values, scale)):
        lr = degrade_clip(hr, dcfg)
        if bicubic_only:
            sr = [bicubic_upsample_array(f[None], scale)[0] for f in lr]
        else:
            sr = _super_resolve(model, lr)
        report.add(f"clip{i:02d}", metrics.sequence_psnr(sr, list(hr)),
                   metrics.sequence_ssim(sr, list(hr)))
    if values["bench"]:
        b = metrics.benchmark_time(model, values["eval_size"], values["eval_frames"])
        report.ms_per_frame, report.fps = b["ms_per_frame"], b["fps"]
    report.to_csv(out / "report.csv")
    text = report.to_text()
    (out / "report.txt").write_text(text)
    print(text, end="")
    return 0


def cmd_ablate(args):
    values = resolve_options(_ABLATE_OPTS, args, "ablate")
    model = _load_checkpoint(values)
    cfg = model.config
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_resolved(out, "ablate", _ABLATE_OPTS, values)
    clips = _eval_clips(values, cfg.scale)
    dcfg = _degrade_config(values, cfg.scale)
    roles = sorted(model.nets)
    members = input_membership(cfg)
    baseline = _masked_psnr(model, clips, dcfg)
    grid = []
    for name in MASKABLE_INPUTS:
        row = []
        for role in roles:
            if name in members[role]:
                row.append(_masked_psnr(model, clips, dcfg, masks=[(role, name)]))
            else:
                row.append(None)
        grid.append((name, row))

    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["# model", cfg.name])
        w.writerow(["# baseline_psnr", metrics.fmt_metric(baseline)])
        w.writerow(["input"] + roles)
        for name, row in grid:
            w.writerow([name] + [metrics.fmt_metric(v) for v in row])

    width = max(len(r) for r in roles) + 2
    lines = [f"model: {cfg.name}",
             f"baseline psnr: {metrics.fmt_metric(baseline)} dB",
             "psnr after zeroing one input of one network ('-': not an input)",
             "",
             f"{'input':<10}" + "".join(f"{r:>{width}}" for r in roles)]
    for name, row in grid:
        lines.append(f"{name:<10}" + "".join(f"{metrics.fmt_metric(v):>{width}}" for v in row))
    text = "\n".join(lines) + "\n"
    (out / "ablation.txt").write_text(text)
    print(text, end="")
    return 0


def cmd_sweep(args):
    values = resolve_options(_SWEEP_OPTS, args, "sweep")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    values = _inline_schedule(values)   # the extra axis key passes through
    write_resolved(out, "sweep", _SWEEP_OPTS, values)
    axis = values["axis"]
    if axis == "alpha":
        variants = [("alpha-bicubic", {"alpha": 0.0, "residual_base": "bicubic"}),
                    ("alpha-0", {"alpha": 0.0}),
                    ("alpha-0.01", {"alpha": 0.01}),
                    ("alpha-0.1", {"alpha": 0.1}),
                    ("alpha-1", {"alpha": 1.0})]
    elif axis == "split":
        total = sum(values["blocks"])
        variants = [(f"split-{p}+{total - p}", {"blocks": (p, total - p)})
                    for p in range(total + 1)]
    else:
        raise ValueError(f"unknown sweep axis {axis!r}, expected alpha or split")

    rows = []
    for name, overrides in variants:
        row_vals = {k: v for k, v in values.items() if k != "axis"}
        row_vals.update(overrides)
        _, result = _run_training(row_vals, out / name)
        rows.append({"name": name,
                     "blocks": _fmt_blocks(row_vals["blocks"]),
                     "alpha": row_vals["alpha"],
                     "residual_base": row_vals["residual_base"],
                     "params": count_parameters(_model_config(row_vals))["total"],
                     "eval_psnr": result.final_eval_psnr,
                     "bicubic_psnr": result.bicubic_psnr,
                     "gain": result.final_eval_psnr - result.bicubic_psnr})
        print(f"  {name}: {result.final_eval_psnr:.3f} dB")

    rows.sort(key=lambda r: r["eval_psnr"], reverse=True)
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["rank", "name", "blocks", "alpha", "residual_base",
                    "params", "eval_psnr", "bicubic_psnr", "gain"])
        for rank, r in enumerate(rows, 1):
            w.writerow([rank, r["name"], r["blocks"], _fmt_float(r["alpha"]),
                        r["residual_base"], r["params"],
                        metrics.fmt_metric(r["eval_psnr"]),
                        metrics.fmt_metric(r["bicubic_psnr"]),
                        metrics.fmt_metric(r["gain"])])
    best = rows[0]
    print(f"best: {best['name']} at {best['eval_psnr']:.3f} dB "
          f"(bicubic {best['bicubic_psnr']:.3f} dB)")
    return 0


def cmd_degrade(args):
    values = resolve_options(_DEGRADE_OPTS, args, "degrade")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_resolved(out, "degrade", _DEGRADE_OPTS, values)
    dcfg = DegradeConfig(scale=values["scale"], sigma=values["sigma"],
                         radius=values["radius"])
    if values["input"] == "synthetic":
        edge = values["size"] * values["scale"]
        hr = synth_clip(np.random.SeedSequence([values["seed"], 4]),
                        values["frames"], edge, edge)
        save_frame_dir(hr, out / "hr")
    else:
        hr = load_frame_dir(values["input"])
        if hr.shape[-2] % values["scale"] or hr.shape[-1] % values["scale"]:
            raise ValueError(f"frame size {hr.shape[-2]}x{hr.shape[-1]} is not "
                             f"divisible by scale {values['scale']}")
    n = save_frame_dir(degrade_clip(hr, dcfg), out / "lr")
    print(f"wrote {n} degraded frames to {out / 'lr'}")
    return 0


def cmd_bench(args):
    values = resolve_options(_BENCH_OPTS, args, "bench")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_resolved(out, "bench", _BENCH_OPTS, values)
    if values["model"]:
        model = checkpoint.load_model(values["model"], dtype=np.dtype(values["dtype"]))
        cfg = model.config
    else:
        cfg = _model_config(values)
        model = Model(cfg, seed=values["seed"], dtype=np.dtype(values["dtype"]))
    params = count_parameters(cfg)
    flops = metrics.count_flops(cfg, values["flops_w"], values["flops_h"])
    timing = metrics.benchmark_time(model, values["bench_size"], values["bench_frames"],
                                    values["reps"], values["warmup"])
    lines = [f"model: {cfg.name}",
             f"parameters: {params['total']}",
             f"flops_per_frame: {flops['total']} at {values['flops_w']}x{values['flops_h']}",
             f"ms_per_frame: {timing['ms_per_frame']:.3f} "
             f"at {values['bench_size']}x{values['bench_size']} low-res",
             f"fps: {timing['fps']:.3f}"]
    text = "\n".join(lines) + "\n"
    (out / "bench.txt").write_text(text)
    print(text, end="")
    return 0


# ---------------------------------------------------------------------------

_COMMANDS = (
    ("train", "train a model and write loss.csv, model.ckpt, summary.txt",
     _TRAIN_OPTS, cmd_train),
    ("eval", "score a checkpoint (PSNR/SSIM, parameters, compute)",
     _EVAL_OPTS, cmd_eval),
    ("ablate", "zero each input of each network and report the PSNR",
     _ABLATE_OPTS, cmd_ablate),
    ("sweep", "train a row of variants and rank them",
     _SWEEP_OPTS, cmd_sweep),
    ("degrade", "blur and decimate a clip into png frames",
     _DEGRADE_OPTS, cmd_degrade),
    ("bench", "time inference and report compute estimates",
     _BENCH_OPTS, cmd_bench),
)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="pfvsr", description="progressive-fusion video super-resolution")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, desc, opts, fn in _COMMANDS:
        p = sub.add_parser(name, help=desc, description=desc)
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--config", default=None,
                       help="key=value file; explicit flags override it")
        for o in opts:
            p.add_argument("--" + o.key.replace("_", "-"), dest=o.key, default=None,
                           help=f"{o.help} [default: {o.fmt(o.default)}]")
        p.set_defaults(func=fn)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:   # CLI boundary: report and signal failure
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
