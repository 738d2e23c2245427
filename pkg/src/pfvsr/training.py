"""Training: objective, optimizer, schedule, degradation and data plumbing.

The objective is a two-term Charbonnier penalty: the combined output is
pulled toward the ground truth, and (weighted by ``alpha``) the first-pass
network's own prediction is too, which forces the precursor to carry a
meaningful image instead of free-floating features. Ground-truth clips are
degraded online: Gaussian blur (sigma 1.6) followed by 4x decimation.

Training runs are bit-reproducible: all randomness flows from one seed
through named SeedSequence streams, and BLAS pools are pinned to a single
thread for the duration of a run so reduction order cannot vary with the
host's thread count.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from threadpoolctl import threadpool_limits

from . import metrics
from .resample import gaussian_blur
from .scheduler import VideoSequence, run_model
from .tensor import (GradientTape, Tensor, add, add_scalar, backward, downsample,
                     mean_all, mul, scale, sqrt, sub)

logger = logging.getLogger("pfvsr.train")


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; training aborts with this diagnostic."""


# ---------------------------------------------------------------------------
# objective

@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.01     # weight of the first-pass (precursor) term
    epsilon: float = 1e-3   # Charbonnier knee

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")


def charbonnier(pred, target, epsilon=1e-3):
    """mean(sqrt((target - pred)^2 + epsilon^2)), a smooth L1."""
    diff = sub(target, pred)
    return mean_all(sqrt(add_scalar(mul(diff, diff), epsilon * epsilon)))


def _mean_over(terms):
    acc = terms[0]
    for t in terms[1:]:
        acc = add(acc, t)
    return scale(acc, 1.0 / len(terms))


def clip_loss(result, hr_core, cfg):
    """Two-term Charbonnier over a clip's core frames.

    With ``alpha == 0`` the precursor term is not built at all, so no
    gradient flows through the precursor's own output path. Frameworks
    without a precursor network only ever see the first term.
    """
    if len(result.sr) != len(hr_core):
        raise ValueError(f"{len(result.sr)} outputs vs {len(hr_core)} targets")
    loss = _mean_over([charbonnier(sr, hr, cfg.epsilon)
                       for sr, hr in zip(result.sr, hr_core)])
    if cfg.alpha != 0.0 and result.sr_precursor is not None:
        pre = _mean_over([charbonnier(sr_p, hr, cfg.epsilon)
                          for sr_p, hr in zip(result.sr_precursor, hr_core)])
        loss = add(loss, scale(pre, cfg.alpha))
    return loss


# ---------------------------------------------------------------------------
# optimizer

class Adam:
    """Adam with bias correction; stabilizer added outside the square root."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                continue
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.grad = None


# ---------------------------------------------------------------------------
# learning-rate schedule

@dataclass(frozen=True)
class LrSchedule:
    """Linear decay to a floor, a flat stretch, then fixed step drops."""
    base: float = 1e-3
    floor: float = 1e-4
    decay_end: int = 120_000
    drops: tuple = ((250_000, 5e-5), (300_000, 1e-5))

    def scaled(self, factor):
        if factor <= 0:
            raise ValueError(f"schedule scale factor must be > 0, got {factor}")
        return replace(self, decay_end=max(1, round(self.decay_end * factor)),
                       drops=tuple((max(1, round(i * factor)), v) for i, v in self.drops))


def lr_at(iteration, sched=LrSchedule()):
    if iteration < 0:
        raise ValueError(f"iteration must be >= 0, got {iteration}")
    for start, value in sorted(sched.drops, reverse=True):
        if iteration >= start:
            return value
    if iteration >= sched.decay_end:
        return sched.floor
    return sched.base + (sched.floor - sched.base) * (iteration / sched.decay_end)


# ---------------------------------------------------------------------------
# degradation and synthetic data

@dataclass(frozen=True)
class DegradeConfig:
    scale: int = 4
    sigma: float = 1.6
    radius: int = None    # Gaussian tap radius; None -> ceil(3 * sigma)


def degrade_clip(hr, cfg=DegradeConfig()):
    """Blur then decimate every frame. ``hr`` is (..., 3, H, W) ndarray."""
    arr = np.asarray(hr)
    lead = arr.shape[:-3]
    flat = arr.reshape((-1,) + arr.shape[-3:])
    t = Tensor(flat.astype(arr.dtype if arr.dtype in (np.float32, np.float64) else np.float64))
    out = downsample(gaussian_blur(t, cfg.sigma, cfg.radius), cfg.scale).data
    return out.reshape(lead + out.shape[-3:])


def synth_clip(seed, frames, height, width, velocity=None):
    """Moving synthetic scene: drifting sinusoid gratings plus soft blobs.

    The whole scene translates by one sub-pixel ``velocity`` per frame (blobs
    wrap around torus-style), so frame t+1 equals frame t shifted by exactly
    that velocity. Values stay inside [0, 1] by amplitude budgeting.
    """
    rng = np.random.default_rng(seed)
    if velocity is None:
        velocity = tuple(rng.uniform(0.2, 0.8, 2) * rng.choice((-1.0, 1.0), 2))
    vx, vy = float(velocity[0]), float(velocity[1])

    n_gratings, n_blobs = 4, 3
    theta = rng.uniform(0.0, np.pi, n_gratings)
    freq = rng.uniform(0.02, 0.12, n_gratings)
    phase = rng.uniform(0.0, 2 * np.pi, n_gratings)
    g_amp = rng.uniform(0.02, 0.07, n_gratings)
    g_col = rng.uniform(0.3, 1.0, (n_gratings, 3))
    b_cy = rng.uniform(0.0, height, n_blobs)
    b_cx = rng.uniform(0.0, width, n_blobs)
    b_sig = rng.uniform(max(2.0, min(height, width) / 12), max(3.0, min(height, width) / 6), n_blobs)
    b_amp = rng.uniform(0.05, 0.1, n_blobs) * rng.choice((-1.0, 1.0), n_blobs)
    b_col = rng.uniform(0.3, 1.0, (n_blobs, 3))

    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    out = np.empty((frames, 3, height, width), dtype=np.float64)
    for t in range(frames):
        xs, ys = xx - t * vx, yy - t * vy
        acc = np.zeros((3, height, width))
        for i in range(n_gratings):
            wave = np.sin(2 * np.pi * freq[i] * (np.cos(theta[i]) * xs + np.sin(theta[i]) * ys)
                          + phase[i])
            acc += g_amp[i] * g_col[i][:, None, None] * wave
        for i in range(n_blobs):
            dx = (xs - b_cx[i] + width / 2) % width - width / 2
            dy = (ys - b_cy[i] + height / 2) % height - height / 2
            bump = np.exp(-(dx * dx + dy * dy) / (2 * b_sig[i] ** 2))
            acc += b_amp[i] * b_col[i][:, None, None] * bump
        out[t] = 0.5 + acc
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# clip sources

class SyntheticSource:
    """Endless stream of seeded synthetic clips; eval uses a disjoint stream."""

    def __init__(self, seed):
        self.seed = int(seed)

    def sample_batch(self, iteration, n_frames, batch, hr_h, hr_w):
        lanes = [synth_clip(np.random.SeedSequence([self.seed, 1, iteration, b]),
                            n_frames, hr_h, hr_w)
                 for b in range(batch)]
        return np.stack(lanes, axis=1)   # (frames, batch, 3, H, W)

    def eval_clips(self, count, n_frames, hr_h, hr_w):
        return [synth_clip(np.random.SeedSequence([self.seed, 2, k]), n_frames, hr_h, hr_w)
                for k in range(count)]


class ArraySource:
    """Samples temporal windows and aligned spatial crops from real HR clips."""

    def __init__(self, clips, seed, scale=4):
        self.clips = [np.asarray(c, dtype=np.float64) for c in clips]
        for c in self.clips:
            if c.ndim != 4 or c.shape[1] != 3:
                raise ValueError(f"clips must be (frames, 3, H, W), got {c.shape}")
        self.seed = int(seed)
        self.scale = scale

    def _window(self, rng, n_frames, hr_h, hr_w):
        clip = self.clips[rng.integers(len(self.clips))]
        t_len, _, h, w = clip.shape
        if t_len < n_frames or h < hr_h or w < hr_w:
            raise ValueError(f"clip {clip.shape} too small for a {n_frames}x{hr_h}x{hr_w} sample")
        t0 = int(rng.integers(t_len - n_frames + 1))
        oy = int(rng.integers((h - hr_h) // self.scale + 1)) * self.scale
        ox = int(rng.integers((w - hr_w) // self.scale + 1)) * self.scale
        return clip[t0:t0 + n_frames, :, oy:oy + hr_h, ox:ox + hr_w]

    def sample_batch(self, iteration, n_frames, batch, hr_h, hr_w):
        lanes = [self._window(np.random.default_rng(np.random.SeedSequence(
            [self.seed, 1, iteration, b])), n_frames, hr_h, hr_w) for b in range(batch)]
        return np.stack(lanes, axis=1)

    def eval_clips(self, count, n_frames, hr_h, hr_w):
        out = []
        for k in range(min(count, len(self.clips))):
            clip = self.clips[k]
            t_len, _, h, w = clip.shape
            hh = min(hr_h, h - h % self.scale)
            ww = min(hr_w, w - w % self.scale)
            oy = ((h - hh) // (2 * self.scale)) * self.scale
            ox = ((w - ww) // (2 * self.scale)) * self.scale
            out.append(clip[:min(n_frames, t_len), :, oy:oy + hh, ox:ox + ww])
        return out


# ---------------------------------------------------------------------------
# frame-directory ingestion (8-bit RGB, zero-padded frame numbers)

def load_frame_dir(path):
    """Read a directory of numbered .png frames into (frames, 3, H, W) in [0, 1]."""
    from pathlib import Path
    from PIL import Image
    files = sorted(Path(path).glob("*.png"))
    if not files:
        raise FileNotFoundError(f"no .png frames in {path}")
    frames = []
    for f in files:
        img = Image.open(f).convert("RGB")
        frames.append(np.asarray(img, dtype=np.float64).transpose(2, 0, 1) / 255.0)
    return np.stack(frames)


def save_frame_dir(clip, path):
    """Write (frames, 3, H, W) values in [0, 1] as 8-bit RGB %08d.png files."""
    from pathlib import Path
    from PIL import Image
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(np.asarray(clip)):
        arr = np.clip(np.rint(frame * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
        Image.fromarray(arr, "RGB").save(out / f"{i:08d}.png")
    return len(clip)


# ---------------------------------------------------------------------------
# training loop

@dataclass
class TrainConfig:
    """Reference protocol values; desk runs override most of them."""
    iterations: int = 300_000
    batch_size: int = 16
    patch_size: int = 64            # low-res patch edge
    clip_frames: int = 7            # core frames scored by the loss
    margin: int = 1                 # real context frames on each side
    seed: int = 0
    dtype: str = "float64"
    lr_base: float = 1e-3
    lr_floor: float = 1e-4
    lr_decay_end: int = 120_000
    lr_drops: tuple = ((250_000, 5e-5), (300_000, 1e-5))
    schedule_span: int = 300_000    # run length the knots above refer to
    scale_schedule: bool = True     # rescale knots by iterations / span
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    eval_interval: int = 0          # 0: evaluate only at the final iteration
    eval_clips: int = 2
    eval_frames: int = 7
    eval_size: int = 32             # low-res eval frame edge
    degrade: DegradeConfig = field(default_factory=DegradeConfig)

    def schedule(self):
        sched = LrSchedule(self.lr_base, self.lr_floor, self.lr_decay_end,
                           tuple(tuple(d) for d in self.lr_drops))
        if self.scale_schedule and self.iterations != self.schedule_span:
            sched = sched.scaled(self.iterations / self.schedule_span)
        return sched


@dataclass
class TrainResult:
    rows: list
    final_eval_psnr: float
    bicubic_psnr: float
    iterations: int


def _to_sequence(hr_batch, lr_batch, margin, dtype):
    lr_frames = [Tensor(np.ascontiguousarray(f, dtype=dtype)) for f in lr_batch]
    hr_frames = [Tensor(np.ascontiguousarray(f, dtype=dtype)) for f in hr_batch]
    mode = "extend" if margin > 0 else "replicate"
    return VideoSequence(lr_frames, hr_frames, padding_mode=mode, margin=margin)


def evaluate_psnr(model, hr_clips, degrade_cfg, protocol=None):
    """Mean sequence PSNR of the model over held-out HR clips."""
    protocol = protocol or metrics.EvalProtocol()
    vals = []
    for hr in hr_clips:
        lr = degrade_clip(hr, degrade_cfg)
        seq = VideoSequence([Tensor(f[None].astype(model.dtype)) for f in lr])
        result = run_model(model, seq)
        sr = [t.data[0] for t in result.sr]
        vals.append(metrics.sequence_psnr(sr, [f for f in hr], protocol))
    return float(np.mean(vals))


def bicubic_psnr(hr_clips, degrade_cfg, protocol=None):
    from .resample import bicubic_upsample_array
    protocol = protocol or metrics.EvalProtocol()
    vals = []
    for hr in hr_clips:
        lr = degrade_clip(hr, degrade_cfg)
        sr = [bicubic_upsample_array(f[None], degrade_cfg.scale)[0] for f in lr]
        vals.append(metrics.sequence_psnr(sr, [f for f in hr], protocol))
    return float(np.mean(vals))


def train(model, source, tcfg, lcfg, csv_path=None):
    """Run the optimization loop; returns per-iteration rows and final PSNR.

    Aborts with TrainingDiverged when the loss goes non-finite; merely
    suspicious jumps are logged and training continues.
    """
    with threadpool_limits(limits=1, user_api="blas"):
        return _train_inner(model, source, tcfg, lcfg, csv_path)


def _train_inner(model, source, tcfg, lcfg, csv_path):
    dtype = np.dtype(tcfg.dtype)
    if model.dtype != dtype:
        raise TypeError(f"model dtype {model.dtype} vs training dtype {dtype}")
    sched = tcfg.schedule()
    adam = Adam(model.parameters(), tcfg.beta1, tcfg.beta2, tcfg.adam_eps)
    scale_f = model.config.scale
    n_frames = tcfg.clip_frames + 2 * tcfg.margin
    hr_edge = tcfg.patch_size * scale_f
    eval_hr = tcfg.eval_size * scale_f
    eval_set = source.eval_clips(tcfg.eval_clips, tcfg.eval_frames, eval_hr, eval_hr)
    base_psnr = bicubic_psnr(eval_set, tcfg.degrade)

    rows, recent = [], []
    final_eval = math.nan
    for it in range(tcfg.iterations):
        lr = lr_at(it, sched)
        hr = source.sample_batch(it, n_frames, tcfg.batch_size, hr_edge, hr_edge)
        lr_clip = degrade_clip(hr.astype(dtype), tcfg.degrade)
        seq = _to_sequence(hr, lr_clip, tcfg.margin, dtype)
        with GradientTape() as tape:
            result = run_model(model, seq)
            loss = clip_loss(result, seq.core_hr(), lcfg)
        loss_val = loss.item()
        if not math.isfinite(loss_val):
            raise TrainingDiverged(f"non-finite loss {loss_val} at iteration {it + 1}")
        if len(recent) >= 10 and loss_val > 10.0 * float(np.median(recent)):
            logger.warning("loss jumped to %.6g at iteration %d (median %.6g); continuing",
                           loss_val, it + 1, float(np.median(recent)))
        recent.append(loss_val)
        if len(recent) > 50:
            recent.pop(0)
        backward(tape, loss)
        adam.step(lr)

        is_last = it + 1 == tcfg.iterations
        eval_val = ""
        if is_last or (tcfg.eval_interval and (it + 1) % tcfg.eval_interval == 0):
            final_eval = evaluate_psnr(model, eval_set, tcfg.degrade)
            eval_val = final_eval
        rows.append({"iteration": it + 1, "lr": lr, "loss": loss_val, "eval_psnr": eval_val})

    if csv_path is not None:
        write_loss_csv(rows, csv_path)
    return TrainResult(rows, final_eval, base_psnr, tcfg.iterations)


def _fmt(v):
    if v == "":
        return ""
    return format(float(v), ".17g")


def write_loss_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "lr", "loss", "eval_psnr"])
        for r in rows:
            w.writerow([r["iteration"], _fmt(r["lr"]), _fmt(r["loss"]), _fmt(r["eval_psnr"])])
