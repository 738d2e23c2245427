"""Quality metrics, compute accounting, and evaluation reports.

PSNR/SSIM follow the common video-SR protocol: scores are computed on the
luminance plane of a YCbCr conversion (studio-swing: Y in [16, 235] for
inputs in [0, 1]), an 8-pixel border is cropped from every side, the first
and last two frames of a sequence are excluded, and the peak is 255.
"""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .generator import count_weights, layer_plan, net_plans
from .resample import gaussian_kernel
from .tensor import ShapeError, Tensor

_LUMA = np.array([65.481, 128.553, 24.966])
_LUMA_OFFSET = 16.0


@dataclass(frozen=True)
class EvalProtocol:
    skip_frames: int = 2   # dropped from each end of a sequence
    border: int = 8        # pixels cropped from each side of a frame
    peak: float = 255.0


def _frame_array(x):
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    if arr.ndim == 4:
        if arr.shape[0] != 1:
            raise ShapeError("batch", f"metrics take single frames, got batch {arr.shape[0]}")
        arr = arr[0]
    if arr.ndim != 3:
        raise ShapeError("rank", f"frame must be (3, H, W), got {arr.shape}")
    if arr.shape[0] != 3:
        raise ShapeError("channels", f"frame must have 3 channels, got {arr.shape[0]}")
    return arr.astype(np.float64, copy=False)


def to_luminance(frame):
    """Studio-swing luminance of an RGB frame in [0, 1]; returns (H, W)."""
    arr = _frame_array(frame)
    return np.tensordot(_LUMA, arr, axes=(0, 0)) + _LUMA_OFFSET


def _cropped_luma_pair(a, b, protocol):
    ya, yb = to_luminance(a), to_luminance(b)
    if ya.shape != yb.shape:
        raise ShapeError("height", f"frame size mismatch {ya.shape} vs {yb.shape}")
    c = protocol.border
    if c:
        if ya.shape[0] <= 2 * c or ya.shape[1] <= 2 * c:
            raise ShapeError("height", f"border {c} leaves no pixels of {ya.shape}")
        ya, yb = ya[c:-c, c:-c], yb[c:-c, c:-c]
    return ya, yb


def psnr(a, b, protocol=EvalProtocol()):
    """Peak signal-to-noise ratio in dB; +inf for identical inputs."""
    ya, yb = _cropped_luma_pair(a, b, protocol)
    mse = float(np.mean((ya - yb) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(protocol.peak ** 2 / mse)


_SSIM_RADIUS = 5
_SSIM_SIGMA = 1.5
_SSIM_K1, _SSIM_K2 = 0.01, 0.03


def _window_means(img, window):
    k = window.shape[0]
    win = np.lib.stride_tricks.sliding_window_view(img, (k, k))
    return np.tensordot(win, window, axes=([2, 3], [0, 1]))


def ssim(a, b, protocol=EvalProtocol()):
    """Mean structural similarity over valid 11x11 Gaussian windows."""
    ya, yb = _cropped_luma_pair(a, b, protocol)
    k1d = gaussian_kernel(_SSIM_SIGMA, _SSIM_RADIUS)
    window = np.outer(k1d, k1d)
    size = 2 * _SSIM_RADIUS + 1
    if ya.shape[0] < size or ya.shape[1] < size:
        raise ShapeError("height", f"frames smaller than the {size}x{size} window: {ya.shape}")
    mu_a = _window_means(ya, window)
    mu_b = _window_means(yb, window)
    var_a = _window_means(ya * ya, window) - mu_a * mu_a
    var_b = _window_means(yb * yb, window) - mu_b * mu_b
    cov = _window_means(ya * yb, window) - mu_a * mu_b
    c1 = (_SSIM_K1 * protocol.peak) ** 2
    c2 = (_SSIM_K2 * protocol.peak) ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def _scored_range(n, protocol):
    lo, hi = protocol.skip_frames, n - protocol.skip_frames
    if hi <= lo:
        raise ShapeError("batch", f"skipping {protocol.skip_frames} frames per end leaves "
                                  f"nothing of a {n}-frame sequence")
    return range(lo, hi)


def sequence_psnr(sr_frames, hr_frames, protocol=EvalProtocol()):
    if len(sr_frames) != len(hr_frames):
        raise ShapeError("batch", f"{len(sr_frames)} outputs vs {len(hr_frames)} references")
    idx = _scored_range(len(sr_frames), protocol)
    return float(np.mean([psnr(sr_frames[i], hr_frames[i], protocol) for i in idx]))


def sequence_ssim(sr_frames, hr_frames, protocol=EvalProtocol()):
    if len(sr_frames) != len(hr_frames):
        raise ShapeError("batch", f"{len(sr_frames)} outputs vs {len(hr_frames)} references")
    idx = _scored_range(len(sr_frames), protocol)
    return float(np.mean([ssim(sr_frames[i], hr_frames[i], protocol) for i in idx]))


# ---------------------------------------------------------------------------
# compute accounting

def count_flops(config, out_w=1280, out_h=720):
    """Per-frame multiply counts (1 MAC = 1 FLOP) from a layer walk.

    Layers run at the low-res grid except where the plan marks a higher
    ``res_scale``. Also reports the all-weights-at-low-res product used as an
    internal consistency reference.
    """
    s = config.scale
    if out_w % s or out_h % s:
        raise ShapeError("width", f"output {out_w}x{out_h} not divisible by scale {s}")
    lr_px = (out_w // s) * (out_h // s)
    per_net = {}
    for role, plan in net_plans(config).items():
        per_net[role] = sum(spec.weight_count * lr_px * spec.res_scale ** 2
                            for spec in layer_plan(plan))
    total = sum(per_net.values())
    return {"total": total, "per_net": per_net,
            "weights_times_pixels": count_weights(config) * lr_px}


def benchmark_time(model, lr_size=32, frames=5, reps=5, warmup=1, single_thread=True):
    """Median wall-clock cost of full inference, per output frame."""
    from threadpoolctl import threadpool_limits
    from .scheduler import VideoSequence, run_model

    rng = np.random.default_rng(0)
    seq = VideoSequence([Tensor(rng.uniform(0, 1, (1, 3, lr_size, lr_size))
                                .astype(model.dtype)) for _ in range(frames)])

    def run_once():
        t0 = time.perf_counter()
        run_model(model, seq)
        return (time.perf_counter() - t0) / frames

    limits = 1 if single_thread else None
    with threadpool_limits(limits=limits, user_api="blas"):
        for _ in range(warmup):
            run_once()
        times = [run_once() for _ in range(reps)]
    ms = float(np.median(times)) * 1000.0
    return {"ms_per_frame": ms, "fps": 1000.0 / ms if ms > 0 else math.inf}


# ---------------------------------------------------------------------------
# report

def fmt_metric(v, places=4):
    if v is None:
        return "-"
    if math.isinf(v):
        return "inf"
    return f"{v:.{places}f}"


@dataclass
class EvalReport:
    model_name: str
    params: dict                 # per-net and total parameter counts
    flops_total: int
    flops_resolution: str
    rows: list = field(default_factory=list)   # (name, psnr, ssim)
    ms_per_frame: float = None
    fps: float = None

    def add(self, name, psnr_val, ssim_val):
        self.rows.append((name, psnr_val, ssim_val))

    @property
    def mean_psnr(self):
        return float(np.mean([r[1] for r in self.rows])) if self.rows else math.nan

    @property
    def mean_ssim(self):
        return float(np.mean([r[2] for r in self.rows])) if self.rows else math.nan

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["# model", self.model_name])
            w.writerow(["# params_total", self.params["total"]])
            w.writerow(["# flops_total", self.flops_total])
            w.writerow(["# flops_resolution", self.flops_resolution])
            if self.ms_per_frame is not None:
                w.writerow(["# ms_per_frame", fmt_metric(self.ms_per_frame, 3)])
                w.writerow(["# fps", fmt_metric(self.fps, 3)])
            w.writerow(["sequence", "psnr", "ssim"])
            for name, p, s in self.rows:
                w.writerow([name, fmt_metric(p), fmt_metric(s)])
            w.writerow(["mean", fmt_metric(self.mean_psnr), fmt_metric(self.mean_ssim)])

    def to_text(self):
        detail = ", ".join(f"{k}={v}" for k, v in sorted(self.params.items())
                           if k != "total")
        lines = [f"model: {self.model_name}",
                 f"parameters: {self.params['total'] / 1e6:.3f}M"
                 + (f" ({detail})" if detail else ""),
                 f"flops: {self.flops_total / 1e9:.3f}G per frame at {self.flops_resolution}"]
        if self.ms_per_frame is not None:
            lines.append(f"runtime: {fmt_metric(self.ms_per_frame, 3)} ms/frame "
                         f"({fmt_metric(self.fps, 2)} fps)")
        header = f"{'sequence':<16}{'psnr':>10}{'ssim':>10}"
        lines += ["", header, "-" * len(header)]
        for name, p, s in self.rows:
            lines.append(f"{name:<16}{fmt_metric(p):>10}{fmt_metric(s):>10}")
        lines.append(f"{'mean':<16}{fmt_metric(self.mean_psnr):>10}{fmt_metric(self.mean_ssim):>10}")
        return "\n".join(lines) + "\n"
