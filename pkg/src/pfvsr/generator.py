"""Progressive-fusion super-resolution networks.

A network processes ``window`` parallel feature streams (one per input
frame). Each stream is opened by a fusion conv that optionally absorbs a
hidden state, refined by a stack of progressive fusion residual blocks that
exchange information through a shared 1x1 merge, collapsed by a tail conv
into the next hidden state, and that hidden state is upscaled into the
residual image. Leaky ReLU follows every conv except the final upscale conv.

Five temporal frameworks reuse this structure and differ only in which
streams carry hidden inputs and how the scheduler wires them across time:

  ivsr   sliding window, no recurrence
  rvsr   two past frames plus own previous hidden
  hvsr   sliding window plus own previous hidden
  lovsr  forward precursor net feeding a successor net
  govsr  backward precursor net feeding a successor net
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .tensor import Tensor, concat_channels, conv2d, leaky_relu, pixel_shuffle

FRAMEWORKS = ("ivsr", "rvsr", "hvsr", "lovsr", "govsr")

# frame offsets relative to the current timestep; None means a zero frame
# (the stream exists for structural uniformity but carries no real input)
_WINDOW3 = (-1, 0, 1)
_WINDOW4 = (-1, 0, 1, 2)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    framework: str = "govsr"
    blocks_precursor: int = 1
    blocks_successor: int = 1
    filters: int = 16
    scale: int = 4
    window: int = 3
    leaky_slope: float = 0.2
    upscale_width: int = 1        # first upscale conv emits upscale_width * filters channels
    residual_base: str = "auto"   # auto | precursor | bicubic
    image_channels: int = 3

    def __post_init__(self):
        if self.framework not in FRAMEWORKS:
            raise ConfigError(f"unknown framework {self.framework!r}, expected one of {FRAMEWORKS}")
        if self.blocks_precursor < 0 or self.blocks_successor < 0:
            raise ConfigError("block counts must be non-negative")
        if self.blocks_precursor + self.blocks_successor < 1:
            raise ConfigError("need at least one residual block in total")
        if self.framework in ("ivsr", "rvsr", "hvsr") and self.blocks_precursor != 0:
            raise ConfigError(f"{self.framework} is a single-network framework; blocks_precursor must be 0")
        if self.filters < 4:
            raise ConfigError(f"filters must be >= 4, got {self.filters}")
        if self.scale not in (2, 4):
            raise ConfigError(f"scale must be 2 or 4, got {self.scale}")
        if self.window == 4 and self.framework != "hvsr":
            raise ConfigError("window 4 is an hvsr-only variant")
        if self.window not in (3, 4):
            raise ConfigError(f"window must be 3 or 4, got {self.window}")
        if self.upscale_width not in (1, 4):
            raise ConfigError(f"upscale_width must be 1 or 4, got {self.upscale_width}")
        if (self.upscale_width * self.filters) % 4 != 0:
            raise ConfigError("upscale_width * filters must be divisible by 4")
        if self.residual_base not in ("auto", "precursor", "bicubic"):
            raise ConfigError(f"bad residual_base {self.residual_base!r}")
        if self.residual_base == "precursor" and self.blocks_precursor == 0:
            raise ConfigError("residual_base=precursor needs a precursor network")

    @property
    def name(self):
        return f"{self.framework}-{self.blocks_precursor}+{self.blocks_successor}-{self.filters}"

    def resolved_residual_base(self):
        if self.residual_base != "auto":
            return self.residual_base
        if self.framework in ("lovsr", "govsr") and self.blocks_precursor > 0:
            return "precursor"
        return "bicubic"


def parse_model_name(name):
    """Parse "govsr-4+2-56" into a ModelConfig."""
    try:
        framework, blocks, filters = name.strip().lower().split("-")
        p, s = blocks.split("+")
        return ModelConfig(framework=framework, blocks_precursor=int(p),
                           blocks_successor=int(s), filters=int(filters))
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"bad model name {name!r}, expected framework-P+S-filters") from exc


@dataclass(frozen=True)
class NetPlan:
    """Structural description of one network (enough to build or count it)."""
    role: str                     # precursor | successor | generator
    filters: int
    blocks: int
    window: int
    frame_offsets: tuple
    hidden_slots: tuple           # per stream: does the fusion conv absorb a hidden
    leaky_slope: float
    scale: int
    upscale_width: int
    image_channels: int = 3


def net_plans(config):
    """Map role -> NetPlan for every network the framework instantiates."""
    fw = config.framework
    c = dict(filters=config.filters, window=config.window, leaky_slope=config.leaky_slope,
             scale=config.scale, upscale_width=config.upscale_width,
             image_channels=config.image_channels)
    offsets = _WINDOW4 if config.window == 4 else _WINDOW3
    plans = {}
    if fw == "ivsr":
        plans["generator"] = NetPlan("generator", blocks=config.blocks_successor,
                                     frame_offsets=offsets, hidden_slots=(0, 0, 0), **c)
    elif fw == "rvsr":
        plans["generator"] = NetPlan("generator", blocks=config.blocks_successor,
                                     frame_offsets=(-1, 0, None), hidden_slots=(1, 0, 0), **c)
    elif fw == "hvsr":
        slots = (1, 0, 0, 0) if config.window == 4 else (1, 0, 0)
        plans["generator"] = NetPlan("generator", blocks=config.blocks_successor,
                                     frame_offsets=offsets, hidden_slots=slots, **c)
    else:
        if config.blocks_precursor > 0:
            slots = (0, 0, 1) if fw == "govsr" else (1, 0, 0)
            plans["precursor"] = NetPlan("precursor", blocks=config.blocks_precursor,
                                         frame_offsets=offsets, hidden_slots=slots, **c)
        plans["successor"] = NetPlan("successor", blocks=config.blocks_successor,
                                     frame_offsets=offsets, hidden_slots=(1, 1, 1), **c)
    return plans


@dataclass(frozen=True)
class LayerSpec:
    """One conv layer for accounting: params, multiplies, activation site."""
    name: str
    cin: int
    cout: int
    kernel: int
    res_scale: int                # spatial multiplier relative to the input frame
    activated: bool

    @property
    def weight_count(self):
        return self.kernel * self.kernel * self.cin * self.cout

    @property
    def param_count(self):
        return self.weight_count + self.cout


def layer_plan(plan):
    """Ordered conv layers of one network."""
    F, W, C = plan.filters, plan.window, plan.image_channels
    layers = []
    for k, slot in enumerate(plan.hidden_slots):
        layers.append(LayerSpec(f"fusion.{k}", C + (F if slot else 0), F, 3, 1, True))
    for b in range(plan.blocks):
        for k in range(W):
            layers.append(LayerSpec(f"block.{b}.stage1.{k}", F, F, 3, 1, True))
        layers.append(LayerSpec(f"block.{b}.merge", W * F, F, 1, 1, True))
        for k in range(W):
            layers.append(LayerSpec(f"block.{b}.stage2.{k}", 2 * F, F, 3, 1, True))
    layers.append(LayerSpec("tail", W * F, F, 3, 1, True))
    if plan.scale == 4:
        mid = plan.upscale_width * F
        layers.append(LayerSpec("up.0", F, mid, 3, 1, True))
        layers.append(LayerSpec("up.1", mid // 4, 4 * C, 3, 2, False))
    else:  # scale 2: a single non-activated conv feeding one shuffle
        layers.append(LayerSpec("up.0", F, 4 * C, 3, 1, False))
    return layers


def _he_normal(rng, shape, slope, dtype):
    fan_in = shape[1] * shape[2] * shape[3]
    std = np.sqrt(2.0 / (fan_in * (1.0 + slope * slope)))
    return (rng.standard_normal(shape) * std).astype(dtype)


class Network:
    """A NetPlan plus its parameter tensors."""

    def __init__(self, plan, rng=None, dtype=np.float64):
        self.plan = plan
        self.params = {}
        for spec in layer_plan(plan):
            if rng is None:
                w = np.zeros((spec.cout, spec.cin, spec.kernel, spec.kernel), dtype=dtype)
            else:
                w = _he_normal(rng, (spec.cout, spec.cin, spec.kernel, spec.kernel),
                               plan.leaky_slope, dtype)
            self.params[spec.name + ".w"] = Tensor(w, requires_grad=True, name=spec.name + ".w")
            self.params[spec.name + ".b"] = Tensor(np.zeros((1, spec.cout, 1, 1), dtype=dtype),
                                                   requires_grad=True, name=spec.name + ".b")

    def _conv(self, x, name):
        return conv2d(x, self.params[name + ".w"], self.params[name + ".b"])

    def _act(self, x):
        return leaky_relu(x, self.plan.leaky_slope)

    def forward(self, frames, hiddens):
        """One timestep. ``frames``/``hiddens`` are per-stream lists.

        Streams without a hidden slot must receive None or an all-zero
        hidden; a non-zero hidden there would be silently dropped, so it is
        rejected instead. Returns (sr_residual, new_hidden).
        """
        plan = self.plan
        if len(frames) != plan.window or len(hiddens) != plan.window:
            raise ValueError(f"{plan.role} expects {plan.window} streams, got "
                             f"{len(frames)} frames / {len(hiddens)} hiddens")
        streams = []
        for k in range(plan.window):
            if plan.hidden_slots[k]:
                if hiddens[k] is None:
                    raise ValueError(f"{plan.role} stream {k} needs a hidden state")
                x = concat_channels([frames[k], hiddens[k]])
            else:
                if hiddens[k] is not None and np.any(hiddens[k].data):
                    raise ValueError(f"{plan.role} stream {k} takes no hidden input")
                x = frames[k]
            streams.append(self._act(self._conv(x, f"fusion.{k}")))

        for b in range(plan.blocks):
            stage1 = [self._act(self._conv(s, f"block.{b}.stage1.{k}"))
                      for k, s in enumerate(streams)]
            merged = self._act(self._conv(concat_channels(stage1), f"block.{b}.merge"))
            streams = [s + self._act(self._conv(concat_channels([stage1[k], merged]),
                                                f"block.{b}.stage2.{k}"))
                       for k, s in enumerate(streams)]

        hidden = self._act(self._conv(concat_channels(streams), "tail"))

        y = hidden
        if plan.scale == 4:
            y = pixel_shuffle(self._act(self._conv(y, "up.0")), 2)
            y = pixel_shuffle(self._conv(y, "up.1"), 2)
        else:
            y = pixel_shuffle(self._conv(y, "up.0"), 2)
        return y, hidden

    def named_parameters(self):
        return list(self.params.items())


class Model:
    """All networks of one framework instance."""

    def __init__(self, config, seed=0, dtype=np.float64, init=True):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.nets = {}
        children = np.random.SeedSequence([int(seed), 7]).spawn(4)
        for (role, plan), child in zip(sorted(net_plans(config).items()), children):
            rng = np.random.default_rng(child) if init else None
            self.nets[role] = Network(plan, rng, self.dtype)

    def named_parameters(self):
        out = []
        for role in sorted(self.nets):
            for name, t in self.nets[role].named_parameters():
                out.append((f"{role}.{name}", t))
        return out

    def parameters(self):
        return [t for _, t in self.named_parameters()]


def count_parameters(config):
    """Per-network and total parameter counts from the layer plan alone."""
    per_net = {}
    for role, plan in net_plans(config).items():
        per_net[role] = sum(spec.param_count for spec in layer_plan(plan))
    per_net["total"] = sum(per_net.values())
    return per_net


def count_weights(config):
    """Multiplicative weights only (biases excluded), for FLOPs sanity."""
    total = 0
    for plan in net_plans(config).values():
        total += sum(spec.weight_count for spec in layer_plan(plan))
    return total
