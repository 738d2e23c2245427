"""Temporal scheduling: how hidden states flow across frames.

The generator network is timestep-agnostic; this module decides, per
framework, which frames and which previously produced hidden states feed
each step, in which order steps run, and how the per-network outputs are
combined into the final frame. Every run can record a ``ScheduleTrace``: one
record per network invocation listing the tokens it consumed and produced,
which makes the dataflow auditable (no hidden state consumed before it was
produced, bounded lookahead for the forward-precursor framework, full-range
reachability for the backward-precursor one).

Token grammar: frames are ``I[4]``, precursor/successor hiddens ``Hp[4]`` /
``Hs[4]``, per-network outputs ``SRp[4]`` / ``SRs[4]`` / ``SR[4]``, and the
literal ``0`` marks a zero tensor (chain boundary, structural filler, or a
masked-out input). Indices are absolute positions in the frame list.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .generator import ConfigError
from .resample import bicubic_upsample
from .tensor import ShapeError, Tensor, add, zeros


class NotAnInputError(ValueError):
    """Raised when a mask names an input the targeted network never consumes."""


MASKABLE_INPUTS = ("I[t-1]", "I[t]", "I[t+1]", "H[t-1]", "H[t]", "H[t+1]")

_OFFSET_NAMES = {-1: "I[t-1]", 0: "I[t]", 1: "I[t+1]", 2: "I[t+2]"}


@dataclass
class VideoSequence:
    """A low-res clip, optionally paired with its high-res source.

    ``margin`` marks leading/trailing context frames (used during training so
    boundary steps see real neighbors and warmed-up hidden states); scored
    outputs cover only the core ``frames[margin : len - margin]``. Out-of-range
    neighbor access always replicates the nearest edge frame.
    """
    frames: list
    hr_frames: list = None
    scale: int = 4
    padding_mode: str = "replicate"   # replicate | extend
    margin: int = 0

    def __post_init__(self):
        if not self.frames:
            raise ShapeError("batch", "empty sequence")
        base = self.frames[0].shape
        for f in self.frames:
            if f.shape != base:
                raise ShapeError("height", f"inconsistent frame shapes {base} vs {f.shape}")
        if self.padding_mode not in ("replicate", "extend"):
            raise ConfigError(f"bad padding_mode {self.padding_mode!r}")
        if self.margin < 0 or 2 * self.margin >= len(self.frames):
            raise ConfigError(f"margin {self.margin} leaves no core frames")
        if self.margin > 0 and self.padding_mode != "extend":
            raise ConfigError("margin frames require padding_mode='extend'")
        if self.hr_frames is not None:
            if len(self.hr_frames) != len(self.frames):
                raise ShapeError("batch", "hr/lr frame count mismatch")
            b, c, h, w = base
            for f in self.hr_frames:
                if f.shape != (b, c, h * self.scale, w * self.scale):
                    raise ShapeError("height", f"hr frame {f.shape} is not {self.scale}x of lr {base}")

    def __len__(self):
        return len(self.frames)

    @property
    def core_indices(self):
        return range(self.margin, len(self.frames) - self.margin)

    def core_hr(self):
        if self.hr_frames is None:
            raise ValueError("sequence carries no high-res frames")
        return [self.hr_frames[i] for i in self.core_indices]


@dataclass(frozen=True)
class TraceStep:
    network: str
    timestep: int
    consumed: tuple
    produced: tuple


class ScheduleTrace:
    def __init__(self):
        self.steps = []

    def add(self, network, timestep, consumed, produced):
        self.steps.append(TraceStep(network, timestep, tuple(consumed), tuple(produced)))

    def to_lines(self):
        return [f"step={i} net={s.network} t={s.timestep} "
                f"consumed={','.join(s.consumed)} produced={','.join(s.produced)}"
                for i, s in enumerate(self.steps)]

    def producers(self):
        """token -> index of the step that produced it (each exactly once)."""
        out = {}
        for i, s in enumerate(self.steps):
            for tok in s.produced:
                if tok in out:
                    raise AssertionError(f"token {tok} produced twice (steps {out[tok]} and {i})")
                out[tok] = i
        return out

    def check(self, n_frames):
        """Causality audit: every consumed token must already exist."""
        producers = self.producers()
        for i, s in enumerate(self.steps):
            for tok in s.consumed:
                if tok == "0":
                    continue
                if tok.startswith("I["):
                    idx = int(tok[2:-1])
                    if not 0 <= idx < n_frames:
                        raise AssertionError(f"step {i} consumes out-of-range frame {tok}")
                    continue
                src = producers.get(tok)
                if src is None:
                    raise AssertionError(f"step {i} consumes {tok}, never produced")
                if src >= i:
                    raise AssertionError(f"step {i} consumes {tok} produced later (step {src})")

    def reachable_frames(self, token):
        """Indices of input frames with a dataflow path into ``token``."""
        producers = self.producers()
        frames, seen, stack = set(), set(), [token]
        while stack:
            tok = stack.pop()
            if tok in seen or tok == "0":
                continue
            seen.add(tok)
            if tok.startswith("I["):
                frames.add(int(tok[2:-1]))
                continue
            step = producers.get(tok)
            if step is not None:
                stack.extend(self.steps[step].consumed)
        return frames


@dataclass
class RunResult:
    """Outputs aligned with the sequence's core indices."""
    sr: list
    sr_precursor: list
    sr_successor: list
    trace: ScheduleTrace
    core_indices: range


def combine(base, residual):
    """Final frame = base prediction + residual prediction, elementwise."""
    if base.shape != residual.shape:
        raise ShapeError("height", f"combine shape mismatch {base.shape} vs {residual.shape}")
    return add(base, residual)


def input_membership(config):
    """role -> input names that network actually consumes (wall-clock names)."""
    from .generator import net_plans
    members = {}
    for role, plan in net_plans(config).items():
        names = set()
        for off in plan.frame_offsets:
            if off is not None:
                names.add(_OFFSET_NAMES[off])
        if role == "generator":
            if any(plan.hidden_slots):
                names.add("H[t-1]")
        elif role == "precursor":
            names.add("H[t+1]" if config.framework == "govsr" else "H[t-1]")
        else:
            names.update(("H[t-1]", "H[t]", "H[t+1]"))
        members[role] = frozenset(names)
    return members


def _normalize_masks(config, masks, roles):
    members = input_membership(config)
    table = {role: set() for role in roles}
    for target, name in masks:
        if name not in MASKABLE_INPUTS:
            raise NotAnInputError(f"unknown input name {name!r}; maskable: {MASKABLE_INPUTS}")
        targets = list(roles) if target == "all" else [target]
        if target != "all" and target not in roles:
            raise NotAnInputError(f"framework {config.framework} has no {target!r} network")
        hit = False
        for role in targets:
            if name in members[role]:
                table[role].add(name)
                hit = True
        if not hit:
            raise NotAnInputError(
                f"{name} is not an input of {target} for framework {config.framework}")
    return table


def _zero_hidden(ref_frame, filters):
    b, _, h, w = ref_frame.shape
    return zeros((b, filters, h, w), dtype=ref_frame.dtype)


def _gather_frames(seq, net, t, masked):
    frames, tokens = [], []
    last = len(seq.frames) - 1
    for off in net.plan.frame_offsets:
        if off is None:
            frames.append(Tensor(np.zeros_like(seq.frames[0].data)))
            tokens.append("0")
            continue
        name = _OFFSET_NAMES[off]
        if name in masked:
            frames.append(Tensor(np.zeros_like(seq.frames[0].data)))
            tokens.append("0")
        else:
            idx = min(max(t + off, 0), last)
            frames.append(seq.frames[idx])
            tokens.append(f"I[{idx}]")
    return frames, tokens


def _hidden_or_zero(state, ref, filters):
    if state is None:
        return _zero_hidden(ref, filters), "0"
    tensor, token = state
    return tensor, token


def run_precursor(model, seq, trace, masked=frozenset()):
    """First pass over the clip; backward for govsr, forward otherwise.

    Returns (sr_raw, hidden) lists over the full frame range. When the
    framework has no precursor network both lists are all-None.
    """
    n = len(seq.frames)
    net = model.nets.get("precursor")
    if net is None:
        return [None] * n, [None] * n
    backward = model.config.framework == "govsr"
    rec_slot = net.plan.hidden_slots.index(1)
    rec_name = "H[t+1]" if backward else "H[t-1]"
    order = range(n - 1, -1, -1) if backward else range(n)
    sr_raw, hidden = [None] * n, [None] * n
    prev = None
    for t in order:
        frames, tokens = _gather_frames(seq, net, t, masked)
        carried = None if rec_name in masked else prev
        hid, hid_tok = _hidden_or_zero(carried, frames[0], net.plan.filters)
        hiddens = [None] * net.plan.window
        hiddens[rec_slot] = hid
        sr, h = net.forward(frames, hiddens)
        sr_raw[t], hidden[t] = sr, h
        prev = (h, f"Hp[{t}]")
        trace.add("precursor", t, tokens + [hid_tok], (f"SRp[{t}]", f"Hp[{t}]"))
    return sr_raw, hidden


def run_successor(model, seq, h_pre, trace, masked=frozenset()):
    """Second pass, always forward; consumes the precursor's hidden states."""
    net = model.nets["successor"]
    n = len(seq.frames)
    if len(h_pre) != n:
        raise ValueError(f"need {n} precursor states, got {len(h_pre)}")
    sr_raw, hidden = [None] * n, [None] * n
    prev = None
    for t in range(n):
        frames, tokens = _gather_frames(seq, net, t, masked)
        own = None if "H[t-1]" in masked else prev
        h0, tok0 = _hidden_or_zero(own, frames[0], net.plan.filters)

        def pick(idx, name):
            if name in masked or idx < 0 or idx >= n or h_pre[idx] is None:
                return _zero_hidden(frames[0], net.plan.filters), "0"
            return h_pre[idx], f"Hp[{idx}]"

        h1, tok1 = pick(t, "H[t]")
        h2, tok2 = pick(t + 1, "H[t+1]")
        sr, h = net.forward(frames, [h0, h1, h2])
        sr_raw[t], hidden[t] = sr, h
        prev = (h, f"Hs[{t}]")
        trace.add("successor", t, tokens + [tok0, tok1, tok2], (f"SRs[{t}]", f"Hs[{t}]"))
    return sr_raw, hidden


def run_baseline(model, seq, trace, masked=frozenset(), order=None):
    """Single-network frameworks; output = bicubic base + learned residual."""
    net = model.nets["generator"]
    n = len(seq.frames)
    recurrent = any(net.plan.hidden_slots)
    if order is None:
        order = range(n)
    else:
        if recurrent:
            raise ConfigError("custom step order is only meaningful for the stateless framework")
        if sorted(order) != list(range(n)):
            raise ConfigError("order must be a permutation of all timesteps")
    sr_raw = [None] * n
    prev = None
    for t in order:
        frames, tokens = _gather_frames(seq, net, t, masked)
        hiddens = [None] * net.plan.window
        if recurrent:
            own = None if "H[t-1]" in masked else prev
            hid, tok = _hidden_or_zero(own, frames[0], net.plan.filters)
            hiddens[net.plan.hidden_slots.index(1)] = hid
            tokens = tokens + [tok]
        sr, h = net.forward(frames, hiddens)
        sr_raw[t] = sr
        if recurrent:
            prev = (h, f"Hg[{t}]")
            trace.add("generator", t, tokens, (f"SRg[{t}]", f"Hg[{t}]"))
        else:
            trace.add("generator", t, tokens, (f"SRg[{t}]",))
    return sr_raw


def _bicubic_base(frame, scale):
    return bicubic_upsample(frame.detach(), scale)


def run_model(model, seq, masks=(), order=None):
    """Full inference over one sequence; returns core-aligned ``RunResult``."""
    config = model.config
    trace = ScheduleTrace()
    mask_table = _normalize_masks(config, masks, tuple(sorted(model.nets)))
    core = seq.core_indices

    if config.framework in ("ivsr", "rvsr", "hvsr"):
        sr_raw = run_baseline(model, seq, trace, mask_table["generator"], order=order)
        sr = []
        for t in core:
            base = _bicubic_base(seq.frames[t], config.scale)
            out = combine(base, sr_raw[t])
            trace.add("combine", t, (f"SRg[{t}]", f"I[{t}]"), (f"SR[{t}]",))
            sr.append(out)
        return RunResult(sr, None, None, trace, core)

    if order is not None:
        raise ConfigError("custom step order is only meaningful for the stateless framework")
    pre_sr, pre_h = run_precursor(model, seq, trace, mask_table.get("precursor", frozenset()))
    suc_sr, _ = run_successor(model, seq, pre_h, trace, mask_table["successor"])

    base_kind = config.resolved_residual_base()
    sr, sr_p_core, sr_s_core = [], [], []
    for t in core:
        if base_kind == "precursor":
            base, base_tok = pre_sr[t], f"SRp[{t}]"
        else:
            base, base_tok = _bicubic_base(seq.frames[t], config.scale), f"I[{t}]"
        out = combine(base, suc_sr[t])
        trace.add("combine", t, (base_tok, f"SRs[{t}]"), (f"SR[{t}]",))
        sr.append(out)
        sr_p_core.append(pre_sr[t])
        sr_s_core.append(suc_sr[t])
    has_pre = model.nets.get("precursor") is not None
    return RunResult(sr, sr_p_core if has_pre else None, sr_s_core, trace, core)


def ablate_input(model, seq, masks):
    """Inference with named inputs zeroed; rejects never-consumed names."""
    return run_model(model, seq, masks=masks)
