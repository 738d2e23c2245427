"""Model checkpoints: a readable text header plus a raw tensor payload.

Layout::

    PFVSR-CHECKPOINT v1
    config.framework=govsr
    config.blocks_precursor=1
    ...
    tensor.precursor.fusion.0.w
    tensor.precursor.fusion.0.b
    ...
    ---
    <one binary tensor dump per manifest line, same order>

The header is utf-8 text up to the first "---" line. Parameters are always
stored as float64 (a float32 model upcasts exactly) and cast back to the
dtype requested at load time.
"""
from __future__ import annotations

from dataclasses import fields as dataclass_fields

import numpy as np

from .generator import Model, ModelConfig
from .tensor import tensor_from_bytes, tensor_to_bytes

_HEADER = "PFVSR-CHECKPOINT v1"
_SEPARATOR = b"\n---\n"

_STR_FIELDS = {"framework", "residual_base"}
_FLOAT_FIELDS = {"leaky_slope"}


class CheckpointError(ValueError):
    pass


def _config_lines(config):
    out = []
    for f in dataclass_fields(config):
        out.append(f"config.{f.name}={getattr(config, f.name)}")
    return out


def _parse_config(pairs):
    names = {f.name for f in dataclass_fields(ModelConfig)}
    if set(pairs) != names:
        missing = sorted(names - set(pairs))
        extra = sorted(set(pairs) - names)
        raise CheckpointError(f"config fields mismatch: missing={missing} unknown={extra}")
    kwargs = {}
    for key, raw in pairs.items():
        if key in _STR_FIELDS:
            kwargs[key] = raw
        elif key in _FLOAT_FIELDS:
            kwargs[key] = float(raw)
        else:
            kwargs[key] = int(raw)
    return ModelConfig(**kwargs)


def save_model(model, path):
    names = [name for name, _ in model.named_parameters()]
    lines = [_HEADER] + _config_lines(model.config) + [f"tensor.{n}" for n in names]
    header = "\n".join(lines).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(_SEPARATOR)
        for _, t in model.named_parameters():
            fh.write(tensor_to_bytes(t.data.astype(np.float64)))


def load_model(path, dtype=np.float64):
    with open(path, "rb") as fh:
        blob = fh.read()
    cut = blob.find(_SEPARATOR)
    if cut < 0:
        raise CheckpointError(f"{path}: no header separator found")
    try:
        lines = blob[:cut].decode("utf-8").split("\n")
    except UnicodeDecodeError as exc:
        raise CheckpointError(f"{path}: header is not utf-8") from exc
    if not lines or lines[0] != _HEADER:
        raise CheckpointError(f"{path}: bad signature line {lines[:1]!r}")

    pairs, manifest = {}, []
    for ln in lines[1:]:
        if ln.startswith("config."):
            key, _, val = ln[len("config."):].partition("=")
            pairs[key] = val
        elif ln.startswith("tensor."):
            manifest.append(ln[len("tensor."):])
        elif ln.strip():
            raise CheckpointError(f"{path}: unrecognized header line {ln!r}")
    config = _parse_config(pairs)

    model = Model(config, dtype=dtype, init=False)
    params = dict(model.named_parameters())
    if list(params) != manifest:
        raise CheckpointError(f"{path}: tensor manifest does not match the "
                              f"{config.name} layer plan")
    offset = cut + len(_SEPARATOR)
    for name in manifest:
        try:
            arr, offset = tensor_from_bytes(blob, offset)
        except ValueError as exc:
            raise CheckpointError(f"{path}: {name}: {exc}") from exc
        t = params[name]
        if arr.shape != t.data.shape:
            raise CheckpointError(f"{path}: {name} has shape {arr.shape}, "
                                  f"expected {t.data.shape}")
        t.data = arr.astype(model.dtype)
    if offset != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - offset} trailing bytes after payload")
    return model
