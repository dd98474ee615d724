"""Versioned single-file checkpoints.

A checkpoint is an uncompressed NumPy ``.npz`` archive of named arrays plus a
``__meta__`` entry holding UTF-8 JSON::

    {"format": "flexissl-checkpoint", "version": 1, "kind": "train" | "backbone",
     "encoder_config": {...}, "decoder_config": {...}, "config": {...},
     "step": int, "steps_per_epoch": int, "numpy_rng": {...}, "param_groups": [...]}

Array names are ``<section>/<state_dict key>`` with sections ``student``,
``teacher``, ``decoder``, ``mae_encoder``, ``centers`` and ``optim/<i>/<field>``
for the AdamW moments of the i-th optimized parameter. Backbone-only files
carry only ``teacher/backbone.*`` arrays. Downstream loaders always read the
teacher weights.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
import zipfile

import numpy as np
import torch

from .backbone import FlexiViT, encoder_config
from .errors import CheckpointVersionError, CorruptCheckpointError

FORMAT = "flexissl-checkpoint"
VERSION = 1


def _meta_array(meta: dict) -> np.ndarray:
    return np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)


def _write(path: str, arrays: dict, meta: dict) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    os.close(fd)
    try:
        with open(tmp, "wb") as fh:
            np.savez(fh, __meta__=_meta_array(meta), **arrays)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)


def read_archive(path: str) -> tuple:
    """Return (meta, arrays) or raise a checkpoint error."""
    try:
        with np.load(path, allow_pickle=False) as npz:
            arrays = {k: npz[k] for k in npz.files}
        meta = json.loads(arrays.pop("__meta__").tobytes().decode("utf-8"))
    except FileNotFoundError:
        raise
    except (zipfile.BadZipFile, EOFError, ValueError, OSError, KeyError, UnicodeDecodeError) as exc:
        raise CorruptCheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    if meta.get("format") != FORMAT:
        raise CorruptCheckpointError(f"{path} is not a {FORMAT} file")
    if meta.get("version") != VERSION:
        raise CheckpointVersionError(f"checkpoint version {meta.get('version')} unsupported (expected {VERSION})")
    return meta, arrays


def _module_arrays(prefix: str, module: torch.nn.Module) -> dict:
    return {f"{prefix}/{k}": v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def _load_module(prefix: str, module: torch.nn.Module, arrays: dict) -> None:
    sd = {k[len(prefix) + 1 :]: torch.from_numpy(v.copy()) for k, v in arrays.items() if k.startswith(prefix + "/")}
    module.load_state_dict(sd, strict=True)


def _torch_state_array(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().numpy()


def save_state(state, path: str) -> None:
    arrays = {}
    arrays.update(_module_arrays("student", state.student))
    arrays.update(_module_arrays("teacher", state.teacher))
    arrays.update(_module_arrays("decoder", state.decoder))
    if state.mae_encoder is not None:
        arrays.update(_module_arrays("mae_encoder", state.mae_encoder))
    arrays["centers/dino"] = state.dino_center.center.numpy()
    arrays["centers/ibot"] = state.ibot_center.center.numpy()
    osd = state.optimizer.state_dict()
    for idx, fields in osd["state"].items():
        for name, value in fields.items():
            arrays[f"optim/{idx}/{name}"] = _torch_state_array(value)
    groups = [{k: v for k, v in g.items()} for g in osd["param_groups"]]
    arrays["rng/torch"] = torch.get_rng_state().numpy()
    meta = {
        "format": FORMAT,
        "version": VERSION,
        "kind": "train",
        "encoder_config": state.student.backbone.config.to_dict(),
        "decoder_config": state.decoder.config.to_dict(),
        "config": state.config.to_dict(),
        "step": state.step,
        "steps_per_epoch": state.steps_per_epoch,
        "numpy_rng": state.rng.bit_generator.state,
        "param_groups": groups,
    }
    _write(path, arrays, meta)


def load_state(path: str):
    from .config import config_from_dict
    from .pretrain import init_state

    meta, arrays = read_archive(path)
    if meta.get("kind") != "train":
        raise CorruptCheckpointError(f"{path} holds no training state")
    cfg = config_from_dict(meta["config"])
    state = init_state(cfg, meta["steps_per_epoch"])
    _load_module("student", state.student, arrays)
    _load_module("teacher", state.teacher, arrays)
    _load_module("decoder", state.decoder, arrays)
    if state.mae_encoder is not None:
        _load_module("mae_encoder", state.mae_encoder, arrays)
    state.dino_center.center.copy_(torch.from_numpy(arrays["centers/dino"]))
    state.ibot_center.center.copy_(torch.from_numpy(arrays["centers/ibot"]))
    opt_state = {}
    for key, value in arrays.items():
        if key.startswith("optim/"):
            _, idx, name = key.split("/")
            opt_state.setdefault(int(idx), {})[name] = torch.from_numpy(value.copy())
    state.optimizer.load_state_dict({"state": opt_state, "param_groups": meta["param_groups"]})
    torch.set_rng_state(torch.from_numpy(arrays["rng/torch"].copy()))
    state.rng.bit_generator.state = meta["numpy_rng"]
    state.step = int(meta["step"])
    return state


def save_backbone(model: FlexiViT, path: str, extra: dict | None = None) -> None:
    """Write a backbone-only checkpoint (stored under the ``teacher`` section)."""
    arrays = {f"teacher/backbone.{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    meta = {"format": FORMAT, "version": VERSION, "kind": "backbone", "encoder_config": model.config.to_dict()}
    meta.update(extra or {})
    _write(path, arrays, meta)


def load_teacher_backbone(path: str) -> FlexiViT:
    """Frozen teacher backbone for downstream use, from a training or backbone checkpoint."""
    meta, arrays = read_archive(path)
    model = FlexiViT(encoder_config(meta["encoder_config"]))
    prefix = "teacher/backbone."
    sd = {k[len(prefix) :]: torch.from_numpy(v.copy()) for k, v in arrays.items() if k.startswith(prefix)}
    if not sd:
        raise CorruptCheckpointError(f"{path} has no teacher backbone weights")
    model.load_state_dict(sd, strict=True)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    model.loaded_from = "teacher"
    return model


def file_hash(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:16]


def weights_hash(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for k, v in sorted(module.state_dict().items()):
        h.update(k.encode())
        h.update(v.detach().cpu().numpy().tobytes())
    return h.hexdigest()
