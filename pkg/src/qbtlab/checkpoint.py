"""Self-describing checkpoint container.

Layout::

    b"QBTCKPT1"                 8-byte magic
    uint64 little-endian        header length in bytes
    header                      UTF-8 JSON: model_config, meta, tensors[]
    payload                     float32 little-endian tensors, back to back

Each ``tensors`` entry records ``name``, ``shape``, ``offset`` and ``nbytes``
relative to the payload start. Tied heads are not stored separately: they
are the embedding tensors.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .model import ModelConfig, Seq2SeqTransformer, build_model
from .training import OptimizerState

MAGIC = b"QBTCKPT1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model: Seq2SeqTransformer, meta: dict | None = None, optimizer: OptimizerState | None = None) -> None:
    tensors = {f"param/{n}": p.detach() for n, p in model.named_parameters()}
    meta = dict(meta or {})
    if optimizer is not None:
        tensors.update({f"optim/{k}": v for k, v in optimizer.state_tensors().items()})
        meta["optimizer"] = {
            "lr": optimizer.lr, "beta1": optimizer.beta1, "beta2": optimizer.beta2, "eps": optimizer.eps,
            "step": optimizer.step, "param_steps": optimizer.param_steps,
        }
    index, chunks, offset = [], [], 0
    for name, t in tensors.items():
        arr = np.ascontiguousarray(t.cpu().numpy(), dtype="<f4")
        index.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": arr.nbytes})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({"model_config": model.cfg.to_dict(), "meta": meta, "tensors": index}, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for c in chunks:
            f.write(c)
    tmp.replace(path)


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Raw header and name -> array map, without building a model."""
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a qbtlab checkpoint")
    (hlen,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16:16 + hlen])
    base = 16 + hlen
    arrays = {}
    for entry in header["tensors"]:
        start = base + entry["offset"]
        buf = data[start:start + entry["nbytes"]]
        if len(buf) != entry["nbytes"]:
            raise CheckpointError(f"{path}: truncated payload for {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(buf, dtype="<f4").reshape(entry["shape"])
    return header, arrays


def load_checkpoint(path, dtype: torch.dtype = torch.float32) -> tuple[Seq2SeqTransformer, dict, OptimizerState | None]:
    """Rebuild the model from the stored config and check every tensor shape against it."""
    header, arrays = read_checkpoint(path)
    cfg = ModelConfig(**header["model_config"])
    model = build_model(cfg, dtype=dtype)
    expected = dict(model.named_parameters())
    stored = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
    if set(stored) != set(expected):
        missing, extra = set(expected) - set(stored), set(stored) - set(expected)
        raise CheckpointError(f"{path}: parameter names differ (missing {sorted(missing)}, unexpected {sorted(extra)})")
    with torch.no_grad():
        for name, p in expected.items():
            if tuple(stored[name].shape) != tuple(p.shape):
                raise CheckpointError(f"{path}: {name} has shape {stored[name].shape}, config implies {tuple(p.shape)}")
            p.copy_(torch.from_numpy(stored[name].copy()))
    meta = header["meta"]
    opt = None
    if "optimizer" in meta:
        o = meta["optimizer"]
        opt = OptimizerState(lr=o["lr"], beta1=o["beta1"], beta2=o["beta2"], eps=o["eps"], step=o["step"],
                             param_steps={k: int(v) for k, v in o["param_steps"].items()})
        for key, arr in arrays.items():
            if key.startswith("optim/exp_avg/"):
                opt.exp_avg[key[len("optim/exp_avg/"):]] = torch.from_numpy(arr.copy()).to(dtype)
            elif key.startswith("optim/exp_avg_sq/"):
                opt.exp_avg_sq[key[len("optim/exp_avg_sq/"):]] = torch.from_numpy(arr.copy()).to(dtype)
    return model, meta, opt
