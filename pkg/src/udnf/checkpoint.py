"""Binary checkpoints: model parameters, both Adam states, config and rng.

Layout (all little-endian)::

    b"UDNF"  u32 version  u32 header_len  header (UTF-8 JSON, sorted keys)
    u32 n_arrays
    per array: u16 name_len, name, u8 rank, u32 dims[rank], float32 data

Saving a loaded checkpoint reproduces the file byte for byte.
"""

from __future__ import annotations

import io
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np
import torch

from .trainer import TrainConfig, TrainState, init_state

MAGIC = b"UDNF"
VERSION = 1
_ADAM_KEYS = ("exp_avg", "exp_avg_sq", "step")


class CheckpointError(RuntimeError):
    pass


def _named_arrays(state: TrainState) -> list[tuple[str, np.ndarray]]:
    out = []
    m = state.model
    groups = (("field", m.field, state.opt_field), ("pose", m.posenet, state.opt_pose))
    for prefix, module, _ in groups:
        for name, p in module.named_parameters():
            out.append((f"{prefix}/{name}", p.detach().cpu().numpy()))
    for prefix, module, opt in groups:
        for name, p in module.named_parameters():
            st = opt.state.get(p)
            if not st:
                continue
            for k in _ADAM_KEYS:
                out.append((f"adam_{prefix}/{name}/{k}", torch.as_tensor(st[k]).detach().cpu().numpy()))
    return out


def _header(state: TrainState) -> dict:
    return {
        "config": state.config.to_dict(),
        "focal": state.model.intrinsics.focal,
        "iteration": state.iteration,
        "rng_state": state.generator.get_state().numpy().tobytes().hex(),
        "history": state.history,
    }


def encode(state: TrainState) -> bytes:
    buf = io.BytesIO()
    header = json.dumps(_header(state), sort_keys=True, separators=(",", ":")).encode()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(header)))
    buf.write(header)
    arrays = _named_arrays(state)
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays:
        nb = name.encode()
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def save_checkpoint(path, state: TrainState) -> None:
    """Write atomically: a temp file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = encode(state)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read(f, fmt):
    size = struct.calcsize(fmt)
    raw = f.read(size)
    if len(raw) != size:
        raise CheckpointError("truncated checkpoint")
    return struct.unpack(fmt, raw)


def decode(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    f = io.BytesIO(data)
    if f.read(4) != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version, hlen = _read(f, "<II")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    header = json.loads(f.read(hlen).decode())
    (n,) = _read(f, "<I")
    arrays = {}
    for _ in range(n):
        (nl,) = _read(f, "<H")
        name = f.read(nl).decode()
        (rank,) = _read(f, "<B")
        shape = _read(f, f"<{rank}I") if rank else ()
        count = int(np.prod(shape)) if rank else 1
        raw = f.read(4 * count)
        if len(raw) != 4 * count:
            raise CheckpointError(f"truncated array {name}")
        arrays[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    if f.read(1):
        raise CheckpointError("trailing bytes after last array")
    return header, arrays


def load_checkpoint(path) -> TrainState:
    """Rebuild the full training state (model, optimizers, rng, history)."""
    header, arrays = decode(Path(path).read_bytes())
    cfg = TrainConfig.from_dict(header["config"])
    state = init_state(cfg, focal=header["focal"])
    m = state.model
    groups = (("field", m.field, state.opt_field), ("pose", m.posenet, state.opt_pose))
    with torch.no_grad():
        for prefix, module, opt in groups:
            for name, p in module.named_parameters():
                key = f"{prefix}/{name}"
                if key not in arrays:
                    raise CheckpointError(f"missing parameter {key}")
                arr = arrays[key]
                if tuple(arr.shape) != tuple(p.shape):
                    raise CheckpointError(f"{key}: shape {arr.shape} != {tuple(p.shape)}")
                p.copy_(torch.from_numpy(arr))
                akey = f"adam_{prefix}/{name}"
                if f"{akey}/step" in arrays:
                    opt.state[p] = {
                        "step": torch.tensor(float(arrays[f"{akey}/step"]), dtype=torch.float32),
                        "exp_avg": torch.from_numpy(arrays[f"{akey}/exp_avg"]).clone(),
                        "exp_avg_sq": torch.from_numpy(arrays[f"{akey}/exp_avg_sq"]).clone(),
                    }
    state.iteration = int(header["iteration"])
    rng = np.frombuffer(bytes.fromhex(header["rng_state"]), dtype=np.uint8).copy()
    state.generator.set_state(torch.from_numpy(rng))
    state.history = list(header["history"])
    return state
