"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"RFNT" | u32 version | u32 n | n bytes canonical JSON header
            | u32 m | m bytes JSON manifest [[name, shape, offset], ...]
            | raw float32 payload

The header carries the training config, step, k_t and optimizer scalars; the
payload holds every parameter and Adam moment buffer named in the manifest.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .backend import AdamState
from .models import build_discriminator, build_generator
from .training import TrainConfig, TrainState

MAGIC = b"RFNT"
VERSION = 1
_U32 = struct.Struct("<I")


class CheckpointError(ValueError):
    pass


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _named_buffers(state: TrainState) -> list[tuple[str, np.ndarray]]:
    out = []
    for prefix, model in (("D", state.discriminator), ("G", state.generator)):
        out += [(f"{prefix}/{k}", p.data) for k, p in model.params.items()]
    for prefix, opt in (("adam_d", state.adam_d), ("adam_g", state.adam_g)):
        out += [(f"{prefix}.m/{k}", v) for k, v in opt.m.items()]
        out += [(f"{prefix}.s/{k}", v) for k, v in opt.s.items()]
    return out


def _adam_header(opt: AdamState) -> dict:
    return {"lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2, "epsilon": opt.epsilon, "t": opt.t}


def save_checkpoint(state: TrainState, path) -> Path:
    path = Path(path)
    header = {
        "config": state.config.to_dict(),
        "step": state.step,
        "k_t": state.k_t,
        "seed": state.seed,
        "adam_d": _adam_header(state.adam_d),
        "adam_g": _adam_header(state.adam_g),
    }
    manifest, chunks, offset = [], [], 0
    for name, arr in _named_buffers(state):
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        manifest.append([name, list(arr.shape), offset])
        chunks.append(raw)
        offset += len(raw)
    header["payload_bytes"] = offset

    hbytes, mbytes = _canonical(header), _canonical(manifest)
    blob = b"".join([MAGIC, _U32.pack(VERSION), _U32.pack(len(hbytes)), hbytes,
                     _U32.pack(len(mbytes)), mbytes] + chunks)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


class _Reader:
    def __init__(self, blob: bytes):
        self.blob, self.pos = blob, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError(f"checkpoint truncated while reading {what}")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return _U32.unpack(self.take(4, what))[0]

    def json(self, what: str):
        raw = self.take(self.u32(what + " length"), what)
        try:
            return json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"corrupt {what}: {exc}") from None


def read_header(path) -> dict:
    """Header JSON only; cheap way to inspect a checkpoint's config."""
    with open(path, "rb") as fh:
        blob = fh.read()
    r = _Reader(blob)
    _check_preamble(r)
    return r.json("header")


def _check_preamble(r: _Reader) -> None:
    if r.take(4, "magic") != MAGIC:
        raise CheckpointError("not a refinet checkpoint (bad magic)")
    version = r.u32("version")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")


def load_checkpoint(path) -> TrainState:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    r = _Reader(blob)
    _check_preamble(r)
    header = r.json("header")
    manifest = r.json("manifest")
    payload = blob[r.pos:]
    expected = header.get("payload_bytes")
    if len(payload) != expected:
        what = "truncated" if isinstance(expected, int) and len(payload) < expected else "corrupt"
        raise CheckpointError(f"{what} checkpoint {path}: payload is {len(payload)} bytes, header says {expected}")

    try:
        cfg = TrainConfig.from_dict(header["config"])
        adam_d, adam_g = AdamState(**header["adam_d"]), AdamState(**header["adam_g"])
        step, k_t = int(header["step"]), float(header["k_t"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"invalid checkpoint header: {exc}") from None

    buffers: dict[str, np.ndarray] = {}
    for name, shape, offset in manifest:
        n = int(np.prod(shape, dtype=np.int64)) * 4
        if offset < 0 or offset + n > len(payload):
            raise CheckpointError(f"buffer {name} lies outside the payload")
        buffers[name] = np.frombuffer(payload, dtype="<f4", count=n // 4, offset=offset).reshape(shape).astype(np.float32)

    disc = build_discriminator(cfg.discriminator_config(), seed=[cfg.seed, 1])
    gen = build_generator(cfg.generator_config(), seed=[cfg.seed, 2])
    for prefix, model in (("D", disc), ("G", gen)):
        for k, p in model.params.items():
            arr = buffers.pop(f"{prefix}/{k}", None)
            if arr is None:
                raise CheckpointError(f"checkpoint is missing parameter {prefix}/{k}")
            if arr.shape != p.shape:
                raise CheckpointError(f"shape mismatch for {prefix}/{k}: file {arr.shape}, model {p.shape}")
            p.data = arr
    for prefix, opt, model in (("adam_d", adam_d, disc), ("adam_g", adam_g, gen)):
        for k, p in model.params.items():
            m, s = buffers.pop(f"{prefix}.m/{k}", None), buffers.pop(f"{prefix}.s/{k}", None)
            if (m is None) != (s is None) or (m is None and opt.t > 0):
                raise CheckpointError(f"checkpoint is missing optimizer buffers for {prefix}/{k}")
            if m is not None:
                if m.shape != p.shape or s.shape != p.shape:
                    raise CheckpointError(f"optimizer buffer shape mismatch for {prefix}/{k}")
                opt.m[k], opt.s[k] = m, s
    if buffers:
        raise CheckpointError(f"checkpoint has unexpected buffers: {sorted(buffers)[:5]}")

    return TrainState(cfg, disc, gen, adam_d, adam_g, step=step, k_t=k_t)
