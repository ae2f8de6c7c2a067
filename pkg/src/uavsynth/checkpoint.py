"""Versioned binary checkpoint container for a :class:`~uavsynth.trainer.TrainState`.

Layout (all integers little-endian)::

    magic      8 bytes  b"UAVSCKPT"
    version    u32
    count      u32      number of sections
    table      count entries:
                 name_len u16, name (utf-8), kind u8 (0 array, 1 json),
                 ndim u8, shape u32 * ndim, offset u64, nbytes u64
    payload    section bytes; arrays are float32 '<f4' in C order
    crc32      u32 over every preceding byte

Sections: ``planes/<scale>/<group>/<pair>`` and ``decoder/<layer>.<w|b>``
arrays, their Adam moments as ``m/<name>`` and ``v/<name>``, and one ``meta``
JSON section (mode, plane layout, decoder width, step, seed).
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from pathlib import Path

import numpy as np

from .decoder import DecoderParams
from .plane_field import PlaneGrid, PlaneStack, mode_groups
from .trainer import TrainState

MAGIC = b"UAVSCKPT"
VERSION = 1
KIND_ARRAY = 0
KIND_JSON = 1


class CheckpointError(ValueError):
    pass


def _sections(state: TrainState):
    params = state.parameters()
    for name, arr in params.items():
        yield name, arr
    for name in params:
        yield f"m/{name}", state.m[name]
    for name in params:
        yield f"v/{name}", state.v[name]


def encode_checkpoint(state: TrainState, extra: dict | None = None) -> bytes:
    """Serialise ``state``; ``extra`` is free-form JSON stored in the meta section."""
    meta = {"mode": state.mode, "D": state.stack.D,
            "base_resolution": list(state.stack.base_resolution),
            "scale_multipliers": list(state.stack.scale_multipliers),
            "hidden": state.decoder.hidden, "feature_size": state.decoder.feature_size,
            "step": int(state.step), "seed": int(state.seed), "extra": extra or {}}
    entries = [(name, KIND_ARRAY, np.ascontiguousarray(arr, dtype="<f4"))
               for name, arr in _sections(state)]
    entries.append(("meta", KIND_JSON, json.dumps(meta, sort_keys=True).encode()))
    table = bytearray()
    payloads = []
    offset = 0
    for name, kind, data in entries:
        raw = data.tobytes() if kind == KIND_ARRAY else data
        shape = data.shape if kind == KIND_ARRAY else ()
        nb = name.encode()
        table += struct.pack("<H", len(nb)) + nb + struct.pack("<BB", kind, len(shape))
        table += struct.pack(f"<{len(shape)}I", *shape)
        table += struct.pack("<QQ", offset, len(raw))
        payloads.append(raw)
        offset += len(raw)
    body = MAGIC + struct.pack("<II", VERSION, len(entries)) + bytes(table) + b"".join(payloads)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_checkpoint(buf: bytes, return_extra: bool = False):
    if len(buf) < len(MAGIC) + 12 or buf[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic or too short)")
    version, count = struct.unpack_from("<II", buf, len(MAGIC))
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version} unsupported (expected {VERSION})")
    (crc,) = struct.unpack_from("<I", buf, len(buf) - 4)
    if zlib.crc32(buf[:-4]) != crc:
        raise CheckpointError("checkpoint corrupt or truncated (checksum mismatch)")
    pos = len(MAGIC) + 8
    table = []
    try:
        for _ in range(count):
            (nl,) = struct.unpack_from("<H", buf, pos)
            name = buf[pos + 2:pos + 2 + nl].decode()
            pos += 2 + nl
            kind, ndim = struct.unpack_from("<BB", buf, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}I", buf, pos)
            pos += 4 * ndim
            off, nbytes = struct.unpack_from("<QQ", buf, pos)
            pos += 16
            table.append((name, kind, shape, off, nbytes))
    except struct.error as e:
        raise CheckpointError(f"malformed section table ({e})") from None
    data_start = pos
    arrays, meta = {}, None
    for name, kind, shape, off, nbytes in table:
        start = data_start + off
        if start + nbytes > len(buf) - 4:
            raise CheckpointError(f"section {name!r} runs past the end of the file")
        raw = buf[start:start + nbytes]
        if kind == KIND_JSON:
            meta = json.loads(raw.decode())
        else:
            arrays[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
    if meta is None:
        raise CheckpointError("missing 'meta' section")
    state = _build_state(meta, arrays)
    return (state, meta.get("extra", {})) if return_extra else state


def _build_state(meta: dict, arrays: dict) -> TrainState:
    mode = meta["mode"]
    D = int(meta["D"])
    scales = []
    try:
        for k in range(len(meta["scale_multipliers"])):
            level = {}
            for group, pairs in mode_groups(mode).items():
                level[group] = {p: PlaneGrid(p, arrays[f"planes/{k}/{group}/{p}"]) for p in pairs}
            scales.append(level)
        stack = PlaneStack(mode, D, tuple(meta["base_resolution"]),
                           tuple(meta["scale_multipliers"]), scales)
        dec = DecoderParams(mode, int(meta["feature_size"]), int(meta["hidden"]),
                            {n[len("decoder/"):]: a for n, a in arrays.items()
                             if n.startswith("decoder/")})
        names = list({**stack.parameters(), **dec.parameters()})
        m = {n: arrays[f"m/{n}"] for n in names}
        v = {n: arrays[f"v/{n}"] for n in names}
    except KeyError as e:
        raise CheckpointError(f"missing section {e}") from None
    for n, p in {**stack.parameters(), **dec.parameters()}.items():
        if m[n].shape != p.shape or v[n].shape != p.shape:
            raise CheckpointError(f"moment shape mismatch for {n}")
    return TrainState(stack, dec, m, v, int(meta["step"]), int(meta["seed"]))


def save_checkpoint(state: TrainState, path, extra: dict | None = None) -> Path:
    """Write atomically (temp file in the same directory, then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = encode_checkpoint(state, extra)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_checkpoint(path, return_extra: bool = False):
    """The stored :class:`TrainState` (and the ``extra`` dict when requested)."""
    return decode_checkpoint(Path(path).read_bytes(), return_extra)
