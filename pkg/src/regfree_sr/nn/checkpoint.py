"""Versioned binary checkpoint container.

Layout (all integers little-endian)::

    magic        8 bytes  b"RFSRCKPT"
    version      uint32
    header_len   uint32
    header       header_len bytes of UTF-8 JSON (configs, training counters)
    n_tensors    uint32
    n_tensors times:
        name_len uint16, name (UTF-8)
        ndim     uint8,  dims (uint32 each)
        values   float32 little-endian, C order

Tensor names are ``<group>/<layer name>``, e.g. ``generator/params/head/w``.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .networks import (
    Discriminator,
    DiscriminatorConfig,
    FeatureConfig,
    Generator,
    GeneratorConfig,
)

MAGIC = b"RFSRCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def write_container(path, header: dict, tensors: dict) -> None:
    path = os.fspath(path)
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(head)))
        fh.write(head)
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype="<f4")
            bname = name.encode("utf-8")
            fh.write(struct.pack("<H", len(bname)))
            fh.write(bname)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())
    os.replace(tmp, path)


def read_container(path):
    path = os.fspath(path)
    with open(path, "rb") as fh:
        blob = fh.read()
    try:
        return _parse(blob, path)
    except (struct.error, ValueError, UnicodeDecodeError) as e:
        if isinstance(e, CheckpointError):
            raise
        raise CheckpointError(f"{path}: truncated or corrupt ({e})") from None


def _parse(blob, path):
    if blob[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<II", blob, 8)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    pos = 16
    header = json.loads(blob[pos : pos + hlen].decode("utf-8"))
    pos += hlen
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<B", blob, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, pos)
        pos += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(blob, dtype="<f4", count=n, offset=pos).reshape(shape).astype(np.float32)
        pos += 4 * n
    if pos != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - pos} trailing bytes")
    return header, tensors


@dataclass
class NetworkParams:
    """Everything needed to rebuild the networks, plus optional training state."""

    generator: Generator
    discriminator: Optional[Discriminator] = None
    features: FeatureConfig = field(default_factory=FeatureConfig)
    state: dict = field(default_factory=dict)  # JSON-able counters
    extra: dict = field(default_factory=dict)  # extra named tensors (optimizer moments)


def _pack(net, group, out):
    for k, v in net.params.items():
        out[f"{group}/params/{k}"] = v
    for k, v in net.buffers.items():
        out[f"{group}/buffers/{k}"] = v


def _unpack(net, group, tensors, dtype):
    for kind, store in (("params", net.params), ("buffers", net.buffers)):
        for k in store:
            name = f"{group}/{kind}/{k}"
            if name not in tensors:
                raise CheckpointError(f"missing tensor {name}")
            if tensors[name].shape != store[k].shape:
                raise CheckpointError(f"{name}: shape {tensors[name].shape} does not match config {store[k].shape}")
            store[k] = tensors[name].astype(dtype)
    known = {f"{group}/params/{k}" for k in net.params} | {f"{group}/buffers/{k}" for k in net.buffers}
    stray = [n for n in tensors if n.startswith(group + "/") and n not in known]
    if stray:
        raise CheckpointError(f"unexpected tensors for {group}: {stray[:3]}")


def save_checkpoint(path, nets: NetworkParams) -> None:
    header = {
        "format_version": FORMAT_VERSION,
        "generator": asdict(nets.generator.config),
        "discriminator": None if nets.discriminator is None else asdict(nets.discriminator.config),
        "features": asdict(nets.features),
        "state": nets.state,
    }
    tensors = {}
    _pack(nets.generator, "generator", tensors)
    if nets.discriminator is not None:
        _pack(nets.discriminator, "discriminator", tensors)
    for k, v in nets.extra.items():
        tensors[f"extra/{k}"] = v
    write_container(path, header, tensors)


def load_checkpoint(path, dtype=np.float32) -> NetworkParams:
    header, tensors = read_container(path)
    gen = Generator(GeneratorConfig(**header["generator"]), dtype=dtype)
    _unpack(gen, "generator", tensors, dtype)
    disc = None
    if header.get("discriminator") is not None:
        disc = Discriminator(DiscriminatorConfig(**header["discriminator"]), dtype=dtype)
        _unpack(disc, "discriminator", tensors, dtype)
    extra = {k[len("extra/") :]: v for k, v in tensors.items() if k.startswith("extra/")}
    return NetworkParams(
        generator=gen,
        discriminator=disc,
        features=FeatureConfig(**header["features"]),
        state=header.get("state", {}),
        extra=extra,
    )
