"""Binary checkpoint format.

Layout (little-endian)::

    b"DCEC"  u32 version  u32 count
    count x { u32 name_len, name (UTF-8), u32 rank, rank x u64 extent,
              prod(extents) x float32 }
    u32 crc32 of every preceding byte

Scalars that must survive bit-exactly (architecture, optimizer
hyper-parameters, step counter) are stored as float64 values reinterpreted
as pairs of 32-bit words in tensors whose names end in ``:f64``.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autoencoder import AdamaxState, CaeArchitecture, CaeModel
from .clustering import ClusterHead

MAGIC = b"DCEC"
VERSION = 1


class CheckpointError(Exception):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointChecksumError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    model: CaeModel
    head: ClusterHead | None = None
    optimizer: AdamaxState | None = None


def _f64(values) -> np.ndarray:
    return np.asarray(values, dtype="<f8").view("<f4")


def _unf64(words: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(words, dtype="<f4").view("<f8")


def _arch_vector(arch: CaeArchitecture) -> list[float]:
    v = [arch.input_size, arch.channels, arch.embed_dim, arch.elu_alpha, len(arch.conv_specs)]
    for spec in arch.conv_specs:
        v.extend(spec)
    return v


def _arch_from_vector(v: np.ndarray) -> CaeArchitecture:
    n_layers = int(v[4])
    specs = tuple(tuple(int(x) for x in v[5 + 3 * i : 8 + 3 * i]) for i in range(n_layers))
    return CaeArchitecture(int(v[0]), int(v[1]), specs, int(v[2]), float(v[3]))


def save_checkpoint(path, model: CaeModel, head: ClusterHead | None = None, optimizer: AdamaxState | None = None) -> None:
    tensors: list[tuple[str, np.ndarray]] = [("arch:f64", _f64(_arch_vector(model.architecture)))]
    tensors += [(f"model/{name}", p) for name, p in model.params.items()]
    if head is not None:
        tensors.append(("head/centroids", head.centroids))
    if optimizer is not None:
        opt = optimizer
        tensors.append(("opt/hyper:f64", _f64([opt.lr, opt.beta1, opt.beta2, opt.eps, opt.step])))
        for name in opt.m:
            tensors.append((f"opt/m/{name}", opt.m[name]))
            tensors.append((f"opt/u/{name}", opt.u[name]))

    buf = bytearray(MAGIC)
    buf += struct.pack("<II", VERSION, len(tensors))
    for name, arr in tensors:
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        buf += struct.pack("<I", len(raw)) + raw
        buf += struct.pack("<I", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        buf += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    buf += struct.pack("<I", zlib.crc32(buf))
    Path(path).write_bytes(bytes(buf))


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointTruncatedError(f"checkpoint truncated at byte {len(self.data)}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) or data[: len(MAGIC)] != MAGIC:
        raise CheckpointFormatError(f"{path}: not a checkpoint (bad magic)")
    r = _Reader(data)
    r.take(len(MAGIC))
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: unsupported format version {version}")
    (count,) = r.unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = r.unpack("<I")
        try:
            name = r.take(name_len).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointFormatError(f"{path}: tensor name is not UTF-8") from exc
        (rank,) = r.unpack("<I")
        shape = r.unpack(f"<{rank}Q")
        size = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
    body_end = r.pos
    (crc,) = r.unpack("<I")
    if r.pos != len(data):
        raise CheckpointFormatError(f"{path}: {len(data) - r.pos} trailing bytes")
    if zlib.crc32(data[:body_end]) != crc:
        raise CheckpointChecksumError(f"{path}: CRC32 mismatch")

    if "arch:f64" not in tensors:
        raise CheckpointFormatError(f"{path}: missing architecture record")
    arch = _arch_from_vector(_unf64(tensors["arch:f64"]))
    params = {n[len("model/") :]: t for n, t in tensors.items() if n.startswith("model/")}
    if set(params) != set(arch.param_shapes()):
        raise CheckpointFormatError(f"{path}: parameter set does not match the architecture")
    for name, shape in arch.param_shapes().items():
        if params[name].shape != shape:
            raise CheckpointFormatError(f"{path}: {name} has shape {params[name].shape}, expected {shape}")
    head = ClusterHead(tensors["head/centroids"]) if "head/centroids" in tensors else None
    optimizer = None
    if "opt/hyper:f64" in tensors:
        lr, b1, b2, eps, step = _unf64(tensors["opt/hyper:f64"])
        optimizer = AdamaxState(float(lr), float(b1), float(b2), float(eps), int(step))
        for n, t in tensors.items():
            if n.startswith("opt/m/"):
                optimizer.m[n[len("opt/m/") :]] = t
            elif n.startswith("opt/u/"):
                optimizer.u[n[len("opt/u/") :]] = t
    return Checkpoint(CaeModel(arch, params), head, optimizer)
