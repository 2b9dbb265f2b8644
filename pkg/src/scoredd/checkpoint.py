"""Score-network checkpoints.

Layout (little-endian)::

    b"SDDM" | u32 version=1 | u32 n | n bytes UTF-8 descriptor
    | u32 tensor count | repeated: u32 name length, UTF-8 name, tensor container

The descriptor is ``key=value`` lines: architecture, shapes, tap ids, the
Fourier embedding (size, scale, seed), dtype, preconditioning and SDE
parameters.  The embedding frequencies travel as the tensor ``embedding.freq``.
"""

from __future__ import annotations

import io
import os
import struct

from .formats import FormatError, TruncatedError, _read_exact, decode_tensor, encode_tensor
from .nets import ConvScoreNet, MlpScoreNet, TimeEmbedding
from .sde import SdeSpec

CHECKPOINT_MAGIC = b"SDDM"
CHECKPOINT_VERSION = 1


class CheckpointMagicError(FormatError):
    pass


class CheckpointVersionError(FormatError):
    pass


class CheckpointTruncatedError(TruncatedError):
    pass


class DescriptorMismatchError(FormatError):
    """Descriptor and stored tensors disagree (names, shapes or dtypes)."""


def net_descriptor(net) -> dict:
    d = dict(net.descriptor())
    d["taps"] = ",".join(str(k) for k in net.tap_ids)
    d["embedding.F"] = len(net.embedding.frequencies)
    d["embedding.scale"] = repr(net.embedding.scale)
    d["embedding.seed"] = net.embedding.seed
    d["seed"] = net.seed
    d["dtype"] = net.dtype.name
    d["data_var"] = repr(net.data_var)
    if net.sde is not None:
        s = net.sde
        d.update({"sde.kind": s.kind, "sde.sigma_min": repr(s.sigma_min), "sde.sigma_max": repr(s.sigma_max),
                  "sde.beta_min": repr(s.beta_min), "sde.beta_max": repr(s.beta_max),
                  "sde.steps": s.steps, "sde.epsilon": repr(s.epsilon)})
    return d


def _encode_descriptor(d: dict) -> bytes:
    return "".join(f"{k}={v}\n" for k, v in d.items()).encode("utf-8")


def _parse_descriptor(text: str) -> dict:
    out = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        if "=" not in line:
            raise DescriptorMismatchError(f"bad descriptor line {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def sde_from_descriptor(d: dict):
    if "sde.kind" not in d:
        return None
    return SdeSpec(kind=d["sde.kind"], sigma_min=float(d["sde.sigma_min"]), sigma_max=float(d["sde.sigma_max"]),
                   beta_min=float(d["sde.beta_min"]), beta_max=float(d["sde.beta_max"]),
                   steps=int(d["sde.steps"]), epsilon=float(d["sde.epsilon"]))


def encode_checkpoint(net) -> bytes:
    desc = _encode_descriptor(net_descriptor(net))
    tensors = [("embedding.freq", net.embedding.frequencies)] + list(net.params.items())
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(desc)))
    buf.write(desc)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(encode_tensor(arr))
    return buf.getvalue()


def save_checkpoint(net, path) -> None:
    data = encode_checkpoint(net)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def decode_checkpoint(f):
    magic = f.read(4)
    if magic != CHECKPOINT_MAGIC:
        if len(magic) < 4:
            raise CheckpointTruncatedError("truncated checkpoint header")
        raise CheckpointMagicError(f"bad checkpoint magic {magic!r}")
    try:
        (version,) = struct.unpack("<I", _read_exact(f, 4, "checkpoint version"))
        if version != CHECKPOINT_VERSION:
            raise CheckpointVersionError(f"checkpoint version {version}, expected {CHECKPOINT_VERSION}")
        (n,) = struct.unpack("<I", _read_exact(f, 4, "descriptor length"))
        desc = _parse_descriptor(_read_exact(f, n, "descriptor").decode("utf-8"))
        (count,) = struct.unpack("<I", _read_exact(f, 4, "tensor count"))
        tensors = {}
        for _ in range(count):
            (ln,) = struct.unpack("<I", _read_exact(f, 4, "tensor name length"))
            name = _read_exact(f, ln, "tensor name").decode("utf-8")
            tensors[name] = decode_tensor(f)
    except TruncatedError as exc:
        raise CheckpointTruncatedError(str(exc)) from None
    if f.read(1):
        raise FormatError("trailing bytes after checkpoint")
    return desc, tensors


def net_from_parts(desc: dict, tensors: dict):
    freq = tensors.get("embedding.freq")
    if freq is None or freq.ndim != 1 or len(freq) != int(desc.get("embedding.F", -1)):
        raise DescriptorMismatchError("embedding frequencies missing or inconsistent with descriptor")
    emb = TimeEmbedding(scale=float(desc["embedding.scale"]), seed=int(desc["embedding.seed"]), frequencies=freq)
    kw = dict(sde=sde_from_descriptor(desc), data_var=float(desc.get("data_var", 1.0)),
              dtype=desc.get("dtype", "float64"), seed=int(desc.get("seed", 0)), embedding=emb)
    arch = desc.get("arch")
    if arch == "mlp":
        net = MlpScoreNet(dim=int(desc["d"]), hidden=int(desc["hidden"]), **kw)
    elif arch == "conv":
        net = ConvScoreNet(height=int(desc["H"]), width=int(desc["W"]), channels=int(desc["C"]),
                           base=int(desc["channels"]), **kw)
    else:
        raise DescriptorMismatchError(f"unknown architecture {arch!r}")
    taps = desc.get("taps", "")
    if taps != ",".join(str(k) for k in net.tap_ids):
        raise DescriptorMismatchError(f"tap ids {taps!r} do not match architecture {arch}")
    expected = set(net.params)
    stored = set(tensors) - {"embedding.freq"}
    if expected != stored:
        raise DescriptorMismatchError(f"tensor names differ: missing {sorted(expected - stored)}, "
                                      f"unexpected {sorted(stored - expected)}")
    for name, ref in net.params.items():
        arr = tensors[name]
        if arr.shape != ref.shape or arr.dtype != ref.dtype:
            raise DescriptorMismatchError(f"tensor {name}: stored {arr.shape}/{arr.dtype}, "
                                          f"descriptor implies {ref.shape}/{ref.dtype}")
        net.params[name] = arr
    return net


def load_checkpoint(path):
    with open(path, "rb") as f:
        desc, tensors = decode_checkpoint(f)
    return net_from_parts(desc, tensors)
