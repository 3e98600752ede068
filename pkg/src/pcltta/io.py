"""On-disk formats.

``PCB1`` point clouds::

    b"PCB1" | u64 count | u8 flags (bit0 colors, bit1 labels)
    | f32 xyz * count | [f32 rgb * count] | [i32 label * count]

``TTAC1`` checkpoints::

    b"TTAC1" | u64 header length | JSON header | f32 blobs in header order

All integers and floats little-endian.
"""
from __future__ import annotations

import json
import struct

import numpy as np

from .pointcloud import PointCloud
from .network import Arch, BnLayer, BnMode, Block, Linear, SegNet

PCB_MAGIC = b"PCB1"
TTAC_MAGIC = b"TTAC1"
TTAC_VERSION = 1
FLAG_COLORS = 1
FLAG_LABELS = 2


class FormatError(ValueError):
    pass


def encode_pcb(cloud) -> bytes:
    n = len(cloud)
    flags = (FLAG_COLORS if cloud.colors is not None else 0) | (FLAG_LABELS if cloud.labels is not None else 0)
    parts = [PCB_MAGIC, struct.pack("<QB", n, flags), cloud.positions.astype("<f4").tobytes()]
    if cloud.colors is not None:
        parts.append(cloud.colors.astype("<f4").tobytes())
    if cloud.labels is not None:
        parts.append(cloud.labels.astype("<i4").tobytes())
    return b"".join(parts)


def decode_pcb(data: bytes):
    if data[:4] != PCB_MAGIC:
        raise FormatError("not a PCB1 file (bad magic)")
    if len(data) < 13:
        raise FormatError("truncated PCB1 header")
    n, flags = struct.unpack_from("<QB", data, 4)
    if flags & ~(FLAG_COLORS | FLAG_LABELS):
        raise FormatError(f"unknown PCB1 flags {flags:#x}")
    expected = 13 + 12 * n + (12 * n if flags & FLAG_COLORS else 0) + (4 * n if flags & FLAG_LABELS else 0)
    if len(data) != expected:
        raise FormatError(f"PCB1 body is {len(data)} bytes, expected {expected}")
    off = 13
    pos = np.frombuffer(data, "<f4", 3 * n, off).reshape(n, 3).astype(np.float64)
    off += 12 * n
    colors = labels = None
    if flags & FLAG_COLORS:
        colors = np.frombuffer(data, "<f4", 3 * n, off).reshape(n, 3).astype(np.float64)
        off += 12 * n
    if flags & FLAG_LABELS:
        labels = np.frombuffer(data, "<i4", n, off).astype(np.int64)
    return PointCloud(pos, colors, labels)


def save_pcb(cloud, path):
    with open(path, "wb") as fh:
        fh.write(encode_pcb(cloud))


def load_pcb(path):
    with open(path, "rb") as fh:
        return decode_pcb(fh.read())


def load_text_cloud(path, has_colors=None, has_labels=None):
    """Whitespace separated ``x y z [r g b] [label]`` rows.

    Column meaning is inferred from the count (3, 4, 6 or 7) unless given.
    Colors above 1 are taken to be 0..255 and rescaled.
    """
    rows = np.loadtxt(path, ndmin=2, comments="#")
    if rows.size == 0:
        return PointCloud(np.zeros((0, 3)))
    ncol = rows.shape[1]
    if has_colors is None:
        has_colors = ncol in (6, 7)
    if has_labels is None:
        has_labels = ncol in (4, 7)
    if ncol != 3 + 3 * bool(has_colors) + bool(has_labels):
        raise FormatError(f"{path}: {ncol} columns do not match x y z [r g b] [label]")
    colors = labels = None
    if has_colors:
        colors = rows[:, 3:6]
        if colors.max() > 1.0:
            colors = colors / 255.0
    if has_labels:
        labels = rows[:, -1].astype(np.int64)
    return PointCloud(rows[:, :3], colors, labels)


def load_cloud(path):
    path = str(path)
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == PCB_MAGIC:
        return load_pcb(path)
    return load_text_cloud(path)


# -- checkpoints ------------------------------------------------------------

def _blob_order(net: SegNet):
    for name, b in net.blocks():
        yield f"{name}.weight", b.linear.weight
        for attr in ("gamma", "beta", "running_mean", "running_var"):
            yield f"{name}.{attr}", getattr(b.bn, attr)
    yield "cls.weight", net.classifier.weight
    yield "cls.bias", net.classifier.bias


def encode_checkpoint(net: SegNet, extra: dict = None) -> bytes:
    bns = net.bn_layers()
    header = {
        "format_version": TTAC_VERSION,
        "arch": net.arch.to_dict(),
        "num_classes": net.arch.num_classes,
        "in_features": net.arch.in_features,
        "eps": bns[0].eps if bns else 1e-5,
        "rho": bns[0].rho if bns else 0.1,
        "bn_mode": bns[0].mode.value if bns else BnMode.SOURCE_EVAL.value,
        "mode_names": [m.value for m in BnMode],
        "blobs": [[name, list(arr.shape)] for name, arr in _blob_order(net)],
    }
    if extra:
        header["extra"] = extra
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    blobs = b"".join(np.ascontiguousarray(arr, dtype="<f4").tobytes() for _, arr in _blob_order(net))
    return TTAC_MAGIC + struct.pack("<Q", len(raw)) + raw + blobs


def decode_checkpoint(data: bytes):
    """Return ``(net, header)``."""
    if data[:5] != TTAC_MAGIC:
        raise FormatError("not a TTAC1 checkpoint (bad magic)")
    (hlen,) = struct.unpack_from("<Q", data, 5)
    try:
        header = json.loads(data[13:13 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt checkpoint header: {exc}") from exc
    if header.get("format_version") != TTAC_VERSION:
        raise FormatError(f"unsupported checkpoint version {header.get('format_version')}")
    arch = Arch(**header["arch"])
    off = 13 + hlen
    arrays = {}
    for name, shape in header["blobs"]:
        count = int(np.prod(shape)) if shape else 1
        if off + 4 * count > len(data):
            raise FormatError("truncated checkpoint body")
        arrays[name] = np.frombuffer(data, "<f4", count, off).reshape(shape).astype(np.float64)
        off += 4 * count
    if off != len(data):
        raise FormatError("trailing bytes after checkpoint body")
    eps, rho, mode = header["eps"], header["rho"], BnMode(header["bn_mode"])

    def block(name):
        return Block(Linear(arrays[f"{name}.weight"]),
                     BnLayer(arrays[f"{name}.gamma"], arrays[f"{name}.beta"], arrays[f"{name}.running_mean"],
                             arrays[f"{name}.running_var"], eps, rho, mode))

    try:
        net = SegNet(arch,
                     [block(f"enc{i}") for i in range(len(arch.encoder))],
                     [block(f"head{i}") for i in range(len(arch.head))],
                     Linear(arrays["cls.weight"], arrays["cls.bias"]))
    except KeyError as exc:
        raise FormatError(f"checkpoint is missing blob {exc}") from None
    return net, header


def save_checkpoint(net: SegNet, path, extra: dict = None):
    with open(path, "wb") as fh:
        fh.write(encode_checkpoint(net, extra))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())
