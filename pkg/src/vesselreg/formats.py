"""Readers and writers for every on-disk artifact.

All writers go through :func:`atomic_write` (temp file + rename) so an
interrupted run never leaves a half-written output behind.
"""
from __future__ import annotations

import csv
import io
import os
import struct
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import FormatError
from .keypoints import CLASS_NAMES, KeypointSet

BLOCK_MAGIC = b"CKDB"
CHECKPOINT_MAGIC = b"CKDN"


def atomic_write(path, data: bytes | str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode()
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def write_csv(path, header, rows) -> Path:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return atomic_write(path, buf.getvalue())


def _fmt(x: float) -> str:
    return repr(float(x))


# ---------------------------------------------------------------------------
# homography


def write_homography(path, h) -> Path:
    h = np.asarray(h, dtype=np.float64).reshape(3, 3)
    return atomic_write(path, "\n".join(" ".join(_fmt(v) for v in row) for row in h) + "\n")


def read_homography(path) -> np.ndarray:
    try:
        vals = [float(t) for t in Path(path).read_text().split()]
    except ValueError as e:
        raise FormatError(f"{path}: {e}") from None
    if len(vals) != 9:
        raise FormatError(f"{path}: expected 9 numbers, found {len(vals)}")
    return np.array(vals).reshape(3, 3)


# ---------------------------------------------------------------------------
# keypoints


def write_keypoints(path, kps: KeypointSet) -> Path:
    rows = [(_fmt(x), _fmt(y), CLASS_NAMES[c], _fmt(s)) for (x, y), c, s in zip(kps.xy, kps.cls, kps.score)]
    return write_csv(path, ("x", "y", "class", "score"), rows)


def read_keypoints(path) -> KeypointSet:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["x", "y", "class", "score"]:
            raise FormatError(f"{path}: header must be x,y,class,score")
        xy, cls, score = [], [], []
        for line, row in enumerate(reader, start=2):
            if row["class"] not in CLASS_NAMES:
                raise FormatError(f"{path}:{line}: unknown class {row['class']!r}")
            try:
                xy.append((float(row["x"]), float(row["y"])))
                score.append(float(row["score"]))
            except (TypeError, ValueError):
                raise FormatError(f"{path}:{line}: bad number") from None
            cls.append(CLASS_NAMES.index(row["class"]))
    if not xy:
        return KeypointSet.empty()
    return KeypointSet(np.array(xy), np.array(cls), np.array(score))


# ---------------------------------------------------------------------------
# raw f32 blocks (descriptors, heatmaps)


def encode_block(block) -> bytes:
    block = np.asarray(block)
    if block.ndim != 3:
        raise FormatError("block must be H x W x C")
    h, w, c = block.shape
    return BLOCK_MAGIC + struct.pack("<3I", w, h, c) + np.ascontiguousarray(block, dtype="<f4").tobytes()


def decode_block(data: bytes) -> np.ndarray:
    if data[:4] != BLOCK_MAGIC:
        raise FormatError("not a CKDB block (bad magic)")
    if len(data) < 16:
        raise FormatError("truncated CKDB header")
    w, h, c = struct.unpack("<3I", data[4:16])
    n = w * h * c
    if len(data) != 16 + 4 * n:
        raise FormatError(f"CKDB payload has {len(data) - 16} bytes, expected {4 * n}")
    return np.frombuffer(data, dtype="<f4", offset=16).reshape(h, w, c).astype(np.float32)


def write_block(path, block) -> Path:
    return atomic_write(path, encode_block(block))


def read_block(path) -> np.ndarray:
    return decode_block(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# images and heatmaps


def write_image(path, image) -> Path:
    """Store an ``[0, 1]`` float image as 8-bit PNG (``round(255 v)``)."""
    arr = np.asarray(image, dtype=np.float64)
    q = np.rint(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(q).save(buf, format="PNG")
    return atomic_write(path, buf.getvalue())


def read_image(path) -> np.ndarray:
    """8-bit image as float ``H x W x 3`` in ``[0, 1]``."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def read_heatmap(path) -> np.ndarray:
    """Heatmap from a 3-channel PNG or a CKDB block with three channels."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == BLOCK_MAGIC:
        hm = read_block(path).astype(np.float64)
    else:
        hm = read_image(path)
    if hm.shape[2] != 3:
        raise FormatError(f"{path}: heatmap needs 3 channels, found {hm.shape[2]}")
    return hm


write_heatmap = write_image


# ---------------------------------------------------------------------------
# network checkpoints


def encode_checkpoint(net) -> bytes:
    """Magic, layer count, ``(in, out, kernel, dilation)`` per layer, then f32 weights and biases.

    Each weight is stored in its ``(kernel, kernel, in, out)`` C order.
    """
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", len(net.layers))]
    for layer in net.layers:
        k, _, in_c, out_c = layer.weight.shape
        parts.append(struct.pack("<4I", in_c, out_c, k, layer.dilation))
    for layer in net.layers:
        parts.append(np.ascontiguousarray(layer.weight, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(layer.bias, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_checkpoint(data: bytes):
    from .descnet import ConvDescriptorNet, ConvLayer

    if data[:4] != CHECKPOINT_MAGIC:
        raise FormatError("not a CKDN checkpoint (bad magic)")
    if len(data) < 8:
        raise FormatError("truncated CKDN header")
    (n,) = struct.unpack("<I", data[4:8])
    pos = 8
    if len(data) < pos + 16 * n:
        raise FormatError("truncated CKDN layer table")
    specs = []
    for _ in range(n):
        specs.append(struct.unpack("<4I", data[pos:pos + 16]))
        pos += 16
    layers = []
    for in_c, out_c, k, dil in specs:
        nw = out_c * in_c * k * k
        need = 4 * (nw + out_c)
        if len(data) < pos + need:
            raise FormatError("truncated CKDN parameters")
        w = np.frombuffer(data, dtype="<f4", count=nw, offset=pos).reshape(k, k, in_c, out_c)
        b = np.frombuffer(data, dtype="<f4", count=out_c, offset=pos + 4 * nw)
        pos += need
        layers.append(ConvLayer(w.astype(np.float64), b.astype(np.float64), int(dil)))
    if pos != len(data):
        raise FormatError("trailing bytes after CKDN parameters")
    return ConvDescriptorNet(layers)


def save_checkpoint(path, net) -> Path:
    return atomic_write(path, encode_checkpoint(net))


def load_checkpoint(path):
    return decode_checkpoint(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# control points, manifests, curves


def write_control_points(path, fixed, moving) -> Path:
    fixed = np.asarray(fixed, dtype=np.float64).reshape(-1, 2)
    moving = np.asarray(moving, dtype=np.float64).reshape(-1, 2)
    lines = [" ".join(_fmt(v) for v in (*f, *m)) for f, m in zip(fixed, moving)]
    return atomic_write(path, "".join(s + "\n" for s in lines))


def read_control_points(path) -> tuple[np.ndarray, np.ndarray]:
    rows = []
    for line_no, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 4:
            raise FormatError(f"{path}:{line_no}: expected 4 numbers")
        try:
            rows.append([float(p) for p in parts])
        except ValueError:
            raise FormatError(f"{path}:{line_no}: bad number") from None
    arr = np.array(rows, dtype=np.float64).reshape(-1, 4)
    return arr[:, :2], arr[:, 2:]


MANIFEST_HEADER = ("id", "category", "control_points_path", "excluded_indices")


def write_manifest(path, rows) -> Path:
    """Rows are ``(id, category, control_points_path, excluded)``; excluded indices are ``;``-separated."""
    out = [(i, c, p, ";".join(str(int(e)) for e in ex)) for i, c, p, ex in rows]
    return write_csv(path, MANIFEST_HEADER, out)


def read_manifest(path) -> list[tuple[str, str, Path, tuple[int, ...]]]:
    """Manifest rows with control-point paths resolved relative to the manifest."""
    path = Path(path)
    out = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header[:3]) != MANIFEST_HEADER[:3]:
            raise FormatError(f"{path}: header must start with id,category,control_points_path")
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) < 3:
                raise FormatError(f"{path}:{line}: too few columns")
            ex = tuple(int(t) for t in row[3].split(";") if t.strip()) if len(row) > 3 else ()
            out.append((row[0], row[1], path.parent / row[2], ex))
    return out


def write_curve(path, curve) -> Path:
    rows = [(int(t), _fmt(r)) for t, r in zip(curve.thresholds, curve.success_ratio)]
    return write_csv(path, ("threshold", "success_ratio"), rows)


SUMMARY_HEADER = ("overall", "A", "P", "S", "avg", "weighted_avg")


def write_summary(path, report) -> Path:
    row = report.row()
    return write_csv(path, SUMMARY_HEADER, [[_fmt(row[k]) for k in SUMMARY_HEADER]])


def write_matches(path, fixed_xy, moving_xy, similarity, classes) -> Path:
    rows = [(_fmt(f[0]), _fmt(f[1]), _fmt(m[0]), _fmt(m[1]), _fmt(s), CLASS_NAMES[c])
            for f, m, s, c in zip(fixed_xy, moving_xy, similarity, classes)]
    return write_csv(path, ("x_fixed", "y_fixed", "x_moving", "y_moving", "similarity", "class"), rows)


def read_matches(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    f = np.array([(float(r["x_fixed"]), float(r["y_fixed"])) for r in rows]).reshape(-1, 2)
    m = np.array([(float(r["x_moving"]), float(r["y_moving"])) for r in rows]).reshape(-1, 2)
    s = np.array([float(r["similarity"]) for r in rows])
    c = np.array([CLASS_NAMES.index(r["class"]) for r in rows], dtype=np.int64)
    return f, m, s, c
