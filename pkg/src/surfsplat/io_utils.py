"""Small binary-format helpers shared by dataset loading, checkpoints and exports.

Formats kept deliberately simple and little-endian:
  * raw float planes: ``<name>.raw`` (f32 LE) + ``<name>.json`` header
  * 16-bit PGM (P5, maxval 65535, big-endian samples per the netpbm spec)
  * binary-little-endian PLY for point clouds and meshes
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image


# ---------------------------------------------------------------------------
# raw f32 planes with JSON sidecar header


def write_raw_plane(path, array):
    """Write an HxW or HxWxC float array as f32 LE with a JSON header."""
    path = Path(path)
    arr = np.ascontiguousarray(array, dtype="<f4")
    if arr.ndim == 2:
        arr = arr[..., None]
    if arr.ndim != 3:
        raise ValueError(f"expected HxW or HxWxC array, got shape {array.shape}")
    h, w, c = arr.shape
    path.write_bytes(arr.tobytes())
    header = {"width": int(w), "height": int(h), "channels": int(c)}
    path.with_suffix(".json").write_text(json.dumps(header))


def read_raw_plane(path):
    path = Path(path)
    header = json.loads(path.with_suffix(".json").read_text())
    h, w, c = header["height"], header["width"], header["channels"]
    data = np.frombuffer(path.read_bytes(), dtype="<f4")
    if data.size != h * w * c:
        raise ValueError(f"{path}: expected {h * w * c} floats, found {data.size}")
    arr = data.reshape(h, w, c).astype(np.float64)
    return arr[..., 0] if c == 1 else arr


# ---------------------------------------------------------------------------
# images


def write_png(path, image):
    """Write an HxW or HxWx3 float image in [0,1] as 8-bit PNG."""
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    arr = (arr * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(arr).save(path)


def read_png(path):
    arr = np.asarray(Image.open(path), dtype=np.float64) / 255.0
    return arr


def write_pgm16(path, labels):
    """Write an HxW non-negative integer array as 16-bit binary PGM."""
    arr = np.asarray(labels)
    if arr.min() < 0 or arr.max() > 65535:
        raise ValueError("labels out of u16 range")
    h, w = arr.shape
    header = f"P5\n{w} {h}\n65535\n".encode("ascii")
    Path(path).write_bytes(header + arr.astype(">u2").tobytes())


def read_pgm16(path):
    data = Path(path).read_bytes()
    # header: magic, width, height, maxval separated by whitespace
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while data[pos : pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    pos += 1  # single whitespace after maxval
    if fields[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    dtype = ">u2" if maxval > 255 else "u1"
    arr = np.frombuffer(data[pos:], dtype=dtype, count=h * w).reshape(h, w)
    return arr.astype(np.int64)


# ---------------------------------------------------------------------------
# PLY


def write_ply_points(path, positions, colors=None):
    """Binary PLY point cloud; colors are float [0,1] written as uchar."""
    positions = np.asarray(positions, dtype="<f4")
    n = len(positions)
    lines = [
        "ply",
        "format binary_little_endian 1.0",
        f"element vertex {n}",
        "property float x",
        "property float y",
        "property float z",
    ]
    if colors is not None:
        lines += ["property uchar red", "property uchar green", "property uchar blue"]
    lines.append("end_header")
    header = ("\n".join(lines) + "\n").encode("ascii")
    body = bytearray()
    if colors is None:
        body = positions.tobytes()
    else:
        rgb = (np.clip(colors, 0, 1) * 255 + 0.5).astype(np.uint8)
        rec = np.zeros(n, dtype=[("xyz", "<f4", 3), ("rgb", "u1", 3)])
        rec["xyz"] = positions
        rec["rgb"] = rgb
        body = rec.tobytes()
    Path(path).write_bytes(header + body)


def _parse_ply_header(data):
    end = data.index(b"end_header\n") + len(b"end_header\n")
    header_lines = data[:end].decode("ascii").strip().split("\n")
    if header_lines[1].split()[1] != "binary_little_endian":
        raise ValueError("only binary_little_endian PLY supported")
    elements = []  # (name, count, [(prop_name, dtype)])
    for line in header_lines:
        parts = line.split()
        if parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if parts[1] == "list":
                elements[-1][2].append((parts[-1], "list", parts[2], parts[3]))
            else:
                elements[-1][2].append((parts[-1], parts[1]))
    return elements, end


_PLY_DTYPES = {
    "float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8",
    "uchar": "u1", "uint8": "u1", "char": "i1", "int8": "i1",
    "ushort": "<u2", "uint16": "<u2", "short": "<i2", "int16": "<i2",
    "uint": "<u4", "uint32": "<u4", "int": "<i4", "int32": "<i4",
}


def read_ply(path):
    """Read a binary PLY; returns {element_name: {prop: array}}."""
    data = Path(path).read_bytes()
    elements, pos = _parse_ply_header(data)
    out = {}
    for name, count, props in elements:
        has_list = any(p[1] == "list" for p in props)
        if not has_list:
            dtype = np.dtype([(p[0], _PLY_DTYPES[p[1]]) for p in props])
            rec = np.frombuffer(data, dtype=dtype, count=count, offset=pos)
            pos += dtype.itemsize * count
            out[name] = {p[0]: rec[p[0]].copy() for p in props}
        else:
            # faces: assume a single list property of uniform length
            pname, _, cnt_t, val_t = props[0]
            cnt_dt = np.dtype(_PLY_DTYPES[cnt_t])
            val_dt = np.dtype(_PLY_DTYPES[val_t])
            rows = []
            for _ in range(count):
                k = int(np.frombuffer(data, dtype=cnt_dt, count=1, offset=pos)[0])
                pos += cnt_dt.itemsize
                rows.append(np.frombuffer(data, dtype=val_dt, count=k, offset=pos))
                pos += val_dt.itemsize * k
            out[name] = {pname: np.array(rows)}
    return out


def write_ply_mesh(path, vertices, faces, colors=None, labels=None):
    """Binary PLY triangle mesh with optional uchar colors and ushort labels."""
    vertices = np.asarray(vertices, dtype="<f4")
    faces = np.asarray(faces, dtype="<i4")
    n, m = len(vertices), len(faces)
    lines = [
        "ply",
        "format binary_little_endian 1.0",
        f"element vertex {n}",
        "property float x",
        "property float y",
        "property float z",
    ]
    fields = [("xyz", "<f4", 3)]
    if colors is not None:
        lines += ["property uchar red", "property uchar green", "property uchar blue"]
        fields.append(("rgb", "u1", 3))
    if labels is not None:
        lines.append("property ushort label")
        fields.append(("label", "<u2"))
    lines += [
        f"element face {m}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    header = ("\n".join(lines) + "\n").encode("ascii")
    rec = np.zeros(n, dtype=fields)
    rec["xyz"] = vertices
    if colors is not None:
        rec["rgb"] = (np.clip(colors, 0, 1) * 255 + 0.5).astype(np.uint8)
    if labels is not None:
        rec["label"] = np.asarray(labels, dtype="<u2")
    frec = np.zeros(m, dtype=[("n", "u1"), ("idx", "<i4", 3)])
    frec["n"] = 3
    frec["idx"] = faces
    Path(path).write_bytes(header + rec.tobytes() + frec.tobytes())


def read_ply_mesh(path):
    """Returns (vertices, faces, colors or None, labels or None)."""
    elems = read_ply(path)
    v = elems["vertex"]
    vertices = np.stack([v["x"], v["y"], v["z"]], axis=-1).astype(np.float64)
    faces = elems.get("face", {}).get("vertex_indices")
    if faces is not None:
        faces = faces.astype(np.int64)
    colors = None
    if "red" in v:
        colors = np.stack([v["red"], v["green"], v["blue"]], axis=-1) / 255.0
    labels = v["label"].astype(np.int64) if "label" in v else None
    return vertices, faces, colors, labels
