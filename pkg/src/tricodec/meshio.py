"""Geometry and image file IO: PLY (binary/ASCII), OBJ, raw floats, PNG.

PLY files carry xyz as float64 plus optional uchar rgb and triangle faces.
OBJ export writes vertex colors as the common 6-number `v` extension and
keeps the counterclockwise winding of the faces it is given.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import MissingArtifactError, ShapeError

_PLY_DTYPES = {
    "float": ("<f4", 4), "float32": ("<f4", 4),
    "double": ("<f8", 8), "float64": ("<f8", 8),
    "uchar": ("|u1", 1), "uint8": ("|u1", 1),
    "int": ("<i4", 4), "int32": ("<i4", 4),
    "uint": ("<u4", 4), "uint32": ("<u4", 4),
}


def save_ply(path, points, colors=None, faces=None, binary: bool = True) -> None:
    """Write points (and optional uchar colors / triangle faces) as PLY."""
    points = np.asarray(points, np.float64).reshape(-1, 3)
    n = points.shape[0]
    header = ["ply"]
    header.append("format binary_little_endian 1.0" if binary else "format ascii 1.0")
    header.append(f"element vertex {n}")
    header += ["property double x", "property double y", "property double z"]
    if colors is not None:
        colors = np.asarray(colors)
        if colors.shape != (n, 3):
            raise ShapeError(f"colors shape {colors.shape} != ({n}, 3)")
        if colors.dtype != np.uint8:
            colors = (np.clip(colors, 0.0, 1.0) * 255.0).round().astype(np.uint8)
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    if faces is not None:
        faces = np.asarray(faces, np.int64).reshape(-1, 3)
        header.append(f"element face {faces.shape[0]}")
        header.append("property list uchar int vertex_indices")
    header.append("end_header")

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            for i in range(n):
                fh.write(struct.pack("<3d", *points[i]))
                if colors is not None:
                    fh.write(struct.pack("<3B", *colors[i]))
            if faces is not None:
                for f in faces:
                    fh.write(struct.pack("<B3i", 3, *f))
        else:
            for i in range(n):
                row = f"{points[i,0]:.17g} {points[i,1]:.17g} {points[i,2]:.17g}"
                if colors is not None:
                    row += f" {colors[i,0]} {colors[i,1]} {colors[i,2]}"
                fh.write((row + "\n").encode("ascii"))
            if faces is not None:
                for f in faces:
                    fh.write(f"3 {f[0]} {f[1]} {f[2]}\n".encode("ascii"))


def load_ply(path):
    """Read a PLY written by save_ply or similar; returns (points, colors, faces).

    colors come back as float64 in [0,1] (or None); faces as int64 [F,3] (or
    None).  Handles binary little-endian and ASCII, float/double positions.
    """
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"mesh file not found: {path}")
    raw = path.read_bytes()
    end = raw.find(b"end_header\n")
    if not raw.startswith(b"ply") or end < 0:
        raise ShapeError(f"{path} is not a PLY file")
    lines = raw[:end].decode("ascii").splitlines()
    body = raw[end + len(b"end_header\n"):]

    fmt = None
    elements = []  # (name, count, [(prop_name, dtype_str) or ("list", ...)])
    for ln in lines[1:]:
        parts = ln.split()
        if not parts or parts[0] == "comment":
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append([parts[1], int(parts[2]), []])
        elif parts[0] == "property":
            if parts[1] == "list":
                elements[-1][2].append(("list", parts[2], parts[3], parts[4]))
            else:
                elements[-1][2].append((parts[2], parts[1]))
    if fmt not in ("binary_little_endian", "ascii"):
        raise ShapeError(f"unsupported PLY format {fmt!r}")

    points = colors = faces = None
    if fmt == "ascii":
        tokens = body.decode("ascii").split("\n")
        cursor = 0
        for name, count, props in elements:
            rows = [tokens[cursor + i].split() for i in range(count)]
            cursor += count
            if name == "vertex":
                names = [p[0] for p in props]
                arr = np.array([[float(v) for v in r] for r in rows])
                points = arr[:, [names.index(a) for a in "xyz"]]
                if "red" in names:
                    idx = [names.index(ch) for ch in ("red", "green", "blue")]
                    colors = arr[:, idx] / 255.0
            elif name == "face":
                faces = np.array([[int(v) for v in r[1:4]] for r in rows], np.int64)
        return points, colors, faces

    off = 0
    for name, count, props in elements:
        if name == "vertex":
            names, fmts, width = [], [], 0
            for p in props:
                if p[0] == "list":
                    raise ShapeError("list property on vertices is unsupported")
                names.append(p[0])
                dt, sz = _PLY_DTYPES[p[1]]
                fmts.append((p[0], dt))
                width += sz
            rec = np.frombuffer(body, dtype=np.dtype(fmts), count=count, offset=off)
            off += width * count
            points = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)
            if "red" in names:
                colors = np.stack([rec["red"], rec["green"], rec["blue"]],
                                  axis=1).astype(np.float64) / 255.0
        elif name == "face":
            (kind, cnt_t, idx_t, _name) = props[0]
            cdt, csz = _PLY_DTYPES[cnt_t]
            idt, isz = _PLY_DTYPES[idx_t]
            out = np.empty((count, 3), np.int64)
            for i in range(count):
                k = int(np.frombuffer(body, cdt, 1, off)[0])
                off += csz
                if k != 3:
                    raise ShapeError("only triangle faces are supported")
                out[i] = np.frombuffer(body, idt, 3, off)
                off += 3 * isz
            faces = out
    return points, colors, faces


def save_obj(path, vertices, faces, colors=None) -> None:
    """OBJ export; vertex colors ride on the `v` lines, winding is preserved."""
    vertices = np.asarray(vertices, np.float64).reshape(-1, 3)
    faces = np.asarray(faces, np.int64).reshape(-1, 3)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="ascii") as fh:
        for i, v in enumerate(vertices):
            line = f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}"
            if colors is not None:
                c = np.clip(colors[i], 0.0, 1.0)
                line += f" {c[0]:.6g} {c[1]:.6g} {c[2]:.6g}"
            fh.write(line + "\n")
        for f in faces:
            fh.write(f"f {f[0]+1} {f[1]+1} {f[2]+1}\n")


def save_raw_points(path, points, colors=None) -> None:
    """Flat little-endian float64 dump plus a JSON sidecar describing it."""
    points = np.asarray(points, np.float64).reshape(-1, 3)
    payload = points if colors is None else np.concatenate(
        [points, np.asarray(colors, np.float64).reshape(-1, 3)], axis=1)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(payload.astype("<f8").tobytes())
    sidecar = {"count": int(payload.shape[0]), "dims": int(payload.shape[1]),
               "dtype": "<f8", "layout": "xyz" if colors is None else "xyzrgb"}
    Path(str(path) + ".json").write_text(json.dumps(sidecar, sort_keys=True))


def load_raw_points(path):
    """Inverse of save_raw_points; returns (points, colors-or-None)."""
    path = Path(path)
    side = Path(str(path) + ".json")
    if not path.exists() or not side.exists():
        raise MissingArtifactError(f"raw point file or sidecar missing: {path}")
    meta = json.loads(side.read_text())
    arr = np.frombuffer(path.read_bytes(), meta["dtype"]).reshape(
        meta["count"], meta["dims"]).astype(np.float64)
    if meta["layout"] == "xyzrgb":
        return arr[:, :3], arr[:, 3:6]
    return arr[:, :3], None


def save_png(path, image) -> None:
    """Write HxW (grayscale) or HxWx3 (rgb) arrays in [0,1] as 8-bit PNG."""
    from PIL import Image

    arr = np.asarray(image, np.float64)
    arr = (np.clip(arr, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    if arr.ndim == 2:
        img = Image.fromarray(arr, mode="L")
    elif arr.ndim == 3 and arr.shape[2] == 3:
        img = Image.fromarray(arr, mode="RGB")
    else:
        raise ShapeError(f"cannot write image of shape {arr.shape}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img.save(path)
