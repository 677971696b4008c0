"""PLY (ascii / binary little-endian) and OBJ readers and writers."""

from __future__ import annotations

import os
import tempfile
from pathlib import Path

import numpy as np

from .geometry import PointCloud, TriMesh

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


class FormatError(ValueError):
    pass


def atomic_write_bytes(path, data: bytes):
    """Write via a temp file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp_" + path.name)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


def write_ply(path, pc: PointCloud, colors=None, binary: bool = True):
    """Write positions (double), optional features f0..fk (double) and
    optional uchar colors."""
    n = len(pc)
    fields = [("x", "f8"), ("y", "f8"), ("z", "f8")]
    nfeat = 0 if pc.features is None else pc.features.shape[1]
    fields += [(f"f{i}", "f8") for i in range(nfeat)]
    if colors is not None:
        colors = np.asarray(colors, dtype=np.uint8).reshape(n, 3)
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    rec = np.empty(n, dtype=[(name, "<" + t) for name, t in fields])
    for k, name in enumerate("xyz"):
        rec[name] = pc.points[:, k]
    for i in range(nfeat):
        rec[f"f{i}"] = pc.features[:, i]
    if colors is not None:
        rec["red"], rec["green"], rec["blue"] = colors[:, 0], colors[:, 1], colors[:, 2]

    fmt = "binary_little_endian" if binary else "ascii"
    header = ["ply", f"format {fmt} 1.0", f"element vertex {n}"]
    names = {"f8": "double", "u1": "uchar"}
    header += [f"property {names[t]} {name}" for name, t in fields]
    header.append("end_header")
    head = ("\n".join(header) + "\n").encode("ascii")
    if binary:
        body = rec.tobytes()
    else:
        lines = []
        for row in rec:
            lines.append(" ".join(repr(float(v)) if isinstance(v, np.floating) else str(int(v))
                                  for v in row))
        body = ("\n".join(lines) + ("\n" if lines else "")).encode("ascii")
    atomic_write_bytes(path, head + body)


def read_ply(path, return_colors: bool = False):
    data = Path(path).read_bytes()
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise FormatError(f"{path}: not a PLY file")
    nl = data.index(b"\n", end)
    header = data[:nl].decode("ascii").splitlines()
    body = data[nl + 1:]

    fmt, elements, cur = None, [], None
    for line in header[1:]:
        tok = line.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            cur = {"name": tok[1], "count": int(tok[2]), "props": []}
            elements.append(cur)
        elif tok[0] == "property":
            if tok[1] == "list":
                cur["props"].append((tok[4], "list", tok[2], tok[3]))
            else:
                cur["props"].append((tok[2], _PLY_TYPES[tok[1]]))
    if fmt not in ("ascii", "binary_little_endian"):
        raise FormatError(f"{path}: unsupported PLY format {fmt!r}")

    vertex = None
    if fmt == "ascii":
        lines = body.decode("ascii").split("\n")
        pos = 0
        for el in elements:
            rows = lines[pos:pos + el["count"]]
            pos += el["count"]
            if el["name"] == "vertex":
                if any(p[1] == "list" for p in el["props"]):
                    raise FormatError("list properties on vertices are not supported")
                arr = np.array([r.split() for r in rows], dtype=np.float64).reshape(
                    el["count"], len(el["props"]))
                vertex = {p[0]: arr[:, i] for i, p in enumerate(el["props"])}
    else:
        off = 0
        for el in elements:
            if any(p[1] == "list" for p in el["props"]):
                if el["name"] == "vertex":
                    raise FormatError("list properties on vertices are not supported")
                for _ in range(el["count"]):  # skip face lists
                    for p in el["props"]:
                        if p[1] == "list":
                            ct = np.dtype("<" + _PLY_TYPES[p[2]])
                            k = int(np.frombuffer(body, ct, 1, off)[0])
                            off += ct.itemsize + k * np.dtype("<" + _PLY_TYPES[p[3]]).itemsize
                        else:
                            off += np.dtype("<" + p[1]).itemsize
                continue
            dt = np.dtype([(p[0], "<" + p[1]) for p in el["props"]])
            arr = np.frombuffer(body, dt, el["count"], off)
            off += dt.itemsize * el["count"]
            if el["name"] == "vertex":
                vertex = {name: arr[name].astype(np.float64) for name in dt.names}
    if vertex is None:
        raise FormatError(f"{path}: no vertex element")
    pts = np.column_stack([vertex["x"], vertex["y"], vertex["z"]])
    fnames = sorted((k for k in vertex if k.startswith("f") and k[1:].isdigit()),
                    key=lambda k: int(k[1:]))
    feats = np.column_stack([vertex[k] for k in fnames]) if fnames else None
    pc = PointCloud(pts, feats)
    if return_colors:
        cols = None
        if all(c in vertex for c in ("red", "green", "blue")):
            cols = np.column_stack([vertex["red"], vertex["green"], vertex["blue"]]).astype(np.uint8)
        return pc, cols
    return pc


def write_obj(path, mesh: TriMesh, comment: str | None = None):
    lines = []
    if comment:
        lines.append(f"# {comment}")
    lines += ["v %.17g %.17g %.17g" % tuple(v) for v in mesh.vertices]
    lines += ["f %d %d %d" % tuple(t + 1) for t in mesh.triangles]
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_obj(path) -> TriMesh:
    verts, faces = [], []
    for line in Path(path).read_text().splitlines():
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "v":
            verts.append([float(x) for x in tok[1:4]])
        elif tok[0] == "f":
            idx = [int(t.split("/")[0]) for t in tok[1:]]
            idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
            for k in range(1, len(idx) - 1):  # fan-triangulate polygons
                faces.append([idx[0], idx[k], idx[k + 1]])
    return TriMesh(np.array(verts, dtype=np.float64).reshape(-1, 3),
                   np.array(faces, dtype=np.int64).reshape(-1, 3))
