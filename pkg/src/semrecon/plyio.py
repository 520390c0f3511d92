"""Binary little-endian PLY for meshes and labelled point samples."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .fusion import Mesh

_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "<i2", "int16": "<i2", "ushort": "<u2", "uint16": "<u2",
    "int": "<i4", "int32": "<i4", "uint": "<u4", "uint32": "<u4",
    "float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8",
}


class PlyError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"PLY parse error at byte {offset}: {message}")
        self.offset = offset


def write_ply(path, mesh: Mesh) -> None:
    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    if mesh.colors is not None:
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    if mesh.classes is not None:
        fields += [("class", "<u2")]
    verts = np.zeros(len(mesh.vertices), dtype=fields)
    for a, name in enumerate("xyz"):
        verts[name] = mesh.vertices[:, a]
    if mesh.colors is not None:
        for a, name in enumerate(("red", "green", "blue")):
            verts[name] = mesh.colors[:, a]
    if mesh.classes is not None:
        verts["class"] = mesh.classes
    faces = np.zeros(len(mesh.faces), dtype=[("n", "u1"), ("idx", "<i4", (3,))])
    faces["n"] = 3
    faces["idx"] = mesh.faces
    rev = {"<f4": "float", "u1": "uchar", "<u2": "ushort"}
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(verts)}"]
    header += [f"property {rev[t]} {n}" for n, t in fields]
    header += [f"element face {len(faces)}", "property list uchar int vertex_indices", "end_header"]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(verts.tobytes())
        fh.write(faces.tobytes())


def read_ply(path) -> Mesh:
    data = Path(path).read_bytes()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply\n") or end < 0:
        raise PlyError("missing 'ply' magic or end_header", 0)
    elements = []
    offset = 0
    for raw in data[: end].split(b"\n"):
        line = raw.decode("ascii", errors="replace").split()
        pos = offset
        offset += len(raw) + 1
        if not line or line[0] in ("ply", "comment", "obj_info"):
            continue
        if line[0] == "format":
            if line[1:2] != ["binary_little_endian"]:
                raise PlyError(f"unsupported format {' '.join(line[1:])!r}", pos)
        elif line[0] == "element":
            try:
                elements.append([line[1], int(line[2]), []])
            except (IndexError, ValueError):
                raise PlyError("malformed element line", pos) from None
        elif line[0] == "property":
            if not elements:
                raise PlyError("property before any element", pos)
            if line[1] == "list":
                if len(line) != 5 or line[2] not in _TYPES or line[3] not in _TYPES:
                    raise PlyError("malformed list property", pos)
                elements[-1][2].append((line[4], "list", _TYPES[line[2]], _TYPES[line[3]]))
            else:
                if len(line) != 3 or line[1] not in _TYPES:
                    raise PlyError(f"unknown property type {line[1:2]}", pos)
                elements[-1][2].append((line[2], _TYPES[line[1]]))
        else:
            raise PlyError(f"unexpected header keyword {line[0]!r}", pos)

    offset = end + len(b"end_header\n")
    verts = np.zeros((0, 3))
    faces = np.zeros((0, 3), dtype=np.int64)
    classes = colors = None
    for name, count, props in elements:
        if any(p[1] == "list" for p in props):
            if len(props) != 1:
                raise PlyError(f"element {name!r} mixes list and scalar properties", offset)
            _, _, ctype, itype = props[0]
            dt = np.dtype([("n", ctype), ("idx", itype, (3,))])
            need = dt.itemsize * count
            if offset + need > len(data):
                raise PlyError(f"element {name!r} truncated", len(data))
            arr = np.frombuffer(data, dtype=dt, count=count, offset=offset)
            bad = np.flatnonzero(arr["n"] != 3)
            if len(bad):
                raise PlyError("only triangles are supported", offset + int(bad[0]) * dt.itemsize)
            if name == "face":
                faces = arr["idx"].astype(np.int64)
            offset += need
            continue
        dt = np.dtype([(p[0], p[1]) for p in props])
        need = dt.itemsize * count
        if offset + need > len(data):
            raise PlyError(f"element {name!r} truncated", len(data))
        arr = np.frombuffer(data, dtype=dt, count=count, offset=offset)
        offset += need
        if name == "vertex":
            names = dt.names
            if not {"x", "y", "z"} <= set(names):
                raise PlyError("vertex element lacks x/y/z", offset - need)
            verts = np.stack([arr["x"], arr["y"], arr["z"]], axis=1).astype(np.float64)
            if "class" in names:
                classes = arr["class"].astype(np.int64)
            if {"red", "green", "blue"} <= set(names):
                colors = np.stack([arr["red"], arr["green"], arr["blue"]], axis=1).astype(np.uint8)
    if offset != len(data):
        raise PlyError(f"{len(data) - offset} trailing bytes", offset)
    if len(faces) and (faces.min() < 0 or faces.max() >= len(verts)):
        raise PlyError("face index out of range", end + len(b"end_header\n"))
    return Mesh(verts, faces, classes, colors)
