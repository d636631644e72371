"""Point cloud and mesh files: PLY (ASCII / binary little-endian), XYZ, OBJ.

Writers emit binary little-endian PLY with ``double`` properties so a
write/read round trip is bit-exact. Writes go to a temporary file that is
renamed into place.
"""

from __future__ import annotations

import logging
import os
import tempfile
from pathlib import Path

import numpy as np

from .errors import ParseError, UnsupportedFormat
from .mesher import Mesh
from .pyramid import PointCloud

log = logging.getLogger(__name__)

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def atomic_write(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _parse_header(data):
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise UnsupportedFormat("not a PLY file")
    nl = data.find(b"\n", end)
    body_start = len(data) if nl < 0 else nl + 1
    lines = data[:end].decode("ascii", errors="replace").splitlines()
    fmt = None
    elements = []
    for lineno, line in enumerate(lines, start=1):
        parts = line.split()
        if not parts or parts[0] in ("ply", "comment", "obj_info"):
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append({"name": parts[1], "count": int(parts[2]), "props": []})
        elif parts[0] == "property":
            if not elements:
                raise ParseError(f"PLY header line {lineno}: property before element")
            if parts[1] == "list":
                if parts[2] not in _PLY_TYPES or parts[3] not in _PLY_TYPES:
                    raise ParseError(f"PLY header line {lineno}: unknown list type")
                elements[-1]["props"].append((parts[4], "list", _PLY_TYPES[parts[2]], _PLY_TYPES[parts[3]]))
            else:
                if parts[1] not in _PLY_TYPES:
                    raise ParseError(f"PLY header line {lineno}: unknown type {parts[1]!r}")
                elements[-1]["props"].append((parts[2], _PLY_TYPES[parts[1]]))
        else:
            raise ParseError(f"PLY header line {lineno}: unexpected keyword {parts[0]!r}")
    if fmt not in ("ascii", "binary_little_endian"):
        raise UnsupportedFormat(f"PLY format {fmt!r} is not supported")
    return fmt, elements, body_start


def _read_binary(data, at, element):
    props = element["props"]
    n = element["count"]
    if all(len(p) == 2 for p in props):
        dtype = np.dtype([(p[0], "<" + p[1]) for p in props])
        end = at + n * dtype.itemsize
        if end > len(data):
            raise ParseError(f"PLY element {element['name']!r} truncated at byte offset {len(data)}")
        return np.frombuffer(data, dtype=dtype, count=n, offset=at), end
    if len(props) == 1 and n:
        # fast path for triangle-only face lists
        name, _, ctype, itype = props[0]
        tri = np.dtype([("n", "<" + ctype), ("v", "<" + itype, (3,))])
        end = at + n * tri.itemsize
        if end <= len(data):
            rec = np.frombuffer(data, dtype=tri, count=n, offset=at)
            if np.all(rec["n"] == 3):
                return [{name: v} for v in rec["v"]], end
    # list properties (faces): walk records one by one
    rows = []
    for r in range(n):
        rec = {}
        for p in props:
            if p[1] == "list":
                cdt, idt = np.dtype("<" + p[2]), np.dtype("<" + p[3])
                if at + cdt.itemsize > len(data):
                    raise ParseError(f"PLY {element['name']} record {r} truncated at byte offset {at}")
                cnt = int(np.frombuffer(data, cdt, 1, at)[0])
                at += cdt.itemsize
                if at + cnt * idt.itemsize > len(data):
                    raise ParseError(f"PLY {element['name']} record {r} truncated at byte offset {at}")
                rec[p[0]] = np.frombuffer(data, idt, cnt, at)
                at += cnt * idt.itemsize
            else:
                dt = np.dtype("<" + p[1])
                if at + dt.itemsize > len(data):
                    raise ParseError(f"PLY {element['name']} record {r} truncated at byte offset {at}")
                rec[p[0]] = np.frombuffer(data, dt, 1, at)[0]
                at += dt.itemsize
        rows.append(rec)
    return rows, at


def _read_ascii(lines, at, element, header_lines):
    props = element["props"]
    out = []
    for r in range(element["count"]):
        if at >= len(lines):
            raise ParseError(f"PLY {element['name']} ends early: expected {element['count']} records, got {r}")
        tokens = lines[at].split()
        lineno = header_lines + at + 1
        rec, t = {}, 0
        try:
            for p in props:
                if p[1] == "list":
                    cnt = int(tokens[t])
                    rec[p[0]] = np.array([int(x) for x in tokens[t + 1 : t + 1 + cnt]])
                    if len(rec[p[0]]) != cnt:
                        raise ParseError(f"line {lineno}: list shorter than its count")
                    t += 1 + cnt
                else:
                    rec[p[0]] = float(tokens[t])
                    t += 1
        except (ValueError, IndexError):
            raise ParseError(f"PLY line {lineno}: malformed {element['name']} record") from None
        if t != len(tokens):
            raise ParseError(f"PLY line {lineno}: {len(tokens) - t} extra values")
        out.append(rec)
        at += 1
    return out, at


def read_ply(path):
    """Elements of a PLY file as ``{name: records}``.

    Scalar-only elements come back as numpy structured arrays (binary) or
    lists of dicts (ASCII); list elements are lists of dicts.
    """
    data = Path(path).read_bytes()
    fmt, elements, at = _parse_header(data)
    result = {}
    if fmt == "binary_little_endian":
        for el in elements:
            result[el["name"]], at = _read_binary(data, at, el)
    else:
        header_lines = data[:at].count(b"\n")
        lines = [ln for ln in data[at:].decode("ascii", errors="replace").splitlines()]
        pos = 0
        for el in elements:
            result[el["name"]], pos = _read_ascii(lines, pos, el, header_lines)
    return result


def _column(records, name):
    if isinstance(records, np.ndarray):
        return records[name].astype(np.float64)
    return np.array([r[name] for r in records], dtype=np.float64)


def _has(records, name):
    if isinstance(records, np.ndarray):
        return name in records.dtype.names
    return bool(records) and name in records[0]


def _finish_cloud(pos, normals, source):
    if normals is not None:
        norm = np.linalg.norm(normals, axis=1)
        off = np.abs(norm - 1.0) > 1e-3
        if np.any(off):
            log.warning("%s: %d normals were not unit length; renormalized", source, int(off.sum()))
        normals = np.where(norm[:, None] > 0, normals / np.where(norm > 0, norm, 1.0)[:, None], 0.0)
    return PointCloud(pos, normals=normals)


def load_cloud(path):
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".ply":
        elements = read_ply(path)
        if "vertex" not in elements:
            raise ParseError(f"{path}: PLY has no vertex element")
        v = elements["vertex"]
        if not all(_has(v, c) for c in "xyz") and len(v):
            raise ParseError(f"{path}: vertex element lacks x/y/z")
        pos = np.stack([_column(v, c) for c in "xyz"], axis=1) if len(v) else np.zeros((0, 3))
        normals = None
        if len(v) and all(_has(v, c) for c in ("nx", "ny", "nz")):
            normals = np.stack([_column(v, c) for c in ("nx", "ny", "nz")], axis=1)
        if not np.all(np.isfinite(pos)):
            raise ParseError(f"{path}: non-finite vertex position")
        return _finish_cloud(pos, normals, path)
    if suffix in (".xyz", ".txt", ".pts"):
        rows = []
        with open(path) as fh:
            for lineno, line in enumerate(fh, start=1):
                s = line.split("#", 1)[0].strip()
                if not s:
                    continue
                parts = s.split()
                if len(parts) not in (3, 6):
                    raise ParseError(f"{path}:{lineno}: expected 3 or 6 values, got {len(parts)}")
                try:
                    vals = [float(x) for x in parts]
                except ValueError:
                    raise ParseError(f"{path}:{lineno}: non-numeric value") from None
                if not all(np.isfinite(vals)):
                    raise ParseError(f"{path}:{lineno}: non-finite value")
                rows.append(vals)
        if rows and len({len(r) for r in rows}) > 1:
            raise ParseError(f"{path}: mixed 3- and 6-column records")
        arr = np.array(rows, dtype=np.float64).reshape(len(rows), -1) if rows else np.zeros((0, 3))
        normals = arr[:, 3:6] if arr.shape[1] == 6 else None
        return _finish_cloud(arr[:, :3], normals, path)
    raise UnsupportedFormat(f"{path}: unsupported point cloud extension {suffix!r}")


def ply_bytes(positions, normals=None, triangles=None, extra=None):
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    fields = [("x", positions[:, 0]), ("y", positions[:, 1]), ("z", positions[:, 2])]
    if normals is not None:
        normals = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
        fields += [("nx", normals[:, 0]), ("ny", normals[:, 1]), ("nz", normals[:, 2])]
    for name, col in (extra or {}).items():
        fields.append((name, np.asarray(col, dtype=np.float64)))
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(positions)}"]
    header += [f"property double {name}" for name, _ in fields]
    if triangles is not None:
        header += [f"element face {len(triangles)}", "property list uchar int vertex_indices"]
    header.append("end_header")
    rec = np.empty(len(positions), dtype=[(name, "<f8") for name, _ in fields])
    for name, col in fields:
        rec[name] = col
    body = rec.tobytes()
    if triangles is not None:
        tri = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
        face = np.empty(len(tri), dtype=[("n", "u1"), ("v", "<i4", (3,))])
        face["n"] = 3
        face["v"] = tri
        body += face.tobytes()
    return ("\n".join(header) + "\n").encode("ascii") + body


def write_ply(path, cloud_or_positions, normals=None):
    if isinstance(cloud_or_positions, PointCloud):
        normals = cloud_or_positions.normals if normals is None else normals
        cloud_or_positions = cloud_or_positions.positions
    atomic_write(path, ply_bytes(cloud_or_positions, normals))


def write_mesh(path, mesh: Mesh):
    path = Path(path)
    if path.suffix.lower() == ".obj":
        lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
        lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles.tolist()]
        atomic_write(path, ("\n".join(lines) + "\n").encode("ascii"))
    elif path.suffix.lower() == ".ply":
        atomic_write(path, ply_bytes(mesh.vertices, triangles=mesh.triangles))
    else:
        raise UnsupportedFormat(f"{path}: mesh export supports .obj and .ply")


def load_mesh(path):
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".obj":
        verts, tris = [], []
        with open(path) as fh:
            for lineno, line in enumerate(fh, start=1):
                parts = line.split()
                if not parts or parts[0].startswith("#"):
                    continue
                try:
                    if parts[0] == "v":
                        verts.append([float(x) for x in parts[1:4]])
                    elif parts[0] == "f":
                        idx = [int(p.split("/")[0]) for p in parts[1:]]
                        idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                        for j in range(1, len(idx) - 1):
                            tris.append([idx[0], idx[j], idx[j + 1]])
                except ValueError:
                    raise ParseError(f"{path}:{lineno}: malformed record") from None
        return Mesh(np.array(verts).reshape(-1, 3), np.array(tris, dtype=np.int64).reshape(-1, 3))
    if suffix == ".ply":
        el = read_ply(path)
        v = el.get("vertex", [])
        pos = np.stack([_column(v, c) for c in "xyz"], axis=1) if len(v) else np.zeros((0, 3))
        tris = []
        for rec in el.get("face", []):
            idx = [int(i) for i in rec["vertex_indices"]]
            for j in range(1, len(idx) - 1):
                tris.append([idx[0], idx[j], idx[j + 1]])
        return Mesh(pos, np.array(tris, dtype=np.int64).reshape(-1, 3))
    raise UnsupportedFormat(f"{path}: unsupported mesh extension {suffix!r}")
