"""
File I/O: PLY point clouds and meshes, OBJ polygon meshes, primitive JSON,
and canonical (deterministic) JSON serialization.

Coordinates are written with 17 significant digits so that a save/load
round trip reproduces 64-bit floats bit-exactly.
"""
from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .errors import ParseError, UnsupportedFormat
from .primitives import PlanarPrimitive, PointCloud

_PLY_TYPES = {
    "char": ("i1", 1), "int8": ("i1", 1),
    "uchar": ("u1", 1), "uint8": ("u1", 1),
    "short": ("i2", 2), "int16": ("i2", 2),
    "ushort": ("u2", 2), "uint16": ("u2", 2),
    "int": ("i4", 4), "int32": ("i4", 4),
    "uint": ("u4", 4), "uint32": ("u4", 4),
    "float": ("f4", 4), "float32": ("f4", 4),
    "double": ("f8", 8), "float64": ("f8", 8),
}


def format_float(x: float) -> str:
    """Shortest repr that round-trips a 64-bit float ('%.17g' fallback)."""
    if x != x or math.isinf(x):
        raise ValueError("non-finite value in serialized output")
    if x == int(x) and abs(x) < 1e16:
        return f"{x:.1f}"
    s = repr(float(x))
    return s


def canonical_json(obj) -> str:
    """Deterministic JSON: sorted keys, fixed float format, '\\n' terminated."""

    def render(o) -> str:
        if isinstance(o, dict):
            items = sorted(o.items(), key=lambda kv: kv[0])
            inner = ",".join(f"{json.dumps(k)}:{render(v)}" for k, v in items)
            return "{" + inner + "}"
        if isinstance(o, (list, tuple, np.ndarray)):
            seq = o.tolist() if isinstance(o, np.ndarray) else o
            return "[" + ",".join(render(v) for v in seq) + "]"
        if isinstance(o, bool) or o is None:
            return json.dumps(o)
        if isinstance(o, (int, np.integer)):
            return str(int(o))
        if isinstance(o, (float, np.floating)):
            return format_float(float(o))
        if isinstance(o, str):
            return json.dumps(o)
        raise TypeError(f"cannot serialize {type(o)!r}")

    return render(obj) + "\n"


# --- PLY ---------------------------------------------------------------


def _parse_ply_header(raw: bytes, path):
    lines = []
    offset = 0
    while True:
        end = raw.find(b"\n", offset)
        if end < 0:
            raise ParseError("unterminated PLY header", path=path, offset=offset)
        line = raw[offset:end].decode("ascii", errors="replace").strip()
        offset = end + 1
        lines.append(line)
        if line == "end_header":
            break
        if offset > 65536:
            raise ParseError("PLY header too large", path=path, offset=offset)
    if not lines or lines[0] != "ply":
        raise ParseError("missing 'ply' magic", path=path, line=1)

    fmt = None
    elements = []  # (name, count, [(prop name, type, is_list, list count type)])
    for ln, line in enumerate(lines[1:], start=2):
        if not line or line.startswith("comment") or line == "end_header":
            continue
        parts = line.split()
        if parts[0] == "format":
            if parts[1] == "ascii":
                fmt = "ascii"
            elif parts[1] == "binary_little_endian":
                fmt = "binary_le"
            else:
                raise UnsupportedFormat(f"PLY format {parts[1]!r} not supported")
        elif parts[0] == "element":
            try:
                elements.append((parts[1], int(parts[2]), []))
            except (IndexError, ValueError):
                raise ParseError("malformed element line", path=path, line=ln)
        elif parts[0] == "property":
            if not elements:
                raise ParseError("property before element", path=path, line=ln)
            if parts[1] == "list":
                if len(parts) != 5:
                    raise ParseError("malformed list property", path=path, line=ln)
                elements[-1][2].append((parts[4], parts[3], True, parts[2]))
            else:
                if len(parts) != 3:
                    raise ParseError("malformed property line", path=path, line=ln)
                elements[-1][2].append((parts[2], parts[1], False, None))
    if fmt is None:
        raise ParseError("missing format line", path=path, line=2)
    return fmt, elements, offset, len(lines)


def _ply_vertex_data(fmt, elements, raw, data_start, header_lines, path):
    """Extract per-element raw tables; returns {name: dict of column arrays}."""
    out = {}
    if fmt == "ascii":
        text = raw[data_start:].decode("ascii", errors="replace").splitlines()
        row = 0
        for name, count, props in elements:
            if any(p[2] for p in props):
                # list element (faces): one list per row
                lists = []
                for r in range(count):
                    if row + r >= len(text):
                        raise ParseError(
                            f"unexpected end of data in element {name!r}",
                            path=path,
                            line=header_lines + row + r + 1,
                        )
                    toks = text[row + r].split()
                    if not toks:
                        raise ParseError(
                            "empty data row", path=path, line=header_lines + row + r + 1
                        )
                    n = int(toks[0])
                    lists.append([int(t) for t in toks[1 : 1 + n]])
                out[name] = {"__lists__": lists}
                row += count
                continue
            cols = {p[0]: np.empty(count) for p in props}
            for r in range(count):
                if row + r >= len(text):
                    raise ParseError(
                        f"unexpected end of data in element {name!r}",
                        path=path,
                        line=header_lines + row + r + 1,
                    )
                toks = text[row + r].split()
                if len(toks) < len(props):
                    raise ParseError(
                        f"row has {len(toks)} values, expected {len(props)}",
                        path=path,
                        line=header_lines + row + r + 1,
                    )
                for c, p in enumerate(props):
                    cols[p[0]][r] = float(toks[c])
            out[name] = cols
            row += count
        return out

    cursor = data_start
    for name, count, props in elements:
        if any(p[2] for p in props):
            lists = []
            for _ in range(count):
                if len(props) != 1:
                    raise UnsupportedFormat(
                        "mixed list/scalar binary elements not supported"
                    )
                _, item_t, _, count_t = props[0]
                ct, csz = _PLY_TYPES[count_t]
                it, isz = _PLY_TYPES[item_t]
                if cursor + csz > len(raw):
                    raise ParseError("truncated face data", path=path, offset=cursor)
                n = int(
                    np.frombuffer(raw, dtype="<" + ct, count=1, offset=cursor)[0]
                )
                cursor += csz
                if cursor + n * isz > len(raw):
                    raise ParseError("truncated face data", path=path, offset=cursor)
                idx = np.frombuffer(raw, dtype="<" + it, count=n, offset=cursor)
                cursor += n * isz
                lists.append([int(v) for v in idx])
            out[name] = {"__lists__": lists}
            continue
        dtype = np.dtype(
            [(p[0], "<" + _PLY_TYPES[p[1]][0]) for p in props]
        )
        nbytes = dtype.itemsize * count
        if cursor + nbytes > len(raw):
            raise ParseError(
                f"truncated element {name!r}", path=path, offset=cursor
            )
        table = np.frombuffer(raw, dtype=dtype, count=count, offset=cursor)
        cursor += nbytes
        out[name] = {p[0]: table[p[0]].astype(float) for p in props}
    return out


def load_ply(path):
    """Parse a PLY file into (vertex column dict, face index lists or None)."""
    path = Path(path)
    raw = path.read_bytes()
    fmt, elements, data_start, header_lines = _parse_ply_header(raw, path)
    names = [e[0] for e in elements]
    if "vertex" not in names:
        raise ParseError("missing vertex element", path=path, line=header_lines)
    tables = _ply_vertex_data(fmt, elements, raw, data_start, header_lines, path)
    verts = tables["vertex"]
    faces = tables.get("face", {}).get("__lists__") if "face" in tables else None
    return verts, faces


def load_point_cloud(path) -> PointCloud:
    path = Path(path)
    if path.suffix.lower() != ".ply":
        raise UnsupportedFormat(f"point clouds use PLY, got {path.suffix!r}")
    verts, _ = load_ply(path)
    for axis in ("x", "y", "z"):
        if axis not in verts:
            raise ParseError(f"vertex element lacks property {axis!r}", path=path)
    points = np.column_stack([verts["x"], verts["y"], verts["z"]])
    normals = None
    if all(k in verts for k in ("nx", "ny", "nz")):
        normals = np.column_stack([verts["nx"], verts["ny"], verts["nz"]])
        lengths = np.linalg.norm(normals, axis=1)
        bad = lengths < 1e-12
        lengths[bad] = 1.0
        normals = normals / lengths[:, None]
        normals[bad] = np.array([0.0, 0.0, 1.0])
    return PointCloud(points=points, normals=normals)


def save_point_cloud(cloud: PointCloud, path, binary: bool = False):
    path = Path(path)
    n = len(cloud.points)
    has_n = cloud.normals is not None
    props = ["x", "y", "z"] + (["nx", "ny", "nz"] if has_n else [])
    header = ["ply"]
    header.append("format binary_little_endian 1.0" if binary else "format ascii 1.0")
    header.append(f"element vertex {n}")
    header.extend(f"property double {p}" for p in props)
    header.append("end_header")
    data = (
        np.hstack([cloud.points, cloud.normals]) if has_n else cloud.points
    )
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fh.write(np.ascontiguousarray(data, dtype="<f8").tobytes())
        else:
            rows = (
                " ".join(format_float(float(v)) for v in row) for row in data
            )
            fh.write(("\n".join(rows) + "\n").encode("ascii"))


def load_mesh(path):
    """Load OBJ or PLY polygon mesh as (vertices (n,3), list of index loops)."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".ply":
        verts, faces = load_ply(path)
        for axis in ("x", "y", "z"):
            if axis not in verts:
                raise ParseError(f"vertex element lacks property {axis!r}", path=path)
        if faces is None:
            raise ParseError("missing face element", path=path)
        v = np.column_stack([verts["x"], verts["y"], verts["z"]])
        return v, [list(f) for f in faces]
    if suffix != ".obj":
        raise UnsupportedFormat(f"meshes use OBJ or PLY, got {suffix!r}")
    verts = []
    faces = []
    with open(path, "r", encoding="utf-8", errors="replace") as fh:
        for ln, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "v":
                if len(parts) < 4:
                    raise ParseError("malformed vertex line", path=path, line=ln)
                try:
                    verts.append([float(parts[1]), float(parts[2]), float(parts[3])])
                except ValueError:
                    raise ParseError("non-numeric vertex", path=path, line=ln)
            elif parts[0] == "f":
                try:
                    idx = [int(tok.split("/")[0]) for tok in parts[1:]]
                except ValueError:
                    raise ParseError("non-numeric face index", path=path, line=ln)
                loop = [i - 1 if i > 0 else len(verts) + i for i in idx]
                if any(i < 0 or i >= len(verts) for i in loop):
                    raise ParseError("face index out of range", path=path, line=ln)
                if len(loop) < 3:
                    raise ParseError("face needs at least 3 vertices", path=path, line=ln)
                faces.append(loop)
    if not verts:
        raise ParseError("no vertices found", path=path)
    return np.asarray(verts, dtype=float), faces


def save_mesh(vertices, faces, path):
    """Write a polygon mesh to OBJ or PLY (ASCII), by file extension."""
    path = Path(path)
    vertices = np.asarray(vertices, dtype=float)
    suffix = path.suffix.lower()
    if suffix == ".obj":
        with open(path, "w", encoding="ascii") as fh:
            for v in vertices:
                fh.write(
                    f"v {format_float(v[0])} {format_float(v[1])} {format_float(v[2])}\n"
                )
            for f in faces:
                fh.write("f " + " ".join(str(int(i) + 1) for i in f) + "\n")
        return
    if suffix == ".ply":
        with open(path, "wb") as fh:
            header = [
                "ply",
                "format ascii 1.0",
                f"element vertex {len(vertices)}",
                "property double x",
                "property double y",
                "property double z",
                f"element face {len(faces)}",
                "property list uchar int vertex_indices",
                "end_header",
            ]
            fh.write(("\n".join(header) + "\n").encode("ascii"))
            for v in vertices:
                fh.write(
                    f"{format_float(v[0])} {format_float(v[1])} {format_float(v[2])}\n".encode("ascii")
                )
            for f in faces:
                fh.write(
                    (str(len(f)) + " " + " ".join(str(int(i)) for i in f) + "\n").encode("ascii")
                )
        return
    raise UnsupportedFormat(f"meshes use OBJ or PLY, got {suffix!r}")


# --- primitives JSON -----------------------------------------------------


def save_primitives(primitives, path):
    path = Path(path)
    planes = []
    inliers = []
    orientations = []
    for p in primitives:
        coef = np.asarray(p.plane, dtype=float)
        norm = float(np.linalg.norm(coef[:3]))
        if abs(norm - 1.0) > 1e-12:
            coef = coef / norm
        planes.append([float(v) for v in coef])
        inliers.append([int(i) for i in p.inliers])
        orientations.append(int(p.orientation) if p.orientation is not None else 1)
    payload = {"planes": planes, "inliers": inliers, "orientations": orientations}
    path.write_text(canonical_json(payload), encoding="ascii")


def load_primitives(path, n_points: int | None = None):
    path = Path(path)
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(str(exc), path=path, line=exc.lineno) from exc
    if not isinstance(payload, dict) or "planes" not in payload or "inliers" not in payload:
        raise ParseError("primitive JSON needs 'planes' and 'inliers'", path=path)
    planes = payload["planes"]
    inliers = payload["inliers"]
    orientations = payload.get("orientations")
    if len(planes) != len(inliers):
        raise ParseError(
            f"{len(planes)} planes vs {len(inliers)} inlier lists", path=path
        )
    if orientations is not None and len(orientations) != len(planes):
        raise ParseError("orientations length mismatch", path=path)
    primitives = []
    for pid, (coef, idx) in enumerate(zip(planes, inliers)):
        coef = np.asarray(coef, dtype=float)
        if coef.shape != (4,) or not np.all(np.isfinite(coef)):
            raise ParseError(f"plane {pid} is not a finite 4-vector", path=path)
        norm = float(np.linalg.norm(coef[:3]))
        if norm < 1e-12:
            raise ParseError(f"plane {pid} has zero normal", path=path)
        if abs(norm - 1.0) > 1e-12:
            coef = coef / norm
        idx = np.asarray(idx, dtype=np.intp)
        if n_points is not None and len(idx) and (idx.min() < 0 or idx.max() >= n_points):
            bad = int(idx.min()) if idx.min() < 0 else int(idx.max())
            raise ParseError(
                f"primitive {pid} inlier index {bad} outside cloud of {n_points}",
                path=path,
            )
        orientation = int(orientations[pid]) if orientations is not None else None
        primitives.append(
            PlanarPrimitive(id=pid, plane=coef, inliers=idx, orientation=orientation)
        )
    return primitives
