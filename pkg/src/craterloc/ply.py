"""PLY point-cloud reader/writer (ascii and binary_little_endian).

Only the ``vertex`` element is kept; x, y, z are required. Two comment lines
carry the cloud metadata::

    comment sensor_origin <x> <y> <z>
    comment frame <sensor|site>
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .geometry import PointCloud

_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


class PlyError(ValueError):
    def __init__(self, message, offset):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def write_ply(path, cloud: PointCloud, binary=True) -> None:
    pts = np.ascontiguousarray(cloud.points, dtype="<f4")
    ox, oy, oz = cloud.sensor_origin
    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
              f"comment sensor_origin {ox!r} {oy!r} {oz!r}", f"comment frame {cloud.frame}",
              f"element vertex {len(pts)}", "property float x", "property float y",
              "property float z", "end_header"]
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            f.write(pts.tobytes())
        else:
            for p in pts.astype(float):
                f.write(f"{p[0]:.7g} {p[1]:.7g} {p[2]:.7g}\n".encode("ascii"))


def read_ply(path) -> PointCloud:
    data = Path(path).read_bytes()
    if not data.startswith(b"ply"):
        raise PlyError("missing 'ply' magic", 0)
    end = data.find(b"end_header")
    if end < 0:
        raise PlyError("header has no end_header line", len(data))
    body_start = data.find(b"\n", end) + 1
    if body_start == 0:
        raise PlyError("truncated after end_header", len(data))

    fmt = None
    origin = (0.0, 0.0, 0.0)
    frame = "sensor"
    elements: list[tuple[str, int, list]] = []
    offset = 0
    for raw in data[:body_start].split(b"\n"):
        line = raw.decode("ascii", "replace").strip()
        tok = line.split()
        if not tok or tok[0] in ("ply", "end_header"):
            pass
        elif tok[0] == "format":
            if len(tok) < 2 or tok[1] not in ("ascii", "binary_little_endian"):
                raise PlyError(f"unsupported format line {line!r}", offset)
            fmt = tok[1]
        elif tok[0] == "comment":
            if len(tok) == 5 and tok[1] == "sensor_origin":
                try:
                    origin = tuple(float(v) for v in tok[2:5])
                except ValueError:
                    raise PlyError(f"bad sensor_origin comment {line!r}", offset) from None
            elif len(tok) == 3 and tok[1] == "frame":
                frame = tok[2]
        elif tok[0] == "element":
            if len(tok) != 3 or not tok[2].isdigit():
                raise PlyError(f"bad element line {line!r}", offset)
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            if not elements:
                raise PlyError("property before any element", offset)
            if tok[1] == "list":
                if len(tok) != 5 or tok[2] not in _TYPES or tok[3] not in _TYPES:
                    raise PlyError(f"bad list property {line!r}", offset)
                elements[-1][2].append((tok[4], ("list", tok[2], tok[3])))
            else:
                if len(tok) != 3 or tok[1] not in _TYPES:
                    raise PlyError(f"bad property line {line!r}", offset)
                elements[-1][2].append((tok[2], tok[1]))
        elif tok[0] != "obj_info":
            raise PlyError(f"unexpected header line {line!r}", offset)
        offset += len(raw) + 1
    if fmt is None:
        raise PlyError("header has no format line", 0)

    pos = body_start
    vertex = None
    for name, count, props in elements:
        if fmt == "ascii":
            arr, pos = _read_ascii(data, pos, count, props)
        else:
            arr, pos = _read_binary(data, pos, count, props)
        if name == "vertex":
            vertex = arr
    if vertex is None:
        raise PlyError("no vertex element", body_start)
    for axis in "xyz":
        if axis not in vertex:
            raise PlyError(f"vertex element lacks property {axis}", body_start)
    pts = np.column_stack([vertex["x"], vertex["y"], vertex["z"]]).astype(float)
    if not np.all(np.isfinite(pts)):
        raise PlyError("non-finite vertex coordinates", body_start)
    return PointCloud(pts, frame, origin)


def _read_ascii(data, pos, count, props):
    cols = {name: np.empty(count) for name, t in props if not isinstance(t, tuple)}
    for k in range(count):
        nl = data.find(b"\n", pos)
        if nl < 0:
            nl = len(data)
        if pos >= len(data):
            raise PlyError(f"expected {count} rows, found {k}", pos)
        tok = data[pos:nl].split()
        ti = 0
        try:
            for name, t in props:
                if isinstance(t, tuple):
                    n = int(tok[ti])
                    ti += 1 + n
                else:
                    cols[name][k] = float(tok[ti])
                    ti += 1
        except (ValueError, IndexError):
            raise PlyError(f"malformed ascii row {k}", pos) from None
        pos = nl + 1
    return cols, pos


def _read_binary(data, pos, count, props):
    if any(isinstance(t, tuple) for _, t in props):
        # variable-length rows: walk them one at a time
        cols = {name: np.empty(count) for name, t in props if not isinstance(t, tuple)}
        for k in range(count):
            for name, t in props:
                if isinstance(t, tuple):
                    cdt = np.dtype("<" + _TYPES[t[1]])
                    if pos + cdt.itemsize > len(data):
                        raise PlyError("truncated list property", pos)
                    n = int(np.frombuffer(data, cdt, 1, pos)[0])
                    pos += cdt.itemsize + n * np.dtype(_TYPES[t[2]]).itemsize
                else:
                    dt = np.dtype("<" + _TYPES[t])
                    if pos + dt.itemsize > len(data):
                        raise PlyError(f"truncated binary body at row {k}", pos)
                    cols[name][k] = np.frombuffer(data, dt, 1, pos)[0]
                    pos += dt.itemsize
        return cols, pos
    dtype = np.dtype([(name, "<" + _TYPES[t]) for name, t in props])
    need = dtype.itemsize * count
    if pos + need > len(data):
        raise PlyError(f"binary body needs {need} bytes, {len(data) - pos} available", pos)
    arr = np.frombuffer(data, dtype, count, pos)
    return {name: arr[name].astype(float) for name in dtype.names}, pos + need
