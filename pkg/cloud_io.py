"""
Cloud, matrix and label file formats.

XYZ   one point per line, 3 or 6 reals separated by whitespace or commas
PLY   ascii or binary_little_endian, vertex element with x,y,z, optional
      nx,ny,nz, optional label; any other vertex property is passed through
      as a per-point attribute
FMAT  b"FMAT", u32 rows, u32 cols (little-endian), row-major float64 LE payload
"""

import hashlib
import json
import re
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from error_handlers import CloudParseError, ValidationError
from logger_config import get_logger
from point_cloud import PointCloud

logger = get_logger(__name__)

PathLike = Union[str, Path]

FMAT_MAGIC = b"FMAT"
_FMAT_HEADER = np.dtype([("magic", "S4"), ("rows", "<u4"), ("cols", "<u4")])

_SEPARATORS = re.compile(r"[,\s]+")

PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}

NORMAL_FIELDS = ("nx", "ny", "nz")


def infer_format(path: PathLike, fmt: Optional[str] = None) -> str:
    if fmt:
        fmt = fmt.lower()
    else:
        fmt = Path(path).suffix.lower().lstrip(".")
        if fmt in ("txt", "pts", "csv"):
            fmt = "xyz"
    if fmt not in ("xyz", "ply"):
        raise ValidationError(f"unsupported cloud format '{fmt}'", field="format")
    return fmt


def _unit_normals(normals: np.ndarray, path: PathLike, line_of=None) -> np.ndarray:
    norms = np.linalg.norm(normals, axis=1)
    bad = np.nonzero(norms <= 0.0)[0]
    if bad.size:
        line = line_of(bad[0]) if line_of else None
        raise CloudParseError("zero-length normal cannot be renormalized", path=path, line=line)
    return normals / norms[:, None]


# ---------------------------------------------------------------- XYZ

def _read_xyz(path: Path) -> PointCloud:
    rows: List[List[float]] = []
    line_numbers: List[int] = []
    width = None
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            text = raw.strip()
            if not text or text.startswith("#"):
                continue
            tokens = [t for t in _SEPARATORS.split(text) if t]
            if len(tokens) not in (3, 6):
                raise CloudParseError(f"expected 3 or 6 values, found {len(tokens)}",
                                      path=path, line=lineno)
            if width is None:
                width = len(tokens)
            elif len(tokens) != width:
                raise CloudParseError(f"row has {len(tokens)} values, previous rows have {width}",
                                      path=path, line=lineno)
            try:
                values = [float(t) for t in tokens]
            except ValueError:
                raise CloudParseError(f"not a number in '{text[:60]}'", path=path, line=lineno)
            if not all(np.isfinite(values)):
                raise CloudParseError("non-finite value", path=path, line=lineno)
            rows.append(values)
            line_numbers.append(lineno)

    if not rows:
        raise CloudParseError("zero points", path=path)

    data = np.asarray(rows, dtype=np.float64)
    normals = None
    if width == 6:
        normals = _unit_normals(data[:, 3:6], path, line_of=lambda i: line_numbers[i])
    return PointCloud(positions=data[:, :3], normals=normals)


def _write_xyz(cloud: PointCloud, path: Path) -> None:
    data = cloud.positions
    if cloud.normals is not None:
        data = np.hstack([cloud.positions, cloud.normals])
    # 17 significant digits round-trip float64 exactly
    np.savetxt(path, data, fmt="%.17g")


# ---------------------------------------------------------------- PLY

def _parse_ply_header(path: Path, blob: bytes) -> Tuple[str, List[Dict[str, Any]], int]:
    end = blob.find(b"end_header")
    if not blob.startswith(b"ply") or end < 0:
        raise CloudParseError("missing ply magic or end_header", path=path, line=1)
    newline = blob.find(b"\n", end)
    body_offset = len(blob) if newline < 0 else newline + 1
    header_lines = blob[:end].decode("ascii", errors="replace").splitlines()

    fmt = None
    elements: List[Dict[str, Any]] = []
    for lineno, line in enumerate(header_lines, start=1):
        parts = line.split()
        if not parts or parts[0] in ("ply", "comment", "obj_info"):
            continue
        if parts[0] == "format":
            if len(parts) < 2 or parts[1] not in ("ascii", "binary_little_endian"):
                raise CloudParseError(f"unsupported ply format '{line.strip()}'", path=path, line=lineno)
            fmt = parts[1]
        elif parts[0] == "element":
            if len(parts) != 3:
                raise CloudParseError("malformed element line", path=path, line=lineno)
            try:
                count = int(parts[2])
            except ValueError:
                raise CloudParseError("element count is not an integer", path=path, line=lineno)
            elements.append({"name": parts[1], "count": count, "properties": []})
        elif parts[0] == "property":
            if not elements:
                raise CloudParseError("property before any element", path=path, line=lineno)
            if parts[1] == "list":
                elements[-1]["properties"].append(("list", parts[-1]))
            else:
                if len(parts) != 3 or parts[1] not in PLY_TYPES:
                    raise CloudParseError(f"unsupported property '{line.strip()}'", path=path, line=lineno)
                elements[-1]["properties"].append((PLY_TYPES[parts[1]], parts[2]))
        else:
            raise CloudParseError(f"unknown header keyword '{parts[0]}'", path=path, line=lineno)

    if fmt is None:
        raise CloudParseError("ply header has no format line", path=path)
    return fmt, elements, body_offset


def _read_ply(path: Path) -> PointCloud:
    blob = path.read_bytes()
    fmt, elements, offset = _parse_ply_header(path, blob)
    if not elements or elements[0]["name"] != "vertex":
        raise CloudParseError("vertex must be the first ply element", path=path)
    vertex = elements[0]
    props = vertex["properties"]
    if any(kind == "list" for kind, _ in props):
        raise CloudParseError("list properties on vertex are not supported", path=path)
    names = [name for _, name in props]
    for required in ("x", "y", "z"):
        if required not in names:
            raise CloudParseError(f"vertex element lacks '{required}'", path=path)
    count = vertex["count"]
    if count == 0:
        raise CloudParseError("zero points", path=path)

    if fmt == "ascii":
        text = blob[offset:].decode("ascii", errors="replace").splitlines()
        header_lines = blob[:offset].count(b"\n")
        rows = []
        for i in range(count):
            lineno = header_lines + i + 1
            if i >= len(text):
                raise CloudParseError(f"expected {count} vertices, found {i}", path=path, line=lineno)
            tokens = text[i].split()
            if len(tokens) < len(props):
                raise CloudParseError(f"expected {len(props)} values, found {len(tokens)}",
                                      path=path, line=lineno)
            try:
                rows.append([float(t) for t in tokens[:len(props)]])
            except ValueError:
                raise CloudParseError("not a number", path=path, line=lineno)
        table = np.asarray(rows, dtype=np.float64)
        columns = {name: table[:, j] for j, name in enumerate(names)}
    else:
        dtype = np.dtype([(name, "<" + kind) for kind, name in props])
        needed = dtype.itemsize * count
        if len(blob) - offset < needed:
            raise CloudParseError(f"binary payload truncated: need {needed} bytes",
                                  path=path, offset=len(blob))
        records = np.frombuffer(blob, dtype=dtype, count=count, offset=offset)
        columns = {name: records[name] for name in names}

    positions = np.column_stack([columns["x"], columns["y"], columns["z"]]).astype(np.float64)
    bad = np.nonzero(~np.all(np.isfinite(positions), axis=1))[0]
    if bad.size:
        raise CloudParseError(f"non-finite value at vertex {int(bad[0])}", path=path)

    normals = None
    if all(n in columns for n in NORMAL_FIELDS):
        normals = np.column_stack([columns[n] for n in NORMAL_FIELDS]).astype(np.float64)
        if not np.all(np.isfinite(normals)):
            raise CloudParseError("non-finite normal", path=path)
        normals = _unit_normals(normals, path)

    labels = None
    if "label" in columns:
        labels = np.asarray(columns["label"]).astype(np.int64)

    skip = set(("x", "y", "z", "label") + (NORMAL_FIELDS if normals is not None else ()))
    attributes = {name: np.array(columns[name]) for name in names if name not in skip}
    return PointCloud(positions=positions, normals=normals, labels=labels, attributes=attributes)


def _ply_columns(cloud: PointCloud) -> List[Tuple[str, str, np.ndarray]]:
    columns = [(axis, "f8", cloud.positions[:, j]) for j, axis in enumerate("xyz")]
    if cloud.normals is not None:
        columns += [(name, "f8", cloud.normals[:, j]) for j, name in enumerate(NORMAL_FIELDS)]
    if cloud.labels is not None:
        columns.append(("label", "i4", cloud.labels))
    for name, values in cloud.attributes.items():
        values = np.asarray(values)
        if values.ndim == 1:
            kind = "i4" if values.dtype.kind in "iub" else "f8"
            columns.append((name, kind, values))
        else:
            for j in range(values.shape[1]):
                columns.append((f"{name}_{j}", "f8", values[:, j]))
    return columns


def _write_ply(cloud: PointCloud, path: Path, binary: bool) -> None:
    columns = _ply_columns(cloud)
    ply_name = {"f8": "double", "i4": "int"}
    header = ["ply",
              f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
              f"element vertex {len(cloud)}"]
    header += [f"property {ply_name[kind]} {name}" for name, kind, _ in columns]
    header.append("end_header")
    head = ("\n".join(header) + "\n").encode("ascii")

    if binary:
        dtype = np.dtype([(name, "<" + kind) for name, kind, _ in columns])
        records = np.empty(len(cloud), dtype=dtype)
        for name, _, values in columns:
            records[name] = values
        path.write_bytes(head + records.tobytes())
        return

    fmts = ["%d" if kind == "i4" else "%.17g" for _, kind, _ in columns]
    table = np.empty((len(cloud), len(columns)), dtype=object)
    for j, (_, kind, values) in enumerate(columns):
        table[:, j] = values.astype(np.int64) if kind == "i4" else values.astype(np.float64)
    with open(path, "wb") as f:
        f.write(head)
        np.savetxt(f, table, fmt=fmts)


# ---------------------------------------------------------------- public API

def load_cloud(path: PathLike, fmt: Optional[str] = None) -> PointCloud:
    """
    Read a point cloud.

    Args:
        path: File path
        fmt: 'xyz' or 'ply'; inferred from the suffix when omitted

    Returns:
        PointCloud with normals iff the file carries nx,ny,nz (renormalized)
    """
    path = Path(path)
    fmt = infer_format(path, fmt)
    if not path.is_file():
        raise ValidationError(f"input not found: {path}", field="input")
    cloud = _read_xyz(path) if fmt == "xyz" else _read_ply(path)
    logger.info("Loaded cloud", path=str(path), format=fmt, n_points=len(cloud),
                normals=cloud.has_normals)
    return cloud


def save_cloud(cloud: PointCloud, path: PathLike, fmt: Optional[str] = None,
               binary: bool = False) -> Path:
    """Write a cloud as XYZ (positions[, normals]) or PLY (all per-point data)."""
    path = Path(path)
    fmt = infer_format(path, fmt)
    if fmt == "xyz":
        _write_xyz(cloud, path)
    else:
        _write_ply(cloud, path, binary)
    return path


def write_fmat(path: PathLike, matrix: np.ndarray) -> Path:
    """Write a 1-D or 2-D real array in FMAT layout (vectors become one column)."""
    matrix = np.asarray(matrix, dtype="<f8")
    if matrix.ndim == 1:
        matrix = matrix[:, None]
    if matrix.ndim != 2:
        raise ValidationError("FMAT holds 2-D matrices only", field="matrix")
    header = np.array([(FMAT_MAGIC, matrix.shape[0], matrix.shape[1])], dtype=_FMAT_HEADER)
    path = Path(path)
    path.write_bytes(header.tobytes() + np.ascontiguousarray(matrix).tobytes())
    return path


def read_fmat(path: PathLike) -> np.ndarray:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < _FMAT_HEADER.itemsize:
        raise CloudParseError("file shorter than FMAT header", path=path, offset=len(blob))
    header = np.frombuffer(blob, dtype=_FMAT_HEADER, count=1)[0]
    if header["magic"] != FMAT_MAGIC:
        raise CloudParseError("bad FMAT magic", path=path, offset=0)
    rows, cols = int(header["rows"]), int(header["cols"])
    expected = _FMAT_HEADER.itemsize + 8 * rows * cols
    if len(blob) != expected:
        raise CloudParseError(f"FMAT payload is {len(blob)} bytes, expected {expected}",
                              path=path, offset=min(len(blob), expected))
    data = np.frombuffer(blob, dtype="<f8", offset=_FMAT_HEADER.itemsize, count=rows * cols)
    return data.reshape(rows, cols).astype(np.float64)


def read_labels(path: PathLike) -> np.ndarray:
    """One integer label per line; blank lines ignored."""
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"label file not found: {path}", field="labels")
    labels = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            text = raw.strip()
            if not text:
                continue
            try:
                labels.append(int(text))
            except ValueError:
                raise CloudParseError(f"label '{text[:30]}' is not an integer", path=path, line=lineno)
    if not labels:
        raise CloudParseError("zero labels", path=path)
    return np.asarray(labels, dtype=np.int64)


def write_labels(path: PathLike, labels: np.ndarray) -> Path:
    path = Path(path)
    np.savetxt(path, np.asarray(labels, dtype=np.int64), fmt="%d")
    return path


def _json_default(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"not JSON serializable: {type(value).__name__}")


def write_json(path: PathLike, payload: Dict[str, Any]) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, default=_json_default)
    return path


def dumps_json(payload: Dict[str, Any]) -> str:
    return json.dumps(payload, indent=2, default=_json_default)


def read_json(path: PathLike) -> Dict[str, Any]:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def export_csv(path: PathLike, columns: Dict[str, np.ndarray]) -> Path:
    """Tabular export; 2-D entries expand to name_0, name_1, ..."""
    flat = {}
    for name, values in columns.items():
        values = np.asarray(values)
        if values.ndim == 1:
            flat[name] = values
        else:
            for j in range(values.shape[1]):
                flat[f"{name}_{j}"] = values[:, j]
    path = Path(path)
    pd.DataFrame(flat).to_csv(path, index=False)
    return path


def file_digest(path: PathLike) -> str:
    """sha256 of a file's bytes."""
    sha = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            sha.update(chunk)
    return sha.hexdigest()
