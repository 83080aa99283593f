"""
Point cloud, class catalog and label file input/output.

Supported cloud formats:
- ASCII XYZ: whitespace-separated columns, one point per line, ``#`` comments.
  The column layout (schema) is ``xyz``, ``xyzl``, ``xyzrgb`` or ``xyzrgbl``.
- Binary PLY (little-endian): ``vertex`` element with float x/y/z, optional
  uchar red/green/blue and an optional integer ``label`` (or ``class``).

Colors are stored in files as 0-255 channels and held in memory in [0, 1].
"""
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from plyfile import PlyData, PlyElement, PlyParseError

from utils.errors import (
    FormatError, ParameterError, ParseError, StorageError, ValidationError
)
from utils.strategies import CloudFormat

logger = logging.getLogger(__name__)

# column count -> schema when the file does not declare one
ASCII_SCHEMAS = {3: 'xyz', 4: 'xyzl', 6: 'xyzrgb', 7: 'xyzrgbl'}
SCHEMA_WIDTHS = {schema: width for width, schema in ASCII_SCHEMAS.items()}

PLY_SUFFIXES = {'.ply'}


def _frozen(array, dtype):
    out = np.array(array, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


def as_point(p0):
    """Return ``p0`` as a finite float64 3-vector or raise ParameterError."""
    point = np.asarray(p0, dtype=np.float64).reshape(-1)
    if point.shape != (3,):
        raise ParameterError(f"expected a 3D point, got shape {np.shape(p0)}")
    if not np.all(np.isfinite(point)):
        raise ParameterError(f"query point must be finite, got {point.tolist()}")
    return point


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Immutable set of 3D points with optional colors and class labels.

    Parameters
    ----------
    positions : array-like, shape (n, 3)
        Coordinates in meters, stored as float64.
    colors : array-like, shape (n, 3), optional
        RGB channels in [0, 1].
    labels : array-like of int, shape (n,), optional
        Class ids, 0 meaning "unclassified".
    """
    positions: np.ndarray
    colors: np.ndarray | None = None
    labels: np.ndarray | None = None

    def __post_init__(self):
        positions = np.asarray(self.positions, dtype=np.float64)
        if positions.size == 0:
            positions = positions.reshape(0, 3)
        if positions.ndim != 2 or positions.shape[1] != 3:
            raise ValidationError(f"positions must have shape (n, 3), got {positions.shape}")
        if not np.all(np.isfinite(positions)):
            bad = int(np.flatnonzero(~np.all(np.isfinite(positions), axis=1))[0])
            raise ValidationError(f"non-finite coordinate at point {bad}")
        n = len(positions)
        object.__setattr__(self, 'positions', _frozen(positions, np.float64))

        if self.colors is not None:
            colors = np.asarray(self.colors, dtype=np.float64)
            if colors.size == 0:
                colors = colors.reshape(0, 3)
            if colors.shape != (n, 3):
                raise ValidationError(f"colors must have shape ({n}, 3), got {colors.shape}")
            if not np.all(np.isfinite(colors)) or (n and (colors.min() < 0 or colors.max() > 1)):
                raise ValidationError("color channels must lie in [0, 1]")
            object.__setattr__(self, 'colors', _frozen(colors, np.float64))

        if self.labels is not None:
            labels = np.asarray(self.labels)
            if labels.size == 0:
                labels = labels.reshape(0).astype(np.int32)
            if labels.shape != (n,):
                raise ValidationError(f"labels must have shape ({n},), got {labels.shape}")
            if labels.dtype.kind not in 'iu':
                raise ValidationError(f"labels must be integers, got dtype {labels.dtype}")
            if n and labels.min() < 0:
                raise ValidationError("labels must be non-negative")
            object.__setattr__(self, 'labels', _frozen(labels, np.int32))

    def __len__(self):
        return len(self.positions)

    @property
    def has_colors(self):
        return self.colors is not None

    @property
    def has_labels(self):
        return self.labels is not None

    def without_colors(self):
        return replace(self, colors=None)

    def min_corner(self):
        if len(self) == 0:
            return np.zeros(3)
        return self.positions.min(axis=0)


@dataclass(frozen=True)
class ClassCatalog:
    """Ordered class ids with names, plus the id excluded from training and scoring."""
    classes: tuple
    ignored_id: int = 0

    def __post_init__(self):
        classes = tuple((int(class_id), str(name)) for class_id, name in self.classes)
        ids = [class_id for class_id, _ in classes]
        if len(set(ids)) != len(ids):
            raise ParameterError(f"duplicate class ids in catalog: {ids}")
        if any(class_id < 0 for class_id in ids) or self.ignored_id < 0:
            raise ParameterError("class ids must be non-negative")
        object.__setattr__(self, 'classes', classes)
        object.__setattr__(self, 'ignored_id', int(self.ignored_id))

    @property
    def ids(self):
        """Scored class ids in catalog order."""
        return tuple(class_id for class_id, _ in self.classes if class_id != self.ignored_id)

    def name(self, class_id):
        for known_id, name in self.classes:
            if known_id == class_id:
                return name
        return f"class_{class_id}"

    @classmethod
    def parse(cls, text, ignored_id=0):
        """Build a catalog from ``"1:ground,2:facade"``."""
        classes = []
        for item in text.split(','):
            item = item.strip()
            if not item:
                continue
            class_id, sep, name = item.partition(':')
            try:
                class_id = int(class_id)
            except ValueError:
                raise ParameterError(f"bad class entry {item!r}, expected id:name") from None
            classes.append((class_id, name.strip() if sep else f"class_{class_id}"))
        if not classes:
            raise ParameterError("class catalog is empty")
        return cls(tuple(classes), ignored_id)

    def to_text(self):
        return ','.join(f"{class_id}:{name}" for class_id, name in self.classes)

    @classmethod
    def from_labels(cls, labels, ignored_id=0):
        ids = sorted(int(v) for v in np.unique(labels) if v != ignored_id)
        return cls(tuple((class_id, f"class_{class_id}") for class_id in ids), ignored_id)


def format_from_path(path):
    """Pick the cloud format from the file suffix (``.ply`` is binary PLY)."""
    return CloudFormat.ply_binary if Path(path).suffix.lower() in PLY_SUFFIXES else CloudFormat.ascii_xyz


def _parse_format(fmt, path):
    if fmt is None:
        return format_from_path(path)
    if isinstance(fmt, CloudFormat):
        return fmt
    try:
        return CloudFormat[str(fmt).replace('-', '_')]
    except KeyError:
        raise ParameterError(f"unknown cloud format {fmt!r}") from None


def load_cloud(path, fmt=None, schema=None):
    """Load a point cloud.

    Parameters
    ----------
    path : str or Path
    fmt : CloudFormat or str, optional
        ``ascii-xyz`` or ``ply-binary``; inferred from the suffix when omitted.
    schema : str, optional
        ASCII column layout, overriding the file's declaration and the
        column-count inference.
    """
    path = Path(path)
    if not path.is_file():
        raise StorageError(f"no such cloud file: {path}")
    fmt = _parse_format(fmt, path)
    if fmt == CloudFormat.ply_binary:
        cloud = _read_ply(path)
    else:
        cloud = _read_ascii(path, schema)
    logger.debug("Loaded %d points from %s (colors=%s, labels=%s)",
                 len(cloud), path, cloud.has_colors, cloud.has_labels)
    return cloud


def save_cloud(cloud, path, fmt=None):
    """Write a point cloud; binary PLY keeps positions bit-exact."""
    if not str(path):
        raise StorageError("empty output path")
    path = Path(path)
    fmt = _parse_format(fmt, path)
    try:
        if fmt == CloudFormat.ply_binary:
            _write_ply(cloud, path)
        else:
            _write_ascii(cloud, path)
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from exc
    logger.debug("Saved %d points to %s", len(cloud), path)


def _resolve_schema(schema, width, line):
    if schema is None:
        if width not in ASCII_SCHEMAS:
            raise FormatError(f"line {line}: cannot infer schema from {width} columns")
        return ASCII_SCHEMAS[width]
    if schema not in SCHEMA_WIDTHS:
        raise ParameterError(f"unknown ASCII schema {schema!r}, expected one of {sorted(SCHEMA_WIDTHS)}")
    if SCHEMA_WIDTHS[schema] != width:
        raise FormatError(f"line {line}: schema {schema} needs {SCHEMA_WIDTHS[schema]} columns, found {width}")
    return schema


def _read_ascii(path, schema):
    declared = None
    rows, labels, line_numbers = [], [], []
    width = None
    with open(path, 'rb') as handle:
        for number, raw in enumerate(handle, start=1):
            try:
                text = raw.decode('utf-8').strip()
            except UnicodeDecodeError:
                raise ParseError('not UTF-8 text', line=number) from None
            if not text:
                continue
            if text.startswith('#'):
                body = text[1:].strip()
                if declared is None and body.startswith('schema:'):
                    declared = body.split(':', 1)[1].strip()
                continue
            tokens = text.split()
            if width is None:
                width = len(tokens)
                schema = _resolve_schema(schema or declared, width, number)
            elif len(tokens) != width:
                raise FormatError(f"line {number}: expected {width} columns, found {len(tokens)}")
            value_tokens = tokens[:-1] if schema.endswith('l') else tokens
            try:
                row = [float(token) for token in value_tokens]
            except ValueError:
                raise ParseError(f"not a decimal number in {text!r}", line=number) from None
            if not all(math.isfinite(v) for v in row[:3]):
                raise ValidationError(f"line {number}: non-finite coordinate")
            if schema.endswith('l'):
                try:
                    labels.append(int(tokens[-1]))
                except ValueError:
                    raise ParseError(f"label {tokens[-1]!r} is not an integer", line=number) from None
            rows.append(row)
            line_numbers.append(number)

    if width is None:
        # no data lines: the schema only decides which optional arrays exist
        schema = schema or declared or 'xyz'
        if schema not in SCHEMA_WIDTHS:
            raise ParameterError(f"unknown ASCII schema {schema!r}")
    n_values = 6 if 'rgb' in schema else 3
    values = np.array(rows, dtype=np.float64).reshape(len(rows), n_values)

    colors = None
    if 'rgb' in schema:
        channels = values[:, 3:6]
        out_of_range = np.flatnonzero(np.any((channels < 0) | (channels > 255) | ~np.isfinite(channels), axis=1))
        if len(out_of_range):
            raise ValidationError(f"line {line_numbers[out_of_range[0]]}: color channel outside [0, 255]")
        colors = channels / 255.0
    label_array = None
    if schema.endswith('l'):
        label_array = np.array(labels, dtype=np.int64)
        if len(label_array) and label_array.min() < 0:
            bad = int(np.flatnonzero(label_array < 0)[0])
            raise ValidationError(f"line {line_numbers[bad]}: negative label")
    return PointCloud(values[:, :3], colors, label_array)


def _write_ascii(cloud, path):
    schema = 'xyz' + ('rgb' if cloud.has_colors else '') + ('l' if cloud.has_labels else '')
    columns = [cloud.positions]
    fmt = ['%.17g'] * 3
    if cloud.has_colors:
        columns.append(np.rint(cloud.colors * 255.0))
        fmt += ['%d'] * 3
    if cloud.has_labels:
        columns.append(cloud.labels.astype(np.float64)[:, None])
        fmt += ['%d']
    table = np.hstack(columns) if len(cloud) else np.empty((0, len(fmt)))
    with open(path, 'w', encoding='utf-8') as handle:
        handle.write(f"# schema: {schema}\n")
        if len(table):
            np.savetxt(handle, table, fmt=fmt, delimiter=' ')


def _read_ply(path):
    try:
        ply = PlyData.read(str(path))
    except PlyParseError as exc:
        raise ParseError(f"{path}: {exc}", line=getattr(exc, 'line', None)) from exc
    if ply.text or ply.byte_order != '<':
        raise FormatError(f"{path}: only binary little-endian PLY is supported")
    if 'vertex' not in [element.name for element in ply.elements]:
        raise FormatError(f"{path}: missing 'vertex' element")
    data = ply['vertex'].data
    names = data.dtype.names or ()

    for axis in 'xyz':
        if axis not in names:
            raise FormatError(f"{path}: vertex property {axis!r} missing")
        if data.dtype[axis].kind != 'f':
            raise FormatError(f"{path}: vertex property {axis!r} must be float32 or float64")
    positions = np.column_stack([data[axis].astype(np.float64) for axis in 'xyz']) if len(data) else np.empty((0, 3))

    colors = None
    channels = [name for name in ('red', 'green', 'blue') if name in names]
    if channels:
        if len(channels) != 3:
            raise FormatError(f"{path}: incomplete color properties {channels}")
        if any(data.dtype[name] != np.uint8 for name in channels):
            raise FormatError(f"{path}: color properties must be uchar")
        colors = np.column_stack([data[name] for name in channels]).astype(np.float64) / 255.0 if len(data) else np.empty((0, 3))

    labels = None
    label_name = next((name for name in ('label', 'class') if name in names), None)
    if label_name is not None:
        if data.dtype[label_name].kind not in 'iu':
            raise FormatError(f"{path}: {label_name!r} property must be an integer")
        labels = np.asarray(data[label_name], dtype=np.int64)
    return PointCloud(positions, colors, labels)


def _write_ply(cloud, path):
    dtype = [('x', '<f8'), ('y', '<f8'), ('z', '<f8')]
    if cloud.has_colors:
        dtype += [('red', 'u1'), ('green', 'u1'), ('blue', 'u1')]
    if cloud.has_labels:
        dtype += [('label', '<i4')]
    vertex = np.empty(len(cloud), dtype=dtype)
    for axis, name in enumerate('xyz'):
        vertex[name] = cloud.positions[:, axis]
    if cloud.has_colors:
        rgb = np.rint(cloud.colors * 255.0).astype(np.uint8)
        for channel, name in enumerate(('red', 'green', 'blue')):
            vertex[name] = rgb[:, channel]
    if cloud.has_labels:
        vertex['label'] = cloud.labels
    PlyData([PlyElement.describe(vertex, 'vertex')], text=False, byte_order='<').write(str(path))


def save_labels(labels, path):
    """Write one base-10 integer per line."""
    labels = np.asarray(labels).reshape(-1)
    if labels.size and labels.dtype.kind not in 'iu':
        raise ParameterError(f"labels must be integers, got dtype {labels.dtype}")
    if not str(path):
        raise StorageError("empty output path")
    try:
        with open(path, 'w', encoding='utf-8', newline='\n') as handle:
            if labels.size:
                handle.write('\n'.join(map(str, labels.tolist())))
                handle.write('\n')
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from exc


def read_text(path):
    """Whole file as UTF-8 text; undecodable bytes raise ``ParseError`` with their line."""
    data = Path(path).read_bytes()
    try:
        return data.decode('utf-8')
    except UnicodeDecodeError as exc:
        raise ParseError("not UTF-8 text", line=data.count(b'\n', 0, exc.start) + 1) from None


def load_labels(path):
    """Read a label file written by :func:`save_labels`."""
    path = Path(path)
    if not path.is_file():
        raise StorageError(f"no such label file: {path}")
    lines = read_text(path).split('\n')
    if lines and lines[-1] == '':
        lines.pop()
    try:
        return np.array([int(line) for line in lines], dtype=np.int64)
    except ValueError:
        pass
    for number, line in enumerate(lines, start=1):
        try:
            int(line)
        except ValueError:
            raise ParseError(f"{line!r} is not an integer", line=number) from None
    raise ParseError("unreadable label file")
