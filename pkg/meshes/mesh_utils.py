"""
Reading and writing ASCII meshes (OFF, OBJ, PLY) and correspondence files.

Vertex order is preserved exactly as it appears in the file, because
correspondence files index vertices by position. OBJ's 1-based face indices
are converted to 0-based here; everything past this module is 0-based.
Polygons with more than three corners are fan-triangulated.
"""
import logging
from pathlib import Path

import numpy as np

from specmatch.storage import atomic_write
from .mesh import Correspondence, CorrespondenceError, Mesh, MeshError

logger = logging.getLogger(__name__)

SUPPORTED_EXTENSIONS = ('.off', '.obj', '.ply')


class MeshFormatError(MeshError):
    """Parse error; `line` is the 1-based line number in the file (or None)."""

    def __init__(self, message, path=None, line=None):
        location = f'{path}:{line}: ' if path and line else (f'{path}: ' if path else '')
        super().__init__(f'{location}{message}')
        self.path = path
        self.line = line


class UnsupportedFormatError(MeshError):
    pass


def _content_lines(text, comment='#'):
    """Yield (line_number, tokens) for non-blank, non-comment lines."""
    for number, raw in enumerate(text.splitlines(), 1):
        stripped = raw.split(comment, 1)[0].strip() if comment else raw.strip()
        if stripped:
            yield number, stripped.split()


def _fan(corners):
    return [(corners[0], corners[i], corners[i + 1]) for i in range(1, len(corners) - 1)]


def _floats(tokens, count, path, line):
    if len(tokens) < count:
        raise MeshFormatError(f'expected {count} coordinates, found {len(tokens)}', path, line)
    try:
        return [float(tok) for tok in tokens[:count]]
    except ValueError as e:
        raise MeshFormatError(f'bad number: {e}', path, line) from e


def _ints(tokens, path, line):
    try:
        return [int(tok) for tok in tokens]
    except ValueError as e:
        raise MeshFormatError(f'bad integer: {e}', path, line) from e


def _check_face(corners, n_vertices, path, line):
    if len(corners) < 3:
        raise MeshFormatError(f'face needs at least 3 corners, found {len(corners)}', path, line)
    for index in corners:
        if not 0 <= index < n_vertices:
            raise MeshFormatError(
                f'face index {index} outside [0, {n_vertices})', path, line
            )


def parse_off(text, path=None):
    lines = list(_content_lines(text))
    if not lines:
        raise MeshFormatError('empty file', path)
    number, tokens = lines[0]
    if tokens[0] != 'OFF':
        raise MeshFormatError(f'expected OFF header, found {tokens[0]!r}', path, number)

    cursor = 1
    counts = tokens[1:]
    count_line = number
    if not counts:
        if len(lines) < 2:
            raise MeshFormatError('missing counts line', path, number)
        count_line, counts = lines[1]
        cursor = 2
    counts = _ints(counts[:3], path, count_line)
    if len(counts) < 2:
        raise MeshFormatError('counts line needs vertex and face counts', path, count_line)
    n_vertices, n_faces = counts[0], counts[1]

    body = lines[cursor:]
    if len(body) < n_vertices + n_faces:
        last = body[-1][0] if body else count_line
        raise MeshFormatError(
            f'expected {n_vertices} vertices and {n_faces} faces, file ends early', path, last
        )

    vertices = [_floats(tok, 3, path, num) for num, tok in body[:n_vertices]]
    triangles = []
    for num, tok in body[n_vertices:n_vertices + n_faces]:
        values = _ints(tok, path, num)
        size = values[0]
        corners = values[1:1 + size]
        if len(corners) != size:
            raise MeshFormatError(f'face declares {size} corners, found {len(corners)}', path, num)
        _check_face(corners, n_vertices, path, num)
        triangles.extend(_fan(corners))
    return vertices, triangles


def parse_obj(text, path=None):
    vertices = []
    faces = []
    for number, tokens in _content_lines(text):
        record = tokens[0]
        if record == 'v':
            vertices.append(_floats(tokens[1:], 3, path, number))
        elif record == 'f':
            corners = []
            for ref in tokens[1:]:
                head = ref.split('/', 1)[0]
                (index,) = _ints([head], path, number)
                if index == 0:
                    raise MeshFormatError('OBJ face indices are 1-based; found 0', path, number)
                corners.append(index)
            faces.append((number, corners, len(vertices)))
        # other records (vt, vn, g, o, s, usemtl, ...) are ignored

    n_vertices = len(vertices)
    triangles = []
    for number, corners, seen in faces:
        # negative indices are relative to the vertices defined so far
        zero_based = [c - 1 if c > 0 else seen + c for c in corners]
        _check_face(zero_based, n_vertices, path, number)
        triangles.extend(_fan(zero_based))
    return vertices, triangles


def parse_ply(text, path=None):
    lines = list(_content_lines(text, comment=None))
    if not lines or lines[0][1][0] != 'ply':
        raise MeshFormatError('missing ply magic', path, lines[0][0] if lines else None)

    elements = []
    header_end = None
    for index, (number, tokens) in enumerate(lines[1:], 1):
        keyword = tokens[0]
        if keyword == 'format':
            if len(tokens) < 2 or tokens[1] != 'ascii':
                raise UnsupportedFormatError(
                    f'{path}: only ASCII PLY is supported, found format {" ".join(tokens[1:])!r}'
                )
        elif keyword == 'element':
            if len(tokens) != 3:
                raise MeshFormatError('element line needs a name and a count', path, number)
            elements.append({'name': tokens[1], 'count': _ints([tokens[2]], path, number)[0], 'props': []})
        elif keyword == 'property':
            if not elements:
                raise MeshFormatError('property before any element', path, number)
            elements[-1]['props'].append(tokens[1:])
        elif keyword == 'end_header':
            header_end = index
            break
        # comment / obj_info lines are skipped

    if header_end is None:
        raise MeshFormatError('missing end_header', path)

    body = lines[header_end + 1:]
    cursor = 0
    vertices = []
    triangles = []
    n_vertices = None
    for element in elements:
        rows = body[cursor:cursor + element['count']]
        if len(rows) < element['count']:
            raise MeshFormatError(f"element {element['name']!r} ends early", path, body[-1][0] if body else None)
        cursor += element['count']

        if element['name'] == 'vertex':
            names = [prop[-1] for prop in element['props']]
            try:
                columns = [names.index(axis) for axis in ('x', 'y', 'z')]
            except ValueError as e:
                raise MeshFormatError('vertex element lacks x/y/z properties', path) from e
            for number, tokens in rows:
                row = _floats(tokens, len(names), path, number)
                vertices.append([row[c] for c in columns])
            n_vertices = len(vertices)
        elif element['name'] == 'face':
            if n_vertices is None:
                raise MeshFormatError('face element before vertex element', path)
            for number, tokens in rows:
                values = _ints(tokens, path, number)
                size = values[0]
                corners = values[1:1 + size]
                if len(corners) != size:
                    raise MeshFormatError(f'face declares {size} corners, found {len(corners)}', path, number)
                _check_face(corners, n_vertices, path, number)
                triangles.extend(_fan(corners))
    return vertices, triangles


PARSERS = {
    '.off': parse_off,
    '.obj': parse_obj,
    '.ply': parse_ply,
}


def load_mesh(path, name=None):
    """
    Load an ASCII OFF/OBJ/PLY file into a validated Mesh.

    No rescaling, centering or remeshing happens here.
    """
    path = Path(path)
    extension = path.suffix.lower()
    if extension not in PARSERS:
        raise UnsupportedFormatError(
            f'{path}: unsupported mesh format {extension!r} (expected one of {", ".join(SUPPORTED_EXTENSIONS)})'
        )
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise MeshError(f'Cannot read {path}: {e}') from e
    try:
        text = raw.decode('ascii')
    except UnicodeDecodeError as e:
        raise UnsupportedFormatError(f'{path}: not an ASCII file ({e})') from e

    vertices, triangles = PARSERS[extension](text, path)
    mesh = Mesh(
        np.asarray(vertices, dtype=np.float64).reshape(-1, 3),
        np.asarray(triangles, dtype=np.int64).reshape(-1, 3),
        name or path.stem,
    )
    logger.debug('Loaded %s from %s', mesh, path)
    return mesh


def _fmt(value):
    return format(float(value), '.17g')


def write_mesh(mesh, path):
    """Write `mesh` in the format implied by the file extension."""
    path = Path(path)
    extension = path.suffix.lower()
    if extension not in PARSERS:
        raise UnsupportedFormatError(f'{path}: unsupported mesh format {extension!r}')

    with atomic_write(path) as fh:
        if extension == '.off':
            fh.write('OFF\n')
            fh.write(f'{mesh.n_vertices} {mesh.n_triangles} 0\n')
            for v in mesh.vertices:
                fh.write(' '.join(_fmt(c) for c in v) + '\n')
            for t in mesh.triangles:
                fh.write(f'3 {t[0]} {t[1]} {t[2]}\n')
        elif extension == '.obj':
            fh.write(f'# {mesh.name}\n')
            for v in mesh.vertices:
                fh.write('v ' + ' '.join(_fmt(c) for c in v) + '\n')
            for t in mesh.triangles:
                fh.write(f'f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n')
        else:
            fh.write('ply\nformat ascii 1.0\n')
            fh.write(f'element vertex {mesh.n_vertices}\n')
            fh.write('property double x\nproperty double y\nproperty double z\n')
            fh.write(f'element face {mesh.n_triangles}\n')
            fh.write('property list uchar int vertex_indices\nend_header\n')
            for v in mesh.vertices:
                fh.write(' '.join(_fmt(c) for c in v) + '\n')
            for t in mesh.triangles:
                fh.write(f'3 {t[0]} {t[1]} {t[2]}\n')
    return path


def total_area(mesh):
    return float(mesh.triangle_areas.sum())


def load_correspondence(path, n_source, n_target, source_name='source', target_name='target'):
    """
    Read a 0-based, one-index-per-line correspondence file.

    The file must hold exactly `n_source` entries, each in [0, n_target).
    """
    path = Path(path)
    try:
        lines = path.read_text(encoding='ascii').splitlines()
    except (OSError, UnicodeDecodeError) as e:
        raise CorrespondenceError(f'Cannot read correspondence {path}: {e}') from e

    # a trailing blank line from the final LF is fine, blank lines inside are not
    while lines and not lines[-1].strip():
        lines.pop()
    if len(lines) != n_source:
        raise CorrespondenceError(
            f'{path}: expected {n_source} entries, found {len(lines)}'
        )

    values = np.empty(n_source, dtype=np.int64)
    for number, raw in enumerate(lines, 1):
        try:
            value = int(raw.strip())
        except ValueError as e:
            raise CorrespondenceError(f'{path}:{number}: not an integer: {raw!r}') from e
        if not 0 <= value < n_target:
            raise CorrespondenceError(
                f'{path}:{number}: index {value} outside [0, {n_target})'
            )
        values[number - 1] = value

    return Correspondence(values, source_name, target_name, n_target=n_target)


def write_correspondence(correspondence, path):
    path = Path(path)
    with atomic_write(path) as fh:
        for value in correspondence.source_to_target:
            fh.write(f'{int(value)}\n')
    return path
