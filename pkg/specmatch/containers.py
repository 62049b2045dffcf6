"""
Binary container used for spectra caches, checkpoints and functional-map dumps.

Layout:
    b'SPMC'                       magic
    uint32 little-endian          header length in bytes
    UTF-8 JSON header             caller fields + "tensors" directory
    payload                       little-endian float64 arrays, row-major

The tensor directory maps each name to {"offset": bytes into the payload,
"shape": [...]}. Headers are serialized with sorted keys so identical
inputs give identical bytes.
"""
import json
import struct

import numpy as np

from specmatch.exceptions import DataError
from specmatch.storage import atomic_write

MAGIC = b'SPMC'
_LE_F64 = np.dtype('<f8')


class ContainerError(DataError):
    pass


def write_container(path, header, tensors):
    """Write `header` (JSON-serializable dict) and named float64 arrays to `path`."""
    if 'tensors' in header:
        raise ValueError("'tensors' is reserved in container headers")

    directory = {}
    chunks = []
    offset = 0
    for name, array in tensors.items():
        data = np.ascontiguousarray(np.asarray(array, dtype=_LE_F64))
        directory[name] = {'offset': offset, 'shape': list(data.shape)}
        raw = data.tobytes(order='C')
        chunks.append(raw)
        offset += len(raw)

    full_header = dict(header, tensors=directory)
    header_bytes = json.dumps(full_header, sort_keys=True, separators=(',', ':')).encode('utf-8')

    with atomic_write(path, mode='wb') as fh:
        fh.write(MAGIC)
        fh.write(struct.pack('<I', len(header_bytes)))
        fh.write(header_bytes)
        for raw in chunks:
            fh.write(raw)


def read_container(path):
    """Return (header, {name: ndarray}) for a container file."""
    try:
        with open(path, 'rb') as fh:
            blob = fh.read()
    except OSError as e:
        raise ContainerError(f'Cannot read container {path}: {e}') from e

    if blob[:4] != MAGIC:
        raise ContainerError(f'{path} is not a specmatch container (bad magic)')
    if len(blob) < 8:
        raise ContainerError(f'{path} is truncated')
    (header_len,) = struct.unpack('<I', blob[4:8])
    header_end = 8 + header_len
    try:
        header = json.loads(blob[8:header_end].decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ContainerError(f'{path} has a corrupt header: {e}') from e

    payload = memoryview(blob)[header_end:]
    tensors = {}
    for name, entry in header.get('tensors', {}).items():
        shape = tuple(entry['shape'])
        count = int(np.prod(shape)) if shape else 1
        start = entry['offset']
        stop = start + count * _LE_F64.itemsize
        if stop > len(payload):
            raise ContainerError(f'{path}: tensor {name!r} runs past the end of the file')
        array = np.frombuffer(payload[start:stop], dtype=_LE_F64).reshape(shape)
        tensors[name] = array.astype(np.float64, copy=True)
    return header, tensors
