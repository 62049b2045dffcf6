"""
Output-file helpers: atomic writes and run provenance.
"""
import json
import logging
import os
import platform
import sys
import tempfile
from contextlib import contextmanager
from importlib import metadata
from pathlib import Path

logger = logging.getLogger(__name__)

PROVENANCE_PACKAGES = ['numpy', 'scipy', 'django', 'matplotlib', 'python-dotenv']


@contextmanager
def atomic_write(path, mode='w', encoding='utf-8'):
    """
    Open a temp file next to `path`, yield it, and move it into place only if
    the block finishes without raising. Text mode writes LF line endings.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f'.{path.name}.', suffix='.tmp', dir=path.parent)
    binary = 'b' in mode
    try:
        if binary:
            handle = os.fdopen(fd, mode)
        else:
            handle = os.fdopen(fd, mode, encoding=encoding, newline='\n')
        with handle:
            yield handle
        os.replace(tmp_name, path)
    except BaseException:
        try:
            os.unlink(tmp_name)
        except FileNotFoundError:
            pass
        raise


def package_versions():
    versions = {'python': platform.python_version()}
    for name in PROVENANCE_PACKAGES:
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = None
    return versions


def write_run_json(out_dir, command, config, seed=None):
    """Write run.json (resolved config + seed + versions) beside a command's outputs."""
    payload = {
        'command': command,
        'argv': sys.argv[1:],
        'seed': seed,
        'config': config,
        'versions': package_versions(),
    }
    path = Path(out_dir) / 'run.json'
    with atomic_write(path) as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=str)
        fh.write('\n')
    logger.debug('Wrote provenance to %s', path)
    return path
