"""
Pair manifests: JSON lists of (source, target, optional ground truth) files.

    {"role": "train", "pairs": [{"source": "a.off", "target": "b.off", "gt": "a__b.gt"}]}

Relative paths resolve against the manifest's directory.
"""
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

from specmatch.exceptions import ConfigError, DataError
from specmatch.storage import atomic_write

logger = logging.getLogger(__name__)

ROLES = ('train', 'test')


class ManifestError(DataError):
    pass


@dataclass(frozen=True)
class PairEntry:
    source: Path
    target: Path
    gt: Path = None

    @property
    def label(self):
        return f'{self.source.stem}|{self.target.stem}'


@dataclass(frozen=True)
class PairManifest:
    pairs: tuple
    role: str = 'train'
    path: Path = field(default=None, compare=False)

    def __post_init__(self):
        if self.role not in ROLES:
            raise ConfigError(f'manifest role must be one of {ROLES}, got {self.role!r}')

    def __len__(self):
        return len(self.pairs)

    def mesh_paths(self):
        """Distinct mesh files in first-appearance order."""
        seen = {}
        for entry in self.pairs:
            seen.setdefault(entry.source, None)
            seen.setdefault(entry.target, None)
        return list(seen)


def prediction_filename(entry):
    return f'{entry.source.stem}__{entry.target.stem}.corr'


def _resolve(base, value, key, index):
    if not isinstance(value, str) or not value:
        raise ManifestError(f'pair {index}: {key!r} must be a non-empty path string')
    path = Path(value)
    return path if path.is_absolute() else base / path


def load_manifest(path, require_gt=False):
    path = Path(path)
    if not path.exists():
        raise ConfigError(f'No manifest at {path}')
    try:
        document = json.loads(path.read_text(encoding='utf-8'))
    except (OSError, ValueError) as e:
        raise ManifestError(f'{path}: cannot read manifest: {e}') from e
    if not isinstance(document, dict) or not isinstance(document.get('pairs'), list):
        raise ManifestError(f'{path}: manifest needs a "pairs" list')
    unknown = set(document) - {'pairs', 'role'}
    if unknown:
        raise ManifestError(f'{path}: unknown manifest keys {sorted(unknown)}')

    base = path.parent
    entries = []
    for index, item in enumerate(document['pairs']):
        if not isinstance(item, dict) or set(item) - {'source', 'target', 'gt'}:
            raise ManifestError(f'{path}: pair {index} must be an object with source, target and optional gt')
        source = _resolve(base, item.get('source'), 'source', index)
        target = _resolve(base, item.get('target'), 'target', index)
        gt = _resolve(base, item['gt'], 'gt', index) if item.get('gt') is not None else None
        for candidate in (source, target, gt):
            if candidate is not None and not candidate.exists():
                raise ManifestError(f'{path}: pair {index}: {candidate} does not exist')
        if require_gt and gt is None:
            raise ManifestError(f'{path}: pair {index} ({source.name} -> {target.name}) has no ground truth')
        entries.append(PairEntry(source, target, gt))
    if not entries:
        raise ManifestError(f'{path}: manifest lists no pairs')

    manifest = PairManifest(tuple(entries), document.get('role', 'train'), path)
    logger.debug('Loaded %d %s pairs from %s', len(manifest), manifest.role, path)
    return manifest


def write_manifest(manifest, path):
    """Write paths relative to the manifest's directory when they live under it."""
    path = Path(path)
    base = path.parent.resolve()

    def relative(p):
        p = Path(p).resolve()
        try:
            return p.relative_to(base).as_posix()
        except ValueError:
            return str(p)

    pairs = []
    for entry in manifest.pairs:
        item = {'source': relative(entry.source), 'target': relative(entry.target)}
        if entry.gt is not None:
            item['gt'] = relative(entry.gt)
        pairs.append(item)
    with atomic_write(path) as fh:
        json.dump({'role': manifest.role, 'pairs': pairs}, fh, indent=2)
        fh.write('\n')
    return path
