"""
Synthetic near-isometric shape pairs.

Both families start from a base shape with a few bumps of different sizes at
generic positions, so the shapes have no intrinsic symmetries and a learned
descriptor can tell every region apart. The target is a smooth deformation of
the source with identical connectivity, so the ground truth is the identity.

    bent_cylinder   tapered tube bent along a circular arc in a random plane
    bumpy_sphere    sphere whose radius is modulated by random smooth bumps

Per-edge length distortion is checked after generation; parameter sets that
break the bound are rejected.
"""
import logging
import math
from pathlib import Path

import numpy as np

from meshes.mesh import Correspondence
from meshes.mesh_utils import write_correspondence, write_mesh
from meshes.primitives import tube, uv_sphere
from specmatch.exceptions import ConfigError
from .manifest import PairEntry, PairManifest, write_manifest

logger = logging.getLogger(__name__)

FAMILIES = ('bent_cylinder', 'bumpy_sphere')
MIN_RESOLUTION = 100
MAX_EDGE_DISTORTION = 0.15

TUBE_LENGTH = 3.0
TUBE_RADIUS = 0.5

DEFAULT_DEFORM = {
    'bent_cylinder': {'bend': 0.45},
    'bumpy_sphere': {'amplitude': 0.05},
}

# (z / length, azimuth, height, width) for the tube; (polar, azimuth, height, width) for the sphere
_TUBE_BUMPS = [(0.25, 0.0, 0.18, 0.35), (0.7, 2.1, 0.12, 0.3), (0.5, 4.0, 0.08, 0.25)]
_SPHERE_BUMPS = [(0.6, 0.3, 0.25, 0.35), (1.9, 2.4, 0.18, 0.3), (1.2, 4.6, 0.12, 0.25), (2.7, 1.0, 0.08, 0.4)]


class DistortionError(ConfigError):
    pass


def _tube_radius(z, phi):
    radius = TUBE_RADIUS * (1.0 + 0.25 * z / TUBE_LENGTH)
    for rel_z, azimuth, height, width in _TUBE_BUMPS:
        dz = z - rel_z * TUBE_LENGTH
        dphi = np.angle(np.exp(1j * (phi - azimuth))) * TUBE_RADIUS
        radius = radius + height * np.exp(-(dz ** 2 + dphi ** 2) / (2.0 * width ** 2))
    return radius


def _sphere_bump_field(theta, phi, bumps):
    points = np.stack([np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi), np.cos(theta)], axis=-1)
    field = np.zeros_like(theta)
    for polar, azimuth, height, width in bumps:
        center = np.array([math.sin(polar) * math.cos(azimuth), math.sin(polar) * math.sin(azimuth), math.cos(polar)])
        chord = np.linalg.norm(points - center, axis=-1)
        field = field + height * np.exp(-chord ** 2 / (2.0 * width ** 2))
    return field


def _sphere_radius(theta, phi):
    return 1.0 + _sphere_bump_field(theta, phi, _SPHERE_BUMPS)


def _grid_for(resolution, aspect):
    """Pick (a, b) with a * b close to `resolution` and b / a close to `aspect`."""
    a = max(3, int(round(math.sqrt(resolution / aspect))))
    b = max(3, int(math.ceil(resolution / a)))
    return a, b


def base_mesh(family, resolution, name=None):
    """Undeformed source shape of the family with roughly `resolution` vertices."""
    if family == 'bent_cylinder':
        n_around, n_along = _grid_for(resolution, 1.0)
        return tube(n_around, n_along, TUBE_LENGTH, _tube_radius, name or f'bent_cylinder_{resolution}')
    if family == 'bumpy_sphere':
        n_lat, n_lon = _grid_for(resolution - 2, 2.0)
        return uv_sphere(n_lat, n_lon, _sphere_radius, name or f'bumpy_sphere_{resolution}')
    raise ConfigError(f'unknown family {family!r} (expected one of {", ".join(FAMILIES)})')


def bend(vertices, angle, plane_angle, length=TUBE_LENGTH):
    """
    Bend a shape lying along +z into a circular arc of total turning `angle`.
    The bend happens in the plane spanned by z and the direction
    (cos plane_angle, sin plane_angle, 0).
    """
    if abs(angle) < 1e-12:
        return vertices.copy()
    direction = np.array([math.cos(plane_angle), math.sin(plane_angle), 0.0])
    side = np.array([-direction[1], direction[0], 0.0])
    u = vertices @ direction
    w = vertices @ side
    z = vertices[:, 2]

    arc_radius = length / angle
    turn = z / arc_radius
    bent_u = arc_radius - (arc_radius - u) * np.cos(turn)
    bent_z = (arc_radius - u) * np.sin(turn)
    return bent_u[:, None] * direction + w[:, None] * side + bent_z[:, None] * np.array([0.0, 0.0, 1.0])


def _random_bumps(rng, count, amplitude):
    bumps = []
    for _ in range(count):
        polar = math.acos(rng.uniform(-1.0, 1.0))
        azimuth = rng.uniform(0.0, 2.0 * math.pi)
        height = amplitude * rng.uniform(-1.0, 1.0)
        width = rng.uniform(0.35, 0.6)
        bumps.append((polar, azimuth, height, width))
    return bumps


def edge_length_ratios(source, target):
    source_lengths = source.edge_lengths
    target_lengths = np.linalg.norm(
        target.vertices[source.edges[:, 0]] - target.vertices[source.edges[:, 1]], axis=1
    )
    return target_lengths / source_lengths


def synth_pair(family, resolution, deform_params=None, seed=0, name=None):
    """
    Build (source, target, identity correspondence) for one synthetic pair.

    deform_params:
        bent_cylinder: {'bend': max turning angle in radians}
        bumpy_sphere:  {'amplitude': max relative bump height}
    The seed picks the bend plane and magnitude (or the bump layout). Zero
    parameters give a target identical to the source.
    """
    if resolution < MIN_RESOLUTION:
        raise ConfigError(f'resolution must be at least {MIN_RESOLUTION}, got {resolution}')
    params = dict(DEFAULT_DEFORM.get(family, {}))
    params.update(deform_params or {})

    label = name or f'{family}_{resolution}_s{seed}'
    source = base_mesh(family, resolution, f'{label}_src')
    rng = np.random.default_rng(seed)

    if family == 'bent_cylinder':
        unknown = set(params) - {'bend'}
        if unknown:
            raise ConfigError(f'unknown bent_cylinder parameters: {sorted(unknown)}')
        angle = float(params['bend']) * rng.uniform(0.75, 1.0)
        plane_angle = rng.uniform(0.0, 2.0 * math.pi)
        moved = bend(source.vertices, angle, plane_angle)
    else:
        unknown = set(params) - {'amplitude'}
        if unknown:
            raise ConfigError(f'unknown bumpy_sphere parameters: {sorted(unknown)}')
        amplitude = float(params['amplitude'])
        v = source.vertices
        radius = np.linalg.norm(v, axis=1)
        theta = np.arccos(np.clip(v[:, 2] / radius, -1.0, 1.0))
        phi = np.arctan2(v[:, 1], v[:, 0])
        bumps = _random_bumps(rng, 5, amplitude)
        scale = 1.0 + _sphere_bump_field(theta, phi, bumps)
        moved = v * scale[:, None]

    target = source.with_vertices(moved, f'{label}_tgt')
    ratios = edge_length_ratios(source, target)
    worst = float(np.max(np.abs(ratios - 1.0)))
    if worst > MAX_EDGE_DISTORTION:
        raise DistortionError(
            f'{family} with {params} distorts edges by {worst:.1%} '
            f'(limit {MAX_EDGE_DISTORTION:.0%}); reduce the deformation'
        )
    logger.debug('Synthesized %s: max edge distortion %.3f', label, worst)

    gt = Correspondence.identity(source.n_vertices, source.name, target.name)
    return source, target, gt


def write_synthetic_dataset(out_dir, families, resolution, n_train, n_test, deform_params=None, seed=0,
                            extension='.off'):
    """
    Write synthetic pairs as mesh files plus identity ground truth, and
    train.json / test.json manifests. Families are used round-robin; pair i
    uses seed + i. Returns (train manifest, test manifest).
    """
    if n_train < 0 or n_test < 0 or n_train + n_test < 1:
        raise ConfigError(f'need at least one pair (train={n_train}, test={n_test})')
    families = [families] if isinstance(families, str) else list(families)
    for family in families:
        if family not in FAMILIES:
            raise ConfigError(f'unknown family {family!r} (expected one of {", ".join(FAMILIES)})')

    out_dir = Path(out_dir)
    meshes_dir = out_dir / 'meshes'
    entries = []
    for i in range(n_train + n_test):
        family = families[i % len(families)]
        source, target, gt = synth_pair(family, resolution, deform_params, seed + i, name=f'{family}_{i:03d}')
        source_path = write_mesh(source, meshes_dir / f'{source.name}{extension}')
        target_path = write_mesh(target, meshes_dir / f'{target.name}{extension}')
        gt_path = write_correspondence(gt, meshes_dir / f'{source.name}__{target.name}.gt')
        entries.append(PairEntry(Path(source_path), Path(target_path), Path(gt_path)))

    train = PairManifest(tuple(entries[:n_train]), 'train')
    test = PairManifest(tuple(entries[n_train:]), 'test')
    for manifest in (train, test):
        if manifest.pairs:
            write_manifest(manifest, out_dir / f'{manifest.role}.json')
    logger.info('Wrote %d train and %d test pairs to %s', n_train, n_test, out_dir)
    return train, test
