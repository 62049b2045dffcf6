"""
Procedural meshes: the small analytic corpus used by tests and the base
shapes that synthetic pairs and benchmarks deform.
"""
import numpy as np

from .mesh import Mesh


def tetrahedron(edge=1.0, name='tetrahedron'):
    """Regular tetrahedron with the given edge length, centered at the origin."""
    corners = np.array([
        [1.0, 1.0, 1.0],
        [1.0, -1.0, -1.0],
        [-1.0, 1.0, -1.0],
        [-1.0, -1.0, 1.0],
    ])
    corners *= edge / (2.0 * np.sqrt(2.0))
    faces = np.array([
        [0, 1, 2],
        [0, 3, 1],
        [0, 2, 3],
        [1, 3, 2],
    ])
    return Mesh(corners, faces, name)


def right_triangle(name='right_triangle'):
    """
    Unit right triangle (0,0,0),(1,0,0),(0,1,0) plus one unreferenced vertex
    so the mesh meets the 4-vertex minimum. Only good for operator checks;
    the loose vertex has no mass.
    """
    vertices = np.array([
        [0.0, 0.0, 0.0],
        [1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [10.0, 10.0, 0.0],
    ])
    return Mesh(vertices, [[0, 1, 2]], name)


def icosphere(subdivisions=1, radius=1.0, name=None):
    """Geodesic sphere: 12 vertices at 0 subdivisions, 42 at 1, 162 at 2, ..."""
    t = (1.0 + np.sqrt(5.0)) / 2.0
    vertices = [
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
    ]
    faces = [
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ]
    vertices = [np.array(v, dtype=np.float64) / np.linalg.norm(v) for v in vertices]

    for _ in range(subdivisions):
        midpoints = {}

        def midpoint(a, b):
            key = (min(a, b), max(a, b))
            if key not in midpoints:
                m = vertices[a] + vertices[b]
                vertices.append(m / np.linalg.norm(m))
                midpoints[key] = len(vertices) - 1
            return midpoints[key]

        refined = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            refined.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]])
        faces = refined

    return Mesh(np.array(vertices) * radius, np.array(faces), name or f'icosphere{len(vertices)}')


def uv_sphere(n_lat, n_lon, radius_fn=None, name=None):
    """
    Latitude/longitude sphere with 2 + n_lat * n_lon vertices: north pole
    first, rings from north to south, south pole last. `radius_fn(theta, phi)`
    sets the radius per vertex (polar angle theta, azimuth phi).
    """
    if n_lat < 1 or n_lon < 3:
        raise ValueError('uv_sphere needs n_lat >= 1 and n_lon >= 3')

    thetas = np.pi * np.arange(1, n_lat + 1) / (n_lat + 1)
    phis = 2.0 * np.pi * np.arange(n_lon) / n_lon
    theta_grid, phi_grid = np.meshgrid(thetas, phis, indexing='ij')
    theta = np.concatenate([[0.0], theta_grid.ravel(), [np.pi]])
    phi = np.concatenate([[0.0], phi_grid.ravel(), [0.0]])
    radius = np.ones_like(theta) if radius_fn is None else np.asarray(radius_fn(theta, phi), dtype=np.float64)

    vertices = np.stack([
        radius * np.sin(theta) * np.cos(phi),
        radius * np.sin(theta) * np.sin(phi),
        radius * np.cos(theta),
    ], axis=1)

    def ring(i, j):
        return 1 + i * n_lon + (j % n_lon)

    south = 1 + n_lat * n_lon
    faces = []
    for j in range(n_lon):
        faces.append([0, ring(0, j), ring(0, j + 1)])
    for i in range(n_lat - 1):
        for j in range(n_lon):
            a, b = ring(i, j), ring(i, j + 1)
            c, d = ring(i + 1, j), ring(i + 1, j + 1)
            faces.append([a, c, d])
            faces.append([a, d, b])
    for j in range(n_lon):
        faces.append([south, ring(n_lat - 1, j + 1), ring(n_lat - 1, j)])

    return Mesh(vertices, np.array(faces), name or f'uvsphere{len(vertices)}')


def tube(n_around, n_along, length=3.0, radius_fn=None, name=None):
    """
    Open cylinder along +z with rings of `n_around` vertices. `radius_fn(z, phi)`
    sets the radius per vertex. Vertex index = ring * n_around + position.
    """
    if n_around < 3 or n_along < 2:
        raise ValueError('tube needs n_around >= 3 and n_along >= 2')

    zs = np.linspace(0.0, length, n_along)
    phis = 2.0 * np.pi * np.arange(n_around) / n_around
    z_grid, phi_grid = np.meshgrid(zs, phis, indexing='ij')
    z = z_grid.ravel()
    phi = phi_grid.ravel()
    radius = np.full_like(z, 0.5) if radius_fn is None else np.asarray(radius_fn(z, phi), dtype=np.float64)
    vertices = np.stack([radius * np.cos(phi), radius * np.sin(phi), z], axis=1)

    faces = []
    for i in range(n_along - 1):
        for j in range(n_around):
            a = i * n_around + j
            b = i * n_around + (j + 1) % n_around
            c = (i + 1) * n_around + j
            d = (i + 1) * n_around + (j + 1) % n_around
            faces.append([a, b, d])
            faces.append([a, d, c])
    return Mesh(vertices, np.array(faces), name or f'tube{len(vertices)}')


def strip(n, width=1.0, name=None):
    """
    Flat two-row triangle strip with unit spacing along x: vertex j is (j, 0, 0)
    and vertex n + j is (j, width, 0). Along the bottom row the edge-graph
    distance from vertex 0 to vertex j is exactly j.
    """
    if n < 2:
        raise ValueError('strip needs n >= 2')
    xs = np.arange(n, dtype=np.float64)
    bottom = np.stack([xs, np.zeros(n), np.zeros(n)], axis=1)
    top = np.stack([xs, np.full(n, width), np.zeros(n)], axis=1)
    faces = []
    for j in range(n - 1):
        faces.append([j, j + 1, n + j + 1])
        faces.append([j, n + j + 1, n + j])
    return Mesh(np.concatenate([bottom, top]), np.array(faces), name or f'strip{2 * n}')


def corpus():
    """The small property-test corpus: five meshes of different topology and shape."""
    from evaluation.synthetic import base_mesh

    return [
        tetrahedron(),
        icosphere(1),
        base_mesh('bent_cylinder', 240),
        base_mesh('bumpy_sphere', 240),
        strip(12),
    ]
