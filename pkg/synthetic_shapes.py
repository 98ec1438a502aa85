"""
Parametric samplers with exact normals, labels and generating primitives.
"""

from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from point_cloud import PointCloud
from primitives import Cone, Cylinder, Plane, PrimitiveParams, Sphere, TypeLabel


@dataclass
class SyntheticScene:
    cloud: PointCloud
    primitives: List[PrimitiveParams]

    @property
    def types(self) -> List[TypeLabel]:
        return [p.type for p in self.primitives]

    def per_point(self):
        """(type, primitive) of the generating surface for every point."""
        return [(self.primitives[j].type, self.primitives[j]) for j in self.cloud.labels]


def _basis(axis: np.ndarray):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    helper = np.eye(3)[int(np.argmin(np.abs(axis)))]
    u = np.cross(axis, helper)
    u /= np.linalg.norm(u)
    return axis, u, np.cross(axis, u)


def _scene(parts: Sequence[tuple]) -> SyntheticScene:
    positions = np.vstack([p[0] for p in parts])
    normals = np.vstack([p[1] for p in parts])
    labels = np.concatenate([np.full(len(p[0]), j) for j, p in enumerate(parts)])
    return SyntheticScene(PointCloud(positions, normals=normals, labels=labels), [p[2] for p in parts])


def plane_grid(nx: int = 20, ny: int = 20, spacing: float = 0.05, z: float = 0.0) -> SyntheticScene:
    """Regular grid on the plane z = const."""
    xs, ys = np.meshgrid(np.arange(nx) * spacing, np.arange(ny) * spacing, indexing="ij")
    positions = np.column_stack([xs.ravel(), ys.ravel(), np.full(nx * ny, z)])
    normals = np.tile([0.0, 0.0, 1.0], (nx * ny, 1))
    return _scene([(positions, normals, Plane([0.0, 0.0, 1.0], z))])


def plane_patch(n: int, size: float = 1.0, center=(0.0, 0.0, 0.0), normal=(0.0, 0.0, 1.0),
                seed: int = 0) -> SyntheticScene:
    rng = np.random.default_rng(seed)
    axis, u, v = _basis(normal)
    center = np.asarray(center, dtype=np.float64)
    st = rng.uniform(-0.5 * size, 0.5 * size, size=(n, 2))
    positions = center + st[:, :1] * u + st[:, 1:] * v
    prim = Plane(axis, float(axis @ center))
    return _scene([(positions, np.tile(axis, (n, 1)), prim)])


def sphere(n: int, center=(0.0, 0.0, 0.0), radius: float = 1.0, seed: int = 0) -> SyntheticScene:
    rng = np.random.default_rng(seed)
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    center = np.asarray(center, dtype=np.float64)
    return _scene([(center + radius * d, d, Sphere(center, radius))])


def fibonacci_sphere(n: int, center=(0.0, 0.0, 0.0), radius: float = 1.0) -> SyntheticScene:
    """Near-uniform deterministic sphere sampling."""
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(1.0 - z * z)
    phi = np.pi * (3.0 - np.sqrt(5.0)) * i
    d = np.column_stack([r * np.cos(phi), r * np.sin(phi), z])
    center = np.asarray(center, dtype=np.float64)
    return _scene([(center + radius * d, d, Sphere(center, radius))])


def cylinder(n: int, center=(0.0, 0.0, 0.0), axis=(0.0, 0.0, 1.0), radius: float = 0.5,
             height: float = 1.0, seed: int = 0) -> SyntheticScene:
    rng = np.random.default_rng(seed)
    a, u, v = _basis(axis)
    center = np.asarray(center, dtype=np.float64)
    theta = rng.uniform(0.0, 2.0 * np.pi, n)
    t = rng.uniform(-0.5 * height, 0.5 * height, n)
    radial = np.outer(np.cos(theta), u) + np.outer(np.sin(theta), v)
    positions = center + np.outer(t, a) + radius * radial
    return _scene([(positions, radial, Cylinder(a, center, radius))])


def cone(n: int, apex=(0.0, 0.0, 0.0), axis=(0.0, 0.0, 1.0), half_angle: float = np.pi / 6,
         slant_range=(0.2, 1.0), seed: int = 0) -> SyntheticScene:
    """Cone surface between two slant distances from the apex."""
    rng = np.random.default_rng(seed)
    a, u, v = _basis(axis)
    apex = np.asarray(apex, dtype=np.float64)
    theta = rng.uniform(0.0, 2.0 * np.pi, n)
    s = rng.uniform(slant_range[0], slant_range[1], n)
    radial = np.outer(np.cos(theta), u) + np.outer(np.sin(theta), v)
    along = np.cos(half_angle) * a + np.sin(half_angle) * radial
    positions = apex + s[:, None] * along
    normals = np.cos(half_angle) * radial - np.sin(half_angle) * a
    return _scene([(positions, normals, Cone(apex, a, half_angle))])


def cube_surface(n_side: int = 10, size: float = 1.0) -> SyntheticScene:
    """Six face grids of an axis-aligned cube centred at the origin, one label per face."""
    h = 0.5 * size
    g = (np.arange(n_side) + 0.5) / n_side * size - h
    s, t = [x.ravel() for x in np.meshgrid(g, g, indexing="ij")]
    parts = []
    for axis in range(3):
        for sign in (-1.0, 1.0):
            coords = [None, None, None]
            coords[axis] = np.full(s.size, sign * h)
            others = [j for j in range(3) if j != axis]
            coords[others[0]], coords[others[1]] = s, t
            normal = np.zeros(3)
            normal[axis] = sign
            parts.append((np.column_stack(coords), np.tile(normal, (s.size, 1)), Plane(normal, h)))
    return _scene(parts)


def two_planes(n_side: int = 20, spacing: float = 0.05, gap: float = 0.5) -> SyntheticScene:
    """Two parallel grids at z = 0 and z = gap."""
    lower, upper = plane_grid(n_side, n_side, spacing, 0.0), plane_grid(n_side, n_side, spacing, gap)
    return _scene([(lower.cloud.positions, lower.cloud.normals, lower.primitives[0]),
                   (upper.cloud.positions, upper.cloud.normals, upper.primitives[0])])


def wedge(n_side: int = 15, spacing: float = 0.05) -> SyntheticScene:
    """Two grids meeting at a right angle along the y axis (floor z = 0, wall x = 0)."""
    g = np.arange(1, n_side + 1) * spacing
    a, b = [x.ravel() for x in np.meshgrid(g, np.arange(n_side) * spacing, indexing="ij")]
    floor = np.column_stack([a, b, np.zeros(a.size)])
    wall = np.column_stack([np.zeros(a.size), b, a])
    return _scene([(floor, np.tile([0.0, 0.0, 1.0], (a.size, 1)), Plane([0.0, 0.0, 1.0], 0.0)),
                   (wall, np.tile([1.0, 0.0, 0.0], (a.size, 1)), Plane([1.0, 0.0, 0.0], 0.0))])


def primitive_scene(n_per: int = 400, noise: float = 0.0, seed: int = 0) -> SyntheticScene:
    """Plane, sphere and cylinder placed well apart."""
    parts = [
        plane_patch(n_per, size=1.0, center=(0.0, 0.0, 0.0), seed=seed),
        sphere(n_per, center=(2.0, 0.0, 0.5), radius=0.4, seed=seed + 1),
        cylinder(n_per, center=(4.0, 0.0, 0.5), radius=0.3, height=1.0, seed=seed + 2),
    ]
    scene = _scene([(p.cloud.positions, p.cloud.normals, p.primitives[0]) for p in parts])
    return add_noise(scene, noise, seed + 3) if noise > 0 else scene


def add_noise(scene: SyntheticScene, sigma: float, seed: int = 0,
              keep_normals: bool = True) -> SyntheticScene:
    """Isotropic Gaussian jitter of the positions; normals and labels are kept."""
    rng = np.random.default_rng(seed)
    c = scene.cloud
    positions = c.positions + rng.normal(0.0, sigma, size=c.positions.shape)
    cloud = PointCloud(positions, normals=c.normals if keep_normals else None, labels=c.labels)
    return SyntheticScene(cloud, scene.primitives)
