"""Model geometries with closed-form curvature.

Each entry builds a tagged box mesh in a chart, the metric at its vertices,
and the exact curvature data.  Boundary faces are given as ``(axis, side)``
pairs with side ``'lo'`` or ``'hi'``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .mesh import SimplicialMesh, build_structured_mesh, face_rule, tag_boundary
from .metric import GeometryData, MetricField, boundary_vertex_mask

Profile = Callable[[np.ndarray], tuple[np.ndarray, np.ndarray, np.ndarray]]


@dataclass(frozen=True, eq=False)
class ModelSpace:
    name: str
    mesh: SimplicialMesh
    metric: MetricField
    geometry: GeometryData
    metric_fn: Callable[[np.ndarray], np.ndarray]
    params: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.mesh.dim


def power_profile(a: float, p: float) -> Profile:
    """w(r) = (1 + a r)^p with its first two derivatives."""

    def prof(r):
        b = 1.0 + a * np.asarray(r, dtype=float)
        if np.any(b <= 0):
            raise ValueError("warping profile must stay positive")
        return b**p, a * p * b ** (p - 1), a * a * p * (p - 1) * b ** (p - 2)

    return prof


def exponential_profile(k: float) -> Profile:
    """w(r) = exp(k r): constant curvature -k^2, slices r = const are horospheres."""

    def prof(r):
        w = np.exp(k * np.asarray(r, dtype=float))
        return w, k * w, k * k * w

    return prof


def scalar_flat_profile(n: int, a: float = 1.0) -> Profile:
    """Warping profile whose product metric has zero scalar curvature."""
    return power_profile(a, 2.0 / n)


def _box(extents, resolution, periodic, faces_m):
    mesh = build_structured_mesh(extents, resolution, periodic)
    return tag_boundary(mesh, face_rule(mesh, faces_m))


def _face_masks(mesh: SimplicialMesh, faces_m):
    """Vertex masks of each BOUNDARY_M face, keyed by (axis, side)."""
    lo = mesh.vertices.min(axis=0)
    hi = mesh.vertices.max(axis=0)
    on = boundary_vertex_mask(mesh)
    out = {}
    for axis, side in faces_m:
        target = lo[axis] if side == "lo" else hi[axis]
        out[(axis, side)] = on & (np.abs(mesh.vertices[:, axis] - target) < 1e-9 * max(1.0, abs(target)))
    return out


def _boundary_fields(mesh, faces_m, face_tensor):
    """Assemble A and H from per-face closed forms (averaged where faces meet)."""
    N, n = mesh.n_vertices, mesh.dim
    A = np.zeros((N, n, n))
    H = np.zeros(N)
    count = np.zeros(N)
    for (axis, side), mask in _face_masks(mesh, faces_m).items():
        Af, Hf = face_tensor(mesh.vertices[mask], axis, side)
        A[mask] += Af
        H[mask] += Hf
        count[mask] += 1
    on = count > 0
    A[on] /= count[on, None, None]
    H[on] /= count[on]
    H[~on] = np.nan
    return A, H


def _check_faces(faces_m, n):
    for axis, side in faces_m:
        if not 0 <= axis < n or side not in ("lo", "hi"):
            raise ValueError(f"bad boundary face {(axis, side)!r}")


def flat_slab(n=3, resolution=None, extents=None, periodic=None, faces_m=None):
    extents = extents or [(0.0, 1.0)] * n
    resolution = resolution or [4] * n
    faces_m = faces_m or [(n - 1, "lo"), (n - 1, "hi")]
    _check_faces(faces_m, n)
    mesh = _box(extents, resolution, periodic, faces_m)

    def metric_fn(x):
        return np.broadcast_to(np.eye(n), (len(x), n, n)).copy()

    N = mesh.n_vertices
    A, H = _boundary_fields(mesh, faces_m, lambda x, a, s: (np.zeros((len(x), n, n)), np.zeros(len(x))))
    geom = GeometryData(np.zeros(N), H, np.zeros((N, n, n)), A)
    return mesh, metric_fn, geom


def euclidean_ball_chart(n=3, resolution=None, extents=None, periodic=None, faces_m=None):
    """Flat space in spherical coordinates (r, theta, phi)."""
    if n != 3:
        raise ValueError("euclidean_ball_chart is a three-dimensional chart")
    extents = extents or [(0.5, 1.0), (np.pi / 4, 3 * np.pi / 4), (0.0, np.pi / 2)]
    (r0, _), (t0, t1), _ = [tuple(e) for e in extents]
    if r0 <= 0 or t0 <= 0 or t1 >= np.pi:
        raise ValueError("spherical chart needs r > 0 and 0 < theta < pi")
    resolution = resolution or [4, 4, 4]
    faces_m = faces_m or [(0, "hi")]
    _check_faces(faces_m, n)
    if any(axis != 0 for axis, _ in faces_m):
        raise ValueError("only radial faces carry closed-form curvature in this chart")
    mesh = _box(extents, resolution, periodic, faces_m)

    def metric_fn(x):
        r, th = x[:, 0], x[:, 1]
        g = np.zeros((len(x), 3, 3))
        g[:, 0, 0] = 1.0
        g[:, 1, 1] = r**2
        g[:, 2, 2] = (r * np.sin(th)) ** 2
        return g

    def face(x, axis, side):
        sgn = 1.0 if side == "hi" else -1.0
        r = x[:, 0]
        g = metric_fn(x)
        g[:, 0, 0] = 0.0
        return sgn * g / r[:, None, None], sgn / r

    A, H = _boundary_fields(mesh, faces_m, face)
    N = mesh.n_vertices
    geom = GeometryData(np.zeros(N), H, np.zeros((N, 3, 3)), A)
    return mesh, metric_fn, geom


def _fermi_metric(x: np.ndarray) -> np.ndarray:
    n = x.shape[1]
    g = np.zeros((len(x), n, n))
    scale = np.cosh(x[:, -1]) ** 2
    for i in range(n - 1):
        g[:, i, i] = scale
        scale = scale * np.cosh(x[:, i]) ** 2
    g[:, -1, -1] = 1.0
    return g


def hyperbolic_halfspace_geodesic(n=3, resolution=None, extents=None, periodic=None, faces_m=None):
    """Hyperbolic space in Fermi coordinates about a totally geodesic
    hyperplane: g = cosh^2(x_n) g_hyp(n-1) + dx_n^2 on x_n >= 0, where the
    (n-1)-dimensional factor is built the same way recursively."""
    extents = extents or [(-1.0, 1.0)] * (n - 1) + [(0.0, 1.0)]
    lo_n = extents[-1][0] if not np.isscalar(extents[-1]) else 0.0
    if lo_n < 0:
        raise ValueError("half-space chart needs x_n >= 0")
    resolution = resolution or [4] * n
    faces_m = faces_m or [(n - 1, "lo")]
    _check_faces(faces_m, n)
    if any(face != (n - 1, "lo") for face in faces_m) or lo_n != 0:
        raise ValueError("the totally geodesic boundary is the face x_n = 0")
    mesh = _box(extents, resolution, periodic, faces_m)
    g = _fermi_metric(mesh.vertices)
    N = mesh.n_vertices
    A, H = _boundary_fields(mesh, faces_m, lambda x, a, s: (np.zeros((len(x), n, n)), np.zeros(len(x))))
    geom = GeometryData(np.full(N, -float(n * (n - 1))), H, -(n - 1) * g, A)
    return mesh, _fermi_metric, geom


def hyperbolic_horoball_collar(n=3, resolution=None, extents=None, periodic=None, faces_m=None):
    """Upper half-space metric dx^2 / x_n^2 on a slab a <= x_n <= b; the face
    x_n = a is a horosphere with outward normal pointing towards x_n = 0."""
    extents = extents or [(0.0, 1.0)] * (n - 1) + [(1.0, 2.0)]
    lo_n = extents[-1][0] if not np.isscalar(extents[-1]) else 0.0
    if lo_n <= 0:
        raise ValueError("half-space chart needs x_n > 0")
    resolution = resolution or [4] * n
    faces_m = faces_m or [(n - 1, "lo")]
    _check_faces(faces_m, n)
    if any(axis != n - 1 for axis, _ in faces_m):
        raise ValueError("only horizontal faces carry closed-form curvature in this chart")
    mesh = _box(extents, resolution, periodic, faces_m)

    def metric_fn(x):
        return np.eye(n)[None] / x[:, -1, None, None] ** 2

    def face(x, axis, side):
        sgn = 1.0 if side == "lo" else -1.0
        gt = metric_fn(x)
        gt[:, -1, -1] = 0.0
        return sgn * gt, np.full(len(x), sgn)

    g = metric_fn(mesh.vertices)
    N = mesh.n_vertices
    A, H = _boundary_fields(mesh, faces_m, face)
    geom = GeometryData(np.full(N, -float(n * (n - 1))), H, -(n - 1) * g, A)
    return mesh, metric_fn, geom


def product_warped(n=3, resolution=None, extents=None, periodic=None, faces_m=None, profile=None):
    """g = w(r)^2 (dx_1^2 + ... + dx_{n-1}^2) + dr^2 with r = x_n.

    Faces x_i = const (i < n) are totally geodesic; the face r = r1 has
    A = w w' (tangential identity) with respect to the upward normal.
    """
    extents = extents or [(0.0, 1.0)] * n
    resolution = resolution or [4] * n
    faces_m = faces_m or [(0, "lo")]
    _check_faces(faces_m, n)
    prof = profile or scalar_flat_profile(n)
    mesh = _box(extents, resolution, periodic, faces_m)

    def metric_fn(x):
        w, _, _ = prof(x[:, -1])
        g = np.zeros((len(x), n, n))
        for i in range(n - 1):
            g[:, i, i] = w**2
        g[:, -1, -1] = 1.0
        return g

    w, dw, d2w = prof(mesh.vertices[:, -1])
    N = mesh.n_vertices
    Ric = np.zeros((N, n, n))
    for i in range(n - 1):
        Ric[:, i, i] = -(w * d2w + (n - 2) * dw**2)
    Ric[:, -1, -1] = -(n - 1) * d2w / w
    R = -2 * (n - 1) * d2w / w - (n - 1) * (n - 2) * (dw / w) ** 2

    def face(x, axis, side):
        if axis != n - 1:
            return np.zeros((len(x), n, n)), np.zeros(len(x))
        sgn = 1.0 if side == "hi" else -1.0
        wf, dwf, _ = prof(x[:, -1])
        Af = np.zeros((len(x), n, n))
        for i in range(n - 1):
            Af[:, i, i] = sgn * wf * dwf
        return Af, sgn * dwf / wf

    A, H = _boundary_fields(mesh, faces_m, face)
    geom = GeometryData(R, H, Ric, A)
    return mesh, metric_fn, geom


CATALOG = {
    "flat_slab": flat_slab,
    "euclidean_ball_chart": euclidean_ball_chart,
    "hyperbolic_halfspace_geodesic": hyperbolic_halfspace_geodesic,
    "hyperbolic_horoball_collar": hyperbolic_horoball_collar,
    "product_warped": product_warped,
}


def model_space(
    name: str,
    n: int = 3,
    resolution: Sequence[int] | None = None,
    extents=None,
    periodic: Sequence[bool] | None = None,
    faces_m=None,
    **params,
) -> ModelSpace:
    """Build a catalog geometry on a tagged structured chart mesh."""
    try:
        builder = CATALOG[name]
    except KeyError:
        raise KeyError(f"unknown model {name!r}; choose from {sorted(CATALOG)}") from None
    if n < 1:
        raise ValueError("dimension must be positive")
    mesh, metric_fn, geom = builder(n=n, resolution=resolution, extents=extents, periodic=periodic,
                                    faces_m=faces_m, **params)
    g = MetricField(metric_fn(mesh.vertices))
    geom.check(mesh, g)
    recorded = dict(n=n, resolution=resolution, extents=extents, periodic=periodic, faces_m=faces_m, **params)
    return ModelSpace(name, mesh, g, geom, metric_fn, recorded)


def scaled_model(model: ModelSpace, factor: float) -> ModelSpace:
    """The same chart with metric ``factor * g`` (curvature rescaled exactly)."""
    if not factor > 0:
        raise ValueError("scale factor must be positive")
    geom = model.geometry
    root = np.sqrt(factor)
    scaled_geom = GeometryData(geom.R / factor, geom.H / root, geom.Ric.copy(), geom.A * root)
    fn = model.metric_fn

    def metric_fn(x):
        return factor * fn(x)

    params = dict(model.params, scale=factor * model.params.get("scale", 1.0))
    return ModelSpace(model.name, model.mesh, MetricField(factor * model.metric.components), scaled_geom,
                      metric_fn, params)
