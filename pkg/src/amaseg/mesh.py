"""Conforming triangular meshes on the image rectangle.

Vertices carry named scalar fields (image value, level set). Quality is
measured against a symmetric positive definite metric field: the
equidistribution ratio controls element size, the alignment ratio controls
shape and orientation; both equal 1 on a perfectly metric-uniform mesh.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .raster import _atomic_write

# Reference element: equilateral triangle scaled to unit area, first edge on
# the x-axis. Edge length a satisfies (sqrt(3)/4) a^2 = 1.
_REF_A = 2.0 / 3.0 ** 0.25
REF_EDGE_MATRIX = np.array(
    [[_REF_A, 0.5 * _REF_A], [0.0, 0.5 * math.sqrt(3.0) * _REF_A]]
)
_REF_EDGE_INV = np.linalg.inv(REF_EDGE_MATRIX)


class MeshError(ValueError):
    """Raised for invalid or degenerate mesh input."""


@dataclass
class TriMesh:
    """Triangulation with per-vertex scalar fields.

    vertices: (n_v, 2) float coordinates in pixel units.
    triangles: (n_e, 3) int vertex indices, counterclockwise.
    boundary: (n_v,) bool, True exactly for vertices on the rectangle boundary.
    fields: named per-vertex scalar arrays.
    """

    vertices: np.ndarray = field(repr=False)
    triangles: np.ndarray = field(repr=False)
    boundary: np.ndarray = field(repr=False)
    fields: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.triangles = np.asarray(self.triangles, dtype=np.int64)
        self.boundary = np.asarray(self.boundary, dtype=bool)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_elements(self) -> int:
        return len(self.triangles)

    def corners(self, k: int) -> np.ndarray:
        """(3, 2) vertex coordinates of element k."""
        return self.vertices[self.triangles[k]]

    def areas(self) -> np.ndarray:
        """Signed areas of all elements (positive for CCW orientation)."""
        p = self.vertices[self.triangles]
        e1 = p[:, 1] - p[:, 0]
        e2 = p[:, 2] - p[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    def bbox(self):
        lo = self.vertices.min(axis=0)
        hi = self.vertices.max(axis=0)
        return lo, hi

    def edges(self) -> np.ndarray:
        """(n_edges, 2) sorted unique vertex index pairs."""
        t = self.triangles
        e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        e.sort(axis=1)
        return np.unique(e, axis=0)

    def copy(self) -> "TriMesh":
        return TriMesh(
            self.vertices.copy(),
            self.triangles.copy(),
            self.boundary.copy(),
            {k: v.copy() for k, v in self.fields.items()},
        )

    def validate(self, area_tol: float = 1e-9):
        """Check orientation, conformity, rectangle coverage, boundary flags."""
        areas = self.areas()
        if areas.min() <= 0:
            raise MeshError("inverted or degenerate element")
        t = self.triangles
        e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        e.sort(axis=1)
        uniq, counts = np.unique(e, axis=0, return_counts=True)
        if counts.max() > 2:
            raise MeshError("non-manifold edge")
        lo, hi = self.bbox()
        if abs(areas.sum() - (hi[0] - lo[0]) * (hi[1] - lo[1])) > area_tol * max(
            1.0, areas.sum()
        ):
            raise MeshError("mesh does not cover its bounding rectangle")
        on_rect = (
            np.isclose(self.vertices[:, 0], lo[0], atol=1e-9)
            | np.isclose(self.vertices[:, 0], hi[0], atol=1e-9)
            | np.isclose(self.vertices[:, 1], lo[1], atol=1e-9)
            | np.isclose(self.vertices[:, 1], hi[1], atol=1e-9)
        )
        if not np.array_equal(on_rect, self.boundary):
            raise MeshError("boundary flags do not match rectangle boundary")
        # every boundary (single-triangle) edge must lie on the rectangle
        bedges = uniq[counts == 1]
        for a, b in bedges:
            pa, pb = self.vertices[a], self.vertices[b]
            same_side = (
                (abs(pa[0] - pb[0]) < 1e-9 and (abs(pa[0] - lo[0]) < 1e-9 or abs(pa[0] - hi[0]) < 1e-9))
                or (abs(pa[1] - pb[1]) < 1e-9 and (abs(pa[1] - lo[1]) < 1e-9 or abs(pa[1] - hi[1]) < 1e-9))
            )
            if not same_side:
                raise MeshError("hole or dangling boundary edge inside rectangle")


@dataclass
class AffineMap:
    """Affine map from the unit-area equilateral reference triangle."""

    jacobian: np.ndarray
    translation: np.ndarray


def uniform_initial_mesh(width: float, height: float, n_target: int) -> TriMesh:
    """Structured right-triangle seed mesh over [0, width] x [0, height].

    Approximately n_target vertices; exact rectangle coverage.
    """
    if n_target < 4:
        raise MeshError("n_target must be at least 4")
    if width <= 0 or height <= 0:
        raise MeshError("rectangle must have positive extent")
    aspect = width / height
    nx = max(2, int(round(math.sqrt(n_target * aspect))))
    ny = max(2, int(round(n_target / nx)))
    xs = np.linspace(0.0, width, nx)
    ys = np.linspace(0.0, height, ny)
    xx, yy = np.meshgrid(xs, ys)
    verts = np.column_stack([xx.ravel(), yy.ravel()])

    def vid(i, j):
        return j * nx + i

    tris = []
    for j in range(ny - 1):
        for i in range(nx - 1):
            v00, v10 = vid(i, j), vid(i + 1, j)
            v01, v11 = vid(i, j + 1), vid(i + 1, j + 1)
            tris.append((v00, v10, v11))
            tris.append((v00, v11, v01))
    boundary = (
        np.isclose(verts[:, 0], 0.0)
        | np.isclose(verts[:, 0], width)
        | np.isclose(verts[:, 1], 0.0)
        | np.isclose(verts[:, 1], height)
    )
    return TriMesh(verts, np.array(tris, dtype=np.int64), boundary)


def element_affine_map(mesh: TriMesh, k: int) -> AffineMap:
    """Map the unit-area equilateral reference triangle onto element k."""
    p = mesh.corners(k)
    edge = np.column_stack([p[1] - p[0], p[2] - p[0]])
    jac = edge @ _REF_EDGE_INV
    if abs(np.linalg.det(jac)) < 1e-14:
        raise MeshError(f"degenerate element {k}")
    return AffineMap(jac, p[0].copy())


def element_metric(metric: np.ndarray, mesh: TriMesh, k: int) -> np.ndarray:
    """Element tensor as the average of the three vertex tensors.

    Exact realization of the element mean for vertex-linear tensor fields.
    """
    return metric[mesh.triangles[k]].mean(axis=0)


def _element_metrics(metric: np.ndarray, mesh: TriMesh) -> np.ndarray:
    return metric[mesh.triangles].mean(axis=1)


def metric_area_weights(mesh: TriMesh, metric: np.ndarray) -> np.ndarray:
    """|K| sqrt(det M_K) per element; their sum is the total metric area."""
    mk = _element_metrics(metric, mesh)
    det = mk[:, 0, 0] * mk[:, 1, 1] - mk[:, 0, 1] * mk[:, 1, 0]
    return mesh.areas() * np.sqrt(np.maximum(det, 0.0))


def equidistribution_ratios(mesh: TriMesh, metric: np.ndarray) -> np.ndarray:
    """Size-quality per element; 1 everywhere on a metric-uniform mesh."""
    w = metric_area_weights(mesh, metric)
    sigma = w.sum()
    return mesh.n_elements * w / sigma


def equidistribution_ratio(mesh: TriMesh, metric: np.ndarray, k: int) -> float:
    return float(equidistribution_ratios(mesh, metric)[k])


def alignment_ratios(mesh: TriMesh, metric: np.ndarray) -> np.ndarray:
    """Shape-quality per element; >= 1, with equality for metric-equilateral.

    Ratio of arithmetic to geometric mean of the eigenvalues of J^T M_K J,
    where J maps the reference element onto K.
    """
    mk = _element_metrics(metric, mesh)
    p = mesh.vertices[mesh.triangles]
    edge = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=-1)
    jac = edge @ _REF_EDGE_INV
    t = np.einsum("kji,kjl,klm->kim", jac, mk, jac)
    tr = t[:, 0, 0] + t[:, 1, 1]
    det = t[:, 0, 0] * t[:, 1, 1] - t[:, 0, 1] * t[:, 1, 0]
    if det.min() <= 0:
        raise MeshError("degenerate element or non-SPD metric")
    return 0.5 * tr / np.sqrt(det)


def alignment_ratio(mesh: TriMesh, metric: np.ndarray, k: int) -> float:
    return float(alignment_ratios(mesh, metric)[k])


def metric_edge_lengths(mesh: TriMesh, metric: np.ndarray, edges=None) -> np.ndarray:
    """Edge lengths sqrt(e^T M e) with M averaged over the edge endpoints."""
    if edges is None:
        edges = mesh.edges()
    e = mesh.vertices[edges[:, 1]] - mesh.vertices[edges[:, 0]]
    m = 0.5 * (metric[edges[:, 0]] + metric[edges[:, 1]])
    q = (
        m[:, 0, 0] * e[:, 0] ** 2
        + 2.0 * m[:, 0, 1] * e[:, 0] * e[:, 1]
        + m[:, 1, 1] * e[:, 1] ** 2
    )
    return np.sqrt(np.maximum(q, 0.0))


class TriLocator:
    """Uniform-grid point location with barycentric coordinates.

    Queries slightly outside an element (within `tol`) are accepted; points
    not found in any candidate fall back to the best nearby element with
    clamped barycentric weights, counted in `fallbacks`.
    """

    def __init__(self, mesh: TriMesh):
        self.mesh = mesh
        p = mesh.vertices[mesh.triangles]
        self._p0 = p[:, 0]
        e1 = p[:, 1] - p[:, 0]
        e2 = p[:, 2] - p[:, 0]
        det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
        # rows of the inverse edge matrix, for barycentric solves
        self._inv = np.stack(
            [
                np.stack([e2[:, 1] / det, -e2[:, 0] / det], axis=-1),
                np.stack([-e1[:, 1] / det, e1[:, 0] / det], axis=-1),
            ],
            axis=1,
        )
        lo, hi = mesh.bbox()
        self._lo = lo
        span = np.maximum(hi - lo, 1e-12)
        n_cells = max(1, int(math.sqrt(mesh.n_elements)))
        self._cell = float(max(span[0], span[1])) / n_cells
        self._nx = int(span[0] / self._cell) + 1
        self._ny = int(span[1] / self._cell) + 1
        tri_lo = np.floor((p.min(axis=1) - lo) / self._cell).astype(np.intp)
        tri_hi = np.floor((p.max(axis=1) - lo) / self._cell).astype(np.intp)
        tri_lo = np.clip(tri_lo, 0, [self._nx - 1, self._ny - 1])
        tri_hi = np.clip(tri_hi, 0, [self._nx - 1, self._ny - 1])
        bins = []
        tids = []
        for k in range(mesh.n_elements):
            for by in range(tri_lo[k, 1], tri_hi[k, 1] + 1):
                base = by * self._nx
                for bx in range(tri_lo[k, 0], tri_hi[k, 0] + 1):
                    bins.append(base + bx)
                    tids.append(k)
        bins = np.asarray(bins, dtype=np.intp)
        tids = np.asarray(tids, dtype=np.intp)
        order = np.argsort(bins, kind="stable")
        self._bin_tris = tids[order]
        self._bin_start = np.searchsorted(
            bins[order], np.arange(self._nx * self._ny + 1)
        )
        self.fallbacks = 0

    def locate(self, points: np.ndarray, tol: float = 1e-9):
        """Return (element index, (n, 3) barycentric coords) per query point."""
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        nq = len(pts)
        cx = np.clip(((pts[:, 0] - self._lo[0]) / self._cell).astype(np.intp), 0, self._nx - 1)
        cy = np.clip(((pts[:, 1] - self._lo[1]) / self._cell).astype(np.intp), 0, self._ny - 1)
        bin_id = cy * self._nx + cx
        start = self._bin_start[bin_id]
        count = (self._bin_start[bin_id + 1] - start).astype(np.intp)
        total = int(count.sum())
        qidx = np.repeat(np.arange(nq), count)
        offsets = np.arange(total) - np.repeat(np.cumsum(count) - count, count)
        cand = self._bin_tris[np.repeat(start, count) + offsets]
        d = pts[qidx] - self._p0[cand]
        inv = self._inv[cand]
        b1 = inv[:, 0, 0] * d[:, 0] + inv[:, 0, 1] * d[:, 1]
        b2 = inv[:, 1, 0] * d[:, 0] + inv[:, 1, 1] * d[:, 1]
        b0 = 1.0 - b1 - b2
        score = np.minimum(np.minimum(b0, b1), b2)
        # best candidate per query: highest score, ties to lowest element id
        best_tri = np.zeros(nq, dtype=np.intp)
        best_b = np.full((nq, 3), 1.0 / 3.0)
        best_score = np.full(nq, -np.inf)
        if total:
            order = np.lexsort((cand, -score, qidx))
            qs, first = np.unique(qidx[order], return_index=True)
            sel = order[first]
            best_tri[qs] = cand[sel]
            best_b[qs, 0] = b0[sel]
            best_b[qs, 1] = b1[sel]
            best_b[qs, 2] = b2[sel]
            best_score[qs] = score[sel]
        bad = best_score < -tol
        self.fallbacks += int(bad.sum())
        if bad.any():
            # clamp onto the simplex of the best nearby element
            bb = np.clip(best_b[bad], 0.0, None)
            s = bb.sum(axis=1, keepdims=True)
            s[s == 0] = 1.0
            best_b[bad] = bb / s
        return best_tri, best_b

    def interpolate(self, nodal: np.ndarray, points: np.ndarray) -> np.ndarray:
        tri, bary = self.locate(points)
        idx = self.mesh.triangles[tri]
        return (nodal[idx] * bary).sum(axis=1)


def export_off(mesh: TriMesh, path):
    """ASCII OFF geometry export."""
    lines = ["OFF", f"{mesh.n_vertices} {mesh.n_elements} 0"]
    lines += [f"{x:.9g} {y:.9g} 0" for x, y in mesh.vertices]
    lines += [f"3 {a} {b} {c}" for a, b, c in mesh.triangles]
    _atomic_write(path, ("\n".join(lines) + "\n").encode())


def export_svg(mesh: TriMesh, path, stroke: str = "#1060c0", stroke_width: float = 0.35):
    """SVG export of the mesh edges over the image extent."""
    lo, hi = mesh.bbox()
    w, h = hi[0] - lo[0], hi[1] - lo[1]
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="{lo[0]} {lo[1]} {w} {h}">',
        f'<g stroke="{stroke}" stroke-width="{stroke_width}" fill="none">',
    ]
    v = mesh.vertices
    for a, b in mesh.edges():
        parts.append(
            f'<line x1="{v[a,0]:.3f}" y1="{v[a,1]:.3f}" x2="{v[b,0]:.3f}" y2="{v[b,1]:.3f}"/>'
        )
    parts += ["</g>", "</svg>"]
    _atomic_write(path, "\n".join(parts).encode())
