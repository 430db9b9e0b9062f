"""Metric-driven mesh adaptation by local operations.

The engine rescales the metric so a metric-uniform mesh with the requested
element count has unit target edge length, then iterates deterministic
passes of edge split (length > sqrt(2)), edge collapse (length < 1/sqrt(2)),
quality flips, and metric-weighted vertex smoothing. The rectangle boundary
is preserved exactly; no operation may invert an element.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .mesh import (
    TriLocator,
    TriMesh,
    _REF_EDGE_INV,
    metric_area_weights,
    metric_edge_lengths,
)
from .raster import PixelGrid, sample_bilinear

SPLIT_LEN = math.sqrt(2.0)
COLLAPSE_LEN = 1.0 / math.sqrt(2.0)
# area of a unit-edge equilateral triangle; sets the count normalization
UNIT_TRI_AREA = math.sqrt(3.0) / 4.0


@dataclass
class AdaptResult:
    mesh: TriMesh
    status: str                     # "ok" or "count-band-missed"
    n_elements: int
    n_target: int
    edge_band_fraction: float       # fraction of edges in [1/sqrt2, sqrt2]
    normalized_metric: np.ndarray   # per-vertex tensors in the unit-length scale
    warnings: list = field(default_factory=list)


def _bilinear_raw(values: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Clamped bilinear interpolation on a raw (h, w) array."""
    h, w = values.shape
    x = np.clip(pts[:, 0], 0.0, w - 1.0)
    y = np.clip(pts[:, 1], 0.0, h - 1.0)
    x0 = np.minimum(np.floor(x).astype(np.intp), w - 2)
    y0 = np.minimum(np.floor(y).astype(np.intp), h - 2)
    tx = x - x0
    ty = y - y0
    return (
        values[y0, x0] * (1 - tx) * (1 - ty)
        + values[y0, x0 + 1] * tx * (1 - ty)
        + values[y0 + 1, x0] * (1 - tx) * ty
        + values[y0 + 1, x0 + 1] * tx * ty
    )


def grid_metric_sampler(tensors: np.ndarray):
    """Bilinear sampler over a per-pixel (h, w, 2, 2) tensor field.

    Convex interpolation of SPD tensors stays SPD.
    """
    c00 = np.ascontiguousarray(tensors[..., 0, 0])
    c01 = np.ascontiguousarray(tensors[..., 0, 1])
    c11 = np.ascontiguousarray(tensors[..., 1, 1])

    def sampler(points):
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        out = np.empty((len(pts), 2, 2))
        out[:, 0, 0] = _bilinear_raw(c00, pts)
        out[:, 0, 1] = _bilinear_raw(c01, pts)
        out[:, 1, 0] = out[:, 0, 1]
        out[:, 1, 1] = _bilinear_raw(c11, pts)
        return out

    return sampler


def mesh_metric_sampler(mesh: TriMesh, metric: np.ndarray, resolution: int = 129):
    """Sampler for a per-vertex tensor field: rasterize once, then bilinear."""
    lo, hi = mesh.bbox()
    span = hi - lo
    n = max(resolution, 2)
    xs = np.linspace(lo[0], hi[0], n)
    ys = np.linspace(lo[1], hi[1], n)
    xx, yy = np.meshgrid(xs, ys)
    pts = np.column_stack([xx.ravel(), yy.ravel()])
    loc = TriLocator(mesh)
    raster = np.empty((n, n, 2, 2))
    raster[..., 0, 0] = loc.interpolate(metric[:, 0, 0], pts).reshape(n, n)
    raster[..., 0, 1] = loc.interpolate(metric[:, 0, 1], pts).reshape(n, n)
    raster[..., 1, 0] = raster[..., 0, 1]
    raster[..., 1, 1] = loc.interpolate(metric[:, 1, 1], pts).reshape(n, n)
    inner = grid_metric_sampler(raster)
    scale = np.array([(n - 1) / max(span[0], 1e-12), (n - 1) / max(span[1], 1e-12)])

    def sampler(points):
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return inner((pts - lo) * scale)

    return sampler


class _Engine:
    """Mutable mesh state for local operations."""

    def __init__(self, mesh: TriMesh, sampler, grid):
        self.lo, self.hi = mesh.bbox()
        self.verts = [mesh.vertices[i].copy() for i in range(mesh.n_vertices)]
        self.tris = [tuple(int(v) for v in t) for t in mesh.triangles]
        self.vclass = [self._classify(p) for p in self.verts]
        self.metric = list(sampler(mesh.vertices))
        self.fields = {
            name: [float(x) for x in arr] for name, arr in mesh.fields.items()
        }
        self.sampler = sampler
        self.grid = grid
        self.scale = 1.0  # metric prefactor; lengths use sqrt(scale)

    # boundary classes: 0 interior, 1 x=lo, 2 x=hi, 3 y=lo, 4 y=hi, 5 corner
    def _classify(self, p, tol=1e-9):
        on = []
        if abs(p[0] - self.lo[0]) < tol:
            on.append(1)
        if abs(p[0] - self.hi[0]) < tol:
            on.append(2)
        if abs(p[1] - self.lo[1]) < tol:
            on.append(3)
        if abs(p[1] - self.hi[1]) < tol:
            on.append(4)
        if len(on) >= 2:
            return 5
        return on[0] if on else 0

    def live_triangles(self):
        return [(i, t) for i, t in enumerate(self.tris) if t is not None]

    def n_live(self):
        return sum(1 for t in self.tris if t is not None)

    def edge_map(self):
        em = {}
        for i, t in enumerate(self.tris):
            if t is None:
                continue
            for k in range(3):
                a, b = t[k], t[(k + 1) % 3]
                key = (a, b) if a < b else (b, a)
                em.setdefault(key, []).append(i)
        return em

    def edge_length(self, a, b):
        e = self.verts[b] - self.verts[a]
        m = 0.5 * (self.metric[a] + self.metric[b])
        q = m[0, 0] * e[0] ** 2 + 2 * m[0, 1] * e[0] * e[1] + m[1, 1] * e[1] ** 2
        return math.sqrt(max(self.scale * q, 0.0))

    def tri_area(self, t, override=None):
        pts = []
        for v in t:
            if override is not None and v in override:
                pts.append(override[v])
            else:
                pts.append(self.verts[v])
        e1 = pts[1] - pts[0]
        e2 = pts[2] - pts[0]
        return 0.5 * (e1[0] * e2[1] - e1[1] * e2[0])

    def add_vertex(self, pos, neighbors):
        self.verts.append(np.asarray(pos, dtype=np.float64))
        self.vclass.append(self._classify(pos))
        self.metric.append(self.sampler(pos[None, :])[0])
        for name, vals in self.fields.items():
            vals.append(0.5 * (vals[neighbors[0]] + vals[neighbors[1]]))
        return len(self.verts) - 1

    def update_scale(self, n_target):
        """Metric prefactor making the unit edge length match n_target elements."""
        mesh = self.snapshot()
        sigma = float(metric_area_weights(mesh, np.array(self.metric)).sum())
        if sigma <= 0:
            raise ValueError("metric is not positive definite")
        self.scale = UNIT_TRI_AREA * n_target / sigma

    def snapshot(self) -> TriMesh:
        live = [t for t in self.tris if t is not None]
        mesh = TriMesh(
            np.array(self.verts),
            np.array(live, dtype=np.int64),
            np.array([c != 0 for c in self.vclass]),
            {name: np.array(vals) for name, vals in self.fields.items()},
        )
        return mesh

    # ------------------------------------------------------------------ ops

    def split_pass(self, n_target):
        em = self.edge_map()
        cands = []
        for (a, b), ts in em.items():
            l = self.edge_length(a, b)
            if l > SPLIT_LEN:
                cands.append((-l, a, b))
        cands.sort()
        dirty = set()
        budget = int(1.5 * n_target) + 8
        done = 0
        for _, a, b in cands:
            if done >= budget:
                break
            key = (a, b)
            ts = em[key]
            if any(i in dirty for i in ts):
                continue
            mid = 0.5 * (self.verts[a] + self.verts[b])
            m = self.add_vertex(mid, (a, b))
            for i in ts:
                t = self.tris[i]
                k = next(k for k in range(3) if {t[k], t[(k + 1) % 3]} == {a, b})
                u, v, w = t[k], t[(k + 1) % 3], t[(k + 2) % 3]
                self.tris[i] = None
                dirty.add(i)
                self.tris.append((u, m, w))
                self.tris.append((m, v, w))
            done += 1
        return done

    def collapse_pass(self, n_target):
        em = self.edge_map()
        adj = {}
        v_tris = {}
        for i, t in self.live_triangles():
            for k in range(3):
                v_tris.setdefault(t[k], set()).add(i)
                adj.setdefault(t[k], set()).update((t[(k + 1) % 3], t[(k + 2) % 3]))
        cands = []
        for (a, b), ts in em.items():
            l = self.edge_length(a, b)
            if l < COLLAPSE_LEN:
                cands.append((l, a, b))
        cands.sort()
        dirty = set()
        dead_verts = set()
        floor = max(4, int(math.ceil(0.80 * n_target)))
        done = 0
        for _, a, b in cands:
            if self.n_live() - 2 < floor:
                break
            if a in dead_verts or b in dead_verts:
                continue
            ts = em[(a, b) if a < b else (b, a)]
            if any(i in dirty or self.tris[i] is None for i in ts):
                continue
            keep_move = self._collapse_target(a, b, len(ts) == 1)
            if keep_move is None:
                continue
            keep, gone, new_pos = keep_move
            # conformity: shared neighbors must be exactly the opposite vertices
            opposite = set()
            for i in ts:
                opposite.update(v for v in self.tris[i] if v not in (a, b))
            if (adj[a] & adj[b]) != opposite:
                continue
            # simulate surviving triangles around the edge
            affected = (v_tris[a] | v_tris[b]) - set(ts)
            override = {keep: new_pos, gone: new_pos}
            ok = True
            for i in affected:
                t = self.tris[i]
                if t is None:
                    ok = False
                    break
                if self.tri_area(t, override) < 1e-12:
                    ok = False
                    break
            if not ok:
                continue
            # avoid creating overlong edges out of the kept vertex
            far = (adj[a] | adj[b]) - {a, b}
            old_keep_pos = self.verts[keep]
            old_keep_metric = self.metric[keep]
            self.verts[keep] = new_pos
            self.metric[keep] = self.sampler(new_pos[None, :])[0]
            too_long = any(self.edge_length(keep, v) > 1.9 for v in far)
            if too_long:
                self.verts[keep] = old_keep_pos
                self.metric[keep] = old_keep_metric
                continue
            if not np.array_equal(new_pos, old_keep_pos):
                for name, vals in self.fields.items():
                    vals[keep] = 0.5 * (vals[a] + vals[b])
            # commit
            for i in ts:
                self.tris[i] = None
                dirty.add(i)
            for i in affected:
                t = self.tris[i]
                self.tris[i] = tuple(keep if v == gone else v for v in t)
                dirty.add(i)
            dead_verts.add(gone)
            # local adjacency updates for subsequent candidates
            for v in adj[gone]:
                adj[v].discard(gone)
                if v not in (keep,):
                    adj[v].add(keep)
                    adj[keep].add(v)
            adj[keep].discard(keep)
            adj[keep].discard(gone)
            v_tris.setdefault(keep, set()).update(v_tris.get(gone, set()))
            done += 1
        return done

    def _collapse_target(self, a, b, is_boundary_edge):
        ca, cb = self.vclass[a], self.vclass[b]
        pa = 2 if ca == 5 else (1 if ca else 0)
        pb = 2 if cb == 5 else (1 if cb else 0)
        if pa == 2 and pb == 2:
            return None
        if pa > pb:
            return a, b, self.verts[a].copy()
        if pb > pa:
            return b, a, self.verts[b].copy()
        if pa == 0:  # interior-interior
            keep, gone = (a, b) if a < b else (b, a)
            return keep, gone, 0.5 * (self.verts[a] + self.verts[b])
        # boundary-boundary: only along one side, via a true boundary edge
        if not is_boundary_edge or ca != cb:
            return None
        keep, gone = (a, b) if a < b else (b, a)
        mid = 0.5 * (self.verts[a] + self.verts[b])
        # pin the shared coordinate exactly onto the side
        if ca in (1, 2):
            mid[0] = self.verts[a][0]
        else:
            mid[1] = self.verts[a][1]
        return keep, gone, mid

    def flip_pass(self):
        total = 0
        for _ in range(4):
            em = self.edge_map()
            flips = 0
            dirty = set()
            for key in sorted(em):
                ts = em[key]
                if len(ts) != 2 or any(i in dirty or self.tris[i] is None for i in ts):
                    continue
                a, b = key
                t1, t2 = self.tris[ts[0]], self.tris[ts[1]]
                # orient: t1 holds directed edge a->b
                if not self._has_directed(t1, a, b):
                    t1, t2 = t2, t1
                    ts = [ts[1], ts[0]]
                c = next(v for v in t1 if v not in (a, b))
                d = next(v for v in t2 if v not in (a, b))
                new1, new2 = (a, d, c), (d, b, c)
                if self.tri_area(new1) < 1e-12 or self.tri_area(new2) < 1e-12:
                    continue
                old_q = max(self._alignment(t1), self._alignment(t2))
                new_q = max(self._alignment(new1), self._alignment(new2))
                if new_q < old_q - 1e-12:
                    self.tris[ts[0]] = None
                    self.tris[ts[1]] = None
                    dirty.update(ts)
                    self.tris.append(new1)
                    self.tris.append(new2)
                    flips += 1
            total += flips
            if flips == 0:
                break
        return total

    def _has_directed(self, t, a, b):
        for k in range(3):
            if t[k] == a and t[(k + 1) % 3] == b:
                return True
        return False

    def _alignment(self, t):
        p = [self.verts[v] for v in t]
        mk = (self.metric[t[0]] + self.metric[t[1]] + self.metric[t[2]]) / 3.0
        edge = np.column_stack([p[1] - p[0], p[2] - p[0]])
        jac = edge @ _REF_EDGE_INV
        tmat = jac.T @ mk @ jac
        det = tmat[0, 0] * tmat[1, 1] - tmat[0, 1] * tmat[1, 0]
        if det <= 0:
            return math.inf
        return 0.5 * (tmat[0, 0] + tmat[1, 1]) / math.sqrt(det)

    def smooth_pass(self, sweeps=2, omega=0.4):
        for _ in range(sweeps):
            adj = {}
            for _, t in self.live_triangles():
                for k in range(3):
                    adj.setdefault(t[k], set()).update(
                        (t[(k + 1) % 3], t[(k + 2) % 3])
                    )
            n = len(self.verts)
            new_pos = {}
            for v in range(n):
                if self.vclass[v] != 0 or v not in adj:
                    continue
                disp = np.zeros(2)
                for w in sorted(adj[v]):
                    l = max(self.edge_length(v, w), 0.05)
                    disp += (1.0 - 1.0 / l) * (self.verts[w] - self.verts[v])
                new_pos[v] = self.verts[v] + omega * disp / len(adj[v])
            if not new_pos:
                return
            old = {v: self.verts[v] for v in new_pos}
            for v, p in new_pos.items():
                self.verts[v] = p
            # revert vertices implicated in inverted triangles
            for _ in range(12):
                bad = set()
                for _, t in self.live_triangles():
                    if self.tri_area(t) < 1e-12:
                        bad.update(v for v in t if v in new_pos)
                if not bad:
                    break
                for v in sorted(bad):
                    self.verts[v] = old[v]
                    del new_pos[v]
            moved = sorted(new_pos)
            if moved:
                pts = np.array([self.verts[v] for v in moved])
                tensors = self.sampler(pts)
                for i, v in enumerate(moved):
                    self.metric[v] = tensors[i]


def _compact(mesh: TriMesh) -> TriMesh:
    """Drop unreferenced vertices and reindex."""
    used = np.zeros(mesh.n_vertices, dtype=bool)
    used[mesh.triangles.ravel()] = True
    remap = np.cumsum(used) - 1
    return TriMesh(
        mesh.vertices[used],
        remap[mesh.triangles],
        mesh.boundary[used],
        {k: v[used] for k, v in mesh.fields.items()},
    )


def adapt_mesh(mesh: TriMesh, metric: np.ndarray, n_target: int, passes: int = 3,
               grid: PixelGrid | None = None, metric_sampler=None,
               f_values: np.ndarray | None = None) -> AdaptResult:
    """Adapt `mesh` toward a metric-uniform mesh with ~n_target elements.

    metric: per-vertex SPD tensors on the input mesh; a continuous sampler
    may be supplied instead (metric_sampler wins when both are given).
    grid: when given, the "f" field is re-sampled bilinearly from it
    (f_values overrides the raster used, e.g. a presmoothed copy).
    """
    if passes < 1:
        raise ValueError("passes must be >= 1")
    if n_target < 2:
        raise ValueError("n_target must be >= 2")
    sampler = metric_sampler
    if sampler is None:
        if metric is None:
            raise ValueError("either a metric field or a sampler is required")
        tensors = np.asarray(metric, dtype=np.float64)
        det = (
            tensors[:, 0, 0] * tensors[:, 1, 1]
            - tensors[:, 0, 1] * tensors[:, 1, 0]
        )
        tr = tensors[:, 0, 0] + tensors[:, 1, 1]
        if det.min() <= 0 or tr.min() <= 0:
            raise ValueError("metric tensors must be symmetric positive definite")
        sampler = mesh_metric_sampler(mesh, tensors)
    eng = _Engine(mesh, sampler, grid)

    extra = 0
    p = 0
    while p < passes + extra:
        eng.update_scale(n_target)
        eng.split_pass(n_target)
        eng.collapse_pass(n_target)
        eng.flip_pass()
        eng.smooth_pass()
        p += 1
        n = eng.n_live()
        if p >= passes and extra < 3 and not (0.78 * n_target <= n <= 1.22 * n_target):
            extra += 1

    out = _compact(eng.snapshot())
    if grid is not None:
        src = grid if f_values is None else PixelGrid(f_values)
        out.fields["f"] = sample_bilinear(src, out.vertices)
    eng.update_scale(n_target)
    # carry the normalization over to the compacted vertex set
    norm_metric = sampler(out.vertices) * eng.scale
    lengths = metric_edge_lengths(out, norm_metric)
    band = float(np.mean((lengths >= COLLAPSE_LEN) & (lengths <= SPLIT_LEN)))
    n = out.n_elements
    warnings = []
    status = "ok"
    if not (0.75 * n_target <= n <= 1.25 * n_target):
        status = "count-band-missed"
        warnings.append(
            f"element count {n} outside +-25% of target {n_target}"
        )
    return AdaptResult(out, status, n, n_target, band, norm_metric, warnings)
