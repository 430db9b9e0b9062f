"""End-to-end segmentation: represent, solve, reconstruct, multi-level.

Stage 1 builds an image-adapted anisotropic mesh (far fewer vertices than
pixels), stage 2 evolves the level set on that fixed mesh, stage 3
interpolates the solution back to the pixel grid. Multi-level segmentation
re-applies the whole pipeline to the inside and outside regions of the
previous level to discover additional regions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import binary_dilation

from .adapt import AdaptResult, adapt_mesh, grid_metric_sampler
from .chanvese import ModelParams, RegionConstants, region_averages
from .fem import RunHistory, SolverParams, run_fem
from .mesh import TriLocator, TriMesh, uniform_initial_mesh
from .metric import AlphaSolve, cap_anisotropy, metric_aniso, metric_dmp, solve_alpha
from .raster import (
    PixelGrid,
    grid_gradient,
    grid_hessian,
    sample_bilinear,
    smoothed_values,
)

# paper parameters are calibrated for 8-bit gray values; on [0, 1] data the
# fidelity weights are scaled by INTENSITY_SCALE^2 so the same (mu, nu, dt)
# drive the same discrete evolution
INTENSITY_SCALE = 255.0


@dataclass
class PipelineConfig:
    """Parameters of a full segmentation run (defaults per the CLI)."""

    sd: float = 0.002               # mesh vertices per pixel
    metric: str = "aniso"           # "aniso" or "dmp"
    dt: float = 1000.0
    mu: float = 1e-4
    nu: float = 0.0
    lambda1: float = 1.0
    lambda2: float = 1.0
    epsilon: float = 1.0
    levels: int = 1
    max_iters: int = 50
    passes: int = 3                 # representation (metric rebuild) passes
    adapt_passes: int = 3           # local-operation passes per rebuild
    presmooth_sigma: float = 1.0    # derivative smoothing for the metric
    f_smooth_sigma: float = 0.0     # optional smoothing of sampled image values
    intensity_scale: float = INTENSITY_SCALE
    sign_change_tol: float = 1e-3
    linear_tol: float = 1e-8
    linear_max_iters: int = 2000
    max_aspect: float = 8.0

    def model(self) -> ModelParams:
        """Solver-facing weights with the intensity calibration applied."""
        s2 = self.intensity_scale ** 2
        return ModelParams(
            mu=self.mu,
            nu=self.nu,
            lambda1=self.lambda1 * s2,
            lambda2=self.lambda2 * s2,
            epsilon=self.epsilon,
        )

    def fds_model(self) -> ModelParams:
        """Baseline weights: the classic scheme runs on [0, 1] data as-is."""
        return ModelParams(
            mu=self.mu, nu=self.nu, lambda1=self.lambda1,
            lambda2=self.lambda2, epsilon=self.epsilon,
        )

    def solver(self) -> SolverParams:
        return SolverParams(
            dt=self.dt,
            max_iters=self.max_iters,
            sign_change_tol=self.sign_change_tol,
            linear_tol=self.linear_tol,
            linear_max_iters=self.linear_max_iters,
        )


@dataclass
class RepresentResult:
    mesh: TriMesh
    metric: np.ndarray              # per-vertex tensors (unnormalized scale)
    alpha: AlphaSolve | None        # only for the Hessian metric
    adapt: AdaptResult
    n_target_vertices: int


def initial_levelset(mesh: TriMesh) -> np.ndarray:
    """sin(pi x / 4) sin(pi y / 4) at the mesh vertices (pixel units)."""
    v = mesh.vertices
    return np.sin(np.pi * v[:, 0] / 4.0) * np.sin(np.pi * v[:, 1] / 4.0)


def _pixel_metric(grid: PixelGrid, kind: str, mesh: TriMesh,
                  cfg: PipelineConfig):
    """Per-pixel metric raster for the current mesh, plus the alpha solve."""
    scale = cfg.intensity_scale
    alpha = None
    if kind == "aniso":
        hess = grid_hessian(grid, cfg.presmooth_sigma) * scale
        hv = _sample_tensor(hess, mesh.vertices)
        alpha = solve_alpha(hv, mesh)
        if alpha.status == "uniform-metric":
            raster = np.broadcast_to(
                np.eye(2), hess.shape
            ).copy()
        else:
            raster = metric_aniso(hess, alpha.alpha)
    elif kind == "dmp":
        grad = grid_gradient(grid, cfg.presmooth_sigma) * scale
        raster = metric_dmp(grad)
    else:
        raise ValueError(f"unknown metric kind {kind!r}")
    raster = cap_anisotropy(raster, cfg.max_aspect)
    return raster, alpha


def _sample_tensor(raster: np.ndarray, points: np.ndarray) -> np.ndarray:
    from .adapt import _bilinear_raw

    pts = np.atleast_2d(points)
    out = np.empty((len(pts), 2, 2))
    out[:, 0, 0] = _bilinear_raw(np.ascontiguousarray(raster[..., 0, 0]), pts)
    out[:, 0, 1] = _bilinear_raw(np.ascontiguousarray(raster[..., 0, 1]), pts)
    out[:, 1, 0] = out[:, 0, 1]
    out[:, 1, 1] = _bilinear_raw(np.ascontiguousarray(raster[..., 1, 1]), pts)
    return out


def ama_represent(grid: PixelGrid, sd: float, kind: str = "aniso",
                  passes: int = 3, cfg: PipelineConfig | None = None) -> RepresentResult:
    """Build an image-adapted mesh carrying nodal image values.

    Each pass samples the image at the current vertices, rebuilds the metric
    from image derivatives, and adapts the mesh toward
    round(sd * width * height) vertices.
    """
    if not 0 < sd <= 1:
        raise ValueError("sd must lie in (0, 1]")
    cfg = cfg or PipelineConfig()
    n_v = max(16, int(round(sd * grid.width * grid.height)))
    n_e = max(16, int(round(1.9 * n_v)))
    f_values = smoothed_values(grid, cfg.f_smooth_sigma)
    mesh = uniform_initial_mesh(grid.width - 1.0, grid.height - 1.0, n_v)
    mesh.fields["f"] = sample_bilinear(PixelGrid(f_values), mesh.vertices)
    result = None
    alpha = None
    for _ in range(max(1, passes)):
        raster, alpha = _pixel_metric(grid, kind, mesh, cfg)
        sampler = grid_metric_sampler(raster)
        result = adapt_mesh(
            mesh, None, n_e, cfg.adapt_passes,
            grid=grid, metric_sampler=sampler, f_values=f_values,
        )
        mesh = result.mesh
    metric = _sample_tensor(raster, mesh.vertices)
    return RepresentResult(mesh, metric, alpha, result, n_v)


def reconstruct(mesh: TriMesh, phi: np.ndarray, c: RegionConstants, shape):
    """Rasterize the piecewise-constant segmentation and the level set.

    Pixels take c1 where the interpolated level set is nonnegative, c2
    elsewhere.
    """
    h, w = shape
    xs, ys = np.meshgrid(np.arange(w, dtype=np.float64),
                         np.arange(h, dtype=np.float64))
    pts = np.column_stack([xs.ravel(), ys.ravel()])
    loc = TriLocator(mesh)
    phi_r = loc.interpolate(phi, pts).reshape(h, w)
    seg = np.where(phi_r >= 0, c.c1, c.c2)
    return PixelGrid(np.clip(seg, 0.0, 1.0)), phi_r


def extract_contour(mesh: TriMesh, phi: np.ndarray, eps: float = 1e-12):
    """Zero-level polylines as lists of (n, 2) point arrays.

    Nodal values with |phi| < eps are nudged positive so every crossing is
    transversal; crossing points are computed per edge, so adjacent
    triangles chain consistently.
    """
    p = np.asarray(phi, dtype=np.float64).copy()
    p[np.abs(p) < eps] = eps
    tris = mesh.triangles
    signs = p >= 0
    n_pos = signs[tris].sum(axis=1)
    crossing = (n_pos == 1) | (n_pos == 2)
    segments = []
    edge_points = {}

    def edge_point(a, b):
        key = (a, b) if a < b else (b, a)
        if key not in edge_points:
            t = p[key[0]] / (p[key[0]] - p[key[1]])
            edge_points[key] = (
                mesh.vertices[key[0]] + t * (mesh.vertices[key[1]] - mesh.vertices[key[0]])
            )
        return key

    seg_keys = []
    for k in np.flatnonzero(crossing):
        t = tris[k]
        keys = []
        for i in range(3):
            a, b = t[i], t[(i + 1) % 3]
            if signs[a] != signs[b]:
                keys.append(edge_point(a, b))
        if len(keys) == 2:
            seg_keys.append(tuple(keys))
    # chain segments through shared edge keys
    link = {}
    for i, (ka, kb) in enumerate(seg_keys):
        link.setdefault(ka, []).append(i)
        link.setdefault(kb, []).append(i)
    used = np.zeros(len(seg_keys), dtype=bool)
    polylines = []
    for start in range(len(seg_keys)):
        if used[start]:
            continue
        # walk both directions from the starting segment
        chain = list(seg_keys[start])
        used[start] = True
        for head in (0, 1):
            while True:
                end_key = chain[-1] if head == 0 else chain[0]
                nxt = [i for i in link[end_key] if not used[i]]
                if not nxt:
                    break
                i = nxt[0]
                used[i] = True
                ka, kb = seg_keys[i]
                new_key = kb if ka == end_key else ka
                if head == 0:
                    chain.append(new_key)
                else:
                    chain.insert(0, new_key)
        polylines.append(np.array([edge_points[k] for k in chain]))
    return polylines


@dataclass
class LevelRun:
    """Single pipeline run on one (possibly masked) image."""

    represent: RepresentResult
    phi: np.ndarray
    c: RegionConstants
    history: RunHistory
    mask: np.ndarray                # pixels with nonnegative level set
    seg: PixelGrid
    phi_raster: np.ndarray
    contours: list


def segment_one_level(grid: PixelGrid, cfg: PipelineConfig | None = None) -> LevelRun:
    """Represent, solve, and reconstruct one two-phase segmentation."""
    cfg = cfg or PipelineConfig()
    rep = ama_represent(grid, cfg.sd, cfg.metric, cfg.passes, cfg)
    mesh = rep.mesh
    phi0 = initial_levelset(mesh)
    phi, history = run_fem(mesh, mesh.fields["f"], phi0, cfg.model(), cfg.solver())
    c, _ = region_averages(mesh.fields["f"], phi, mesh, cfg.epsilon)
    seg, phi_r = reconstruct(mesh, phi, c, (grid.height, grid.width))
    contours = extract_contour(mesh, phi)
    return LevelRun(rep, phi, c, history, phi_r >= 0, seg, phi_r, contours)


@dataclass
class BranchRun:
    level: int
    subset: np.ndarray              # pixels this branch was asked to segment
    run: LevelRun | None
    refined: bool
    status: str                     # "refined", "no-contrast", "too-small", ...
    contours: list = field(default_factory=list)


@dataclass
class SegmentationResult:
    levels: list                    # list of lists of BranchRun
    labels: np.ndarray              # final per-pixel region label
    converged: bool

    @property
    def contours(self):
        return [c for lvl in self.levels for b in lvl for c in b.contours]


# refinement guards: a branch must cover enough pixels and separate two
# genuinely different constants to contribute new regions
MIN_SUBSET_FRACTION = 1e-3
MIN_CONTRAST = 1e-3


def _clip_contours(contours, subset):
    """Keep polyline points inside the (slightly dilated) subset."""
    grown = binary_dilation(subset, iterations=2)
    h, w = subset.shape
    kept = []
    for poly in contours:
        xi = np.clip(np.rint(poly[:, 0]).astype(int), 0, w - 1)
        yi = np.clip(np.rint(poly[:, 1]).astype(int), 0, h - 1)
        inside = grown[yi, xi]
        if inside.all():
            kept.append(poly)
            continue
        # split the polyline at excursions outside the subset
        runs = np.flatnonzero(np.diff(inside.astype(int)) != 0) + 1
        for part in np.split(np.arange(len(poly)), runs):
            if len(part) >= 2 and inside[part[0]]:
                kept.append(poly[part])
    return kept


def segment_multilevel(grid: PixelGrid, levels: int,
                       cfg: PipelineConfig | None = None) -> SegmentationResult:
    """Recursive two-phase segmentation of inside/outside regions.

    Out-of-subset pixels are replaced by the subset mean before each branch
    run so they produce no spurious edges; labels refine whenever a branch
    finds two well-separated constants.
    """
    if levels < 1:
        raise ValueError("levels must be >= 1")
    cfg = cfg or PipelineConfig()
    total = grid.n_pixels
    labels = np.zeros((grid.height, grid.width), dtype=np.int64)
    all_levels = []
    converged = True
    active = [np.ones_like(labels, dtype=bool)]
    next_label = 1
    for level in range(1, levels + 1):
        branch_runs = []
        next_active = []
        for subset in active:
            n_px = int(subset.sum())
            if n_px < MIN_SUBSET_FRACTION * total:
                branch_runs.append(
                    BranchRun(level, subset, None, False, "too-small")
                )
                continue
            vals = grid.values.copy()
            vals[~subset] = grid.values[subset].mean()
            run = segment_one_level(PixelGrid(vals), cfg)
            converged = converged and run.history.converged
            inside = subset & run.mask
            outside = subset & ~run.mask
            contrast = abs(run.c.c1 - run.c.c2)
            min_px = max(16, int(MIN_SUBSET_FRACTION * total))
            if contrast < MIN_CONTRAST or min(inside.sum(), outside.sum()) < min_px:
                branch_runs.append(
                    BranchRun(level, subset, run, False, "no-contrast")
                )
                continue
            labels[inside] = next_label
            next_label += 1
            contours = _clip_contours(run.contours, subset)
            branch_runs.append(
                BranchRun(level, subset, run, True, "refined", contours)
            )
            next_active.extend([inside, outside])
        all_levels.append(branch_runs)
        active = next_active
        if not active:
            break
    # relabel into a compact range
    _, labels = np.unique(labels, return_inverse=True)
    labels = labels.reshape(grid.values.shape)
    return SegmentationResult(all_levels, labels, converged)


def dice(mask_a: np.ndarray, mask_b: np.ndarray) -> float:
    """Overlap 2|A n B| / (|A| + |B|); two empty masks count as identical."""
    a = np.asarray(mask_a, dtype=bool)
    b = np.asarray(mask_b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError("mask shapes differ")
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / denom


def best_polarity_dice(mask: np.ndarray, reference: np.ndarray) -> float:
    """Dice against a reference, allowing for swapped inside/outside."""
    return max(dice(mask, reference), dice(~np.asarray(mask, bool), reference))
