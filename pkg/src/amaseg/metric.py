"""Metric tensors that drive mesh adaptation.

Two constructions: a Hessian-based anisotropic metric whose regularization
scalar is defined implicitly so that about half of the elements concentrate
in high-curvature regions, and the inverse-diffusion (DMP) metric built from
the image gradient, under which the linear FEM solution satisfies a discrete
maximum principle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .mesh import TriMesh

_I2 = np.eye(2)


def matrix_abs(sym: np.ndarray) -> np.ndarray:
    """Eigenvalue absolute value of symmetric 2x2 tensors, shape (..., 2, 2).

    Computed as sqrt(H^2) via the closed form for SPD square roots, which
    keeps the eigenvectors and is fully vectorized.
    """
    h = np.asarray(sym, dtype=np.float64)
    m = h @ h  # symmetric PSD
    tr = m[..., 0, 0] + m[..., 1, 1]
    det = m[..., 0, 0] * m[..., 1, 1] - m[..., 0, 1] * m[..., 1, 0]
    s = np.sqrt(np.maximum(det, 0.0))
    denom = np.sqrt(np.maximum(tr + 2.0 * s, 0.0))
    safe = denom > 1e-150
    out = m + s[..., None, None] * _I2
    with np.errstate(invalid="ignore", divide="ignore"):
        out = out / denom[..., None, None]
    return np.where(safe[..., None, None], out, 0.0)


def density_factor(hess: np.ndarray, alpha: float) -> np.ndarray:
    """Local mesh-density factor of the Hessian metric.

    ||I + |H|/alpha||_F^(1/2) * det(I + |H|/alpha)^(1/4); >= 2^(1/4) with
    equality at H = 0.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    b = _I2 + matrix_abs(hess) / alpha
    fro = np.sqrt((b * b).sum(axis=(-2, -1)))
    det = b[..., 0, 0] * b[..., 1, 1] - b[..., 0, 1] * b[..., 1, 0]
    return np.sqrt(fro) * det ** 0.25


def metric_aniso(hess: np.ndarray, alpha: float) -> np.ndarray:
    """Hessian-based anisotropic metric tensor, SPD, shape (..., 2, 2).

    Shares the eigenvectors of H; its determinant equals the squared
    density factor, so mesh density follows curvature.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    b = _I2 + matrix_abs(hess) / alpha
    det = b[..., 0, 0] * b[..., 1, 1] - b[..., 0, 1] * b[..., 1, 0]
    rho = density_factor(hess, alpha)
    return (rho / np.sqrt(det))[..., None, None] * b


@dataclass
class AlphaSolve:
    """Result of the implicit density-regularization solve."""

    alpha: float | None
    status: str  # "ok" or "uniform-metric"
    residual: float
    target: float


def _element_hessians(hess_vertices: np.ndarray, mesh: TriMesh) -> np.ndarray:
    return hess_vertices[mesh.triangles].mean(axis=1)


def solve_alpha(hess_vertices: np.ndarray, mesh: TriMesh, rel_tol: float = 1e-6,
                max_steps: int = 200) -> AlphaSolve:
    """Find alpha so the density integral equals twice the domain area.

    The integral sum_K rho_K(alpha) |K| is continuous and strictly
    decreasing in alpha with infimum 2^(1/4) |Omega|, so a bisection on
    log(alpha) converges whenever the Hessian field is not negligible.
    For an (almost) flat field the equation has no solution and a
    "uniform-metric" sentinel is returned.
    """
    areas = mesh.areas()
    omega = areas.sum()
    target = 2.0 * omega
    hk = _element_hessians(np.asarray(hess_vertices, dtype=np.float64), mesh)
    hnorm = np.sqrt((hk * hk).sum(axis=(-2, -1)))
    hmax = float(hnorm.max())
    if hmax < 1e-12:
        return AlphaSolve(None, "uniform-metric", math.inf, target)

    def integral(alpha):
        return float((density_factor(hk, alpha) * areas).sum())

    lo, hi = 1e-8 * hmax, 1e8 * hmax
    if integral(lo) < target:
        # even the stiffest regularization cannot reach the target
        return AlphaSolve(None, "uniform-metric", math.inf, target)
    llo, lhi = math.log(lo), math.log(hi)
    alpha = math.exp(0.5 * (llo + lhi))
    for _ in range(max_steps):
        alpha = math.exp(0.5 * (llo + lhi))
        val = integral(alpha)
        if val > target:
            llo = math.log(alpha)
        else:
            lhi = math.log(alpha)
        if lhi - llo < 1e-13:
            break
    resid = abs(integral(alpha) - target) / target
    status = "ok" if resid <= rel_tol else "not-converged"
    return AlphaSolve(alpha, status, resid, target)


def diffusion_dmp(grad: np.ndarray) -> np.ndarray:
    """Anisotropic diffusion tensor from a gradient, shape (..., 2, 2).

    Eigenvalue 1/r along the gradient and 1 across it, r = 1 + |grad|^2.
    The removable singularity at zero gradient takes the analytic limit I.
    """
    g = np.asarray(grad, dtype=np.float64)
    gx, gy = g[..., 0], g[..., 1]
    g2 = gx * gx + gy * gy
    r = 1.0 + g2
    out = np.empty(g.shape[:-1] + (2, 2), dtype=np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        c = 1.0 / (r * (r - 1.0))
        out[..., 0, 0] = c * (gx * gx + r * gy * gy)
        out[..., 0, 1] = c * (1.0 - r) * gx * gy
        out[..., 1, 0] = out[..., 0, 1]
        out[..., 1, 1] = c * (gy * gy + r * gx * gx)
    flat = g2 < 1e-12
    if np.any(flat):
        out[flat] = _I2
    return out


def metric_dmp(grad: np.ndarray) -> np.ndarray:
    """Inverse of the diffusion tensor: I + grad grad^T, eigenvalues {r, 1}."""
    g = np.asarray(grad, dtype=np.float64)
    out = np.empty(g.shape[:-1] + (2, 2), dtype=np.float64)
    out[..., 0, 0] = 1.0 + g[..., 0] * g[..., 0]
    out[..., 0, 1] = g[..., 0] * g[..., 1]
    out[..., 1, 0] = out[..., 0, 1]
    out[..., 1, 1] = 1.0 + g[..., 1] * g[..., 1]
    return out


def dmp_element_metric(diffusion_vertices: np.ndarray, mesh: TriMesh, k: int) -> np.ndarray:
    """Element DMP tensor: invert the vertex-averaged diffusion tensor."""
    d = diffusion_vertices[mesh.triangles[k]].mean(axis=0)
    det = d[0, 0] * d[1, 1] - d[0, 1] * d[1, 0]
    return np.array([[d[1, 1], -d[0, 1]], [-d[1, 0], d[0, 0]]]) / det


def cap_anisotropy(metric: np.ndarray, max_aspect: float) -> np.ndarray:
    """Limit the eigenvalue ratio of SPD tensors while preserving det.

    Keeps the local mesh density (area) prescription but bounds the element
    aspect ratio at max_aspect, which keeps extreme metrics meshable.
    """
    m = np.asarray(metric, dtype=np.float64).copy()
    a, b, c = m[..., 0, 0], m[..., 0, 1], m[..., 1, 1]
    mean = 0.5 * (a + c)
    rad = np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    lam1 = mean + rad  # largest
    lam2 = np.maximum(mean - rad, 1e-300)
    ratio_cap = max_aspect ** 2
    over = lam1 / lam2 > ratio_cap
    if not np.any(over):
        return m
    geo = np.sqrt(lam1 * lam2)
    new1 = geo * max_aspect
    new2 = geo / max_aspect
    # eigenvector of lam1
    vx = np.where(np.abs(b) > 1e-300, b, lam1 - c)
    vy = np.where(np.abs(b) > 1e-300, lam1 - a, np.zeros_like(b))
    deg = (np.abs(vx) < 1e-300) & (np.abs(vy) < 1e-300)
    vx = np.where(deg, 1.0, vx)
    nrm = np.sqrt(vx * vx + vy * vy)
    vx, vy = vx / nrm, vy / nrm
    r11 = new1 * vx * vx + new2 * vy * vy
    r12 = (new1 - new2) * vx * vy
    r22 = new1 * vy * vy + new2 * vx * vx
    m[..., 0, 0] = np.where(over, r11, a)
    m[..., 0, 1] = np.where(over, r12, b)
    m[..., 1, 0] = m[..., 0, 1]
    m[..., 1, 1] = np.where(over, r22, c)
    return m
