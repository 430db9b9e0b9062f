"""Two-phase piecewise-constant segmentation model terms.

Regularized Heaviside/delta pair, region constants, force and diffusion
coefficients, and the diagnostic energy. All mesh integrals use one shared
3-point edge-midpoint quadrature rule (exact for quadratics), so assembly
and diagnostics stay consistent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mesh import TriMesh


@dataclass
class ModelParams:
    """Weights of the segmentation functional."""

    mu: float = 1e-4        # curve-length weight
    nu: float = 0.0         # enclosed-area weight
    lambda1: float = 1.0    # inside fidelity weight
    lambda2: float = 1.0    # outside fidelity weight
    epsilon: float = 1.0    # Heaviside regularization width

    def __post_init__(self):
        if self.lambda1 <= 0 or self.lambda2 <= 0:
            raise ValueError("fidelity weights must be positive")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.mu < 0:
            raise ValueError("mu must be nonnegative")


@dataclass
class RegionConstants:
    c1: float
    c2: float


def heaviside_eps(phi, epsilon: float):
    """Smooth step 0.5 (1 + (2/pi) arctan(phi/eps)); H(-x) = 1 - H(x)."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    return 0.5 * (1.0 + (2.0 / np.pi) * np.arctan(np.asarray(phi) / epsilon))


def delta_eps(phi, epsilon: float):
    """Derivative of heaviside_eps: eps / (pi (eps^2 + phi^2))."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    p = np.asarray(phi)
    return epsilon / (np.pi * (epsilon ** 2 + p ** 2))


def _midpoint_values(nodal: np.ndarray, mesh: TriMesh) -> np.ndarray:
    """(n_e, 3) values of a nodal field at the three edge midpoints."""
    v = nodal[mesh.triangles]
    return 0.5 * (v + np.roll(v, -1, axis=1))


def region_averages(f: np.ndarray, phi: np.ndarray, mesh: TriMesh, epsilon: float):
    """Weighted region means (c1 inside, c2 outside) by element quadrature.

    An (almost) empty region cannot be averaged; its constant falls back to
    the global mean and the returned status says which side was empty.
    """
    areas = mesh.areas()
    w = areas[:, None] / 3.0
    h = heaviside_eps(_midpoint_values(phi, mesh), epsilon)
    fm = _midpoint_values(f, mesh)
    omega = areas.sum()
    int_h = float((w * h).sum())
    int_fh = float((w * fm * h).sum())
    int_g = omega - int_h
    int_fg = float((w * fm).sum()) - int_fh
    global_mean = float((w * fm).sum()) / omega
    floor = 1e-12 * omega
    status = "ok"
    if int_h > floor:
        c1 = int_fh / int_h
    else:
        c1, status = global_mean, "empty-inside"
    if int_g > floor:
        c2 = int_fg / int_g
    else:
        c2, status = global_mean, "empty-outside"
    return RegionConstants(c1, c2), status


def force_term(f_at_x, c: RegionConstants, p: ModelParams):
    """Region-competition force -nu - l1 (f-c1)^2 + l2 (f-c2)^2."""
    f = np.asarray(f_at_x)
    return -p.nu - p.lambda1 * (f - c.c1) ** 2 + p.lambda2 * (f - c.c2) ** 2


def diffusion_coeff(grad_phi, mu: float):
    """Regularized curvature-diffusion coefficient mu / (1 + |grad phi|)."""
    if mu <= 0:
        raise ValueError("mu must be positive")
    g = np.asarray(grad_phi, dtype=np.float64)
    norm = np.sqrt((g * g).sum(axis=-1))
    return mu / (1.0 + norm)


def element_gradients(nodal: np.ndarray, mesh: TriMesh) -> np.ndarray:
    """(n_e, 2) constant per-element gradient of a nodal linear field."""
    p = mesh.vertices[mesh.triangles]
    v = nodal[mesh.triangles]
    e1 = p[:, 1] - p[:, 0]
    e2 = p[:, 2] - p[:, 0]
    det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    d1 = v[:, 1] - v[:, 0]
    d2 = v[:, 2] - v[:, 0]
    gx = (d1 * e2[:, 1] - d2 * e1[:, 1]) / det
    gy = (d2 * e1[:, 0] - d1 * e2[:, 0]) / det
    return np.stack([gx, gy], axis=-1)


def energy(f: np.ndarray, phi: np.ndarray, mesh: TriMesh, p: ModelParams,
           c: RegionConstants) -> float:
    """Diagnostic value of the segmentation functional at (phi, c1, c2)."""
    areas = mesh.areas()
    w = areas[:, None] / 3.0
    phim = _midpoint_values(phi, mesh)
    fm = _midpoint_values(f, mesh)
    h = heaviside_eps(phim, p.epsilon)
    d = delta_eps(phim, p.epsilon)
    grad = element_gradients(phi, mesh)
    gnorm = np.sqrt((grad * grad).sum(axis=-1))
    length = float(((w * d).sum(axis=1) * gnorm).sum())
    area_in = float((w * h).sum())
    fid1 = float((w * (fm - c.c1) ** 2 * h).sum())
    fid2 = float((w * (fm - c.c2) ** 2 * (1.0 - h)).sum())
    return p.mu * length + p.nu * area_in + p.lambda1 * fid1 + p.lambda2 * fid2
