"""Finite-difference baseline solver on the pixel grid.

Classic semi-implicit pointwise scheme for the level-set evolution:
half-point difference quotients for the curvature term with the same
1/(1 + |grad phi|) regularization as the FEM path, delta-weighted force
treated explicitly, zero-flux boundary by mirroring. The sweep is a
red-black Gauss-Seidel update (the second color sees updated neighbors),
which keeps the iteration deterministic and vectorizable.
"""

from __future__ import annotations

import numpy as np

from .chanvese import ModelParams, RegionConstants, delta_eps, heaviside_eps
from .fem import C_STABLE_TOL, IterationRecord, RunHistory, SolverParams
from .raster import PixelGrid


def _pad(phi: np.ndarray) -> np.ndarray:
    return np.pad(phi, 1, mode="edge")


def _half_point_coeffs(phi: np.ndarray):
    """Edge coefficients 1/(1+|grad|) at x and y half-points.

    ax[i, j] couples (i, j) with (i, j+1); ay[i, j] couples (i, j) with
    (i+1, j); both have the padded shape so W/E/N/S lookups are shifts.
    """
    p = _pad(phi)
    dx = p[:, 1:] - p[:, :-1]            # (h+2, w+1) at x half-points
    dyc = np.empty_like(p)
    dyc[1:-1] = 0.5 * (p[2:] - p[:-2])
    dyc[0] = p[1] - p[0]
    dyc[-1] = p[-1] - p[-2]
    dy_at_x = 0.5 * (dyc[:, 1:] + dyc[:, :-1])
    ax = 1.0 / (1.0 + np.hypot(dx, dy_at_x))

    dy = p[1:] - p[:-1]                  # (h+1, w+2) at y half-points
    dxc = np.empty_like(p)
    dxc[:, 1:-1] = 0.5 * (p[:, 2:] - p[:, :-2])
    dxc[:, 0] = p[:, 1] - p[:, 0]
    dxc[:, -1] = p[:, -1] - p[:, -2]
    dx_at_y = 0.5 * (dxc[1:] + dxc[:-1])
    ay = 1.0 / (1.0 + np.hypot(dy, dx_at_y))
    return ax, ay


def grid_region_averages(f: np.ndarray, phi: np.ndarray, epsilon: float):
    """Pixelwise counterpart of the mesh region averages."""
    h = heaviside_eps(phi, epsilon)
    int_h = float(h.sum())
    int_g = float(h.size - int_h)
    mean = float(f.mean())
    status = "ok"
    floor = 1e-12 * h.size
    c1 = float((f * h).sum() / int_h) if int_h > floor else mean
    c2 = float((f * (1 - h)).sum() / int_g) if int_g > floor else mean
    if int_h <= floor:
        status = "empty-inside"
    if int_g <= floor:
        status = "empty-outside"
    return RegionConstants(c1, c2), status


def initial_grid_levelset(shape) -> np.ndarray:
    """sin(pi x / 4) sin(pi y / 4) sampled at pixel coordinates."""
    h, w = shape
    x = np.arange(w)
    y = np.arange(h)
    return np.outer(np.sin(np.pi * y / 4.0), np.sin(np.pi * x / 4.0))


def fds_step(phi: np.ndarray, f: np.ndarray, c: RegionConstants,
             p: ModelParams, dt: float) -> np.ndarray:
    """One semi-implicit red-black sweep; coefficients frozen from phi."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    h, w = phi.shape
    checker = (np.add.outer(np.arange(h), np.arange(w)) % 2).astype(bool)
    ax, ay = _half_point_coeffs(phi)
    a_e = p.mu * ax[1:-1, 1:]    # toward (i, j+1)
    a_w = p.mu * ax[1:-1, :-1]
    a_s = p.mu * ay[1:, 1:-1]    # toward (i+1, j)
    a_n = p.mu * ay[:-1, 1:-1]
    force = (
        -p.nu
        - p.lambda1 * (f - c.c1) ** 2
        + p.lambda2 * (f - c.c2) ** 2
    )
    out = phi.copy()
    for color in (False, True):
        mask = checker == color
        pad = _pad(out)
        nb = (
            a_e * pad[1:-1, 2:]
            + a_w * pad[1:-1, :-2]
            + a_s * pad[2:, 1:-1]
            + a_n * pad[:-2, 1:-1]
        )
        delta = delta_eps(out, p.epsilon)
        denom = 1.0 + dt * delta * (a_e + a_w + a_s + a_n)
        num = out + dt * delta * (nb + force)
        out[mask] = (num / denom)[mask]
    return out


def fds_run(f: PixelGrid, p: ModelParams, s: SolverParams,
            phi0: np.ndarray | None = None, log_path=None):
    """Iterate fds_step with region-constant updates until sign stability.

    Same convergence rule as the FEM path; a run that exhausts max_iters is
    flagged (status "max-iterations"), not an error.
    """
    vals = f.values
    phi = initial_grid_levelset(vals.shape) if phi0 is None else phi0.astype(np.float64).copy()
    history = RunHistory()
    prev_c = None
    for it in range(1, s.max_iters + 1):
        c, _ = grid_region_averages(vals, phi, p.epsilon)
        phi_new = fds_step(phi, vals, c, p, s.dt)
        flips = float(np.mean((phi_new >= 0) != (phi >= 0)))
        h = heaviside_eps(phi_new, p.epsilon)
        gy, gx = np.gradient(phi_new)
        ev = float(
            p.mu * (delta_eps(phi_new, p.epsilon) * np.hypot(gx, gy)).sum()
            + p.nu * h.sum()
            + (p.lambda1 * (vals - c.c1) ** 2 * h
               + p.lambda2 * (vals - c.c2) ** 2 * (1 - h)).sum()
        )
        history.records.append(IterationRecord(it, c.c1, c.c2, ev, flips, 0))
        c_stable = prev_c is not None and (
            abs(c.c1 - prev_c.c1) + abs(c.c2 - prev_c.c2) < C_STABLE_TOL
        )
        phi = phi_new
        prev_c = c
        if flips <= s.sign_change_tol and c_stable:
            history.converged = True
            history.status = "converged"
            break
    if not history.converged:
        history.status = "max-iterations"
    if log_path is not None:
        history.write_csv(log_path)
    return phi, history
