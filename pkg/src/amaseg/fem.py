"""Linear finite element discretization of the level-set evolution.

Natural (zero-flux) boundary conditions, so the weak form carries no
boundary integral. Time stepping is semi-implicit: the diffusion operator
is treated implicitly while its coefficients, the force, and the region
constants are lagged to the previous step, giving an SPD system that is
solvable for any positive time step.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .chanvese import (
    ModelParams,
    RegionConstants,
    delta_eps,
    diffusion_coeff,
    element_gradients,
    energy,
    force_term,
    region_averages,
    _midpoint_values,
)
from .mesh import TriMesh


class SolverError(RuntimeError):
    """Linear solver failed to reach the requested tolerance."""


@dataclass
class SolverParams:
    dt: float = 1000.0
    max_iters: int = 50
    sign_change_tol: float = 1e-3   # fraction of vertices allowed to flip sign
    linear_tol: float = 1e-8
    linear_max_iters: int = 2000

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if not 0.0 <= self.sign_change_tol < 1.0:
            raise ValueError("sign_change_tol must lie in [0, 1)")
        if not 0.0 < self.linear_tol < 1.0:
            raise ValueError("linear_tol must lie in (0, 1)")


# region-constant stability threshold of the convergence rule
C_STABLE_TOL = 1e-4


@dataclass
class IterationRecord:
    iteration: int
    c1: float
    c2: float
    energy: float
    sign_change_fraction: float
    linear_iterations: int


@dataclass
class RunHistory:
    records: list = field(default_factory=list)
    converged: bool = False
    status: str = "running"

    @property
    def iterations(self) -> int:
        return len(self.records)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "c1", "c2", "energy",
                        "sign_change_fraction", "linear_iterations"])
            for r in self.records:
                w.writerow([r.iteration, repr(r.c1), repr(r.c2), repr(r.energy),
                            repr(r.sign_change_fraction), r.linear_iterations])


def _geometry(mesh: TriMesh):
    """Areas and P1 basis gradients, shapes (n_e,) and (n_e, 3, 2)."""
    p = mesh.vertices[mesh.triangles]
    e1 = p[:, 1] - p[:, 0]
    e2 = p[:, 2] - p[:, 0]
    det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    areas = 0.5 * det
    if areas.min() <= 0:
        raise ValueError("degenerate or inverted element")
    g = np.empty((len(p), 3, 2))
    g[:, 1, 0] = e2[:, 1] / det
    g[:, 1, 1] = -e2[:, 0] / det
    g[:, 2, 0] = -e1[:, 1] / det
    g[:, 2, 1] = e1[:, 0] / det
    g[:, 0] = -g[:, 1] - g[:, 2]
    return areas, g


def _scatter(mesh: TriMesh, local: np.ndarray) -> sp.csr_matrix:
    """Assemble (n_e, 3, 3) element blocks into a CSR matrix."""
    t = mesh.triangles
    n = mesh.n_vertices
    rows = np.repeat(t, 3, axis=1).ravel()
    cols = np.tile(t, (1, 3)).ravel()
    mat = sp.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n))
    return mat.tocsr()


def assemble_mass(mesh: TriMesh) -> sp.csr_matrix:
    """Exact P1 mass matrix: |K|/6 diagonal, |K|/12 off-diagonal blocks."""
    areas, _ = _geometry(mesh)
    base = np.full((3, 3), 1.0 / 12.0)
    np.fill_diagonal(base, 1.0 / 6.0)
    local = areas[:, None, None] * base
    return _scatter(mesh, local)


def assemble_stiffness(mesh: TriMesh, phi: np.ndarray, p: ModelParams) -> sp.csr_matrix:
    """Diffusion stiffness with coefficients evaluated from phi.

    The scalar diffusion uses the per-element gradient of phi (constant for
    linear elements); the delta weight is averaged over the quadrature
    points. Row sums vanish since constants lie in the kernel.
    """
    areas, g = _geometry(mesh)
    grad = element_gradients(phi, mesh)
    dcoef = diffusion_coeff(grad, p.mu)
    dweight = delta_eps(_midpoint_values(phi, mesh), p.epsilon).mean(axis=1)
    w = areas * dcoef * dweight
    local = w[:, None, None] * np.einsum("kid,kjd->kij", g, g)
    return _scatter(mesh, local)


def assemble_rhs(mesh: TriMesh, phi: np.ndarray, f: np.ndarray,
                 c: RegionConstants, p: ModelParams) -> np.ndarray:
    """Load vector of the delta-weighted force by 3-point quadrature."""
    areas, _ = _geometry(mesh)
    phim = _midpoint_values(phi, mesh)
    fm = _midpoint_values(f, mesh)
    q = delta_eps(phim, p.epsilon) * force_term(fm, c, p)
    # midpoint m is shared by the two vertices of its edge (basis value 1/2)
    contrib = (q + np.roll(q, 1, axis=1)) * (areas[:, None] / 6.0)
    b = np.zeros(mesh.n_vertices)
    np.add.at(b, mesh.triangles.ravel(), contrib.ravel())
    return b


def solve_linear(system: sp.spmatrix, rhs: np.ndarray, tol: float,
                 max_iters: int, x0: np.ndarray | None = None):
    """Jacobi-preconditioned conjugate gradient for SPD systems.

    Returns (solution, iterations); raises SolverError if the relative
    residual does not reach tol within max_iters.
    """
    a = system.tocsr()
    x = np.zeros(len(rhs)) if x0 is None else x0.astype(np.float64).copy()
    bnorm = float(np.linalg.norm(rhs))
    if bnorm == 0.0:
        return np.zeros_like(rhs), 0
    diag = a.diagonal()
    diag = np.where(np.abs(diag) > 1e-300, diag, 1.0)
    r = rhs - a @ x
    z = r / diag
    p_dir = z.copy()
    rz = float(r @ z)
    for it in range(1, max_iters + 1):
        if np.linalg.norm(r) <= tol * bnorm:
            return x, it - 1
        ap = a @ p_dir
        alpha = rz / float(p_dir @ ap)
        x += alpha * p_dir
        r -= alpha * ap
        z = r / diag
        rz_new = float(r @ z)
        p_dir = z + (rz_new / rz) * p_dir
        rz = rz_new
    resid = float(np.linalg.norm(rhs - a @ x)) / bnorm
    if resid <= tol:
        return x, max_iters
    raise SolverError(
        f"conjugate gradient stalled at relative residual {resid:.3e} "
        f"after {max_iters} iterations"
    )


def step_semi_implicit(mass: sp.spmatrix, phi_n: np.ndarray, mesh: TriMesh,
                       f: np.ndarray, c: RegionConstants, p: ModelParams,
                       s: SolverParams):
    """One semi-implicit step: solve (M + dt A~) phi = M phi_n + dt b~.

    A~ and b~ are assembled from phi_n (lagged coefficients); the system is
    SPD for any dt > 0.
    """
    a_lag = assemble_stiffness(mesh, phi_n, p)
    b_lag = assemble_rhs(mesh, phi_n, f, c, p)
    system = (mass + s.dt * a_lag).tocsr()
    rhs = mass @ phi_n + s.dt * b_lag
    return solve_linear(system, rhs, s.linear_tol, s.linear_max_iters, x0=phi_n)


def run_fem(mesh: TriMesh, f: np.ndarray, phi0: np.ndarray, p: ModelParams,
            s: SolverParams, log_path=None):
    """Evolve phi until the sign pattern and region constants stabilize.

    Each iteration recomputes (c1, c2) from the current phi, reassembles the
    lagged operators, and takes one semi-implicit step. Convergence requires
    the fraction of sign flips to drop below sign_change_tol and the region
    constants to move by less than C_STABLE_TOL in one iteration.
    """
    if len(f) != mesh.n_vertices or len(phi0) != mesh.n_vertices:
        raise ValueError("field sizes must match the mesh")
    mass = assemble_mass(mesh)
    phi = phi0.astype(np.float64).copy()
    history = RunHistory()
    prev_c = None
    for it in range(1, s.max_iters + 1):
        c, _ = region_averages(f, phi, mesh, p.epsilon)
        phi_new, lin_iters = step_semi_implicit(mass, phi, mesh, f, c, p, s)
        flips = float(np.mean((phi_new >= 0) != (phi >= 0)))
        ev = energy(f, phi_new, mesh, p, c)
        history.records.append(
            IterationRecord(it, c.c1, c.c2, ev, flips, lin_iters)
        )
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
