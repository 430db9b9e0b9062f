"""Command-line front end for the segmentation pipeline and the baseline.

Exit codes: 0 success, 1 usage error, 2 runtime failure, 3 finished without
meeting the convergence rule (partial outputs are still written).
"""

from __future__ import annotations

import argparse
import csv
import sys
import time
from dataclasses import dataclass

import numpy as np

from . import __version__
from .fds import fds_run
from .mesh import export_svg
from .pipeline import (
    PipelineConfig,
    best_polarity_dice,
    segment_multilevel,
)
from .raster import PixelGrid, RasterError, load_image, write_pgm, _atomic_write


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    input: str
    output: str
    solver: str = "ama"
    metric: str = "aniso"
    sd: float = 0.002
    dt: float = 1000.0
    mu: float = 1e-4
    nu: float = 0.0
    lambda1: float = 1.0
    lambda2: float = 1.0
    epsilon: float = 1.0
    levels: int = 1
    max_iters: int = 50
    passes: int = 3
    presmooth_sigma: float = 1.0
    f_smooth_sigma: float = 0.0
    log: bool = False
    reference: str | None = None
    threads: int = 1

    def validate(self):
        if self.solver not in ("ama", "fds"):
            raise UsageError("--solver must be 'ama' or 'fds'")
        if self.metric not in ("aniso", "dmp"):
            raise UsageError("--metric must be 'aniso' or 'dmp'")
        if not 0 < self.sd <= 1:
            raise UsageError("--sd must lie in (0, 1]")
        if self.dt <= 0:
            raise UsageError("--dt must be positive")
        if self.mu < 0:
            raise UsageError("--mu must be nonnegative")
        if self.lambda1 <= 0 or self.lambda2 <= 0:
            raise UsageError("--lambda1/--lambda2 must be positive")
        if self.epsilon <= 0:
            raise UsageError("--epsilon must be positive")
        if self.levels < 1:
            raise UsageError("--levels must be >= 1")
        if self.max_iters < 1:
            raise UsageError("--max-iters must be >= 1")
        if self.passes < 1:
            raise UsageError("--passes must be >= 1")
        if self.presmooth_sigma < 0 or self.f_smooth_sigma < 0:
            raise UsageError("smoothing sigmas must be >= 0")
        if self.threads < 1:
            raise UsageError("--threads must be >= 1")


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse default exits with 2; usage is 1
        raise UsageError(message)


def build_parser() -> _Parser:
    p = _Parser(
        prog="amaseg",
        description=(
            "Two-phase and multi-level image segmentation on an "
            "image-adapted anisotropic triangular mesh, with a classic "
            "finite-difference baseline."
        ),
        epilog=(
            "Intensities are normalized to [0, 1] on load. The fidelity "
            "weights of the mesh solver are internally multiplied by the "
            "8-bit intensity range squared, so mu, nu, and dt values "
            "calibrated for raw gray levels behave identically here. The "
            "fds baseline follows the classic formulation on normalized "
            "values (small dt, e.g. 0.5, is the literature setting)."
        ),
    )
    p.add_argument("input", help="input image (PGM; PNG with Pillow)")
    p.add_argument("-o", "--output", default="amaseg_out",
                   help="output file prefix (default: %(default)s)")
    p.add_argument("--solver", default="ama", choices=("ama", "fds"))
    p.add_argument("--metric", default="aniso", choices=("aniso", "dmp"))
    p.add_argument("--sd", type=float, default=0.002,
                   help="mesh sample density, vertices per pixel (default %(default)s)")
    p.add_argument("--dt", type=float, default=1000.0)
    p.add_argument("--mu", type=float, default=1e-4,
                   help="curve-length weight; 0.01 gives smoother boundaries")
    p.add_argument("--nu", type=float, default=0.0)
    p.add_argument("--lambda1", type=float, default=1.0)
    p.add_argument("--lambda2", type=float, default=1.0)
    p.add_argument("--epsilon", type=float, default=1.0)
    p.add_argument("--levels", type=int, default=1)
    p.add_argument("--max-iters", type=int, default=50)
    p.add_argument("--passes", type=int, default=3,
                   help="mesh representation passes (metric rebuilds)")
    p.add_argument("--presmooth-sigma", type=float, default=1.0,
                   help="Gaussian sigma for metric derivatives (pixels)")
    p.add_argument("--f-smooth-sigma", type=float, default=0.0,
                   help="Gaussian sigma applied to sampled image values")
    p.add_argument("--log", action="store_true",
                   help="write per-iteration history CSV")
    p.add_argument("--reference", default=None,
                   help="reference mask image for a Dice score in the summary")
    p.add_argument("--threads", type=int, default=1,
                   help="worker threads (computation is currently single-threaded)")
    return p


def parse_args(argv) -> RunConfig:
    ns = build_parser().parse_args(argv)
    cfg = RunConfig(**vars(ns))
    cfg.validate()
    return cfg


def _rescaled(values: np.ndarray) -> PixelGrid:
    lo, hi = float(values.min()), float(values.max())
    if hi - lo < 1e-300:
        return PixelGrid(np.full_like(values, 0.5))
    return PixelGrid((values - lo) / (hi - lo))


def _overlay(grid: PixelGrid, contours) -> PixelGrid:
    img = grid.values.copy()
    h, w = img.shape
    for poly in contours:
        # densify so the drawn curve is gapless
        seg = np.asarray(poly)
        if len(seg) < 2:
            continue
        d = np.diff(seg, axis=0)
        steps = np.maximum(1, np.ceil(np.abs(d).max(axis=1) * 2).astype(int))
        pts = [seg[:1]]
        for i, n in enumerate(steps):
            t = np.linspace(0, 1, n + 1)[1:, None]
            pts.append(seg[i] + t * d[i])
        pts = np.vstack(pts)
        xi = np.clip(np.rint(pts[:, 0]).astype(int), 0, w - 1)
        yi = np.clip(np.rint(pts[:, 1]).astype(int), 0, h - 1)
        img[yi, xi] = 1.0
    return PixelGrid(img)


def _write_contours_csv(path, contours_by_level):
    rows = [["level", "polyline", "x", "y"]]
    for lvl, contours in enumerate(contours_by_level, start=1):
        for pid, poly in enumerate(contours):
            for x, y in poly:
                rows.append([lvl, pid, repr(float(x)), repr(float(y))])
    out = "\n".join(",".join(str(c) for c in r) for r in rows) + "\n"
    _atomic_write(path, out.encode())


def run(cfg: RunConfig) -> int:
    t0 = time.perf_counter()
    grid = load_image(cfg.input)
    pipe = PipelineConfig(
        sd=cfg.sd, metric=cfg.metric, dt=cfg.dt, mu=cfg.mu, nu=cfg.nu,
        lambda1=cfg.lambda1, lambda2=cfg.lambda2, epsilon=cfg.epsilon,
        levels=cfg.levels, max_iters=cfg.max_iters, passes=cfg.passes,
        presmooth_sigma=cfg.presmooth_sigma, f_smooth_sigma=cfg.f_smooth_sigma,
    )
    prefix = cfg.output
    files = []
    contours_by_level = []
    if cfg.solver == "ama":
        result = segment_multilevel(grid, cfg.levels, pipe)
        converged = result.converged
        first = result.levels[0][0].run
        iterations = first.history.iterations
        energy = first.history.records[-1].energy if first.history.records else float("nan")
        mask = result.labels == result.labels[0, 0]
        mask = ~mask  # foreground: anything unlike the top-left region
        for lvl_idx, branches in enumerate(result.levels, start=1):
            lvl_contours = []
            for b in branches:
                lvl_contours.extend(b.contours if b.refined else [])
            contours_by_level.append(lvl_contours)
            main = branches[0].run
            if main is None:
                continue
            tag = f"_L{lvl_idx}" if cfg.levels > 1 else ""
            write_pgm(main.seg, f"{prefix}{tag}_seg.pgm")
            write_pgm(_rescaled(main.phi_raster), f"{prefix}{tag}_phi.pgm")
            write_pgm(_overlay(grid, lvl_contours or main.contours),
                      f"{prefix}{tag}_overlay.pgm")
            export_svg(main.represent.mesh, f"{prefix}{tag}_mesh.svg")
            files += [f"{prefix}{tag}_seg.pgm", f"{prefix}{tag}_phi.pgm",
                      f"{prefix}{tag}_overlay.pgm", f"{prefix}{tag}_mesh.svg"]
            if cfg.log:
                main.history.write_csv(f"{prefix}{tag}_history.csv")
                files.append(f"{prefix}{tag}_history.csv")
        _write_contours_csv(f"{prefix}_contours.csv", contours_by_level)
        files.append(f"{prefix}_contours.csv")
    else:
        from .fem import SolverParams

        phi, history = fds_run(
            grid, pipe.fds_model(),
            SolverParams(dt=cfg.dt, max_iters=cfg.max_iters,
                         sign_change_tol=pipe.sign_change_tol,
                         linear_tol=pipe.linear_tol),
            log_path=f"{prefix}_history.csv" if cfg.log else None,
        )
        converged = history.converged
        iterations = history.iterations
        energy = history.records[-1].energy if history.records else float("nan")
        c1 = history.records[-1].c1
        c2 = history.records[-1].c2
        mask = phi >= 0
        seg = PixelGrid(np.clip(np.where(mask, c1, c2), 0, 1))
        write_pgm(seg, f"{prefix}_seg.pgm")
        write_pgm(_rescaled(phi), f"{prefix}_phi.pgm")
        files += [f"{prefix}_seg.pgm", f"{prefix}_phi.pgm"]
        if cfg.log:
            files.append(f"{prefix}_history.csv")

    summary = (
        f"solver={cfg.solver} iterations={iterations} converged={converged} "
        f"energy={energy:.6g}"
    )
    if cfg.reference:
        ref = load_image(cfg.reference).values > 0.5
        summary += f" dice={best_polarity_dice(mask, ref):.4f}"
    manifest = [
        f"amaseg {__version__}",
        f"elapsed_seconds {time.perf_counter() - t0:.3f}",
        f"summary {summary}",
        "config:",
    ] + [f"  {k} {v}" for k, v in sorted(vars(cfg).items())] + [
        "outputs:",
    ] + [f"  {f}" for f in files]
    _atomic_write(f"{prefix}_manifest.txt", ("\n".join(manifest) + "\n").encode())
    print(summary)
    return 0 if converged else 3


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        cfg = parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        print("run 'amaseg --help' for usage", file=sys.stderr)
        return 1
    try:
        return run(cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (RasterError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
