"""Loss/error scans over weight space: 1D segments and 2D planes.

A 1D scan evaluates beta*w1 + (1-beta)*w2 (beta=1 is w1). A 2D scan spans
the plane through three anchor models with an orthonormal basis: u_hat along
w2-w1 and v_hat along the component of w3-w1 orthogonal to it. Plane points
are w1 + a*u_hat + b*v_hat, so anchor coordinates are plain Euclidean
lengths. Grids report both the loss and the top-1 classification error
(ties broken toward the lowest class index by argmax).
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datasets import Dataset
from .nn import ModelSpec, ParamVector, evaluate

ORTHO_TOL = 1e-8


@dataclass
class PlaneBasis:
    origin: ParamVector
    u_hat: np.ndarray
    v_hat: np.ndarray
    coords_w2: tuple[float, float]
    coords_w3: tuple[float, float]


@dataclass
class LandscapeGrid:
    kind: str                       # "line" or "plane"
    a_values: np.ndarray            # betas for a line, first axis for a plane
    b_values: np.ndarray | None
    loss: np.ndarray
    error: np.ndarray
    anchors: dict[str, tuple[float, float]] = field(default_factory=dict)
    anchor_cells: dict[str, tuple[int, int]] = field(default_factory=dict)


def interpolate_1d(w1: ParamVector, w2: ParamVector, betas: list[float],
                   dataset: Dataset, spec: ModelSpec) -> LandscapeGrid:
    """Loss and error of beta*w1 + (1-beta)*w2 for each beta."""
    if w1.spec_fingerprint != w2.spec_fingerprint:
        raise ValueError("fingerprint mismatch between endpoints")
    if len(betas) == 0:
        raise ValueError("betas must be non-empty")
    losses = np.empty(len(betas))
    errors = np.empty(len(betas))
    for i, beta in enumerate(betas):
        mixed = ParamVector(beta * w1.values + (1.0 - beta) * w2.values,
                            w1.spec_fingerprint)
        loss, acc = evaluate(mixed, spec, dataset.features, dataset.labels)
        losses[i] = loss
        errors[i] = 1.0 - acc
    return LandscapeGrid(kind="line", a_values=np.asarray(betas, dtype=float),
                         b_values=None, loss=losses, error=errors,
                         anchors={"w1": (1.0, 0.0), "w2": (0.0, 0.0)})


def build_plane(w1: ParamVector, w2: ParamVector, w3: ParamVector) -> PlaneBasis:
    """Orthonormal basis for the plane through three anchor models."""
    if not (w1.spec_fingerprint == w2.spec_fingerprint == w3.spec_fingerprint):
        raise ValueError("fingerprint mismatch across anchors")
    u = w2.values - w1.values
    u_norm = float(np.linalg.norm(u))
    if u_norm < ORTHO_TOL:
        raise ValueError("degenerate anchors: w2 coincides with w1")
    u_hat = u / u_norm
    d3 = w3.values - w1.values
    proj = float(d3 @ u_hat)
    v = d3 - proj * u_hat
    v_norm = float(np.linalg.norm(v))
    if v_norm < ORTHO_TOL * max(float(np.linalg.norm(d3)), 1.0):
        raise ValueError("degenerate anchors: w3 lies on the w1-w2 line")
    return PlaneBasis(origin=w1.copy(), u_hat=u_hat, v_hat=v / v_norm,
                      coords_w2=(u_norm, 0.0), coords_w3=(proj, v_norm))


def reconstruct_at(basis: PlaneBasis, a: float, b: float) -> ParamVector:
    """Model at plane coordinates (a, b): origin + a*u_hat + b*v_hat."""
    return ParamVector(basis.origin.values + a * basis.u_hat + b * basis.v_hat,
                       basis.origin.spec_fingerprint)


def default_ranges(basis: PlaneBasis, margin: float = 0.2
                   ) -> tuple[tuple[float, float], tuple[float, float]]:
    """Anchor bounding box padded by ``margin`` times its span per side."""
    a_coords = [0.0, basis.coords_w2[0], basis.coords_w3[0]]
    b_coords = [0.0, basis.coords_w2[1], basis.coords_w3[1]]

    def pad(lo, hi):
        span = max(hi - lo, 1e-12)
        return lo - margin * span, hi + margin * span

    return pad(min(a_coords), max(a_coords)), pad(min(b_coords), max(b_coords))


def eval_plane(basis: PlaneBasis, a_range: tuple[float, float],
               b_range: tuple[float, float], res_a: int, res_b: int,
               dataset: Dataset, spec: ModelSpec) -> LandscapeGrid:
    """Loss/error lattice over the plane; anchors are flagged with their
    nearest lattice cell."""
    if res_a < 2 or res_b < 2:
        raise ValueError("resolution must be >= 2 per axis")
    if dataset.n == 0:
        raise ValueError("dataset is empty")
    anchors = {"w1": (0.0, 0.0), "w2": basis.coords_w2, "w3": basis.coords_w3}
    for name, (a, b) in anchors.items():
        if not (a_range[0] <= a <= a_range[1] and b_range[0] <= b <= b_range[1]):
            warnings.warn(f"anchor {name} at ({a:.4g}, {b:.4g}) outside grid ranges")
    a_values = np.linspace(a_range[0], a_range[1], res_a)
    b_values = np.linspace(b_range[0], b_range[1], res_b)
    loss = np.empty((res_a, res_b))
    error = np.empty((res_a, res_b))
    for i, a in enumerate(a_values):
        for j, b in enumerate(b_values):
            model = reconstruct_at(basis, a, b)
            l, acc = evaluate(model, spec, dataset.features, dataset.labels)
            loss[i, j] = l
            error[i, j] = 1.0 - acc
    cells = {name: (int(np.argmin(np.abs(a_values - a))),
                    int(np.argmin(np.abs(b_values - b))))
             for name, (a, b) in anchors.items()}
    return LandscapeGrid(kind="plane", a_values=a_values, b_values=b_values,
                         loss=loss, error=error, anchors=anchors,
                         anchor_cells=cells)


def export_grid_csv(grid: LandscapeGrid, path: str | Path) -> None:
    """Header row with kind/ranges/anchors, then (a, b, loss, error) rows;
    1D grids write (beta, loss, error)."""
    with open(path, "w", newline="") as fh:
        anchor_desc = ";".join(f"{k}:({float(a)!r},{float(b)!r})"
                               for k, (a, b) in sorted(grid.anchors.items()))
        writer = csv.writer(fh)
        if grid.kind == "line":
            fh.write(f"# kind=line betas=[{float(grid.a_values[0])!r},"
                     f"{float(grid.a_values[-1])!r}] anchors={anchor_desc}\n")
            writer.writerow(["beta", "loss", "error"])
            for beta, l, e in zip(grid.a_values, grid.loss, grid.error):
                writer.writerow([repr(float(beta)), repr(float(l)), repr(float(e))])
        else:
            fh.write(f"# kind=plane a=[{float(grid.a_values[0])!r},"
                     f"{float(grid.a_values[-1])!r}] b=[{float(grid.b_values[0])!r},"
                     f"{float(grid.b_values[-1])!r}] anchors={anchor_desc}\n")
            writer.writerow(["a", "b", "loss", "error"])
            for i, a in enumerate(grid.a_values):
                for j, b in enumerate(grid.b_values):
                    writer.writerow([repr(float(a)), repr(float(b)),
                                     repr(float(grid.loss[i, j])),
                                     repr(float(grid.error[i, j]))])
