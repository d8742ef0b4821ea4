#!/usr/bin/env python3
"""Scan the loss surface around federated models.

Runs a short heterogeneous federation, then:
  * interpolates from each final-round client model to the global model
    (the basin-wall picture),
  * interpolates between the plain aggregate and the moving-average model,
  * spans a 2D plane through three round checkpoints and prints a coarse
    loss contour as text.
Grids land in ./landscape_out as CSV for external plotting.
"""

from pathlib import Path

import numpy as np

from fedbasin import (
    FederationConfig,
    ImaConfig,
    LrSchedule,
    ModelSpec,
    build_plane,
    default_ranges,
    eval_plane,
    gen_synthetic_classification,
    interpolate_1d,
    mild_exponential,
    partition_dirichlet,
    run_federation,
)
from fedbasin.landscape import export_grid_csv

OUT = Path("landscape_out")
OUT.mkdir(exist_ok=True)

SPEC = ModelSpec.mlp([8, 16, 4], "relu", "mse")
train = gen_synthetic_classification(1000, 4, 150, 8, 2.5)
test = gen_synthetic_classification(3000, 4, 100, 8, 2.5)
part = partition_dirichlet(train, 20, alpha=0.1, seed=2000)

base = LrSchedule.exponential(0.05, 0.01)
ima = ImaConfig(start_round=90, window=5,
                mild_schedule=mild_exponential(base, 90, 0.03))
cfg = FederationConfig(n_clients=20, participation=0.25, rounds=120,
                       local_epochs=3, batch_size=20, lr_schedule=base,
                       momentum=0.9, ima=ima, seed=0)

store = {}
snapshots = {}


def hook(record, ctx):
    store["ctx"] = ctx
    if ctx.round in (40, 80, 120):
        snapshots[ctx.round] = ctx.global_model.copy()


result = run_federation(SPEC, cfg, train, part, eval_dataset=test, on_round=hook)
ctx = store["ctx"]
betas = list(np.linspace(0.0, 1.0, 11))

print("--- client -> final global model, test loss along the segment ---")
target = result.state.ima_model
for upd in ctx.updates:
    grid = interpolate_1d(upd.final_params, target, betas, test, SPEC)
    curve = " ".join(f"{v:.3f}" for v in grid.loss[::-1])
    print(f"client {upd.client_id:2d} (n={upd.n_samples:3d}): {curve}")
print("(left end = client model, right end = global model)")

print("\n--- plain aggregate -> moving average ---")
grid = interpolate_1d(result.checkpoints["final_ima"],
                      result.checkpoints["final_fma"], betas, test, SPEC)
print("loss:", " ".join(f"{v:.4f}" for v in grid.loss))
print(f"minimum at beta={betas[int(np.argmin(grid.loss))]:.1f} "
      f"(beta=1 is the moving average)")
export_grid_csv(grid, OUT / "fma_to_ima.csv")

print("\n--- 2D plane through the round-40/80/120 aggregates ---")
basis = build_plane(snapshots[40], snapshots[80], snapshots[120])
a_range, b_range = default_ranges(basis)
plane = eval_plane(basis, a_range, b_range, 13, 13, test, SPEC)
export_grid_csv(plane, OUT / "plane_rounds.csv")
lo, hi = plane.loss.min(), plane.loss.max()
levels = " .:-=+*#%@"
print(f"loss range [{lo:.3f}, {hi:.3f}], darker = higher:")
for i in range(plane.loss.shape[0]):
    row = ""
    for j in range(plane.loss.shape[1]):
        level = int((plane.loss[i, j] - lo) / (hi - lo + 1e-12) * (len(levels) - 1))
        cell = levels[level]
        for name, (ci, cj) in plane.anchor_cells.items():
            if (i, j) == (ci, cj):
                cell = name[-1]  # mark anchors 1/2/3
        row += cell * 2
    print(row)
print("anchors: 1 = round 40, 2 = round 80, 3 = round 120")
print(f"\nCSV grids written to {OUT}/")
