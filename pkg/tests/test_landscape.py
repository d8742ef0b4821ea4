import numpy as np
import pytest

from fedbasin.datasets import gen_synthetic_classification
from fedbasin.landscape import (
    build_plane,
    default_ranges,
    eval_plane,
    export_grid_csv,
    interpolate_1d,
    reconstruct_at,
)
from fedbasin.nn import ModelSpec, ParamVector, evaluate, init_params


def anchor_triple(spec, seed, scale=0.5):
    rng = np.random.default_rng(seed)
    models = []
    for _ in range(3):
        p = init_params(spec, int(rng.integers(0, 2**31)))
        p.values += rng.normal(scale=scale, size=p.values.size)
        models.append(p)
    return models


@pytest.fixture
def task():
    ds = gen_synthetic_classification(0, 3, 20, 2, 3.0)
    spec = ModelSpec.mlp([2, 4, 3])
    return ds, spec


class TestInterpolate1d:
    def test_endpoints_exact(self, task):
        ds, spec = task
        w1, w2, _ = anchor_triple(spec, 1)
        grid = interpolate_1d(w1, w2, [0.0, 0.5, 1.0], ds, spec)
        loss_w1, acc_w1 = evaluate(w1, spec, ds.features, ds.labels)
        loss_w2, acc_w2 = evaluate(w2, spec, ds.features, ds.labels)
        assert grid.loss[2] == loss_w1 and grid.error[2] == 1.0 - acc_w1
        assert grid.loss[0] == loss_w2 and grid.error[0] == 1.0 - acc_w2

    def test_identical_endpoints_constant(self, task):
        ds, spec = task
        w1, _, _ = anchor_triple(spec, 2)
        grid = interpolate_1d(w1, w1.copy(), list(np.linspace(0, 1, 7)), ds, spec)
        assert np.ptp(grid.loss) == 0.0

    def test_linear_model_mse_convex(self):
        # MSE of a single affine layer is a convex quadratic in the weights,
        # so the interpolation curve must be convex in beta
        ds = gen_synthetic_classification(3, 2, 25, 2, 3.0)
        spec = ModelSpec.mlp([2, 2])
        w1, w2, _ = anchor_triple(spec, 4, scale=1.0)
        betas = list(np.linspace(-0.5, 1.5, 21))
        grid = interpolate_1d(w1, w2, betas, ds, spec)
        second = np.diff(grid.loss, 2)
        assert np.all(second >= -1e-9)

    def test_error_bounds(self, task):
        ds, spec = task
        w1, w2, _ = anchor_triple(spec, 5)
        grid = interpolate_1d(w1, w2, list(np.linspace(0, 1, 9)), ds, spec)
        assert np.all(grid.error >= 0.0) and np.all(grid.error <= 1.0)
        assert np.all(np.isfinite(grid.loss))

    def test_fingerprint_mismatch(self, task):
        ds, spec = task
        w1 = init_params(spec, 0)
        other = init_params(ModelSpec.mlp([2, 5, 3]), 0)
        with pytest.raises(ValueError):
            interpolate_1d(w1, other, [0.5], ds, spec)

    def test_empty_betas(self, task):
        ds, spec = task
        w1, w2, _ = anchor_triple(spec, 6)
        with pytest.raises(ValueError):
            interpolate_1d(w1, w2, [], ds, spec)


class TestBuildPlane:
    @pytest.mark.parametrize("seed", range(20))
    def test_orthonormal_and_reconstructs(self, seed):
        spec = ModelSpec.mlp([3, 4, 2])
        w1, w2, w3 = anchor_triple(spec, seed)
        basis = build_plane(w1, w2, w3)
        assert abs(np.linalg.norm(basis.u_hat) - 1.0) < 1e-9
        assert abs(np.linalg.norm(basis.v_hat) - 1.0) < 1e-9
        assert abs(basis.u_hat @ basis.v_hat) < 1e-9
        r2 = reconstruct_at(basis, *basis.coords_w2)
        r3 = reconstruct_at(basis, *basis.coords_w3)
        assert np.max(np.abs(r2.values - w2.values)) < 1e-9
        assert np.max(np.abs(r3.values - w3.values)) < 1e-9

    def test_orthogonal_anchor_coords(self):
        spec = ModelSpec.mlp([2, 2])
        w1 = init_params(spec, 0)
        u = np.zeros(spec.n_params)
        u[0] = 2.0
        v = np.zeros(spec.n_params)
        v[1] = 3.0
        w2 = ParamVector(w1.values + u, spec.fingerprint)
        w3 = ParamVector(w1.values + v, spec.fingerprint)
        basis = build_plane(w1, w2, w3)
        assert basis.coords_w3 == pytest.approx((0.0, 3.0), abs=1e-12)

    def test_coincident_anchors_rejected(self):
        spec = ModelSpec.mlp([2, 2])
        w1 = init_params(spec, 1)
        with pytest.raises(ValueError, match="coincides"):
            build_plane(w1, w1.copy(), w1.copy())

    def test_collinear_anchors_rejected(self):
        spec = ModelSpec.mlp([2, 2])
        w1, w2, _ = anchor_triple(spec, 7)
        w3 = ParamVector(w1.values + 0.5 * (w2.values - w1.values), spec.fingerprint)
        with pytest.raises(ValueError, match="line"):
            build_plane(w1, w2, w3)


class TestReconstructAt:
    def test_origin(self):
        spec = ModelSpec.mlp([2, 3, 2])
        w1, w2, w3 = anchor_triple(spec, 8)
        basis = build_plane(w1, w2, w3)
        assert np.array_equal(reconstruct_at(basis, 0.0, 0.0).values, w1.values)

    def test_linearity(self):
        spec = ModelSpec.mlp([2, 3, 2])
        basis = build_plane(*anchor_triple(spec, 9))
        a = 0.37
        diff = reconstruct_at(basis, 2 * a, 0.0).values - reconstruct_at(basis, a, 0.0).values
        assert np.max(np.abs(diff - a * basis.u_hat)) < 1e-12


class TestEvalPlane:
    def test_anchor_cell_matches_direct_eval(self, task):
        ds, spec = task
        w1, w2, w3 = anchor_triple(spec, 10)
        basis = build_plane(w1, w2, w3)
        # ranges aligned so that (0, 0) is exactly a lattice point
        a_hi = basis.coords_w2[0]
        b_hi = basis.coords_w3[1]
        grid = eval_plane(basis, (0.0, a_hi), (0.0, b_hi), 5, 5, ds, spec)
        direct, acc = evaluate(w1, spec, ds.features, ds.labels)
        assert grid.loss[0, 0] == pytest.approx(direct, abs=1e-12)
        assert grid.anchor_cells["w1"] == (0, 0)

    def test_shared_lattice_points_stable_across_resolution(self, task):
        ds, spec = task
        basis = build_plane(*anchor_triple(spec, 11))
        (a_lo, a_hi), (b_lo, b_hi) = default_ranges(basis)
        coarse = eval_plane(basis, (a_lo, a_hi), (b_lo, b_hi), 3, 3, ds, spec)
        fine = eval_plane(basis, (a_lo, a_hi), (b_lo, b_hi), 5, 5, ds, spec)
        assert fine.loss[::2, ::2] == pytest.approx(coarse.loss, abs=0)

    def test_linear_mse_plane_is_quadratic(self):
        # a single affine layer under MSE gives a quadratic loss surface:
        # second differences along each axis are constant
        ds = gen_synthetic_classification(5, 2, 30, 2, 3.0)
        spec = ModelSpec.mlp([2, 2])
        basis = build_plane(*anchor_triple(spec, 12, scale=1.0))
        grid = eval_plane(basis, (-1.0, 1.0), (-1.0, 1.0), 9, 9, ds, spec)
        d2a = np.diff(grid.loss, 2, axis=0)
        d2b = np.diff(grid.loss, 2, axis=1)
        assert np.ptp(d2a) < 1e-6
        assert np.ptp(d2b) < 1e-6

    def test_warns_when_anchor_outside(self, task):
        ds, spec = task
        basis = build_plane(*anchor_triple(spec, 13))
        with pytest.warns(UserWarning, match="outside"):
            eval_plane(basis, (0.0, 1e-3), (0.0, 1e-3), 2, 2, ds, spec)

    def test_bad_resolution(self, task):
        ds, spec = task
        basis = build_plane(*anchor_triple(spec, 14))
        with pytest.raises(ValueError):
            eval_plane(basis, (0, 1), (0, 1), 1, 5, ds, spec)


class TestExport:
    def test_line_csv(self, task, tmp_path):
        ds, spec = task
        w1, w2, _ = anchor_triple(spec, 15)
        grid = interpolate_1d(w1, w2, [0.0, 0.5, 1.0], ds, spec)
        path = tmp_path / "line.csv"
        export_grid_csv(grid, path)
        lines = path.read_text().strip().splitlines()
        assert lines[0].startswith("# kind=line")
        assert lines[1].split(",") == ["beta", "loss", "error"]
        assert len(lines) == 5

    def test_plane_csv(self, task, tmp_path):
        ds, spec = task
        basis = build_plane(*anchor_triple(spec, 16))
        (a_lo, a_hi), (b_lo, b_hi) = default_ranges(basis)
        grid = eval_plane(basis, (a_lo, a_hi), (b_lo, b_hi), 3, 4, ds, spec)
        path = tmp_path / "plane.csv"
        export_grid_csv(grid, path)
        lines = path.read_text().strip().splitlines()
        assert lines[0].startswith("# kind=plane")
        assert len(lines) == 2 + 3 * 4
