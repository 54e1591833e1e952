import numpy as np
import pytest

from cnslab import grids
from cnslab.grids import (StripGrid, LayerGrid, DecayViolation, ddx, ddy,
                          divergence, gradient, laplacian, extract_trace,
                          layer_to_strip, fd_weights, integrate, norm_l2,
                          norm_sup)


def make_grid(nx=64, ny=96, stretch=20.0, ly=4.0):
    return StripGrid(nx, ny, height_y=ly, stretch_ratio=stretch)


class TestFdWeights:
    def test_central_second_derivative_uniform(self):
        w = fd_weights([-1.0, 0.0, 1.0], 0.0, 2)
        assert np.allclose(w, [1.0, -2.0, 1.0])

    def test_polynomial_exactness(self):
        xs = np.array([0.0, 0.13, 0.4, 0.71])
        w = fd_weights(xs, 0.2, 1)
        for p in range(4):
            val = w @ xs**p
            exact = p * 0.2 ** (p - 1) if p > 0 else 0.0
            assert abs(val - exact) < 1e-12


class TestStripGrid:
    def test_node_range_and_monotonicity(self):
        g = make_grid()
        assert g.y[0] == 0.0 and g.y[-1] == g.ly
        assert np.all(np.diff(g.y) > 0)
        assert len(g.x) == g.nx and g.x[0] == 0.0
        # no duplicated periodic seam
        assert g.x[-1] < g.lx

    def test_spacing_ratio_bounded_by_stretch(self):
        for r in (5.0, 20.0, 40.0):
            g = make_grid(stretch=r)
            assert g.spacing_ratio() <= r * (1 + 1e-9)

    def test_layer_resolution_at_sweep_grid(self):
        # the sweep grid must put >= 12 nodes inside the thinnest layer
        g = StripGrid(256, 512, height_y=4.0, stretch_ratio=40.0)
        assert g.points_in_layer(2.0 ** -14) >= 12

    def test_rejects_non_power_of_two_nx(self):
        with pytest.raises(ValueError):
            StripGrid(100, 64)

    def test_volumes_sum_to_height(self):
        g = make_grid()
        assert abs(g.dvol.sum() - g.ly) < 1e-13


class TestDdx:
    def test_trig_derivative_spectral(self):
        g = make_grid()
        X, Y = g.mesh()
        f = np.sin(3 * X) * (1 + Y)
        df = ddx(g, f)
        assert np.abs(df - 3 * np.cos(3 * X) * (1 + Y)).max() < 1e-11

    def test_constant_maps_to_zero(self):
        g = make_grid()
        assert np.abs(ddx(g, np.ones((g.nx, g.ny)))).max() == 0.0

    def test_mean_of_derivative_vanishes(self):
        # discrete integral of a spectral x-derivative is exactly zero
        g = make_grid()
        rng = np.random.default_rng(7)
        f = rng.normal(size=(g.nx, g.ny))
        assert abs(ddx(g, f).sum(axis=0)).max() < 1e-12


class TestDdy:
    def test_quadratic_exact(self):
        g = make_grid()
        f = np.broadcast_to(g.y**2, (g.nx, g.ny)).copy()
        assert np.abs(ddy(g, f, 1) - 2 * g.y).max() < 1e-9
        assert np.abs(ddy(g, f, 2) - 2.0).max() < 1e-8

    def test_cubic_exact_for_second_derivative(self):
        # 4-point stencils differentiate cubics exactly
        g = make_grid()
        f = np.broadcast_to(g.y**3, (g.nx, g.ny)).copy()
        assert np.abs(ddy(g, f, 2) - 6 * g.y).max() < 1e-7

    @pytest.mark.parametrize("order", [1, 2])
    def test_refinement_slope_exp(self, order):
        # second-order convergence on exp(-y) under y-refinement
        errs = []
        for ny in (65, 129, 257):
            g = make_grid(nx=8, ny=ny)
            f = np.broadcast_to(np.exp(-g.y), (g.nx, g.ny)).copy()
            ref = (-1.0) ** order * np.exp(-g.y)
            errs.append(np.abs(ddy(g, f, order) - ref).max())
        slopes = np.log2(np.array(errs[:-1]) / errs[1:])
        assert slopes.min() >= 1.9, slopes

    def test_bad_order_raises(self):
        g = make_grid()
        with pytest.raises(ValueError):
            ddy(g, g.zeros(), order=3)


class TestCalculusIdentities:
    def test_div_grad_matches_laplacian_under_refinement(self):
        errs = []
        for ny in (65, 129, 257):
            g = make_grid(nx=32, ny=ny)
            X, Y = g.mesh()
            p = np.cos(2 * X) * np.exp(-Y)
            gap = divergence(g, *gradient(g, p)) - laplacian(g, p)
            errs.append(np.abs(gap).max())
        slopes = np.log2(np.array(errs[:-1]) / errs[1:])
        assert slopes.min() >= 1.9, slopes

    def test_streamfunction_field_is_divergence_free_to_truncation(self):
        g = make_grid(nx=128, ny=257, stretch=10.0)
        X, Y = g.mesh()
        psi = np.sin(2 * X) * np.sin(np.pi * Y / g.ly) ** 2
        u1 = ddy(g, psi, 1)
        u2 = -ddx(g, psi)
        # ddy truncation dominates; second-order level on this grid
        assert norm_sup(divergence(g, u1, u2)) < 2e-3


class TestTraces:
    def test_value_trace_is_bitwise_row_copy(self):
        g = make_grid()
        rng = np.random.default_rng(3)
        f = rng.normal(size=(g.nx, g.ny))
        tr = extract_trace(g, f, "value")
        assert np.array_equal(tr, f[:, 0])

    def test_derivative_traces_match_analytic(self):
        g = make_grid(ny=257)
        X, Y = g.mesh()
        f = np.cos(X) * np.exp(-2 * Y)
        assert np.abs(extract_trace(g, f, "dy") + 2 * np.cos(g.x)).max() < 2e-5
        assert np.abs(extract_trace(g, f, "dyy") - 4 * np.cos(g.x)).max() < 2e-3


class TestLayerToStrip:
    def test_exp_profile_maps_within_1e6(self):
        # oracle: analytic e^{-y/sqrt(eps)}; spline on 512 z-nodes, Lz=14
        lg = LayerGrid(512, extent_z=14.0)
        g = make_grid(nx=8, ny=256)
        eps = 0.01
        vals = np.broadcast_to(np.exp(-lg.z), (g.nx, lg.nz)).copy()
        out = layer_to_strip(lg, vals, g, eps)
        exact = np.exp(-g.y / np.sqrt(eps))
        assert np.abs(out - exact).max() <= 1e-6

    def test_decay_violation_warns(self):
        lg = LayerGrid(64, extent_z=4.0)  # e^{-4} far too large
        g = make_grid(nx=8, ny=64)
        vals = np.broadcast_to(np.exp(-lg.z), (8, lg.nz)).copy()
        with pytest.warns(DecayViolation):
            layer_to_strip(lg, vals, g, 0.01)

    def test_zero_beyond_lz(self):
        lg = LayerGrid(64, extent_z=4.0)
        g = make_grid(nx=8, ny=64)
        eps = 1e-4  # y/sqrt(eps) exceeds Lz except very near the wall
        vals = np.ones((g.nx, lg.nz)) * np.exp(-lg.z)
        out = layer_to_strip(lg, vals, g, eps, decay_tol=1.0)
        far = g.y / np.sqrt(eps) > lg.lz
        assert np.all(out[:, far] == 0.0)

    def test_eps_zero_rejected(self):
        lg = LayerGrid(64)
        g = make_grid(nx=8, ny=64)
        with pytest.raises(ValueError):
            layer_to_strip(lg, np.zeros((8, 64)), g, 0.0)

    def test_linearity(self):
        lg = LayerGrid(128, extent_z=20.0)
        g = make_grid(nx=8, ny=64)
        rng = np.random.default_rng(5)
        a = np.exp(-lg.z) * rng.normal(size=(8, 128))
        b = np.exp(-lg.z) * rng.normal(size=(8, 128))
        fa = layer_to_strip(lg, a, g, 0.01, decay_tol=1.0)
        fb = layer_to_strip(lg, b, g, 0.01, decay_tol=1.0)
        fab = layer_to_strip(lg, a + 2.0 * b, g, 0.01, decay_tol=1.0)
        assert np.abs(fab - (fa + 2.0 * fb)).max() < 1e-12


class TestNormsAndIntegrals:
    def test_integral_of_one(self):
        g = make_grid()
        assert abs(integrate(g, np.ones((g.nx, g.ny))) - g.lx * g.ly) < 1e-12

    def test_l2_of_sin(self):
        g = make_grid(nx=128, ny=513)
        X, Y = g.mesh()
        f = np.sin(X)
        exact = np.sqrt(0.5 * g.lx * g.ly)
        assert abs(norm_l2(g, f) - exact) < 1e-5

    def test_sup_norm(self):
        g = make_grid()
        f = g.zeros()
        f[3, 5] = -7.0
        assert norm_sup(f) == 7.0


class TestSnapshotRoundTrip:
    def test_bitwise_round_trip(self, tmp_path):
        from cnslab import snapio
        rng = np.random.default_rng(11)
        vals = rng.normal(size=(16, 24))
        path = tmp_path / "f.snap"
        snapio.write_snapshot(path, vals, 2 * np.pi, 4.0, 0.125, "m")
        back, meta = snapio.read_snapshot(path)
        assert np.array_equal(back, vals)
        assert meta["nx"] == 16 and meta["ny"] == 24
        assert meta["time"] == 0.125 and meta["name"] == "m"

    def test_bad_magic_rejected(self, tmp_path):
        from cnslab import snapio
        path = tmp_path / "bad.snap"
        path.write_bytes(b"XXXX" + b"\x00" * 64)
        with pytest.raises(ValueError):
            snapio.read_snapshot(path)


class TestTraceSet:
    def _mk(self):
        from cnslab.traces import TraceSet
        times = np.array([0.0, 0.1, 0.3])
        x = np.linspace(0, 1, 4, endpoint=False)
        data = {"m": np.arange(12.0).reshape(3, 4),
                "dy_c": np.linspace(-1, 1, 12).reshape(3, 4)}
        return TraceSet(times, x, data)

    def test_linear_interp_exact_at_nodes_and_midpoints(self):
        ts = self._mk()
        assert np.array_equal(ts.interp("m", 0.1), ts.data["m"][1])
        mid = ts.interp("m", 0.2)
        assert np.allclose(mid, 0.5 * (ts.data["m"][1] + ts.data["m"][2]))

    def test_clamped_outside_range(self):
        ts = self._mk()
        assert np.array_equal(ts.interp("m", -1.0), ts.data["m"][0])
        assert np.array_equal(ts.interp("m", 9.0), ts.data["m"][-1])

    def test_csv_round_trip(self, tmp_path):
        ts = self._mk()
        path = tmp_path / "traces.csv"
        ts.to_csv(path)
        from cnslab.traces import TraceSet
        back = TraceSet.from_csv(path, x=ts.x)
        assert np.array_equal(back.times, ts.times)
        for tag in ts.data:
            assert np.array_equal(back.data[tag], ts.data[tag])

    def test_nonmonotone_times_rejected(self):
        from cnslab.traces import TraceSet
        with pytest.raises(ValueError):
            TraceSet([0.0, 0.0], [0.0], {"m": np.zeros((2, 1))})
