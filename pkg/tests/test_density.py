import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from ridgeflow.density import (Box, GaussianKDE, PointCloud, build_example1, build_kde,
                               default_bandwidth, kde_derivative_check)
from ridgeflow.errors import DomainExit

INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def single_bump():
    return build_kde(PointCloud(np.zeros((1, 1))), 1.0)


class TestPointCloud:
    def test_rejects_bad_input(self):
        with pytest.raises(ValueError):
            PointCloud(np.empty((0, 2)))
        with pytest.raises(ValueError):
            PointCloud(np.array([[0.0, np.nan]]))

    def test_points_are_read_only(self):
        cloud = PointCloud(np.ones((3, 2)))
        with pytest.raises(ValueError):
            cloud.points[0, 0] = 2.0

    def test_csv_roundtrip_with_header(self, tmp_path, rng):
        pts = rng.standard_normal((7, 3))
        PointCloud(pts).to_csv(tmp_path / "c.csv")
        back = PointCloud.from_csv(tmp_path / "c.csv")
        np.testing.assert_array_equal(back.points, pts)

    def test_csv_headerless(self, tmp_path):
        (tmp_path / "c.csv").write_text("1,2\n3.5,4\n", encoding="utf-8")
        np.testing.assert_array_equal(PointCloud.from_csv(tmp_path / "c.csv").points, [[1, 2], [3.5, 4]])

    def test_csv_error_names_line(self, tmp_path):
        (tmp_path / "c.csv").write_text("x,y\n1,2\n3,oops\n", encoding="utf-8")
        with pytest.raises(ValueError, match=r"c\.csv:3"):
            PointCloud.from_csv(tmp_path / "c.csv")


class TestBuildKDE:
    def test_single_bump_value(self):
        assert single_bump().density([[0.0]])[0] == pytest.approx(INV_SQRT_2PI, abs=1e-15)

    def test_single_bump_gradient_zero(self):
        assert single_bump().evaluate([0.0], 1).gradient[0] == 0.0

    def test_single_bump_curvature(self):
        assert single_bump().evaluate([0.0], 2).hessian[0, 0] == pytest.approx(-INV_SQRT_2PI, abs=1e-15)

    def test_rejects_nonpositive_bandwidth(self):
        cloud = PointCloud(np.zeros((2, 2)))
        for h in (0.0, -1.0, np.inf):
            with pytest.raises(ValueError):
                GaussianKDE(cloud, h)

    def test_matches_direct_sums(self, derived):
        ref = derived["kde_small"]
        model = build_kde(PointCloud(np.array(ref["points"])), ref["h"])
        for q in ref["queries"]:
            f, g, H, T = model.derivatives(np.array([q["x"]]), 3)
            np.testing.assert_allclose(f[0], q["f"], rtol=1e-12)
            np.testing.assert_allclose(g[0], q["grad"], rtol=1e-10, atol=1e-14)
            np.testing.assert_allclose(H[0], q["hess"], rtol=1e-10, atol=1e-14)
            np.testing.assert_allclose(T[0], q["third"], rtol=1e-10, atol=1e-14)

    def test_domain_is_padded_bounding_box(self, rng):
        pts = rng.uniform(-1, 2, (20, 2))
        model = build_kde(PointCloud(pts), 0.25)
        np.testing.assert_allclose(model.domain.lo, pts.min(axis=0) - 0.75)
        np.testing.assert_allclose(model.domain.hi, pts.max(axis=0) + 0.75)

    def test_default_bandwidth_rule(self, rng):
        pts = rng.standard_normal((50, 2)) * [1.0, 3.0]
        cloud = PointCloud(pts)
        expected = pts.std(axis=0, ddof=1).mean() * 50 ** (-1.0 / 8.0)
        assert default_bandwidth(cloud) == pytest.approx(expected)
        assert build_kde(cloud).h == pytest.approx(expected)

    def test_lower_orders_bitwise_stable(self, rng):
        model = build_kde(PointCloud(rng.standard_normal((30, 2))), 0.4)
        X = rng.standard_normal((5, 2))
        for r in range(1, 5):
            hi, lo = model.derivatives(X, r), model.derivatives(X, r - 1)
            for a, b in zip(hi, lo):
                np.testing.assert_array_equal(a, b)

    def test_bundle_flags_missing_orders(self):
        b = single_bump().evaluate([0.3], 2)
        assert b.order == 2 and b.third is None and b.fourth is None
        with pytest.raises(ValueError):
            b.tensor(3)

    def test_tensors_symmetric(self, rng):
        model = build_kde(PointCloud(rng.standard_normal((30, 3))), 0.5)
        b = model.evaluate(rng.standard_normal(3) * 0.3, 4)
        T, Q = b.third, b.fourth
        scale3, scale4 = np.abs(T).max(), np.abs(Q).max()
        for perm in [(1, 0, 2), (0, 2, 1), (2, 1, 0)]:
            assert np.abs(T - T.transpose(perm)).max() <= 1e-12 * scale3
        for perm in [(1, 0, 2, 3), (0, 2, 1, 3), (0, 1, 3, 2), (3, 2, 1, 0)]:
            assert np.abs(Q - Q.transpose(perm)).max() <= 1e-12 * scale4
        np.testing.assert_array_equal(b.hessian, b.hessian.T)

    def test_integrates_to_one_in_1d(self, rng):
        model = build_kde(PointCloud(rng.standard_normal((8, 1))), 0.4)
        mass, _ = integrate.quad(lambda t: model.density([[t]])[0], -np.inf, np.inf, epsabs=1e-12)
        assert mass == pytest.approx(1.0, abs=1e-6)

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.floats(0, 1), min_size=2, max_size=2), st.floats(0.05, 2.0))
    def test_strictly_positive_on_domain(self, t, h):
        model = build_kde(PointCloud(np.array([[0.0, 0.0], [1.0, -1.0], [0.5, 0.2]])), h)
        lo, hi = model.domain.lo, model.domain.hi
        x = lo + np.asarray(t) * (hi - lo)
        assert model.density(x[None])[0] > 0


class TestDerivativeCheck:
    @pytest.mark.parametrize("order,tol", [(1, 1e-6), (2, 1e-5)])
    def test_small_cloud(self, rng, order, tol):
        model = build_kde(PointCloud(rng.standard_normal((5, 2))), 0.5)
        X = rng.uniform(-1, 1, (10, 2))
        assert max(kde_derivative_check(model, x, order) for x in X) < tol

    @pytest.mark.parametrize("order", [3, 4])
    def test_higher_orders(self, rng, order):
        model = build_kde(PointCloud(rng.standard_normal((40, 2))), 0.4)
        X = rng.uniform(-1, 1, (10, 2))
        assert max(kde_derivative_check(model, x, order) for x in X) < 1e-5

    def test_single_sample_gradient_exact(self):
        model = build_kde(PointCloud(np.array([[0.3, -0.2]])), 0.7)
        assert kde_derivative_check(model, [0.3, -0.2], 1) == 0.0

    def test_outside_domain(self):
        with pytest.raises(DomainExit):
            kde_derivative_check(single_bump(), [100.0], 1)

    def test_bad_order(self):
        with pytest.raises(ValueError):
            kde_derivative_check(single_bump(), [0.0], 0)


class TestExample1:
    def test_intersection_density(self, derived):
        m = build_example1()
        assert m.density([m.intersection])[0] == pytest.approx(derived["example1_intersection_density"], rel=1e-15)
        assert m.density([m.intersection])[0] == pytest.approx(0.265165, abs=1e-6)

    def test_gradient_u_zero_on_axis(self):
        m = build_example1()
        v = np.linspace(0, 2, 9)
        g = m.derivatives(np.column_stack([np.zeros_like(v), v]), 1)[1]
        assert np.all(g[:, 0] == 0.0)

    def test_total_mass(self):
        m = build_example1()
        mass, _ = integrate.dblquad(lambda v, u: m.density([[u, v]])[0], -1, 1, 0, 2)
        assert mass == pytest.approx(1.0, abs=1e-12)

    def test_closed_forms(self, rng):
        m = build_example1()
        X = np.column_stack([rng.uniform(-1, 1, 20), rng.uniform(0, 2, 20)])
        f, g, H, T, Q = m.derivatives(X, 4)
        u, v = X[:, 0], X[:, 1]
        np.testing.assert_allclose(f, 3 / 8 * (1 - u ** 2) * v, rtol=1e-12)
        np.testing.assert_allclose(g[:, 0], -3 / 4 * u * v, rtol=1e-12)
        np.testing.assert_allclose(g[:, 1], 3 / 8 * (1 - u ** 2), rtol=1e-12)
        np.testing.assert_allclose(H[:, 0, 0], -3 / 4 * v, rtol=1e-12)
        np.testing.assert_allclose(H[:, 0, 1], -3 / 4 * u, rtol=1e-12)
        np.testing.assert_allclose(H[:, 1, 0], -3 / 4 * u, rtol=1e-12)
        assert np.all(H[:, 1, 1] == 0)
        assert np.all(T[:, 0, 0, 1] == -0.75) and np.all(T[:, 1, 0, 0] == -0.75)
        assert np.all(T[:, 0, 0, 0] == 0) and np.all(T[:, 1, 1, 0] == 0)
        assert np.all(Q == 0)

    def test_ridge_curves_cross_at_intersection(self):
        m = build_example1()
        assert m.arc(0.0) == pytest.approx(1 / math.sqrt(2))
        pts = m.ridge_curves(step=1e-3)
        assert np.all(np.isfinite(pts))
        assert np.min(np.linalg.norm(pts - m.intersection, axis=1)) < 2e-3

    def test_box_contains(self):
        box = Box([0, 0], [1, 2])
        np.testing.assert_array_equal(box.contains([[0.5, 1], [1.5, 1], [0, 2]]), [True, False, True])
