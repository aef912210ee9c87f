import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from riemtg import manifold as M
from riemtg import tensor as T
from riemtg.tensor import Tensor

KAPPAS = [-2.0, -1.0, -0.1, 0.1, 1.0, 2.0]
DIMS = [2, 8, 32]


def sample_points(rng, n, d, k, max_radius=2.0):
    """Points ``exp_O(u)`` with geodesic radius ``sqrt|k| |u|`` up to ``max_radius``."""
    u = rng.normal(size=(n, d))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    u *= rng.uniform(0.0, max_radius, size=(n, 1)) / math.sqrt(abs(k))
    return M.expmap0(Tensor(u), k)


def sample_tangent(rng, x, k, max_radius):
    w = rng.normal(size=x.shape)
    g = np.ones(x.shape[-1])
    g[0] = -1.0 if k < 0 else 1.0
    ip = (x.value * w * g).sum(axis=1, keepdims=True)
    v = w - k * ip * x.value
    vn = np.sqrt(np.abs((v * v * g).sum(axis=1, keepdims=True)))
    return Tensor(v / vn * rng.uniform(0.0, max_radius, size=(len(v), 1)) / math.sqrt(abs(k)))


def constraint_error(x, k):
    return np.abs(M.inner(x, x, k).value - 1.0 / k).max()


# -- inner products and trig -----------------------------------------------------------


def test_inner_examples():
    assert M.inner(Tensor([1.0, 0.0]), Tensor([1.0, 0.0]), -1.0).item() == -1.0
    assert M.inner(Tensor([1.0, 0.0]), Tensor([0.0, 1.0]), -1.0).item() == 0.0
    assert M.inner(Tensor([1.0, 2.0]), Tensor([3.0, 4.0]), 1.0).item() == 11.0
    with pytest.raises(T.ShapeError):
        M.inner(Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]), 1.0)


def test_ktrig_examples():
    assert abs(M.ktrig("cos", 1.0, -1.0) - 1.543081) < 1e-6
    assert M.ktrig("sin", math.pi / 2, 1.0) == 1.0
    assert abs(M.ktrig("arccos", math.cosh(2.0), -1.0) - 2.0) < 1e-10
    assert 0.0 < M.ktrig("arccos", 1.0 + 1e-12, 1.0) < 2e-6
    with pytest.raises(M.GeometryError):
        M.ktrig("cos", 1.0, 0.0)


# -- exp / log ----------------------------------------------------------------------------


def test_expmap_origin_examples():
    o = M.origin(1, -1.0)
    out = M.expmap(o, Tensor([0.0, 1.0]), -1.0)
    assert np.allclose(out.value, [math.cosh(1), math.sinh(1)], atol=1e-12, rtol=0)
    assert abs(out.value[0] - 1.543081) < 1e-6 and abs(out.value[1] - 1.175201) < 1e-6
    o3 = M.origin(3, 0.7)
    assert np.array_equal(M.expmap(o3, Tensor(np.zeros(4)), 0.7).value, o3.value)
    x, v = Tensor([1.0, 2.0]), Tensor([0.5, -1.0])
    assert np.array_equal(M.expmap(x, v, 0.0).value, [1.5, 1.0])


def test_expmap_rejects_non_tangent_vector():
    o = M.origin(2, -1.0)
    with pytest.raises(M.GeometryError):
        M.expmap(o, Tensor([0.3, 1.0, 0.0]), -1.0)


def test_log_of_same_point_is_zero():
    rng = np.random.default_rng(0)
    for k in KAPPAS:
        x = sample_points(rng, 5, 3, k)
        assert np.abs(M.logmap(x, x, k).value).max() < 1e-7


def test_antipodal_log_raises():
    o = M.origin(2, 1.0)
    with pytest.raises(M.GeometryError, match="logarithm undefined"):
        M.logmap(o, -o, 1.0)


@pytest.mark.parametrize("k", KAPPAS)
@pytest.mark.parametrize("d", DIMS)
def test_exp_log_round_trips(k, d):
    rng = np.random.default_rng(int(1000 * (k + 3)) + d)
    reach = 3.0 if k < 0 else 1.5
    x = sample_points(rng, 200, d, k)
    v = sample_tangent(rng, x, k, reach)
    y = M.expmap(x, v, k)
    assert constraint_error(y, k) < 1e-7
    assert np.abs(M.logmap(x, y, k).value - v.value).max() < 1e-9
    z = sample_points(rng, 200, d, k, max_radius=reach)
    back = M.expmap(x, M.logmap(x, z, k), k)
    near = M.distance(x, z, k).value[:, 0] * math.sqrt(abs(k)) < reach
    assert np.abs(back.value - z.value)[near].max() < 1e-9


@pytest.mark.parametrize("k", KAPPAS)
def test_origin_maps_round_trip(k):
    rng = np.random.default_rng(5)
    reach = 3.0 if k < 0 else 1.5
    u = rng.normal(size=(300, 8))
    u *= rng.uniform(0, reach, size=(300, 1)) / np.linalg.norm(u, axis=1, keepdims=True) / math.sqrt(abs(k))
    x = M.expmap0(Tensor(u), k)
    assert constraint_error(x, k) < 1e-7
    assert np.abs(M.logmap0(x, k).value - u).max() < 1e-9
    o = M.origin(8, k)
    full = M.expmap(o, Tensor(np.concatenate([np.zeros((300, 1)), u], axis=1)), k)
    assert np.abs(full.value - x.value).max() < 1e-12


def test_sphere_radius_is_clamped():
    o = M.origin(2, 1.0)
    y = M.expmap(o, Tensor([0.0, 5.0, 0.0]), 1.0)
    assert constraint_error(y, 1.0) < 1e-12
    assert math.pi - M.distance(o, y, 1.0).item() == pytest.approx(M.INJECTIVITY_MARGIN, rel=1e-6)


# -- distance ----------------------------------------------------------------------------


def test_distance_against_closed_forms():
    rng = np.random.default_rng(9)
    for k in KAPPAS:
        x = sample_points(rng, 100, 4, k)
        y = sample_points(rng, 100, 4, k)
        c = k * M.inner(x, y, k).value[:, 0]
        ref = (np.arccosh(np.maximum(c, 1)) if k < 0 else np.arccos(np.clip(c, -1, 1))) / math.sqrt(abs(k))
        far = ref * math.sqrt(abs(k)) > 0.1
        assert np.abs(M.distance(x, y, k).value[:, 0] - ref)[far].max() < 1e-9


def test_distance_from_origin_is_tangent_norm():
    rng = np.random.default_rng(2)
    for k in KAPPAS:
        reach = 3.0 if k < 0 else 1.5
        o = M.origin(5, k)
        assert M.distance(o, o, k).item() == 0.0
        v = sample_tangent(rng, Tensor(np.tile(o.value, (50, 1))), k, reach)
        d = M.distance(o, M.expmap(o, v, k), k).value
        assert np.abs(d - M.tangent_norm(v, k).value).max() < 1e-8


@pytest.mark.parametrize("k", KAPPAS)
@pytest.mark.parametrize("d", DIMS)
def test_distance_metric_axioms(k, d):
    rng = np.random.default_rng(int(77 * (k + 3)) + d)
    if k > 0:
        raw = rng.normal(size=(3, 1000, d + 1))
        pts = [Tensor(r / np.linalg.norm(r, axis=1, keepdims=True) / math.sqrt(k)) for r in raw]
    else:
        pts = [sample_points(rng, 1000, d, k, max_radius=3.0) for _ in range(3)]
    x, y, z = pts
    dxy, dyx = M.distance(x, y, k).value, M.distance(y, x, k).value
    assert np.abs(dxy - dyx).max() <= 1e-12
    assert dxy.min() >= 0.0
    assert np.abs(M.distance(x, x, k).value).max() == 0.0
    dyz, dxz = M.distance(y, z, k).value, M.distance(x, z, k).value
    assert np.all(dxz <= dxy + dyz + 1e-10)
    assert np.abs(dxy - M.tangent_norm(M.logmap(x, y, k, check=False), k).value)[
        dxy[:, 0] * math.sqrt(abs(k)) < 3.0].max() < 1e-8


def test_euclidean_branch_distance():
    assert M.distance(Tensor([0.0, 0.0]), Tensor([3.0, 4.0]), 0.0).item() == 5.0


# -- stereographic and gyro ------------------------------------------------------------


def test_stereo_examples():
    for k in KAPPAS:
        assert np.array_equal(M.stereo(M.origin(3, k), k).value, np.zeros(3))
    p = Tensor([math.cosh(1.0), math.sinh(1.0)])
    r = M.stereo(p, -1.0).value[0]
    assert abs(r - math.tanh(0.5)) < 1e-12 and abs(r - 0.462117) < 1e-6
    with pytest.raises(M.GeometryError):
        M.stereo(-M.origin(2, 1.0), 1.0)
    with pytest.raises(M.GeometryError):
        M.stereo(Tensor([1.0, 2.0]), 0.0)


@pytest.mark.parametrize("k", KAPPAS)
@pytest.mark.parametrize("d", DIMS)
def test_stereo_round_trip(k, d):
    rng = np.random.default_rng(int(31 * (k + 3)) + d)
    x = sample_points(rng, 1000, d, k, max_radius=3.0 if k < 0 else 2.5)
    xp = M.stereo(x, k)
    if k < 0:
        assert np.all(k * (xp.value ** 2).sum(axis=1) > -1)
    assert np.abs(M.stereo_inv(xp, k).value - x.value).max() < 1e-9


@pytest.mark.parametrize("k", KAPPAS)
@pytest.mark.parametrize("d", DIMS)
def test_gyro_identities(k, d):
    rng = np.random.default_rng(int(13 * (k + 3)) + d)
    x = sample_points(rng, 200, d, k)
    o = M.origin(d, k)
    on = Tensor(np.tile(o.value, (200, 1)))
    assert np.abs(M.gyro_add(x, on, k).value - x.value).max() < 1e-9
    assert np.abs(M.gyro_add(on, x, k).value - x.value).max() < 1e-9
    assert np.abs(M.gyro_add(M.neg(x, k), x, k).value - on.value).max() < 1e-8
    y = sample_points(rng, 200, d, k)
    s = M.gyro_add(x, y, k)
    assert constraint_error(s, k) < 1e-7


@pytest.mark.parametrize("k", KAPPAS)
def test_ambient_and_gyro_distances_agree(k):
    rng = np.random.default_rng(4)
    x = sample_points(rng, 300, 8, k)
    y = sample_points(rng, 300, 8, k)
    gd = M.gyro_distance(M.stereo(x, k), M.stereo(y, k), k).value
    assert np.abs(gd - M.distance(x, y, k).value).max() < 1e-7


def test_mobius_add_matches_direct_formula():
    rng = np.random.default_rng(8)
    for k in (-1.3, 0.6):
        a, b = rng.normal(size=3) * 0.3, rng.normal(size=3) * 0.3
        num = (1 - 2 * k * a @ b - k * b @ b) * a + (1 + k * a @ a) * b
        den = 1 - 2 * k * a @ b + k * k * (a @ a) * (b @ b)
        assert np.allclose(M.mobius_add(Tensor(a), Tensor(b), k).value, num / den, atol=1e-14)


# -- curvature-aware algebra -----------------------------------------------------------


def test_scalar_mul_examples():
    rng = np.random.default_rng(6)
    for k in KAPPAS:
        x = sample_points(rng, 50, 4, k, max_radius=1.0)
        assert np.abs(M.scalar_mul(1.0, x, k).value - x.value).max() < 1e-12
        o = np.tile(M.origin(4, k).value, (50, 1))
        assert np.abs(M.scalar_mul(0.0, x, k).value - o).max() < 1e-12
        r, s = rng.uniform(-2, 2, size=2)
        lhs = M.scalar_mul(r * s, x, k).value
        rhs = M.scalar_mul(r, M.scalar_mul(s, x, k), k).value
        ok = np.abs(r * s) * np.linalg.norm(M.logmap0(x, k).value, axis=1) * math.sqrt(abs(k)) < (
            3.0 if k < 0 else 3.0)
        assert np.abs(lhs - rhs)[ok].max() < 1e-8


def test_matrix_mul_and_apply_fn():
    rng = np.random.default_rng(10)
    x = sample_points(rng, 10, 3, -1.0, max_radius=1.0)
    m = rng.normal(size=(5, 3)) * 0.3
    y = M.matrix_mul(m, x, -1.0)
    assert y.shape == (10, 6) and constraint_error(y, -1.0) < 1e-7
    assert np.abs(M.logmap0(y, -1.0).value - M.logmap0(x, -1.0).value @ m.T).max() < 1e-9
    with pytest.raises(T.ShapeError):
        M.matrix_mul(np.ones((2, 4)), x, -1.0)
    r = M.apply_fn(T.relu, x, -1.0)
    assert np.all(M.logmap0(r, -1.0).value >= -1e-12)


# -- limits, validation, gradients ------------------------------------------------------


def test_smooth_flat_limit():
    rng = np.random.default_rng(11)
    u, w = rng.normal(size=(20, 4)), rng.normal(size=(20, 4))
    for k in (-1e-5, 1e-5):
        x, y = M.expmap0(Tensor(u), k), M.expmap0(Tensor(w), k)
        assert np.abs(x.value[:, 1:] - u).max() < 1e-4
        assert np.abs(M.distance(x, y, k).value - np.linalg.norm(u - w, axis=1, keepdims=True)).max() < 1e-4
        s = M.logmap0(M.gyro_add(x, y, k), k).value
        assert np.abs(s - (u + w)).max() < 1e-4


def test_nudge_keeps_sign_and_zeroes_gradient():
    k = T.parameter(np.array([[-1e-8], [0.0], [3e-7], [0.5]]))
    n = M.nudge(k)
    assert np.array_equal(n.value[:, 0], [-1e-6, 1e-6, 1e-6, 0.5])
    n.sum().backward()
    assert np.array_equal(k.grad[:, 0], [0.0, 0.0, 0.0, 1.0])


def test_mixed_flat_and_curved_rows_rejected():
    with pytest.raises(M.GeometryError):
        M.expmap0(Tensor(np.ones((2, 2))), Tensor(np.array([[0.0], [1.0]])))


def test_per_row_curvature_matches_scalar_calls():
    rng = np.random.default_rng(12)
    ks = np.array([[-1.5], [0.4], [-0.2], [2.0]])
    u, w = rng.normal(size=(4, 3)) * 0.4, rng.normal(size=(4, 3)) * 0.4
    kt = Tensor(ks)
    x, y = M.expmap0(Tensor(u), kt), M.expmap0(Tensor(w), kt)
    dist = M.distance(x, y, kt).value
    for i, k in enumerate(ks[:, 0]):
        xi, yi = M.expmap0(Tensor(u[i]), k), M.expmap0(Tensor(w[i]), k)
        assert np.abs(x.value[i] - xi.value).max() < 1e-14
        assert abs(dist[i, 0] - M.distance(xi, yi, k).item()) < 1e-13


def test_manifold_point_validation():
    p = M.ManifoldPoint(np.array([math.cosh(1), math.sinh(1)]), -1.0)
    assert p.model == "hyperboloid" and p.dim == 1
    assert M.ManifoldPoint(np.array([1.0, 2.0]), 0.0).model == "euclidean"
    with pytest.raises(M.GeometryError):
        M.ManifoldPoint(np.array([1.0, 1.0]), -1.0)
    with pytest.raises(M.GeometryError):
        M.ManifoldPoint(np.array([-1.0, 0.0]), -1.0)
    with pytest.raises(M.GeometryError):
        M.ManifoldPoint(np.array([0.1, 0.0]), 100.0)


@pytest.mark.parametrize("k0", [-1.5, -0.2, 0.3, 1.2])
def test_gradients_wrt_inputs_and_curvature(k0):
    rng = np.random.default_rng(13)
    k = T.parameter(np.array(k0))
    u = T.parameter(rng.normal(size=(3, 4)) * 0.4)
    w = T.parameter(rng.normal(size=(3, 4)) * 0.3)

    def f():
        x, y = M.expmap0(u, k), M.expmap0(w, k)
        v = M.logmap(x, y, k, check=False)
        z = M.gyro_add(x, y, k)
        return (M.distance(x, y, k).sum() + 0.3 * (v * v).sum() + M.logmap0(z, k).sum()
                + M.stereo(z, k).sum() + M.matrix_mul(np.eye(4) * 0.7, x, k).sum()
                + M.expmap(x, 0.5 * v, k, check=False).sum())

    assert T.gradcheck(f, [k, u, w]) < 1e-3


@settings(max_examples=60, deadline=None, derandomize=True)
@given(st.floats(-2.0, 2.0).filter(lambda k: abs(k) > 1e-3),
       st.lists(st.floats(-1, 1), min_size=6, max_size=6))
def test_constraint_closure_property(k, vals):
    x = M.expmap0(Tensor(np.array(vals[:3])), k)
    y = M.expmap0(Tensor(np.array(vals[3:])), k)
    for out in (M.gyro_add(x, y, k), M.scalar_mul(0.7, x, k), M.project(x * 1.01, k),
                M.stereo_inv(M.stereo(x, k), k)):
        assert abs(M.inner(out, out, k).item() - 1.0 / k) < 1e-7
