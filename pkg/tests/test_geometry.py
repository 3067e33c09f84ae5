import numpy as np
import pytest

from tkgdiff import geometry as geo
from tkgdiff import numkit as nk


def random_ball_points(rng, n, d, max_norm=0.9):
    x = rng.normal(size=(n, d))
    radii = rng.uniform(0.0, max_norm, size=(n, 1))
    return x / np.linalg.norm(x, axis=1, keepdims=True) * radii


def test_project_inside_unchanged():
    p = geo.project_to_ball(nk.tensor([[0.3, 0.4]]))
    np.testing.assert_array_equal(p.data, [[0.3, 0.4]])


def test_project_forces_to_margin():
    p = geo.project_to_ball(nk.tensor([[3.0, 4.0]]))
    assert np.linalg.norm(p.data) == pytest.approx(1.0 - geo.BALL_MARGIN, abs=1e-11)
    np.testing.assert_allclose(p.data / np.linalg.norm(p.data), [[0.6, 0.8]], atol=1e-12)


def test_project_idempotent():
    rng = nk.rng_for(21)
    x = nk.tensor(rng.normal(size=(10, 4)) * 3.0)
    once = geo.project_to_ball(x)
    twice = geo.project_to_ball(once)
    np.testing.assert_array_equal(once.data, twice.data)


def test_project_gradient():
    rng = nk.rng_for(22)
    # mix of interior and exterior rows
    x = nk.tensor(np.vstack([rng.normal(size=(2, 3)) * 0.2,
                             rng.normal(size=(2, 3)) * 3.0]))
    w = nk.tensor(rng.normal(size=(4, 3)))
    report = nk.grad_check(
        lambda ps: nk.sum_all(nk.mul(geo.project_to_ball(ps[0]), w)), [x],
        tolerance=1e-5)
    assert report.ok, report


def test_poincare_distance_zero_on_self():
    rng = nk.rng_for(23)
    x = nk.tensor(random_ball_points(rng, 8, 5))
    d = geo.poincare_distance(x, x)
    np.testing.assert_allclose(d.data, 0.0, atol=1e-12)


def test_poincare_origin_to_half():
    # arcosh(1 + 2*0.25/(1*0.75)) = arcosh(5/3) = ln 3
    d = geo.poincare_distance([0.0, 0.0], [0.5, 0.0])
    assert d.item() == pytest.approx(np.log(3.0), abs=1e-10)


def test_poincare_symmetry_100_pairs():
    rng = nk.rng_for(24)
    a = nk.tensor(random_ball_points(rng, 100, 4))
    b = nk.tensor(random_ball_points(rng, 100, 4))
    dab = geo.poincare_distance(a, b)
    dba = geo.poincare_distance(b, a)
    np.testing.assert_allclose(dab.data, dba.data, atol=1e-12)


def test_euclidean_345():
    d = geo.euclidean_distance([0.0, 0.0], [3.0, 4.0])
    assert d.item() == pytest.approx(5.0, abs=1e-12)
    assert geo.euclidean_distance([1.0, 1.0], [1.0, 1.0]).item() == 0.0


def test_euclidean_triangle_inequality():
    rng = nk.rng_for(25)
    for _ in range(100):
        a, b, c = rng.normal(size=(3, 6))
        dab = geo.euclidean_distance(a, b).item()
        dbc = geo.euclidean_distance(b, c).item()
        dac = geo.euclidean_distance(a, c).item()
        assert dac <= dab + dbc + 1e-12


def test_small_radius_limit():
    # near the origin the ball metric is conformal with factor 2
    rng = nk.rng_for(26)
    a = nk.tensor(random_ball_points(rng, 50, 3, max_norm=0.01))
    b = nk.tensor(random_ball_points(rng, 50, 3, max_norm=0.01))
    dp = geo.poincare_distance(a, b).data
    de = geo.euclidean_distance(a, b).data
    nonzero = de > 1e-9
    ratio = dp[nonzero] / de[nonzero]
    assert np.all(np.abs(ratio - 2.0) < 0.02)


def test_poincare_monotone_toward_boundary():
    u = np.array([1.0, 0.0, 0.0])
    radii = np.linspace(0.05, 1.0 - geo.BALL_MARGIN, 40, endpoint=False)
    dists = [geo.poincare_distance(np.zeros(3), r * u).item() for r in radii]
    assert all(b > a for a, b in zip(dists, dists[1:]))


def test_distance_gradients_away_from_coincidence():
    rng = nk.rng_for(27)
    a = nk.tensor(random_ball_points(rng, 4, 3, max_norm=0.8))
    b = nk.tensor(random_ball_points(rng, 4, 3, max_norm=0.8))
    rp = nk.grad_check(lambda ps: nk.sum_all(geo.poincare_distance(ps[0], ps[1])),
                       [a, b], tolerance=1e-4)
    assert rp.ok, rp
    re = nk.grad_check(lambda ps: nk.sum_all(geo.euclidean_distance(ps[0], ps[1])),
                       [a, b], tolerance=1e-4)
    assert re.ok, re


def test_coincident_gradient_is_zero_not_nan():
    x = nk.tensor([[0.2, 0.1]])
    with nk.GradTape() as tape:
        d = nk.sum_all(geo.poincare_distance(x, x))
    (g,) = tape.gradient(d, [x])
    np.testing.assert_array_equal(g, np.zeros((1, 2)))


def test_pairwise_matches_rowwise():
    rng = nk.rng_for(28)
    a = nk.tensor(random_ball_points(rng, 3, 4))
    b = nk.tensor(random_ball_points(rng, 5, 4))
    pw_p = geo.poincare_pairwise(a, b).data
    pw_e = geo.euclidean_pairwise(a, b).data
    for i in range(3):
        for j in range(5):
            dp = geo.poincare_distance(a.data[i], b.data[j]).item()
            de = geo.euclidean_distance(a.data[i], b.data[j]).item()
            assert pw_p[i, j] == pytest.approx(dp, abs=1e-10)
            assert pw_e[i, j] == pytest.approx(de, abs=1e-10)


def test_pairwise_gradients():
    rng = nk.rng_for(29)
    a = nk.tensor(random_ball_points(rng, 3, 3, max_norm=0.7))
    b = nk.tensor(random_ball_points(rng, 4, 3, max_norm=0.7))
    w = nk.tensor(rng.normal(size=(3, 4)))
    rp = nk.grad_check(lambda ps: nk.sum_all(nk.mul(geo.poincare_pairwise(ps[0], ps[1]), w)),
                       [a, b], tolerance=1e-4)
    assert rp.ok, rp
    re = nk.grad_check(lambda ps: nk.sum_all(nk.mul(geo.euclidean_pairwise(ps[0], ps[1]), w)),
                       [a, b], tolerance=1e-4)
    assert re.ok, re


def test_outside_ball_rejected():
    with pytest.raises(ValueError, match="unit ball"):
        geo.poincare_distance([1.5, 0.0], [0.0, 0.0])


def test_poincare_point_projects_on_construction():
    p = geo.PoincarePoint(np.array([3.0, 4.0]))
    assert np.linalg.norm(p.coords) < 1.0
    q = geo.PoincarePoint([0.1, 0.2])
    np.testing.assert_allclose(q.coords, [0.1, 0.2])
    assert geo.poincare_distance(p, p).item() == 0.0
