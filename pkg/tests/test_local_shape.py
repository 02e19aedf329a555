import numpy as np
import pytest

from lanegeom.engine import check_function_gradient
from lanegeom.errors import ShapeMismatchError
from lanegeom.local_shape import (DEFAULT_WIDTH, Gauss2, SegmentParams, height_loss, kl_gauss2,
                                  local_kl_loss, local_total_loss, segment_gaussian, smoothness_loss,
                                  symmetric_kl_batch)

from oracles import kl_quadrature


def rot(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s], [s, c]])


def random_segment(rng):
    return SegmentParams(tuple(rng.uniform(-3, 3, 3)), float(rng.uniform(0.2, 2.0)),
                         float(rng.uniform(-np.pi / 2 + 1e-3, np.pi / 2)))


def random_gauss(rng):
    L = rng.normal(size=(2, 2))
    S = L @ L.T + 0.1 * np.eye(2)
    return Gauss2(rng.normal(size=2), S)


# ------------------------------------------------------------------ segment types

def test_segment_validation():
    with pytest.raises(ValueError):
        SegmentParams((0, 0, 0), 0.0, 0.0)
    with pytest.raises(ValueError):
        SegmentParams((0, 0, 0), 1.0, -np.pi / 2)
    s = SegmentParams((1, 2, 3), 1.0, np.pi / 2)
    assert SegmentParams.from_dict(s.to_dict()) == s
    assert SegmentParams.from_array(s.to_array()) == s


def test_gaussian_examples():
    g = segment_gaussian(SegmentParams((1, 2, 9), 2.0, 0.0), w=0.5)
    assert g.mu.tolist() == [1.0, 2.0]
    assert np.allclose(g.sigma, np.diag([0.25, 1.0]), atol=1e-15)
    g = segment_gaussian(SegmentParams((1, 2, 9), 2.0, np.pi / 2), w=0.5)
    assert np.allclose(g.sigma, np.diag([1.0, 0.25]), atol=1e-15)


def test_gaussian_matrix_product_oracle():
    rng = np.random.default_rng(0)
    for _ in range(50):
        eta = random_segment(rng)
        R = rot(eta.alpha)
        expect = np.linalg.multi_dot([R, np.diag([DEFAULT_WIDTH**2, eta.l**2 / 4]), R.T])
        assert np.allclose(segment_gaussian(eta).sigma, expect, atol=1e-14)


def test_gaussian_is_spd():
    rng = np.random.default_rng(1)
    for _ in range(200):
        eta = random_segment(rng)
        S = segment_gaussian(eta).sigma
        assert np.array_equal(S, S.T)
        assert np.linalg.eigvalsh(S).min() >= min(DEFAULT_WIDTH**2, eta.l**2 / 4) - 1e-12


def test_rotation_equivariance():
    rng = np.random.default_rng(2)
    for _ in range(50):
        eta = random_segment(rng)
        phi = rng.uniform(-np.pi, np.pi)
        R = rot(phi)
        xy = R @ np.array(eta.p_o[:2])
        # bar headings are defined modulo pi; map into the principal range
        a = eta.alpha + phi
        a = a - np.pi * np.ceil((a - np.pi / 2) / np.pi)
        turned = SegmentParams((xy[0], xy[1], eta.p_o[2]), eta.l, float(a))
        g0, g1 = segment_gaussian(eta), segment_gaussian(turned)
        assert np.allclose(g1.mu, R @ g0.mu, atol=1e-10)
        assert np.allclose(g1.sigma, R @ g0.sigma @ R.T, atol=1e-10)


# ------------------------------------------------------------------ KL

def test_kl_identical_is_zero():
    g = random_gauss(np.random.default_rng(3))
    assert kl_gauss2(g, g)[0] <= 1e-12


def test_kl_unit_shift():
    g1 = Gauss2([0, 0], np.eye(2))
    g2 = Gauss2([1, 0], np.eye(2))
    assert kl_gauss2(g1, g2)[0] == pytest.approx(0.5, abs=1e-15)


def test_kl_positive_on_perturbed_pairs():
    rng = np.random.default_rng(4)
    for _ in range(1000):
        g = random_gauss(rng)
        h = Gauss2(g.mu + rng.normal(scale=1e-3, size=2), g.sigma)
        assert kl_gauss2(g, h)[0] > 0


def test_kl_rejects_non_spd():
    with pytest.raises(ValueError):
        kl_gauss2(Gauss2([0, 0], [[1, 2], [2, 1]]), Gauss2([0, 0], np.eye(2)))


def test_kl_quadrature_oracle():
    rng = np.random.default_rng(5)
    for _ in range(5):
        g1, g2 = random_gauss(rng), random_gauss(rng)
        assert kl_gauss2(g1, g2)[0] == pytest.approx(kl_quadrature(g1, g2), rel=1e-3)


def test_kl_covariance_and_mean_gradients():
    rng = np.random.default_rng(6)
    g1, g2 = random_gauss(rng), random_gauss(rng)

    def unpack(v):
        return np.array([[v[0], v[1]], [v[1], v[2]]])

    def pack_grad(G):
        return np.array([G[0, 0], G[0, 1] + G[1, 0], G[1, 1]])

    def fun(x):
        a = Gauss2(x[:2], unpack(x[2:5]))
        b = Gauss2(x[5:7], unpack(x[7:10]))
        v, g = kl_gauss2(a, b)
        return v, np.concatenate([g.mu1, pack_grad(g.sigma1), g.mu2, pack_grad(g.sigma2)])

    x = np.concatenate([g1.mu, g1.sigma[[0, 0, 1], [0, 1, 1]], g2.mu, g2.sigma[[0, 0, 1], [0, 1, 1]]])
    assert check_function_gradient(fun, x).max_rel_error < 1e-5


# ------------------------------------------------------------------ local KL loss

def test_local_kl_examples():
    rng = np.random.default_rng(7)
    segs = [random_segment(rng) for _ in range(5)]
    assert local_kl_loss(segs, segs) == pytest.approx(0.0, abs=1e-12)
    # bars along y, shifted sideways by one width: unit Mahalanobis distance
    a = SegmentParams((0, 0, 0), 2.0, 0.0)
    b = SegmentParams((DEFAULT_WIDTH, 0, 0), 2.0, 0.0)
    assert local_kl_loss([a], [b]) == pytest.approx(0.5, rel=1e-12)


def test_local_kl_is_per_pair_sum():
    rng = np.random.default_rng(8)
    preds = [[random_segment(rng) for _ in range(4)] for _ in range(3)]
    gts = [[random_segment(rng) for _ in range(4)] for _ in range(3)]
    expect = 0.0
    for lp, lg in zip(preds, gts):
        for p, g in zip(lp, lg):
            gp, gg = segment_gaussian(p), segment_gaussian(g)
            expect += 0.5 * (kl_gauss2(gg, gp)[0] + kl_gauss2(gp, gg)[0])
    assert local_kl_loss(preds, gts) == pytest.approx(expect, rel=1e-12)


def test_local_kl_shape_mismatch():
    rng = np.random.default_rng(9)
    s = [random_segment(rng) for _ in range(3)]
    with pytest.raises(ShapeMismatchError):
        local_kl_loss([s], [s[:2]])


def test_symmetric_kl_gradient():
    rng = np.random.default_rng(10)
    worst = 0.0
    for _ in range(100):
        gt = np.array([random_segment(rng).to_array() for _ in range(4)])
        pred = gt + rng.normal(scale=0.2, size=gt.shape)
        pred[:, 3] = np.abs(pred[:, 3]) + 0.1
        fun = lambda x: symmetric_kl_batch(x.reshape(-1, 5), gt)
        worst = max(worst, check_function_gradient(lambda x: (fun(x)[0], fun(x)[1].ravel()),
                                                   pred.ravel()).max_rel_error)
    assert worst < 1e-5


# ------------------------------------------------------------------ smoothness, height, total

def test_smoothness_examples():
    line = np.outer(np.arange(6.0), [1.0, 0.5, 0.125]) + 3.0
    assert smoothness_loss([line])[0] == 0.0
    kink = np.array([[0, 0, 0], [1, 0, 0], [2, 1, 0]], dtype=float)
    assert smoothness_loss([kink])[0] == 1.0
    assert smoothness_loss([kink[:2]])[0] == 0.0


def test_smoothness_recomputation_and_translation():
    rng = np.random.default_rng(11)
    pts = np.cumsum(rng.normal(size=(40, 3)), axis=0)
    expect = sum(np.linalg.norm((pts[j + 2] - pts[j + 1]) - (pts[j + 1] - pts[j])) for j in range(38))
    val = smoothness_loss([pts])[0]
    assert val == pytest.approx(expect, rel=1e-12)
    assert smoothness_loss([pts + rng.normal(size=3)])[0] == pytest.approx(val, rel=1e-12)


def test_smoothness_gradient():
    rng = np.random.default_rng(12)
    worst = 0.0
    for _ in range(100):
        pts = np.cumsum(rng.normal(size=(8, 3)), axis=0)
        fun = lambda x: (smoothness_loss([x.reshape(-1, 3)])[0], smoothness_loss([x.reshape(-1, 3)])[1][0].ravel())
        worst = max(worst, check_function_gradient(fun, pts.ravel()).max_rel_error)
    assert worst < 1e-5


def test_height_loss():
    z = np.array([0.1, -0.3, 2.0])
    assert height_loss(z, z)[0] == 0.0
    assert height_loss(z + 0.1, z)[0] == pytest.approx(0.01, rel=1e-12)
    rng = np.random.default_rng(13)
    a, b = rng.normal(size=20), rng.normal(size=20)
    val, grad = height_loss(a, b)
    assert val == pytest.approx(np.mean((a - b) ** 2), rel=1e-12)
    fun = lambda x: height_loss(x, b)
    assert check_function_gradient(fun, a).max_rel_error < 1e-5
    with pytest.raises(ShapeMismatchError):
        height_loss(a, b[:3])


def test_local_total():
    assert local_total_loss(0, 0, 0, 0) == 0
    assert local_total_loss(2, 4, 1, 0.5) == 5.5
    rng = np.random.default_rng(14)
    parts = rng.uniform(0, 5, 4)
    w = rng.uniform(0.1, 2, 3)
    total = local_total_loss(*parts, lam1=w[0], lam2=w[1], lam3=w[2])
    assert total == pytest.approx(w[1] * parts[0] + w[2] * parts[1] + w[0] * parts[2] + parts[3])
