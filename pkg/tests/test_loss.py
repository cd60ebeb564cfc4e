import math

import numpy as np
import pytest

from trackadapt.exceptions import LossInputError
from trackadapt.loss import (DUSTBIN, LossParams, cell_labels, grad_loss, loss_detection, loss_pair_tracking,
                             loss_total, sample_descriptors)
from trackadapt.tracks import CorrespondenceSet

from gradcheck import loss_instance_error


def _const_field(vec, hc=2, wc=2):
    return np.tile(np.asarray(vec, dtype=np.float64), (hc, wc, 1))


def _pairs(xy_a, xy_b):
    return CorrespondenceSet(0, 1, xy_a, xy_b, range(len(xy_a)))


# reference implementations, written as plain loops over Python floats

def _ref_labels(Y):
    H, W = len(Y), len(Y[0])
    out = {}
    for r in range(H // 8):
        for c in range(W // 8):
            best, arg = -math.inf, None
            for k in range(64):
                v = float(Y[8 * r + k // 8][8 * c + k % 8])
                if v > best:
                    best, arg = v, k
            out[r, c] = arg if best > 1e-6 else 64
    return out


def _ref_detection(X, Y):
    labels = _ref_labels(Y)
    terms = []
    for (r, c), lab in labels.items():
        col = [float(X[k][r][c]) for k in range(65)]
        m = max(col)
        lse = m + math.log(math.fsum(math.exp(v - m) for v in col))
        terms.append(lse - col[lab])
    return math.fsum(terms) / len(terms)


def _ref_sample(D, x, y):
    hc, wc = len(D), len(D[0])
    gx = min(max(x / 8 - 0.5, 0), wc - 1)
    gy = min(max(y / 8 - 0.5, 0), hc - 1)
    x0 = min(int(math.floor(gx)), max(wc - 2, 0))
    y0 = min(int(math.floor(gy)), max(hc - 2, 0))
    x1, y1 = min(x0 + 1, wc - 1), min(y0 + 1, hc - 1)
    ax, ay = gx - x0, gy - y0
    v = [(1 - ax) * (1 - ay) * D[y0][x0][d] + ax * (1 - ay) * D[y0][x1][d]
         + (1 - ax) * ay * D[y1][x0][d] + ax * ay * D[y1][x1][d] for d in range(len(D[0][0]))]
    n = math.sqrt(math.fsum(t * t for t in v))
    return [t / n for t in v]


def _ref_tracking(Da, Db, xy_a, xy_b, p):
    da = [_ref_sample(Da, *xy) for xy in xy_a]
    db = [_ref_sample(Db, *xy) for xy in xy_b]
    n = len(da)
    terms = []
    for i in range(n):
        for j in range(n):
            s = math.fsum(a * b for a, b in zip(da[i], db[j]))
            terms.append(p.lam_t * max(0.0, p.m_p - s) if i == j else max(0.0, s - p.m_n))
    return math.fsum(terms) / (n * n)


def _random_instance(rng, n_images=2, side=16, n_tracks=3, dim=8):
    hc = side // 8
    Xs = [rng.normal(0, 2, (65, hc, hc)) for _ in range(n_images)]
    Ds = [rng.normal(size=(hc, hc, dim)) for _ in range(n_images)]
    Ys = []
    for _ in range(n_images):
        Y = np.zeros((side, side))
        for r, c in rng.integers(0, side, (3, 2)):
            Y[r, c] = rng.uniform(0.1, 1)
        Ys.append(Y)
    T = {(a, b): _pairs(rng.uniform(0, side, (n_tracks, 2)), rng.uniform(0, side, (n_tracks, 2)))
         for a in range(n_images) for b in range(a + 1, n_images)}
    return Xs, Ds, Ys, T


def test_uniform_logits_give_ln65():
    Y = np.zeros((32, 32))
    Y[3, 4] = 1
    assert abs(loss_detection(np.zeros((65, 4, 4)), Y) - math.log(65)) < 1e-12
    assert abs(loss_detection(np.full((65, 4, 4), 7.5), np.zeros((32, 32))) - math.log(65)) < 1e-12


def test_confident_logits_give_zero():
    Y = np.zeros((16, 16))
    Y[1, 2] = 1
    labels = cell_labels(Y)
    X = np.zeros((65, 2, 2))
    for (r, c), lab in np.ndenumerate(labels):
        X[lab, r, c] = 1e6
    assert loss_detection(X, Y) < 1e-12


def test_cell_labels():
    Y = np.zeros((16, 16))
    Y[1, 2] = 0.5
    Y[9, 9] = 1e-7
    Y[3, 12], Y[4, 13] = 0.7, 0.7
    assert cell_labels(Y).tolist() == [[10, 3 * 8 + 4], [DUSTBIN, DUSTBIN]]
    with pytest.raises(LossInputError):
        cell_labels(np.zeros((10, 16)))


@pytest.mark.parametrize("seed", range(10))
def test_detection_matches_reference(seed):
    rng = np.random.default_rng(seed)
    Xs, _, Ys, _ = _random_instance(rng, side=32)
    assert abs(loss_detection(Xs[0], Ys[0]) - _ref_detection(Xs[0], Ys[0])) < 1e-10


def test_tracking_identical_descriptors_zero():
    D = _const_field([1.0, 0, 0])
    assert loss_pair_tracking(D, D, _pairs([[4, 4]], [[8, 8]])) == 0.0


def test_tracking_perfect_separation_zero():
    # track 0 lives in the left column, track 1 in the right one
    D = np.zeros((2, 2, 2))
    D[:, 0] = [1, 0]
    D[:, 1] = [0, 1]
    T = _pairs([[4, 4], [12, 4]], [[4, 12], [12, 12]])
    assert loss_pair_tracking(D, D, T) == 0.0


def test_tracking_hand_value_point_four():
    u = np.array([1.0, 0.0])
    v = np.array([0.5, math.sqrt(3) / 2])
    T = _pairs([[4, 4], [12, 12]], [[4, 4], [12, 12]])
    assert loss_pair_tracking(_const_field(u), _const_field(v), T, LossParams()) == pytest.approx(0.4, abs=1e-15)


@pytest.mark.parametrize("seed", range(10))
def test_tracking_matches_reference(seed):
    rng = np.random.default_rng(100 + seed)
    _, Ds, _, T = _random_instance(rng, side=32, n_tracks=5)
    p = LossParams(1.0, 2.0, 1.0, 0.2)
    t = T[(0, 1)]
    ref = _ref_tracking(Ds[0].tolist(), Ds[1].tolist(), t.xy_a.tolist(), t.xy_b.tolist(), p)
    assert abs(loss_pair_tracking(Ds[0], Ds[1], t, p) - ref) < 1e-12


def test_sample_descriptors_cell_centre_and_norms():
    rng = np.random.default_rng(0)
    D = rng.normal(size=(4, 4, 16))
    d = sample_descriptors(D, [[8 * 2 + 4, 8 * 1 + 4]], normalize=False)
    assert np.allclose(d[0], D[1, 2])
    u = sample_descriptors(D, rng.uniform(0, 32, (50, 2)))
    assert np.allclose(np.linalg.norm(u, axis=1), 1, atol=1e-12)


def test_total_additivity_and_lambda_zero():
    rng = np.random.default_rng(3)
    Xs, Ds, Ys, T = _random_instance(rng)
    det = loss_detection(Xs[0], Ys[0]) + loss_detection(Xs[1], Ys[1])
    assert loss_total(Xs, Ds, Ys, T, LossParams(lam=0.0)) == pytest.approx(det, abs=1e-14)
    same = [Ds[0], Ds[0]]
    ident = {(0, 1): _pairs([[4, 4]], [[4, 4]])}
    assert loss_total(Xs, same, Ys, ident) == pytest.approx(det, abs=1e-14)


@pytest.mark.parametrize("seed", range(5))
def test_total_equals_term_by_term_sum(seed):
    rng = np.random.default_rng(200 + seed)
    Xs, Ds, Ys, T = _random_instance(rng, n_images=4, side=24)
    p = LossParams(lam=0.7, lam_t=1.3)
    terms = [_ref_detection(X, Y) for X, Y in zip(Xs, Ys)]
    terms += [p.lam * _ref_tracking(Ds[a].tolist(), Ds[b].tolist(), t.xy_a.tolist(), t.xy_b.tolist(), p)
              for (a, b), t in sorted(T.items())]
    assert len(terms) == 4 + 6
    assert abs(loss_total(Xs, Ds, Ys, T, p) - math.fsum(terms)) < 1e-12


def test_missing_pair_and_shape_errors():
    rng = np.random.default_rng(4)
    Xs, Ds, Ys, T = _random_instance(rng, n_images=3)
    del T[(1, 2)]
    with pytest.raises(LossInputError, match=r"\(1, 2\)"):
        loss_total(Xs, Ds, Ys, T)
    with pytest.raises(LossInputError):
        loss_detection(np.zeros((64, 2, 2)), np.zeros((16, 16)))
    with pytest.raises(LossInputError):
        loss_pair_tracking(Ds[0], Ds[1], _pairs(np.zeros((0, 2)), np.zeros((0, 2))))
    with pytest.raises(ValueError):
        LossParams(m_p=0.1, m_n=0.2)


def test_inactive_hinges_give_zero_descriptor_gradient():
    D = np.zeros((2, 2, 2))
    D[:, 0] = [1, 0]
    D[:, 1] = [0, 1]
    T = {(0, 1): _pairs([[4, 4], [12, 4]], [[4, 12], [12, 12]])}
    X = np.zeros((65, 2, 2))
    _, _, dDs = grad_loss([X, X], [D, D], [np.zeros((16, 16))] * 2, T)
    assert all(not g.any() for g in dDs)


@pytest.mark.parametrize("seed", range(10))
def test_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(300 + seed)
    assert loss_instance_error(rng, side=32, dim=8) < 1e-5


def test_gradient_with_nondefault_constants():
    rng = np.random.default_rng(7)
    p = LossParams(lam=3.0, lam_t=0.5, m_p=0.9, m_n=-0.1)
    assert loss_instance_error(rng, params=p, n_tracks=4) < 1e-5
