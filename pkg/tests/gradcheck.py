"""Central-difference gradient checking shared by the loss, network and acceptance tests.

Errors are normwise per gradient array: the largest absolute discrepancy
over the checked entries divided by the array's largest analytic entry.
Entrywise ratios are ill-conditioned here because softmax and hinge
gradients have entries near 1e-7, where rounding in the two loss
evaluations (about 1e-11 absolute) dominates any ratio.
"""
import numpy as np

from trackadapt.loss import LossParams, grad_loss, loss_total, sample_descriptors
from trackadapt.refnet import NetWeights, backward, forward, sample_loss
from trackadapt.supervision import TrainingSample
from trackadapt.tracks import CorrespondenceSet

STEP = 1e-5


def _entries(A, rng, n):
    if n is None or n >= A.size:
        return range(A.size)
    return rng.choice(A.size, n, replace=False)


def array_error(A, G, f, rng, n_entries=None, h=STEP):
    """Normwise relative error of analytic gradient ``G`` of ``f`` w.r.t. ``A`` (perturbed in place)."""
    scale = np.abs(G).max()
    worst = 0.0
    for k in _entries(A, rng, n_entries):
        idx = np.unravel_index(k, A.shape)
        old = A[idx]
        A[idx] = old + h
        lp = f()
        A[idx] = old - h
        lm = f()
        A[idx] = old
        worst = max(worst, abs(G[idx] - (lp - lm) / (2 * h)))
    return worst / scale if scale > 0 else worst


def pairs(xy_a, xy_b):
    return CorrespondenceSet(0, 1, xy_a, xy_b, range(len(xy_a)))


def hinge_gap(Ds, T, p):
    """Distance of the closest hinge argument from its kink."""
    gaps = []
    for (a, b), t in T.items():
        S = sample_descriptors(Ds[a], t.xy_a) @ sample_descriptors(Ds[b], t.xy_b).T
        eye = np.eye(len(S), dtype=bool)
        gaps.append(np.abs(np.where(eye, p.m_p - S, S - p.m_n)).min())
    return min(gaps)


def random_loss_instance(rng, n_images=2, side=16, n_tracks=3, dim=16, logit_std=1.0):
    hc = side // 8
    Xs = [rng.normal(0, logit_std, (65, hc, hc)) for _ in range(n_images)]
    Ds = [rng.normal(size=(hc, hc, dim)) for _ in range(n_images)]
    Ys = []
    for _ in range(n_images):
        Y = np.zeros((side, side))
        for r, c in rng.integers(0, side, (3, 2)):
            Y[r, c] = rng.uniform(0.1, 1)
        Ys.append(Y)
    T = {(a, b): pairs(rng.uniform(0, side, (n_tracks, 2)), rng.uniform(0, side, (n_tracks, 2)))
         for a in range(n_images) for b in range(a + 1, n_images)}
    return Xs, Ds, Ys, T


def loss_instance_error(rng, params=LossParams(), n_entries=None, min_gap=1e-3, **kw):
    """Worst normwise error over every logit and descriptor array of one random instance.

    Instances with a hinge argument within ``min_gap`` of its kink are
    redrawn: the loss is not differentiable there.
    """
    while True:
        Xs, Ds, Ys, T = random_loss_instance(rng, **kw)
        if hinge_gap(Ds, T, params) > min_gap:
            break
    _, dXs, dDs = grad_loss(Xs, Ds, Ys, T, params)
    f = lambda: loss_total(Xs, Ds, Ys, T, params)  # noqa: E731
    errs = [array_error(A, G, f, rng, n_entries) for A, G in zip(Xs + Ds, dXs + dDs)]
    return max(errs)


REDUCED_CHANNELS = (4, 4, 4, 8)
REDUCED_DIM = 16


def random_net_sample(rng, side=16, n_tracks=3):
    images = rng.random((2, side, side))
    heat = np.zeros((2, side, side))
    for i in range(2):
        for r, c in rng.integers(0, side, (2, 2)):
            heat[i, r, c] = rng.uniform(0.1, 1)
    T = {(0, 1): CorrespondenceSet(0, 1, rng.uniform(0, side, (n_tracks, 2)),
                                   rng.uniform(0, side, (n_tracks, 2)), range(n_tracks))}
    return TrainingSample([0, 1], images, heat, T)


def net_instance_error(rng, seed, params=LossParams(), n_entries=3):
    """Worst normwise error over every parameter array of a reduced network on 16x16 inputs."""
    w = NetWeights.init(seed, REDUCED_CHANNELS, REDUCED_DIM)
    while True:
        sample = random_net_sample(rng)
        Ds = [forward(w, img, None).descriptors for img in sample.images]
        if hinge_gap(Ds, sample.correspondences, params) > 1e-3:
            break
    _, grads = backward(w, sample, params)
    f = lambda: sample_loss(w, sample, params)  # noqa: E731
    return max(array_error(w.params[k], grads[k], f, rng, n_entries) for k in sorted(w.params))
