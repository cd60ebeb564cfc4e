"""Detection + tracking objective and its analytic gradients.

Shapes follow the detector/descriptor heads:

* detection logits ``X``: (65, Hc, Wc) -- 64 in-cell positions + dustbin
* descriptor field ``D``: (Hc, Wc, dim)
* detection target ``Y``: (8 Hc, 8 Wc) heatmap

The total is ``sum_n Lp(X_n, Y_n) + lam * sum_{a<b} Lt(D_a, D_b, T_ab)``.
Lp is the mean 65-way softmax cross-entropy over cells. Lt is the mean over
all |T|^2 descriptor pairs of a hinge on their dot product: positives (same
track) are pushed above ``m_p`` with weight ``lam_t``, negatives below
``m_n``. Descriptors are bilinearly sampled from ``D`` at the
correspondence coordinates, then unit-normalized.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import LossInputError

CELL = 8
DUSTBIN = 64
LABEL_EPS = 1e-6


@dataclass(frozen=True)
class LossParams:
    lam: float = 1.0
    lam_t: float = 1.0
    m_p: float = 1.0
    m_n: float = 0.2

    def __post_init__(self):
        if not self.m_p > self.m_n:
            raise ValueError(f"positive margin {self.m_p} must exceed negative margin {self.m_n}")


# ---------------------------------------------------------------------------
# detection


def cell_labels(Y, cell: int = CELL) -> np.ndarray:
    """Per-cell class: raster index of the cell's heatmap maximum, or the dustbin.

    Ties go to the lowest raster index; cells whose maximum does not exceed
    1e-6 get the dustbin class (64).
    """
    Y = np.asarray(Y, dtype=np.float64)
    H, W = Y.shape
    if H % cell or W % cell:
        raise LossInputError(f"heatmap {H}x{W} is not a multiple of the {cell}px cell")
    blocks = Y.reshape(H // cell, cell, W // cell, cell).transpose(0, 2, 1, 3).reshape(H // cell, W // cell, -1)
    labels = np.argmax(blocks, axis=2)
    peak = np.take_along_axis(blocks, labels[..., None], axis=2)[..., 0]
    return np.where(peak > LABEL_EPS, labels, cell * cell)


def _check_logits(X, labels):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 3 or X.shape[0] != CELL * CELL + 1:
        raise LossInputError(f"detection logits must have shape (65, Hc, Wc), got {X.shape}")
    if X.shape[1:] != labels.shape:
        raise LossInputError(f"logits grid {X.shape[1:]} does not match heatmap cells {labels.shape}")
    return X


def _detection(X, Y, want_grad):
    labels = cell_labels(Y)
    X = _check_logits(X, labels)
    m = X.max(axis=0)
    e = np.exp(X - m)
    z = e.sum(axis=0)
    logz = np.log(z) + m
    picked = np.take_along_axis(X, labels[None], axis=0)[0]
    n_cells = labels.size
    loss = float(np.sum(logz - picked) / n_cells)
    if not want_grad:
        return loss, None
    grad = e / z
    np.put_along_axis(grad, labels[None], np.take_along_axis(grad, labels[None], axis=0) - 1.0, axis=0)
    return loss, grad / n_cells


def loss_detection(X, Y) -> float:
    """Mean over cells of the 65-way softmax cross-entropy against hard labels."""
    return _detection(X, Y, False)[0]


# ---------------------------------------------------------------------------
# descriptor sampling


def _bilinear_taps(xy, hc, wc, cell):
    """Integer taps and weights for bilinear sampling at pixel coordinates."""
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    gx = np.clip(xy[:, 0] / cell - 0.5, 0, wc - 1)
    gy = np.clip(xy[:, 1] / cell - 0.5, 0, hc - 1)
    x0 = np.minimum(np.floor(gx).astype(np.int64), max(wc - 2, 0))
    y0 = np.minimum(np.floor(gy).astype(np.int64), max(hc - 2, 0))
    x1 = np.minimum(x0 + 1, wc - 1)
    y1 = np.minimum(y0 + 1, hc - 1)
    wx = gx - x0
    wy = gy - y0
    rows = np.stack([y0, y0, y1, y1], axis=1)
    cols = np.stack([x0, x1, x0, x1], axis=1)
    weights = np.stack([(1 - wx) * (1 - wy), wx * (1 - wy), (1 - wx) * wy, wx * wy], axis=1)
    return rows, cols, weights


def sample_descriptors(D, xy, cell: int = CELL, normalize: bool = True) -> np.ndarray:
    """Bilinear lookup of ``D`` (Hc, Wc, dim) at pixel coordinates ``xy``.

    Cell ``(r, c)`` is centred on pixel coordinate ``(cell*c + cell/2,
    cell*r + cell/2)``; coordinates beyond the outer centres are clamped.
    """
    D = np.asarray(D, dtype=np.float64)
    rows, cols, w = _bilinear_taps(xy, D.shape[0], D.shape[1], cell)
    v = np.einsum("nk,nkd->nd", w, D[rows, cols])
    if normalize:
        v = v / np.linalg.norm(v, axis=1, keepdims=True)
    return v


def _sample_with_backward(D, xy, cell):
    rows, cols, w = _bilinear_taps(xy, D.shape[0], D.shape[1], cell)
    v = np.einsum("nk,nkd->nd", w, D[rows, cols])
    norm = np.linalg.norm(v, axis=1, keepdims=True)
    d = v / norm

    def backward(dd):
        dv = (dd - d * np.sum(d * dd, axis=1, keepdims=True)) / norm
        dD = np.zeros_like(D)
        np.add.at(dD, (rows, cols), w[:, :, None] * dv[:, None, :])
        return dD

    return d, backward


# ---------------------------------------------------------------------------
# tracking


def _hinge_matrix(S, params):
    n = len(S)
    eye = np.eye(n, dtype=bool)
    pos = params.m_p - S
    neg = S - params.m_n
    terms = np.where(eye, params.lam_t * np.maximum(0.0, pos), np.maximum(0.0, neg))
    dS = np.where(eye, np.where(pos > 0, -params.lam_t, 0.0), np.where(neg > 0, 1.0, 0.0))
    return terms, dS


def _corr_arrays(T):
    xy_a = np.asarray(T.xy_a if hasattr(T, "xy_a") else T[0], dtype=np.float64).reshape(-1, 2)
    xy_b = np.asarray(T.xy_b if hasattr(T, "xy_b") else T[1], dtype=np.float64).reshape(-1, 2)
    if len(xy_a) != len(xy_b):
        raise LossInputError("correspondence coordinate arrays differ in length")
    if len(xy_a) == 0:
        raise LossInputError("tracking loss needs at least one correspondence")
    return xy_a, xy_b


def _pair_tracking(Da, Db, T, params, want_grad, cell=CELL):
    Da = np.asarray(Da, dtype=np.float64)
    Db = np.asarray(Db, dtype=np.float64)
    xy_a, xy_b = _corr_arrays(T)
    da, back_a = _sample_with_backward(Da, xy_a, cell)
    db, back_b = _sample_with_backward(Db, xy_b, cell)
    S = da @ db.T
    terms, dS = _hinge_matrix(S, params)
    n2 = float(len(S) ** 2)
    loss = float(terms.sum() / n2)
    if not want_grad:
        return loss, None, None
    dS = dS / n2
    return loss, back_a(dS @ db), back_b(dS.T @ da)


def loss_pair_tracking(D_a, D_b, T_ab, params: LossParams = LossParams()) -> float:
    """Tracking loss between two descriptor fields over one correspondence set."""
    return _pair_tracking(D_a, D_b, T_ab, params, False)[0]


# ---------------------------------------------------------------------------
# total


def _pairs(n, T):
    out = []
    for a in range(n - 1):
        for b in range(a + 1, n):
            if (a, b) not in T:
                raise LossInputError(f"missing correspondence set for pair ({a}, {b})")
            out.append((a, b, T[(a, b)]))
    return out


def _check_counts(Xs, Ds, Ys):
    if not len(Xs) == len(Ds) == len(Ys):
        raise LossInputError(f"got {len(Xs)} logit maps, {len(Ds)} descriptor fields, {len(Ys)} heatmaps")


def loss_total(Xs, Ds, Ys, T, params: LossParams = LossParams()) -> float:
    """Sum of per-image detection losses plus ``lam`` times all pairwise tracking losses.

    ``T`` maps sample positions ``(a, b)``, ``a < b``, to correspondence sets.
    """
    _check_counts(Xs, Ds, Ys)
    total = 0.0
    for X, Y in zip(Xs, Ys):
        total += loss_detection(X, Y)
    track = 0.0
    for a, b, Tab in _pairs(len(Xs), T):
        track += loss_pair_tracking(Ds[a], Ds[b], Tab, params)
    return total + params.lam * track


def grad_loss(Xs, Ds, Ys, T, params: LossParams = LossParams()):
    """Loss value and its gradients w.r.t. every logit and every raw descriptor entry.

    Returns ``(loss, dXs, dDs)`` with one array per image, shaped like the
    inputs. Hinges that are not strictly active contribute zero gradient.
    """
    _check_counts(Xs, Ds, Ys)
    total = 0.0
    dXs = []
    for X, Y in zip(Xs, Ys):
        l, g = _detection(X, Y, True)
        total += l
        dXs.append(g)
    dDs = [np.zeros(np.shape(D)) for D in Ds]
    track = 0.0
    for a, b, Tab in _pairs(len(Xs), T):
        l, ga, gb = _pair_tracking(Ds[a], Ds[b], Tab, params, True)
        track += l
        dDs[a] += params.lam * ga
        dDs[b] += params.lam * gb
    return total + params.lam * track, dXs, dDs
