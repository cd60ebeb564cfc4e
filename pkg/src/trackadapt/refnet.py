"""Small numpy detector/descriptor network trained with the tracking objective.

Architecture (per image, H x W input with H, W multiples of 8):

    conv3x3(1 -> c1) softplus avgpool2
    conv3x3(c1 -> c2) softplus avgpool2
    conv3x3(c2 -> c3) softplus avgpool2
    conv3x3(c3 -> c4) softplus
    +-- 1x1 conv -> 65 detection logits per 8x8 cell
    +-- 1x1 conv -> dim descriptor channels, unit-normalized per cell

The forward and reverse passes are hand-written numpy and run in float64
by default, so gradients can be checked against finite differences;
training can switch the layers to float32 for speed.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_gray_image
from .exceptions import TrainingDivergedError
from .loss import CELL, LossParams, grad_loss, sample_descriptors
from .supervision import AugmentConfig

DEFAULT_CHANNELS = (8, 16, 32, 64)
N_DET = CELL * CELL + 1
CHECKPOINT_MAGIC = b"TACKPT01"
CHECKPOINT_VERSION = 1
FEATURE_MAGIC = b"TAFEAT01"


# ---------------------------------------------------------------------------
# weights


@dataclass
class NetWeights:
    params: dict
    channels: tuple = DEFAULT_CHANNELS
    descriptor_dim: int = 256

    @classmethod
    def init(cls, seed=0, channels=DEFAULT_CHANNELS, descriptor_dim=256) -> "NetWeights":
        rng = np.random.default_rng(seed)
        params = {}
        cin = 1
        for k, cout in enumerate(channels, 1):
            fan_in = 9 * cin
            params[f"conv{k}_w"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), (3, 3, cin, cout))
            params[f"conv{k}_b"] = np.zeros(cout)
            cin = cout
        params["det_w"] = rng.normal(0.0, np.sqrt(1.0 / cin), (cin, N_DET))
        params["det_b"] = np.zeros(N_DET)
        params["desc_w"] = rng.normal(0.0, np.sqrt(1.0 / cin), (cin, descriptor_dim))
        params["desc_b"] = np.zeros(descriptor_dim)
        return cls(params, tuple(channels), descriptor_dim)

    def copy(self) -> "NetWeights":
        return NetWeights({k: v.copy() for k, v in self.params.items()}, self.channels, self.descriptor_dim)

    def n_layers(self) -> int:
        return len(self.channels)

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.params.values())


# ---------------------------------------------------------------------------
# layers (NHWC)


def _softplus(x):
    """Softplus and its derivative (the logistic function), sharing one exp."""
    e = np.exp(-np.abs(x))
    inv = 1.0 / (1.0 + e)
    return np.maximum(x, 0.0) + np.log1p(e), np.where(x >= 0, inv, e * inv)


def _conv3x3(x, w, b):
    n, h, wd, cin = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = sliding_window_view(xp, (3, 3), axis=(1, 2))  # n,h,w,cin,3,3
    cols = cols.transpose(0, 1, 2, 4, 5, 3).reshape(n * h * wd, 9 * cin)
    out = cols @ w.reshape(9 * cin, -1) + b
    return out.reshape(n, h, wd, -1), cols


def _conv3x3_backward(dout, cols, w, x_shape, need_dx=True):
    n, h, wd, cin = x_shape
    cout = w.shape[-1]
    d2 = dout.reshape(-1, cout)
    dw = (cols.T @ d2).reshape(w.shape)
    db = d2.sum(axis=0)
    if not need_dx:
        return None, dw, db
    dcols = (d2 @ w.reshape(9 * cin, cout).T).reshape(n, h, wd, 3, 3, cin)
    dxp = np.zeros((n, h + 2, wd + 2, cin), dtype=dcols.dtype)
    for ky in range(3):
        for kx in range(3):
            dxp[:, ky:ky + h, kx:kx + wd, :] += dcols[:, :, :, ky, kx, :]
    return dxp[:, 1:-1, 1:-1, :], dw, db


def _avgpool2(x):
    n, h, w, c = x.shape
    return x.reshape(n, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4))


def _avgpool2_backward(dout):
    return np.repeat(np.repeat(dout, 2, axis=1), 2, axis=2) * 0.25


def _scores_from_logits(logits_nhwc):
    """Per-cell softmax, dustbin dropped, 64 positions scattered to pixels."""
    n, hc, wc, _ = logits_nhwc.shape
    m = logits_nhwc.max(axis=3, keepdims=True)
    e = np.exp(logits_nhwc - m)
    p = e / e.sum(axis=3, keepdims=True)
    s = p[..., :CELL * CELL].reshape(n, hc, wc, CELL, CELL).transpose(0, 1, 3, 2, 4)
    return s.reshape(n, hc * CELL, wc * CELL), p


class _Cache(NamedTuple):
    layers: list
    feat: np.ndarray
    desc_raw: np.ndarray
    desc_norm: np.ndarray
    params: dict


def _forward_batch(w: NetWeights, images: np.ndarray, dtype=np.float64):
    P = w.params if dtype == np.float64 else {k: v.astype(dtype) for k, v in w.params.items()}
    x = images.astype(dtype, copy=False)[..., None]
    layers = []
    L = w.n_layers()
    for k in range(1, L + 1):
        pre, cols = _conv3x3(x, P[f"conv{k}_w"], P[f"conv{k}_b"])
        act, slope = _softplus(pre)
        pooled = _avgpool2(act) if k < L else act
        layers.append((x.shape, cols, slope))
        x = pooled
    feat = x
    logits = feat @ P["det_w"] + P["det_b"]
    raw = feat @ P["desc_w"] + P["desc_b"]
    norm = np.linalg.norm(raw, axis=3, keepdims=True)
    desc = raw / norm
    return logits, desc, _Cache(layers, feat, raw, norm, P)


def _backward_batch(w: NetWeights, cache: _Cache, dlogits, ddesc):
    grads = {}
    P = cache.params
    dtype = cache.feat.dtype
    dlogits = dlogits.astype(dtype, copy=False)
    ddesc = ddesc.astype(dtype, copy=False)
    feat = cache.feat
    c = feat.shape[-1]
    f2 = feat.reshape(-1, c)
    grads["det_w"] = f2.T @ dlogits.reshape(-1, N_DET)
    grads["det_b"] = dlogits.reshape(-1, N_DET).sum(axis=0)
    d = cache.desc_raw / cache.desc_norm
    draw = (ddesc - d * np.sum(d * ddesc, axis=3, keepdims=True)) / cache.desc_norm
    grads["desc_w"] = f2.T @ draw.reshape(-1, w.descriptor_dim)
    grads["desc_b"] = draw.reshape(-1, w.descriptor_dim).sum(axis=0)
    dx = dlogits @ P["det_w"].T + draw @ P["desc_w"].T
    L = w.n_layers()
    for k in range(L, 0, -1):
        x_shape, cols, slope = cache.layers[k - 1]
        if k < L:
            dx = _avgpool2_backward(dx)
        dx, grads[f"conv{k}_w"], grads[f"conv{k}_b"] = _conv3x3_backward(
            dx * slope, cols, P[f"conv{k}_w"], x_shape, need_dx=k > 1)
    return {k: v.astype(np.float64, copy=False) for k, v in grads.items()}


class ForwardOutput(NamedTuple):
    logits: np.ndarray       # (65, Hc, Wc)
    descriptors: np.ndarray  # (Hc, Wc, dim), unit norm per cell
    scores: np.ndarray       # (H, W)


def forward(w: NetWeights, image, input_size: int | None = 256) -> ForwardOutput:
    """Run the network on one grayscale image in [0, 1].

    ``input_size`` pins the accepted resolution (``None`` accepts any size
    that is a multiple of 8); resizing is the caller's job.
    """
    img = check_gray_image(image, size=input_size)
    if img.shape[0] % CELL or img.shape[1] % CELL:
        raise ValueError(f"input {img.shape} is not a multiple of {CELL}")
    logits, desc, _ = _forward_batch(w, img[None])
    scores, _ = _scores_from_logits(logits)
    return ForwardOutput(logits[0].transpose(2, 0, 1), desc[0], scores[0])


def backward(w: NetWeights, sample, params: LossParams = LossParams(), dtype=np.float64):
    """Loss on a training sample and its gradient for every weight tensor.

    ``dtype=np.float32`` runs the network layers in single precision (the
    loss itself stays in double); gradients are returned as float64.
    """
    images = np.asarray(sample.images, dtype=np.float64)
    logits, desc, cache = _forward_batch(w, images, dtype)
    Xs = [lg.transpose(2, 0, 1) for lg in logits]
    loss, dXs, dDs = grad_loss(Xs, list(desc), list(sample.heatmaps), sample.correspondences, params)
    dlogits = np.stack([g.transpose(1, 2, 0) for g in dXs])
    grads = _backward_batch(w, cache, dlogits, np.stack(dDs))
    return loss, grads


def sample_loss(w: NetWeights, sample, params: LossParams = LossParams()) -> float:
    from .loss import loss_total
    logits, desc, _ = _forward_batch(w, np.asarray(sample.images, dtype=np.float64))
    return loss_total([lg.transpose(2, 0, 1) for lg in logits], list(desc), list(sample.heatmaps),
                      sample.correspondences, params)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    learning_rate: float = 1e-5
    n_steps: int = 1000
    batch_n: object = 4
    seed: int = 0
    loss: LossParams = field(default_factory=LossParams)
    augment: AugmentConfig | None = field(default_factory=AugmentConfig)
    checkpoint_every: int = 0
    checkpoint_dir: str | None = None
    optimizer: str = "sgd"
    momentum: float = 0.0
    compute_dtype: str = "float64"

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning rate must be positive")
        if self.n_steps < 0:
            raise ValueError("n_steps must be non-negative")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.compute_dtype not in ("float32", "float64"):
            raise ValueError(f"compute_dtype must be float32 or float64, got {self.compute_dtype!r}")


class _Optimizer:
    def __init__(self, kind, lr, momentum):
        self.kind, self.lr, self.momentum = kind, lr, momentum
        self.state: dict = {}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        for k, g in grads.items():
            if self.kind == "sgd":
                if self.momentum:
                    v = self.state.get(k, 0.0) * self.momentum + g
                    self.state[k] = v
                    g = v
                params[k] -= self.lr * g
            else:
                m, v = self.state.get(k, (0.0, 0.0))
                m = 0.9 * m + 0.1 * g
                v = 0.999 * v + 0.001 * g * g
                self.state[k] = (m, v)
                mh = m / (1 - 0.9 ** self.t)
                vh = v / (1 - 0.999 ** self.t)
                params[k] -= self.lr * mh / (np.sqrt(vh) + 1e-8)


def _sample_stream(data):
    if hasattr(data, "sample"):
        step = 0
        while True:
            yield data.sample(step)
            step += 1
    yield from data


def train(data, config: TrainConfig, weights: NetWeights | None = None, log=None):
    """Gradient descent on the tracking objective.

    ``data`` is a BatchSampler (sampled with seeds 0, 1, 2, ...) or any
    iterable of TrainingSample. Returns ``(weights, loss_history)``; the
    input weights are not modified.
    """
    w = (weights or NetWeights.init(config.seed)).copy()
    history: list[float] = []
    if config.n_steps == 0:
        return w, history
    opt = _Optimizer(config.optimizer, config.learning_rate, config.momentum)
    stream = _sample_stream(data)
    for step in range(config.n_steps):
        try:
            sample = next(stream)
        except StopIteration:
            break
        loss, grads = backward(w, sample, config.loss, np.dtype(config.compute_dtype).type)
        if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise TrainingDivergedError(f"non-finite loss or gradient at step {step}")
        opt.step(w.params, grads)
        history.append(loss)
        if log is not None:
            log(step, loss)
        if config.checkpoint_every and config.checkpoint_dir and (step + 1) % config.checkpoint_every == 0:
            save_checkpoint(w, Path(config.checkpoint_dir) / f"step_{step + 1:07d}.ckpt")
    return w, history


# ---------------------------------------------------------------------------
# inference


def detect(scores, threshold=0.0005, nms_radius=4, max_keypoints=10000):
    """Greedy square NMS over a score map.

    Repeatedly keeps the best remaining pixel with score >= ``threshold`` and
    suppresses every pixel within Chebyshev distance ``nms_radius``. Returns
    ``(xy, scores)``, sorted by decreasing score; ``xy`` are pixel centres
    ``(col + 0.5, row + 0.5)``.
    """
    s = np.asarray(scores, dtype=np.float64)
    h, w = s.shape
    rows, cols = np.nonzero(s >= threshold)
    vals = s[rows, cols]
    order = np.lexsort((cols, rows, -vals))
    suppressed = np.zeros((h, w), dtype=bool)
    keep = []
    r = int(nms_radius)
    for k in order:
        if len(keep) >= max_keypoints:
            break
        y, x = rows[k], cols[k]
        if suppressed[y, x]:
            continue
        keep.append(k)
        suppressed[max(0, y - r):y + r + 1, max(0, x - r):x + r + 1] = True
    keep = np.asarray(keep, dtype=np.int64)
    xy = np.stack([cols[keep] + 0.5, rows[keep] + 0.5], axis=1).astype(np.float64).reshape(-1, 2)
    return xy, vals[keep]


def describe(D, keypoints) -> np.ndarray:
    """Unit descriptors bilinearly sampled from the cell grid at pixel coordinates."""
    xy = np.asarray(keypoints, dtype=np.float64).reshape(-1, 2)
    if not len(xy):
        return np.zeros((0, np.shape(D)[-1]))
    return sample_descriptors(D, xy)


class Features(NamedTuple):
    xy: np.ndarray
    scores: np.ndarray
    descriptors: np.ndarray


# ---------------------------------------------------------------------------
# file formats


def save_checkpoint(w: NetWeights, path, meta: dict | None = None) -> None:
    """Versioned header, JSON config, shape table, then little-endian float32 tensors.

    ``meta`` is free-form JSON stored in the config block (training settings).
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cfg = {"channels": list(w.channels), "descriptor_dim": w.descriptor_dim,
           "activation": "softplus", "pool": "avg2"}
    if meta:
        cfg["meta"] = meta
    cfg = json.dumps(cfg, sort_keys=True).encode()
    names = list(w.params)
    out = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(cfg)), cfg,
           struct.pack("<I", len(names))]
    for name in names:
        arr = w.params[name]
        nb = name.encode()
        out.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim)
                   + struct.pack(f"<{arr.ndim}I", *arr.shape))
    for name in names:
        out.append(np.ascontiguousarray(w.params[name], dtype="<f4").tobytes())
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(out))
    tmp.replace(path)


def _checkpoint_header(data, path):
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    if len(data) < 16:
        raise ValueError(f"{path}: truncated checkpoint header")
    version, cfg_len = struct.unpack_from("<II", data, 8)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    return json.loads(data[16:16 + cfg_len]), 16 + cfg_len


def checkpoint_meta(path) -> dict:
    """The ``meta`` block stored by :func:`save_checkpoint` (empty if none)."""
    cfg, _ = _checkpoint_header(Path(path).read_bytes(), path)
    return cfg.get("meta", {})


def load_checkpoint(path) -> NetWeights:
    data = Path(path).read_bytes()
    cfg, pos = _checkpoint_header(data, path)
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    table = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + nlen].decode()
        pos += nlen
        (ndim,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        table.append((name, shape))
    params = {}
    for name, shape in table:
        n = int(np.prod(shape))
        params[name] = np.frombuffer(data, dtype="<f4", count=n, offset=pos).astype(np.float64).reshape(shape)
        pos += 4 * n
    if pos != len(data):
        raise ValueError(f"{path}: {len(data) - pos} trailing bytes")
    return NetWeights(params, tuple(cfg["channels"]), int(cfg["descriptor_dim"]))


def save_features(path, features: Features) -> None:
    """Magic, u64 count, u32 dim, then per keypoint f64 x, y, score and f32 descriptor."""
    n, dim = features.descriptors.shape if len(features.xy) else (0, features.descriptors.shape[-1])
    rec = np.dtype([("x", "<f8"), ("y", "<f8"), ("score", "<f8"), ("desc", "<f4", (dim,))])
    arr = np.empty(n, dtype=rec)
    arr["x"], arr["y"], arr["score"] = features.xy[:, 0], features.xy[:, 1], features.scores
    arr["desc"] = features.descriptors
    Path(path).write_bytes(FEATURE_MAGIC + struct.pack("<QI", n, dim) + arr.tobytes())


def load_features(path) -> Features:
    data = Path(path).read_bytes()
    if data[:8] != FEATURE_MAGIC:
        raise ValueError(f"{path}: not a feature file")
    n, dim = struct.unpack_from("<QI", data, 8)
    rec = np.dtype([("x", "<f8"), ("y", "<f8"), ("score", "<f8"), ("desc", "<f4", (dim,))])
    arr = np.frombuffer(data, dtype=rec, count=n, offset=20)
    return Features(np.stack([arr["x"], arr["y"]], axis=1).reshape(-1, 2), arr["score"].copy(),
                    arr["desc"].astype(np.float64).reshape(n, dim))


# ---------------------------------------------------------------------------
# estimator


class SuperPointE(BaseEstimator, TransformerMixin):
    """Detector/descriptor with fit (train on samples) and transform (extract features).

    ``fit(X)`` accepts a BatchSampler or an iterable of TrainingSample.
    ``transform(images)`` returns one :class:`Features` per 2D image.
    """

    def __init__(self, channels=DEFAULT_CHANNELS, descriptor_dim=256, input_size=256,
                 learning_rate=1e-5, n_steps=1000, optimizer="sgd", momentum=0.0,
                 lam=1.0, lam_t=1.0, m_p=1.0, m_n=0.2, keypoint_threshold=0.0005,
                 nms_radius=4, max_keypoints=10000, checkpoint_every=0, checkpoint_dir=None,
                 random_state=0, warm_start=False):
        self.channels = channels
        self.descriptor_dim = descriptor_dim
        self.input_size = input_size
        self.learning_rate = learning_rate
        self.n_steps = n_steps
        self.optimizer = optimizer
        self.momentum = momentum
        self.lam = lam
        self.lam_t = lam_t
        self.m_p = m_p
        self.m_n = m_n
        self.keypoint_threshold = keypoint_threshold
        self.nms_radius = nms_radius
        self.max_keypoints = max_keypoints
        self.checkpoint_every = checkpoint_every
        self.checkpoint_dir = checkpoint_dir
        self.random_state = random_state
        self.warm_start = warm_start

    def _init_weights(self):
        return NetWeights.init(self.random_state, tuple(self.channels), self.descriptor_dim)

    def train_config(self) -> TrainConfig:
        return TrainConfig(learning_rate=self.learning_rate, n_steps=self.n_steps, seed=self.random_state,
                           loss=LossParams(self.lam, self.lam_t, self.m_p, self.m_n), augment=None,
                           checkpoint_every=self.checkpoint_every, checkpoint_dir=self.checkpoint_dir,
                           optimizer=self.optimizer, momentum=self.momentum)

    def fit(self, X, y=None):
        start = self.weights_ if self.warm_start and hasattr(self, "weights_") else self._init_weights()
        self.weights_, history = train(X, self.train_config(), start)
        self.loss_history_ = (getattr(self, "loss_history_", []) if self.warm_start else []) + history
        return self

    def _weights(self):
        if hasattr(self, "weights_"):
            return self.weights_
        # an untrained network is a valid (baseline) extractor
        self.weights_ = self._init_weights()
        self.loss_history_ = []
        return self.weights_

    def forward(self, image) -> ForwardOutput:
        return forward(self._weights(), image, self.input_size)

    def extract(self, image) -> Features:
        out = self.forward(image)
        xy, scores = detect(out.scores, self.keypoint_threshold, self.nms_radius, self.max_keypoints)
        return Features(xy, scores, describe(out.descriptors, xy))

    def transform(self, X):
        return [self.extract(img) for img in X]

    def load(self, path) -> "SuperPointE":
        self.weights_ = load_checkpoint(path)
        self.channels = self.weights_.channels
        self.descriptor_dim = self.weights_.descriptor_dim
        self.loss_history_ = []
        return self

    def save(self, path) -> None:
        check_is_fitted(self, "weights_")
        save_checkpoint(self.weights_, path)


def with_loss(config: TrainConfig, **changes) -> TrainConfig:
    return replace(config, loss=replace(config.loss, **changes))
