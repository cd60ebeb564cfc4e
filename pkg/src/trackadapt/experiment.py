"""Desk-scale training experiment on a synthetic tube sequence.

Frames are split into training frames and held-out frames (every
``holdout_every``-th frame). The network is trained on reliable tracks
restricted to the training frames, then scored on held-out frame pairs by
descriptor matching accuracy: the fraction of ground-truth correspondences
recovered as mutual nearest neighbours among all correspondences of the
pair.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .loss import LossParams, sample_descriptors
from .refnet import NetWeights, TrainConfig, forward, train
from .supervision import AugmentConfig, BatchSampler, preprocess_frame
from .synth import SceneConfig, generate_scene
from .tracks import ReliableTrack, ReliableTrackExtractor


@dataclass(frozen=True)
class DeskConfig:
    scene: SceneConfig = field(default_factory=lambda: SceneConfig(n_frames=30, dropout=0.2, step=0.04))
    holdout_every: int = 3
    max_gap: int = 9          # held-out pairs at most this many frames apart
    n_steps: int = 800
    batch_n: int = 4
    learning_rate: float = 4e-3
    optimizer: str = "adam"
    loss: LossParams = field(default_factory=lambda: LossParams(lam=10.0, lam_t=10.0))
    compute_dtype: str = "float32"
    augment: AugmentConfig | None = None
    target: int = 256


@dataclass
class DeskResult:
    seed: int
    baseline: float
    trained: float
    n_correspondences: int
    loss_history: list
    seconds: float

    @property
    def gain(self) -> float:
        return self.trained - self.baseline


def mnn_accuracy(desc_a, desc_b) -> float:
    """Fraction of rows i whose mutual nearest neighbour is row i of the other side."""
    S = desc_a @ desc_b.T
    nab = S.argmax(axis=1)
    nba = S.argmax(axis=0)
    idx = np.arange(len(S))
    return float(np.mean((nab == idx) & (nba[nab] == idx)))


def _restrict(tracks, keep):
    out = []
    for t in tracks:
        frames = tuple(f for f in t.frames if f.image_id in keep)
        if frames:
            out.append(ReliableTrack(t.point3d_id, frames))
    return out


class _Prepared:
    def __init__(self, scene, config: DeskConfig):
        self.images, self.transforms = {}, {}
        for img in scene.model.images.values():
            gray, tf = preprocess_frame(scene.frames[img.id - 1], config.target)
            self.images[img.id] = gray
            self.transforms[img.id] = tf
        ids = sorted(self.images)
        self.test_ids = [i for k, i in enumerate(ids) if k % config.holdout_every == config.holdout_every - 1]
        self.train_ids = [i for i in ids if i not in self.test_ids]
        self.pairs = []
        test = set(self.test_ids)
        for (a, b), cs in sorted(scene.correspondences.items()):
            if a in test and b in test and 0 < b - a <= config.max_gap:
                xa = self.transforms[a].forward(cs.xy_a)
                xb = self.transforms[b].forward(cs.xy_b)
                ok = self.transforms[a].contains(xa) & self.transforms[b].contains(xb)
                if ok.sum() >= 2:
                    self.pairs.append((a, b, xa[ok], xb[ok]))


def heldout_accuracy(w: NetWeights, prepared: _Prepared) -> tuple[float, int]:
    """Correspondence-weighted MNN accuracy over the held-out pairs."""
    fields = {i: forward(w, prepared.images[i]).descriptors for i in prepared.test_ids}
    hits = total = 0
    for a, b, xa, xb in prepared.pairs:
        acc = mnn_accuracy(sample_descriptors(fields[a], xa), sample_descriptors(fields[b], xb))
        hits += acc * len(xa)
        total += len(xa)
    return (hits / total if total else float("nan")), total


def run_desk_experiment(seed: int, config: DeskConfig = DeskConfig(), log=None) -> DeskResult:
    start = time.perf_counter()
    scene = generate_scene(config.scene, seed)
    prep = _Prepared(scene, config)
    tracks = _restrict(ReliableTrackExtractor().fit(scene.model).tracks_, set(prep.train_ids))
    sampler = BatchSampler([tracks], {i: prep.transforms[i] for i in prep.train_ids},
                           {i: prep.images[i] for i in prep.train_ids}, config.batch_n,
                           config.augment, target=config.target)
    w0 = NetWeights.init(seed)
    baseline, n_corr = heldout_accuracy(w0, prep)
    tc = TrainConfig(learning_rate=config.learning_rate, n_steps=config.n_steps, batch_n=config.batch_n,
                     seed=seed, loss=config.loss, augment=config.augment, optimizer=config.optimizer,
                     compute_dtype=config.compute_dtype)
    w, history = train(sampler, tc, w0, log=log)
    trained, _ = heldout_accuracy(w, prep)
    return DeskResult(seed, baseline, trained, n_corr, history, time.perf_counter() - start)
