"""Descriptor matching: exhaustive cosine NN with gates, and epipolar-guided rematching."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from ._validation import check_descriptors, check_points2d
from .exceptions import DegenerateConfigurationError
from .geometry import epipolar_distance, estimate_fundamental_ransac, symmetric_epipolar_distance

MATCH_TEXT_HEADER = "# trackadapt matches v1"
MATCH_MAGIC = b"TAMATCH1"


class Match(NamedTuple):
    index_a: int
    index_b: int
    similarity: float


@dataclass(frozen=True)
class MatchOptions:
    cross_check: bool = True
    max_ratio: float = 1.0
    max_distance: float = 1.0  # radians between unit descriptors
    max_error: float = 4.0     # px, guided epipolar gate
    ransac_threshold: float | None = None  # px; None -> max_error
    ransac_iters: int = 2000
    seed: int = 0
    symmetric_gate: bool = False

    def __post_init__(self):
        if not 0 < self.max_ratio <= 1:
            raise ValueError(f"max_ratio must be in (0, 1], got {self.max_ratio}")
        if not self.max_error > 0:
            raise ValueError(f"max_error must be positive, got {self.max_error}")
        if self.max_distance < 0:
            raise ValueError("max_distance must be non-negative")


class GuidedResult(NamedTuple):
    matches: list
    fundamental: np.ndarray | None
    degenerate: bool


def _angle(sim):
    return np.arccos(np.clip(sim, -1.0, 1.0))


def _ratio_ok(S, axis, best, max_ratio):
    """Ratio test on angular distances along ``axis``; vacuous at max_ratio = 1."""
    if max_ratio >= 1.0:
        return np.ones(best.shape, dtype=bool)
    if S.shape[axis] < 2:
        return np.ones(best.shape, dtype=bool)
    part = -np.partition(-S, 1, axis=axis)
    second = part[1] if axis == 0 else part[:, 1]
    return _angle(best) <= max_ratio * _angle(second)


def _match_similarity(S, opts: MatchOptions) -> list[Match]:
    """Gated NN matching on a similarity matrix; ``-inf`` entries are forbidden pairs."""
    na, nb = S.shape
    if na == 0 or nb == 0:
        return []
    nn_ab = np.argmax(S, axis=1)
    best_ab = S[np.arange(na), nn_ab]
    keep = np.isfinite(best_ab)
    keep &= _angle(best_ab) <= opts.max_distance
    keep &= _ratio_ok(S, 1, best_ab, opts.max_ratio)
    if opts.cross_check:
        nn_ba = np.argmax(S, axis=0)
        best_ba = S[nn_ba, np.arange(nb)]
        back_ok = _ratio_ok(S, 0, best_ba, opts.max_ratio)
        keep &= nn_ba[nn_ab] == np.arange(na)
        keep &= back_ok[nn_ab]
    idx = np.nonzero(keep)[0]
    return [Match(int(i), int(nn_ab[i]), float(S[i, nn_ab[i]])) for i in idx]


def match_brute_force(desc_a, desc_b, opts: MatchOptions = MatchOptions()) -> list[Match]:
    """Exhaustive cosine nearest neighbours from a to b.

    A pair (i, j) is kept when j is i's nearest neighbour, the angular
    distance ``arccos(sim)`` is within ``max_distance``, the ratio test on
    angular distances passes and, with ``cross_check``, i is also j's
    nearest neighbour (whose own ratio test must pass too). Ties resolve to
    the lowest index.
    """
    A = check_descriptors(desc_a, "desc_a")
    B = check_descriptors(desc_b, "desc_b")
    if len(A) == 0 or len(B) == 0:
        return []
    if A.shape[1] != B.shape[1]:
        raise ValueError(f"descriptor dimensions differ: {A.shape[1]} vs {B.shape[1]}")
    return _match_similarity(A @ B.T, opts)


def epipolar_gate(F, kps_a, kps_b, max_error, symmetric=False) -> np.ndarray:
    """Boolean (na, nb) matrix of pairs within ``max_error`` px of the epipolar line."""
    pa = check_points2d(kps_a, "kps_a")
    pb = check_points2d(kps_b, "kps_b")
    ia, ib = np.meshgrid(np.arange(len(pa)), np.arange(len(pb)), indexing="ij")
    fn = symmetric_epipolar_distance if symmetric else epipolar_distance
    d = fn(F, pa[ia.ravel()], pb[ib.ravel()])
    return np.asarray(d).reshape(len(pa), len(pb)) <= max_error


def match_guided(kps_a, kps_b, desc_a, desc_b, opts: MatchOptions = MatchOptions()) -> GuidedResult:
    """Brute-force matches -> RANSAC F -> a fresh matching round restricted to the epipolar band.

    The second round replaces the first. When fewer than 8 first-round
    matches exist or RANSAC finds no model, the brute-force matches are
    returned with ``degenerate=True`` and ``fundamental=None``.
    """
    pa = check_points2d(kps_a, "kps_a")
    pb = check_points2d(kps_b, "kps_b")
    A = check_descriptors(desc_a, "desc_a")
    B = check_descriptors(desc_b, "desc_b")
    if len(pa) != len(A) or len(pb) != len(B):
        raise ValueError("keypoint and descriptor counts differ")
    bf = match_brute_force(A, B, opts)
    if len(bf) < 8:
        return GuidedResult(bf, None, True)
    ia = np.array([m.index_a for m in bf])
    ib = np.array([m.index_b for m in bf])
    thr = opts.max_error if opts.ransac_threshold is None else opts.ransac_threshold
    try:
        F, _ = estimate_fundamental_ransac(pa[ia], pb[ib], thr, opts.ransac_iters, opts.seed)
    except DegenerateConfigurationError:
        return GuidedResult(bf, None, True)
    gate = epipolar_gate(F, pa, pb, opts.max_error, opts.symmetric_gate)
    S = np.where(gate, A @ B.T, -np.inf)
    return GuidedResult(_match_similarity(S, opts), F, False)


class MatchPair(NamedTuple):
    image_a: int
    image_b: int
    matches: list


def write_matches_text(path, pairs) -> None:
    """``pair <image_a> <image_b> <count>`` lines, each followed by ``index_a index_b similarity`` rows."""
    lines = [MATCH_TEXT_HEADER]
    for p in pairs:
        lines.append(f"pair {p.image_a} {p.image_b} {len(p.matches)}")
        lines.extend(f"{m.index_a} {m.index_b} {float(m.similarity)!r}" for m in p.matches)
    Path(path).write_text("\n".join(lines) + "\n")


def read_matches_text(path) -> list[MatchPair]:
    pairs: list[MatchPair] = []
    with open(path) as fh:
        rows = [ln.split() for ln in fh if ln.strip() and not ln.startswith("#")]
    k = 0
    while k < len(rows):
        head = rows[k]
        if head[0] != "pair" or len(head) != 4:
            raise ValueError(f"{path}: expected a 'pair' line, got {' '.join(head)!r}")
        a, b, n = int(head[1]), int(head[2]), int(head[3])
        body = rows[k + 1:k + 1 + n]
        if len(body) != n:
            raise ValueError(f"{path}: pair {a} {b} is truncated")
        pairs.append(MatchPair(a, b, [Match(int(r[0]), int(r[1]), float(r[2])) for r in body]))
        k += 1 + n
    return pairs


_REC = np.dtype([("a", "<u4"), ("b", "<u4"), ("sim", "<f8")])


def write_matches_binary(path, pairs) -> None:
    """Magic, u32 pair count, then per pair u32 ids, u64 count and (u32, u32, f64) records."""
    out = [MATCH_MAGIC, struct.pack("<I", len(pairs))]
    for p in pairs:
        rec = np.array([(m.index_a, m.index_b, m.similarity) for m in p.matches], dtype=_REC)
        out.append(struct.pack("<IIQ", p.image_a, p.image_b, len(rec)))
        out.append(rec.tobytes())
    Path(path).write_bytes(b"".join(out))


def read_matches_binary(path) -> list[MatchPair]:
    data = Path(path).read_bytes()
    if data[:8] != MATCH_MAGIC:
        raise ValueError(f"{path}: not a binary match file")
    (count,) = struct.unpack_from("<I", data, 8)
    pos = 12
    pairs = []
    for _ in range(count):
        a, b, n = struct.unpack_from("<IIQ", data, pos)
        pos += 16
        rec = np.frombuffer(data, dtype=_REC, count=n, offset=pos)
        pos += n * _REC.itemsize
        pairs.append(MatchPair(a, b, [Match(int(r["a"]), int(r["b"]), float(r["sim"])) for r in rec]))
    if pos != len(data):
        raise ValueError(f"{path}: {len(data) - pos} trailing bytes")
    return pairs
