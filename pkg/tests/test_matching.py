import math

import numpy as np
import pytest

from trackadapt.geometry import epipolar_distance
from trackadapt.matching import (Match, MatchOptions, MatchPair, epipolar_gate, match_brute_force, match_guided,
                                 read_matches_binary, read_matches_text, write_matches_binary, write_matches_text)

from conftest import two_view_scene


def _unit(rng, n, dim):
    v = rng.normal(size=(n, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _nn(sims):
    best, arg = -math.inf, None
    for j, s in enumerate(sims):
        if s > best:
            best, arg = s, j
    return arg


def _passes_ratio(sims, k, max_ratio):
    if max_ratio >= 1 or len(sims) < 2:
        return True
    rest = [s for j, s in enumerate(sims) if j != k]
    return math.acos(min(1.0, sims[k])) <= max_ratio * math.acos(min(1.0, max(rest)))


def reference_matcher(A, B, cross_check=True, max_ratio=1.0, max_distance=1.0):
    """Double-loop matcher over Python floats."""
    A, B = A.tolist(), B.tolist()
    S = [[math.fsum(x * y for x, y in zip(a, b)) for b in B] for a in A]
    cols = [[S[i][j] for i in range(len(A))] for j in range(len(B))]
    out = []
    for i, row in enumerate(S):
        j = _nn(row)
        if math.acos(max(-1.0, min(1.0, row[j]))) > max_distance or not _passes_ratio(row, j, max_ratio):
            continue
        if cross_check and (_nn(cols[j]) != i or not _passes_ratio(cols[j], i, max_ratio)):
            continue
        out.append((i, j))
    return out


def _pairs(matches):
    return [(m.index_a, m.index_b) for m in matches]


@pytest.mark.parametrize("seed", range(50))
def test_brute_force_equals_double_loop(seed):
    rng = np.random.default_rng(seed)
    dim = int(rng.choice([2, 3, 8, 32]))
    A, B = _unit(rng, 100, dim), _unit(rng, int(rng.integers(1, 120)), dim)
    cc = bool(seed % 2)
    ratio = [1.0, 0.95, 0.8][seed % 3]
    dist = [1.0, 0.6, math.pi][seed % 3]
    got = match_brute_force(A, B, MatchOptions(cross_check=cc, max_ratio=ratio, max_distance=dist))
    assert _pairs(got) == reference_matcher(A, B, cc, ratio, dist)


def test_orthonormal_identity():
    Q = np.linalg.qr(np.random.default_rng(0).normal(size=(16, 16)))[0]
    got = match_brute_force(Q, Q)
    assert _pairs(got) == [(i, i) for i in range(16)]
    assert np.allclose([m.similarity for m in got], 1)


def test_cross_check_drops_one_sided_pair():
    a0 = np.array([1.0, 0.0])
    b0 = np.array([np.cos(0.3), np.sin(0.3)])
    a1 = np.array([np.cos(0.25), np.sin(0.25)])
    A, B = np.stack([a0, a1]), b0[None]
    # both a0 and a1 pick b0, but b0 picks a1
    assert _pairs(match_brute_force(A, B)) == [(1, 0)]
    assert _pairs(match_brute_force(A, B, MatchOptions(cross_check=False))) == [(0, 0), (1, 0)]


def test_empty_inputs_and_validation():
    assert match_brute_force(np.zeros((0, 4)), _unit(np.random.default_rng(0), 3, 4)) == []
    with pytest.raises(ValueError):
        MatchOptions(max_ratio=1.5)
    with pytest.raises(ValueError):
        MatchOptions(max_error=0)


@pytest.mark.parametrize("seed", range(5))
def test_swap_symmetry_and_one_to_one(seed):
    rng = np.random.default_rng(seed)
    A, B = _unit(rng, 60, 4), _unit(rng, 50, 4)
    ab = set(_pairs(match_brute_force(A, B)))
    ba = {(i, j) for j, i in _pairs(match_brute_force(B, A))}
    assert ab == ba
    assert len({i for i, _ in ab}) == len(ab) == len({j for _, j in ab})


def test_raising_max_distance_never_removes():
    rng = np.random.default_rng(3)
    A, B = _unit(rng, 80, 3), _unit(rng, 80, 3)
    prev = set()
    for d in np.linspace(0, math.pi, 12):
        cur = set(_pairs(match_brute_force(A, B, MatchOptions(max_distance=d))))
        assert prev <= cur
        prev = cur


def _shared_descriptors(rng, n, dim=32):
    D = _unit(rng, n, dim)
    return D, D.copy()


def test_guided_superset_on_perfect_descriptors():
    rng = np.random.default_rng(1)
    xa, xb, _ = two_view_scene(rng, 120)
    Da, Db = _shared_descriptors(rng, 120)
    # shuffle b so identity indices are not trivially aligned
    perm = rng.permutation(120)
    xb, Db = xb[perm], Db[perm]
    bf = set(_pairs(match_brute_force(Da, Db)))
    res = match_guided(xa, xb, Da, Db)
    assert not res.degenerate
    got = _pairs(res.matches)
    assert bf <= set(got)
    ia, ib = np.array(got).T
    assert epipolar_distance(res.fundamental, xa[ia], xb[ib]).max() < 1e-3


def test_guided_recovers_ratio_rejected_matches():
    rng = np.random.default_rng(2)
    xa, xb, F = two_view_scene(rng, 80)
    Da, Db = _shared_descriptors(rng, 80)
    # a_i sits at a small angle from b_i; a distractor in b, far off the epipolar line, sits at almost
    # the same angle from a_i, so the ratio test rejects a_i in the unrestricted round
    extra_xy, extra_d = [], []
    for i in range(15):
        while True:
            p = rng.uniform([0, 0], [640, 480])
            if epipolar_distance(F, xa[i], p) > 40:
                break
        e = rng.normal(0, 0.02, Da.shape[1])
        f = rng.normal(size=Da.shape[1])
        f -= (f @ e) / (e @ e) * e
        f *= 0.1 * np.linalg.norm(e) / np.linalg.norm(f)
        a = Db[i] + e
        Da[i] = a / np.linalg.norm(a)
        d = Db[i] + 2 * e + f
        extra_xy.append(p)
        extra_d.append(d / np.linalg.norm(d))
    xb2, Db2 = np.vstack([xb, extra_xy]), np.vstack([Db, extra_d])
    opts = MatchOptions(max_ratio=0.8)
    bf = set(_pairs(match_brute_force(Da, Db2, opts)))
    assert not any(i < 15 for i, _ in bf)
    res = match_guided(xa, xb2, Da, Db2, opts)
    got = set(_pairs(res.matches))
    assert bf <= got
    assert {(i, i) for i in range(15)} <= got


def test_epipolar_gate_four_pixels():
    rng = np.random.default_rng(4)
    xa, xb, F = two_view_scene(rng, 5)
    line = F @ np.append(xa[0], 1)
    normal = line[:2] / np.linalg.norm(line[:2])
    cand = np.stack([xb[0] + 3.9 * normal, xb[0] + 5.0 * normal, xb[0]])
    assert np.allclose(epipolar_distance(F, np.repeat(xa[:1], 3, 0), cand), [3.9, 5.0, 0.0], atol=1e-6)
    assert epipolar_gate(F, xa[:1], cand, 4.0).tolist() == [[True, False, True]]


def test_guided_excludes_candidate_five_pixels_off():
    rng = np.random.default_rng(5)
    xa, xb, F = two_view_scene(rng, 60)
    line = F @ np.append(xa[0], 1)
    normal = line[:2] / np.linalg.norm(line[:2])
    xb = xb.copy()
    xb[0] += 5.0 * normal
    Da, Db = _shared_descriptors(rng, 60)
    assert (0, 0) in _pairs(match_brute_force(Da, Db))
    res = match_guided(xa, xb, Da, Db, MatchOptions(max_error=4))
    got = _pairs(res.matches)
    assert all(i != 0 for i, _ in got) and len(got) == 59
    ia, ib = np.array(got).T
    assert epipolar_distance(res.fundamental, xa[ia], xb[ib]).max() <= 4


def test_seven_matches_are_degenerate():
    rng = np.random.default_rng(6)
    xa, xb, _ = two_view_scene(rng, 7)
    Q = np.linalg.qr(rng.normal(size=(8, 8)))[0][:7]
    res = match_guided(xa, xb, Q, Q)
    assert res.degenerate and res.fundamental is None
    assert _pairs(res.matches) == [(i, i) for i in range(7)]


def test_guided_rejects_count_mismatch():
    with pytest.raises(ValueError):
        match_guided(np.zeros((3, 2)), np.zeros((3, 2)), _unit(np.random.default_rng(0), 2, 4),
                     _unit(np.random.default_rng(1), 3, 4))


def _some_pairs():
    return [MatchPair(1, 2, [Match(0, 3, 0.5), Match(4, 1, 1 / 3)]), MatchPair(1, 3, []),
            MatchPair(2, 3, [Match(7, 7, -0.25)])]


def test_text_format_round_trip(tmp_path):
    write_matches_text(tmp_path / "m.txt", _some_pairs())
    assert read_matches_text(tmp_path / "m.txt") == _some_pairs()
    (tmp_path / "bad.txt").write_text("pair 1 2 3\n0 1 0.5\n")
    with pytest.raises(ValueError, match="truncated"):
        read_matches_text(tmp_path / "bad.txt")


def test_binary_format_round_trip(tmp_path):
    write_matches_binary(tmp_path / "m.bin", _some_pairs())
    assert read_matches_binary(tmp_path / "m.bin") == _some_pairs()
    data = (tmp_path / "m.bin").read_bytes()
    (tmp_path / "x.bin").write_bytes(data + b"\0")
    with pytest.raises(ValueError, match="trailing"):
        read_matches_binary(tmp_path / "x.bin")
