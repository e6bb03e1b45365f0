"""Geometric verification: ratio-test matching, DLT homography, seeded RANSAC.

A candidate reference image is scored by matching its descriptors against the
query with the nearest/second-nearest distance ratio test, then counting the
correspondences consistent with a RANSAC-estimated planar homography. All
randomness is explicitly seeded; equal inputs and equal seeds give identical
results regardless of thread count.
"""

from __future__ import annotations

import hashlib
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .features import DescriptorSet

SAMPLE_SIZE = 4
COLLINEARITY_AREA_EPS = 1e-9
_W_EPS = 1e-12
_DET2_EPS = 1e-12

#: Ratio thresholds >= 1 never reject a match, because d1/d2 <= 1 by
#: construction; 1.8 is kept as a named preset for reproducing that
#: filter-disabled behavior.
ACCEPT_ALL_RATIO_THRESHOLD = 1.8


class InsufficientCorrespondencesError(ValueError):
    """Fewer point pairs than the minimum the estimator needs."""


class DegenerateConfigurationError(ValueError):
    """The point configuration does not determine a homography."""


class PointAtInfinityError(ValueError):
    """A projected point has a vanishing homogeneous w component."""


@dataclass(frozen=True)
class MatchPair:
    """One accepted correspondence from the ratio test.

    d1/d2 are distances to the nearest and second-nearest reference
    descriptors; ratio is d1/d2.
    """

    query_index: int
    ref_index: int
    d1: float
    d2: float
    ratio: float


@dataclass(frozen=True, eq=False)
class Homography:
    """A 3x3 projective map, canonically scaled.

    The matrix is normalized to unit Frobenius norm with the largest-
    magnitude entry positive, removing the projective scale ambiguity so
    homographies can be compared directly.
    """

    matrix: np.ndarray

    def __post_init__(self) -> None:
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (3, 3):
            raise ValueError(f"homography must be 3x3, got shape {m.shape}")
        norm = float(np.linalg.norm(m))
        if not math.isfinite(norm) or norm == 0.0:
            raise ValueError("homography matrix is zero or non-finite")
        m = m / norm
        flat = m.reshape(-1)
        if flat[np.argmax(np.abs(flat))] < 0:
            m = -m
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Project (N, 2) points through the homography (perspective divide)."""
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        q = pts @ self.matrix[:, :2].T + self.matrix[:, 2]
        w = q[:, 2]
        if np.any(np.abs(w) <= _W_EPS):
            raise PointAtInfinityError("projected point has w ~ 0")
        return q[:, :2] / w[:, None]


IDENTITY_HOMOGRAPHY = Homography(np.eye(3))


@dataclass(frozen=True)
class VerificationResult:
    """Outcome of geometric verification for one candidate.

    inlier_indices index into the match list the verifier was given;
    mean_reproj_error_px is over inliers only (inf when there are none).
    """

    homography: Homography
    inlier_indices: tuple[int, ...]
    inlier_count: int
    mean_reproj_error_px: float


@dataclass(frozen=True)
class MatchConfig:
    """Knobs for ratio matching and RANSAC verification.

    The default ratio_threshold 0.8 performs standard distinctiveness
    filtering; ACCEPT_ALL_RATIO_THRESHOLD (1.8) disables it. Iterations are
    fixed rather than adaptive so runtime and results are reproducible.
    """

    ratio_threshold: float = 0.8
    ransac_iterations: int = 2000
    inlier_threshold_px: float = 3.0
    min_inliers: int = 12
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if not (self.ratio_threshold > 0):
            raise ValueError(f"ratio_threshold must be > 0, got {self.ratio_threshold!r}")
        if self.ransac_iterations < 1:
            raise ValueError(f"ransac_iterations must be >= 1, got {self.ransac_iterations!r}")
        if not (self.inlier_threshold_px > 0):
            raise ValueError(
                f"inlier_threshold_px must be > 0, got {self.inlier_threshold_px!r}"
            )


def ratio_match(
    query: DescriptorSet, reference: DescriptorSet, threshold: float = 0.8
) -> list[MatchPair]:
    """Match query descriptors to a reference set with the ratio test.

    For every query descriptor the nearest and second-nearest reference
    descriptors are found by exhaustive Euclidean search; the pair is kept
    iff d1/d2 < threshold. At most one pair per query descriptor. A
    reference with fewer than two descriptors yields no matches, as does a
    second-nearest distance of exactly zero (the match is not distinctive).
    """
    q = query.vectors.astype(np.float64)
    r = reference.vectors.astype(np.float64)
    if len(q) == 0 or len(r) < 2:
        return []
    d2mat = (
        np.sum(q * q, axis=1)[:, None]
        + np.sum(r * r, axis=1)[None, :]
        - 2.0 * (q @ r.T)
    )
    np.maximum(d2mat, 0.0, out=d2mat)
    two = np.argpartition(d2mat, 1, axis=1)[:, :2]
    row = np.arange(len(q))
    pair_d = np.sqrt(np.take_along_axis(d2mat, two, axis=1))
    swap = pair_d[:, 0] > pair_d[:, 1]
    pair_d[swap] = pair_d[swap][:, ::-1]
    two[swap] = two[swap][:, ::-1]

    out: list[MatchPair] = []
    for i in row:
        d1 = float(pair_d[i, 0])
        d2 = float(pair_d[i, 1])
        if d2 <= 0.0:
            continue
        ratio = d1 / d2
        if ratio < threshold:
            out.append(MatchPair(int(i), int(two[i, 0]), d1, d2, ratio))
    return out


def _hartley_transform(pts: np.ndarray) -> np.ndarray:
    """Similarity transform taking points to centroid 0, mean distance sqrt(2)."""
    c = pts.mean(axis=0)
    mean_dist = float(np.linalg.norm(pts - c, axis=1).mean())
    if mean_dist <= 0.0:
        raise DegenerateConfigurationError("all points coincide")
    s = math.sqrt(2.0) / mean_dist
    return np.array([[s, 0.0, -s * c[0]], [0.0, s, -s * c[1]], [0.0, 0.0, 1.0]])


def _apply_affine(t: np.ndarray, pts: np.ndarray) -> np.ndarray:
    return pts @ t[:2, :2].T + t[:2, 2]


def _dlt_system(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    n = len(src)
    x, y = src[:, 0], src[:, 1]
    u, v = dst[:, 0], dst[:, 1]
    one = np.ones(n)
    zero = np.zeros(n)
    a = np.empty((2 * n, 9))
    a[0::2] = np.column_stack([x, y, one, zero, zero, zero, -u * x, -u * y, -u])
    a[1::2] = np.column_stack([zero, zero, zero, x, y, one, -v * x, -v * y, -v])
    return a


def _triple_collinear(pts: np.ndarray) -> bool:
    """True if any 3 of the 4 points are collinear (area test)."""
    for i, j, k in ((0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)):
        ab = pts[j] - pts[i]
        ac = pts[k] - pts[i]
        area = 0.5 * abs(ab[0] * ac[1] - ab[1] * ac[0])
        if area < COLLINEARITY_AREA_EPS:
            return True
    return False


def dlt_homography(src_pts: np.ndarray, dst_pts: np.ndarray) -> Homography:
    """Least-squares homography from >= 4 correspondences via normalized DLT.

    Both point sets are Hartley-normalized (translated to their centroid,
    scaled to mean distance sqrt(2)) before solving the 2n x 9 algebraic
    system by SVD, which keeps the estimate well-conditioned. Minimal
    4-point sets with any 3 source points collinear, and larger sets whose
    system is rank-deficient, raise DegenerateConfigurationError.
    """
    src = np.asarray(src_pts, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst_pts, dtype=np.float64).reshape(-1, 2)
    if len(src) != len(dst):
        raise ValueError("source and destination point counts differ")
    if len(src) < SAMPLE_SIZE:
        raise InsufficientCorrespondencesError(
            f"need >= {SAMPLE_SIZE} correspondences, got {len(src)}"
        )
    if len(src) == SAMPLE_SIZE and _triple_collinear(src):
        raise DegenerateConfigurationError("3 of the 4 source points are collinear")
    t_src = _hartley_transform(src)
    t_dst = _hartley_transform(dst)
    a = _dlt_system(_apply_affine(t_src, src), _apply_affine(t_dst, dst))
    _, svals, vt = np.linalg.svd(a)
    if svals[7] <= 1e-10 * svals[0]:
        raise DegenerateConfigurationError("correspondence system is rank-deficient")
    h_norm = vt[-1].reshape(3, 3)
    return Homography(np.linalg.inv(t_dst) @ h_norm @ t_src)


def reprojection_error(
    h: Homography, src_pt: Sequence[float], dst_pt: Sequence[float]
) -> float:
    """Pixel distance between h(src_pt) and dst_pt after perspective divide."""
    projected = h.apply(np.asarray(src_pt, dtype=np.float64).reshape(1, 2))[0]
    dst = np.asarray(dst_pt, dtype=np.float64).reshape(2)
    return float(np.hypot(projected[0] - dst[0], projected[1] - dst[1]))


def _reprojection_errors(matrix: np.ndarray, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Per-pair reprojection error; inf where the projection degenerates."""
    q = src @ matrix[:, :2].T + matrix[:, 2]
    w = q[:, 2]
    bad = np.abs(w) <= _W_EPS
    w = np.where(bad, 1.0, w)
    err = np.hypot(q[:, 0] / w - dst[:, 0], q[:, 1] / w - dst[:, 1])
    err[bad] = np.inf
    return err


def _batched_hartley(pts: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-sample Hartley transforms for (S, 4, 2) stacks.

    Returns (normalized points, T, T_inverse); samples whose points all
    coincide get scale 1 and are culled by the collinearity mask anyway.
    """
    c = pts.mean(axis=1, keepdims=True)
    mean_dist = np.linalg.norm(pts - c, axis=2).mean(axis=1)
    s = math.sqrt(2.0) / np.where(mean_dist > 0, mean_dist, 1.0)
    n = len(pts)
    t = np.zeros((n, 3, 3))
    t[:, 0, 0] = s
    t[:, 1, 1] = s
    t[:, 2, 2] = 1.0
    t[:, 0, 2] = -s * c[:, 0, 0]
    t[:, 1, 2] = -s * c[:, 0, 1]
    t_inv = np.zeros_like(t)
    t_inv[:, 0, 0] = 1.0 / s
    t_inv[:, 1, 1] = 1.0 / s
    t_inv[:, 2, 2] = 1.0
    t_inv[:, 0, 2] = c[:, 0, 0]
    t_inv[:, 1, 2] = c[:, 0, 1]
    normalized = (pts - c) * s[:, None, None]
    return normalized, t, t_inv


def _batched_collinear(pts: np.ndarray) -> np.ndarray:
    """Mask of samples in an (S, 4, 2) stack with any 3 points collinear."""
    mask = np.zeros(len(pts), dtype=bool)
    for i, j, k in ((0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)):
        ab = pts[:, j] - pts[:, i]
        ac = pts[:, k] - pts[:, i]
        area = 0.5 * np.abs(ab[:, 0] * ac[:, 1] - ab[:, 1] * ac[:, 0])
        mask |= area < COLLINEARITY_AREA_EPS
    return mask


def _batched_minimal_fits(
    src: np.ndarray, dst: np.ndarray, idx: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Fit a homography to every 4-point sample at once.

    Returns (matrices, valid): (S, 3, 3) denormalized homographies and a
    mask of samples that were non-degenerate (no 3 collinear source points,
    full-rank system, invertible upper-left 2x2 block).
    """
    s_pts = src[idx]
    d_pts = dst[idx]
    valid = ~_batched_collinear(s_pts)
    s_norm, _, _ = _batched_hartley(s_pts)
    d_norm, _, t_dst_inv = _batched_hartley(d_pts)
    _, t_src, _ = _batched_hartley(s_pts)

    x, y = s_norm[:, :, 0], s_norm[:, :, 1]
    u, v = d_norm[:, :, 0], d_norm[:, :, 1]
    one = np.ones_like(x)
    zero = np.zeros_like(x)
    rows_a = np.stack([x, y, one, zero, zero, zero, -u * x, -u * y, -u], axis=2)
    rows_b = np.stack([zero, zero, zero, x, y, one, -v * x, -v * y, -v], axis=2)
    a = np.concatenate([rows_a, rows_b], axis=1)

    _, svals, vt = np.linalg.svd(a)
    valid &= svals[:, 7] > 1e-10 * svals[:, 0]
    h_norm = vt[:, -1, :].reshape(-1, 3, 3)
    matrices = t_dst_inv @ h_norm @ t_src
    det2 = matrices[:, 0, 0] * matrices[:, 1, 1] - matrices[:, 0, 1] * matrices[:, 1, 0]
    scale = np.abs(matrices).reshape(len(matrices), -1).max(axis=1)
    valid &= np.abs(det2) > _DET2_EPS * np.maximum(scale, _W_EPS) ** 2
    return matrices, valid


def ransac_homography(
    src_pts: np.ndarray, dst_pts: np.ndarray, config: MatchConfig
) -> VerificationResult:
    """Robustly fit a homography mapping src points onto dst points.

    Standard RANSAC: config.ransac_iterations samples of 4 pairs drawn
    uniformly without replacement from a generator seeded with
    config.rng_seed, each fit scored by the count of pairs with
    reprojection error below config.inlier_threshold_px. Degenerate samples
    are skipped without claiming the best-model slot. The winner is refit
    once on all of its inliers and the result reported regardless of
    config.min_inliers; the acceptance gate belongs to the caller.
    """
    src = np.asarray(src_pts, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst_pts, dtype=np.float64).reshape(-1, 2)
    if len(src) != len(dst):
        raise ValueError("source and destination point counts differ")
    n = len(src)
    if n < SAMPLE_SIZE:
        raise InsufficientCorrespondencesError(
            f"RANSAC needs >= {SAMPLE_SIZE} matches, got {n}"
        )

    rng = np.random.default_rng(config.rng_seed)
    # The positions of the 4 smallest of n iid random keys are a uniform
    # 4-subset: without-replacement sampling for all iterations at once.
    keys = rng.random((config.ransac_iterations, n))
    idx = np.argpartition(keys, SAMPLE_SIZE - 1, axis=1)[:, :SAMPLE_SIZE]

    matrices, valid = _batched_minimal_fits(src, dst, idx)
    # Score all models at once: (S, 3, N) projections of every match.
    src_h = np.concatenate([src.T, np.ones((1, n))])
    proj = matrices @ src_h
    w = proj[:, 2, :]
    bad_w = np.abs(w) <= _W_EPS
    w = np.where(bad_w, 1.0, w)
    err = np.hypot(proj[:, 0, :] / w - dst[:, 0], proj[:, 1, :] / w - dst[:, 1])
    err[bad_w] = np.inf
    counts = (err < config.inlier_threshold_px).sum(axis=1)
    counts[~valid] = -1

    best = int(np.argmax(counts))
    if counts[best] < 0:
        # Every sample degenerate; try one least-squares fit on everything.
        try:
            h = dlt_homography(src, dst)
        except DegenerateConfigurationError:
            return VerificationResult(IDENTITY_HOMOGRAPHY, (), 0, math.inf)
        return _finalize(h.matrix, src, dst, config)
    return _finalize_with_refit(matrices[best], src, dst, config)


def _finalize(matrix: np.ndarray, src: np.ndarray, dst: np.ndarray, config: MatchConfig) -> VerificationResult:
    err = _reprojection_errors(matrix, src, dst)
    inliers = np.nonzero(err < config.inlier_threshold_px)[0]
    mean_err = float(err[inliers].mean()) if len(inliers) else math.inf
    return VerificationResult(
        Homography(matrix), tuple(int(i) for i in inliers), len(inliers), mean_err
    )


def _finalize_with_refit(
    matrix: np.ndarray, src: np.ndarray, dst: np.ndarray, config: MatchConfig
) -> VerificationResult:
    err = _reprojection_errors(matrix, src, dst)
    inliers = np.nonzero(err < config.inlier_threshold_px)[0]
    if len(inliers) >= SAMPLE_SIZE:
        try:
            refit = dlt_homography(src[inliers], dst[inliers])
            return _finalize(refit.matrix, src, dst, config)
        except DegenerateConfigurationError:
            pass
    return _finalize(matrix, src, dst, config)


def derive_candidate_seed(base_seed: int, candidate_id: str) -> int:
    """Stable per-candidate RANSAC seed from the run seed and candidate id.

    Hash-based so parallel and serial scoring of the same candidates use
    identical random streams no matter the evaluation order.
    """
    digest = hashlib.blake2b(
        f"{base_seed}:{candidate_id}".encode("utf-8"), digest_size=8
    ).digest()
    return int.from_bytes(digest, "little")


def _score_one(
    query: DescriptorSet,
    candidate_id: str,
    ref: DescriptorSet,
    distance_m: float,
    config: MatchConfig,
) -> tuple[str, VerificationResult, float, float]:
    t0 = time.perf_counter()
    pairs = ratio_match(query, ref, config.ratio_threshold)
    t1 = time.perf_counter()
    if len(pairs) < SAMPLE_SIZE:
        result = VerificationResult(IDENTITY_HOMOGRAPHY, (), 0, math.inf)
        return candidate_id, result, (t1 - t0) * 1e3, 0.0
    src = query.keypoints[[p.query_index for p in pairs]].astype(np.float64)
    dst = ref.keypoints[[p.ref_index for p in pairs]].astype(np.float64)
    seeded = MatchConfig(
        ratio_threshold=config.ratio_threshold,
        ransac_iterations=config.ransac_iterations,
        inlier_threshold_px=config.inlier_threshold_px,
        min_inliers=config.min_inliers,
        rng_seed=derive_candidate_seed(config.rng_seed, candidate_id),
    )
    result = ransac_homography(src, dst, seeded)
    t2 = time.perf_counter()
    return candidate_id, result, (t1 - t0) * 1e3, (t2 - t1) * 1e3


def score_candidates(
    query: DescriptorSet,
    candidates: Sequence[tuple[str, DescriptorSet, float]],
    config: MatchConfig,
    workers: int = 1,
    stage_timings: dict[str, float] | None = None,
) -> list[tuple[str, VerificationResult]]:
    """Verify every candidate against the query and rank them.

    candidates are (id, descriptors, distance-to-fix-in-meters) triples.
    Each candidate is ratio-matched then RANSAC-verified with a seed derived
    from (config.rng_seed, candidate id); candidates yielding fewer than 4
    matches score zero inliers. The ranking orders by inlier count
    descending, then mean reprojection error, then distance to the fix,
    then id: a total order, so permuting the input (or scoring in
    parallel) never changes the output. When stage_timings is given, the
    summed per-candidate "match" and "verify" durations are added to it.
    """
    distances = {cid: dist for cid, _, dist in candidates}
    if workers > 1 and len(candidates) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            scored = list(
                pool.map(
                    lambda c: _score_one(query, c[0], c[1], c[2], config), candidates
                )
            )
    else:
        scored = [_score_one(query, cid, ref, dist, config) for cid, ref, dist in candidates]

    if stage_timings is not None:
        stage_timings["match"] = stage_timings.get("match", 0.0) + sum(s[2] for s in scored)
        stage_timings["verify"] = stage_timings.get("verify", 0.0) + sum(s[3] for s in scored)

    ranked = sorted(
        ((cid, result) for cid, result, _, _ in scored),
        key=lambda item: (
            -item[1].inlier_count,
            item[1].mean_reproj_error_px,
            distances[item[0]],
            item[0],
        ),
    )
    return ranked
