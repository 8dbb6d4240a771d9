"""Keypoint extraction, semantic filtering, mutual-NN matching, RANSAC and match metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .geometry import apply_homography, has_collinear_triple, normalized_dlt
from .model import MultiTaskOutput


@dataclass
class Keypoint:
    position: tuple[float, float]
    score: float
    descriptor: np.ndarray
    semantic_class: int


@dataclass
class KeypointSet:
    """Column-wise storage of keypoints; indexing yields Keypoint records."""

    xy: np.ndarray  # (n, 2) float
    scores: np.ndarray  # (n,)
    descriptors: np.ndarray  # (n, D), unit rows
    classes: np.ndarray  # (n,) int

    def __len__(self):
        return len(self.xy)

    def __getitem__(self, i) -> Keypoint:
        return Keypoint((float(self.xy[i, 0]), float(self.xy[i, 1])), float(self.scores[i]), self.descriptors[i], int(self.classes[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def subset(self, keep) -> "KeypointSet":
        keep = np.asarray(keep)
        return KeypointSet(self.xy[keep], self.scores[keep], self.descriptors[keep], self.classes[keep])

    @classmethod
    def empty(cls, dim: int) -> "KeypointSet":
        return cls(np.zeros((0, 2)), np.zeros(0), np.zeros((0, dim)), np.zeros(0, dtype=np.int64))


@dataclass
class MatchSet:
    idx_a: np.ndarray
    idx_b: np.ndarray
    similarity: np.ndarray
    inlier_flags: np.ndarray | None = None
    model: np.ndarray | None = None

    def __len__(self):
        return len(self.idx_a)

    def pairs(self) -> set[tuple[int, int]]:
        return {(int(a), int(b)) for a, b in zip(self.idx_a, self.idx_b)}


@dataclass
class MatchMetrics:
    keypoint_recall: float | None
    inlier_ratio: float | None
    ransac_inlier_ratio: float | None
    n_gt: int
    n_recovered: int
    n_predicted: int
    n_inliers: int
    n_ransac_inliers: int


@dataclass
class MatchConfig:
    threshold: float = 0.5
    nms_radius: float = 4.0
    max_count: int = 256
    refine: bool = False
    ratio: float | None = None  # Lowe ratio on descriptor distance; 0.8 is typical
    same_class_required: bool = True
    excluded_classes: list[int] | None = None  # None -> the generator's dynamic class
    use_valid_mask: bool = True
    mask_erosion_px: int = 2
    ransac_threshold: float = 3.0
    ransac_iterations: int = 2000
    eps_px: float = 3.0
    seed: int = 0


# ---------------------------------------------------------------- extraction


def _bilinear(arr: np.ndarray, xy: np.ndarray) -> np.ndarray:
    h, w = arr.shape[:2]
    x = np.clip(xy[:, 0], 0, w - 1)
    y = np.clip(xy[:, 1], 0, h - 1)
    x0 = np.minimum(np.floor(x).astype(int), max(w - 2, 0))
    y0 = np.minimum(np.floor(y).astype(int), max(h - 2, 0))
    x1, y1 = np.minimum(x0 + 1, w - 1), np.minimum(y0 + 1, h - 1)
    fx, fy = (x - x0)[:, None], (y - y0)[:, None]
    return (
        arr[y0, x0] * (1 - fx) * (1 - fy) + arr[y0, x1] * fx * (1 - fy)
        + arr[y1, x0] * (1 - fx) * fy + arr[y1, x1] * fx * fy
    )


def extract_keypoints(
    output: MultiTaskOutput,
    threshold: float = 0.5,
    nms_radius: float = 4.0,
    max_count: int = 256,
    refine: bool = False,
    mask: np.ndarray | None = None,
) -> KeypointSet:
    """Greedy NMS on the heatmap: strongest pixels above threshold first,
    suppressing everything within nms_radius of an accepted keypoint."""
    heat = np.asarray(output.heatmap, float)
    h, w = heat.shape
    cand = heat > threshold
    if mask is not None:
        cand &= np.asarray(mask, bool)
    ys, xs = np.nonzero(cand)
    order = np.lexsort((ys * w + xs, -heat[ys, xs]))
    r = int(math.floor(nms_radius))
    oy, ox = np.mgrid[-r:r + 1, -r:r + 1]
    disk = ox**2 + oy**2 <= nms_radius**2
    oy, ox = oy[disk], ox[disk]
    suppressed = np.zeros((h, w), dtype=bool)
    picked = []
    for k in order:
        y, x = ys[k], xs[k]
        if suppressed[y, x]:
            continue
        picked.append((x, y))
        if len(picked) >= max_count:
            break
        yy, xx = y + oy, x + ox
        ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        suppressed[yy[ok], xx[ok]] = True
    d = output.descriptors.shape[-1]
    if not picked:
        return KeypointSet.empty(d)
    pix = np.array(picked, dtype=np.int64)
    scores = heat[pix[:, 1], pix[:, 0]]
    xy = pix.astype(np.float64)
    if refine:
        xy = _refine(heat, pix)
    desc = _bilinear(np.asarray(output.descriptors, float), xy)
    norms = np.linalg.norm(desc, axis=1, keepdims=True)
    desc = np.where(norms > 1e-12, desc / np.maximum(norms, 1e-12), np.eye(d)[0])
    classes = np.asarray(output.segmentation).argmax(axis=-1)[pix[:, 1], pix[:, 0]]
    return KeypointSet(xy, scores, desc, classes.astype(np.int64))


def _refine(heat: np.ndarray, pix: np.ndarray) -> np.ndarray:
    """Weighted centroid of the 3x3 neighborhood, weights = score minus local minimum."""
    h, w = heat.shape
    out = pix.astype(np.float64).copy()
    for n, (x, y) in enumerate(pix):
        x0, x1, y0, y1 = max(x - 1, 0), min(x + 2, w), max(y - 1, 0), min(y + 2, h)
        patch = heat[y0:y1, x0:x1]
        wts = patch - patch.min()
        if wts.sum() <= 0:
            continue
        gy, gx = np.mgrid[y0:y1, x0:x1]
        out[n] = [(wts * gx).sum() / wts.sum(), (wts * gy).sum() / wts.sum()]
    return out


def semantic_filter(kps: KeypointSet, excluded_classes) -> KeypointSet:
    excluded = np.asarray(sorted(set(excluded_classes or ())), dtype=np.int64)
    if excluded.size == 0:
        return kps
    return kps.subset(~np.isin(kps.classes, excluded))


# ---------------------------------------------------------------- matching


def _ratio_ok(S: np.ndarray, ratio: float, axis: int) -> np.ndarray:
    """Per row (axis=1) or column (axis=0): best distance < ratio * second best."""
    M = S if axis == 1 else S.T
    if M.shape[1] < 2:
        return np.isfinite(M).any(axis=1)
    top2 = -np.sort(-M, axis=1)[:, :2]
    d = np.sqrt(np.maximum(2.0 - 2.0 * top2, 0.0))
    d[~np.isfinite(top2)] = np.inf
    return (d[:, 0] < ratio * d[:, 1]) | (np.isfinite(d[:, 0]) & ~np.isfinite(d[:, 1]))


def match(kps_a: KeypointSet, kps_b: KeypointSet, ratio: float | None = None, same_class_required: bool = True) -> MatchSet:
    """Mutual nearest neighbors under cosine similarity.

    The ratio test, when enabled, is applied in both directions so that
    match(A, B) and match(B, A) agree.
    """
    empty = MatchSet(np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0))
    if len(kps_a) == 0 or len(kps_b) == 0:
        return empty
    S = kps_a.descriptors @ kps_b.descriptors.T
    if same_class_required:
        S = np.where(kps_a.classes[:, None] == kps_b.classes[None, :], S, -np.inf)
    ab = np.argmax(S, axis=1)
    ba = np.argmax(S, axis=0)
    ia = np.arange(len(kps_a))
    keep = (ba[ab] == ia) & np.isfinite(S[ia, ab])
    if ratio is not None:
        keep &= _ratio_ok(S, ratio, axis=1)
        keep &= _ratio_ok(S, ratio, axis=0)[ab]
    ia = ia[keep]
    ib = ab[keep]
    return MatchSet(ia.astype(np.int64), ib.astype(np.int64), S[ia, ib])


def symmetric_transfer_error(H: np.ndarray, pa: np.ndarray, pb: np.ndarray) -> np.ndarray:
    """RMS of the forward and backward transfer distances, in pixels."""
    fwd = np.linalg.norm(apply_homography(H, pa) - pb, axis=1)
    bwd = np.linalg.norm(apply_homography(np.linalg.inv(H), pb) - pa, axis=1)
    e = np.sqrt(0.5 * (fwd**2 + bwd**2))
    return np.where(np.isfinite(e), e, np.inf)


def verify_homography(
    matches: MatchSet,
    kps_a: KeypointSet,
    kps_b: KeypointSet,
    ransac_threshold_px: float = 3.0,
    iterations: int = 2000,
    seed=0,
    confidence: float = 0.9999,
):
    """RANSAC over 4-point DLT hypotheses, then a normalized-DLT refit on inliers.

    Returns (H or None, inlier_flags). Fewer than 4 matches gives (None, all False).
    """
    n = len(matches)
    flags = np.zeros(n, dtype=bool)
    if n < 4:
        return None, flags
    pa = kps_a.xy[matches.idx_a].astype(float)
    pb = kps_b.xy[matches.idx_b].astype(float)
    rng = np.random.default_rng(seed)
    best_H, best_count, best_cost = None, -1, np.inf
    budget = iterations
    it = 0
    while it < min(iterations, budget):
        it += 1
        s = rng.choice(n, 4, replace=False)
        if has_collinear_triple(pa[s]) or has_collinear_triple(pb[s]):
            continue
        H = normalized_dlt(pa[s], pb[s])
        if H is None or not np.all(np.isfinite(H)) or abs(np.linalg.det(H)) < 1e-12:
            continue
        err = symmetric_transfer_error(H, pa, pb)
        inl = err <= ransac_threshold_px
        count = int(inl.sum())
        cost = float(np.minimum(err, ransac_threshold_px).sum())
        if count > best_count or (count == best_count and cost < best_cost):
            best_H, best_count, best_cost = H, count, cost
            frac = count / n
            if frac >= 1.0:
                budget = it
            elif frac > 0:
                budget = min(iterations, int(math.ceil(math.log(1 - confidence) / math.log(1 - frac**4))))
    if best_H is None or best_count < 4:
        return None, flags
    H = best_H
    flags = symmetric_transfer_error(H, pa, pb) <= ransac_threshold_px
    for _ in range(5):
        if flags.sum() < 4:
            break
        refit = normalized_dlt(pa[flags], pb[flags])
        if refit is None:
            break
        new_flags = symmetric_transfer_error(refit, pa, pb) <= ransac_threshold_px
        if new_flags.sum() < flags.sum():
            break
        H = refit
        if np.array_equal(new_flags, flags):
            break
        flags = new_flags
    return H, flags


# ---------------------------------------------------------------- metrics


def _pct(num: int, den: int) -> float | None:
    return None if den == 0 else 100.0 * num / den


def compute_metrics(match_set: MatchSet, gt_homography, kps_a: KeypointSet, kps_b: KeypointSet, eps_px: float = 3.0) -> MatchMetrics:
    """Recall over co-visible keypoint pairs and inlier ratio under the true homography.

    A keypoint of A is co-visible if its warp lands within eps_px of some
    keypoint of B. Zero denominators give None, never 0.
    """
    H = np.asarray(gt_homography, float)
    if len(kps_a) and len(kps_b):
        D = np.linalg.norm(apply_homography(H, kps_a.xy)[:, None, :] - kps_b.xy[None, :, :], axis=2)
        D = np.where(np.isfinite(D), D, np.inf)
        n_gt = int((D.min(axis=1) <= eps_px).sum())
    else:
        D = np.zeros((len(kps_a), len(kps_b)))
        n_gt = 0
    correct = D[match_set.idx_a, match_set.idx_b] <= eps_px if len(match_set) else np.zeros(0, bool)
    n_pred = len(match_set)
    n_in = int(correct.sum())
    n_rin = int(match_set.inlier_flags.sum()) if match_set.inlier_flags is not None else 0
    return MatchMetrics(
        keypoint_recall=_pct(n_in, n_gt),
        inlier_ratio=_pct(n_in, n_pred),
        ransac_inlier_ratio=_pct(n_rin, n_pred) if match_set.inlier_flags is not None else None,
        n_gt=n_gt,
        n_recovered=n_in,
        n_predicted=n_pred,
        n_inliers=n_in,
        n_ransac_inliers=n_rin,
    )


def correct_matches(match_set: MatchSet, gt_homography, kps_a: KeypointSet, kps_b: KeypointSet, eps_px: float = 3.0) -> np.ndarray:
    if not len(match_set):
        return np.zeros(0, dtype=bool)
    proj = apply_homography(np.asarray(gt_homography, float), kps_a.xy[match_set.idx_a])
    return np.linalg.norm(proj - kps_b.xy[match_set.idx_b], axis=1) <= eps_px


# ---------------------------------------------------------------- pipeline


@dataclass
class PairResult:
    metrics: MatchMetrics
    kps_a: KeypointSet
    kps_b: KeypointSet
    matches: MatchSet
    correct: np.ndarray
    meta: dict = field(default_factory=dict)


def evaluate_outputs(out_a: MultiTaskOutput, out_b: MultiTaskOutput, gt_homography, cfg: MatchConfig, valid_mask=None, excluded=None) -> PairResult:
    """extract -> filter -> match -> verify -> metrics for one pair of network outputs."""
    mask_b = None
    if cfg.use_valid_mask and valid_mask is not None:
        mask_b = np.asarray(valid_mask, bool)
        if cfg.mask_erosion_px > 0:
            mask_b = ndimage.binary_erosion(mask_b, iterations=cfg.mask_erosion_px)
    ka = extract_keypoints(out_a, cfg.threshold, cfg.nms_radius, cfg.max_count, cfg.refine)
    kb = extract_keypoints(out_b, cfg.threshold, cfg.nms_radius, cfg.max_count, cfg.refine, mask=mask_b)
    if excluded:
        ka, kb = semantic_filter(ka, excluded), semantic_filter(kb, excluded)
    ms = match(ka, kb, cfg.ratio, cfg.same_class_required)
    H_est, flags = verify_homography(ms, ka, kb, cfg.ransac_threshold, cfg.ransac_iterations, cfg.seed)
    ms.inlier_flags, ms.model = flags, H_est
    metrics = compute_metrics(ms, gt_homography, ka, kb, cfg.eps_px)
    return PairResult(metrics, ka, kb, ms, correct_matches(ms, gt_homography, ka, kb, cfg.eps_px))


def aggregate(results: list[MatchMetrics]) -> dict:
    """Pooled counts (primary) and per-pair means over non-null values."""
    tot = {k: sum(getattr(m, k) for m in results) for k in ("n_gt", "n_recovered", "n_predicted", "n_inliers", "n_ransac_inliers")}
    recalls = [m.keypoint_recall for m in results if m.keypoint_recall is not None]
    ratios = [m.inlier_ratio for m in results if m.inlier_ratio is not None]
    return {
        "pairs": len(results),
        "keypoint_recall": _pct(tot["n_recovered"], tot["n_gt"]),
        "inlier_ratio": _pct(tot["n_inliers"], tot["n_predicted"]),
        "ransac_inlier_ratio": _pct(tot["n_ransac_inliers"], tot["n_predicted"]),
        "mean_keypoint_recall": float(np.mean(recalls)) if recalls else None,
        "mean_inlier_ratio": float(np.mean(ratios)) if ratios else None,
        **tot,
    }
