"""Task losses, their weighted sum, and descriptor pair mining."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .geometry import apply_homography, check_invertible

PROB_FLOOR = 1e-7


@dataclass
class LossConfig:
    weight_kp: float = 1.0
    weight_desc: float = 1.0
    weight_seg: float = 1.0
    margin_pos: float = 0.9
    margin_neg: float = 0.2
    eps_pos: float = 2.0
    eps_neg: float = 8.0
    pairs_per_image: int = 512
    # "mean" averages per pixel (per pair for descriptors); "sum" is the plain sum.
    reduction: str = "mean"
    kp_pos_weight: float = 1.0
    hard_negatives: bool = False

    def __post_init__(self):
        if min(self.weight_kp, self.weight_desc, self.weight_seg) < 0:
            raise ValueError("loss weights must be non-negative")
        if not 0 < self.margin_pos <= 1:
            raise ValueError(f"margin_pos must be in (0, 1], got {self.margin_pos}")
        if not -1 <= self.margin_neg < 1:
            raise ValueError(f"margin_neg must be in [-1, 1), got {self.margin_neg}")
        if not self.eps_pos < self.eps_neg:
            raise ValueError("eps_pos must be smaller than eps_neg")
        if self.reduction not in ("mean", "sum"):
            raise ValueError(f"unknown reduction {self.reduction!r}")


def _check_same(a: torch.Tensor, b: torch.Tensor, what: str):
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def _reduce(per_pixel: torch.Tensor, mask, reduction: str) -> torch.Tensor:
    if mask is not None:
        per_pixel = per_pixel * mask
        count = mask.sum().clamp_min(1.0)
    else:
        count = per_pixel.numel()
    total = per_pixel.sum()
    return total / count if reduction == "mean" else total


def keypoint_loss(heatmap, target, mask=None, reduction: str = "sum", pos_weight: float = 1.0) -> torch.Tensor:
    """Binary cross-entropy between a heatmap and a binary keypoint map."""
    heatmap, target = torch.as_tensor(heatmap), torch.as_tensor(target, dtype=torch.as_tensor(heatmap).dtype)
    _check_same(heatmap, target, "keypoint_loss")
    p = heatmap.clamp(PROB_FLOOR, 1 - PROB_FLOOR)
    per = -(pos_weight * target * torch.log(p) + (1 - target) * torch.log1p(-p))
    return _reduce(per, mask, reduction)


def segmentation_loss(probs, onehot, mask=None, reduction: str = "sum", class_dim: int = -1) -> torch.Tensor:
    """Multi-class cross-entropy against one-hot labels; class axis at class_dim."""
    probs = torch.as_tensor(probs)
    onehot = torch.as_tensor(onehot, dtype=probs.dtype)
    _check_same(probs, onehot, "segmentation_loss")
    s = onehot.sum(dim=class_dim)
    if not torch.all((onehot == 0) | (onehot == 1)) or not torch.all(s == 1):
        raise ValueError("segmentation target is not one-hot")
    per = -(onehot * torch.log(probs.clamp(PROB_FLOOR, 1 - PROB_FLOOR))).sum(dim=class_dim)
    return _reduce(per, mask, reduction)


@dataclass
class PairSets:
    """Pixel coordinates (x, y) in view a and view b for each pair."""

    pos_a: np.ndarray
    pos_b: np.ndarray
    neg_a: np.ndarray
    neg_b: np.ndarray


def mine_pairs(homography, shape, config: LossConfig, seed) -> PairSets:
    """Sample positive pairs (x, round(Hx)) and far-apart negative pairs."""
    H = np.asarray(homography, dtype=np.float64)
    check_invertible(H)
    h, w = shape
    rng = np.random.default_rng(seed)
    n = config.pairs_per_image
    # Oversample; out-of-bounds warps are discarded.
    cand = np.stack([rng.integers(0, w, 4 * n), rng.integers(0, h, 4 * n)], axis=1)
    warped = apply_homography(H, cand)
    snapped = np.rint(warped)
    ok = (
        np.isfinite(warped).all(axis=1)
        & (snapped[:, 0] >= 0) & (snapped[:, 0] <= w - 1)
        & (snapped[:, 1] >= 0) & (snapped[:, 1] <= h - 1)
        & (np.linalg.norm(snapped - warped, axis=1) <= config.eps_pos)
    )
    pos_a = cand[ok][:n]
    pos_b = snapped[ok][:n].astype(np.int64)

    anchors = np.stack([rng.integers(0, w, 4 * n), rng.integers(0, h, 4 * n)], axis=1)
    others = np.stack([rng.integers(0, w, 4 * n), rng.integers(0, h, 4 * n)], axis=1)
    proj = apply_homography(H, anchors)
    dist = np.where(np.isfinite(proj).all(axis=1), np.linalg.norm(proj - others, axis=1), np.inf)
    far = dist > config.eps_neg
    return PairSets(pos_a.astype(np.int64), pos_b, anchors[far][:n].astype(np.int64), others[far][:n].astype(np.int64))


def _gather(desc: torch.Tensor, xy: np.ndarray) -> torch.Tensor:
    """desc is (H, W, D); xy integer (n, 2)."""
    h, w = desc.shape[:2]
    xy = np.asarray(xy, dtype=np.int64).reshape(-1, 2)
    if len(xy) and (xy[:, 0].min() < 0 or xy[:, 1].min() < 0 or xy[:, 0].max() >= w or xy[:, 1].max() >= h):
        raise IndexError(f"pair coordinates outside the {h}x{w} descriptor map")
    idx = torch.from_numpy(xy)
    return desc[idx[:, 1], idx[:, 0]]


def hardest_negatives(desc_a, desc_b, anchors_xy, homography, eps_neg: float, pool: int = 1024, seed=0) -> np.ndarray:
    """For each anchor, the most similar location of b from a random pool that lies farther than eps_neg."""
    h, w = desc_b.shape[:2]
    rng = np.random.default_rng(seed)
    pool_xy = np.stack([rng.integers(0, w, pool), rng.integers(0, h, pool)], axis=1)
    with torch.no_grad():
        sims = _gather(desc_a, anchors_xy) @ _gather(desc_b, pool_xy).T
    proj = apply_homography(np.asarray(homography, float), anchors_xy)
    dist = np.linalg.norm(proj[:, None, :] - pool_xy[None, :, :], axis=2)
    sims = sims.cpu().numpy().copy()
    sims[~(dist > eps_neg)] = -np.inf
    return pool_xy[np.argmax(sims, axis=1)]


def descriptor_loss(desc_a, desc_b, pairs: PairSets, margin_pos: float, margin_neg: float, reduction: str = "sum"):
    """Two-hinge contrastive loss on cosine similarity.

    desc_a and desc_b are (H, W, D) unit-norm maps. With reduction="mean" each
    hinge sum is divided by the number of pairs it runs over.
    """
    desc_a, desc_b = torch.as_tensor(desc_a), torch.as_tensor(desc_b)
    if desc_a.shape[-1] != desc_b.shape[-1]:
        raise ValueError(f"descriptor dims differ: {desc_a.shape[-1]} vs {desc_b.shape[-1]}")
    sim_pos = (_gather(desc_a, pairs.pos_a) * _gather(desc_b, pairs.pos_b)).sum(-1)
    sim_neg = (_gather(desc_a, pairs.neg_a) * _gather(desc_b, pairs.neg_b)).sum(-1)
    pos = torch.relu(margin_pos - sim_pos)
    neg = torch.relu(sim_neg - margin_neg)
    if reduction == "mean":
        return pos.sum() / max(len(sim_pos), 1) + neg.sum() / max(len(sim_neg), 1)
    return pos.sum() + neg.sum()


def total_loss(l_kp, l_desc, l_seg, config: LossConfig):
    return config.weight_kp * l_kp + config.weight_desc * l_desc + config.weight_seg * l_seg
