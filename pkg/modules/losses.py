"""
Training objectives for the TAGS toolkit

Classification (focal + class-balanced logistic), boundary-aware mask loss,
prediction promotion over thresholded mask segments, and the
classification-mask feature consistency term.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F

from core.errors import ConfigError, ValidationError

logger = logging.getLogger(f"tags.{__name__}")

ArrayLike = Union[np.ndarray, torch.Tensor]
TERMS = ("L_c", "L_m", "L_pp", "L_fc")


def default_thresholds() -> Tuple[float, ...]:
    """0.10, 0.15, ..., 0.90"""
    return tuple(round(0.1 + 0.05 * i, 2) for i in range(17))


@dataclass
class LossWeights:
    """Hyper-parameters of the four loss terms"""
    lambda1: float = 0.4
    lambda2: float = 0.4
    gamma: float = 2.0
    alpha: float = 10.0
    beta: float = 2.0
    delta: float = 0.25
    erosion_kernel: int = 7
    eps: float = 1e-8
    overlap_tau: float = 1e-6
    prob_clamp: float = 1e-7
    theta_c: float = 0.3
    theta_m: float = 0.5
    topk: int = 40
    thresholds: Tuple[float, ...] = field(default_factory=default_thresholds)
    boundary_band: bool = False
    use_promotion: bool = True
    use_consistency: bool = True

    def validate(self):
        for name in ("lambda1", "lambda2"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ConfigError("must lie in (0, 1)", f"loss.{name}")
        for name in ("gamma", "beta", "alpha", "delta"):
            if getattr(self, name) < 0:
                raise ConfigError("must be >= 0", f"loss.{name}")
        if self.erosion_kernel < 1 or self.erosion_kernel % 2 == 0:
            raise ConfigError("must be a positive odd number", "loss.erosion_kernel")
        if self.topk < 1:
            raise ConfigError("must be >= 1", "loss.topk")
        th = list(self.thresholds)
        if not th or any(not 0.0 < t < 1.0 for t in th) or any(b <= a for a, b in zip(th, th[1:])):
            raise ConfigError("must be non-empty, strictly increasing and inside (0, 1)", "loss.thresholds")
        self.thresholds = tuple(float(t) for t in th)

    @staticmethod
    def hard_negatives(K: int) -> int:
        """|N| = ceil(K / 10), at least one"""
        return max(1, math.ceil(K / 10))


class EmptyMaskError(ValidationError):
    """Mask loss requested for a background snippet"""


class Segment(NamedTuple):
    """Maximal run [start, end] (inclusive) of constant binarized value z"""
    start: int
    end: int
    z: int

    @property
    def length(self) -> int:
        return self.end - self.start + 1


# Classification branch

def classification_loss(p: torch.Tensor, r: torch.Tensor, y, weights: LossWeights) -> torch.Tensor:
    """Per-column L_c for softmax column(s) p, sigmoid column(s) r and label(s) y"""
    single = p.dim() == 1
    if single:
        p, r = p.unsqueeze(1), r.unsqueeze(1)
    num_rows, T = p.shape
    y = torch.as_tensor(np.atleast_1d(np.asarray(y)), dtype=torch.long)
    if y.numel() == 1 and T > 1:
        y = y.expand(T)
    if y.shape != (T,):
        raise ValueError(f"{y.numel()} labels for {T} columns")
    if bool((y < 0).any()) or bool((y >= num_rows).any()):
        raise ValueError(f"label out of range 0..{num_rows - 1}")

    lo, hi = weights.prob_clamp, 1.0 - weights.prob_clamp
    p = p.clamp(lo, hi)
    r = r.clamp(lo, hi)
    cols = torch.arange(T)
    p_y = p[y, cols]
    r_y = r[y, cols]
    focal = (1.0 - p_y) ** weights.gamma * -torch.log(p_y)

    # Hard negatives: highest-scoring r rows other than y, picked without gradient
    n_neg = min(LossWeights.hard_negatives(num_rows - 1), num_rows - 1)
    ranked = r.detach().clone()
    ranked[y, cols] = -math.inf
    neg_idx = torch.topk(ranked, n_neg, dim=0).indices
    neg_term = torch.log(1.0 - torch.gather(r, 0, neg_idx)).sum(dim=0)
    logistic = -torch.log(r_y) - (weights.alpha / n_neg) * neg_term

    loss = weights.lambda1 * focal + (1.0 - weights.lambda1) * logistic
    return loss[0] if single else loss


# Mask branch

def erode(m: ArrayLike, k: int) -> ArrayLike:
    """Sliding-window minimum of width k along axis 0, zero padded at both ends"""
    if k < 1 or k % 2 == 0:
        raise ValueError(f"erosion kernel must be odd, got {k}")
    as_numpy = isinstance(m, np.ndarray)
    x = torch.from_numpy(np.asarray(m, dtype=np.float64)) if as_numpy else m
    if k == 1:
        out = x
    else:
        half = k // 2
        moved = x.movedim(0, -1)
        windows = F.pad(moved, (half, half)).unfold(-1, k, 1)
        out = windows.min(dim=-1).values.movedim(-1, 0)
    return out.numpy() if as_numpy else out


def boundary_band(m: ArrayLike, k: int) -> ArrayLike:
    """m minus its erosion: the soft band along segment boundaries"""
    return m - erode(m, k)


def mask_loss(m: torch.Tensor, g: torch.Tensor, weights: LossWeights) -> torch.Tensor:
    """L_m = boundary IoU term (normalised L2 when boundaries miss) + lambda2 * dice loss

    m and g are T-vectors or T x n column stacks; each g column needs a one.
    """
    g = torch.as_tensor(g, dtype=m.dtype)
    count = g.sum(dim=0)
    if bool((count <= 0).any()):
        raise EmptyMaskError("ground-truth mask has no foreground snippet")
    phi = boundary_band if weights.boundary_band else erode
    a = phi(m, weights.erosion_kernel)
    b = phi(g, weights.erosion_kernel)
    inter = (a * b).sum(dim=0)
    union = (a + b - a * b).sum(dim=0)
    fallback = torch.linalg.vector_norm(m - g, dim=0) / count
    biou = torch.where(inter > weights.overlap_tau, 1.0 - inter / (union + weights.eps), fallback)
    dice = 2.0 * (m * g).sum(dim=0) / ((m * m).sum(dim=0) + (g * g).sum(dim=0) + weights.eps)
    return biou + weights.lambda2 * (1.0 - dice)


# Mask predictive redundancy

def binarize_segments(m: ArrayLike, theta: float) -> List[Segment]:
    """Runs of z_t = [m_t >= theta], covering 0..T-1 exactly"""
    values = m.detach().cpu().numpy() if isinstance(m, torch.Tensor) else np.asarray(m)
    z = (values >= theta).astype(np.int8)
    if z.size == 0:
        return []
    cuts = np.flatnonzero(np.diff(z)) + 1
    starts = np.concatenate([[0], cuts])
    ends = np.concatenate([cuts - 1, [z.size - 1]])
    return [Segment(int(s), int(e), int(z[s])) for s, e in zip(starts, ends)]


def oic_weights(segments: Sequence[Segment], T: int, delta: float) -> Tuple[np.ndarray, float]:
    """R(pi) written as a . m + b for fixed segments"""
    a = np.zeros(T, dtype=np.float64)
    b = 0.0
    for seg in segments:
        l = seg.length
        pad = math.ceil(delta * l)
        outside = [r for r in range(seg.start - pad, seg.start) if r >= 0]
        outside += [r for r in range(seg.end + 1, seg.end + 1 + pad) if r < T]
        sign = 1.0 if seg.z else -1.0
        # inside mean of u, u = m (fg) or 1 - m (bg)
        a[seg.start:seg.end + 1] += sign / l
        if not seg.z:
            b += 1.0
        if outside:
            a[outside] -= sign / len(outside)
            if not seg.z:
                b -= 1.0
    n = max(len(segments), 1)
    return a / n, b / n


def oic_score(m: ArrayLike, segments: Sequence[Segment], delta: float):
    """Outer-inner-contrast score of a segmentation of mask m, in [-1, 1]"""
    T = m.shape[0]
    a, b = oic_weights(segments, T, delta)
    if isinstance(m, torch.Tensor):
        return torch.as_tensor(a, dtype=m.dtype) @ m + b
    return float(a @ np.asarray(m, dtype=np.float64) + b)


def _as_numpy(m: ArrayLike) -> np.ndarray:
    if isinstance(m, torch.Tensor):
        return m.detach().cpu().numpy().astype(np.float64)
    return np.asarray(m, dtype=np.float64)


def oic_scan(columns: ArrayLike, thresholds: Sequence[float], delta: float) -> Tuple[np.ndarray, np.ndarray]:
    """R(pi[j]) of every column of a T x n stack at every threshold

    Returns (scores, mixed), both len(thresholds) x n. mixed marks the
    partitions holding at least one foreground and one background segment.
    """
    cols = _as_numpy(columns)
    if cols.ndim == 1:
        cols = cols[:, None]
    T, n = cols.shape
    th = np.asarray(thresholds, dtype=np.float64)
    J = th.size
    if T == 0 or n == 0:
        return np.zeros((J, n)), np.zeros((J, n), dtype=bool)

    # one row per (column, threshold) pair
    rows = (cols.T[:, None, :] >= th[None, :, None]).reshape(n * J, T)
    starts = np.ones_like(rows)
    starts[:, 1:] = rows[:, 1:] != rows[:, :-1]
    row_idx, start = np.nonzero(starts)
    end = np.full_like(start, T - 1)
    same_row = row_idx[1:] == row_idx[:-1]
    end[:-1] = np.where(same_row, start[1:] - 1, T - 1)
    z = rows[row_idx, start]

    length = end - start + 1
    pad = np.ceil(delta * length).astype(np.int64)
    lo = np.maximum(start - pad, 0)
    hi = np.minimum(end + pad, T - 1)
    count = (start - lo) + (hi - end)

    c = row_idx // J
    csum = np.concatenate([np.zeros((n, 1)), np.cumsum(cols.T, axis=1)], axis=1)
    inside = (csum[c, end + 1] - csum[c, start]) / length
    outer = (csum[c, start] - csum[c, lo]) + (csum[c, hi + 1] - csum[c, end + 1])
    has_outer = count > 0
    outside = np.where(has_outer, outer / np.maximum(count, 1), 0.0)
    contrast = np.where(z, inside - outside, (1.0 - inside) - np.where(has_outer, 1.0 - outside, 0.0))

    total = np.bincount(row_idx, weights=contrast, minlength=n * J)
    segments = np.bincount(row_idx, minlength=n * J)
    scores = (total / segments).reshape(n, J).T
    mixed = (rows.any(axis=1) & ~rows.all(axis=1)).reshape(n, J).T
    return scores, mixed


def best_thresholds(columns: ArrayLike, weights: LossWeights) -> Tuple[np.ndarray, np.ndarray]:
    """j* and R(pi[j*]) per column, over partitions with both segment kinds

    Ties go to the smallest theta. A column with no such partition gets
    j* = -1 and R = 0.
    """
    scores, mixed = oic_scan(columns, weights.thresholds, weights.delta)
    ranked = np.where(mixed, scores, -np.inf)
    j = np.argmax(ranked, axis=0)
    best = np.take_along_axis(scores, j[None, :], axis=0)[0]
    any_mixed = mixed.any(axis=0)
    return np.where(any_mixed, j, -1), np.where(any_mixed, best, 0.0)


def best_segmentation(m: ArrayLike, weights: LossWeights) -> Tuple[int, List[Segment], float]:
    """(j*, segments of pi[j*], R(pi[j*])) for one mask column"""
    values = _as_numpy(m)
    j, best = best_thresholds(values[:, None], weights)
    if j[0] < 0:
        return -1, [], 0.0
    return int(j[0]), binarize_segments(values, weights.thresholds[j[0]]), float(best[0])


def column_quality(M: ArrayLike, columns: Sequence[int], weights: LossWeights) -> np.ndarray:
    """R(pi[j*]) of the listed columns of M, NaN everywhere else"""
    values = _as_numpy(M)
    quality = np.full(values.shape[1], np.nan)
    columns = np.asarray(columns, dtype=np.int64)
    if columns.size:
        quality[columns] = best_thresholds(values[:, columns], weights)[1]
    return quality


def promotion_loss(m_t: torch.Tensor, g_t: torch.Tensor, weights: LossWeights,
                   quality: Optional[float] = None) -> torch.Tensor:
    """(1 - R(pi[j*]))^beta * ||m_t - g_t||_2 for one foreground snippet

    R enters as a constant weight; pass quality to hold it fixed.
    """
    if quality is None:
        quality = best_segmentation(m_t, weights)[2]
    g_t = torch.as_tensor(g_t, dtype=m_t.dtype)
    return (1.0 - quality) ** weights.beta * torch.linalg.vector_norm(m_t - g_t)


def video_promotion_loss(M: torch.Tensor, G: ArrayLike, groups: Dict[int, np.ndarray],
                         weights: LossWeights, quality: Optional[np.ndarray] = None) -> torch.Tensor:
    """L_pp averaged over the snippets of each instance, then over instances

    quality is a per-column R(pi[j*]) vector as from column_quality.
    """
    members = [np.asarray(m, dtype=np.int64) for m in groups.values() if len(m)]
    if not members:
        return M.sum() * 0.0
    cols = np.concatenate(members)
    if quality is None:
        quality = column_quality(M, cols, weights)
    G = torch.as_tensor(G, dtype=M.dtype)
    idx = torch.as_tensor(cols)
    scale = torch.as_tensor((1.0 - quality[cols]) ** weights.beta, dtype=M.dtype)
    losses = scale * torch.linalg.vector_norm(M[:, idx] - G[:, idx], dim=0)
    bounds = np.cumsum([0] + [len(m) for m in members])
    per_instance = [losses[a:b].mean() for a, b in zip(bounds[:-1], bounds[1:])]
    return torch.stack(per_instance).mean()


# Classification-mask consistency

def top_k_indices(scores: ArrayLike, k: int) -> np.ndarray:
    """Indices of the k largest scores; ties keep the lower index first"""
    values = scores.detach().cpu().numpy() if isinstance(scores, torch.Tensor) else np.asarray(scores)
    k = min(k, values.shape[0])
    return np.argsort(-values, kind="stable")[:k]


def consistency_loss(E: torch.Tensor, P: torch.Tensor, M: torch.Tensor, projections,
                     weights: LossWeights) -> Tuple[torch.Tensor, bool]:
    """L_fc = 1 - cos(F_clf, F_mask); returns the loss and a degenerate flag

    projections(E) gives (E_p, E_m), both T x D_c. Index selection is a
    constant w.r.t. gradients.
    """
    E_p, E_m = projections(E)
    K = P.shape[0] - 1
    with torch.no_grad():
        gated_p = P[:K] * (P[:K] >= weights.theta_c)
        clf_scores = gated_p.max(dim=0).values
        gated_m = M * (M >= weights.theta_m)
        mask_scores = torch.sigmoid(gated_m.mean(dim=0))
    clf_idx = torch.as_tensor(top_k_indices(clf_scores, weights.topk))
    mask_idx = torch.as_tensor(top_k_indices(mask_scores, weights.topk))
    f_clf = E_p[clf_idx].mean(dim=0)
    f_mask = E_m[mask_idx].mean(dim=0)
    norm = torch.linalg.vector_norm(f_clf) * torch.linalg.vector_norm(f_mask)
    if float(norm.detach()) <= 1e-12:
        logger.warning("consistency loss: zero-norm pooled feature, cosine set to 0")
        return 1.0 + 0.0 * (f_clf.sum() + f_mask.sum()), True
    return 1.0 - (f_clf @ f_mask) / norm, False


# Overall objective

Quality = Dict[int, np.ndarray]


@dataclass
class LossBreakdown:
    """Total loss with every term per scale

    quality holds the per-column R(pi[j*]) used by L_pp at each scale.
    """
    total: torch.Tensor
    per_scale: Dict[int, Dict[str, torch.Tensor]]
    degenerate: bool = False
    quality: Quality = field(default_factory=dict)

    def term_totals(self) -> Dict[str, float]:
        """Each term summed over scales, plus the total"""
        out = {name: float(sum(float(t[name]) for t in self.per_scale.values())) for name in TERMS}
        out["total"] = float(self.total)
        return out


def scale_loss(out, targets, weights: LossWeights, projections,
               quality: Optional[np.ndarray] = None) -> Tuple[Dict[str, torch.Tensor], bool, Optional[np.ndarray]]:
    """The four terms for one scale of one video, plus the L_pp quality vector"""
    zero = out.M.sum() * 0.0
    terms = {"L_c": classification_loss(out.P, out.R, targets.y, weights).mean()}
    fg = targets.foreground
    if fg.size:
        fg_idx = torch.as_tensor(fg)
        G_fg = torch.as_tensor(targets.G[:, fg], dtype=out.M.dtype)
        terms["L_m"] = mask_loss(out.M[:, fg_idx], G_fg, weights).mean()
    else:
        terms["L_m"] = zero
    if weights.use_promotion and fg.size:
        if quality is None:
            quality = column_quality(out.M, fg, weights)
        terms["L_pp"] = video_promotion_loss(out.M, targets.G, targets.instances(), weights, quality)
    else:
        terms["L_pp"] = zero
        quality = None
    degenerate = False
    if weights.use_consistency:
        terms["L_fc"], degenerate = consistency_loss(out.E, out.P, out.M, projections, weights)
    else:
        terms["L_fc"] = zero
    return terms, degenerate, quality


def total_loss(outputs, targets, weights: LossWeights, projections,
               quality: Optional[Quality] = None) -> LossBreakdown:
    """L = sum over scales of mean L_c + mean fg L_m + L_pp + L_fc

    quality, when given, replaces the L_pp weights computed from the
    current masks (the breakdown of an earlier call carries them).
    """
    per_scale: Dict[int, Dict[str, torch.Tensor]] = {}
    used: Quality = {}
    degenerate = False
    total = None
    for out in outputs:
        fixed = None if quality is None else quality.get(out.scale)
        terms, flag, q = scale_loss(out, targets[out.scale], weights, projections, fixed)
        degenerate = degenerate or flag
        per_scale[out.scale] = terms
        if q is not None:
            used[out.scale] = q
        for name in TERMS:
            total = terms[name] if total is None else total + terms[name]
    return LossBreakdown(total, per_scale, degenerate, used)
