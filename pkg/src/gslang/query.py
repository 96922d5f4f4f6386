"""Open-vocabulary querying of rendered latent maps, plus masks and metrics."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .codec import Autoencoder, cosine_rows
from .tensorio import DimensionMismatch

DEFAULT_THRESHOLD = 0.5
BG_ALPHA = 0.01


@dataclass(frozen=True)
class Query:
    label: str
    embedding: np.ndarray

    def __post_init__(self):
        e = np.asarray(self.embedding, dtype=np.float64)
        if abs(np.linalg.norm(e) - 1.0) > 1e-5:
            raise ValueError("query embedding must be unit norm")
        object.__setattr__(self, "embedding", e)


@dataclass
class QueryResult:
    label: str
    relevancy: np.ndarray
    mask: np.ndarray
    loc_point: tuple[int, int]  # (x, y)
    score_at_loc: float


def decode_map(Z, ae: Autoencoder) -> np.ndarray:
    Z = np.asarray(Z, dtype=np.float64)
    if Z.shape[-1] != ae.latent_dim:
        raise DimensionMismatch(f"latent map width {Z.shape[-1]} != autoencoder k {ae.latent_dim}")
    return ae.decode(Z.reshape(-1, Z.shape[-1])).reshape(Z.shape[:-1] + (ae.input_dim,))


def relevancy_from_decoded(decoded, alpha_sum, q: Query, bg_alpha: float = BG_ALPHA) -> np.ndarray:
    h, w = decoded.shape[:2]
    if decoded.shape[-1] != len(q.embedding):
        raise DimensionMismatch("query embedding dim differs from decoded features")
    rel = cosine_rows(decoded.reshape(h * w, -1), q.embedding[None]).reshape(h, w)
    return np.where(np.asarray(alpha_sum) < bg_alpha, -1.0, rel)


def relevancy_map(Z, ae: Autoencoder, q: Query, alpha_sum=None, bg_alpha: float = BG_ALPHA) -> np.ndarray:
    """Per-pixel cosine between the normalized decoded feature and the query.

    Pixels whose accumulated opacity is below ``bg_alpha`` score -1.
    """
    if alpha_sum is None:
        alpha_sum = np.ones(np.shape(Z)[:2])
    return relevancy_from_decoded(decode_map(Z, ae), alpha_sum, q, bg_alpha)


def segment(relevancy, threshold: float = DEFAULT_THRESHOLD) -> np.ndarray:
    return np.asarray(relevancy) >= threshold


def localize(relevancy) -> tuple[int, int]:
    """Argmax pixel as (x, y); ties go to the smallest row-major index."""
    r = np.asarray(relevancy)
    y, x = np.unravel_index(int(np.argmax(r)), r.shape)
    return int(x), int(y)


def run_query(Z, alpha_sum, ae, q: Query, threshold=DEFAULT_THRESHOLD, decoded=None) -> QueryResult:
    rel = relevancy_from_decoded(decode_map(Z, ae) if decoded is None else decoded, alpha_sum, q)
    x, y = localize(rel)
    return QueryResult(q.label, rel, segment(rel, threshold), (x, y), float(rel[y, x]))


def iou(mask, gt_mask) -> float:
    mask, gt_mask = np.asarray(mask, bool), np.asarray(gt_mask, bool)
    if mask.shape != gt_mask.shape:
        raise DimensionMismatch(f"mask {mask.shape} vs ground truth {gt_mask.shape}")
    union = np.logical_or(mask, gt_mask).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(mask, gt_mask).sum() / union)


def miou(pairs) -> float:
    vals = [iou(m, g) for m, g in pairs]
    return float(np.mean(vals)) if vals else float("nan")


def localization_accuracy(items) -> float:
    """Fraction of ``((x, y), (x0, y0, x1, y1))`` points inside their inclusive box."""
    items = list(items)
    if not items:
        return float("nan")
    hits = sum(x0 <= x <= x1 and y0 <= y <= y1 for (x, y), (x0, y0, x1, y1) in items)
    return hits / len(items)


def pca_visualize(Z, valid=None) -> np.ndarray:
    """Top-3 principal components of the valid latents, min-max scaled to [0, 1].

    Each component's sign is fixed so its largest-magnitude loading is
    positive. Components with zero variance are filled with 0.5, as are
    invalid pixels.
    """
    Z = np.asarray(Z, dtype=np.float64)
    h, w, d = Z.shape
    valid = np.ones((h, w), bool) if valid is None else np.asarray(valid, bool)
    if valid.sum() < 3:
        raise ValueError("pca_visualize needs at least 3 valid pixels")
    x = Z[valid]
    x = x - x.mean(axis=0)
    _, s, vt = np.linalg.svd(x, full_matrices=False)
    tol = max(x.shape) * np.finfo(float).eps * (s[0] if len(s) else 0.0)
    img = np.full((h, w, 3), 0.5)
    for c in range(min(3, len(s))):
        if s[c] <= tol or s[c] == 0:
            continue
        v = vt[c]
        v = v * np.sign(v[np.argmax(np.abs(v))])
        p = x @ v
        lo, hi = p.min(), p.max()
        if hi - lo <= 0:
            continue
        img[valid, c] = (p - lo) / (hi - lo)
    return img
