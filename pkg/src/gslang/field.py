"""Frozen-geometry language-field fitting and the toy RGB stage.

With geometry fixed the rendered latent map of a view is ``W_v @ z`` where
``W_v`` is the sparse compositing-weight matrix recorded by the rasterizer,
so latent gradients are exactly ``W_v^T dL/dZ``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .codec import Adam, Autoencoder, FrozenError, TrainingDiverged, cosine_grad, cosine_rows
from .raster import RenderOptions, render
from .scene import Camera, Scene
from .tensorio import DimensionMismatch, load_gten, save_gten


class EmptySupervision(ValueError):
    pass


@dataclass
class TargetFeatureMap:
    target: np.ndarray  # (H, W, k)
    valid: np.ndarray  # (H, W) bool
    view_id: int
    level: int = 0

    def save(self, path) -> None:
        """GTEN of shape (H, W, k + 1); the last channel is the validity mask."""
        save_gten(path, np.concatenate([self.target, self.valid[..., None]], axis=-1))

    @classmethod
    def load(cls, path, view_id: int, level: int = 0) -> "TargetFeatureMap":
        a = load_gten(path).astype(np.float64)
        return cls(a[..., :-1], a[..., -1] > 0.5, view_id, level)


@dataclass(frozen=True)
class FieldTrainConfig:
    gamma: float = 0.5
    beta: float = 1.0
    lr: float = 2.5e-3
    lr_final_ratio: float = 0.1
    iterations: int = 1000
    seed: int = 0
    rgb_stage_iters: int = 0
    rgb_lr: float = 1e-2

    def __post_init__(self):
        if self.gamma < 0 or self.beta < 0:
            raise ValueError("gamma and beta must be >= 0")
        if self.iterations < 0 or self.rgb_stage_iters < 0:
            raise ValueError("iteration counts must be >= 0")


def build_targets(views, ae: Autoencoder) -> list[TargetFeatureMap]:
    """Encode per-mask embeddings and paint them over their masks.

    ``views`` is a sequence of ``(camera, levels)`` where ``levels`` is a list
    of hierarchy levels, each a list of ``(mask, embedding)`` pairs.
    """
    if not ae.frozen:
        raise FrozenError("targets must come from a frozen encoder")
    out = []
    for vid, (cam, levels) in enumerate(views):
        for lvl, pairs in enumerate(levels):
            tgt = np.zeros((cam.height, cam.width, ae.latent_dim))
            valid = np.zeros((cam.height, cam.width), bool)
            if pairs:
                embs = np.stack([np.asarray(e, dtype=np.float64) for _, e in pairs])
                if embs.shape[1] != ae.input_dim:
                    raise DimensionMismatch(f"embedding dim {embs.shape[1]} != encoder input {ae.input_dim}")
                codes = ae.encode(embs)
            for (mask, _), code in zip(pairs, codes if pairs else []):
                mask = np.asarray(mask, bool)
                if mask.shape != valid.shape:
                    raise DimensionMismatch("mask shape differs from camera image size")
                if np.any(valid & mask):
                    raise ValueError(f"overlapping masks at view {vid}, level {lvl}")
                tgt[mask] = code
                valid |= mask
            out.append(TargetFeatureMap(tgt, valid, vid, lvl))
    return out


def _lang_terms(z, h, gamma):
    diff = z - h
    l1 = np.abs(diff).sum(axis=-1)
    cos = cosine_rows(z, h)
    grad = np.sign(diff) - gamma * cosine_grad(z, h)
    return l1, 1.0 - cos, grad


def lang_loss(Z, H: TargetFeatureMap, gamma: float = 0.5) -> tuple[float, np.ndarray]:
    """Mean over valid pixels of ``|Z-H|_1 + gamma (1 - cos(Z, H))`` and dL/dZ."""
    Z = np.asarray(Z, dtype=np.float64)
    if Z.shape != H.target.shape:
        raise DimensionMismatch(f"feature map {Z.shape} vs target {H.target.shape}")
    n = int(H.valid.sum())
    if n == 0:
        raise EmptySupervision("target has no valid pixels")
    l1, cos_term, g = _lang_terms(Z[H.valid], H.target[H.valid], gamma)
    grad = np.zeros_like(Z)
    grad[H.valid] = g / n
    return float((l1 + gamma * cos_term).mean()), grad


@dataclass
class FieldResult:
    scene: Scene
    curve: list[dict] = field(default_factory=list)

    def write_log(self, path) -> None:
        Path(path).write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in self.curve))


def _lr_at(cfg, t, total):
    if total <= 1:
        return cfg.lr
    return cfg.lr * cfg.lr_final_ratio ** (t / (total - 1))


def weight_matrices(scene: Scene, cameras: Sequence[Camera]):
    return [
        render(scene, cam, RenderOptions(with_color=False, with_feature=False)).weight_matrix(len(scene))
        for cam in cameras
    ]


def supervised_rows(weights, targets: Sequence[TargetFeatureMap]):
    """Restrict one view's weight matrix to each level's supervised pixels."""
    return [
        (t.level, weights[np.flatnonzero(t.valid.ravel())], t.target[t.valid])
        for t in targets
        if t.valid.any()
    ]


def view_objective(z, rows, k: int, cfg: FieldTrainConfig):
    """beta * sum over levels of the language loss for one view, and its latent gradient.

    The rendered map is ``W z`` so the gradient is ``W^T dL/dZ``.
    """
    grad = np.zeros_like(z)
    l1_sum = cos_sum = 0.0
    for lvl, w, h in rows:
        cols = slice(lvl * k, (lvl + 1) * k)
        l1, cos_term, g = _lang_terms(w @ z[:, cols], h, cfg.gamma)
        grad[:, cols] += cfg.beta * (w.T @ (g / len(h)))
        l1_sum += l1.mean()
        cos_sum += cos_term.mean()
    return cfg.beta * (l1_sum + cfg.gamma * cos_sum), l1_sum, cos_sum, grad


def train_language_field(
    scene: Scene, cameras: Sequence[Camera], targets: Sequence[TargetFeatureMap], cfg: FieldTrainConfig
) -> FieldResult:
    """Fit per-Gaussian latents to the targets; every other field is left untouched.

    Levels are independent channel groups: latent width is ``levels * k``.
    Iteration ``t`` uses view ``t mod n_views`` (all of its levels).
    """
    if not targets:
        raise EmptySupervision("no targets")
    k = targets[0].target.shape[-1]
    n_levels = max(t.level for t in targets) + 1
    by_view: dict[int, list[TargetFeatureMap]] = {}
    for t in targets:
        if t.target.shape[-1] != k:
            raise DimensionMismatch("all targets must share latent width")
        by_view.setdefault(t.view_id, []).append(t)
    if sum(int(t.valid.sum()) for t in targets) == 0:
        raise EmptySupervision("targets cover no pixels")
    if cfg.iterations == 0:
        return FieldResult(scene, [])
    view_ids = sorted(by_view)
    mats = dict(zip(view_ids, weight_matrices(scene, [cameras[v] for v in view_ids])))
    work = {v: supervised_rows(mats[v], by_view[v]) for v in view_ids}
    view_ids = [v for v in view_ids if work[v]]

    z = np.zeros((len(scene), n_levels * k))
    opt = Adam([z], cfg.lr)
    curve = []
    for it in range(cfg.iterations):
        v = view_ids[it % len(view_ids)]
        total, l1_sum, cos_sum, grad = view_objective(z, work[v], k, cfg)
        if not np.isfinite(total) or not np.all(np.isfinite(grad)):
            raise TrainingDiverged(f"language field diverged at iteration {it}")
        opt.step([grad], lr=_lr_at(cfg, it, cfg.iterations))
        curve.append({"iter": it, "view": int(v), "loss_l1": float(l1_sum), "loss_cos": float(cos_sum), "total": float(total)})
    return FieldResult(scene.with_latents(z), curve)


def _segment_cumsum(values, ptr):
    """Inclusive cumulative sum restarting at each CSR segment."""
    cs = np.cumsum(values, axis=0)
    prefix = np.concatenate([np.zeros((1,) + values.shape[1:]), cs])
    return cs - prefix[np.repeat(ptr[:-1], np.diff(ptr))]


def rgb_loss_and_grads(scene: Scene, cam: Camera, image):
    """Mean-pixel L1 photometric loss with gradients wrt colour and opacity.

    Uses the recorded weights: with ``T_i`` the transmittance before splat i,
    ``dC/dalpha_i = c_i T_i - (sum_{j>i} c_j w_j) / (1 - alpha_i)`` and
    ``dalpha_i/do_i = alpha_i / o_i``.
    """
    out = render(scene, cam, RenderOptions(with_feature=False))
    h, w = out.shape
    npx = h * w
    resid = out.color - np.asarray(image, dtype=np.float64)
    loss = float(np.abs(resid).sum() / npx)
    g_pix = (np.sign(resid) / npx).reshape(npx, 3)

    ptr, idx, wts = out.contrib_ptr, out.contrib_index, out.contrib_weight
    pix = np.repeat(np.arange(npx), np.diff(ptr))
    col = scene.color.astype(np.float64)[idx]
    trans = 1.0 - (_segment_cumsum(wts, ptr) - wts)
    alpha = wts / np.maximum(trans, 1e-300)
    cw = col * wts[:, None]
    after = _segment_cumsum(cw[::-1], _reverse_ptr(ptr))[::-1] - cw
    dc_dalpha = col * trans[:, None] - after / np.maximum(1.0 - alpha, 1e-12)[:, None]
    gp = g_pix[pix]
    n = len(scene)
    g_color = np.zeros((n, 3))
    np.add.at(g_color, idx, gp * wts[:, None])
    g_alpha = (gp * dc_dalpha).sum(axis=1)
    opac = scene.opacity.astype(np.float64)[idx]
    g_opac = np.zeros(n)
    np.add.at(g_opac, idx, g_alpha * alpha / np.maximum(opac, 1e-12))
    return loss, g_color, g_opac


def _reverse_ptr(ptr):
    """Segment pointers for the reversed flat array."""
    total = ptr[-1]
    return (total - ptr[::-1]).astype(np.int64)


def rgb_stage(
    scene: Scene, views, cfg: FieldTrainConfig, *, skip: bool = False, optimize_opacity: bool = True
) -> tuple[Scene, list[dict]]:
    """Toy photometric stage: Adam on colour and opacity, geometry fixed.

    ``views`` is a sequence of ``(camera, image)``. With ``optimize_opacity``
    off the blend weights stay fixed and the problem is convex in colour.
    """
    if skip or cfg.rgb_stage_iters == 0:
        return scene, []
    if not views:
        raise ValueError("rgb_stage needs at least one view")
    color = scene.color.astype(np.float64).copy()
    opac = scene.opacity.astype(np.float64).copy()
    opt = Adam([color, opac], cfg.rgb_lr)
    curve = []
    cur = scene
    for it in range(cfg.rgb_stage_iters):
        cam, img = views[it % len(views)]
        loss, gc, go = rgb_loss_and_grads(cur, cam, img)
        if not np.isfinite(loss):
            raise TrainingDiverged(f"rgb stage diverged at iteration {it}")
        if not optimize_opacity:
            go = np.zeros_like(go)
        opt.step([gc, go], lr=cfg.rgb_lr * cfg.lr_final_ratio ** (it / max(cfg.rgb_stage_iters - 1, 1)))
        np.clip(color, 0, 1, out=color)
        np.clip(opac, 0, 1, out=opac)
        cur = scene.with_appearance(color=color, opacity=opac)
        curve.append({"iter": it, "loss_rgb": loss})
    return cur, curve
