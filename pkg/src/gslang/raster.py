"""Tile-based forward rasterizer for colour and latent feature channels.

Pixel ``(x, y)`` is sampled at its centre ``(x + 0.5, y + 0.5)``.  Each
pixel composites its contributors front to back in ascending
``(depth, index)`` order:

    w_i = alpha_i * prod_{j<i} (1 - alpha_j),   alpha_i = o_i exp(-q_i / 2)

Contributions with ``alpha < 1/255`` are skipped and a pixel stops once its
transmittance drops below ``1e-4``.  The per-pixel weights are kept in CSR
form so the feature map is an explicit sparse linear map of the latents.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numba
import numpy as np
import scipy.sparse as sp

from .scene import Camera, Gaussian, Scene, covariances

ALPHA_MIN = 1.0 / 255.0
T_MIN = 1e-4
NEAR = 0.01
COV2D_BLUR = 0.3

# numba falls back to its own thread pool when the system TBB is too old
warnings.filterwarnings("ignore", message=".*TBB threading layer.*", category=numba.NumbaWarning)


class EmptyScene(ValueError):
    pass


@dataclass(frozen=True)
class Projected2D:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    gaussian_index: int


@dataclass(frozen=True)
class RenderOptions:
    tile_size: int = 16
    with_color: bool = True
    with_feature: bool = True


@dataclass
class RenderOutput:
    """Composited maps plus the per-pixel contributor lists (CSR, row-major pixels)."""

    color: np.ndarray
    feature: np.ndarray
    alpha_sum: np.ndarray
    contrib_ptr: np.ndarray
    contrib_index: np.ndarray
    contrib_weight: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.alpha_sum.shape

    def contributors(self, y: int, x: int) -> list[tuple[int, float]]:
        p = y * self.shape[1] + x
        lo, hi = self.contrib_ptr[p], self.contrib_ptr[p + 1]
        return list(zip(self.contrib_index[lo:hi].tolist(), self.contrib_weight[lo:hi].tolist()))

    def weight_matrix(self, n_gaussians: int) -> sp.csr_matrix:
        """Sparse (H*W, N) matrix W with feature = W @ latents."""
        h, w = self.shape
        return sp.csr_matrix(
            (self.contrib_weight, self.contrib_index, self.contrib_ptr),
            shape=(h * w, n_gaussians),
        )


@dataclass(frozen=True)
class _Projection:
    index: np.ndarray   # original gaussian ids of non-culled splats, depth-sorted
    mean2d: np.ndarray
    conic: np.ndarray   # (a, b, c) of the inverse 2D covariance
    depth: np.ndarray
    radius: np.ndarray
    cov2d: np.ndarray


def _project_arrays(mu, cov3d, opacity, cam: Camera, *, footprint_cull: bool) -> _Projection:
    rot, t = cam.rotation, cam.translation
    pc = mu @ rot.T + t
    x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
    keep = z > NEAR
    zs = np.where(keep, z, 1.0)
    n = len(mu)
    jac = np.zeros((n, 2, 3))
    jac[:, 0, 0] = cam.fx / zs
    jac[:, 0, 2] = -cam.fx * x / zs**2
    jac[:, 1, 1] = cam.fy / zs
    jac[:, 1, 2] = -cam.fy * y / zs**2
    m = jac @ rot
    cov2d = m @ cov3d @ np.swapaxes(m, 1, 2)
    cov2d = 0.5 * (cov2d + np.swapaxes(cov2d, 1, 2)) + COV2D_BLUR * np.eye(2)
    mean2d = np.stack([cam.fx * x / zs + cam.cx, cam.fy * y / zs + cam.cy], axis=1)

    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    conic = np.stack([c / det, -b / det, a / det], axis=1)
    mid = 0.5 * (a + c)
    lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    # alpha >= 1/255 only inside q <= 2 ln(255 o); q >= |delta|^2 / lam_max
    with np.errstate(divide="ignore"):
        reach = 2.0 * np.log(np.maximum(opacity, 0.0) * 255.0)
    radius = np.sqrt(lam_max * np.maximum(reach, 0.0)) * (1 + 1e-9) + 1e-9
    if footprint_cull:
        keep &= reach >= 0
        keep &= mean2d[:, 0] + radius >= 0.5
        keep &= mean2d[:, 0] - radius <= cam.width - 0.5
        keep &= mean2d[:, 1] + radius >= 0.5
        keep &= mean2d[:, 1] - radius <= cam.height - 0.5
    ids = np.flatnonzero(keep)
    order = ids[np.lexsort((ids, z[ids]))]
    return _Projection(order, mean2d[order], conic[order], z[order], radius[order], cov2d[order])


def project(g: Gaussian, cam: Camera, index: int = 0) -> Projected2D | None:
    """Screen-space footprint of one Gaussian, or ``None`` if culled."""
    cov = covariances(g.scale[None], g.rotation[None])
    pr = _project_arrays(
        g.mu[None], cov, np.array([g.opacity]), cam, footprint_cull=True
    )
    if len(pr.index) == 0:
        return None
    return Projected2D(pr.mean2d[0], pr.cov2d[0], float(pr.depth[0]), index)


def _gather(scene: Scene, opts: RenderOptions) -> np.ndarray:
    parts = []
    if opts.with_color:
        parts.append(scene.color.astype(np.float64))
    if opts.with_feature:
        parts.append(scene.latent.astype(np.float64))
    if not parts:
        return np.zeros((len(scene), 0))
    return np.concatenate(parts, axis=1)


def _split(scene: Scene, opts: RenderOptions, acc: np.ndarray, h: int, w: int):
    c0 = 3 if opts.with_color else 0
    color = acc[..., :c0] if opts.with_color else np.zeros((h, w, 3))
    feature = acc[..., c0:] if opts.with_feature else np.zeros((h, w, scene.latent_dim))
    return np.ascontiguousarray(color), np.ascontiguousarray(feature)


@numba.njit(cache=True, parallel=True)
def _raster_tiles(
    tile_start, tile_items, mean2d, conic, opac, feats, gid,
    tile, tiles_x, height, width, write, ptr, out_idx, out_w, acc, alpha, count,
):
    n_tiles = len(tile_start) - 1
    nc = feats.shape[1]
    for t in numba.prange(n_tiles):
        ty, tx = t // tiles_x, t % tiles_x
        lo, hi = tile_start[t], tile_start[t + 1]
        for py in range(ty * tile, min((ty + 1) * tile, height)):
            for px in range(tx * tile, min((tx + 1) * tile, width)):
                p = py * width + px
                fx = px + 0.5
                fy = py + 0.5
                trans = 1.0
                asum = 0.0
                k = 0
                slot = ptr[p] if write else 0
                for it in range(lo, hi):
                    g = tile_items[it]
                    dx = fx - mean2d[g, 0]
                    dy = fy - mean2d[g, 1]
                    q = conic[g, 0] * dx * dx + 2.0 * conic[g, 1] * dx * dy + conic[g, 2] * dy * dy
                    a = opac[g] * np.exp(-0.5 * q)
                    if a < 1.0 / 255.0:
                        continue
                    wgt = a * trans
                    if write:
                        out_idx[slot + k] = gid[g]
                        out_w[slot + k] = wgt
                    else:
                        for ch in range(nc):
                            acc[py, px, ch] += wgt * feats[g, ch]
                        asum += wgt
                    k += 1
                    trans = trans * (1.0 - a)
                    if trans < 1e-4:
                        break
                if not write:
                    alpha[py, px] = asum
                    count[p] = k


def render(scene: Scene, cam: Camera, opts: RenderOptions | None = None) -> RenderOutput:
    """Tile rasterizer: each tile composites only the splats whose footprint reaches it."""
    opts = opts or RenderOptions()
    if len(scene) == 0:
        raise EmptyScene("render called on an empty scene")
    if opts.tile_size < 1:
        raise ValueError("tile_size must be >= 1")
    h, w, ts = cam.height, cam.width, opts.tile_size
    tiles_x, tiles_y = -(-w // ts), -(-h // ts)
    pr = _project_arrays(
        scene.mu.astype(np.float64), scene.covariances(),
        scene.opacity.astype(np.float64), cam, footprint_cull=True,
    )
    # pixel range [ceil(m - r - .5), floor(m + r - .5)] clipped to the image
    x0 = np.clip(np.ceil(pr.mean2d[:, 0] - pr.radius - 0.5), 0, w - 1).astype(np.int64) // ts
    x1 = np.clip(np.floor(pr.mean2d[:, 0] + pr.radius - 0.5), 0, w - 1).astype(np.int64) // ts
    y0 = np.clip(np.ceil(pr.mean2d[:, 1] - pr.radius - 0.5), 0, h - 1).astype(np.int64) // ts
    y1 = np.clip(np.floor(pr.mean2d[:, 1] + pr.radius - 0.5), 0, h - 1).astype(np.int64) // ts
    nx, ny = x1 - x0 + 1, y1 - y0 + 1
    reps = nx * ny
    rank = np.repeat(np.arange(len(pr.index)), reps)
    local = np.arange(reps.sum()) - np.repeat(np.cumsum(reps) - reps, reps)
    tid = (np.repeat(y0, reps) + local // np.repeat(nx, reps)) * tiles_x + (
        np.repeat(x0, reps) + local % np.repeat(nx, reps)
    )
    # stable sort keeps depth order within each tile
    perm = np.argsort(tid, kind="stable")
    tile_items = rank[perm].astype(np.int64)
    tile_start = np.searchsorted(tid[perm], np.arange(tiles_x * tiles_y + 1)).astype(np.int64)

    feats = _gather(scene, opts)
    opac = scene.opacity.astype(np.float64)[pr.index]
    acc = np.zeros((h, w, feats.shape[1]))
    alpha = np.zeros((h, w))
    count = np.zeros(h * w, dtype=np.int64)
    args = (tile_start, tile_items, pr.mean2d, pr.conic, opac, feats[pr.index], pr.index, ts, tiles_x, h, w)
    empty_i, empty_f = np.zeros(0, np.int64), np.zeros(0)
    _raster_tiles(*args, False, count, empty_i, empty_f, acc, alpha, count)
    ptr = np.zeros(h * w + 1, dtype=np.int64)
    np.cumsum(count, out=ptr[1:])
    idx = np.zeros(ptr[-1], dtype=np.int64)
    wts = np.zeros(ptr[-1])
    _raster_tiles(*args, True, ptr, idx, wts, acc, alpha, count)
    color, feature = _split(scene, opts, acc, h, w)
    return RenderOutput(color, feature, alpha, ptr, idx, wts)


def render_bruteforce(scene: Scene, cam: Camera, opts: RenderOptions | None = None) -> RenderOutput:
    """Reference renderer: every pixel walks the full depth-sorted list."""
    opts = opts or RenderOptions()
    if len(scene) == 0:
        raise EmptyScene("render called on an empty scene")
    h, w = cam.height, cam.width
    pr = _project_arrays(
        scene.mu.astype(np.float64), scene.covariances(),
        scene.opacity.astype(np.float64), cam, footprint_cull=False,
    )
    feats = _gather(scene, opts)
    opac = scene.opacity.astype(np.float64)
    ys, xs = np.divmod(np.arange(h * w), w)
    px, py = xs + 0.5, ys + 0.5
    trans = np.ones(h * w)
    asum = np.zeros(h * w)
    acc = np.zeros((h * w, feats.shape[1]))
    live = np.ones(h * w, dtype=bool)
    rows, cols, vals = [], [], []
    for r, g in enumerate(pr.index):
        dx = px - pr.mean2d[r, 0]
        dy = py - pr.mean2d[r, 1]
        ca, cb, cc = pr.conic[r]
        a = opac[g] * np.exp(-0.5 * (ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy))
        hit = np.flatnonzero(live & (a >= ALPHA_MIN))
        if hit.size == 0:
            continue
        wgt = a[hit] * trans[hit]
        acc[hit] += wgt[:, None] * feats[g]
        asum[hit] += wgt
        trans[hit] = trans[hit] * (1.0 - a[hit])
        live[hit[trans[hit] < T_MIN]] = False
        rows.append(hit)
        cols.append(np.full(hit.size, g))
        vals.append(wgt)
    if rows:
        rows_a, cols_a, vals_a = map(np.concatenate, (rows, cols, vals))
    else:
        rows_a, cols_a, vals_a = np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0)
    # stable sort by pixel keeps per-pixel depth order
    perm = np.argsort(rows_a, kind="stable")
    ptr = np.searchsorted(rows_a[perm], np.arange(h * w + 1)).astype(np.int64)
    color, feature = _split(scene, opts, acc.reshape(h, w, -1), h, w)
    return RenderOutput(
        color, feature, asum.reshape(h, w), ptr,
        cols_a[perm].astype(np.int64), vals_a[perm],
    )
