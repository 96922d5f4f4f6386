"""Synthetic ground truth: concept dictionaries, embedding corpora and worlds.

Every generator is a pure function of its arguments and seed.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .codec import EmbeddingCorpus
from .raster import RenderOptions, render
from .scene import Camera, Scene, load_scene, save_scene
from .tensorio import load_gten, save_gten


class InfeasibleLayout(RuntimeError):
    pass


def _unit(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


@dataclass
class ConceptDictionary:
    concepts: np.ndarray  # (C, D), unit rows
    labels: list[str]
    intrinsic_dim: int
    noise: float
    seed: int

    def __post_init__(self):
        if len(self.concepts) < 1:
            raise ValueError("dictionary needs at least one concept")
        if self.intrinsic_dim > self.concepts.shape[1]:
            raise ValueError("intrinsic_dim exceeds ambient dim")

    @property
    def dim(self) -> int:
        return self.concepts.shape[1]

    def save(self, path) -> None:
        path = Path(path)
        save_gten(path, self.concepts)
        meta = {"labels": self.labels, "intrinsic_dim": self.intrinsic_dim, "noise": self.noise, "seed": self.seed}
        path.with_suffix(path.suffix + ".json").write_text(json.dumps(meta, sort_keys=True))

    @classmethod
    def load(cls, path) -> "ConceptDictionary":
        path = Path(path)
        meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
        concepts = _unit(load_gten(path).astype(np.float64))
        return cls(concepts, meta["labels"], meta["intrinsic_dim"], meta["noise"], meta["seed"])


def gen_dictionary(C: int, D: int = 512, r: int = 12, noise: float = 0.05, seed: int = 0) -> ConceptDictionary:
    """Unit vectors near an r-dimensional subspace of R^D.

    Each concept is ``normalize(u + noise * g)`` with ``u`` a random unit
    vector in the shared subspace and ``g ~ N(0, I / D)``.
    """
    if not 1 <= r <= D:
        raise ValueError(f"need 1 <= r <= D, got r={r}, D={D}")
    if C < 1:
        raise ValueError("C must be >= 1")
    rng = np.random.default_rng(seed)
    basis, _ = np.linalg.qr(rng.normal(size=(D, r)))
    u = _unit(rng.normal(size=(C, r)) @ basis.T)
    g = rng.normal(size=(C, D)) / np.sqrt(D)
    concepts = _unit(u + noise * g)
    return ConceptDictionary(concepts, [f"concept_{i:04d}" for i in range(C)], r, noise, seed)


def energy_fraction(x: np.ndarray, r: int) -> float:
    s = np.linalg.svd(x, compute_uv=False)
    return float((s[:r] ** 2).sum() / (s**2).sum())


def gen_corpus(
    dictionary: ConceptDictionary, samples_per_concept: int, jitter: float, seed: int = 0, val_fraction: float = 0.1
) -> EmbeddingCorpus:
    """Rows ``normalize(concept + jitter * g)``, ``g ~ N(0, I / D)``; seeded 90/10 split."""
    if jitter < 0:
        raise ValueError("jitter must be >= 0")
    rng = np.random.default_rng(seed)
    c = dictionary.concepts
    labels = np.repeat(np.arange(len(c)), samples_per_concept)
    rows = c[labels] + jitter * rng.normal(size=(len(labels), c.shape[1])) / np.sqrt(c.shape[1])
    rows = _unit(rows)
    n_val = int(round(val_fraction * len(rows)))
    split = np.zeros(len(rows), bool)
    split[rng.permutation(len(rows))[:n_val]] = True
    meta = {"dictionary_seed": dictionary.seed, "intrinsic_dim": dictionary.intrinsic_dim, "jitter": jitter, "seed": seed}
    return EmbeddingCorpus(rows, labels, split, meta)


@dataclass
class SyntheticWorld:
    """Ground-truth world. Regions ``0..n_objects-1`` are queryable objects;
    an optional trailing region is the backdrop."""

    scene: Scene  # latents are one-hot region indicators
    assignment: np.ndarray  # gaussian index -> region index
    concept_ids: list[int]  # region index -> dictionary concept id
    embeddings: np.ndarray  # (regions, D) ground-truth concept vectors
    cameras: list[Camera]
    gt_masks: np.ndarray  # (views, regions, H, W) bool
    gt_boxes: np.ndarray  # (views, regions, 4) inclusive x0, y0, x1, y1
    seed: int
    n_objects: int
    params: dict = field(default_factory=dict)

    @property
    def n_regions(self) -> int:
        return len(self.concept_ids)

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        save_scene(self.scene, d / "scene.gspl")
        save_gten(d / "masks.gten", self.gt_masks.astype(np.float32))
        save_gten(d / "embeddings.gten", self.embeddings)
        manifest = {
            "cameras": [c.to_dict() for c in self.cameras],
            "assignment": self.assignment.tolist(),
            "concept_ids": self.concept_ids,
            "gt_boxes": self.gt_boxes.tolist(),
            "seed": self.seed,
            "n_objects": self.n_objects,
            "params": self.params,
        }
        (d / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1))

    @classmethod
    def load(cls, directory) -> "SyntheticWorld":
        d = Path(directory)
        m = json.loads((d / "manifest.json").read_text())
        emb = load_gten(d / "embeddings.gten").astype(np.float64)
        return cls(
            load_scene(d / "scene.gspl"),
            np.array(m["assignment"], np.int64),
            m["concept_ids"],
            _unit(emb),
            [Camera.from_dict(c) for c in m["cameras"]],
            load_gten(d / "masks.gten") > 0.5,
            np.array(m["gt_boxes"], np.int64).reshape(-1, len(m["concept_ids"]), 4),
            m["seed"],
            m["n_objects"],
            m["params"],
        )


def _pick_concepts(dictionary, n, rng, max_cos):
    order = rng.permutation(len(dictionary.concepts))
    chosen: list[int] = []
    for i in order:
        v = dictionary.concepts[i]
        if all(abs(float(v @ dictionary.concepts[j])) < max_cos for j in chosen):
            chosen.append(int(i))
            if len(chosen) == n:
                return chosen
    raise InfeasibleLayout(f"dictionary has no {n} concepts with pairwise |cos| < {max_cos}")


def _random_quats(rng, n):
    return _unit(rng.normal(size=(n, 4)))


def object_weights(scene: Scene, cam: Camera, assignment, n_objects: int):
    """Per-object composited weight maps (H, W, n_objects) and alpha."""
    onehot = np.eye(n_objects)[assignment]
    out = render(scene.with_latents(onehot), cam, RenderOptions(with_color=False))
    return out.feature, out.alpha_sum


def masks_and_boxes(weights: np.ndarray, alpha: np.ndarray, share: float = 0.5, bg_alpha: float = 0.01):
    """Object masks: pixel is foreground and the object holds > ``share`` of its composited weight."""
    fg = alpha >= bg_alpha
    frac = weights / np.where(fg, alpha, 1.0)[..., None]
    masks = np.moveaxis((frac > share) & fg[..., None], -1, 0)
    boxes = np.full((len(masks), 4), -1, np.int64)
    for o, m in enumerate(masks):
        ys, xs = np.nonzero(m)
        if len(xs):
            boxes[o] = [xs.min(), ys.min(), xs.max(), ys.max()]
    return masks, boxes


def gen_world(
    n_objects: int,
    gaussians_per_object: int,
    n_views: int,
    dictionary: ConceptDictionary,
    seed: int = 0,
    *,
    width: int = 96,
    height: int = 96,
    object_radius: float = 0.45,
    layout_radius: float = 1.2,
    camera_distance: float = 4.5,
    fov_deg: float = 50.0,
    backdrop: bool = True,
    max_concept_cos: float = 0.3,
    min_mask_pixels: int = 30,
    max_retries: int = 20,
) -> SyntheticWorld:
    """Spatially separated Gaussian blobs, one concept each, seen by every camera.

    With ``backdrop`` a single huge opaque splat far behind the objects gives
    every pixel full coverage, like a wall in a captured scene; it carries its
    own concept and is supervised but never queried.
    """
    if n_objects < 1 or n_views < 1 or gaussians_per_object < 1:
        raise ValueError("need at least one object, view and gaussian per object")
    rng = np.random.default_rng(seed)
    n_regions = n_objects + int(backdrop)
    concept_ids = _pick_concepts(dictionary, n_regions, rng, max_concept_cos)
    params = {
        "n_objects": n_objects, "gaussians_per_object": gaussians_per_object, "n_views": n_views,
        "width": width, "height": height, "backdrop": backdrop, "dictionary_seed": dictionary.seed,
    }
    for _attempt in range(max_retries):
        if n_objects == 1:
            centers = np.zeros((1, 3))
        else:
            ang = 2 * np.pi * (np.arange(n_objects) + rng.uniform(-0.15, 0.15, n_objects)) / n_objects
            centers = np.stack(
                [layout_radius * np.cos(ang), rng.uniform(-0.2, 0.2, n_objects), layout_radius * np.sin(ang)], 1
            )
        n = n_objects * gaussians_per_object
        assignment = np.repeat(np.arange(n_objects), gaussians_per_object)
        offs = rng.normal(size=(n, 3))
        offs *= (object_radius * rng.uniform(0, 1, n) ** (1 / 3) / np.linalg.norm(offs, axis=1))[:, None]
        mu = centers[assignment] + offs
        scale = rng.uniform(0.06, 0.14, (n, 3))
        quat = _random_quats(rng, n)
        base = rng.uniform(0.15, 0.9, (n_objects, 3))
        color = np.clip(base[assignment] + rng.normal(0, 0.03, (n, 3)), 0, 1)
        opacity = rng.uniform(0.85, 1.0, n)

        az = np.radians(np.linspace(-50, 50, n_views) if n_views > 1 else [0.0]) + rng.uniform(-0.1, 0.1, n_views)
        el = np.radians(rng.uniform(20, 40, n_views))
        eyes = camera_distance * np.stack([np.sin(az) * np.cos(el), -np.sin(el), -np.cos(az) * np.cos(el)], 1)
        cams = [Camera.look_at(e, (0, 0, 0), fov_deg=fov_deg, width=width, height=height) for e in eyes]
        if backdrop:
            away = -eyes.mean(axis=0)
            away /= np.linalg.norm(away)
            mu = np.vstack([mu, 60.0 * away])
            scale = np.vstack([scale, np.full((1, 3), 150.0)])
            quat = np.vstack([quat, [[1.0, 0, 0, 0]]])
            color = np.vstack([color, [[0.5, 0.5, 0.5]]])
            opacity = np.append(opacity, 1.0)
            assignment = np.append(assignment, n_objects)
        scene = Scene(
            mu, scale, quat, color, opacity, np.eye(n_regions)[assignment],
            {"name": f"synthetic-{seed}", "seed": seed, **params},
        )
        masks, boxes = [], []
        for cam in cams:
            wts, alpha = object_weights(scene, cam, assignment, n_regions)
            m, b = masks_and_boxes(wts, alpha)
            masks.append(m)
            boxes.append(b)
        masks = np.stack(masks)
        if masks[:, :n_objects].sum(axis=(2, 3)).min() >= min_mask_pixels:
            return SyntheticWorld(
                scene, assignment, concept_ids, dictionary.concepts[concept_ids].copy(), cams,
                masks, np.stack(boxes), seed, n_objects, params,
            )
    raise InfeasibleLayout(f"no layout with every object visible in every view after {max_retries} tries")


def view_mask_sets(world: SyntheticWorld, jitter: float = 0.0, seed: int = 0):
    """SAM/CLIP stand-in: per view, one level of (mask, embedding) pairs over all regions."""
    rng = np.random.default_rng(seed)
    views = []
    for v, cam in enumerate(world.cameras):
        pairs = []
        for o in range(world.n_regions):
            emb = world.embeddings[o]
            if jitter:
                emb = _unit(emb + jitter * rng.normal(size=emb.shape) / np.sqrt(len(emb)))
            pairs.append((world.gt_masks[v, o], emb))
        views.append((cam, [pairs]))
    return views
