"""End-to-end driver, latent-width ablation and the efficiency comparison."""
from __future__ import annotations

import hashlib
import json
import statistics
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import codec
from .codec import Autoencoder, EmbeddingCorpus, TrainConfig, TrainingDiverged, fidelity_report, train_autoencoder
from .field import FieldTrainConfig, build_targets, rgb_stage, train_language_field
from .query import DEFAULT_THRESHOLD, Query, decode_map, iou, localization_accuracy, pca_visualize, run_query
from .raster import RenderOptions, render
from .synth import SyntheticWorld, gen_corpus, view_mask_sets


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause


def config_hash(cfg) -> str:
    if hasattr(cfg, "__dataclass_fields__"):
        cfg = asdict(cfg)
    blob = json.dumps(cfg, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------- pipeline


@dataclass(frozen=True)
class PipelineConfig:
    field: FieldTrainConfig = FieldTrainConfig(iterations=2000)
    threshold: float = DEFAULT_THRESHOLD
    run_rgb_stage: bool = False
    mask_jitter: float = 0.0


@dataclass
class PipelineResult:
    scene: object
    metrics: dict
    queries: list  # [view][object] -> QueryResult
    colors: list
    pca: list
    curve: list


def _stage(name, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except (TrainingDiverged, ValueError, RuntimeError) as e:
        raise StageError(name, e) from e


def evaluate(scene, world: SyntheticWorld, ae: Autoencoder, threshold=DEFAULT_THRESHOLD):
    """Query every planted object in every view against the oracle masks/boxes."""
    n_obj = world.n_objects
    queries = [Query(f"object_{o}", world.embeddings[o]) for o in range(n_obj)]
    per_obj = np.zeros((len(world.cameras), n_obj))
    rel_means = np.zeros((n_obj, n_obj))  # [query, object]
    locs, results, colors, pcas = [], [], [], []
    for v, cam in enumerate(world.cameras):
        out = render(scene, cam)
        colors.append(out.color)
        pcas.append(pca_visualize(out.feature, out.alpha_sum >= 0.01))
        decoded = decode_map(out.feature, ae)
        row = []
        for o, q in enumerate(queries):
            r = run_query(out.feature, out.alpha_sum, ae, q, threshold, decoded=decoded)
            row.append(r)
            per_obj[v, o] = iou(r.mask, world.gt_masks[v, o])
            locs.append((r.loc_point, tuple(int(b) for b in world.gt_boxes[v, o])))
            for j in range(n_obj):
                rel_means[o, j] += r.relevancy[world.gt_masks[v, j]].mean() / len(world.cameras)
        results.append(row)
    own = np.diag(rel_means)
    others = np.where(np.eye(n_obj, dtype=bool), -np.inf, rel_means)
    margin = float((own - others.max(axis=0)).min()) if n_obj > 1 else float("nan")
    metrics = {
        "per_object_iou": per_obj.mean(axis=0).tolist(),
        "mean_iou": float(per_obj.mean()),
        "miou": float(per_obj.mean()),
        "localization_accuracy": float(localization_accuracy(locs)),
        "relevancy_means": rel_means.tolist(),
        "relevancy_margin": margin,
        "threshold": threshold,
    }
    return metrics, results, colors, pcas


def run_pipeline(world: SyntheticWorld, ae: Autoencoder, cfg: PipelineConfig = PipelineConfig()) -> PipelineResult:
    """Optional RGB stage, targets, language field, then per-object queries."""
    scene = world.scene
    if cfg.run_rgb_stage:
        images = [render(scene, c, RenderOptions(with_feature=False)).color for c in world.cameras]
        scene, _ = _stage("rgb", rgb_stage, scene, list(zip(world.cameras, images)), cfg.field)
    views = view_mask_sets(world, jitter=cfg.mask_jitter, seed=world.seed)
    targets = _stage("targets", build_targets, views, ae)
    fr = _stage("field", train_language_field, scene, world.cameras, targets, cfg.field)
    metrics, results, colors, pcas = _stage("query", evaluate, fr.scene, world, ae, cfg.threshold)
    metrics["final_loss"] = fr.curve[-1]["total"] if fr.curve else None
    metrics["config_hash"] = config_hash(cfg)
    return PipelineResult(fr.scene, metrics, results, colors, pcas, fr.curve)


# ---------------------------------------------------------------- ablation


@dataclass
class AblationResult:
    rows: list[dict]
    corpus_id: str
    config_hash: str

    def to_csv(self) -> str:
        lines = [f"# config_hash={self.config_hash} corpus={self.corpus_id} mse=sum_sq/D", "k,val_mse,val_cosine,steps,status"]
        for r in self.rows:
            lines.append(f"{r['k']},{r['val_mse']:.9e},{r['val_cosine']:.9f},{r['steps']},{r['status']}")
        return "\n".join(lines) + "\n"


def corpus_id(corpus: EmbeddingCorpus) -> str:
    h = hashlib.sha256(np.ascontiguousarray(corpus.rows, dtype="<f8").tobytes())
    h.update(corpus.split.tobytes())
    return h.hexdigest()[:16]


def run_ablation(corpus: EmbeddingCorpus, ks: Sequence[int], cfg: TrainConfig) -> AblationResult:
    """One AE per latent width with identical budget; each seeded from (seed, k)."""
    ks = list(ks)
    if not ks:
        raise ValueError("ks must be non-empty")
    if any(b <= a for a, b in zip(ks, ks[1:])):
        raise ValueError("ks must be strictly increasing")
    rows = []
    for k in ks:
        t0 = time.perf_counter()
        try:
            res = train_autoencoder(corpus, k, cfg)
        except TrainingDiverged as e:
            rows.append({"k": k, "val_mse": float("nan"), "val_cosine": float("nan"), "steps": 0,
                         "train_seconds": time.perf_counter() - t0, "status": f"diverged: {e}"})
            continue
        dt = time.perf_counter() - t0
        rep = fidelity_report(res.ae, corpus)
        rows.append({"k": k, "val_mse": rep["mse"], "val_cosine": rep["cosine"], "steps": res.steps,
                     "train_seconds": dt, "status": "ok"})
    return AblationResult(rows, corpus_id(corpus), config_hash({"ks": ks, "train": asdict(cfg)}))


def svg_line_chart(xs, series: dict[str, Sequence[float]], title: str, xlabel: str, provenance: str = "",
                   logx: bool = True, width: int = 560, height: int = 360) -> str:
    """Minimal standalone SVG; each series gets its own y scale (left/right axes)."""
    pad_l, pad_r, pad_t, pad_b = 60, 60, 36, 44
    xs = np.asarray(xs, dtype=float)
    xv = np.log2(xs) if logx else xs
    x0, x1 = float(xv.min()), float(xv.max()) if xv.max() > xv.min() else float(xv.min()) + 1
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"]

    def sx(v):
        return pad_l + (v - x0) / (x1 - x0) * (width - pad_l - pad_r)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">']
    if provenance:
        out.append(f"<!-- {provenance} -->")
    out.append(f'<rect width="{width}" height="{height}" fill="white"/>')
    out.append(f'<text x="{width / 2}" y="20" text-anchor="middle" font-size="14">{title}</text>')
    out.append(f'<line x1="{pad_l}" y1="{height - pad_b}" x2="{width - pad_r}" y2="{height - pad_b}" stroke="black"/>')
    for x, v in zip(xs, xv):
        out.append(f'<text x="{sx(v):.1f}" y="{height - pad_b + 16}" text-anchor="middle" font-size="11">{x:g}</text>')
    out.append(f'<text x="{width / 2}" y="{height - 8}" text-anchor="middle" font-size="12">{xlabel}</text>')
    for i, (name, ys) in enumerate(series.items()):
        ys = np.asarray(ys, dtype=float)
        ok = np.isfinite(ys)
        lo, hi = (float(ys[ok].min()), float(ys[ok].max())) if ok.any() else (0.0, 1.0)
        if hi <= lo:
            hi = lo + 1.0

        def sy(v, lo=lo, hi=hi):
            return height - pad_b - (v - lo) / (hi - lo) * (height - pad_t - pad_b)

        col = colors[i % len(colors)]
        pts = " ".join(f"{sx(a):.1f},{sy(b):.1f}" for a, b, k in zip(xv, ys, ok) if k)
        out.append(f'<polyline fill="none" stroke="{col}" stroke-width="2" points="{pts}"/>')
        ax = pad_l if i == 0 else width - pad_r
        anchor = "end" if i == 0 else "start"
        dx = -4 if i == 0 else 4
        out.append(f'<line x1="{ax}" y1="{pad_t}" x2="{ax}" y2="{height - pad_b}" stroke="{col}"/>')
        for v in (lo, hi):
            out.append(f'<text x="{ax + dx}" y="{sy(v):.1f}" text-anchor="{anchor}" font-size="10" fill="{col}">{v:.3g}</text>')
        out.append(f'<text x="{ax + dx}" y="{pad_t - 6}" text-anchor="{anchor}" font-size="11" fill="{col}">{name}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------- efficiency


@dataclass(frozen=True)
class EfficiencyConfig:
    field: FieldTrainConfig = FieldTrainConfig(iterations=300)
    ae: TrainConfig = TrainConfig()
    ae_steps: int | None = None  # None: match per-scene AE wall-clock to the field stage
    latent_dim: int = 16
    samples_per_concept: int = 256
    jitter: float = 0.25
    repetitions: int = 3
    calibration_steps: int = 20


@dataclass
class EfficiencyReport:
    per_scene_seconds: float
    generalized_seconds: float
    speedup: float
    scene_count: int
    pretrain_seconds: float
    amortized_speedup: float
    ae_steps_per_scene: int
    ae_steps_generalized: int
    per_world: list[dict] = field(default_factory=list)
    config_hash: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


def _timed(fn, *args, **kw):
    t0 = time.perf_counter()
    out = fn(*args, **kw)
    return time.perf_counter() - t0, out


def _world_corpus(world: SyntheticWorld, cfg: EfficiencyConfig, seed: int) -> EmbeddingCorpus:
    """Per-scene training set: jittered copies of the world's own region embeddings."""
    from .synth import ConceptDictionary

    d = ConceptDictionary(world.embeddings, [str(c) for c in world.concept_ids], world.embeddings.shape[1], 0.0, seed)
    return gen_corpus(d, cfg.samples_per_concept, cfg.jitter, seed=seed)


def _field_stage(world, ae, cfg: EfficiencyConfig):
    targets = build_targets(view_mask_sets(world), ae)
    return train_language_field(world.scene, world.cameras, targets, cfg.field)


def calibrate_ae_steps(world, shared_ae: Autoencoder, cfg: EfficiencyConfig, seed: int) -> int:
    """AE steps whose wall-clock matches one world's full field stage.

    AE cost is modelled as ``intercept + slope * steps`` from two probe runs.
    """
    corpus = _world_corpus(world, cfg, seed)
    t_field = statistics.median(_timed(_field_stage, world, shared_ae, cfg)[0] for _ in range(3))
    probes = (cfg.calibration_steps, 4 * cfg.calibration_steps)
    t = []
    for n in probes:
        ae_cfg = TrainConfig(**{**asdict(cfg.ae), "max_steps": n, "seed": seed})
        t.append(statistics.median(_timed(train_autoencoder, corpus, cfg.latent_dim, ae_cfg)[0] for _ in range(3)))
    slope = max((t[1] - t[0]) / (probes[1] - probes[0]), 1e-9)
    intercept = max(t[0] - slope * probes[0], 0.0)
    return max(1, int(round((t_field - intercept) / slope)))


def run_efficiency(
    worlds: Sequence[SyntheticWorld], shared_corpus: EmbeddingCorpus, cfg: EfficiencyConfig, seed: int = 0,
    shared_ae: Autoencoder | None = None, pretrain_seconds: float = 0.0,
) -> EfficiencyReport:
    """Per-scene mode trains a fresh AE then the field for every world; generalized
    mode reuses one frozen AE and trains only the field. Timings are medians
    over ``cfg.repetitions`` of a monotonic clock around training only.
    """
    if len(worlds) < 2:
        raise ValueError("run_efficiency needs at least two worlds")
    if shared_ae is None:
        t_pre, res = _timed(train_autoencoder, shared_corpus, cfg.latent_dim, TrainConfig(**{**asdict(cfg.ae), "seed": seed}))
        shared_ae = res.ae
    else:
        t_pre = pretrain_seconds
    ae_steps = cfg.ae_steps if cfg.ae_steps is not None else calibrate_ae_steps(worlds[0], shared_ae, cfg, seed)

    per_world = []
    gen_steps = 0
    for wi, world in enumerate(worlds):
        corpus = _world_corpus(world, cfg, seed + wi)
        a_times, b_times, ae_times = [], [], []
        for _ in range(cfg.repetitions):
            if ae_steps > 0:
                ae_cfg = TrainConfig(**{**asdict(cfg.ae), "max_steps": ae_steps, "seed": seed + wi})
                t_ae, res = _timed(train_autoencoder, corpus, cfg.latent_dim, ae_cfg)
                scene_ae = res.ae
            else:
                t_ae, scene_ae = 0.0, shared_ae
            t_field_a, _ = _timed(_field_stage, world, scene_ae, cfg)
            a_times.append(t_ae + t_field_a)
            ae_times.append(t_ae)
            before = codec.gradient_steps_taken()
            t_field_b, _ = _timed(_field_stage, world, shared_ae, cfg)
            gen_steps += codec.gradient_steps_taken() - before
            b_times.append(t_field_b)
        per_world.append({"world_seed": world.seed, "per_scene_seconds": statistics.median(a_times),
                          "per_scene_ae_seconds": statistics.median(ae_times),
                          "generalized_seconds": statistics.median(b_times)})
    a_total = sum(p["per_scene_seconds"] for p in per_world)
    b_total = sum(p["generalized_seconds"] for p in per_world)
    if a_total <= 1e-6 or b_total <= 1e-6:
        raise RuntimeError("measured time below clock resolution")
    return EfficiencyReport(
        per_scene_seconds=a_total,
        generalized_seconds=b_total,
        speedup=a_total / b_total,
        scene_count=len(worlds),
        pretrain_seconds=t_pre,
        amortized_speedup=a_total / (b_total + t_pre),
        ae_steps_per_scene=ae_steps,
        ae_steps_generalized=gen_steps,
        per_world=per_world,
        config_hash=config_hash(cfg),
    )
