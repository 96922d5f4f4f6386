"""Command line entry point.

Every subcommand accepts ``--config file.json`` whose keys match the long
flag names (dashes or underscores); explicit flags override the file.
Exit codes: 0 ok, 2 config error, 3 numerical divergence, 4 I/O error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .codec import (
    EmbeddingCorpus, LossMode, TrainConfig, TrainingDiverged, fidelity_report, load_autoencoder, save_autoencoder,
    train_autoencoder,
)
from .field import FieldTrainConfig, build_targets, rgb_stage, train_language_field
from .harness import (
    EfficiencyConfig, StageError, config_hash, evaluate, run_ablation, run_efficiency, svg_line_chart,
)
from .query import Query, run_query
from .raster import RenderOptions, render
from .scene import Camera, load_scene, save_scene
from .synth import (
    ConceptDictionary, InfeasibleLayout, SyntheticWorld, gen_corpus, gen_dictionary, gen_world, view_mask_sets,
)
from .tensorio import FormatError, load_gten, save_gten, save_pgm, save_ppm

log = logging.getLogger("gslang")

EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 2, 3, 4


class ConfigError(Exception):
    pass


# name -> (type, default); default REQUIRED means it must come from flag or config
REQUIRED = object()

COMMANDS: dict[str, dict] = {
    "gen-corpus": {
        "help": "generate a concept dictionary and an embedding corpus",
        "params": {
            "seed": (int, REQUIRED), "out": (str, REQUIRED), "concepts": (int, 1000), "dim": (int, 512),
            "intrinsic_dim": (int, 12), "noise": (float, 0.05), "samples_per_concept": (int, 20),
            "jitter": (float, 0.25),
        },
    },
    "synth-gen": {
        "help": "generate a synthetic ground-truth world",
        "params": {
            "seed": (int, REQUIRED), "out": (str, REQUIRED), "dictionary": (str, REQUIRED), "objects": (int, 3),
            "gaussians_per_object": (int, 80), "views": (int, 5), "width": (int, 96), "height": (int, 96),
            "backdrop": (bool, True),
        },
    },
    "train-ae": {
        "help": "train and freeze the generalized autoencoder",
        "params": {
            "seed": (int, REQUIRED), "out": (str, REQUIRED), "corpus": (str, REQUIRED), "k": (int, 16),
            "epochs": (int, 10), "loss_mode": (str, "L1_COS"), "lam": (float, 0.5), "lr": (float, 1e-3),
            "batch_size": (int, 256),
        },
    },
    "train-field": {
        "help": "fit per-Gaussian latents with geometry frozen",
        "params": {
            "seed": (int, REQUIRED), "out": (str, REQUIRED), "world": (str, REQUIRED), "ae": (str, REQUIRED),
            "iterations": (int, 2000), "gamma": (float, 0.5), "beta": (float, 1.0), "lr": (float, 2.5e-3),
            "lr_final_ratio": (float, 0.1), "rgb_stage_iters": (int, 0), "rgb_lr": (float, 1e-2),
        },
    },
    "render": {
        "help": "render colour, latent and alpha maps",
        "params": {
            "out": (str, REQUIRED), "scene": (str, REQUIRED), "world": (str, None), "camera": (str, None),
            "view": (int, None), "tile_size": (int, 16),
        },
    },
    "query": {
        "help": "relevancy map, mask and localization for one query",
        "params": {
            "out": (str, REQUIRED), "scene": (str, REQUIRED), "world": (str, REQUIRED), "ae": (str, REQUIRED),
            "view": (int, 0), "concept": (int, None), "embedding": (str, None), "threshold": (float, 0.5),
        },
    },
    "eval": {
        "help": "query every planted object and score against ground truth",
        "params": {
            "out": (str, REQUIRED), "scene": (str, REQUIRED), "world": (str, REQUIRED), "ae": (str, REQUIRED),
            "threshold": (float, 0.5),
        },
    },
    "ablate": {
        "help": "latent-width sweep: val MSE and cosine per k",
        "params": {
            "seed": (int, REQUIRED), "out": (str, REQUIRED), "corpus": (str, REQUIRED),
            "ks": (str, "3,8,16,32,64"), "epochs": (int, 10), "loss_mode": (str, "L1_COS"),
            "lam": (float, 0.5), "lr": (float, 1e-3), "batch_size": (int, 256),
        },
    },
    "efficiency": {
        "help": "per-scene vs generalized autoencoder training time",
        "params": {
            "seed": (int, REQUIRED), "out": (str, REQUIRED), "dictionary": (str, REQUIRED),
            "corpus": (str, None), "ae": (str, None), "worlds": (int, 4), "objects": (int, 3),
            "gaussians_per_object": (int, 60), "views": (int, 3), "width": (int, 64), "height": (int, 64),
            "field_iterations": (int, 300), "ae_steps": (int, None), "epochs": (int, 10),
            "repetitions": (int, 3), "k": (int, 16),
        },
    },
}

# keys that name output locations are left out of the provenance hash
_UNHASHED = {"out"}


def _bool(s):
    if isinstance(s, bool):
        return s
    if str(s).lower() in ("1", "true", "yes", "on"):
        return True
    if str(s).lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {s!r}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gslang", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name, entry in COMMANDS.items():
        sp = sub.add_parser(name, help=entry["help"])
        sp.add_argument("--config", help="JSON config; flags override its keys")
        for key, (typ, _default) in entry["params"].items():
            sp.add_argument("--" + key.replace("_", "-"), dest=key, type=_bool if typ is bool else typ, default=None)
    return p


def resolve(command: str, ns: argparse.Namespace) -> dict:
    params = COMMANDS[command]["params"]
    cfg = {k: d for k, (_, d) in params.items()}
    if ns.config:
        try:
            raw = json.loads(Path(ns.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {ns.config}: {e}") from e
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        for k, v in raw.items():
            key = k.replace("-", "_")
            if key not in params:
                raise ConfigError(f"unknown config key {k!r} for {command}")
            typ = params[key][0]
            try:
                cfg[key] = None if v is None else (_bool(v) if typ is bool else typ(v))
            except (TypeError, ValueError, argparse.ArgumentTypeError) as e:
                raise ConfigError(f"bad value for {k}: {e}") from e
    for k in params:
        v = getattr(ns, k, None)
        if v is not None:
            cfg[k] = v
    missing = [k for k, v in cfg.items() if v is REQUIRED]
    if missing:
        raise ConfigError(f"{command}: missing required " + ", ".join("--" + m.replace("_", "-") for m in missing))
    return cfg


class Outputs:
    """Output directory that stamps a config hash into every file it writes."""

    def __init__(self, command: str, cfg: dict):
        self.dir = Path(cfg["out"])
        self.dir.mkdir(parents=True, exist_ok=True)
        self.hashed = {k: v for k, v in cfg.items() if k not in _UNHASHED}
        self.hash = config_hash({"command": command, **self.hashed})
        self.command = command
        self.files: list[str] = []

    @property
    def tag(self) -> str:
        return f"gslang {self.command} config_hash={self.hash}"

    def path(self, name: str) -> Path:
        self.files.append(name)
        return self.dir / name

    def json(self, name: str, obj) -> None:
        self.path(name).write_text(json.dumps({"config_hash": self.hash, **obj}, sort_keys=True, indent=1) + "\n")

    def text(self, name: str, body: str) -> None:
        self.path(name).write_text(body)

    def finish(self) -> None:
        manifest = {"command": self.command, "config": self.hashed, "files": sorted(set(self.files))}
        (self.dir / "provenance.json").write_text(
            json.dumps({"config_hash": self.hash, **manifest}, sort_keys=True, indent=1) + "\n"
        )


def _train_cfg(cfg) -> TrainConfig:
    return TrainConfig(
        loss_mode=LossMode(cfg["loss_mode"]), lam=cfg["lam"], lr=cfg["lr"], batch_size=cfg["batch_size"],
        epochs=cfg["epochs"], seed=cfg["seed"],
    )


def cmd_gen_corpus(cfg, out: Outputs):
    d = gen_dictionary(cfg["concepts"], cfg["dim"], cfg["intrinsic_dim"], cfg["noise"], cfg["seed"])
    d.save(out.path("dictionary.gten"))
    out.files.append("dictionary.gten.json")
    c = gen_corpus(d, cfg["samples_per_concept"], cfg["jitter"], seed=cfg["seed"] + 1)
    c.meta["config_hash"] = out.hash
    c.save(out.path("corpus.gten"))
    out.files.append("corpus.gten.json")
    log.info("corpus: %d rows, %d val", len(c.rows), int(c.split.sum()))


def cmd_synth_gen(cfg, out: Outputs):
    d = ConceptDictionary.load(cfg["dictionary"])
    w = gen_world(
        cfg["objects"], cfg["gaussians_per_object"], cfg["views"], d, cfg["seed"],
        width=cfg["width"], height=cfg["height"], backdrop=cfg["backdrop"],
    )
    w.params["config_hash"] = out.hash
    w.scene.metadata["config_hash"] = out.hash
    w.save(out.dir)
    out.files += ["scene.gspl", "masks.gten", "embeddings.gten", "manifest.json"]
    for v, cam in enumerate(w.cameras):
        save_ppm(out.path(f"gt_view{v}.ppm"), render(w.scene, cam, RenderOptions(with_feature=False)).color, out.tag)
        for o in range(w.n_objects):
            save_pgm(out.path(f"gt_mask_v{v}_o{o}.pgm"), w.gt_masks[v, o], out.tag)


def cmd_train_ae(cfg, out: Outputs):
    corpus = EmbeddingCorpus.load(cfg["corpus"])
    res = train_autoencoder(corpus, cfg["k"], _train_cfg(cfg))
    save_autoencoder(res.ae, out.path("ae.gaew"))
    rep = fidelity_report(res.ae, corpus) if corpus.split.any() else None
    summary = {"steps": res.steps, "curve": res.curve}
    if rep is not None:
        summary["val"] = {"mse": rep["mse"], "cosine": rep["cosine"], "rows": rep["rows"],
                          "mse_convention": rep["mse_convention"]}
    out.json("train_log.json", summary)


def cmd_train_field(cfg, out: Outputs):
    world = SyntheticWorld.load(cfg["world"])
    ae = load_autoencoder(cfg["ae"])
    fcfg = FieldTrainConfig(
        gamma=cfg["gamma"], beta=cfg["beta"], lr=cfg["lr"], lr_final_ratio=cfg["lr_final_ratio"],
        iterations=cfg["iterations"], seed=cfg["seed"], rgb_stage_iters=cfg["rgb_stage_iters"], rgb_lr=cfg["rgb_lr"],
    )
    scene = world.scene
    if fcfg.rgb_stage_iters:
        images = [render(scene, c, RenderOptions(with_feature=False)).color for c in world.cameras]
        scene, _ = rgb_stage(scene, list(zip(world.cameras, images)), fcfg)
    targets = build_targets(view_mask_sets(world, seed=cfg["seed"]), ae)
    for t in targets:
        t.save(out.path(f"targets_v{t.view_id}_l{t.level}.gten"))
    res = train_language_field(scene, world.cameras, targets, fcfg)
    trained = res.scene
    trained.metadata["config_hash"] = out.hash
    save_scene(trained, out.path("scene.gspl"))
    curve = np.array([[r["loss_l1"], r["loss_cos"], r["total"]] for r in res.curve]).reshape(-1, 3)
    save_gten(out.path("loss_curve.gten"), curve)
    lines = [json.dumps({"config_hash": out.hash}) + "\n"]
    lines += [json.dumps({k: r[k] for k in ("iter", "loss_l1", "loss_cos", "total")}, sort_keys=True) + "\n" for r in res.curve]
    out.text("train_log.jsonl", "".join(lines))


def _cameras(cfg) -> list[Camera]:
    if cfg.get("camera"):
        raw = json.loads(Path(cfg["camera"]).read_text())
        return [Camera.from_dict(c) for c in (raw if isinstance(raw, list) else [raw])]
    if cfg.get("world"):
        return SyntheticWorld.load(cfg["world"]).cameras
    raise ConfigError("render needs --world or --camera")


def cmd_render(cfg, out: Outputs):
    scene = load_scene(cfg["scene"])
    cams = _cameras(cfg)
    views = range(len(cams)) if cfg["view"] is None else [cfg["view"]]
    for v in views:
        if not 0 <= v < len(cams):
            raise ConfigError(f"view {v} out of range (have {len(cams)})")
        r = render(scene, cams[v], RenderOptions(tile_size=cfg["tile_size"]))
        save_ppm(out.path(f"color_v{v}.ppm"), r.color, out.tag)
        save_gten(out.path(f"feature_v{v}.gten"), r.feature)
        save_gten(out.path(f"alpha_v{v}.gten"), r.alpha_sum)


def cmd_query(cfg, out: Outputs):
    scene = load_scene(cfg["scene"])
    world = SyntheticWorld.load(cfg["world"])
    ae = load_autoencoder(cfg["ae"])
    if cfg["embedding"]:
        emb = load_gten(cfg["embedding"]).astype(np.float64).ravel()
        q = Query(Path(cfg["embedding"]).stem, emb / np.linalg.norm(emb))
    elif cfg["concept"] is not None:
        if not 0 <= cfg["concept"] < world.n_regions:
            raise ConfigError(f"concept index {cfg['concept']} out of range")
        q = Query(f"region_{cfg['concept']}", world.embeddings[cfg["concept"]])
    else:
        raise ConfigError("query needs --concept or --embedding")
    v = cfg["view"]
    if not 0 <= v < len(world.cameras):
        raise ConfigError(f"view {v} out of range")
    r = render(scene, world.cameras[v])
    res = run_query(r.feature, r.alpha_sum, ae, q, cfg["threshold"])
    save_gten(out.path("relevancy.gten"), res.relevancy)
    save_ppm(out.path("relevancy.ppm"), np.repeat(((res.relevancy + 1) / 2)[..., None], 3, axis=2), out.tag)
    save_pgm(out.path("mask.pgm"), res.mask, out.tag)
    out.json("result.json", {"label": res.label, "loc_point": list(res.loc_point), "score_at_loc": res.score_at_loc,
                             "mask_pixels": int(res.mask.sum()), "threshold": cfg["threshold"], "view": v})


def cmd_eval(cfg, out: Outputs):
    scene = load_scene(cfg["scene"])
    world = SyntheticWorld.load(cfg["world"])
    ae = load_autoencoder(cfg["ae"])
    metrics, results, _colors, pcas = evaluate(scene, world, ae, cfg["threshold"])
    for v, img in enumerate(pcas):
        save_ppm(out.path(f"pca_v{v}.ppm"), img, out.tag)
        save_gten(out.path(f"pca_v{v}.gten"), img)
        for o, r in enumerate(results[v]):
            save_pgm(out.path(f"mask_v{v}_o{o}.pgm"), r.mask, out.tag)
    out.json("metrics.json", metrics)


def cmd_ablate(cfg, out: Outputs):
    corpus = EmbeddingCorpus.load(cfg["corpus"])
    try:
        ks = [int(k) for k in str(cfg["ks"]).split(",") if k.strip()]
    except ValueError as e:
        raise ConfigError(f"bad --ks: {e}") from e
    res = run_ablation(corpus, ks, _train_cfg(cfg))
    csv = res.to_csv().replace(f"config_hash={res.config_hash}", f"config_hash={out.hash}", 1)
    out.text("ablation.csv", csv)
    ok = [r for r in res.rows if r["status"] == "ok"]
    svg = svg_line_chart(
        [r["k"] for r in ok], {"val cosine": [r["val_cosine"] for r in ok], "val MSE": [r["val_mse"] for r in ok]},
        "Reconstruction vs latent width", "latent dim k", provenance=out.tag,
    )
    out.text("ablation.svg", svg)
    # wall-clock is inherently run-dependent, so it lives outside the CSV
    out.json("ablation_timing.json", {"train_seconds": {str(r["k"]): r["train_seconds"] for r in res.rows}})


def cmd_efficiency(cfg, out: Outputs):
    d = ConceptDictionary.load(cfg["dictionary"])
    worlds = [
        gen_world(cfg["objects"], cfg["gaussians_per_object"], cfg["views"], d, cfg["seed"] + i,
                  width=cfg["width"], height=cfg["height"])
        for i in range(cfg["worlds"])
    ]
    ecfg = EfficiencyConfig(
        field=FieldTrainConfig(iterations=cfg["field_iterations"], seed=cfg["seed"]),
        ae=TrainConfig(epochs=cfg["epochs"], seed=cfg["seed"]),
        ae_steps=cfg["ae_steps"], latent_dim=cfg["k"], repetitions=cfg["repetitions"],
    )
    if cfg["ae"]:
        shared, corpus = load_autoencoder(cfg["ae"]), None
    elif cfg["corpus"]:
        shared, corpus = None, EmbeddingCorpus.load(cfg["corpus"])
    else:
        raise ConfigError("efficiency needs --ae (pretrained) or --corpus (to pretrain)")
    rep = run_efficiency(worlds, corpus, ecfg, seed=cfg["seed"], shared_ae=shared)
    body = rep.to_dict()
    body["timing_note"] = "seconds are wall-clock medians; not reproducible bit-for-bit"
    out.json("efficiency.json", body)


HANDLERS = {
    "gen-corpus": cmd_gen_corpus, "synth-gen": cmd_synth_gen, "train-ae": cmd_train_ae,
    "train-field": cmd_train_field, "render": cmd_render, "query": cmd_query, "eval": cmd_eval,
    "ablate": cmd_ablate, "efficiency": cmd_efficiency,
}


def main(argv=None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve(ns.command, ns)
        out = Outputs(ns.command, cfg)
        HANDLERS[ns.command](cfg, out)
        out.finish()
    except (ConfigError, InfeasibleLayout) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDiverged, FloatingPointError) as e:
        print(f"numerical divergence: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except StageError as e:
        print(str(e), file=sys.stderr)
        return EXIT_DIVERGED if isinstance(e.cause, TrainingDiverged) else EXIT_CONFIG
    except (OSError, FormatError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    return 0


if __name__ == "__main__":
    sys.exit(main())
