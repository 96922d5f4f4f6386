"""Language-embedded Gaussian splatting with a generalized, frozen autoencoder."""

from .codec import Autoencoder, EmbeddingCorpus, LossMode, TrainConfig, load_autoencoder, save_autoencoder
from .field import FieldTrainConfig, build_targets, train_language_field
from .query import Query, relevancy_map, run_query
from .raster import RenderOptions, render, render_bruteforce
from .scene import Camera, Gaussian, Scene, load_scene, save_scene

__version__ = "0.1.0"

__all__ = [
    "Autoencoder", "Camera", "EmbeddingCorpus", "FieldTrainConfig", "Gaussian", "LossMode", "Query",
    "RenderOptions", "Scene", "TrainConfig", "build_targets", "load_autoencoder", "load_scene",
    "relevancy_map", "render", "render_bruteforce", "run_query", "save_autoencoder", "save_scene",
    "train_language_field",
]
