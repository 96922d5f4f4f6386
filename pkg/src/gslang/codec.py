"""Generalized embedding autoencoder: numpy MLP, analytic backprop, Adam.

Weights live in float64 but are rounded to float32-representable values on
:meth:`Autoencoder.freeze`, so a frozen model survives a GAEW round trip
bit for bit.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from .tensorio import DimensionMismatch, FormatError, MagicMismatch, TruncatedFile, load_gten, save_gten

GAEW_MAGIC = b"GAEW"
GAEW_VERSION = 1
COS_EPS = 1e-8
_ACT_TAGS = {"linear": 0, "relu": 1}
_TAG_ACTS = {v: k for k, v in _ACT_TAGS.items()}


_steps_taken = 0


def gradient_steps_taken() -> int:
    """Process-wide count of autoencoder optimizer steps."""
    return _steps_taken


class FrozenError(RuntimeError):
    pass


class TrainingDiverged(FloatingPointError):
    pass


class LossMode(str, Enum):
    L1_COS = "L1_COS"
    MSE_COS = "MSE_COS"


@dataclass(frozen=True)
class TrainConfig:
    loss_mode: LossMode = LossMode.L1_COS
    lam: float = 0.5
    lr: float = 1e-3
    batch_size: int = 256
    epochs: int = 20
    seed: int = 0
    max_steps: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "loss_mode", LossMode(self.loss_mode))
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")


@dataclass
class Layer:
    weight: np.ndarray  # (in, out)
    bias: np.ndarray
    activation: str = "relu"


class Autoencoder:
    """Encoder/decoder MLP pair. ``layers[:n_encoder]`` map D -> k."""

    def __init__(self, layers: Sequence[Layer], n_encoder: int):
        self.layers = list(layers)
        self.n_encoder = n_encoder
        self.frozen = False
        self._validate()

    def _validate(self):
        dims = [self.layers[0].weight.shape[0]]
        for layer in self.layers:
            if layer.weight.shape[0] != dims[-1] or layer.bias.shape != (layer.weight.shape[1],):
                raise DimensionMismatch("layer shapes do not chain")
            if layer.activation not in _ACT_TAGS:
                raise ValueError(f"unknown activation {layer.activation!r}")
            dims.append(layer.weight.shape[1])
        if not 0 < self.n_encoder < len(self.layers):
            raise ValueError("encoder must have at least one layer and leave one for the decoder")
        if dims[-1] != dims[0]:
            raise DimensionMismatch("decoder output must equal input dim")

    def __setattr__(self, name, value):
        if getattr(self, "frozen", False):
            raise FrozenError("autoencoder is frozen")
        super().__setattr__(name, value)

    @classmethod
    def mlp(cls, input_dim=512, latent_dim=16, hidden=(256, 128), seed=0) -> "Autoencoder":
        rng = np.random.default_rng(seed)
        enc = [input_dim, *hidden, latent_dim]
        dec = [latent_dim, *reversed(hidden), input_dim]
        layers = []
        for dims in (enc, dec):
            for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
                act = "linear" if i == len(dims) - 2 else "relu"
                layers.append(Layer(rng.normal(0, np.sqrt(2.0 / a), (a, b)), np.zeros(b), act))
        return cls(layers, len(enc) - 1)

    @classmethod
    def linear(cls, input_dim: int, latent_dim: int, seed=0) -> "Autoencoder":
        return cls.mlp(input_dim, latent_dim, hidden=(), seed=seed)

    @property
    def input_dim(self) -> int:
        return self.layers[0].weight.shape[0]

    @property
    def latent_dim(self) -> int:
        return self.layers[self.n_encoder - 1].weight.shape[1]

    def params(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in (layer.weight, layer.bias)]

    def freeze(self) -> "Autoencoder":
        for p in self.params():
            p[...] = p.astype(np.float32)
            p.setflags(write=False)
        object.__setattr__(self, "layers", tuple(self.layers))
        super().__setattr__("frozen", True)
        return self

    def _run(self, x, layers):
        for layer in layers:
            x = x @ layer.weight + layer.bias
            if layer.activation == "relu":
                x = np.maximum(x, 0.0)
        return x

    def encode(self, f) -> np.ndarray:
        f = np.asarray(f, dtype=np.float64)
        if f.shape[-1] != self.input_dim:
            raise DimensionMismatch(f"expected input dim {self.input_dim}, got {f.shape[-1]}")
        return self._run(f, self.layers[: self.n_encoder])

    def decode(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        if z.shape[-1] != self.latent_dim:
            raise DimensionMismatch(f"expected latent dim {self.latent_dim}, got {z.shape[-1]}")
        return self._run(z, self.layers[self.n_encoder :])

    def forward_backward(self, f, grad_fn):
        """Full pass on a batch; ``grad_fn(f_hat) -> (loss, dloss/df_hat)``.

        Returns ``(loss, f_hat, grads)`` with grads ordered like :meth:`params`.
        """
        acts = [np.asarray(f, dtype=np.float64)]
        for layer in self.layers:
            x = acts[-1] @ layer.weight + layer.bias
            if layer.activation == "relu":
                x = np.maximum(x, 0.0)
            acts.append(x)
        loss, g = grad_fn(acts[-1])
        grads = []
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            if layer.activation == "relu":
                g = g * (acts[i + 1] > 0)
            grads.append(g.sum(axis=0))
            grads.append(acts[i].T @ g)
            if i:
                g = g @ layer.weight.T
        # built back to front as (bias, weight) pairs
        return loss, acts[-1], grads[::-1]


def encode(ae: Autoencoder, f) -> np.ndarray:
    return ae.encode(f)


def decode(ae: Autoencoder, z) -> np.ndarray:
    return ae.decode(z)


def cosine_rows(a, b) -> np.ndarray:
    """Row-wise cosine; 0 where either norm is below 1e-8."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    ok = (na >= COS_EPS) & (nb >= COS_EPS)
    dot = np.sum(a * b, axis=-1)
    return np.where(ok, dot / np.where(ok, na * nb, 1.0), 0.0)


def cosine_grad(a, b) -> np.ndarray:
    """d cos(a, b) / d a row-wise, zero on the degenerate branch."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a, axis=-1, keepdims=True)
    nb = np.linalg.norm(b, axis=-1, keepdims=True)
    ok = (na >= COS_EPS) & (nb >= COS_EPS)
    na_s = np.where(ok, na, 1.0)
    nb_s = np.where(ok, nb, 1.0)
    c = np.sum(a * b, axis=-1, keepdims=True) / (na_s * nb_s)
    return np.where(ok, b / (na_s * nb_s) - c * a / na_s**2, 0.0)


def ae_loss_rows(f, f_hat, cfg: TrainConfig):
    """Per-row loss and d loss / d f_hat for a batch."""
    diff = f_hat - f
    if cfg.loss_mode is LossMode.L1_COS:
        rec = np.abs(diff).sum(axis=-1)
        grad = np.sign(diff)
    else:
        rec = (diff * diff).sum(axis=-1)
        grad = 2.0 * diff
    loss = rec + cfg.lam * (1.0 - cosine_rows(f_hat, f))
    grad = grad - cfg.lam * cosine_grad(f_hat, f)
    return loss, grad


def ae_loss(f, f_hat, cfg: TrainConfig) -> tuple[float, np.ndarray]:
    loss, grad = ae_loss_rows(np.atleast_2d(f), np.atleast_2d(f_hat), cfg)
    return float(loss[0]), grad[0]


class Adam:
    def __init__(self, params, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2, self.eps = b1, b2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class EmbeddingCorpus:
    rows: np.ndarray
    labels: np.ndarray
    split: np.ndarray  # True for validation rows
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.split = np.asarray(self.split, dtype=bool)
        if self.rows.ndim != 2 or len(self.rows) < 1:
            raise ValueError("corpus needs at least one row")
        if len(self.labels) != len(self.rows) or len(self.split) != len(self.rows):
            raise DimensionMismatch("labels/split length differs from rows")
        norms = np.linalg.norm(self.rows, axis=1)
        if np.any(np.abs(norms - 1) > 1e-5):
            raise ValueError("corpus rows must be unit norm")

    @classmethod
    def from_raw(cls, rows, labels=None, split=None, meta=None) -> "EmbeddingCorpus":
        """Normalize rows to unit length; defaults to all-train."""
        rows = np.asarray(rows, dtype=np.float64)
        rows = rows / np.linalg.norm(rows, axis=1, keepdims=True)
        n = len(rows)
        return cls(
            rows,
            np.zeros(n, np.int64) if labels is None else labels,
            np.zeros(n, bool) if split is None else split,
            meta or {},
        )

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    @property
    def train(self) -> np.ndarray:
        return self.rows[~self.split]

    @property
    def val(self) -> np.ndarray:
        return self.rows[self.split]

    def save(self, path) -> None:
        path = Path(path)
        save_gten(path, self.rows)
        sidecar = {"labels": self.labels.tolist(), "val": self.split.astype(int).tolist(), "meta": self.meta}
        path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, sort_keys=True))

    @classmethod
    def load(cls, path) -> "EmbeddingCorpus":
        path = Path(path)
        rows = load_gten(path).astype(np.float64)
        side = json.loads(path.with_suffix(path.suffix + ".json").read_text())
        # stored as f32; renormalize to restore the unit-norm invariant
        rows /= np.linalg.norm(rows, axis=1, keepdims=True)
        return cls(rows, side["labels"], np.array(side["val"], bool), side.get("meta", {}))


@dataclass
class TrainResult:
    ae: Autoencoder
    curve: list[dict]
    steps: int


def train_autoencoder(
    corpus: EmbeddingCorpus, k: int, cfg: TrainConfig, ae: Autoencoder | None = None
) -> TrainResult:
    """Minibatch Adam on the train split; returns a frozen model and per-epoch curve."""
    train = corpus.train
    if len(train) == 0:
        raise ValueError("corpus has no train rows")
    global _steps_taken
    ae = ae or Autoencoder.mlp(corpus.dim, k, seed=[cfg.seed, k])
    if ae.frozen:
        raise FrozenError("cannot train a frozen autoencoder")
    rng = np.random.default_rng([cfg.seed, k])
    opt = Adam(ae.params(), cfg.lr)
    curve: list[dict] = []
    steps = 0
    bs = min(cfg.batch_size, len(train))
    budget = cfg.max_steps
    epoch = 0
    while (budget is None and epoch < cfg.epochs) or (budget is not None and steps < budget):
        order = rng.permutation(len(train))
        total = 0.0
        seen = 0
        for start in range(0, len(order) - bs + 1, bs):
            if budget is not None and steps >= budget:
                break
            batch = train[order[start : start + bs]]

            def grad_fn(f_hat, batch=batch):
                loss, g = ae_loss_rows(batch, f_hat, cfg)
                return loss.mean(), g / len(batch)

            loss, _, grads = ae.forward_backward(batch, grad_fn)
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {steps}: {loss}")
            opt.step(grads)
            steps += 1
            _steps_taken += 1
            total += loss * len(batch)
            seen += len(batch)
        entry = {"epoch": epoch, "steps": steps, "train_loss": total / max(seen, 1)}
        if len(corpus.val):
            rep = _fidelity(ae, corpus.val)
            entry.update(val_mse=rep["mse"], val_cosine=rep["cosine"])
        curve.append(entry)
        epoch += 1
        if seen == 0:
            break
    return TrainResult(ae.freeze(), curve, steps)


def _fidelity(ae: Autoencoder, rows: np.ndarray) -> dict:
    f_hat = ae.decode(ae.encode(rows))
    mse = ((f_hat - rows) ** 2).sum(axis=1) / rows.shape[1]
    cos = cosine_rows(rows, f_hat)
    return {"mse": float(mse.mean()), "cosine": float(cos.mean()), "mse_rows": mse, "cosine_rows": cos}


def fidelity_report(ae: Autoencoder, corpus: EmbeddingCorpus, subset: str = "val") -> dict:
    """Reconstruction quality on ``subset`` ('val', 'train' or 'all').

    MSE convention: squared error summed over dims then divided by D.
    """
    if not ae.frozen:
        raise FrozenError("fidelity_report expects a frozen autoencoder")
    rows = {"val": corpus.val, "train": corpus.train, "all": corpus.rows}[subset]
    if len(rows) == 0:
        raise ValueError(f"corpus {subset} subset is empty")
    rep = _fidelity(ae, rows)
    rep["mse_convention"] = "sum of squared errors / D"
    rep["rows"] = int(len(rows))
    return rep


def ae_bytes(ae: Autoencoder) -> bytes:
    parts = [
        GAEW_MAGIC,
        struct.pack("<IIIII", GAEW_VERSION, ae.input_dim, ae.latent_dim, len(ae.layers), ae.n_encoder),
    ]
    for layer in ae.layers:
        a, b = layer.weight.shape
        parts.append(struct.pack("<III", a, b, _ACT_TAGS[layer.activation]))
        parts.append(np.ascontiguousarray(layer.weight, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(layer.bias, dtype="<f4").tobytes())
    return b"".join(parts)


def save_autoencoder(ae: Autoencoder, path) -> None:
    Path(path).write_bytes(ae_bytes(ae))


def parse_autoencoder(buf: bytes) -> Autoencoder:
    if len(buf) < 24:
        raise TruncatedFile("GAEW header truncated")
    if buf[:4] != GAEW_MAGIC:
        raise MagicMismatch(f"expected GAEW magic, got {buf[:4]!r}")
    version, d, k, n_layers, n_enc = struct.unpack_from("<IIIII", buf, 4)
    if version != GAEW_VERSION:
        raise FormatError(f"unsupported GAEW version {version}")
    off = 24
    layers = []
    for _ in range(n_layers):
        if len(buf) < off + 12:
            raise TruncatedFile("GAEW layer header truncated")
        a, b, tag = struct.unpack_from("<III", buf, off)
        off += 12
        need = 4 * (a * b + b)
        if len(buf) < off + need:
            raise TruncatedFile("GAEW layer data truncated")
        w = np.frombuffer(buf, "<f4", a * b, off).reshape(a, b).astype(np.float64)
        bias = np.frombuffer(buf, "<f4", b, off + 4 * a * b).astype(np.float64)
        off += need
        layers.append(Layer(w, bias, _TAG_ACTS[tag]))
    if off != len(buf):
        raise DimensionMismatch("trailing bytes after GAEW layers")
    ae = Autoencoder(layers, n_enc)
    if ae.input_dim != d or ae.latent_dim != k:
        raise DimensionMismatch("GAEW header dims disagree with layer shapes")
    return ae.freeze()


def load_autoencoder(path) -> Autoencoder:
    return parse_autoencoder(Path(path).read_bytes())
