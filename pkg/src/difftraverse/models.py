"""Trainable networks: the conditional noise predictor and the multi-head
attribute/content classifier, with their training loops and checkpoints."""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numeric as nm
from .diffusion import NoiseSchedule, forward_noise, make_schedule
from .prompting import EMBED_DIM, EmbeddingTable, embed
from .synth import ATTRIBUTES, SIZE, Dataset

N_PIX = SIZE * SIZE
N_CONTENT = 4


class ModelError(ValueError):
    pass


@dataclass
class TrainConfig:
    steps: int = 3000
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    lr_decay: str = "cosine"  # "cosine" or "none"
    log_every: int = 1

    def validate(self) -> None:
        if self.steps < 0 or self.batch_size < 1 or self.log_every < 1:
            raise ModelError("steps must be >= 0, batch_size and log_every >= 1")
        if self.lr <= 0:
            raise ModelError("learning rate must be positive")
        if self.lr_decay not in ("cosine", "none"):
            raise ModelError(f"unknown lr_decay {self.lr_decay!r}")

    def lr_at(self, step: int) -> float:
        if self.lr_decay == "none" or self.steps == 0:
            return self.lr
        return self.lr * 0.5 * (1.0 + np.cos(np.pi * step / self.steps))


@dataclass
class TrainReport:
    loss_curve: list
    metrics: dict = field(default_factory=dict)

    def smoothed(self, window: int = 50) -> np.ndarray:
        c = np.asarray(self.loss_curve, dtype=np.float64)
        w = max(1, min(window, c.size))
        return np.convolve(c, np.ones(w) / w, mode="valid")


def denoiser_train_defaults(**overrides) -> TrainConfig:
    return TrainConfig(**{"steps": 3000, "batch_size": 64, "lr": 2e-3, "seed": 1, **overrides})


def classifier_train_defaults(**overrides) -> TrainConfig:
    return TrainConfig(**{"steps": 4000, "batch_size": 64, "lr": 1e-3, "seed": 2, **overrides})


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.shape == (SIZE, SIZE):
        return x.reshape(1, N_PIX), True
    if x.ndim == 3 and x.shape[1:] == (SIZE, SIZE):
        return x.reshape(x.shape[0], N_PIX), False
    raise ModelError(f"expected a {SIZE}x{SIZE} image or a batch of them, got {x.shape}")


# --------------------------------------------------------------------------
# denoiser


@dataclass
class DenoiserConfig:
    hidden: tuple = (512, 512)
    time_dim: int = 32
    prompt_dim: int = 32
    embed_dim: int = EMBED_DIM
    T: int = 50
    beta_start: float = 0.001
    beta_end: float = 0.2

    def schedule(self) -> NoiseSchedule:
        return make_schedule(self.T, self.beta_start, self.beta_end)


class DenoiserModel:
    """MLP noise predictor; (time, prompt) features modulate the first hidden
    layer through a learned per-unit scale and shift.

    A scalar gate computed from the same features adds ``gate * x_t`` to the
    output, so the identity map (the right answer at large t) does not have to
    pass through the 512-wide bottleneck.
    """

    kind = "denoiser"

    def __init__(self, config: DenoiserConfig, store: nm.ParamStore, seed: int = 0):
        self.config = config
        self.store = store
        self.seed = seed

    @classmethod
    def init(cls, config: DenoiserConfig, seed: int = 0) -> "DenoiserModel":
        rng = nm.make_rng(seed, 0xD0)
        h1, h2 = config.hidden
        cdim = config.time_dim + config.prompt_dim
        s = nm.ParamStore()
        s.add("prompt.w", nm.glorot(rng, config.embed_dim, config.prompt_dim))
        s.add("prompt.b", np.zeros(config.prompt_dim))
        s.add("l1.w", nm.glorot(rng, N_PIX, h1))
        s.add("l1.b", np.zeros(h1))
        s.add("scale.w", 0.1 * nm.glorot(rng, cdim, h1))
        s.add("scale.b", np.zeros(h1))
        s.add("shift.w", 0.1 * nm.glorot(rng, cdim, h1))
        s.add("shift.b", np.zeros(h1))
        s.add("l2.w", nm.glorot(rng, h1, h2))
        s.add("l2.b", np.zeros(h2))
        s.add("out.w", nm.glorot(rng, h2, N_PIX))
        s.add("out.b", np.zeros(N_PIX))
        s.add("skip.w", np.zeros((cdim, 1)))
        s.add("skip.b", np.zeros(1))
        return cls(config, s, seed)

    def _cond(self, t, e, n):
        t = np.broadcast_to(np.asarray(t), (n,))
        if np.any(t < 1) or np.any(t > self.config.T):
            raise ModelError(f"timestep outside [1, {self.config.T}]")
        e = np.asarray(e, dtype=np.float64)
        if e.shape == (self.config.embed_dim,):
            e = np.broadcast_to(e, (n, self.config.embed_dim))
        if e.shape != (n, self.config.embed_dim):
            raise ModelError(f"embedding shape {e.shape} incompatible with batch of {n}")
        return nm.sinusoidal_features(t / self.config.T, self.config.time_dim), e

    def forward(self, x: np.ndarray, t, e):
        """``x`` is ``(N, 1024)``; returns prediction and a backward cache."""
        p = self.store.params
        tf, e = self._cond(t, e, x.shape[0])
        pf = nm.linear(e, p["prompt.w"], p["prompt.b"])
        c = np.concatenate([tf, pf], axis=1)
        a1 = nm.linear(x, p["l1.w"], p["l1.b"])
        sc = nm.linear(c, p["scale.w"], p["scale.b"])
        sh = nm.linear(c, p["shift.w"], p["shift.b"])
        z1 = a1 * (1.0 + sc) + sh
        h1 = nm.silu(z1)
        z2 = nm.linear(h1, p["l2.w"], p["l2.b"])
        h2 = nm.silu(z2)
        skip = nm.linear(c, p["skip.w"], p["skip.b"])
        out = nm.linear(h2, p["out.w"], p["out.b"]) + skip * x
        return out, (x, e, c, a1, sc, z1, h1, z2, h2, skip)

    def backward(self, dout: np.ndarray, cache) -> None:
        p, g = self.store.params, self.store.grads
        x, e, c, a1, sc, z1, h1, z2, h2, skip = cache
        dskip = np.sum(dout * x, axis=1, keepdims=True)
        dc_k, g["skip.w"][...], g["skip.b"][...] = nm.linear_backward(dskip, c, p["skip.w"])
        dh2, g["out.w"][...], g["out.b"][...] = nm.linear_backward(dout, h2, p["out.w"])
        dz2 = nm.silu_backward(dh2, z2)
        dh1, g["l2.w"][...], g["l2.b"][...] = nm.linear_backward(dz2, h1, p["l2.w"])
        dz1 = nm.silu_backward(dh1, z1)
        da1 = dz1 * (1.0 + sc)
        dsc = dz1 * a1
        dc_s, g["scale.w"][...], g["scale.b"][...] = nm.linear_backward(dsc, c, p["scale.w"])
        dc_h, g["shift.w"][...], g["shift.b"][...] = nm.linear_backward(dz1, c, p["shift.w"])
        _, g["l1.w"][...], g["l1.b"][...] = nm.linear_backward(da1, x, p["l1.w"])
        dpf = (dc_s + dc_h + dc_k)[:, self.config.time_dim:]
        _, g["prompt.w"][...], g["prompt.b"][...] = nm.linear_backward(dpf, e, p["prompt.w"])

    def __call__(self, x_t, t, e):
        return predict_noise(self, x_t, t, e)


def predict_noise(model: DenoiserModel, x_t: np.ndarray, t, e: np.ndarray) -> np.ndarray:
    xb, single = _as_batch(x_t)
    out, _ = model.forward(xb, t, e)
    out = out.reshape(-1, SIZE, SIZE)
    return out[0] if single else out


def denoiser_loss(model: DenoiserModel, x_t, t, e, eps) -> float:
    """Noise-prediction MSE; leaves gradients in ``model.store.grads``."""
    pred, cache = model.forward(x_t, t, e)
    loss, d = nm.mse(pred, eps)
    model.backward(d, cache)
    return loss


def train_denoiser(dataset: Dataset, table: EmbeddingTable, schedule: NoiseSchedule | None = None,
                   cfg: TrainConfig | None = None, config: DenoiserConfig | None = None):
    if len(dataset) == 0:
        raise ModelError("dataset is empty")
    cfg = cfg or denoiser_train_defaults()
    cfg.validate()
    config = config or DenoiserConfig()
    if schedule is not None:
        config.T = schedule.T
        config.beta_start, config.beta_end = schedule.beta_start, schedule.beta_end
    schedule = config.schedule()
    model = DenoiserModel.init(config, cfg.seed)
    images = dataset.images().reshape(len(dataset), N_PIX)
    embs = np.stack([embed(s, table) for s in dataset.specs()])
    rng = nm.make_rng(cfg.seed, 0x7D)
    opt = nm.Adam(model.store, cfg.lr, cfg.beta1, cfg.beta2)
    curve = []

    def batch():
        idx = rng.integers(len(dataset), cfg.batch_size)
        t = 1 + rng.integers(schedule.T, cfg.batch_size)
        eps = rng.normal((cfg.batch_size, N_PIX))
        return forward_noise(images[idx], t, eps, schedule), t, embs[idx], eps

    if cfg.steps == 0:
        x_t, t, e, eps = batch()
        pred, _ = model.forward(x_t, t, e)
        curve.append(nm.mse(pred, eps)[0])
    for step in range(cfg.steps):
        x_t, t, e, eps = batch()
        loss = denoiser_loss(model, x_t, t, e, eps)
        if step % cfg.log_every == 0:
            curve.append(loss)
        opt.step(cfg.lr_at(step))
    report = TrainReport(curve, {"final_loss": float(np.mean(curve[-50:]))})
    return model, report


# --------------------------------------------------------------------------
# classifier


@dataclass
class ClassifierConfig:
    hidden: tuple = (256, 128)


class ClassifierModel:
    """Two hidden layers feeding a 4-way content softmax and one sigmoid per attribute."""

    kind = "classifier"
    feature_layers = ("h1", "h2")

    def __init__(self, config: ClassifierConfig, store: nm.ParamStore, seed: int = 0):
        self.config = config
        self.store = store
        self.seed = seed

    @classmethod
    def init(cls, config: ClassifierConfig, seed: int = 0) -> "ClassifierModel":
        rng = nm.make_rng(seed, 0xC1)
        h1, h2 = config.hidden
        s = nm.ParamStore()
        s.add("l1.w", nm.glorot(rng, N_PIX, h1))
        s.add("l1.b", np.zeros(h1))
        s.add("l2.w", nm.glorot(rng, h1, h2))
        s.add("l2.b", np.zeros(h2))
        s.add("content.w", nm.glorot(rng, h2, N_CONTENT))
        s.add("content.b", np.zeros(N_CONTENT))
        s.add("attr.w", nm.glorot(rng, h2, len(ATTRIBUTES)))
        s.add("attr.b", np.zeros(len(ATTRIBUTES)))
        return cls(config, s, seed)

    def forward(self, x: np.ndarray):
        p = self.store.params
        z1 = nm.linear(x, p["l1.w"], p["l1.b"])
        h1 = nm.silu(z1)
        z2 = nm.linear(h1, p["l2.w"], p["l2.b"])
        h2 = nm.silu(z2)
        content = nm.linear(h2, p["content.w"], p["content.b"])
        attr = nm.linear(h2, p["attr.w"], p["attr.b"])
        return content, attr, (x, z1, h1, z2, h2)

    def backward(self, dcontent, dattr, cache) -> None:
        p, g = self.store.params, self.store.grads
        x, z1, h1, z2, h2 = cache
        dh2a, g["attr.w"][...], g["attr.b"][...] = nm.linear_backward(dattr, h2, p["attr.w"])
        dh2c, g["content.w"][...], g["content.b"][...] = nm.linear_backward(
            dcontent, h2, p["content.w"])
        dz2 = nm.silu_backward(dh2a + dh2c, z2)
        dh1, g["l2.w"][...], g["l2.b"][...] = nm.linear_backward(dz2, h1, p["l2.w"])
        dz1 = nm.silu_backward(dh1, z1)
        _, g["l1.w"][...], g["l1.b"][...] = nm.linear_backward(dz1, x, p["l1.w"])


def classifier_loss(model: ClassifierModel, x, content_labels, attr_labels) -> float:
    """Content cross-entropy plus the summed attribute binary cross-entropies."""
    content, attr, cache = model.forward(x)
    lc, dc = nm.softmax_cross_entropy(content, content_labels)
    la, da = nm.binary_cross_entropy_logits(attr, attr_labels)
    model.backward(dc, da, cache)
    return lc + la


def classify_batch(model: ClassifierModel, images: np.ndarray):
    """``(content_probs (N,4), attr_probs (N,4))`` for a batch of images."""
    xb, _ = _as_batch(images)
    content, attr, _ = model.forward(xb)
    return nm.softmax(content), nm.sigmoid(attr)


def classify(model: ClassifierModel, image: np.ndarray):
    if np.shape(image) != (SIZE, SIZE):
        raise ModelError(f"expected a {SIZE}x{SIZE} image, got {np.shape(image)}")
    cp, ap = classify_batch(model, image)
    return cp[0], dict(zip(ATTRIBUTES, ap[0].tolist()))


def _normalize_rows(h: np.ndarray):
    n = np.linalg.norm(h, axis=1, keepdims=True)
    zero = n[:, 0] == 0.0
    return np.where(n > 0, h / np.where(n > 0, n, 1.0), 0.0), zero


def features_batch(model: ClassifierModel, images: np.ndarray) -> list[np.ndarray]:
    xb, _ = _as_batch(images)
    _, _, (_, _, h1, _, h2) = model.forward(xb)
    return [_normalize_rows(h)[0] for h in (h1, h2)]


def features(model: ClassifierModel, image: np.ndarray, return_flags: bool = False):
    """Unit-normalized activations of the two hidden layers.

    An all-zero layer is passed through unchanged; with ``return_flags`` a list
    of per-layer "was zero" booleans is returned alongside.
    """
    if np.shape(image) != (SIZE, SIZE):
        raise ModelError(f"expected a {SIZE}x{SIZE} image, got {np.shape(image)}")
    xb, _ = _as_batch(image)
    _, _, (_, _, h1, _, h2) = model.forward(xb)
    pairs = [_normalize_rows(h) for h in (h1, h2)]
    feats = [f[0] for f, _ in pairs]
    if return_flags:
        return feats, [bool(z[0]) for _, z in pairs]
    return feats


def head_metrics(pred: np.ndarray, truth: np.ndarray) -> dict:
    pred, truth = np.asarray(pred, bool), np.asarray(truth, bool)
    tp = float(np.sum(pred & truth))
    fp = float(np.sum(pred & ~truth))
    fn = float(np.sum(~pred & truth))
    f1 = 2 * tp / (2 * tp + fp + fn) if tp + fp + fn > 0 else 1.0
    return {"accuracy": float(np.mean(pred == truth)), "f1": f1}


def evaluate_classifier(model: ClassifierModel, dataset: Dataset) -> dict:
    cp, ap = classify_batch(model, dataset.images())
    y = dataset.content_labels()
    pred = cp.argmax(axis=1)
    f1s = [head_metrics(pred == k, y == k)["f1"] for k in range(N_CONTENT)]
    out = {"content": {"accuracy": float(np.mean(pred == y)), "f1": float(np.mean(f1s))}}
    labels = dataset.attr_labels()
    for i, a in enumerate(ATTRIBUTES):
        out[a] = head_metrics(ap[:, i] >= 0.5, labels[:, i] > 0.5)
    return out


def train_classifier(dataset: Dataset, cfg: TrainConfig | None = None,
                     heldout: Dataset | None = None, config: ClassifierConfig | None = None):
    cfg = cfg or classifier_train_defaults()
    cfg.validate()
    labels = dataset.attr_labels()
    content = dataset.content_labels()
    for i, a in enumerate(ATTRIBUTES):
        if len(np.unique(labels[:, i])) < 2:
            raise ModelError(f"attribute head {a!r} has a single class in the training data")
    if len(np.unique(content)) < 2:
        raise ModelError("content head has a single class in the training data")
    model = ClassifierModel.init(config or ClassifierConfig(), cfg.seed)
    images = dataset.images().reshape(len(dataset), N_PIX)
    rng = nm.make_rng(cfg.seed, 0x7C)
    opt = nm.Adam(model.store, cfg.lr, cfg.beta1, cfg.beta2)
    curve = []
    for step in range(cfg.steps):
        idx = rng.integers(len(dataset), cfg.batch_size)
        loss = classifier_loss(model, images[idx], content[idx], labels[idx])
        if step % cfg.log_every == 0:
            curve.append(loss)
        opt.step(cfg.lr_at(step))
    if not curve:
        c, a, _ = model.forward(images[: cfg.batch_size])
        curve.append(nm.softmax_cross_entropy(c, content[: cfg.batch_size])[0]
                     + nm.binary_cross_entropy_logits(a, labels[: cfg.batch_size])[0])
    metrics = {"train": evaluate_classifier(model, dataset)}
    if heldout is not None:
        metrics["heldout"] = evaluate_classifier(model, heldout)
    return model, TrainReport(curve, metrics)


# --------------------------------------------------------------------------
# checkpoints

MAGIC = b"MDL1"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(model, path) -> Path:
    """Write magic, u32 header length, JSON header, little-endian f32 data."""
    tensors, blobs, offset = [], [], 0
    for name in model.store.names():
        arr = np.ascontiguousarray(model.store[name], dtype="<f4")
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset,
                        "length": arr.nbytes})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    config = asdict(model.config)
    header = {"format_version": FORMAT_VERSION, "kind": model.kind, "seed": model.seed,
              "config": config, "tensors": tensors}
    if model.kind == "denoiser":
        header["schedule"] = {"T": config["T"], "beta_start": config["beta_start"],
                              "beta_end": config["beta_end"]}
    raw = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(MAGIC + struct.pack("<I", len(raw)) + raw + b"".join(blobs))
    tmp.replace(path)
    return path


def load_checkpoint(path):
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"{path}: checkpoint not found")
    data = path.read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:4]!r}")
    if len(data) < 8:
        raise CheckpointError(f"{path}: truncated header length")
    (hlen,) = struct.unpack("<I", data[4:8])
    try:
        header = json.loads(data[8:8 + hlen])
    except ValueError as exc:
        raise CheckpointError(f"{path}: unreadable header ({exc})") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format_version {header.get('format_version')}")
    body = data[8 + hlen:]
    store = nm.ParamStore()
    for t in header["tensors"]:
        chunk = body[t["offset"]:t["offset"] + t["length"]]
        if len(chunk) != t["length"]:
            raise CheckpointError(f"{path}: tensor {t['name']!r} truncated")
        store.add(t["name"], np.frombuffer(chunk, dtype="<f4").astype(np.float64)
                  .reshape(t["shape"]))
    cfg = header["config"]
    cfg["hidden"] = tuple(cfg["hidden"])
    if header["kind"] == "denoiser":
        return DenoiserModel(DenoiserConfig(**cfg), store, header["seed"])
    if header["kind"] == "classifier":
        return ClassifierModel(ClassifierConfig(**cfg), store, header["seed"])
    raise CheckpointError(f"{path}: unknown model kind {header['kind']!r}")


def round_to_f32(model):
    """Copy of ``model`` with parameters rounded exactly as a checkpoint stores them."""
    store = nm.ParamStore()
    for k, v in model.store.params.items():
        store.add(k, v.astype(np.float32).astype(np.float64))
    return type(model)(model.config, store, model.seed)
