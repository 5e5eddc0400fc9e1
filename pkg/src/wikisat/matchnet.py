"""Toy convolutional encoder trained by image-to-text matching or weak labels.

Everything is plain numpy with hand-written backward passes. Images are
batched as ``(N, H, W, C)``; convolutions are 3x3 with padding 1 and are
computed by gathering the nine shifted views of the padded input.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass, field
from typing import BinaryIO, Sequence

import numpy as np

CHECKPOINT_MAGIC = b"WSMN"
CHECKPOINT_VERSION = 1
_EPS = 1e-12


class TrainingError(RuntimeError):
    pass


@dataclass
class EncoderConfig:
    input_size: int = 64
    in_channels: int = 3
    channels: tuple[int, ...] = (8, 16, 32)
    kernel: int = 3
    stride: int = 2

    @property
    def out_dim(self) -> int:
        return self.channels[-1]


@dataclass
class HeadConfig:
    kind: str = "match"  # "match" projects to the text space, "classify" to labels
    out_dim: int = 300
    hidden_layers: int = 0  # extra M->M ReLU layers before the projection
    normalize: bool = True


# ---------------------------------------------------------------------------
# Layers


def _conv_forward(x, w, b, stride):
    n, h, wd, c = x.shape
    k = w.shape[0]
    pad = k // 2
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    cols = np.empty((n, ho, wo, k, k, c), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :]
    cols = cols.reshape(n * ho * wo, k * k * c)
    out = cols @ w.reshape(k * k * c, -1) + b
    return out.reshape(n, ho, wo, -1), (cols, x.shape, xp.shape)


def _conv_backward(dout, w, cache, stride):
    cols, x_shape, xp_shape = cache
    n, ho, wo, cout = dout.shape
    k = w.shape[0]
    c = x_shape[3]
    dflat = dout.reshape(-1, cout)
    dw = (cols.T @ dflat).reshape(w.shape)
    db = dflat.sum(axis=0)
    dcols = (dflat @ w.reshape(k * k * c, cout).T).reshape(n, ho, wo, k, k, c)
    dxp = np.zeros(xp_shape, dtype=dout.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += dcols[:, :, :, i, j, :]
    pad = k // 2
    dx = dxp[:, pad:pad + x_shape[1], pad:pad + x_shape[2], :]
    return dx, dw, db


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cosine_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na = np.linalg.norm(a, axis=1) + _EPS
    nb = np.linalg.norm(b, axis=1) + _EPS
    return np.sum(a * b, axis=1) / (na * nb)


def match_loss(z_v: np.ndarray, z_t: np.ndarray) -> float:
    """``1 - cos(z_v, z_t)`` for a single pair of nonzero vectors."""
    from .doc2vec import cosine

    return 1.0 - cosine(z_v, z_t)


def cross_entropy_loss(p: np.ndarray, label_index: int) -> float:
    p = np.asarray(p, dtype=np.float64)
    if not 0 <= label_index < p.shape[-1]:
        raise ValueError(f"label index {label_index} out of range for {p.shape[-1]} classes")
    return float(-np.log(max(p[label_index], 1e-300)))


# ---------------------------------------------------------------------------
# Model


@dataclass
class MatchModel:
    encoder: EncoderConfig
    head: HeadConfig
    params: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)  # free-form, e.g. class names

    # -- construction -------------------------------------------------------

    @classmethod
    def create(cls, encoder: EncoderConfig | None = None, head: HeadConfig | None = None,
               seed: int = 0, dtype=np.float32) -> "MatchModel":
        model = cls(encoder or EncoderConfig(), head or HeadConfig())
        rng = np.random.default_rng(seed)
        model.params = {name: _init(rng, name, shape).astype(dtype) for name, shape in model.shapes()}
        return model

    def shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        enc, out = self.encoder, []
        cin = enc.in_channels
        for i, cout in enumerate(enc.channels):
            out += [(f"conv{i}.w", (enc.kernel, enc.kernel, cin, cout)), (f"conv{i}.b", (cout,))]
            cin = cout
        out += self.head_shapes(self.head)
        return out

    def head_shapes(self, head: HeadConfig) -> list[tuple[str, tuple[int, ...]]]:
        m = self.encoder.out_dim
        prefix = "proj" if head.kind == "match" else "cls"
        out = []
        for i in range(head.hidden_layers):
            out += [(f"{prefix}.hidden{i}.w", (m, m)), (f"{prefix}.hidden{i}.b", (m,))]
        out += [(f"{prefix}.w", (m, head.out_dim)), (f"{prefix}.b", (head.out_dim,))]
        return out

    def encoder_names(self) -> list[str]:
        return [n for n in self.params if n.startswith("conv")]

    def head_names(self) -> list[str]:
        return [n for n in self.params if not n.startswith("conv")]

    def with_head(self, head: HeadConfig, seed: int = 0) -> "MatchModel":
        """Copy of the encoder with a freshly initialized head."""
        rng = np.random.default_rng(seed)
        new = MatchModel(self.encoder, head)
        dtype = self.dtype
        new.params = {n: self.params[n].copy() for n in self.encoder_names()}
        for name, shape in new.head_shapes(head):
            new.params[name] = _init(rng, name, shape).astype(dtype)
        return new

    def astype(self, dtype) -> "MatchModel":
        return MatchModel(self.encoder, self.head, {n: p.astype(dtype) for n, p in self.params.items()},
                          dict(self.meta))

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def encoder_hash(self) -> str:
        h = hashlib.sha256()
        for name in self.encoder_names():
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name]).tobytes())
        return h.hexdigest()

    # -- forward / backward -------------------------------------------------

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x)
        if x.ndim == 3:
            x = x[None]
        enc = self.encoder
        if x.shape[1:] != (enc.input_size, enc.input_size, enc.in_channels):
            raise ValueError(f"expected images of shape {(enc.input_size, enc.input_size, enc.in_channels)}, "
                             f"got {x.shape[1:]}")
        return x.astype(self.dtype, copy=False)

    def encode_batch(self, x: np.ndarray, keep_cache: bool = False):
        """Encoder features ``(N, M)``; optionally the forward cache for backprop."""
        x = self._check_input(x)
        caches = []
        h = x
        for i in range(len(self.encoder.channels)):
            pre, cache = _conv_forward(h, self.params[f"conv{i}.w"], self.params[f"conv{i}.b"], self.encoder.stride)
            h = np.maximum(pre, 0)
            caches.append((cache, pre > 0))
        z = h.mean(axis=(1, 2))
        if keep_cache:
            return z, (caches, h.shape)
        return z

    def _encoder_backward(self, dz, cache, grads):
        caches, shape = cache
        n, ho, wo, c = shape
        dh = np.broadcast_to(dz[:, None, None, :] / (ho * wo), shape).astype(dz.dtype)
        for i in reversed(range(len(self.encoder.channels))):
            conv_cache, mask = caches[i]
            dpre = dh * mask
            dh, dw, db = _conv_backward(dpre, self.params[f"conv{i}.w"], conv_cache, self.encoder.stride)
            grads[f"conv{i}.w"] = dw
            grads[f"conv{i}.b"] = db

    def _head_forward(self, z):
        """Forward through the head; returns output and a backward closure list."""
        head = self.head
        prefix = "proj" if head.kind == "match" else "cls"
        cache = []
        h = z
        for i in range(head.hidden_layers):
            pre = h @ self.params[f"{prefix}.hidden{i}.w"] + self.params[f"{prefix}.hidden{i}.b"]
            cache.append((f"{prefix}.hidden{i}", h, pre > 0))
            h = np.maximum(pre, 0)
        pre = h @ self.params[f"{prefix}.w"] + self.params[f"{prefix}.b"]
        if head.kind == "match":
            cache.append((prefix, h, pre > 0))
            out = np.maximum(pre, 0)
        else:
            cache.append((prefix, h, None))
            out = pre
        return out, cache

    def _head_backward(self, dout, cache, grads):
        d = dout
        for name, h_in, mask in reversed(cache):
            if mask is not None:
                d = d * mask
            grads[f"{name}.w"] = h_in.T @ d
            grads[f"{name}.b"] = d.sum(axis=0)
            d = d @ self.params[f"{name}.w"].T
        return d

    def project(self, x: np.ndarray) -> np.ndarray:
        """Image embeddings in the text space (L2-normalized when configured)."""
        out, _ = self._head_forward(self.encode_batch(x))
        if self.head.normalize:
            out = out / (np.linalg.norm(out, axis=1, keepdims=True) + _EPS)
        return out

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        if self.head.kind != "classify":
            raise ValueError("model has no classifier head")
        logits, _ = self._head_forward(self.encode_batch(x))
        return softmax(logits)

    def loss_and_grads(self, x: np.ndarray, target: np.ndarray, train_encoder: bool = True):
        """Mean loss over the batch and gradients for every parameter.

        ``target`` holds text vectors ``(N, K)`` for a match head or integer
        labels ``(N,)`` for a classifier head. Returns ``(loss, grads, stat)``
        where ``stat`` is the mean cosine D (match) or accuracy (classify).
        """
        z, enc_cache = self.encode_batch(x, keep_cache=True)
        out, head_cache = self._head_forward(z)
        n = out.shape[0]
        grads: dict[str, np.ndarray] = {}
        if self.head.kind == "match":
            t = np.asarray(target, dtype=out.dtype)
            v = out
            if self.head.normalize:
                norm = np.linalg.norm(out, axis=1, keepdims=True) + _EPS
                v = out / norm
            nv = np.linalg.norm(v, axis=1, keepdims=True) + _EPS
            nt = np.linalg.norm(t, axis=1, keepdims=True) + _EPS
            cos = np.sum(v * t, axis=1, keepdims=True) / (nv * nt)
            loss = float(np.mean(1.0 - cos))
            dv = -(t / (nv * nt) - cos * v / (nv * nv)) / n
            if self.head.normalize:
                u = v
                dout = (dv - u * np.sum(dv * u, axis=1, keepdims=True)) / norm
            else:
                dout = dv
            stat = float(cos.mean())
        else:
            labels = np.asarray(target, dtype=np.int64)
            p = softmax(out)
            loss = float(-np.mean(np.log(p[np.arange(n), labels] + 1e-300)))
            dout = p.copy()
            dout[np.arange(n), labels] -= 1.0
            dout /= n
            stat = float(np.mean(p.argmax(axis=1) == labels))
        dz = self._head_backward(dout, head_cache, grads)
        if train_encoder:
            self._encoder_backward(dz, enc_cache, grads)
        return loss, grads, stat

    def loss(self, x, target) -> float:
        return self.loss_and_grads(x, target, train_encoder=False)[0]


def _init(rng: np.random.Generator, name: str, shape) -> np.ndarray:
    if name.endswith(".b"):
        return np.zeros(shape)
    fan_in = int(np.prod(shape[:-1]))
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def as_pixels(img) -> np.ndarray:
    """Array view of an ImageTensor or array-like (ndarray's own ``.data`` is a buffer)."""
    return np.asarray(img) if isinstance(img, (np.ndarray, list, tuple)) else np.asarray(img.data)


def encode(model: MatchModel, img) -> np.ndarray:
    """Encoder feature vector (length M) for a single image."""
    data = as_pixels(img)
    return model.encode_batch(data[None])[0]


# ---------------------------------------------------------------------------
# Optimization


@dataclass
class OptimizerState:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def update(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        """Adam step on the parameters present in ``grads`` (in place)."""
        self.step += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.step
        c2 = 1 - b2 ** self.step
        for name, g in grads.items():
            p = params[name]
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            if self.learning_rate:
                p -= (self.learning_rate * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


@dataclass
class FitConfig:
    epochs: int = 50
    learning_rate: float = 1e-4
    batch_size: int = 64
    seed: int = 42


@dataclass
class EpochLog:
    epoch: int
    mean_loss: float
    stat: float
    lr: float


@dataclass
class TrainResult:
    model: MatchModel
    history: list[EpochLog]
    stat_name: str

    def csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["epoch", "mean_loss", self.stat_name, "lr"])
        for row in self.history:
            writer.writerow([row.epoch, f"{row.mean_loss:.6f}", f"{row.stat:.6f}", row.lr])
        return buf.getvalue()


def fit(model: MatchModel, images: np.ndarray, targets: np.ndarray, config: FitConfig,
        param_names: Sequence[str] | None = None) -> list[EpochLog]:
    """Mini-batch Adam on ``model`` in place; only ``param_names`` are updated (default all)."""
    images = np.asarray(images)
    n = len(images)
    if n == 0:
        raise ValueError("empty training set")
    names = list(param_names) if param_names is not None else list(model.params)
    train_encoder = any(nm.startswith("conv") for nm in names)
    opt = OptimizerState(learning_rate=config.learning_rate)
    rng = np.random.default_rng(config.seed)
    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        losses, stats, weights = [], [], []
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            loss, grads, stat = model.loss_and_grads(images[idx], targets[idx], train_encoder=train_encoder)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, step {opt.step}")
            opt.update(model.params, {k: grads[k] for k in names})
            losses.append(loss)
            stats.append(stat)
            weights.append(len(idx))
        history.append(EpochLog(epoch, float(np.average(losses, weights=weights)),
                                float(np.average(stats, weights=weights)), config.learning_rate))
    return history


def _stack(images) -> np.ndarray:
    return np.stack([as_pixels(img) for img in images]).astype(np.float32)


def train_match(images, text_vectors, config: FitConfig | None = None,
                encoder: EncoderConfig | None = None, normalize: bool = True,
                hidden_layers: int = 0, model: MatchModel | None = None) -> TrainResult:
    """Train encoder + projection head to maximize cosine with paired text vectors."""
    config = config or FitConfig()
    z_t = np.asarray(text_vectors, dtype=np.float32)
    if np.any(np.linalg.norm(z_t, axis=1) == 0):
        raise ValueError("text vectors must be nonzero")
    if model is None:
        head = HeadConfig("match", z_t.shape[1], hidden_layers, normalize)
        model = MatchModel.create(encoder, head, seed=config.seed)
    elif model.head.out_dim != z_t.shape[1]:
        raise ValueError("projection dimension does not match text vectors")
    history = fit(model, _stack(images), z_t, config)
    return TrainResult(model, history, "mean_D")


def train_weak(images, labels: Sequence[int], num_labels: int, config: FitConfig | None = None,
               encoder: EncoderConfig | None = None) -> TrainResult:
    """Train encoder + softmax classifier on weak labels with cross-entropy."""
    config = config or FitConfig()
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_labels):
        raise ValueError("labels outside classifier range")
    model = MatchModel.create(encoder, HeadConfig("classify", num_labels), seed=config.seed)
    history = fit(model, _stack(images), labels, config)
    return TrainResult(model, history, "accuracy")


# ---------------------------------------------------------------------------
# Gradient check


@dataclass
class GradCheckReport:
    max_rel_error: float
    checked: int
    tolerance: float
    worst: str
    kinks_skipped: int = 0  # samples whose +-step straddled a ReLU kink

    @property
    def passed(self) -> bool:
        return self.checked > 0 and self.max_rel_error < self.tolerance


def _relu_signature(model: MatchModel, x: np.ndarray) -> bytes:
    """Digest of every ReLU on/off mask for input ``x``."""
    z, (caches, _) = model.encode_batch(x, keep_cache=True)
    _, head_cache = model._head_forward(z)
    h = hashlib.sha256()
    for _, mask in caches:
        h.update(np.packbits(mask).tobytes())
    for _, _, mask in head_cache:
        if mask is not None:
            h.update(np.packbits(mask).tobytes())
    return h.digest()


def gradient_check(model: MatchModel, x: np.ndarray, target: np.ndarray, tolerance: float = 1e-4,
                   n_params: int = 200, step: float = 1e-5, seed: int = 0,
                   names: Sequence[str] | None = None) -> GradCheckReport:
    """Compare backprop gradients with central differences on sampled entries.

    Central differences are only valid where the loss is smooth over
    ``[p - step, p + step]``. An entry whose perturbation flips any ReLU
    mask is set aside (counted in ``kinks_skipped``) and the next sampled
    entry is used instead.
    """
    if model.dtype != np.float64:
        raise ValueError("gradient checks require a float64 model")
    names = list(names) if names is not None else list(model.params)
    _, grads, _ = model.loss_and_grads(x, target)
    base = _relu_signature(model, x)
    rng = np.random.default_rng(seed)
    sizes = np.array([model.params[n].size for n in names])
    candidates = rng.permutation(int(sizes.sum()))
    offsets = np.concatenate(([0], np.cumsum(sizes)))
    worst, worst_name, checked, kinks = 0.0, "", 0, 0
    for f in candidates:
        if checked >= n_params:
            break
        which = int(np.searchsorted(offsets, f, side="right") - 1)
        name, idx = names[which], int(f - offsets[which])
        p = model.params[name].reshape(-1)
        orig = p[idx]
        p[idx] = orig + step
        up, sig_up = model.loss(x, target), _relu_signature(model, x)
        p[idx] = orig - step
        down, sig_down = model.loss(x, target), _relu_signature(model, x)
        p[idx] = orig
        if sig_up != base or sig_down != base:
            kinks += 1
            continue
        checked += 1
        numeric = (up - down) / (2 * step)
        analytic = float(grads[name].reshape(-1)[idx]) if name in grads else 0.0
        scale = max(abs(numeric), abs(analytic))
        # below this both are zero up to finite-difference round-off
        rel = 0.0 if scale < 1e-8 else abs(numeric - analytic) / scale
        if rel > worst:
            worst, worst_name = rel, f"{name}[{idx}]"
    return GradCheckReport(worst, checked, tolerance, worst_name, kinks)


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(model: MatchModel, fh: BinaryIO) -> None:
    header = {
        "encoder": asdict(model.encoder),
        "head": asdict(model.head),
        "params": [[name, list(p.shape)] for name, p in model.params.items()],
        "meta": model.meta,
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    fh.write(CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(raw)) + raw)
    for p in model.params.values():
        fh.write(np.ascontiguousarray(p, dtype="<f4").tobytes())


def load_checkpoint(fh: BinaryIO) -> MatchModel:
    if fh.read(4) != CHECKPOINT_MAGIC:
        raise ValueError("not a model checkpoint")
    version, length = struct.unpack("<II", fh.read(8))
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header = json.loads(fh.read(length))
    enc = header["encoder"]
    enc["channels"] = tuple(enc["channels"])
    model = MatchModel(EncoderConfig(**enc), HeadConfig(**header["head"]), meta=header.get("meta", {}))
    expected = model.shapes()
    stored = [(n, tuple(s)) for n, s in header["params"]]
    if stored != expected:
        raise ValueError("checkpoint shape manifest does not match its architecture")
    for name, shape in stored:
        count = int(np.prod(shape))
        raw = fh.read(4 * count)
        if len(raw) != 4 * count:
            raise ValueError(f"truncated checkpoint while reading {name}")
        model.params[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
    return model
