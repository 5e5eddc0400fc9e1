"""PV-DBOW paragraph vectors trained with negative sampling.

Each document owns a vector ``d``; training predicts the document's words
from ``d`` alone through an output embedding matrix, with the noise words
drawn from the unigram distribution raised to the 3/4 power.
"""
from __future__ import annotations

import hashlib
import re
import struct
from collections import Counter
from dataclasses import dataclass, field
from typing import BinaryIO, Iterable, Sequence

import numpy as np

MAGIC = b"PVDM"
TRAILER_MAGIC = b"PVTR"
VERSION = 1

_TOKEN_RE = re.compile(r"[^\W_]+")


class EmptyVocabularyError(ValueError):
    pass


class CoverageError(ValueError):
    """No token of the document is in the model vocabulary."""


class TrainingDivergedError(RuntimeError):
    pass


def tokenize(text: str) -> list[str]:
    """Lowercase and split on anything that is not a letter or digit."""
    return _TOKEN_RE.findall(text.lower())


@dataclass
class TrainConfig:
    k: int = 300
    epochs: int = 100
    learning_rate: float = 0.025
    min_learning_rate: float = 0.0001
    negatives: int = 5
    min_count: int = 1
    subsample: float = 1e-4
    seed: int = 42

    def __post_init__(self):
        if self.k <= 0 or self.epochs < 0 or self.negatives <= 0 or self.min_count <= 0:
            raise ValueError("k, negatives and min_count must be positive; epochs non-negative")
        if not 0 < self.min_learning_rate <= self.learning_rate and self.learning_rate != 0:
            raise ValueError("need 0 < min_learning_rate <= learning_rate")
        if self.subsample < 0:
            raise ValueError("subsample must be non-negative")

    def lr_at(self, progress: float) -> float:
        """Linearly decayed learning rate for training progress in [0, 1]."""
        lr = self.learning_rate - (self.learning_rate - self.min_learning_rate) * progress
        return max(lr, self.min_learning_rate) if self.learning_rate else 0.0


@dataclass
class Vocabulary:
    tokens: list[str]
    counts: np.ndarray
    min_count: int
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    @property
    def total_tokens(self) -> int:
        return int(self.counts.sum())

    def encode(self, tokens: Iterable[str]) -> np.ndarray:
        return np.array([self.index[t] for t in tokens if t in self.index], dtype=np.int64)

    def noise_cdf(self) -> np.ndarray:
        weights = self.counts.astype(np.float64) ** 0.75
        cdf = np.cumsum(weights / weights.sum())
        cdf[-1] = 1.0
        return cdf


def build_vocab(corpus: Sequence[Sequence[str]], min_count: int = 1) -> Vocabulary:
    if not corpus:
        raise EmptyVocabularyError("corpus is empty")
    counts = Counter(t for doc in corpus for t in doc)
    kept = sorted((t for t, c in counts.items() if c >= min_count), key=lambda t: (-counts[t], t))
    if not kept:
        raise EmptyVocabularyError(f"no token occurs at least {min_count} times")
    return Vocabulary(kept, np.array([counts[t] for t in kept], dtype=np.int64), min_count)


@dataclass
class ParagraphVectorModel:
    vocab: Vocabulary
    doc_vectors: np.ndarray
    word_output_vectors: np.ndarray
    rng_seed: int = 42
    config: TrainConfig | None = None
    epoch_learning_rates: list[float] = field(default_factory=list)

    @property
    def k(self) -> int:
        return self.doc_vectors.shape[1]

    def noise_cdf(self) -> np.ndarray:
        return self.vocab.noise_cdf()

    def infer_vector(self, tokens: Sequence[str], steps: int = 20, learning_rate: float | None = None) -> np.ndarray:
        return infer_vector(self, tokens, steps, learning_rate)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def negative_sampling_loss(d: np.ndarray, out_rows: np.ndarray, labels: np.ndarray) -> float:
    """Log-loss of one (doc, target + noise words) step.

    ``-sum(y log s(w.d) + (1 - y) log(1 - s(w.d)))`` over the rows of
    ``out_rows``; the training update is gradient descent on this quantity.
    """
    f = out_rows @ d
    return float(-np.sum(labels * -np.logaddexp(0, -f) + (1 - labels) * -np.logaddexp(0, f)))


def sgns_step(d: np.ndarray, w_out: np.ndarray, targets: np.ndarray, labels: np.ndarray,
              lr: float, update_words: bool = True) -> None:
    """One in-place update of ``d`` (and the output rows unless frozen).

    ``g = lr * (y - s(w.d))``; ``w += g d`` and ``d += g w_old``.
    """
    rows = w_out[targets]
    g = lr * (labels - _sigmoid(rows @ d))
    delta_d = g @ rows
    if update_words:
        np.add.at(w_out, targets, np.outer(g, d))
    d += delta_d


def _keep_probability(vocab: Vocabulary, threshold: float) -> np.ndarray:
    if threshold <= 0:
        return np.ones(len(vocab))
    freq = vocab.counts / vocab.total_tokens
    keep = (np.sqrt(freq / threshold) + 1.0) * threshold / freq
    return np.minimum(keep, 1.0)


def _run_doc(d, w_out, ids, cdf, keep, lr, negatives, rng, update_words=True):
    if len(ids) == 0:
        return
    ids = ids[rng.random(len(ids)) < keep[ids]]
    if len(ids) == 0:
        return
    noise = np.searchsorted(cdf, rng.random((len(ids), negatives)), side="right")
    labels = np.zeros(negatives + 1)
    labels[0] = 1.0
    for w, negs in zip(ids, noise):
        targets = np.concatenate(([w], negs[negs != w]))
        sgns_step(d, w_out, targets, labels[: len(targets)], lr, update_words)


def train(corpus: Sequence[Sequence[str]], config: TrainConfig | None = None) -> ParagraphVectorModel:
    """Train one paragraph vector per document in ``corpus`` (token lists).

    Single-threaded and deterministic for a fixed ``config.seed``.
    """
    config = config or TrainConfig()
    vocab = build_vocab(corpus, config.min_count)
    rng = np.random.default_rng(config.seed)
    k = config.k
    docs = rng.uniform(-0.5 / k, 0.5 / k, size=(len(corpus), k))
    w_out = rng.uniform(-0.5 / k, 0.5 / k, size=(len(vocab), k))
    encoded = [vocab.encode(doc) for doc in corpus]
    cdf = vocab.noise_cdf()
    keep = _keep_probability(vocab, config.subsample)

    model = ParagraphVectorModel(vocab, docs, w_out, config.seed, config)
    n_docs = len(corpus)
    total = max(config.epochs * n_docs, 1)
    for epoch in range(config.epochs):
        model.epoch_learning_rates.append(config.lr_at(epoch * n_docs / total))
        order = rng.permutation(n_docs)
        for step, i in enumerate(order):
            lr = config.lr_at((epoch * n_docs + step) / total)
            _run_doc(docs[i], w_out, encoded[i], cdf, keep, lr, config.negatives, rng)
        if not (np.isfinite(docs).all() and np.isfinite(w_out).all()):
            raise TrainingDivergedError(f"non-finite parameters after epoch {epoch}")
    return model


def _doc_seed(model: ParagraphVectorModel, tokens: Sequence[str]) -> int:
    h = hashlib.sha256(("\x1f".join(tokens)).encode("utf-8")).digest()
    return int.from_bytes(h[:8], "little") ^ model.rng_seed


def infer_vector(model: ParagraphVectorModel, tokens: Sequence[str], steps: int = 20,
                 learning_rate: float | None = None) -> np.ndarray:
    """Fit a fresh document vector against the frozen output embeddings."""
    ids = model.vocab.encode(tokens)
    if len(ids) == 0:
        raise CoverageError("document has no in-vocabulary token")
    config = model.config or TrainConfig(k=model.k)
    lr0 = config.learning_rate if learning_rate is None else learning_rate
    rng = np.random.default_rng(_doc_seed(model, tokens))
    k = model.k
    d = rng.uniform(-0.5 / k, 0.5 / k, size=k)
    w_out = np.asarray(model.word_output_vectors, dtype=np.float64)
    cdf = model.noise_cdf()
    keep = _keep_probability(model.vocab, config.subsample)
    for step in range(steps):
        lr = lr0 - (lr0 - config.min_learning_rate) * step / steps
        _run_doc(d, w_out, ids, cdf, keep, max(lr, 0.0), config.negatives, rng, update_words=False)
    if not np.isfinite(d).all():
        raise TrainingDivergedError("non-finite vector during inference")
    return d


def cosine(a, b) -> float:
    """Cosine of the angle between two nonzero vectors, robust to extreme scales."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    sa, sb = np.max(np.abs(a)) if a.size else 0.0, np.max(np.abs(b)) if b.size else 0.0
    if sa == 0 or sb == 0:
        raise ValueError("cosine is undefined for a zero vector")
    a, b = a / sa, b / sb
    value = float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))
    return min(1.0, max(-1.0, value))


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise cosines between rows of ``a`` and rows of ``b``."""
    a = a / np.linalg.norm(a, axis=1, keepdims=True)
    b = b / np.linalg.norm(b, axis=1, keepdims=True)
    return np.clip(a @ b.T, -1.0, 1.0)


# ---------------------------------------------------------------------------
# Binary model file


def save_model(model: ParagraphVectorModel, fh: BinaryIO) -> None:
    v, k = model.word_output_vectors.shape
    n = model.doc_vectors.shape[0]
    fh.write(MAGIC + struct.pack("<IIII", VERSION, k, v, n))
    for token in model.vocab.tokens:
        raw = token.encode("utf-8")
        fh.write(struct.pack("<I", len(raw)) + raw)
    fh.write(np.ascontiguousarray(model.doc_vectors, dtype="<f4").tobytes())
    fh.write(np.ascontiguousarray(model.word_output_vectors, dtype="<f4").tobytes())
    # trailer: what inference needs beyond the matrices
    fh.write(TRAILER_MAGIC + struct.pack("<qI", model.rng_seed, model.vocab.min_count))
    fh.write(np.ascontiguousarray(model.vocab.counts, dtype="<u8").tobytes())


def _read(fh: BinaryIO, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise ValueError("truncated model file")
    return data


def load_model(fh: BinaryIO) -> ParagraphVectorModel:
    if _read(fh, 4) != MAGIC:
        raise ValueError("not a paragraph-vector model file")
    version, k, v, n = struct.unpack("<IIII", _read(fh, 16))
    if version != VERSION:
        raise ValueError(f"unsupported model version {version}")
    tokens = []
    for _ in range(v):
        (length,) = struct.unpack("<I", _read(fh, 4))
        tokens.append(_read(fh, length).decode("utf-8"))
    docs = np.frombuffer(_read(fh, 4 * n * k), dtype="<f4").reshape(n, k).astype(np.float64)
    words = np.frombuffer(_read(fh, 4 * v * k), dtype="<f4").reshape(v, k).astype(np.float64)
    seed, min_count, counts = 42, 1, np.ones(v, dtype=np.int64)
    tail = fh.read(4)
    if tail == TRAILER_MAGIC:
        seed, min_count = struct.unpack("<qI", _read(fh, 12))
        counts = np.frombuffer(_read(fh, 8 * v), dtype="<u8").astype(np.int64)
    vocab = Vocabulary(tokens, counts, min_count)
    return ParagraphVectorModel(vocab, docs, words, seed, TrainConfig(k=k, seed=seed, min_count=min_count))
