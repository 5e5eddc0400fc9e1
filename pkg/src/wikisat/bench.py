"""Desk-scale pre-training and transfer benchmark built on the synthetic generators."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import doc2vec, synthetic
from .matchnet import EncoderConfig, FitConfig, HeadConfig, MatchModel, TrainResult, train_match
from .tiles import SyntheticProvider, make_tile_request
from .transfer import TemporalGroup, evaluate, finetune

BENCH_LABELS = ("airport", "lake", "station", "stadium", "town")
PROBE_CONFIG = dict(epochs=50, learning_rate=1e-2, batch_size=32)


@dataclass
class PairedSet:
    images: np.ndarray
    text_vectors: np.ndarray
    labels: np.ndarray
    label_names: tuple[str, ...]
    provider: SyntheticProvider


def render(provider: SyntheticProvider, coords, labels, names, tile_px: int = 64) -> np.ndarray:
    return np.stack([provider.fetch(make_tile_request(c, 0.3, tile_px, label=names[l])).data
                     for c, l in zip(coords, labels)])


def paired_set(seed: int = 42, n: int = 500, names=BENCH_LABELS, tile_px: int = 64,
               text_config: doc2vec.TrainConfig | None = None) -> PairedSet:
    """Synthetic articles, their paragraph vectors and label-consistent tiles."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % len(names)
    pages = [synthetic.labeled_article_page(rng, str(i), names[l]) for i, l in enumerate(labels)]
    model = doc2vec.train([doc2vec.tokenize(p.text) for p in pages], text_config or doc2vec.TrainConfig(seed=seed))
    provider = SyntheticProvider(seed=seed, labels=names)
    images = render(provider, [p.coord for p in pages], labels, names, tile_px)
    return PairedSet(images, model.doc_vectors, labels, tuple(names), provider)


def target_set(provider: SyntheticProvider, names, n_per_label: int, seed: int, tile_px: int = 64):
    """Fresh coordinates (disjoint from pre-training) labeled with ground truth."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n_per_label * len(names)) % len(names)
    coords = [synthetic.random_coord(rng) for _ in labels]
    return render(provider, coords, labels, names, tile_px), labels, coords


def temporal_groups(provider: SyntheticProvider, coords, labels, names, views: int = 3,
                    tile_px: int = 64) -> list[TemporalGroup]:
    variants = [provider.with_variant(v) for v in range(views)]
    return [
        TemporalGroup(f"area{i}", [p.fetch(make_tile_request(c, 0.3, tile_px, label=names[l])) for p in variants],
                      int(l))
        for i, (c, l) in enumerate(zip(coords, labels))
    ]


@dataclass
class TransferOutcome:
    match: TrainResult
    pretrained_top1: float
    random_top1: float
    single_top1: float
    temporal_top1: float


def run_transfer(seed: int, pretrain_epochs: int = 50, n_train: int = 40, n_test: int = 100,
                 views: int = 3, data: PairedSet | None = None) -> TransferOutcome:
    """Pre-train by matching, then compare fixed-encoder probes against a random encoder."""
    data = data or paired_set(seed)
    match = train_match(data.images, data.text_vectors, FitConfig(epochs=pretrain_epochs, seed=seed))
    x_train, y_train, _ = target_set(data.provider, data.label_names, n_train, seed + 1000)
    x_test, y_test, test_coords = target_set(data.provider, data.label_names, n_test, seed + 2000)
    probe = FitConfig(seed=seed, **PROBE_CONFIG)
    n_classes = len(data.label_names)

    pretrained = finetune(match.model, x_train, y_train, n_classes, "fixed", probe)
    random_init = MatchModel.create(EncoderConfig(), HeadConfig("match", data.text_vectors.shape[1]), seed=seed + 7)
    baseline = finetune(random_init, x_train, y_train, n_classes, "fixed", probe)

    groups = temporal_groups(data.provider, test_coords, y_test, data.label_names, views)
    single = evaluate(pretrained, [g.images[0] for g in groups], y_test)
    return TransferOutcome(
        match=match,
        pretrained_top1=evaluate(pretrained, x_test, y_test).top1,
        random_top1=evaluate(baseline, x_test, y_test).top1,
        single_top1=single.top1,
        temporal_top1=evaluate(pretrained, groups=groups).top1,
    )
