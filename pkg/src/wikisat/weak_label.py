"""Rule-based weak labels from infobox raw labels and category links."""
from __future__ import annotations

import json
import re
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from typing import Iterable, Mapping, Sequence

from .corpus import ArticleRecord, normalize_text

DEFAULT_THRESHOLD = 100


class HierarchyError(ValueError):
    pass


@dataclass(frozen=True)
class KeywordHierarchy:
    clusters: tuple[tuple[str, tuple[str, ...]], ...]
    merge_map: Mapping[str, str] = field(default_factory=dict)
    discard_set: frozenset[str] = frozenset()

    def __post_init__(self):
        names = [name for name, _ in self.clusters]
        if len(set(names)) != len(names):
            raise HierarchyError("cluster names must be unique")
        keywords = self.keywords
        if len(set(keywords)) != len(keywords):
            dup = [k for k, n in Counter(keywords).items() if n > 1]
            raise HierarchyError(f"keywords appear more than once: {dup}")
        known = set(keywords)
        for old, new in self.merge_map.items():
            if old not in known:
                raise HierarchyError(f"merge source {old!r} is not a keyword")
            if new in self.merge_map and self.merge_map[new] != new:
                raise HierarchyError(f"merge target {new!r} is itself merged; chains are not allowed")
        missing = set(self.discard_set) - known
        if missing:
            raise HierarchyError(f"discard keywords not in any cluster: {sorted(missing)}")

    @property
    def keywords(self) -> list[str]:
        return [kw for _, kws in self.clusters for kw in kws]

    @cached_property
    def _patterns(self) -> list[tuple[str, re.Pattern]]:
        # left boundary is strict ("port" never hits "airport"); an optional
        # plural suffix is tolerated on the right ("airports in new york")
        return [
            (kw, re.compile(r"(?<![0-9a-z])" + re.escape(kw) + r"(?:s|es)?(?![0-9a-z])"))
            for kw in self.keywords
        ]

    @property
    def vocabulary(self) -> set[str]:
        """Labels accepted by :func:`merge_label`: keywords plus merge targets."""
        return set(self.keywords) | set(self.merge_map.values())

    def merged_labels(self) -> list[str]:
        """Post-merge label inventory excluding discarded keywords, in hierarchy order."""
        out: dict[str, None] = {}
        for kw in self.keywords:
            if kw not in self.discard_set:
                out.setdefault(self.merge_map.get(kw, kw), None)
        return list(out)


def parse_hierarchy(text: str) -> KeywordHierarchy:
    """Parse the ``[cluster name]`` / ``[merge]`` / ``[discard]`` text format.

    Blank lines and lines starting with ``#`` are ignored.
    """
    clusters: list[tuple[str, list[str]]] = []
    merge: dict[str, str] = {}
    discard: set[str] = set()
    section = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            head = normalize_text(line[1:-1])
            if head.startswith("cluster "):
                clusters.append((head[len("cluster "):].strip(), []))
                section = "cluster"
            elif head in ("merge", "discard"):
                section = head
            else:
                raise HierarchyError(f"line {lineno}: unknown section {line!r}")
            continue
        if section == "cluster":
            clusters[-1][1].append(normalize_text(line))
        elif section == "merge":
            if "->" not in line:
                raise HierarchyError(f"line {lineno}: expected 'old -> new'")
            old, new = (normalize_text(p) for p in line.split("->", 1))
            merge[old] = new
        elif section == "discard":
            discard.add(normalize_text(line))
        else:
            raise HierarchyError(f"line {lineno}: keyword outside of any section")
    return KeywordHierarchy(
        clusters=tuple((name, tuple(kws)) for name, kws in clusters),
        merge_map=merge,
        discard_set=frozenset(discard),
    )


def load_hierarchy(path=None) -> KeywordHierarchy:
    """Load a hierarchy file, or the bundled default when ``path`` is None."""
    if path is None:
        text = resources.files("wikisat.data").joinpath("default_hierarchy.txt").read_text("utf-8")
    else:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    return parse_hierarchy(text)


def match_keyword(article: ArticleRecord, h: KeywordHierarchy) -> str | None:
    """First keyword found, scanning the raw label then each category per keyword."""
    fields = ([article.raw_label] if article.raw_label else []) + [normalize_text(c) for c in article.categories]
    if not fields:
        return None
    for kw, pattern in h._patterns:
        for text in fields:
            if pattern.search(text):
                return kw
    return None


def assign_label(article: ArticleRecord, h: KeywordHierarchy) -> str | None:
    kw = match_keyword(article, h)
    if kw is None or kw in h.discard_set:
        return None
    return kw


def merge_label(label: str, h: KeywordHierarchy) -> str:
    if label not in h.vocabulary:
        raise ValueError(f"unknown label {label!r}")
    return h.merge_map.get(label, label)


def prune_rare(histogram: Mapping[str, int], threshold: int) -> tuple[dict[str, int], dict[str, int]]:
    if threshold < 0:
        raise ValueError("threshold must be non-negative")
    kept = {k: v for k, v in histogram.items() if v >= threshold}
    pruned = {k: v for k, v in histogram.items() if v < threshold}
    return kept, pruned


@dataclass
class LabelReport:
    histogram: dict[str, int]
    unlabeled: int
    discarded: int
    pruned_labels: list[tuple[str, int]]

    @property
    def total(self) -> int:
        return sum(self.histogram.values()) + self.unlabeled + self.discarded

    def to_json(self) -> dict:
        return {
            "histogram": dict(sorted(self.histogram.items())),
            "unlabeled": self.unlabeled,
            "discarded": self.discarded,
            "pruned_labels": [list(p) for p in self.pruned_labels],
            "total": self.total,
        }


def _classify(article: ArticleRecord, h: KeywordHierarchy) -> tuple[str, str | None]:
    kw = match_keyword(article, h)
    if kw is None:
        return "unlabeled", None
    if kw in h.discard_set:
        return "discarded", None
    return "labeled", merge_label(kw, h)


def label_corpus(
    articles: Iterable[ArticleRecord],
    h: KeywordHierarchy,
    threshold: int = DEFAULT_THRESHOLD,
    jobs: int = 1,
) -> tuple[list[tuple[str, str]], LabelReport]:
    """Label every article and prune labels rarer than ``threshold``.

    Returns ``(pairs, report)`` where ``pairs`` lists ``(article_id, label)``
    in input order for articles that survive pruning.
    """
    articles = list(articles)
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            outcomes = list(pool.map(lambda a: _classify(a, h), articles))
    else:
        outcomes = [_classify(a, h) for a in articles]

    kinds = Counter(kind for kind, _ in outcomes)
    histogram = Counter(label for kind, label in outcomes if kind == "labeled")
    kept, pruned = prune_rare(histogram, threshold)
    pairs = [
        (a.id, label)
        for a, (kind, label) in zip(articles, outcomes)
        if kind == "labeled" and label in kept
    ]
    report = LabelReport(
        histogram=dict(sorted(kept.items())),
        unlabeled=kinds["unlabeled"] + sum(pruned.values()),
        discarded=kinds["discarded"],
        pruned_labels=sorted(pruned.items(), key=lambda kv: (-kv[1], kv[0])),
    )
    return pairs, report


def write_pairs(pairs: Sequence[tuple[str, str]], out) -> None:
    for article_id, label in pairs:
        out.write(json.dumps({"id": article_id, "label": label}) + "\n")
