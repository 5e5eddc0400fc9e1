"""Streaming extraction of geolocated article records from a MediaWiki XML dump.

The parser is built directly on expat so that it never holds more than the
current page plus one read chunk in memory, and so that malformed input can
be reported with the byte offset at which expat gave up.
"""
from __future__ import annotations

import hashlib
import json
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterable, Iterator
from xml.parsers import expat

CHUNK_SIZE = 1 << 16


class DumpParseError(ValueError):
    """Raised when the dump is not well-formed XML."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class GeoCoordinate:
    lat: float
    lon: float

    def __post_init__(self):
        if not (-90.0 <= self.lat <= 90.0) or not (-180.0 <= self.lon <= 180.0):
            raise ValueError(f"coordinate out of range: ({self.lat}, {self.lon})")


@dataclass(frozen=True)
class ArticleRecord:
    id: str
    title: str
    body: str
    raw_label: str | None = None
    categories: tuple[str, ...] = ()
    coord: GeoCoordinate | None = None

    @property
    def body_sha256(self) -> str:
        return hashlib.sha256(self.body.encode("utf-8")).hexdigest()


@dataclass
class CorpusStats:
    total_articles: int = 0
    geolocated: int = 0
    with_raw_label: int = 0
    redirects: int = 0
    technical: int = 0
    bad_coordinates: int = 0

    def as_dict(self) -> dict:
        return dict(self.__dict__)


# ---------------------------------------------------------------------------
# Field extraction

_NUM = r"([+-]?\d+(?:\.\d*)?|[+-]?\.\d+)"
_INT = r"(\d+)"
_SEP = r"\s*\|\s*"
_DISPLAY = r"display\s*=\s*title\s*(?:\|[^{}]*)?\}\}"

_DECIMAL_RE = re.compile(
    r"\{\{\s*coord" + _SEP + _NUM + _SEP + _NUM + _SEP + _DISPLAY,
    re.IGNORECASE,
)
_DMS_RE = re.compile(
    r"\{\{\s*coord"
    + _SEP + _INT + _SEP + _INT + _SEP + _NUM + _SEP + r"([NSEW])"
    + _SEP + _INT + _SEP + _INT + _SEP + _NUM + _SEP + r"([NSEW])"
    + _SEP + _DISPLAY,
    re.IGNORECASE,
)
_INFOBOX_RE = re.compile(r"\{\{\s*infobox[ \t]+([^|\n}]*)", re.IGNORECASE)
_CATEGORY_RE = re.compile(r"\[\[\s*category\s*:\s*([^\]|]+)(?:\|[^\]]*)?\]\]", re.IGNORECASE)
_WS_RE = re.compile(r"\s+")


def normalize_text(text: str) -> str:
    """Lowercase and collapse runs of whitespace into single spaces."""
    return _WS_RE.sub(" ", text).strip().lower()


def dms_to_decimal(deg: int, minutes: int, sec: float, hemi: str) -> float:
    """Convert degrees/minutes/seconds plus hemisphere letter to signed decimal degrees.

    >>> round(dms_to_decimal(40, 38, 23, "N"), 6)
    40.639722
    >>> round(dms_to_decimal(73, 46, 44, "W"), 6)
    -73.778889
    """
    hemi = hemi.upper()
    if hemi not in ("N", "S", "E", "W"):
        raise ValueError(f"hemisphere must be one of N, S, E, W, got {hemi!r}")
    if deg < 0 or not 0 <= minutes < 60 or not 0 <= sec < 60:
        raise ValueError(f"invalid DMS components: {deg} {minutes} {sec}")
    value = deg + minutes / 60.0 + sec / 3600.0
    return -value if hemi in ("S", "W") else value


def decimal_to_dms(value: float, axis: str = "lat") -> tuple[int, int, float, str]:
    """Inverse of :func:`dms_to_decimal` for the given axis ('lat' or 'lon')."""
    if axis == "lat":
        hemi = "S" if value < 0 else "N"
    else:
        hemi = "W" if value < 0 else "E"
    value = abs(value)
    deg = int(value)
    rem = (value - deg) * 60.0
    minutes = int(rem)
    sec = (rem - minutes) * 60.0
    return deg, minutes, sec, hemi


def _coordinate(body: str) -> tuple[GeoCoordinate | None, bool]:
    """Return (coord, rejected) for the first coordinate template in ``body``."""
    matches = [m for m in (_DECIMAL_RE.search(body), _DMS_RE.search(body)) if m]
    if not matches:
        return None, False
    m = min(matches, key=lambda m: m.start())
    try:
        if m.re is _DECIMAL_RE:
            return GeoCoordinate(float(m.group(1)), float(m.group(2))), False
        d1, m1, s1, h1, d2, m2, s2, h2 = m.groups()
        if h1.upper() not in "NS" or h2.upper() not in "EW":
            return None, True
        lat = dms_to_decimal(int(d1), int(m1), float(s1), h1)
        lon = dms_to_decimal(int(d2), int(m2), float(s2), h2)
        return GeoCoordinate(lat, lon), False
    except ValueError:
        return None, True


def extract_coordinate(body: str) -> GeoCoordinate | None:
    """First decimal or DMS ``{{coord|...|display=title}}`` template in the body."""
    return _coordinate(body)[0]


def extract_raw_label(body: str) -> str | None:
    m = _INFOBOX_RE.search(body)
    if not m:
        return None
    label = normalize_text(m.group(1))
    return label or None


def extract_categories(body: str) -> list[str]:
    seen: dict[str, None] = {}
    for m in _CATEGORY_RE.finditer(body):
        name = normalize_text(m.group(1))
        if name:
            seen.setdefault(name, None)
    return list(seen)


# ---------------------------------------------------------------------------
# Streaming dump parser


def is_technical_title(title: str) -> bool:
    return ":" in title


def is_redirect(text: str) -> bool:
    return text.lstrip()[:9].upper() == "#REDIRECT"


def build_record(page_id: str, title: str, body: str, stats: CorpusStats | None = None) -> ArticleRecord:
    coord, rejected = _coordinate(body)
    raw_label = extract_raw_label(body)
    if stats is not None:
        stats.total_articles += 1
        stats.geolocated += coord is not None
        stats.with_raw_label += raw_label is not None
        stats.bad_coordinates += rejected
    return ArticleRecord(
        id=page_id,
        title=title,
        body=body,
        raw_label=raw_label,
        categories=tuple(extract_categories(body)),
        coord=coord,
    )


class _PageCollector:
    """expat callbacks accumulating <page> children into plain dicts."""

    def __init__(self):
        self.pages: list[dict] = []
        self._stack: list[str] = []
        self._page: dict | None = None
        self._buf: list[str] | None = None

    def start(self, name, attrs):
        tag = name.rsplit(":", 1)[-1]
        self._stack.append(tag)
        if tag == "page":
            self._page = {"title": "", "text": "", "id": None, "redirect": False}
        elif self._page is not None:
            parent = self._stack[-2] if len(self._stack) > 1 else None
            if tag == "redirect":
                self._page["redirect"] = True
            elif tag in ("title", "text") or (tag == "id" and parent == "page"):
                self._buf = []

    def end(self, name):
        tag = self._stack.pop()
        if self._page is None:
            return
        if tag == "page":
            self.pages.append(self._page)
            self._page = None
        elif self._buf is not None:
            parent = self._stack[-1] if self._stack else None
            if tag in ("title", "text"):
                self._page[tag] = "".join(self._buf)
                self._buf = None
            elif tag == "id" and parent == "page":
                self._page["id"] = "".join(self._buf).strip()
                self._buf = None

    def data(self, text):
        if self._buf is not None:
            self._buf.append(text)


def _iter_pages(stream: BinaryIO) -> Iterator[dict]:
    collector = _PageCollector()
    parser = expat.ParserCreate()
    parser.buffer_text = True
    parser.StartElementHandler = collector.start
    parser.EndElementHandler = collector.end
    parser.CharacterDataHandler = collector.data
    fed = 0
    while True:
        chunk = stream.read(CHUNK_SIZE)
        try:
            parser.Parse(chunk, not chunk)
        except expat.ExpatError as exc:
            offset = parser.ErrorByteIndex if parser.ErrorByteIndex >= 0 else fed
            raise DumpParseError(f"malformed XML: {expat.ErrorString(exc.code)}", offset) from None
        fed += len(chunk)
        if collector.pages:
            yield from collector.pages
            collector.pages.clear()
        if not chunk:
            break


def parse_dump(stream: BinaryIO, stats: CorpusStats | None = None) -> Iterator[ArticleRecord]:
    """Lazily yield one :class:`ArticleRecord` per standard page in ``stream``.

    Redirects and namespaced pages (titles containing ``:``) are skipped and
    counted in ``stats`` when one is provided. Pages lacking an ``<id>`` are
    numbered by their position in the dump.
    """
    for index, page in enumerate(_iter_pages(stream)):
        title, text = page["title"].strip(), page["text"]
        if is_technical_title(title):
            if stats is not None:
                stats.technical += 1
            continue
        if page["redirect"] or is_redirect(text):
            if stats is not None:
                stats.redirects += 1
            continue
        yield build_record(page["id"] or str(index), title, text, stats)


# ---------------------------------------------------------------------------
# JSON-lines serialization


def record_to_json(record: ArticleRecord, body_path: str | None = None) -> dict:
    row = {
        "id": record.id,
        "title": record.title,
        "raw_label": record.raw_label,
        "categories": list(record.categories),
        "lat": record.coord.lat if record.coord else None,
        "lon": record.coord.lon if record.coord else None,
        "body_sha256": record.body_sha256,
    }
    if body_path is not None:
        row["body_path"] = body_path
    return row


def record_from_json(row: dict, base_dir: str | os.PathLike | None = None) -> ArticleRecord:
    """Rebuild a record; the body is read from ``body_path`` when present."""
    body = ""
    if row.get("body_path"):
        path = Path(row["body_path"])
        if base_dir is not None and not path.is_absolute():
            path = Path(base_dir) / path
        body = path.read_bytes().decode("utf-8")
    coord = None
    if row.get("lat") is not None and row.get("lon") is not None:
        coord = GeoCoordinate(float(row["lat"]), float(row["lon"]))
    return ArticleRecord(
        id=str(row["id"]),
        title=row.get("title", ""),
        body=body,
        raw_label=row.get("raw_label"),
        categories=tuple(row.get("categories", ())),
        coord=coord,
    )


def write_records(records: Iterable[ArticleRecord], out, bodies_dir: str | os.PathLike | None = None,
                  base_dir: str | os.PathLike | None = None) -> int:
    """Write records as JSON lines to the text stream ``out``.

    With ``bodies_dir`` each body is stored as ``<sha256>.txt`` there and the
    row's ``body_path`` is written relative to ``base_dir``.
    """
    n = 0
    if bodies_dir is not None:
        Path(bodies_dir).mkdir(parents=True, exist_ok=True)
    for record in records:
        body_path = None
        if bodies_dir is not None:
            path = Path(bodies_dir) / f"{record.body_sha256}.txt"
            if not path.exists():
                path.write_bytes(record.body.encode("utf-8"))
            body_path = os.path.relpath(path, base_dir) if base_dir is not None else str(path)
        out.write(json.dumps(record_to_json(record, body_path), ensure_ascii=False) + "\n")
        n += 1
    return n


def read_records(path: str | os.PathLike) -> Iterator[ArticleRecord]:
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                yield record_from_json(json.loads(line), path.parent)
