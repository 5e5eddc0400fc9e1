"""Tile acquisition for geolocated articles and the (coord, image, article) manifest.

Real imagery backends implement :class:`TileProvider`. The bundled
:class:`SyntheticProvider` renders procedural scenes whose texture depends on
the article's weak label, so that matching and weak-label training have real
signal at desk scale.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np

from .corpus import GeoCoordinate

log = logging.getLogger(__name__)

TENSOR_MAGIC = b"WSTN"
TENSOR_VERSION = 1
DEFAULT_TILE_PX = 1000


class CoverageMiss(LookupError):
    """The provider has no imagery for the requested location."""


class ProviderError(RuntimeError):
    """Transport or backend failure, distinct from a coverage miss."""


@dataclass(frozen=True)
class ImageTensor:
    data: np.ndarray  # (H, W, C) float32 in [0, 1]

    def __post_init__(self):
        data = self.data
        if data.ndim != 3 or data.shape[2] not in (1, 3):
            raise ValueError(f"expected (H, W, 1|3) array, got {data.shape}")
        if data.dtype != np.float32:
            raise ValueError("image data must be float32")
        if data.size and (not np.isfinite(data).all() or data.min() < 0 or data.max() > 1):
            raise ValueError("image values must lie in [0, 1]")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def to_rgb(self) -> "ImageTensor":
        if self.channels == 3:
            return self
        return ImageTensor(np.repeat(self.data, 3, axis=2))

    def tobytes(self) -> bytes:
        h, w, c = self.data.shape
        header = TENSOR_MAGIC + struct.pack("<IIII", TENSOR_VERSION, h, w, c)
        return header + np.ascontiguousarray(self.data, dtype="<f4").tobytes()

    @classmethod
    def frombytes(cls, raw: bytes) -> "ImageTensor":
        if raw[:4] != TENSOR_MAGIC:
            raise ValueError("not a tensor file")
        version, h, w, c = struct.unpack("<IIII", raw[4:20])
        if version != TENSOR_VERSION:
            raise ValueError(f"unsupported tensor version {version}")
        body = raw[20:]
        if len(body) != 4 * h * w * c:
            raise ValueError("tensor payload length does not match header")
        return cls(np.frombuffer(body, dtype="<f4").reshape(h, w, c).astype(np.float32))


def save_tensor(img: ImageTensor, path: str | os.PathLike) -> None:
    Path(path).write_bytes(img.tobytes())


def load_tensor(path: str | os.PathLike) -> ImageTensor:
    return ImageTensor.frombytes(Path(path).read_bytes())


@dataclass(frozen=True)
class TileRequest:
    center: GeoCoordinate
    width_px: int = DEFAULT_TILE_PX
    height_px: int = DEFAULT_TILE_PX
    gsd: float = 0.3
    # scene hint for synthetic backends; real providers ignore it
    label: str | None = None

    @property
    def footprint_m(self) -> tuple[float, float]:
        """Ground extent (width, height) in meters."""
        return self.width_px * self.gsd, self.height_px * self.gsd


def make_tile_request(coord: GeoCoordinate, gsd: float = 0.3, width_px: int = DEFAULT_TILE_PX,
                      height_px: int | None = None, label: str | None = None) -> TileRequest:
    height_px = width_px if height_px is None else height_px
    if not 0 < gsd <= 10:
        raise ValueError(f"gsd must be in (0, 10] m/px, got {gsd}")
    if width_px <= 0 or height_px <= 0:
        raise ValueError("tile dimensions must be positive")
    return TileRequest(coord, int(width_px), int(height_px), float(gsd), label)


class TileProvider(Protocol):
    name: str

    def fetch(self, request: TileRequest) -> ImageTensor:
        """Return the tile or raise :class:`CoverageMiss` / :class:`ProviderError`."""


def fetch_tile(provider: TileProvider, request: TileRequest) -> ImageTensor:
    img = provider.fetch(request)
    if (img.height, img.width) != (request.height_px, request.width_px):
        raise ProviderError(f"provider returned {img.height}x{img.width}, "
                            f"requested {request.height_px}x{request.width_px}")
    return img


def resize(img: ImageTensor, out_h: int, out_w: int) -> ImageTensor:
    """Bilinear resize with aligned corners (output corners sample input corners)."""
    if out_h <= 0 or out_w <= 0:
        raise ValueError("output dimensions must be positive")
    h, w, _ = img.data.shape
    if (h, w) == (out_h, out_w):
        return ImageTensor(img.data.copy())

    def axis(n_in, n_out):
        if n_out == 1 or n_in == 1:
            pos = np.zeros(n_out)
        else:
            pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
        lo = np.minimum(np.floor(pos).astype(np.int64), n_in - 1)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, (pos - lo)

    y0, y1, fy = axis(h, out_h)
    x0, x1, fx = axis(w, out_w)
    src = img.data.astype(np.float64)
    top = src[y0][:, x0] * (1 - fx)[None, :, None] + src[y0][:, x1] * fx[None, :, None]
    bot = src[y1][:, x0] * (1 - fx)[None, :, None] + src[y1][:, x1] * fx[None, :, None]
    out = top * (1 - fy)[:, None, None] + bot * fy[:, None, None]
    return ImageTensor(np.clip(out, 0.0, 1.0).astype(np.float32))


# ---------------------------------------------------------------------------
# Synthetic provider


def _unit_hash(*parts) -> np.random.Generator:
    key = "|".join(str(p) for p in parts).encode("utf-8")
    return np.random.default_rng(int.from_bytes(hashlib.sha256(key).digest()[:8], "little"))


def _coord_key(coord: GeoCoordinate) -> str:
    return f"{coord.lat:.7f},{coord.lon:.7f}"


@dataclass(frozen=True)
class SceneStyle:
    color: tuple[float, float, float]
    angle: float
    frequency: float


# distinct hues on a colour wheel; entries repeat with a phase shift past the end
_HUES = (0.0, 0.2, 0.4, 0.6, 0.8, 0.1, 0.3, 0.5, 0.7, 0.9)


def _hue_to_rgb(hue: float, sat: float = 0.2, val: float = 0.7) -> tuple[float, float, float]:
    i = int(hue * 6) % 6
    f = hue * 6 - int(hue * 6)
    p, q, t = val * (1 - sat), val * (1 - f * sat), val * (1 - (1 - f) * sat)
    return [(val, t, p), (q, val, p), (p, val, t), (p, q, val), (t, p, val), (val, p, q)][i]


class SyntheticProvider:
    """Deterministic procedural imagery keyed by (label, coordinate, seed).

    Each label gets a base colour, a stripe orientation and a stripe
    frequency; each tile adds its own phase, brightness, blobs and noise.
    ``cloud_rate`` of tiles receive white cloud blotches, ``gap_rate`` of
    coordinates have no coverage, and ``gray_rate`` come back single-channel.
    """

    name = "synthetic"

    def __init__(self, seed: int = 0, labels: Sequence[str] | None = None, cloud_rate: float = 0.05,
                 gap_rate: float = 0.0, gray_rate: float = 0.0, missing: Iterable[GeoCoordinate] = (),
                 noise: float = 0.04, variant: int = 0):
        for rate in (cloud_rate, gap_rate, gray_rate):
            if not 0 <= rate <= 1:
                raise ValueError("rates must lie in [0, 1]")
        self.seed = seed
        self.labels = sorted(set(labels)) if labels else []
        self.cloud_rate = cloud_rate
        self.gap_rate = gap_rate
        self.gray_rate = gray_rate
        self.missing = {_coord_key(c) for c in missing}
        self.noise = noise
        self.variant = variant

    def with_variant(self, variant: int) -> "SyntheticProvider":
        """Same scenes, re-rendered with independent per-view nuisance (for temporal stacks)."""
        p = SyntheticProvider.__new__(SyntheticProvider)
        p.__dict__.update(self.__dict__)
        p.variant = variant
        return p

    def style(self, label: str | None) -> SceneStyle:
        if label is not None and label in self.labels:
            n = len(self.labels)
            i = self.labels.index(label)
            hue = _HUES[i % len(_HUES)] + 0.05 * (i // len(_HUES))
            angle = np.pi * ((i * 3) % n) / n if n > 1 else 0.0
            return SceneStyle(_hue_to_rgb(hue % 1.0), float(angle), 3.0 + 2.0 * (i % 3))
        rng = _unit_hash("style", label)
        return SceneStyle(tuple(float(c) for c in rng.uniform(0.3, 0.7, 3)),
                          float(rng.uniform(0, np.pi)), float(rng.uniform(3, 7)))

    def covers(self, coord: GeoCoordinate) -> bool:
        key = _coord_key(coord)
        if key in self.missing:
            return False
        return _unit_hash("gap", self.seed, key).random() >= self.gap_rate

    def is_cloudy(self, coord: GeoCoordinate) -> bool:
        return _unit_hash("cloud", self.seed, _coord_key(coord), self.variant).random() < self.cloud_rate

    def fetch(self, request: TileRequest) -> ImageTensor:
        coord = request.center
        if not self.covers(coord):
            raise CoverageMiss(f"no coverage at {_coord_key(coord)}")
        key = _coord_key(coord)
        style = self.style(request.label)
        rng = _unit_hash("tile", request.label, key, self.seed, self.variant)
        h, w = request.height_px, request.width_px
        v, u = np.meshgrid((np.arange(h) + 0.5) / h, (np.arange(w) + 0.5) / w, indexing="ij")

        phase = rng.uniform(0, 2 * np.pi)
        angle = style.angle + rng.normal(0, 0.08)
        along = u * np.cos(angle) + v * np.sin(angle)
        stripes = 0.5 + 0.5 * np.sin(2 * np.pi * style.frequency * along + phase)

        blobs = np.zeros((h, w))
        for _ in range(int(rng.integers(1, 4))):
            cy, cx, r = rng.uniform(0, 1), rng.uniform(0, 1), rng.uniform(0.05, 0.2)
            blobs += rng.uniform(-0.3, 0.3) * np.exp(-((v - cy) ** 2 + (u - cx) ** 2) / (2 * r * r))

        color = np.asarray(style.color) * rng.uniform(0.75, 1.25, 3)
        brightness = rng.uniform(0.7, 1.3)
        shade = (0.55 + 0.45 * stripes + blobs) * brightness
        img = shade[..., None] * color[None, None, :]
        img = img + rng.normal(0, self.noise, size=(h, w, 3))

        if self.is_cloudy(coord):
            cloud = np.zeros((h, w))
            for _ in range(int(rng.integers(2, 5))):
                cy, cx, r = rng.uniform(0, 1), rng.uniform(0, 1), rng.uniform(0.15, 0.35)
                cloud = np.maximum(cloud, np.exp(-((v - cy) ** 2 + (u - cx) ** 2) / (2 * r * r)))
            img = img * (1 - cloud[..., None]) + 0.95 * cloud[..., None]

        img = np.clip(img, 0.0, 1.0).astype(np.float32)
        if _unit_hash("gray", self.seed, key).random() < self.gray_rate:
            img = (img @ np.array([0.299, 0.587, 0.114], dtype=np.float32))[..., None]
        return ImageTensor(np.ascontiguousarray(img))


PROVIDERS = {"synthetic": SyntheticProvider}


# ---------------------------------------------------------------------------
# Dataset manifest


@dataclass(frozen=True)
class DatasetTuple:
    coord: GeoCoordinate
    image_path: str
    article_id: str
    weak_label: str | None = None
    provider: str = "synthetic"
    gsd: float = 0.3

    def to_json(self) -> dict:
        return {
            "article_id": self.article_id,
            "lat": self.coord.lat,
            "lon": self.coord.lon,
            "label": self.weak_label,
            "image_path": self.image_path,
            "provider": self.provider,
            "gsd": self.gsd,
        }

    @classmethod
    def from_json(cls, row: dict) -> "DatasetTuple":
        return cls(GeoCoordinate(row["lat"], row["lon"]), row["image_path"], str(row["article_id"]),
                   row.get("label"), row.get("provider", "synthetic"), row.get("gsd", 0.3))


@dataclass
class DatasetManifest:
    rows: list[DatasetTuple]
    misses: list[str]
    root: Path | None = None

    def __len__(self) -> int:
        return len(self.rows)

    def image(self, row: DatasetTuple) -> ImageTensor:
        path = Path(row.image_path)
        if self.root is not None and not path.is_absolute():
            path = self.root / path
        return load_tensor(path)

    def dumps(self) -> str:
        return "".join(json.dumps(r.to_json(), sort_keys=True) + "\n" for r in self.rows)

    def write(self, path: str | os.PathLike) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def read(cls, path: str | os.PathLike) -> "DatasetManifest":
        path = Path(path)
        rows = [DatasetTuple.from_json(json.loads(line))
                for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]
        return cls(rows, [], path.parent)


def build_dataset(articles: Iterable[tuple[str, GeoCoordinate, str | None]], provider: TileProvider,
                  out_dir: str | os.PathLike, gsd: float = 0.3, tile_px: int = DEFAULT_TILE_PX,
                  jobs: int = 1) -> DatasetManifest:
    """Fetch one tile per ``(article_id, coord, label)`` and store it content-addressed.

    Image paths in the manifest are relative to ``out_dir``. Rows are ordered
    by article id; coverage misses are logged and returned in ``misses``.
    """
    out_dir = Path(out_dir)
    image_dir = out_dir / "images"
    image_dir.mkdir(parents=True, exist_ok=True)
    items = sorted(articles, key=lambda a: a[0])

    def work(item):
        article_id, coord, label = item
        request = make_tile_request(coord, gsd, tile_px, label=label)
        try:
            img = fetch_tile(provider, request)
        except CoverageMiss:
            return None
        raw = img.tobytes()
        name = hashlib.sha256(raw).hexdigest() + ".wstn"
        path = image_dir / name
        if not path.exists():
            tmp = path.with_suffix(".tmp")
            tmp.write_bytes(raw)
            os.replace(tmp, path)
        return DatasetTuple(coord, f"images/{name}", article_id, label, provider.name, gsd)

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            results = list(pool.map(work, items))
    else:
        results = [work(item) for item in items]

    rows, misses = [], []
    for item, row in zip(items, results):
        if row is None:
            log.info("coverage miss for article %s", item[0])
            misses.append(item[0])
        else:
            rows.append(row)
    return DatasetManifest(rows, misses, out_dir)
