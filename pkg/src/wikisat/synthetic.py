"""Generators for desk-scale corpora and dumps with known ground truth."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from xml.sax.saxutils import escape

import numpy as np

from .corpus import ArticleRecord, GeoCoordinate, decimal_to_dms

STOPWORDS = ("the of and in to a is was for on as by with from at its it an be that which this "
             "were are has had also first year new other after into over").split()

GENERAL_WORDS = ("located area region local history population built part known north south east "
                 "west district name century since later several main near public community").split()

# topical vocabulary per weak label; labels without an entry get pseudo-words
LABEL_WORDS = {
    "airport": "runway terminal flights aircraft airline passengers aviation hangar taxiway control".split(),
    "stadium": "seats football match spectators pitch arena league stands capacity fans".split(),
    "school": "students teachers pupils classes education grades campus principal curriculum enrolled".split(),
    "church": "parish worship altar bishop chapel congregation nave diocese clergy steeple".split(),
    "station": "railway platform trains tracks commuter rail services line passengers depot".split(),
    "bridge": "span river crossing deck arch girder traffic piers suspension bank".split(),
    "town": "municipality residents mayor council village census inhabitants commune parish market".split(),
    "city": "metropolitan downtown urban boroughs mayor suburbs skyline residents council capital".split(),
    "county": "seat townships rural boundaries administrative census commissioners unincorporated shire "
              "districts".split(),
    "lake": "water shore fishing basin reservoir inflow outflow depth freshwater surface".split(),
    "river": "tributary flows mouth basin drainage banks upstream downstream floodplain valley".split(),
    "mountain": "peak summit elevation slopes climbing ridge range glacier alpine ascent".split(),
    "island": "coast beach archipelago ferry harbour lagoon reef shoreline ocean islet".split(),
    "hospital": "patients medical beds surgery clinic nurses emergency physicians ward health".split(),
    "battle": "troops army forces siege casualties commander infantry war fought victory".split(),
    "event": "festival annual celebration held participants organised edition ceremony prize".split(),
    "person": "born died career married family politician actor writer played awarded".split(),
}

RAW_LABEL_TEMPLATES = {
    "airport": ["airport", "military airport", "{region} airport"],
    "stadium": ["stadium", "{region} sports stadium"],
    "school": ["school", "{region} school"],
    "church": ["church", "religious building church"],
    "station": ["{region} train station", "station", "railway station"],
    "bridge": ["bridge"],
    "town": ["town", "{region} town", "settlement town"],
    "hamlet": ["hamlet"],
    "village": ["village"],
    "city": ["city"],
    "county": ["county"],
    "lake": ["lake", "body of water lake"],
    "river": ["river"],
    "mountain": ["mountain"],
    "island": ["island"],
    "hospital": ["hospital"],
    "battle": ["military conflict battle", "battle"],
    "event": ["recurring event"],
    "person": ["person", "officeholder person"],
}

REGIONS = ["new york", "france", "bavaria", "ontario", "queensland", "lombardy", "texas", "wales"]


def label_words(label: str) -> list[str]:
    if label in LABEL_WORDS:
        return LABEL_WORDS[label]
    digest = hashlib.sha256(label.encode()).hexdigest()
    return [f"{label}{digest[i:i + 3]}" for i in range(0, 30, 3)]


def make_text(rng: np.random.Generator, label: str | None, n_words: int = 80, topical: float = 0.4) -> str:
    """Body text mixing stopwords, generic filler and label-topical words."""
    topic = label_words(label) if label else GENERAL_WORDS
    words = []
    for _ in range(n_words):
        r = rng.random()
        if r < topical:
            words.append(topic[rng.integers(len(topic))])
        elif r < topical + 0.35:
            words.append(STOPWORDS[rng.integers(len(STOPWORDS))])
        else:
            words.append(GENERAL_WORDS[rng.integers(len(GENERAL_WORDS))])
    return " ".join(words)


def random_coord(rng: np.random.Generator) -> GeoCoordinate:
    return GeoCoordinate(round(float(rng.uniform(-60, 70)), 4), round(float(rng.uniform(-170, 170)), 4))


def decimal_template(c: GeoCoordinate) -> str:
    return f"{{{{coord|{c.lat}|{c.lon}|display=title}}}}"


def dms_template(c: GeoCoordinate) -> tuple[str, GeoCoordinate]:
    """DMS template with whole seconds, plus the exact coordinate it encodes."""
    parts = []
    for value, axis in ((c.lat, "lat"), (c.lon, "lon")):
        d, m, s, h = decimal_to_dms(value, axis)
        s = int(round(s))
        if s == 60:
            s, m = 0, m + 1
        if m == 60:
            m, d = 0, d + 1
        parts.append((d, m, s, h))
    (d1, m1, s1, h1), (d2, m2, s2, h2) = parts
    sign = lambda h: -1 if h in "SW" else 1
    exact = GeoCoordinate(sign(h1) * (d1 + m1 / 60 + s1 / 3600), sign(h2) * (d2 + m2 / 60 + s2 / 3600))
    return f"{{{{coord|{d1}|{m1}|{s1}|{h1}|{d2}|{m2}|{s2}|{h2}|display=title}}}}", exact


@dataclass
class SyntheticPage:
    id: str
    title: str
    text: str
    label: str | None = None
    coord: GeoCoordinate | None = None
    kind: str = "article"  # article | redirect | technical


def page_xml(page: SyntheticPage) -> str:
    redirect = '<redirect title="Elsewhere" />' if page.kind == "redirect" else ""
    return (f"  <page>\n    <title>{escape(page.title)}</title>\n    <ns>0</ns>\n    <id>{page.id}</id>\n"
            f"    {redirect}\n    <revision>\n      <id>9{page.id}</id>\n"
            f"      <text xml:space=\"preserve\">{escape(page.text)}</text>\n    </revision>\n  </page>\n")


def dump_xml(pages) -> bytes:
    head = '<mediawiki xmlns="http://www.mediawiki.org/xml/export-0.10/" xml:lang="en">\n'
    return (head + "".join(page_xml(p) for p in pages) + "</mediawiki>\n").encode("utf-8")


def coordinate_dump(n_decimal: int = 600, n_dms: int = 300, n_none: int = 100, seed: int = 0):
    """Dump whose pages carry decimal, DMS or no coordinate templates.

    Returns ``(xml_bytes, truth)`` where ``truth`` maps page id to the exact
    coordinate encoded in the page (absent for coordinate-free pages).
    """
    rng = np.random.default_rng(seed)
    kinds = ["decimal"] * n_decimal + ["dms"] * n_dms + ["none"] * n_none
    kinds = [kinds[i] for i in rng.permutation(len(kinds))]
    pages, truth = [], {}
    for i, kind in enumerate(kinds):
        text = make_text(rng, None, 40)
        pid = str(1000 + i)
        if kind == "decimal":
            c = random_coord(rng)
            text = decimal_template(c) + "\n" + text
            truth[pid] = c
        elif kind == "dms":
            template, c = dms_template(random_coord(rng))
            text = text + "\n" + template
            truth[pid] = c
        pages.append(SyntheticPage(pid, f"Place {i}", text))
    return dump_xml(pages), truth


def two_topic_corpus(n_per_topic: int = 100, n_words: int = 80, seed: int = 42):
    """Token lists for two topics with disjoint vocabularies plus shared stopwords."""
    rng = np.random.default_rng(seed)
    topics = [[f"alpha{i}" for i in range(60)], [f"beta{i}" for i in range(60)]]
    stop = [f"stop{i}" for i in range(30)]
    docs, labels = [], []
    for t in (0, 1):
        for _ in range(n_per_topic):
            topical = rng.random(n_words) < 0.5
            docs.append([topics[t][rng.integers(60)] if k else stop[rng.integers(30)] for k in topical])
            labels.append(t)
    order = rng.permutation(len(docs))
    return [docs[i] for i in order], [labels[i] for i in order]


def labeled_article_page(rng: np.random.Generator, pid: str, label: str, use_dms: bool = False,
                         category_only: bool = False) -> SyntheticPage:
    """A geolocated article whose infobox or categories name ``label``."""
    coord = random_coord(rng)
    region = REGIONS[rng.integers(len(REGIONS))]
    templates = RAW_LABEL_TEMPLATES.get(label, [label])
    raw = templates[rng.integers(len(templates))].format(region=region)
    coord_text = decimal_template(coord)
    if use_dms:
        coord_text, coord = dms_template(coord)
    lines = []
    if not category_only:
        lines.append(f"{{{{Infobox {raw}\n| name = {label.title()} {pid}\n}}}}")
    lines.append(coord_text)
    text_label = "town" if label in ("hamlet", "village") else label
    lines.append(make_text(rng, text_label))
    cat = f"{label}s in {region}" if category_only else region
    lines.append(f"[[Category:{cat.capitalize()}]]")
    lines.append(f"[[Category:Coordinates on Wikidata]]")
    return SyntheticPage(pid, f"{label.title()} {pid}", "\n".join(lines), label, coord)


def labeled_dump(counts: dict[str, int], seed: int = 42, n_redirects: int = 5, n_technical: int = 5,
                 n_unlabeled: int = 0):
    """Dump of geolocated articles with ``counts[label]`` articles per label.

    Also mixes in redirects, namespaced technical pages and unlabeled
    geolocated articles. Returns ``(xml_bytes, pages)``.
    """
    rng = np.random.default_rng(seed)
    pages = []
    for label, n in counts.items():
        for _ in range(n):
            pid = str(len(pages) + 1)
            pages.append(labeled_article_page(rng, pid, label, use_dms=rng.random() < 0.3,
                                              category_only=rng.random() < 0.15))
    for _ in range(n_unlabeled):
        pid = str(len(pages) + 1)
        c = random_coord(rng)
        pages.append(SyntheticPage(pid, f"Untitled {pid}", decimal_template(c) + "\n" + make_text(rng, None),
                                   None, c))
    for _ in range(n_redirects):
        pid = str(len(pages) + 1)
        pages.append(SyntheticPage(pid, f"Alias {pid}", "#REDIRECT [[Somewhere]]", kind="redirect"))
    for _ in range(n_technical):
        pid = str(len(pages) + 1)
        pages.append(SyntheticPage(pid, f"Wikipedia:Notice {pid}", make_text(rng, None, 20), kind="technical"))
    pages = [pages[i] for i in rng.permutation(len(pages))]
    return dump_xml(pages), pages


# (raw_label, categories, intended outcome) recipes for the labeling fixture;
# outcome is a merged label, "discarded" or "unlabeled".
FIXTURE_RECIPES = [
    (100, lambda i: (f"{REGIONS[i % 8]} town" if i % 3 else "town", []), "town"),
    (30, lambda i: ("hamlet", [f"hamlets in {REGIONS[i % 8]}"]), "town"),
    (90, lambda i: ("military airport" if i % 2 else f"{REGIONS[i % 8]} airport", []), "airport"),
    (20, lambda i: (None, [f"airports in {REGIONS[i % 8]}", "coordinates on wikidata"]), "airport"),
    (100, lambda i: ("body of water lake" if i % 4 == 0 else "lake", []), "lake"),
    (96, lambda i: (f"{REGIONS[i % 8]} train station", []), "station"),
    (5, lambda i: ("communes de france", [f"railway stations in {REGIONS[i % 8]}"]), "station"),
    (12, lambda i: ("stadium", []), "stadium"),
    (7, lambda i: ("bridge", ["bridges in wales"]), "bridge"),
    (5, lambda i: (None, ["rivers of texas"]), "river"),
    (12, lambda i: ("military conflict battle", []), "discarded"),
    (5, lambda i: ("officeholder person", []), "discarded"),
    (3, lambda i: ("recurring event", ["festivals in france"]), "discarded"),
    (10, lambda i: ("communes de france", ["coordinates on wikidata"]), "unlabeled"),
    # word boundaries: "dam" must not hit "amsterdam", "river"/"bank" not "riverbank"
    (5, lambda i: (None, ["people from amsterdam", "riverbank parks"]), "unlabeled"),
]


def label_fixture(seed: int = 7):
    """The 500-article labeling fixture and its intended per-article outcomes."""
    rng = np.random.default_rng(seed)
    rows = []
    for count, make, outcome in FIXTURE_RECIPES:
        for i in range(count):
            raw, cats = make(i)
            rows.append((raw, cats, outcome))
    order = rng.permutation(len(rows))
    records, outcomes = [], []
    for n, k in enumerate(order):
        raw, cats, outcome = rows[k]
        c = random_coord(rng)
        records.append(ArticleRecord(id=f"a{n:04d}", title=f"Article {n}", body="", raw_label=raw,
                                     categories=tuple(cats), coord=c))
        outcomes.append(outcome)
    return records, outcomes
