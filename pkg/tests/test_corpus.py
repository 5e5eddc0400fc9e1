import io
import json
import tracemalloc
from pathlib import Path

import pytest
from hypothesis import given, strategies as st

from wikisat import corpus, synthetic
from wikisat.corpus import (CorpusStats, DumpParseError, GeoCoordinate, dms_to_decimal, decimal_to_dms,
                            extract_categories, extract_coordinate, extract_raw_label, parse_dump)

DATA = Path(__file__).parent / "data"


def parse_bytes(raw: bytes, stats=None):
    return list(parse_dump(io.BytesIO(raw), stats))


def test_two_page_dump_skips_redirect():
    stats = CorpusStats()
    with open(DATA / "two_page_dump.xml", "rb") as fh:
        records = list(parse_dump(fh, stats))
    assert len(records) == 1
    rec = records[0]
    assert rec.id == "101"
    assert rec.raw_label == "airport"
    assert rec.categories == ("airports in new york",)
    assert rec.coord == GeoCoordinate(40.6397, -73.7789)
    assert stats.redirects == 1 and stats.total_articles == 1


def test_empty_dump():
    stats = CorpusStats()
    assert parse_bytes(b"<mediawiki></mediawiki>", stats) == []
    assert stats.total_articles == 0


def test_page_with_decimal_coord():
    xml, _ = synthetic.dump_xml([synthetic.SyntheticPage("1", "A", "{{coord|40.6|-73.7|display=title}}")]), None
    (rec,) = parse_bytes(xml)
    assert rec.coord == GeoCoordinate(40.6, -73.7)


def test_technical_titles_skipped():
    pages = [synthetic.SyntheticPage("1", "Wikipedia:About", "text"),
             synthetic.SyntheticPage("2", "Plain", "#redirect [[x]]"),
             synthetic.SyntheticPage("3", "Kept", "body")]
    stats = CorpusStats()
    assert [r.id for r in parse_bytes(synthetic.dump_xml(pages), stats)] == ["3"]
    assert stats.technical == 1 and stats.redirects == 1


def test_malformed_xml_reports_offset():
    raw = b"<mediawiki><page><title>x</title><text>abc</page></mediawiki>"
    with pytest.raises(DumpParseError) as err:
        parse_bytes(raw)
    assert err.value.offset is not None and 0 < err.value.offset <= len(raw)
    assert str(err.value.offset) in str(err.value)


@pytest.mark.parametrize("body, expected", [
    ("{{coord|40.6397|-73.7789|display=title}}", (40.6397, -73.7789)),
    ("{{Coord | 40.6397 | -73.7789 | display = title}}", (40.6397, -73.7789)),
    ("{{COORD|1.5|2.5|display=title|format=dms}}", (1.5, 2.5)),
])
def test_decimal_coordinate(body, expected):
    c = extract_coordinate(body)
    assert (c.lat, c.lon) == expected


def test_dms_coordinate():
    c = extract_coordinate("{{coord|40|38|23|N|73|46|44|W|display=title}}")
    assert c.lat == pytest.approx(40 + 38 / 60 + 23 / 3600, abs=1e-6)
    assert c.lon == pytest.approx(-(73 + 46 / 60 + 44 / 3600), abs=1e-6)
    assert c.lat == pytest.approx(40.639722, abs=1e-6)
    assert c.lon == pytest.approx(-73.778889, abs=1e-6)


def test_first_template_wins():
    body = "{{coord|1|2|3|S|4|5|6|E|display=title}} then {{coord|10.0|20.0|display=title}}"
    c = extract_coordinate(body)
    assert c.lat < 0 and c.lon > 0


def test_no_coordinate():
    assert extract_coordinate("no template here {{coord|1|2}}") is None


def test_out_of_range_is_no_match_and_counted():
    stats = CorpusStats()
    body = "{{coord|95.0|10.0|display=title}}"
    rec = corpus.build_record("1", "x", body, stats)
    assert rec.coord is None and stats.bad_coordinates == 1


@pytest.mark.parametrize("args, expected", [
    ((0, 0, 0, "N"), 0.0),
    ((40, 38, 23, "N"), 40.6397222222),
    ((40, 38, 23, "S"), -40.6397222222),
])
def test_dms_to_decimal_examples(args, expected):
    assert dms_to_decimal(*args) == pytest.approx(expected, abs=1e-9)


@pytest.mark.parametrize("args", [(1, 60, 0, "N"), (1, 0, 60, "N"), (-1, 0, 0, "N"), (1, 0, 0, "Q")])
def test_dms_to_decimal_rejects(args):
    with pytest.raises(ValueError):
        dms_to_decimal(*args)


@given(deg=st.integers(0, 89), minutes=st.integers(0, 59), sec=st.floats(0, 59.999, allow_nan=False),
       hemi=st.sampled_from("NS"))
def test_dms_round_trip(deg, minutes, sec, hemi):
    value = dms_to_decimal(deg, minutes, sec, hemi)
    d2, m2, s2, h2 = decimal_to_dms(value, "lat")
    back = dms_to_decimal(d2, m2, s2, h2)
    assert back == pytest.approx(value, abs=1e-9)
    if value != 0:
        assert h2 == hemi
    assert abs((d2 + m2 / 60 + s2 / 3600) - (deg + minutes / 60 + sec / 3600)) < 1e-9


def test_raw_label_examples():
    assert extract_raw_label("{{Infobox new york train station|name=x}}") == "new york train station"
    assert extract_raw_label("{{Infobox   Communes De France\n|pop=1}}") == "communes de france"
    assert extract_raw_label("plain text") is None


def test_categories():
    assert extract_categories("[[Category:Airports in New York]]") == ["airports in new york"]
    assert extract_categories("none") == []
    assert extract_categories("[[Category:A b]] [[category: a  B|sort]]") == ["a b"]


def test_geocoordinate_range():
    with pytest.raises(ValueError):
        GeoCoordinate(91, 0)
    with pytest.raises(ValueError):
        GeoCoordinate(0, -181)


def test_parse_is_deterministic_and_round_trips(tmp_path):
    xml, _ = synthetic.labeled_dump({"airport": 10, "lake": 10}, seed=3)
    a, b = parse_bytes(xml), parse_bytes(xml)
    assert a == b
    out = io.StringIO()
    corpus.write_records(a, out, bodies_dir=tmp_path / "bodies", base_dir=tmp_path)
    path = tmp_path / "articles.jsonl"
    path.write_text(out.getvalue())
    rows = [json.loads(line) for line in out.getvalue().splitlines()]
    assert set(rows[0]) == {"id", "title", "raw_label", "categories", "lat", "lon", "body_sha256", "body_path"}
    assert list(corpus.read_records(path)) == a


def test_every_coord_in_range():
    xml, _ = synthetic.labeled_dump({"town": 50}, seed=1)
    for rec in parse_bytes(xml):
        assert rec.coord is None or (-90 <= rec.coord.lat <= 90 and -180 <= rec.coord.lon <= 180)


def _dump_stream(n_pages: int, page_text: str):
    head = b'<mediawiki xmlns="http://www.mediawiki.org/xml/export-0.10/">\n'
    page = synthetic.page_xml(synthetic.SyntheticPage("{id}", "T", page_text)).encode()

    def gen():
        yield head
        for i in range(n_pages):
            yield page.replace(b"{id}", str(i).encode())
        yield b"</mediawiki>\n"

    class Stream(io.RawIOBase):
        def __init__(self):
            self.it, self.buf = gen(), b""

        def readable(self):
            return True

        def read(self, n=-1):
            while len(self.buf) < max(n, 1):
                try:
                    self.buf += next(self.it)
                except StopIteration:
                    break
            out, self.buf = self.buf[:n], self.buf[n:]
            return out

    return Stream()


def test_streaming_memory_is_bounded():
    text = "{{coord|1.0|2.0|display=title}} " + "word " * 2000  # ~10 KB per page
    peaks = {}
    for n in (1_000, 10_000):
        tracemalloc.start()
        count = sum(1 for _ in parse_dump(_dump_stream(n, text)))
        peaks[n] = tracemalloc.get_traced_memory()[1]
        tracemalloc.stop()
        assert count == n
    # tenfold more pages must not mean tenfold more memory; the peak stays
    # within a small multiple of one page plus parser buffers
    assert peaks[10_000] < 1.5 * peaks[1_000] + 200_000
    assert peaks[10_000] < 50 * len(text) + (1 << 20)
