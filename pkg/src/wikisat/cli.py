"""Command-line entry point: ``wikisat <subcommand> [flags]``.

Stages hand off through files. Every output is written atomically; an
existing output with identical content is left alone, a differing one is
only replaced with ``--force``.

Exit status: 0 success, 1 validation failure, 2 runtime error.
"""
from __future__ import annotations

import argparse
import hashlib
import io
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import corpus, doc2vec, matchnet, tiles, transfer, weak_label

log = logging.getLogger("wikisat")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class ValidationError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_INVALID)


# ---------------------------------------------------------------------------
# helpers


def emit(path: str | os.PathLike, data: bytes | str, force: bool = False) -> str:
    """Write ``data`` atomically; returns 'written', 'unchanged' or raises."""
    path = Path(path)
    raw = data.encode("utf-8") if isinstance(data, str) else data
    if path.exists():
        if path.read_bytes() == raw:
            return "unchanged"
        if not force:
            raise ValidationError(f"{path} exists with different content; pass --force to overwrite")
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(raw)
    os.replace(tmp, path)
    return "written"


def require_file(path, what: str) -> Path:
    if path is None:
        raise ValidationError(f"missing required --{what}")
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"{what} file not found: {path}")
    return path


def read_config(path) -> dict:
    """``key=value`` lines; keys are flag names with or without dashes."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValidationError(f"{path}:{lineno}: expected key=value")
        key, value = (p.strip() for p in line.split("=", 1))
        out[key.lstrip("-").replace("-", "_")] = value
    return out


def split_of(article_id: str, test_fraction: float = 0.2) -> str:
    h = int.from_bytes(hashlib.sha256(article_id.encode()).digest()[:4], "little")
    return "test" if (h % 1000) < test_fraction * 1000 else "train"


def load_images(manifest: tiles.DatasetManifest, rows, size: int) -> np.ndarray:
    out = []
    for row in rows:
        img = manifest.image(row).to_rgb()
        if (img.height, img.width) != (size, size):
            img = tiles.resize(img, size, size)
        out.append(img.data)
    return np.stack(out).astype(np.float32)


def save_model_bytes(model: matchnet.MatchModel) -> bytes:
    buf = io.BytesIO()
    matchnet.save_checkpoint(model, buf)
    return buf.getvalue()


def load_model(path) -> matchnet.MatchModel:
    with open(require_file(path, "model"), "rb") as fh:
        return matchnet.load_checkpoint(fh)


def labeled_rows(manifest: tiles.DatasetManifest, split: str | None):
    rows = [r for r in manifest.rows if r.weak_label]
    if split in ("train", "test"):
        rows = [r for r in rows if split_of(r.article_id) == split]
    return rows


def fit_config(args, epochs, lr, batch) -> matchnet.FitConfig:
    return matchnet.FitConfig(
        epochs=int(args.epochs if args.epochs is not None else epochs),
        learning_rate=float(args.lr if args.lr is not None else lr),
        batch_size=int(args.batch if args.batch is not None else batch),
        seed=int(args.seed),
    )


# ---------------------------------------------------------------------------
# subcommands


def cmd_extract(args) -> str:
    dump = require_file(args.dump, "dump")
    if not args.out:
        raise ValidationError("missing required --out")
    out = Path(args.out)
    bodies = out.with_name(out.stem + "_bodies")
    bodies.mkdir(parents=True, exist_ok=True)
    stats = corpus.CorpusStats()
    buf = io.StringIO()
    with open(dump, "rb") as fh:
        # parsing is a single sequential stream; --jobs is ignored here
        corpus.write_records(corpus.parse_dump(fh, stats), buf, bodies_dir=bodies, base_dir=out.parent)
    status = emit(out, buf.getvalue(), args.force)
    emit(out.with_name(out.stem + "_stats.json"), json.dumps(stats.as_dict(), indent=2) + "\n", True)
    return (f"extract: {stats.total_articles} articles, {stats.geolocated} geolocated, "
            f"{stats.with_raw_label} with raw label, {stats.redirects} redirects and "
            f"{stats.technical} technical pages skipped -> {out} ({status})")


def cmd_label(args) -> str:
    articles = require_file(args.articles, "articles")
    if not args.out:
        raise ValidationError("missing required --out")
    h = weak_label.load_hierarchy(args.hierarchy)
    threshold = int(args.threshold)
    if threshold < 0:
        raise ValidationError("--threshold must be non-negative")
    pairs, report = weak_label.label_corpus(corpus.read_records(articles), h, threshold, jobs=args.jobs)
    buf = io.StringIO()
    weak_label.write_pairs(pairs, buf)
    out = Path(args.out)
    status = emit(out, buf.getvalue(), args.force)
    report_path = Path(args.report) if args.report else out.with_name(out.stem + "_report.json")
    emit(report_path, json.dumps(report.to_json(), indent=2) + "\n", args.force)
    return (f"label: {len(pairs)} labeled over {len(report.histogram)} labels, {report.unlabeled} unlabeled, "
            f"{report.discarded} discarded -> {out} ({status})")


def _synthetic_provider(args, hierarchy) -> tiles.SyntheticProvider:
    return tiles.SyntheticProvider(seed=int(args.seed), labels=hierarchy.merged_labels(),
                                   cloud_rate=float(args.cloud_rate), gap_rate=float(args.gap_rate))


def cmd_pair(args) -> str:
    articles = require_file(args.articles, "articles")
    if not args.out:
        raise ValidationError("missing required --out (dataset directory)")
    if args.provider != "synthetic":
        raise ValidationError(f"provider {args.provider!r} is not available in this build")
    labels = {}
    if args.labels:
        for line in require_file(args.labels, "labels").read_text(encoding="utf-8").splitlines():
            if line.strip():
                row = json.loads(line)
                labels[str(row["id"])] = row["label"]
    gsd = float(args.gsd)
    if not 0 < gsd <= 10:
        raise ValidationError("--gsd must lie in (0, 10]")
    h = weak_label.load_hierarchy(args.hierarchy)
    provider = _synthetic_provider(args, h)
    items = [(r.id, r.coord, labels.get(r.id)) for r in corpus.read_records(articles) if r.coord is not None]
    out_dir = Path(args.out)
    manifest = tiles.build_dataset(items, provider, out_dir, gsd=gsd, tile_px=int(args.tile_px), jobs=args.jobs)
    status = emit(out_dir / "manifest.jsonl", manifest.dumps(), args.force)
    emit(out_dir / "misses.txt", "".join(m + "\n" for m in manifest.misses), True)
    return f"pair: {len(manifest)} tuples, {len(manifest.misses)} coverage misses -> {out_dir / 'manifest.jsonl'} ({status})"


def cmd_train_doc2vec(args) -> str:
    articles = require_file(args.articles, "articles")
    if not args.out:
        raise ValidationError("missing required --out")
    records = list(corpus.read_records(articles))
    if not records:
        raise ValidationError("article file is empty")
    defaults = doc2vec.TrainConfig()
    config = doc2vec.TrainConfig(
        k=int(args.k),
        epochs=int(args.epochs if args.epochs is not None else defaults.epochs),
        learning_rate=float(args.lr if args.lr is not None else defaults.learning_rate),
        min_count=int(args.min_count),
        seed=int(args.seed),
    )
    model = doc2vec.train([doc2vec.tokenize(r.body) for r in records], config)
    buf = io.BytesIO()
    doc2vec.save_model(model, buf)
    status = emit(args.out, buf.getvalue(), args.force)
    return (f"train-doc2vec: {len(records)} documents, vocabulary {len(model.vocab)}, K={model.k} "
            f"-> {args.out} ({status})")


def cmd_train_match(args) -> str:
    manifest = tiles.DatasetManifest.read(require_file(args.manifest, "manifest"))
    articles = require_file(args.articles, "articles")
    with open(require_file(args.doc2vec, "doc2vec"), "rb") as fh:
        text_model = doc2vec.load_model(fh)
    if not args.out:
        raise ValidationError("missing required --out")
    row_of = {r.id: i for i, r in enumerate(corpus.read_records(articles))}
    if len(row_of) != text_model.doc_vectors.shape[0]:
        raise ValidationError("article file does not match the doc2vec training corpus")
    rows = [r for r in manifest.rows if r.article_id in row_of]
    if not rows:
        raise ValidationError("no manifest rows with text vectors")
    size = int(args.input_size)
    images = load_images(manifest, rows, size)
    z_t = text_model.doc_vectors[[row_of[r.article_id] for r in rows]]
    result = matchnet.train_match(images, z_t, fit_config(args, 50, 1e-4, 64),
                                  matchnet.EncoderConfig(input_size=size))
    status = emit(args.out, save_model_bytes(result.model), args.force)
    emit(args.log or Path(args.out).with_suffix(".csv"), result.csv(), True)
    first, last = result.history[0].stat, result.history[-1].stat
    return f"train-match: {len(rows)} pairs, mean D {first:.3f} -> {last:.3f} -> {args.out} ({status})"


def cmd_train_weak(args) -> str:
    manifest = tiles.DatasetManifest.read(require_file(args.manifest, "manifest"))
    if not args.out:
        raise ValidationError("missing required --out")
    rows = labeled_rows(manifest, None)
    if not rows:
        raise ValidationError("manifest has no labeled rows")
    names = sorted({r.weak_label for r in rows})
    size = int(args.input_size)
    y = np.array([names.index(r.weak_label) for r in rows])
    result = matchnet.train_weak(load_images(manifest, rows, size), y, len(names),
                                 fit_config(args, 20, 1e-4, 64), matchnet.EncoderConfig(input_size=size))
    result.model.meta["labels"] = names
    status = emit(args.out, save_model_bytes(result.model), args.force)
    emit(args.log or Path(args.out).with_suffix(".csv"), result.csv(), True)
    return (f"train-weak: {len(rows)} images over {len(names)} labels, train accuracy "
            f"{result.history[-1].stat:.3f} -> {args.out} ({status})")


def cmd_finetune(args) -> str:
    pretrained = load_model(args.model)
    manifest = tiles.DatasetManifest.read(require_file(args.manifest, "manifest"))
    if not args.out:
        raise ValidationError("missing required --out")
    rows = labeled_rows(manifest, args.split)
    if not rows:
        raise ValidationError("no labeled rows in the requested split")
    names = sorted({r.weak_label for r in rows})
    y = np.array([names.index(r.weak_label) for r in rows])
    images = load_images(manifest, rows, pretrained.encoder.input_size)
    config = fit_config(args, 50, 1e-2, 32)
    model = transfer.finetune(pretrained, images, y, len(names), args.mode, config)
    model.meta["labels"] = names
    status = emit(args.out, save_model_bytes(model), args.force)
    return f"finetune ({args.mode}): {len(rows)} images over {len(names)} labels -> {args.out} ({status})"


def cmd_eval(args) -> str:
    model = load_model(args.model)
    if model.head.kind != "classify":
        raise ValidationError("eval needs a classifier checkpoint (run finetune or train-weak)")
    manifest = tiles.DatasetManifest.read(require_file(args.manifest, "manifest"))
    if not args.out:
        raise ValidationError("missing required --out")
    names = list(model.meta.get("labels", []))
    rows = [r for r in labeled_rows(manifest, args.split) if r.weak_label in names]
    if not rows:
        raise ValidationError("no evaluable rows (labels unknown to the model or empty split)")
    y = np.array([names.index(r.weak_label) for r in rows])
    size = model.encoder.input_size
    views = int(args.temporal)
    if views > 1:
        h = weak_label.load_hierarchy(args.hierarchy)
        base = _synthetic_provider(args, h)
        tile_px = manifest.image(rows[0]).height
        groups = []
        for row, label in zip(rows, y):
            imgs = []
            for v in range(views):
                request = tiles.make_tile_request(row.coord, row.gsd, tile_px, label=row.weak_label)
                img = base.with_variant(v).fetch(request).to_rgb()
                imgs.append(tiles.resize(img, size, size) if tile_px != size else img)
            groups.append(transfer.TemporalGroup(row.article_id, imgs, int(label)))
        report = transfer.evaluate(model, groups=groups)
    else:
        report = transfer.evaluate(model, load_images(manifest, rows, size), y)
    report.meta["labels"] = names
    status = emit(args.out, report.dumps(), args.force)
    emit(Path(args.out).with_suffix(".csv"), report.csv(names), args.force)
    if report.top5 < report.top1:
        raise RuntimeError("top-5 accuracy below top-1")
    return (f"eval ({report.mode}): n={report.n_samples} top1={report.top1:.3f} top5={report.top5:.3f} "
            f"f1={report.f1_macro:.3f} -> {args.out} ({status})")


def cmd_report(args) -> str:
    lines = []
    if args.metrics:
        metrics = json.loads(require_file(args.metrics, "metrics").read_text(encoding="utf-8"))
        names = metrics.get("meta", {}).get("labels", [])
        lines.append(f"mode {metrics.get('mode', '?')}  n={metrics.get('n_samples', '?')}")
        lines.append(f"{'top1':>8} {'top5':>8} {'f1':>8}")
        lines.append(f"{metrics['top1']:8.3f} {metrics['top5']:8.3f} {metrics['f1_macro']:8.3f}")
        if metrics.get("per_class"):
            lines.append(f"{'class':<16} {'prec':>6} {'rec':>6} {'f1':>6} {'n':>5}")
            for c in metrics["per_class"]:
                name = names[c["label"]] if c["label"] < len(names) else str(c["label"])
                lines.append(f"{name:<16} {c['precision']:6.3f} {c['recall']:6.3f} {c['f1']:6.3f} {c['support']:5d}")
    if args.manifest:
        manifest = tiles.DatasetManifest.read(require_file(args.manifest, "manifest"))
        if not args.out:
            raise ValidationError("--manifest needs --out for the scatter CSV")
        csv_text = "lat,lon,label\n" + "".join(
            f"{r.coord.lat},{r.coord.lon},{r.weak_label or ''}\n" for r in manifest.rows)
        status = emit(args.out, csv_text, args.force)
        lines.append(f"scatter CSV: {len(manifest.rows)} points -> {args.out} ({status})")
    if not lines:
        raise ValidationError("report needs --metrics and/or --manifest")
    for line in lines[:-1]:
        print(line)
    return lines[-1]


def selfcheck_results(seeds=(0, 1, 2)) -> list[tuple[str, bool, str]]:
    results = []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        x = rng.random((3, 16, 16, 3))
        enc = matchnet.EncoderConfig(input_size=16)
        for kind, target in (("match", rng.normal(size=(3, 300))), ("classify", np.array([0, 2, 1]))):
            head = matchnet.HeadConfig(kind, 300 if kind == "match" else 4)
            model = matchnet.MatchModel.create(enc, head, seed=seed, dtype=np.float64)
            rep = matchnet.gradient_check(model, x, target, tolerance=1e-4, seed=seed)
            results.append((f"gradient check {kind} seed {seed}", rep.passed, f"max rel err {rep.max_rel_error:.2e}"))
    rng = np.random.default_rng(42)
    a, b = rng.standard_normal((10_000, 300)), rng.standard_normal((10_000, 300))
    stat = float(np.mean(np.abs(np.sum(a * b, 1) / (np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1)))))
    results.append(("orthogonality of random 300-d pairs", stat < 0.1, f"mean |cos| = {stat:.4f}"))
    return results


def cmd_selfcheck(args) -> str:
    results = selfcheck_results()
    for name, ok, detail in results:
        print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    failed = sum(not ok for _, ok, _ in results)
    if failed:
        raise ValidationError(f"selfcheck: {failed} of {len(results)} checks failed")
    return f"selfcheck: all {len(results)} checks passed"


def cmd_synth_dump(args) -> str:
    from . import synthetic

    if not args.out:
        raise ValidationError("missing required --out")
    counts = {name: int(args.per_label) for name in args.labels.split(",")}
    xml, pages = synthetic.labeled_dump(counts, seed=int(args.seed), n_unlabeled=int(args.per_label) // 5)
    status = emit(args.out, xml, args.force)
    return f"synth-dump: {len(pages)} pages -> {args.out} ({status})"


# ---------------------------------------------------------------------------
# parser


COMMANDS = {
    "extract": cmd_extract,
    "label": cmd_label,
    "pair": cmd_pair,
    "train-doc2vec": cmd_train_doc2vec,
    "train-match": cmd_train_match,
    "train-weak": cmd_train_weak,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "report": cmd_report,
    "selfcheck": cmd_selfcheck,
    "synth-dump": cmd_synth_dump,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key=value file; explicit flags win")
    common.add_argument("--seed", type=int, default=42)
    common.add_argument("--jobs", type=int, default=1, help="workers for parse/label/pair stages")
    common.add_argument("--force", action="store_true", help="overwrite outputs whose content differs")
    common.add_argument("--out")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="wikisat", description="Wikipedia/satellite pre-training pipeline")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("extract", parents=[common], help="parse a dump into article records")
    p.add_argument("--dump")

    p = sub.add_parser("label", parents=[common], help="assign weak labels")
    p.add_argument("--articles")
    p.add_argument("--hierarchy")
    p.add_argument("--threshold", type=int, default=weak_label.DEFAULT_THRESHOLD)
    p.add_argument("--report")

    p = sub.add_parser("pair", parents=[common], help="fetch tiles and write the dataset manifest")
    p.add_argument("--articles")
    p.add_argument("--labels")
    p.add_argument("--hierarchy")
    p.add_argument("--provider", default="synthetic", choices=sorted(tiles.PROVIDERS))
    p.add_argument("--gsd", type=float, default=0.3)
    p.add_argument("--tile-px", type=int, default=tiles.DEFAULT_TILE_PX)
    p.add_argument("--cloud-rate", type=float, default=0.05)
    p.add_argument("--gap-rate", type=float, default=0.0)

    p = sub.add_parser("train-doc2vec", parents=[common], help="train paragraph vectors")
    p.add_argument("--articles")
    p.add_argument("--k", type=int, default=300)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--min-count", type=int, default=1)

    for name, help_ in (("train-match", "image-to-text matching pre-training"),
                        ("train-weak", "weak-label classification pre-training")):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.add_argument("--manifest")
        p.add_argument("--epochs", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--batch", type=int)
        p.add_argument("--input-size", type=int, default=64)
        p.add_argument("--log")
        if name == "train-match":
            p.add_argument("--articles")
            p.add_argument("--doc2vec")

    p = sub.add_parser("finetune", parents=[common], help="fine-tune on a labeled target set")
    p.add_argument("--model")
    p.add_argument("--manifest")
    p.add_argument("--mode", choices=["fixed", "full"], default="fixed")
    p.add_argument("--split", choices=["train", "test", "all"], default="train")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)

    p = sub.add_parser("eval", parents=[common], help="score a classifier")
    p.add_argument("--model")
    p.add_argument("--manifest")
    p.add_argument("--split", choices=["train", "test", "all"], default="test")
    p.add_argument("--temporal", type=int, default=1, help="views per area (>1 for temporal protocol)")
    p.add_argument("--hierarchy")
    p.add_argument("--cloud-rate", type=float, default=0.05)
    p.add_argument("--gap-rate", type=float, default=0.0)

    p = sub.add_parser("report", parents=[common], help="print metrics; export a scatter CSV")
    p.add_argument("--metrics")
    p.add_argument("--manifest")

    sub.add_parser("selfcheck", parents=[common], help="gradient checks and orthogonality statistic")

    p = sub.add_parser("synth-dump", parents=[common], help="write a synthetic labeled dump")
    p.add_argument("--labels", default="airport,lake,station,stadium,town")
    p.add_argument("--per-label", type=int, default=100)
    return parser


def parse_args(argv) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            values = read_config(args.config)
        except OSError as exc:
            raise ValidationError(f"cannot read config: {exc}") from None
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        unknown = set(values) - known
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        sub.set_defaults(**values)
        args = parser.parse_args(argv)
        # argparse leaves defaults from set_defaults as strings; convert by action type
        for action in sub._actions:
            if action.dest in values and action.type is not None and isinstance(getattr(args, action.dest), str):
                setattr(args, action.dest, action.type(getattr(args, action.dest)))
            elif action.dest in values and isinstance(action, argparse._StoreTrueAction):
                setattr(args, action.dest, str(getattr(args, action.dest)).lower() in ("1", "true", "yes"))
    return args


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        args = parse_args(argv)
    except ValidationError as exc:
        print(f"wikisat: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    start = time.perf_counter()
    try:
        summary = COMMANDS[args.command](args)
    except ValidationError as exc:
        print(f"wikisat {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - report and map to the runtime exit code
        log.debug("failure", exc_info=True)
        print(f"wikisat {args.command}: runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    log.info("%s finished in %.1fs", args.command, time.perf_counter() - start)
    print(summary)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
