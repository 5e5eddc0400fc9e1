"""Drives the full CLI pipeline on a small synthetic dump."""
from __future__ import annotations

from pathlib import Path

from wikisat.cli import main

STAGES = [
    ["synth-dump", "--out", "dump.xml", "--per-label", "24"],
    ["extract", "--dump", "dump.xml", "--out", "articles.jsonl"],
    ["label", "--articles", "articles.jsonl", "--out", "labels.jsonl", "--threshold", "10"],
    ["pair", "--articles", "articles.jsonl", "--labels", "labels.jsonl", "--out", "ds", "--tile-px", "16"],
    ["train-doc2vec", "--articles", "articles.jsonl", "--out", "d2v.bin", "--k", "32", "--epochs", "5"],
    ["train-match", "--manifest", "ds/manifest.jsonl", "--articles", "articles.jsonl", "--doc2vec", "d2v.bin",
     "--out", "match.ckpt", "--epochs", "2", "--input-size", "16"],
    ["finetune", "--model", "match.ckpt", "--manifest", "ds/manifest.jsonl", "--out", "probe.ckpt",
     "--epochs", "3", "--lr", "0.01"],
    ["eval", "--model", "probe.ckpt", "--manifest", "ds/manifest.jsonl", "--out", "metrics.json"],
]

ARTIFACTS = ["articles.jsonl", "labels.jsonl", "ds/manifest.jsonl", "d2v.bin", "match.ckpt", "probe.ckpt",
             "metrics.json", "metrics.csv"]


def run_pipeline(workdir: Path, seed: int = 42) -> dict[str, bytes]:
    """Run every stage inside ``workdir``; returns artifact bytes by name."""
    import os

    old = os.getcwd()
    os.chdir(workdir)
    try:
        for argv in STAGES:
            code = main(argv + ["--seed", str(seed), "--jobs", "1"])
            if code != 0:
                raise RuntimeError(f"stage {argv[0]} exited with {code}")
    finally:
        os.chdir(old)
    return {name: (workdir / name).read_bytes() for name in ARTIFACTS}
