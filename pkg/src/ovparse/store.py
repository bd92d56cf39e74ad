"""On-disk layout of a trained model directory and of prediction dumps."""

from __future__ import annotations

import os

import numpy as np

from .embedding import read_embedder, read_embedding_tsv, write_embedder, write_embedding_tsv
from .taxonomy import (
    build_graph,
    information_content,
    read_frequency_tsv,
    read_taxonomy_tsv,
    write_frequency_tsv,
    write_taxonomy_tsv,
)
from .training import TrainConfig, TrainedModel, write_training_log

MODEL_FILES = ("config.txt", "taxonomy.tsv", "embeddings.tsv", "embedder.ovsw", "candidates.txt", "log.csv")


def save_model(model: TrainedModel, path, own_counts=None) -> list[str]:
    os.makedirs(path, exist_ok=True)
    j = lambda name: os.path.join(path, name)  # noqa: E731
    with open(j("config.txt"), "w", encoding="utf-8") as fh:
        fh.write(model.config.to_text())
    write_taxonomy_tsv(model.graph, j("taxonomy.tsv"))
    write_embedding_tsv(model.graph.names, model.table, j("embeddings.tsv"))
    write_embedder(model.embedder, j("embedder.ovsw"))
    with open(j("candidates.txt"), "w", encoding="utf-8") as fh:
        fh.writelines(model.graph.names[c] + "\n" for c in model.candidates)
    write_training_log(model.training_log, j("log.csv"))
    written = [j(n) for n in MODEL_FILES]
    if own_counts is not None:
        write_frequency_tsv(own_counts, j("freqs.tsv"))
        written.append(j("freqs.tsv"))
    return written


def load_model(path) -> TrainedModel:
    j = lambda name: os.path.join(path, name)  # noqa: E731
    for name in MODEL_FILES[:4]:
        if not os.path.exists(j(name)):
            raise FileNotFoundError(f"model directory {path} lacks {name}")
    config = TrainConfig.load(j("config.txt"))
    graph = build_graph(read_taxonomy_tsv(j("taxonomy.tsv")))
    table = read_embedding_tsv(j("embeddings.tsv"), graph.names)
    embedder = read_embedder(j("embedder.ovsw"), config.target_norm)
    candidates = ()
    if os.path.exists(j("candidates.txt")):
        with open(j("candidates.txt"), encoding="utf-8") as fh:
            candidates = tuple(graph.id_of(line.rstrip("\n")) for line in fh if line.strip())
    ic = None
    if os.path.exists(j("freqs.tsv")):
        ic = information_content(graph, read_frequency_tsv(j("freqs.tsv")))
    return TrainedModel(graph, table, embedder, config, candidates, [], ic)


def format_predictions(names, predictions) -> str:
    """``index<TAB>primary<TAB>name:score,...`` per sample."""
    lines = []
    for i, pred in enumerate(predictions):
        acc = ",".join(f"{names[c]}:{s:.6g}" for c, s in pred.accepted)
        lines.append(f"{i}\t{names[pred.primary]}\t{acc}")
    return "\n".join(lines) + ("\n" if lines else "")


def read_predictions(path, graph) -> np.ndarray:
    """Primary concept ids from a prediction dump, in sample order."""
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) < 2:
                raise ValueError(f"{path}:{lineno}: expected index<TAB>primary[<TAB>accepted]")
            rows.append((int(parts[0]), graph.id_of(parts[1])))
    rows.sort()
    if [i for i, _ in rows] != list(range(len(rows))):
        raise ValueError(f"{path}: sample indices are not 0..{len(rows) - 1}")
    return np.array([p for _, p in rows], dtype=np.int64)
