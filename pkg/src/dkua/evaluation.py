"""Retrieval evaluation: embedding extraction, standard ReID ranking with
same-identity/same-camera filtering, mAP and Rank-1, seen/unseen averages,
and embedding export for external projection tools."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import DomainData
from .errors import DkuaError
from .model import DkuaModel


class SkipQuery(DkuaError):
    """Raised when a query has no usable gallery entries; excluded from means."""


@dataclass
class EmbeddingSet:
    vectors: np.ndarray   # N x D
    identities: np.ndarray
    cameras: np.ndarray
    domains: np.ndarray
    splits: list


def extract_embeddings(model: DkuaModel, domain: DomainData,
                       records: list | None = None,
                       batch_size: int = 32) -> EmbeddingSet:
    """Forward every record through the model (read-only) and keep the
    unified representation (pooled backbone output for DSE-less models)."""
    records = domain.records if records is None else records
    vectors = []
    for start in range(0, len(records), batch_size):
        chunk = records[start:start + batch_size]
        imgs = np.stack([domain.images[r.path] for r in chunk])
        out = model.forward(imgs)
        vectors.append(out.theta.data)
    vectors = np.concatenate(vectors) if vectors else np.zeros((0, model.cfg.embed_dim))
    return EmbeddingSet(
        vectors=vectors,
        identities=np.asarray([r.identity for r in records]),
        cameras=np.asarray([r.camera for r in records]),
        domains=np.asarray([r.domain for r in records]),
        splits=[r.split for r in records],
    )


def rank_gallery(query_vec: np.ndarray, query_id: int, query_cam: int,
                 gallery: EmbeddingSet) -> np.ndarray:
    """Gallery indices sorted by descending cosine similarity, after
    dropping entries sharing both identity and camera with the query.
    Ties break toward the lower gallery index."""
    keep = ~((gallery.identities == query_id) & (gallery.cameras == query_cam))
    idx = np.flatnonzero(keep)
    if idx.size == 0:
        raise SkipQuery("all gallery entries filtered out")
    g = gallery.vectors[idx]
    qn = np.linalg.norm(query_vec)
    gn = np.linalg.norm(g, axis=1)
    sims = (g @ query_vec) / np.maximum(qn * gn, 1e-12)
    order = np.lexsort((idx, -sims))
    return idx[order]


def average_precision(relevance: np.ndarray) -> float:
    """Mean over relevant ranks k of precision-at-k."""
    relevance = np.asarray(relevance, dtype=bool)
    hits = np.flatnonzero(relevance)
    if hits.size == 0:
        raise SkipQuery("no relevant entries in ranked list")
    precisions = (np.arange(1, hits.size + 1)) / (hits + 1)
    return float(precisions.mean())


def map_rank1(queries: EmbeddingSet, gallery: EmbeddingSet) -> tuple:
    """(mAP, Rank-1) over all non-skipped queries."""
    aps, top1 = [], []
    for i in range(len(queries.identities)):
        qid = int(queries.identities[i])
        qcam = int(queries.cameras[i])
        try:
            ranked = rank_gallery(queries.vectors[i], qid, qcam, gallery)
            relevance = gallery.identities[ranked] == qid
            aps.append(average_precision(relevance))
        except SkipQuery:
            continue
        top1.append(float(relevance[0]))
    if not aps:
        raise DkuaError("every query was skipped; cannot evaluate")
    return float(np.mean(aps)), float(np.mean(top1))


def evaluate_domain(model: DkuaModel, domain: DomainData) -> tuple:
    queries = extract_embeddings(model, domain, domain.split("query"))
    gallery = extract_embeddings(model, domain, domain.split("gallery"))
    return map_rank1(queries, gallery)


def averages(rows: list) -> dict:
    """Unweighted seen/unseen means over (group, mAP, r1) rows; groups with
    no rows are simply absent from the result."""
    out = {}
    for group in ("seen", "unseen"):
        picked = [(m, r) for g, m, r in rows if g == group]
        if picked:
            out[group] = (float(np.mean([m for m, _ in picked])),
                          float(np.mean([r for _, r in picked])))
    return out


def export_embeddings(path: Path, embeddings: EmbeddingSet):
    """Tab-separated export: identity, camera, domain, then the vector."""
    d = embeddings.vectors.shape[1] if embeddings.vectors.size else 0
    lines = [f"#dkua-embeddings v1 dim={d}"]
    for i in range(len(embeddings.identities)):
        vec = "\t".join(repr(float(v)) for v in embeddings.vectors[i])
        lines.append(f"{embeddings.identities[i]}\t{embeddings.cameras[i]}\t"
                     f"{embeddings.domains[i]}\t{vec}")
    Path(path).write_text("\n".join(lines) + "\n")
