"""Candidate prefiltering, exact dense retrieval, cross-encoder reranking,
and the lexical / query-likelihood / grounded-generation baselines.

First-stage search is an exact brute-force scan by ascending L2 distance
(ties by item_id); rerankers preserve the candidate item set exactly. Run
files use the TREC format `qid Q0 item_id rank score tag`.
"""

from __future__ import annotations

import logging
import math
import struct
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .corpus import ItemCatalog, ItemRecord
from .encoder import EncoderModel, CrossEncoderModel, crossencoder_score, embed_text, \
    model_fingerprint, split_terms
from .qgen import Provider, grounded_llm_generate, PromptTemplate
from .qlfilter import LMStats, ql_score

log = logging.getLogger(__name__)

INDEX_MAGIC = b"NDRIDX01"


class RankEntry(NamedTuple):
    item_id: str
    score: float
    rank: int


@dataclass
class RankedList:
    query_id: str
    entries: list[RankEntry]
    stage_tag: str

    def __post_init__(self):
        seen = set()
        for i, e in enumerate(self.entries):
            if e.rank != i + 1:
                raise ValueError(f"{self.query_id}: ranks must be contiguous from 1")
            if e.item_id in seen:
                raise ValueError(f"{self.query_id}: duplicate item {e.item_id}")
            seen.add(e.item_id)

    def item_ids(self) -> list[str]:
        return [e.item_id for e in self.entries]


@dataclass
class DenseIndex:
    item_ids: list[str]
    vectors: np.ndarray  # (n_items, dim)
    model_fingerprint: str

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if len(self.item_ids) != self.vectors.shape[0]:
            raise ValueError("item_ids and vectors disagree on item count")
        if not np.isfinite(self.vectors).all():
            raise ValueError("index vectors contain non-finite entries")

    def subset(self, item_ids: list[str]) -> "DenseIndex":
        """Restriction to the given items (those present in the index)."""
        pos = {item_id: i for i, item_id in enumerate(self.item_ids)}
        keep = [pos[i] for i in item_ids if i in pos]
        return DenseIndex(item_ids=[self.item_ids[i] for i in keep],
                          vectors=self.vectors[keep] if keep else
                          np.zeros((0, self.vectors.shape[1])),
                          model_fingerprint=self.model_fingerprint)


def prefilter_candidates(catalog: ItemCatalog, city: str, category: str) -> list[ItemRecord]:
    """Case-insensitive exact city match AND category membership; an empty
    city or category acts as a wildcard."""
    city_l = city.strip().lower()
    cat_l = category.strip().lower()
    out = []
    for item in catalog.records():
        if city_l and item.city.lower() != city_l:
            continue
        if cat_l and cat_l not in {c.lower() for c in item.categories}:
            continue
        out.append(item)
    if not out:
        log.warning("prefilter: no candidates for city=%r category=%r", city, category)
    return out


def build_index(model: EncoderModel, items: list[ItemRecord]) -> DenseIndex:
    if not items:
        raise ValueError("items must be non-empty")
    vectors = np.stack([embed_text(model, item.text()) for item in items])
    return DenseIndex(item_ids=[item.item_id for item in items], vectors=vectors,
                      model_fingerprint=model_fingerprint(model))


def retrieve_topk(index: DenseIndex, model: EncoderModel, query: str, k: int) -> RankedList:
    """Exact scan by ascending L2 distance; ties broken by ascending item_id."""
    if index.model_fingerprint != model_fingerprint(model):
        raise ValueError("index/model fingerprint mismatch: rebuild the index "
                         "with the encoder used at query time")
    if len(index.item_ids) == 0:
        return RankedList(query_id="", entries=[], stage_tag="first-stage")
    qv = embed_text(model, query)
    dists = np.linalg.norm(index.vectors - qv, axis=1)
    order = np.lexsort((np.asarray(index.item_ids), dists))[:min(k, len(dists))]
    entries = [RankEntry(item_id=index.item_ids[i], score=float(dists[i]), rank=r + 1)
               for r, i in enumerate(order)]
    return RankedList(query_id="", entries=entries, stage_tag="first-stage")


def rerank_cross(model: CrossEncoderModel, query: str, firststage: RankedList,
                 items: ItemCatalog) -> RankedList:
    """Score every first-stage entry in inference mode and sort by descending
    score (first-stage rank breaks ties). The item set is preserved exactly."""
    if not firststage.entries:
        raise ValueError("firststage must be non-empty")
    scored = []
    for e in firststage.entries:
        if e.item_id not in items.items:
            raise KeyError(f"item {e.item_id} missing from catalog")
        s = crossencoder_score(model, query, items[e.item_id].text(), training_mode=False)
        scored.append((s, e.rank, e.item_id))
    scored.sort(key=lambda t: (-t[0], t[1]))
    entries = [RankEntry(item_id=item_id, score=s, rank=r + 1)
               for r, (s, _, item_id) in enumerate(scored)]
    return RankedList(query_id=firststage.query_id, entries=entries, stage_tag="reranked")


def bm25_rank(items: list[ItemRecord], query: str, k: int,
              k1: float = 1.2, b: float = 0.75) -> RankedList:
    """Okapi BM25 over item texts with idf = ln((N - df + 0.5)/(df + 0.5) + 1)."""
    if not items:
        raise ValueError("items must be non-empty")
    term_freqs = [Counter(split_terms(item.text())) for item in items]
    doc_lens = [sum(tf.values()) for tf in term_freqs]
    n = len(items)
    avgdl = sum(doc_lens) / n if n else 0.0
    df: Counter = Counter()
    for tf in term_freqs:
        df.update(tf.keys())
    idf = {t: math.log((n - d + 0.5) / (d + 0.5) + 1.0) for t, d in df.items()}

    q_terms = split_terms(query)
    scored = []
    for i, item in enumerate(items):
        tf = term_freqs[i]
        norm = k1 * (1 - b + b * doc_lens[i] / avgdl) if avgdl > 0 else k1
        s = 0.0
        for t in q_terms:
            f = tf.get(t, 0)
            if f:
                s += idf[t] * f * (k1 + 1) / (f + norm)
        scored.append((s, item.item_id))
    scored.sort(key=lambda t: (-t[0], t[1]))
    entries = [RankEntry(item_id=item_id, score=s, rank=r + 1)
               for r, (s, item_id) in enumerate(scored[:k])]
    return RankedList(query_id="", entries=entries, stage_tag="bm25")


def ql_rerank(stats: LMStats, query: str, firststage: RankedList, k: int) -> RankedList:
    """Reorder the top-k of the first stage by descending query likelihood
    (first-stage rank breaks ties); entries past k keep their order."""
    head = firststage.entries[:k]
    tail = firststage.entries[k:]
    rescored = [(ql_score(query, e.item_id, stats), e.rank, e.item_id) for e in head]
    rescored.sort(key=lambda t: (-t[0], t[1]))
    entries = [RankEntry(item_id=item_id, score=s, rank=r + 1)
               for r, (s, _, item_id) in enumerate(rescored)]
    offset = len(entries)
    entries += [RankEntry(item_id=e.item_id, score=e.score, rank=offset + j + 1)
                for j, e in enumerate(tail)]
    return RankedList(query_id=firststage.query_id, entries=entries, stage_tag="ql-rerank")


def grounded_llm_rank(provider: Provider, index: DenseIndex, model: EncoderModel,
                      query: str, neighbors_per_item: int = 20,
                      template: PromptTemplate | None = None,
                      n_items: int = 10) -> RankedList:
    """Generate pseudo-relevant item names, ground each by nearest-neighbor
    lookup, and merge by best distance per item (pseudo-item order breaks
    ties; duplicates collapse)."""
    names = grounded_llm_generate(query, provider, n_items=n_items, template=template)
    if not names:
        log.warning("grounded ranking: empty generation for query %r", query[:60])
        return RankedList(query_id="", entries=[], stage_tag="grounded-llm")
    best: dict[str, tuple[float, int]] = {}
    for pseudo_idx, name in enumerate(names):
        hits = retrieve_topk(index, model, name, neighbors_per_item)
        for e in hits.entries:
            cur = best.get(e.item_id)
            if cur is None or (e.score, pseudo_idx) < cur:
                best[e.item_id] = (e.score, pseudo_idx)
    merged = sorted(best.items(), key=lambda kv: (kv[1][0], kv[1][1], kv[0]))
    entries = [RankEntry(item_id=item_id, score=dist, rank=r + 1)
               for r, (item_id, (dist, _)) in enumerate(merged)]
    return RankedList(query_id="", entries=entries, stage_tag="grounded-llm")


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def write_run(path: str | Path, lists: list[RankedList], tag: str) -> None:
    """TREC run format, one `qid Q0 item_id rank score tag` line per entry."""
    with open(path, "w", encoding="utf-8") as f:
        for rl in lists:
            for e in rl.entries:
                f.write(f"{rl.query_id} Q0 {e.item_id} {e.rank} {e.score:.6f} {tag}\n")


def read_run(path: str | Path) -> list[RankedList]:
    by_query: dict[str, list[RankEntry]] = {}
    tags: dict[str, str] = {}
    order: list[str] = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            parts = line.split()
            if len(parts) != 6:
                continue
            qid, _, item_id, rank, score, tag = parts
            if qid not in by_query:
                by_query[qid] = []
                order.append(qid)
            by_query[qid].append(RankEntry(item_id=item_id, score=float(score),
                                           rank=int(rank)))
            tags[qid] = tag
    out = []
    for qid in order:
        entries = sorted(by_query[qid], key=lambda e: e.rank)
        out.append(RankedList(query_id=qid, entries=entries, stage_tag=tags[qid]))
    return out


def save_index(index: DenseIndex, path: str | Path) -> None:
    ids_blob = "\n".join(index.item_ids).encode("utf-8")
    fp = index.model_fingerprint.encode("ascii")
    with open(path, "wb") as f:
        f.write(INDEX_MAGIC)
        f.write(struct.pack("<QQQQ", len(index.item_ids), index.vectors.shape[1],
                            len(fp), len(ids_blob)))
        f.write(fp)
        f.write(ids_blob)
        f.write(index.vectors.astype("<f4").tobytes(order="C"))


def load_index(path: str | Path) -> DenseIndex:
    data = Path(path).read_bytes()
    if data[:8] != INDEX_MAGIC:
        raise ValueError(f"{path}: bad index magic {data[:8]!r}")
    n, dim, fp_len, ids_len = struct.unpack_from("<QQQQ", data, 8)
    offset = 8 + 32
    fp = data[offset:offset + fp_len].decode("ascii")
    offset += fp_len
    item_ids = data[offset:offset + ids_len].decode("utf-8").split("\n") if ids_len else []
    offset += ids_len
    vectors = np.frombuffer(data, dtype="<f4", count=n * dim, offset=offset)
    return DenseIndex(item_ids=item_ids, vectors=vectors.reshape(n, dim).astype(np.float64),
                      model_fingerprint=fp)
