"""Dirichlet-smoothed query-likelihood scoring and top-M pair retention.

Scores log P(query | doc) with the classic smoothed unigram model

    sum_t log[(tf(t, doc) + mu * P(t | C)) / (len(doc) + mu)]

over the same tokenizer as the encoder module. The scorer interface is just
these functions over LMStats; a network-backed scorer can mirror them.
"""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable

from .corpus import ReviewDoc
from .encoder import split_terms
from .qgen import SyntheticQuery

log = logging.getLogger(__name__)

DEFAULT_MU = 2000.0


@dataclass
class LMStats:
    """Corpus and per-document term statistics for query-likelihood scoring."""

    term_counts: Counter
    total_terms: int
    doc_term_counts: dict[str, Counter]
    doc_lengths: dict[str, int]
    mu: float
    oov_skips: int = 0  # query tokens absent from the whole corpus, counted across calls

    def __post_init__(self):
        if self.mu <= 0:
            raise ValueError(f"mu must be > 0, got {self.mu}")
        if self.total_terms != sum(self.term_counts.values()):
            raise ValueError("total_terms does not match term_counts")
        for doc_id in self.doc_term_counts:
            if doc_id not in self.doc_lengths:
                raise ValueError(f"doc {doc_id} missing a length")

    def collection_prob(self, term: str) -> float:
        return self.term_counts.get(term, 0) / self.total_terms


def _doc_pairs(docs: Iterable) -> Iterable[tuple[str, str]]:
    for d in docs:
        if isinstance(d, ReviewDoc):
            yield d.doc_id, d.text
        else:
            yield d  # already an (id, text) pair


def build_lm_stats(docs, mu: float = DEFAULT_MU) -> LMStats:
    """Count terms over ReviewDocs or (doc_id, text) pairs."""
    term_counts: Counter = Counter()
    doc_term_counts: dict[str, Counter] = {}
    doc_lengths: dict[str, int] = {}
    for doc_id, text in _doc_pairs(docs):
        terms = split_terms(text)
        counts = Counter(terms)
        if doc_id in doc_term_counts:
            doc_term_counts[doc_id].update(counts)
            doc_lengths[doc_id] += len(terms)
        else:
            doc_term_counts[doc_id] = counts
            doc_lengths[doc_id] = len(terms)
        term_counts.update(counts)
    if not doc_term_counts:
        raise ValueError("cannot build language-model stats from an empty corpus")
    return LMStats(term_counts=term_counts, total_terms=sum(term_counts.values()),
                   doc_term_counts=doc_term_counts, doc_lengths=doc_lengths, mu=mu)


def ql_score(query: str, doc_id: str, stats: LMStats) -> float:
    """Smoothed log-likelihood of the query under the document's language
    model. Query tokens absent from the whole corpus are skipped (counted in
    stats.oov_skips)."""
    if doc_id not in stats.doc_term_counts:
        raise KeyError(f"unknown doc_id {doc_id!r}")
    tf = stats.doc_term_counts[doc_id]
    doc_len = stats.doc_lengths[doc_id]
    denom = doc_len + stats.mu
    score = 0.0
    for term in split_terms(query):
        if term not in stats.term_counts:
            stats.oov_skips += 1
            continue
        score += math.log((tf.get(term, 0) + stats.mu * stats.collection_prob(term)) / denom)
    return score


@dataclass
class ScoredPair:
    """One (query, doc) pair with its QL score and rank within the query."""

    query_id: str
    doc: ReviewDoc
    ql_score: float
    rank: int


def score_pairs(query: SyntheticQuery, docs: list[ReviewDoc], stats: LMStats) -> list[ScoredPair]:
    """All docs scored and ranked for the query; ties broken by item_id."""
    scored = [(ql_score(query.text, d.doc_id, stats), d) for d in docs]
    scored.sort(key=lambda pair: (-pair[0], pair[1].item_id, pair[1].doc_id))
    return [ScoredPair(query_id=query.query_id, doc=d, ql_score=s, rank=i + 1)
            for i, (s, d) in enumerate(scored)]


def retained_count(n_docs: int, retain_fraction: float) -> int:
    return math.ceil(retain_fraction * n_docs)


def filter_pairs(query: SyntheticQuery, docs: list[ReviewDoc], stats: LMStats,
                 retain_fraction: float) -> list[ScoredPair]:
    """Keep the ceil(retain_fraction * |docs|) highest-scoring pairs."""
    if not 0 < retain_fraction <= 1:
        raise ValueError(f"retain_fraction must be in (0, 1], got {retain_fraction}")
    if not docs:
        raise ValueError("docs must be non-empty")
    ranked = score_pairs(query, docs, stats)
    return ranked[:retained_count(len(docs), retain_fraction)]
