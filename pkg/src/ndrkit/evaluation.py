"""Graded-relevance evaluation: NDCG@k, MAP, MRR, Recall@k, and paired
two-sided significance testing between systems.

Conventions: exponential gain 2^grade - 1 with a 1/log2(rank + 1) discount for
NDCG; MAP, MRR, and Recall binarize at grade >= 1; unjudged items count as
grade 0. Queries with no relevant items are excluded from every mean and
reported separately. Evaluation consumes ranks as given and never re-sorts.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

from scipy.special import betainc

from .retrieval import RankedList

log = logging.getLogger(__name__)

DEFAULT_NDCG_CUTOFFS = (5, 10)
DEFAULT_RECALL_CUTOFFS = (100, 200)
SIGNIFICANCE_ALPHA = 0.05


@dataclass
class Qrels:
    """Graded judgments: query_id -> item_id -> grade (>= 0)."""

    judgments: dict[str, dict[str, int]]

    def __post_init__(self):
        for qid, items in self.judgments.items():
            for item_id, grade in items.items():
                if grade < 0:
                    raise ValueError(f"qrels {qid}/{item_id}: negative grade {grade}")

    @classmethod
    def from_trec(cls, path: str | Path) -> "Qrels":
        judgments: dict[str, dict[str, int]] = {}
        with open(path, "r", encoding="utf-8") as f:
            for line in f:
                parts = line.split()
                if len(parts) != 4:
                    continue
                qid, _, item_id, grade = parts
                by_item = judgments.setdefault(qid, {})
                if item_id in by_item:
                    raise ValueError(f"duplicate qrels entry for ({qid}, {item_id})")
                by_item[item_id] = int(grade)
        return cls(judgments=judgments)

    def to_trec(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for qid in sorted(self.judgments):
                for item_id in sorted(self.judgments[qid]):
                    f.write(f"{qid} 0 {item_id} {self.judgments[qid][item_id]}\n")


@dataclass
class MetricCutoffs:
    ndcg: tuple[int, ...] = DEFAULT_NDCG_CUTOFFS
    recall: tuple[int, ...] = DEFAULT_RECALL_CUTOFFS

    def metric_names(self) -> list[str]:
        return ([f"ndcg@{k}" for k in self.ndcg] + ["map", "mrr"]
                + [f"recall@{k}" for k in self.recall])


@dataclass
class MetricReport:
    per_query: dict[str, dict[str, float]]
    means: dict[str, float]
    n_queries: int
    unjudged_at_10: float
    no_relevant_queries: int = 0

    def to_json(self) -> dict:
        return {"per_query": self.per_query, "means": self.means,
                "n_queries": self.n_queries, "unjudged_at_10": self.unjudged_at_10,
                "no_relevant_queries": self.no_relevant_queries}

    @classmethod
    def from_json(cls, obj: dict) -> "MetricReport":
        return cls(per_query=obj["per_query"], means=obj["means"],
                   n_queries=obj["n_queries"], unjudged_at_10=obj["unjudged_at_10"],
                   no_relevant_queries=obj.get("no_relevant_queries", 0))


def _dcg(grades: list[int], k: int) -> float:
    return sum((2 ** g - 1) / math.log2(rank + 1)
               for rank, g in enumerate(grades[:k], start=1))


def _query_metrics(ranked_ids: list[str], judged: dict[str, int],
                   cutoffs: MetricCutoffs) -> dict[str, float]:
    grades = [judged.get(item_id, 0) for item_id in ranked_ids]
    relevant = [item_id for item_id, g in judged.items() if g >= 1]
    n_rel = len(relevant)
    ideal = sorted(judged.values(), reverse=True)

    out: dict[str, float] = {}
    for k in cutoffs.ndcg:
        idcg = _dcg(ideal, k)
        out[f"ndcg@{k}"] = _dcg(grades, k) / idcg if idcg > 0 else 0.0

    hits = 0
    ap_sum = 0.0
    mrr = 0.0
    for rank, g in enumerate(grades, start=1):
        if g >= 1:
            hits += 1
            ap_sum += hits / rank
            if mrr == 0.0:
                mrr = 1.0 / rank
    out["map"] = ap_sum / n_rel if n_rel else 1.0
    out["mrr"] = mrr

    for k in cutoffs.recall:
        found = sum(1 for g in grades[:k] if g >= 1)
        out[f"recall@{k}"] = found / n_rel if n_rel else 1.0
    return out


def compute_metrics(run: list[RankedList], qrels: Qrels,
                    cutoffs: MetricCutoffs | None = None) -> MetricReport:
    """Evaluate a run against graded judgments. Queries present in the qrels
    but absent from the run score 0 across the board; queries with no relevant
    items are excluded from the means and counted."""
    cutoffs = cutoffs or MetricCutoffs()
    by_query: dict[str, RankedList] = {}
    for rl in run:
        if rl.query_id in by_query:
            raise ValueError(f"duplicate query_id {rl.query_id} in run")
        by_query[rl.query_id] = rl
    unknown = [qid for qid in by_query if qid not in qrels.judgments]
    if unknown:
        raise ValueError(f"run contains unjudged query_ids: {unknown[:5]}")

    per_query: dict[str, dict[str, float]] = {}
    no_relevant = 0
    unjudged10 = 0
    total10 = 0
    for qid in sorted(qrels.judgments):
        judged = qrels.judgments[qid]
        ranked_ids = by_query[qid].item_ids() if qid in by_query else []
        for item_id in ranked_ids[:10]:
            total10 += 1
            if item_id not in judged:
                unjudged10 += 1
        if not any(g >= 1 for g in judged.values()):
            no_relevant += 1
            log.warning("query %s has no relevant items; excluded from means", qid)
            continue
        per_query[qid] = _query_metrics(ranked_ids, judged, cutoffs)

    means = {}
    for name in cutoffs.metric_names():
        values = [m[name] for m in per_query.values()]
        means[name] = sum(values) / len(values) if values else 0.0
    return MetricReport(per_query=per_query, means=means, n_queries=len(per_query),
                        unjudged_at_10=(unjudged10 / total10 if total10 else 0.0),
                        no_relevant_queries=no_relevant)


def paired_ttest(per_query_a: list[float], per_query_b: list[float]) -> tuple[float, float]:
    """Paired two-sided Student's t-test on per-query differences. The p-value
    comes from the regularized incomplete beta with n-1 degrees of freedom.
    Zero-variance, zero-mean differences give (t=0, p=1)."""
    n = len(per_query_a)
    if n != len(per_query_b):
        raise ValueError(f"paired samples differ in length: {n} vs {len(per_query_b)}")
    if n < 2:
        raise ValueError("need at least 2 paired observations")
    diffs = [a - b for a, b in zip(per_query_a, per_query_b)]
    mean = sum(diffs) / n
    var = sum((d - mean) ** 2 for d in diffs) / (n - 1)
    if var == 0.0:
        if mean == 0.0:
            return 0.0, 1.0
        return math.copysign(math.inf, mean), 0.0
    t = mean / math.sqrt(var / n)
    dof = n - 1
    p = float(betainc(dof / 2.0, 0.5, dof / (dof + t * t)))
    return t, p


@dataclass
class SignificanceTable:
    """Per-system means annotated with the baselines each one significantly
    improves on (two-sided paired t-test at p < 0.05, computed per metric
    column)."""

    metric_names: list[str]
    systems: list[str]
    baseline_ids: list[str]
    means: dict[str, dict[str, float]]
    marks: dict[str, dict[str, list[int]]]  # system -> metric -> baseline numbers beaten

    def to_json(self) -> dict:
        return {"metrics": self.metric_names, "systems": self.systems,
                "baselines": self.baseline_ids, "means": self.means,
                "significant_over": {s: {m: marks for m, marks in by_metric.items()}
                                     for s, by_metric in self.marks.items()},
                "note": ("significance computed per metric column with two-sided "
                         f"paired t-tests at p < {SIGNIFICANCE_ALPHA}")}

    def to_text(self) -> str:
        width = max(len(s) for s in self.systems) + 6
        lines = [f"significance: two-sided paired t-test per metric column, "
                 f"p < {SIGNIFICANCE_ALPHA}; superscript digits index baselines"]
        for i, b in enumerate(self.baseline_ids, start=1):
            lines.append(f"  [{i}] {b}")
        header = "system".ljust(width) + "".join(m.rjust(16) for m in self.metric_names)
        lines.append(header)
        lines.append("-" * len(header))
        for system in self.systems:
            number = (f"[{self.baseline_ids.index(system) + 1}] "
                      if system in self.baseline_ids else "")
            row = (number + system).ljust(width)
            for m in self.metric_names:
                marks = self.marks.get(system, {}).get(m, [])
                cell = f"{self.means[system][m]:.4f}"
                if marks:
                    cell += "^" + "".join(str(i) for i in marks)
                row += cell.rjust(16)
            lines.append(row)
        return "\n".join(lines) + "\n"


def significance_report(reports: dict[str, MetricReport],
                        baseline_ids: list[str]) -> SignificanceTable:
    """Compare systems against the named baselines on shared query sets."""
    systems = list(reports)
    query_sets = {name: frozenset(r.per_query) for name, r in reports.items()}
    reference = next(iter(query_sets.values()), frozenset())
    for name, qs in query_sets.items():
        if qs != reference:
            raise ValueError(f"system {name} evaluated on a different query set")
    for b in baseline_ids:
        if b not in reports:
            raise ValueError(f"baseline {b!r} has no metric report")

    metric_names = list(next(iter(reports.values())).means) if reports else []
    qids = sorted(reference)
    means = {name: dict(r.means) for name, r in reports.items()}
    marks: dict[str, dict[str, list[int]]] = {}
    for name, report in reports.items():
        marks[name] = {}
        for metric in metric_names:
            beaten = []
            for b_idx, baseline in enumerate(baseline_ids, start=1):
                if baseline == name or not qids:
                    continue
                a = [report.per_query[q][metric] for q in qids]
                b = [reports[baseline].per_query[q][metric] for q in qids]
                _, p = paired_ttest(a, b)
                if p < SIGNIFICANCE_ALPHA and report.means[metric] > reports[baseline].means[metric]:
                    beaten.append(b_idx)
            if beaten:
                marks[name][metric] = beaten
    return SignificanceTable(metric_names=metric_names, systems=systems,
                             baseline_ids=baseline_ids, means=means, marks=marks)
