"""Pipeline stages over a working directory, with content-hash manifests.

Each stage reads the artifacts of its upstream stages (or raw input paths),
writes its outputs under workdir/<stage>/, and records a manifest with the
content hashes of everything it consumed plus the hash of the config sections
that affect it. Re-running a stage with unchanged inputs reproduces
byte-identical artifacts; a stage refuses to run on top of stale upstream
artifacts unless forced.
"""

from __future__ import annotations

import copy
import json
import logging
import random
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import corpus, qgen, qlfilter, retrieval, training
from .corpus import EligibilityConfig, ReviewSet, item_to_json, review_from_json, \
    review_to_json, user_from_json, user_to_json
from .encoder import CrossEncoderModel, EncoderModel, embed_tokens, load_crossencoder, \
    load_encoder
from .evaluation import MetricCutoffs, MetricReport, Qrels, compute_metrics, \
    significance_report
from .qgen import ProviderConfig, StubProvider, SyntheticQuery, WeakStubProvider
from .training import TrainConfig
from .util import canonical_json, derive_seed, dump_jsonl, load_jsonl, sha256_bytes, \
    sha256_file

log = logging.getLogger(__name__)

STAGE_ORDER = ["ingest", "select-users", "gen-queries", "filter-pairs", "train-bi",
               "mine-negatives", "train-cross", "index", "retrieve", "evaluate",
               "report"]

ABLATIONS = ("no-filter", "per-item-qgen", "weak-qgen")


class UsageError(Exception):
    """Bad flags or configuration; exit code 1."""


class MissingArtifactError(Exception):
    """An upstream artifact is absent; exit code 2."""


class StaleArtifactError(Exception):
    """An upstream manifest no longer matches the files on disk; exit code 2."""


class ProviderExhaustedError(Exception):
    """The provider failed for every user; exit code 3."""


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

DEFAULT_CONFIG: dict = {
    "seed": 13,
    "paths": {"reviews": None, "items": None, "workdir": None, "test_queries": None,
              "qrels": None, "synonyms": None, "template": None},
    "eligibility": {"min_reviews_per_user": 10, "min_reviews_per_item": 10,
                    "min_avg_stars": 3.0, "above_avg_range": [10, 30]},
    "provider": {"kind": "stub", "endpoint": "", "model_name": "stub",
                 "max_in_flight": 4, "requests_per_minute": 600.0,
                 "max_retries": 3, "timeout_s": 30.0, "temperature": 0.7,
                 "max_completion_tokens": 300, "terms_per_snippet": 3},
    "qgen": {"n_snippets": 10, "n_users": None, "per_item": False},
    "filter": {"mu": 2000.0, "retain_fraction": 0.6},
    "encoder": {"vocab_buckets": 262144, "dim": 64, "hidden": 256,
                "dropout_rate": 0.1, "hash_seed": 706271},
    "train_bi": {"learning_rate": 1e-3, "batch_size": 64, "epochs": 5, "margin": 1.0,
                 "n_negatives": 1, "optimizer": "adam",
                 "hard_negative_rank_range": [100, 300]},
    "train_cross": {"learning_rate": 1e-3, "batch_size": 64, "epochs": 5, "margin": 1.0,
                    "n_negatives": 4, "optimizer": "adam",
                    "hard_negative_rank_range": [100, 300]},
    "retrieval": {"first_stage_k": 200, "prefilter": True, "bm25_k1": 1.2,
                  "bm25_b": 0.75, "neighbors_per_item": 20,
                  "systems": ["bm25", "bienc", "crenc", "ql-rerank", "grounded"]},
    "eval": {"ndcg_cutoffs": [5, 10], "recall_cutoffs": [100, 200],
             "baselines": ["bm25"]},
    "mining_checkpoint": None,          # alternate bi-encoder for negative mining
    "rerank_first_stage_checkpoint": None,  # alternate bi-encoder for the reranker's first stage
    "sources": {},                      # stage name -> directory holding its artifacts
}

# config sections that feed each stage (hashed into its manifest)
_STAGE_CONFIG_KEYS = {
    "ingest": ["paths.reviews", "paths.items"],
    "select-users": ["eligibility"],
    "gen-queries": ["provider", "qgen", "paths.template", "paths.synonyms", "seed"],
    "filter-pairs": ["filter"],
    "train-bi": ["encoder", "train_bi", "seed"],
    "mine-negatives": ["train_cross.n_negatives", "train_cross.hard_negative_rank_range",
                       "mining_checkpoint", "seed"],
    "train-cross": ["encoder", "train_cross", "seed"],
    "index": [],
    "retrieve": ["retrieval", "paths.test_queries", "provider",
                 "rerank_first_stage_checkpoint", "seed"],
    "evaluate": ["eval.ndcg_cutoffs", "eval.recall_cutoffs", "paths.qrels"],
    "report": ["eval.baselines"],
}

_STAGE_DEPS = {
    "ingest": [],
    "select-users": ["ingest"],
    "gen-queries": ["select-users"],
    "filter-pairs": ["select-users", "gen-queries"],
    "train-bi": ["select-users", "gen-queries", "filter-pairs"],
    "mine-negatives": ["select-users", "gen-queries", "filter-pairs"],
    "train-cross": ["mine-negatives"],
    "index": ["train-bi", "ingest"],
    "retrieve": ["index", "train-bi", "train-cross", "ingest"],
    "evaluate": ["retrieve"],
    "report": ["evaluate"],
}


def _dotted_get(d: dict, path: str):
    cur = d
    for part in path.split("."):
        if not isinstance(cur, dict) or part not in cur:
            return None
        cur = cur[part]
    return cur


def _dotted_set(d: dict, path: str, value) -> None:
    parts = path.split(".")
    cur = d
    for part in parts[:-1]:
        if part not in cur or not isinstance(cur[part], dict):
            cur[part] = {}
        cur = cur[part]
    cur[parts[-1]] = value


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


@dataclass
class PipelineConfig:
    raw: dict

    def __post_init__(self):
        rf = self.raw["filter"]["retain_fraction"]
        if not 0 < rf <= 1:
            raise UsageError(f"filter.retain_fraction must be in (0, 1], got {rf}")
        if not self.raw["paths"].get("workdir"):
            raise UsageError("paths.workdir is required")
        largest_cutoff = max(self.raw["eval"]["ndcg_cutoffs"]
                             + self.raw["eval"]["recall_cutoffs"])
        if self.raw["retrieval"]["first_stage_k"] < largest_cutoff:
            log.warning("first_stage_k %d is below the largest eval cutoff %d",
                        self.raw["retrieval"]["first_stage_k"], largest_cutoff)
        # constructing the typed sub-configs validates their invariants
        self.eligibility()
        self.provider_config()
        self.train_config("train_bi")
        self.train_config("train_cross")

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        return cls(raw=_merge(DEFAULT_CONFIG, d))

    @classmethod
    def from_file(cls, path: str | Path, overrides: list[str] = ()) -> "PipelineConfig":
        try:
            d = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from exc
        merged = _merge(DEFAULT_CONFIG, d)
        for item in overrides:
            if "=" not in item:
                raise UsageError(f"override {item!r} is not of the form key.path=value")
            key, text = item.split("=", 1)
            try:
                value = json.loads(text)
            except json.JSONDecodeError:
                value = text
            _dotted_set(merged, key.strip(), value)
        return cls(raw=merged)

    # typed accessors ------------------------------------------------------
    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    def path(self, name: str) -> Path | None:
        value = self.raw["paths"].get(name)
        return Path(value) if value else None

    @property
    def workdir(self) -> Path:
        return Path(self.raw["paths"]["workdir"])

    def eligibility(self) -> EligibilityConfig:
        e = self.raw["eligibility"]
        return EligibilityConfig(min_reviews_per_user=e["min_reviews_per_user"],
                                 min_reviews_per_item=e["min_reviews_per_item"],
                                 min_avg_stars=e["min_avg_stars"],
                                 above_avg_range=tuple(e["above_avg_range"]))

    def provider_config(self) -> ProviderConfig:
        p = self.raw["provider"]
        return ProviderConfig(endpoint=p["endpoint"], model_name=p["model_name"],
                              max_in_flight=p["max_in_flight"],
                              requests_per_minute=p["requests_per_minute"],
                              max_retries=p["max_retries"], timeout_s=p["timeout_s"],
                              temperature=p["temperature"],
                              max_completion_tokens=p["max_completion_tokens"])

    def train_config(self, which: str) -> TrainConfig:
        t = self.raw[which]
        return TrainConfig(learning_rate=t["learning_rate"], batch_size=t["batch_size"],
                           epochs=t["epochs"], margin=t["margin"],
                           n_negatives=t["n_negatives"],
                           seed=derive_seed(self.seed, which),
                           optimizer=t["optimizer"],
                           hard_negative_rank_range=tuple(t["hard_negative_rank_range"]))

    def cutoffs(self) -> MetricCutoffs:
        return MetricCutoffs(ndcg=tuple(self.raw["eval"]["ndcg_cutoffs"]),
                             recall=tuple(self.raw["eval"]["recall_cutoffs"]))

    def systems(self) -> list[str]:
        return list(self.raw["retrieval"]["systems"])

    # artifact locations ---------------------------------------------------
    def stage_dir(self, stage: str) -> Path:
        return self.workdir / stage

    def source_dir(self, stage: str) -> Path:
        redirect = self.raw.get("sources", {}).get(stage)
        return Path(redirect) if redirect else self.stage_dir(stage)

    def artifact(self, stage: str, filename: str) -> Path:
        return self.source_dir(stage) / filename

    def stage_config_sha(self, stage: str) -> str:
        payload = {key: _dotted_get(self.raw, key) for key in _STAGE_CONFIG_KEYS[stage]}
        return sha256_bytes(canonical_json(payload).encode("utf-8"))


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

def _write_manifest(cfg: PipelineConfig, stage: str, inputs: dict[str, Path]) -> None:
    sdir = cfg.stage_dir(stage)
    outputs = {}
    for f in sorted(sdir.iterdir()):
        if f.name == "manifest.json" or not f.is_file():
            continue
        outputs[f.name] = sha256_file(f)
    manifest = {
        "stage": stage,
        "config_sha": cfg.stage_config_sha(stage),
        "inputs": {label: {"path": str(p), "sha256": sha256_file(p)}
                   for label, p in inputs.items()},
        "outputs": outputs,
    }
    (sdir / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _check_dep(cfg: PipelineConfig, stage: str, dep: str, force: bool) -> None:
    ddir = cfg.source_dir(dep)
    mpath = ddir / "manifest.json"
    if not mpath.exists():
        raise MissingArtifactError(
            f"stage {stage!r} needs artifacts from {dep!r}; run {dep} first")
    manifest = json.loads(mpath.read_text(encoding="utf-8"))
    problems = []
    for fname, sha in manifest.get("outputs", {}).items():
        f = ddir / fname
        if not f.exists():
            problems.append(f"output {fname} missing")
        elif sha256_file(f) != sha:
            problems.append(f"output {fname} changed on disk")
    for label, rec in manifest.get("inputs", {}).items():
        p = Path(rec["path"])
        if not p.exists() or sha256_file(p) != rec["sha256"]:
            problems.append(f"input {label} changed since {dep} ran")
    redirected = cfg.raw.get("sources", {}).get(dep) is not None
    if not redirected and manifest.get("config_sha") != cfg.stage_config_sha(dep):
        problems.append(f"configuration for {dep} changed since it ran")
    if problems:
        message = f"stage {dep!r} is stale: " + "; ".join(problems)
        if force:
            log.warning("%s (forced)", message)
        else:
            raise StaleArtifactError(message + " (re-run it, or pass --force)")


def _require(path: Path | None, what: str, hint: str) -> Path:
    if path is None:
        raise MissingArtifactError(f"{what} is not configured; {hint}")
    if not path.exists():
        raise MissingArtifactError(f"{what} not found at {path}; {hint}")
    return path


# ---------------------------------------------------------------------------
# stage bodies
# ---------------------------------------------------------------------------

def _stage_ingest(cfg: PipelineConfig, sdir: Path) -> dict[str, Path]:
    reviews_path = _require(cfg.path("reviews"), "reviews file", "set paths.reviews")
    items_path = _require(cfg.path("items"), "items file", "set paths.items")
    reviews = corpus.load_reviews(reviews_path)
    items = corpus.load_items(items_path)
    dump_jsonl(sdir / "reviews.jsonl", [review_to_json(d) for d in reviews.docs])
    dump_jsonl(sdir / "items.jsonl", [item_to_json(r) for r in items.records()])
    (sdir / "skips.json").write_text(canonical_json({
        "review_skips": reviews.skipped, "review_skip_reasons": reviews.skip_reasons,
        "item_duplicates": items.duplicates, "item_skips": items.skipped}) + "\n",
        encoding="utf-8")
    return {"reviews": reviews_path, "items": items_path}


def _load_ingested_reviews(cfg: PipelineConfig) -> ReviewSet:
    rows = load_jsonl(cfg.artifact("ingest", "reviews.jsonl"))
    return ReviewSet(docs=[review_from_json(r) for r in rows])


def _load_catalog(cfg: PipelineConfig) -> corpus.ItemCatalog:
    rows = load_jsonl(cfg.artifact("ingest", "items.jsonl"))
    items = {r["item_id"]: corpus.ItemRecord(item_id=r["item_id"], name=r["name"],
                                             city=r["city"],
                                             categories=frozenset(r["categories"]),
                                             snippet=r.get("snippet") or "")
             for r in rows}
    return corpus.ItemCatalog(items=items)


def _stage_select_users(cfg: PipelineConfig, sdir: Path) -> dict[str, Path]:
    reviews_art = cfg.artifact("ingest", "reviews.jsonl")
    users = corpus.select_eligible_users(_load_ingested_reviews(cfg), cfg.eligibility())
    dump_jsonl(sdir / "users.jsonl", [user_to_json(u) for u in users])
    return {"reviews": reviews_art}


def _load_users(cfg: PipelineConfig) -> list[corpus.UserInteractionSet]:
    return [user_from_json(r) for r in load_jsonl(cfg.artifact("select-users", "users.jsonl"))]


def _make_provider(cfg: PipelineConfig, template: qgen.PromptTemplate):
    p = cfg.raw["provider"]
    kind = p.get("kind", "stub")
    if kind == "http":
        return qgen.HttpProvider(cfg.provider_config())
    synonyms_path = cfg.path("synonyms")
    synonyms = (json.loads(synonyms_path.read_text(encoding="utf-8"))
                if synonyms_path else qgen.default_synonyms())
    common = dict(synonyms=synonyms, seed=derive_seed(cfg.seed, "provider"),
                  item_prefix=template.item_prefix, query_prefix=template.query_prefix,
                  terms_per_snippet=p.get("terms_per_snippet", 3))
    if kind == "stub":
        return StubProvider(**common)
    if kind == "weak-stub":
        return WeakStubProvider(**common)
    raise UsageError(f"unknown provider kind {kind!r}")


def _load_template(cfg: PipelineConfig) -> qgen.PromptTemplate:
    path = cfg.path("template")
    return qgen.load_template(path) if path else qgen.default_template()


def _stage_gen_queries(cfg: PipelineConfig, sdir: Path) -> dict[str, Path]:
    users_art = cfg.artifact("select-users", "users.jsonl")
    users = _load_users(cfg)
    n_users = cfg.raw["qgen"].get("n_users")
    if n_users and n_users < len(users):
        rng = random.Random(derive_seed(cfg.seed, "user-sample"))
        users = sorted(rng.sample(users, n_users), key=lambda u: u.user_id)
    template = _load_template(cfg)
    provider = _make_provider(cfg, template)
    pcfg = cfg.provider_config()
    seed = derive_seed(cfg.seed, "gen-queries")
    if cfg.raw["qgen"].get("per_item"):
        rng = random.Random(derive_seed(cfg.seed, "per-item-pick"))
        docs = [u.docs[rng.randrange(len(u.docs))] for u in users]
        result = qgen.generate_item_queries(docs, template, provider, seed=seed, cfg=pcfg)
    else:
        result = qgen.generate_queries(users, template, provider,
                                       cfg.raw["qgen"]["n_snippets"], seed, cfg=pcfg)
    if users and not result.queries:
        raise ProviderExhaustedError(
            f"provider failed for all {len(users)} users: {result.failures[:3]}")
    dump_jsonl(sdir / "queries.jsonl", [vars(q) for q in result.queries])
    (sdir / "report.json").write_text(canonical_json({
        "n_queries": len(result.queries),
        "failures": result.failures,
        "retries": result.retries,
        "prompt_tokens_total": result.prompt_tokens_total,
        "completion_tokens_total": result.completion_tokens_total}) + "\n",
        encoding="utf-8")
    inputs = {"users": users_art}
    template_path = cfg.path("template")
    if template_path:
        inputs["template"] = template_path
    synonyms_path = cfg.path("synonyms")
    if synonyms_path:
        inputs["synonyms"] = synonyms_path
    return inputs


def _load_queries(cfg: PipelineConfig) -> list[SyntheticQuery]:
    rows = load_jsonl(cfg.artifact("gen-queries", "queries.jsonl"))
    return [SyntheticQuery(**r) for r in rows]


def _docs_by_user(users: list[corpus.UserInteractionSet]) -> dict[str, list[corpus.ReviewDoc]]:
    return {u.user_id: u.docs for u in users}


def _stage_filter_pairs(cfg: PipelineConfig, sdir: Path) -> dict[str, Path]:
    users_art = cfg.artifact("select-users", "users.jsonl")
    queries_art = cfg.artifact("gen-queries", "queries.jsonl")
    users = _load_users(cfg)
    queries = _load_queries(cfg)
    by_user = _docs_by_user(users)
    pool = [d for u in users for d in u.docs]
    stats = qlfilter.build_lm_stats(pool, mu=cfg.raw["filter"]["mu"])
    retain = cfg.raw["filter"]["retain_fraction"]
    rows = []
    for query in queries:
        docs = by_user.get(query.user_id, [])
        if not docs:
            log.warning("query %s: user %s has no docs", query.query_id, query.user_id)
            continue
        ranked = qlfilter.score_pairs(query, docs, stats)
        keep = qlfilter.retained_count(len(docs), retain)
        for pair in ranked:
            rows.append({"query_id": pair.query_id, "item_id": pair.doc.item_id,
                         "doc_id": pair.doc.doc_id, "user_id": pair.doc.user_id,
                         "ql_score": pair.ql_score, "rank": pair.rank,
                         "retained": pair.rank <= keep})
    dump_jsonl(sdir / "pairs.jsonl", rows)
    return {"users": users_art, "queries": queries_art}


def _load_training_pairs(cfg: PipelineConfig
                         ) -> tuple[list[tuple[SyntheticQuery, corpus.ReviewDoc]],
                                    list[corpus.ReviewDoc]]:
    """Retained (query, positive doc) pairs plus the full training doc pool."""
    users = _load_users(cfg)
    queries = {q.query_id: q for q in _load_queries(cfg)}
    docs = {d.doc_id: d for u in users for d in u.docs}
    pool = [d for u in users for d in u.docs]
    pairs = []
    for row in load_jsonl(cfg.artifact("filter-pairs", "pairs.jsonl")):
        if not row["retained"]:
            continue
        query = queries.get(row["query_id"])
        doc = docs.get(row["doc_id"])
        if query is None or doc is None:
            raise MissingArtifactError(
                f"pairs.jsonl references unknown query/doc {row['query_id']}/{row['doc_id']}")
        pairs.append((query, doc))
    return pairs, pool


def _encoder_settings(cfg: PipelineConfig) -> dict:
    return cfg.raw["encoder"]


def _stage_train_bi(cfg: PipelineConfig, sdir: Path) -> dict[str, Path]:
    pairs_art = cfg.artifact("filter-pairs", "pairs.jsonl")
    users_art = cfg.artifact("select-users", "users.jsonl")
    queries_art = cfg.artifact("gen-queries", "queries.jsonl")
    pairs, pool = _load_training_pairs(cfg)
    if not pairs:
        raise MissingArtifactError("no retained training pairs; check filter-pairs output")
    enc = _encoder_settings(cfg)
    model = EncoderModel.initialize(enc["vocab_buckets"], enc["dim"],
                                    seed=derive_seed(cfg.seed, "bi-init"),
                                    hash_seed=enc["hash_seed"])
    tc = cfg.train_config("train_bi")

    def resample(epoch: int) -> list[training.TrainingExample]:
        return training.sample_random_negatives(
            pairs, pool, seed=derive_seed(cfg.seed, "bi-negatives", epoch))

    result = training.train_biencoder([], tc, model, resample=resample)
    from .encoder import save_encoder
    save_encoder(model, sdir / "biencoder.ndrenc", manifest={
        "train_config": vars(tc) | {"hard_negative_rank_range":
                                    list(tc.hard_negative_rank_range)},
        "data_hashes": {"pairs": sha256_file(pairs_art),
                        "queries": sha256_file(queries_art),
                        "users": sha256_file(users_art)},
        "epoch_losses": result.epoch_losses,
    })
    dump_jsonl(sdir / "metrics.jsonl", result.metrics)
    return {"pairs": pairs_art, "users": users_art, "queries": queries_art}


def _mining_checkpoint(cfg: PipelineConfig) -> Path:
    override = cfg.raw.get("mining_checkpoint")
    if override:
        return _require(Path(override), "mining checkpoint", "check mining_checkpoint")
    return _require(cfg.artifact("train-bi", "biencoder.ndrenc"),
                    "bi-encoder checkpoint", "run train-bi first")


def _stage_mine_negatives(cfg: PipelineConfig, sdir: Path) -> dict[str, Path]:
    ckpt = _mining_checkpoint(cfg)
    pairs_art = cfg.artifact("filter-pairs", "pairs.jsonl")
    model = load_encoder(ckpt)
    pairs, pool = _load_training_pairs(cfg)
    pool_vectors = np.stack([embed_tokens(model, model.tokenize(d.text)) for d in pool])
    by_query: dict[str, list[corpus.ReviewDoc]] = {}
    query_obj: dict[str, SyntheticQuery] = {}
    for query, doc in pairs:
        by_query.setdefault(query.query_id, []).append(doc)
        query_obj[query.query_id] = query
    tc = cfg.train_config("train_cross")
    rows = []
    for query_id, positives in by_query.items():
        examples = training.mine_hard_negatives_for_query(
            model, query_obj[query_id], pool, tc.hard_negative_rank_range,
            tc.n_negatives, derive_seed(cfg.seed, "mine"), positives,
            pool_vectors=pool_vectors)
        for ex in examples:
            rows.append({"query_id": ex.query_id, "query_text": ex.query_text,
                         "positive_text": ex.positive_text,
                         "negative_texts": ex.negative_texts})
    dump_jsonl(sdir / "crossdata.jsonl", rows)
    return {"biencoder": ckpt, "pairs": pairs_art}


def _stage_train_cross(cfg: PipelineConfig, sdir: Path) -> dict[str, Path]:
    crossdata_art = cfg.artifact("mine-negatives", "crossdata.jsonl")
    dataset = [training.TrainingExample(query_text=r["query_text"],
                                        positive_text=r["positive_text"],
                                        negative_texts=r["negative_texts"],
                                        query_id=r["query_id"])
               for r in load_jsonl(crossdata_art)]
    enc = _encoder_settings(cfg)
    model = CrossEncoderModel.initialize(enc["vocab_buckets"], enc["dim"], enc["hidden"],
                                         seed=derive_seed(cfg.seed, "cross-init"),
                                         hash_seed=enc["hash_seed"],
                                         dropout_rate=enc["dropout_rate"])
    tc = cfg.train_config("train_cross")
    result = training.train_crossencoder(dataset, tc, model)
    from .encoder import save_crossencoder
    save_crossencoder(model, sdir / "crossencoder.ndrxen", manifest={
        "train_config": vars(tc) | {"hard_negative_rank_range":
                                    list(tc.hard_negative_rank_range)},
        "data_hashes": {"crossdata": sha256_file(crossdata_art)},
        "epoch_losses": result.epoch_losses,
    })
    dump_jsonl(sdir / "metrics.jsonl", result.metrics)
    return {"crossdata": crossdata_art}


def _stage_index(cfg: PipelineConfig, sdir: Path) -> dict[str, Path]:
    ckpt = _require(cfg.artifact("train-bi", "biencoder.ndrenc"),
                    "bi-encoder checkpoint", "run train-bi first")
    items_art = cfg.artifact("ingest", "items.jsonl")
    model = load_encoder(ckpt)
    catalog = _load_catalog(cfg)
    index = retrieval.build_index(model, catalog.records())
    retrieval.save_index(index, sdir / "items.ndridx")
    return {"biencoder": ckpt, "items": items_art}


def _stage_retrieve(cfg: PipelineConfig, sdir: Path) -> dict[str, Path]:
    index_art = _require(cfg.artifact("index", "items.ndridx"), "dense index",
                         "run index first")
    bi_art = _require(cfg.artifact("train-bi", "biencoder.ndrenc"),
                      "bi-encoder checkpoint", "run train-bi first")
    systems = cfg.systems()
    known = {"bm25", "bienc", "crenc", "ql-rerank", "grounded"}
    unknown = set(systems) - known
    if unknown:
        raise UsageError(f"unknown retrieval systems {sorted(unknown)}; choose from {sorted(known)}")
    tq_path = _require(cfg.path("test_queries"), "test queries file",
                       "set paths.test_queries")
    index = retrieval.load_index(index_art)
    bi_model = load_encoder(bi_art)
    catalog = _load_catalog(cfg)
    queries = load_jsonl(tq_path)
    k = cfg.raw["retrieval"]["first_stage_k"]
    inputs = {"index": index_art, "biencoder": bi_art, "test_queries": tq_path}

    cross_model = None
    if "crenc" in systems:
        cross_art = _require(cfg.artifact("train-cross", "crossencoder.ndrxen"),
                             "cross-encoder checkpoint", "run train-cross first")
        cross_model = load_crossencoder(cross_art)
        inputs["crossencoder"] = cross_art

    rerank_model, rerank_index = bi_model, index
    override = cfg.raw.get("rerank_first_stage_checkpoint")
    if override:
        rerank_art = _require(Path(override), "first-stage checkpoint for reranking",
                              "check rerank_first_stage_checkpoint")
        rerank_model = load_encoder(rerank_art)
        rerank_index = retrieval.build_index(rerank_model, catalog.records())
        inputs["rerank_first_stage"] = rerank_art

    provider = None
    if "grounded" in systems:
        template = _load_template(cfg)
        provider = _make_provider(cfg, template)

    item_stats = None
    if "ql-rerank" in systems:
        item_stats = qlfilter.build_lm_stats(
            [(r.item_id, r.text()) for r in catalog.records()],
            mu=cfg.raw["filter"]["mu"])

    runs: dict[str, list[retrieval.RankedList]] = {name: [] for name in systems}
    for q in queries:
        qid, text = q["query_id"], q["text"]
        city, category = q.get("city", ""), q.get("category", "")
        if cfg.raw["retrieval"]["prefilter"]:
            candidates = retrieval.prefilter_candidates(catalog, city, category)
        else:
            candidates = catalog.records()
        cand_ids = [r.item_id for r in candidates]

        def _with_qid(rl: retrieval.RankedList) -> retrieval.RankedList:
            rl.query_id = qid
            return rl

        first = None
        needs_first = bool({"bienc", "ql-rerank"} & set(systems)) \
            or ("crenc" in systems and rerank_model is bi_model)
        if needs_first:
            first = retrieval.retrieve_topk(index.subset(cand_ids), bi_model, text, k)
        if "bienc" in systems:
            runs["bienc"].append(_with_qid(first))
        if "bm25" in systems:
            if candidates:
                runs["bm25"].append(_with_qid(retrieval.bm25_rank(
                    candidates, text, k, cfg.raw["retrieval"]["bm25_k1"],
                    cfg.raw["retrieval"]["bm25_b"])))
            else:
                runs["bm25"].append(retrieval.RankedList(qid, [], "bm25"))
        if "crenc" in systems:
            rerank_first = (first if rerank_model is bi_model else
                            retrieval.retrieve_topk(rerank_index.subset(cand_ids),
                                                    rerank_model, text, k))
            if rerank_first.entries:
                runs["crenc"].append(_with_qid(
                    retrieval.rerank_cross(cross_model, text, rerank_first, catalog)))
            else:
                runs["crenc"].append(retrieval.RankedList(qid, [], "reranked"))
        if "ql-rerank" in systems:
            if first.entries:
                runs["ql-rerank"].append(_with_qid(
                    retrieval.ql_rerank(item_stats, text, first, k)))
            else:
                runs["ql-rerank"].append(retrieval.RankedList(qid, [], "ql-rerank"))
        if "grounded" in systems:
            runs["grounded"].append(_with_qid(retrieval.grounded_llm_rank(
                provider, index.subset(cand_ids), bi_model, text,
                cfg.raw["retrieval"]["neighbors_per_item"])))

    for name, lists in runs.items():
        retrieval.write_run(sdir / f"{name}.run", lists, tag=name)
    return inputs


def _stage_evaluate(cfg: PipelineConfig, sdir: Path) -> dict[str, Path]:
    qrels_path = _require(cfg.path("qrels"), "qrels file", "set paths.qrels")
    qrels = Qrels.from_trec(qrels_path)
    cutoffs = cfg.cutoffs()
    inputs = {"qrels": qrels_path}
    for name in cfg.systems():
        run_art = _require(cfg.artifact("retrieve", f"{name}.run"),
                           f"run file for {name}", "run retrieve first")
        report = compute_metrics(retrieval.read_run(run_art), qrels, cutoffs)
        (sdir / f"{name}.metrics.json").write_text(
            canonical_json(report.to_json()) + "\n", encoding="utf-8")
        inputs[f"run:{name}"] = run_art
    return inputs


def _stage_report(cfg: PipelineConfig, sdir: Path) -> dict[str, Path]:
    reports = {}
    inputs = {}
    for name in cfg.systems():
        art = _require(cfg.artifact("evaluate", f"{name}.metrics.json"),
                       f"metrics for {name}", "run evaluate first")
        reports[name] = MetricReport.from_json(json.loads(art.read_text(encoding="utf-8")))
        inputs[f"metrics:{name}"] = art
    table = significance_report(reports, cfg.raw["eval"]["baselines"])
    (sdir / "report.json").write_text(canonical_json(table.to_json()) + "\n",
                                      encoding="utf-8")
    (sdir / "report.txt").write_text(table.to_text(), encoding="utf-8")
    return inputs


_STAGE_BODIES = {
    "ingest": _stage_ingest,
    "select-users": _stage_select_users,
    "gen-queries": _stage_gen_queries,
    "filter-pairs": _stage_filter_pairs,
    "train-bi": _stage_train_bi,
    "mine-negatives": _stage_mine_negatives,
    "train-cross": _stage_train_cross,
    "index": _stage_index,
    "retrieve": _stage_retrieve,
    "evaluate": _stage_evaluate,
    "report": _stage_report,
}


def run_stage(name: str, cfg: PipelineConfig, force: bool = False) -> Path:
    """Run one pipeline stage; returns the stage directory."""
    if name not in _STAGE_BODIES:
        raise UsageError(f"unknown stage {name!r}; stages: {', '.join(STAGE_ORDER)}")
    for dep in _STAGE_DEPS[name]:
        _check_dep(cfg, name, dep, force)
    sdir = cfg.stage_dir(name)
    sdir.mkdir(parents=True, exist_ok=True)
    log.info("running stage %s -> %s", name, sdir)
    inputs = _STAGE_BODIES[name](cfg, sdir)
    _write_manifest(cfg, name, inputs)
    return sdir


def run_pipeline(cfg: PipelineConfig, force: bool = False) -> None:
    for name in STAGE_ORDER:
        run_stage(name, cfg, force=force)


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------

def ablation_config(which: str, cfg: PipelineConfig) -> PipelineConfig:
    """Derive the ablation's config: its own sub-workdir, shared upstream
    artifacts, and the base bi-encoder for negative mining and the reranker's
    first stage."""
    if which not in ABLATIONS:
        raise UsageError(f"unknown ablation {which!r}; choose from {ABLATIONS}")
    raw = copy.deepcopy(cfg.raw)
    base = cfg.workdir
    raw["paths"]["workdir"] = str(base / f"ablation-{which}")
    reused = ["ingest", "select-users"]
    if which == "no-filter":
        reused.append("gen-queries")
        raw["filter"]["retain_fraction"] = 1.0
    elif which == "per-item-qgen":
        raw["qgen"]["per_item"] = True
    elif which == "weak-qgen":
        raw["provider"]["kind"] = "weak-stub"
    raw["sources"] = {stage: str(base / stage) for stage in reused}
    raw["mining_checkpoint"] = str(base / "train-bi" / "biencoder.ndrenc")
    raw["rerank_first_stage_checkpoint"] = str(base / "train-bi" / "biencoder.ndrenc")
    return PipelineConfig(raw=raw)


def run_ablation(which: str, cfg: PipelineConfig, force: bool = False):
    """Run one ablated pipeline against existing base artifacts and write a
    comparison report (base rows included) under the ablation workdir."""
    ab_cfg = ablation_config(which, cfg)
    reused = set(ab_cfg.raw["sources"])
    for stage in STAGE_ORDER:
        if stage in reused:
            continue
        run_stage(stage, ab_cfg, force=force)

    reports = {}
    for name in cfg.systems():
        base_art = cfg.artifact("evaluate", f"{name}.metrics.json")
        if base_art.exists():
            reports[f"{name} (base)"] = MetricReport.from_json(
                json.loads(base_art.read_text(encoding="utf-8")))
        ab_art = ab_cfg.artifact("evaluate", f"{name}.metrics.json")
        reports[f"{name} ({which})"] = MetricReport.from_json(
            json.loads(ab_art.read_text(encoding="utf-8")))
    baselines = [f"{b} (base)" for b in cfg.raw["eval"]["baselines"]
                 if f"{b} (base)" in reports]
    table = significance_report(reports, baselines)
    out_dir = ab_cfg.workdir / "report"
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "ablation-report.json").write_text(canonical_json(table.to_json()) + "\n",
                                                  encoding="utf-8")
    (out_dir / "ablation-report.txt").write_text(table.to_text(), encoding="utf-8")
    return table
