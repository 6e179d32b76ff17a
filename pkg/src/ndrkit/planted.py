"""Planted-signal fixture: a synthetic review world with known relevance.

Builds a corpus whose ground truth is constructed, so the whole pipeline can
be checked end to end without any external model. Each (city, category) pair
carries one "liked" vocabulary cluster; eligible users rave about items from
their cluster (plus personal off-topic noise), and test queries describe the
cluster through a synonym table, so queries share almost no vocabulary with
the item texts. Review texts also carry anchor terms that never appear in
item texts: they give the query-likelihood filter lexical footing while
keeping term-overlap baselines blind at ranking time.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from pathlib import Path

from .qgen import stub_generate
from .util import canonical_json, derive_seed, dump_jsonl


@dataclass
class PlantedWorld:
    reviews_path: Path
    items_path: Path
    queries_path: Path
    qrels_path: Path
    synonyms_path: Path
    synonyms: dict[str, str]
    combos: list[tuple[str, str]]  # (city, category)


CITIES = ["aldgate", "brightholm", "cresthaven", "dunmore", "eastvale"]
CATEGORIES = ["restaurants", "outdoors", "nightlife", "wellness"]


def _combo_slug(city: str, category: str) -> str:
    return f"{city[:4]}{category[:4]}"


def build_planted_world(out_dir: str | Path, seed: int,
                        items_per_combo: int = 25, liked_per_combo: int = 5,
                        users_per_combo: int = 3, queries_per_combo: int = 2,
                        topic_reviews_per_user: int = 12,
                        noise_reviews_per_user: int = 8) -> PlantedWorld:
    """Write reviews.jsonl, items.jsonl, queries.jsonl, qrels.txt and
    synonyms.json under out_dir. Deterministic for a fixed seed."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = random.Random(derive_seed(seed, "planted"))

    combos = [(city, cat) for city in CITIES for cat in CATEGORIES]
    synonyms: dict[str, str] = {}
    items = []
    reviews = []
    queries = []
    qrels_lines = []

    for city, cat in combos:
        slug = _combo_slug(city, cat)
        # liked-cluster vocabulary: 8 mapped terms + 2 anchors that stay raw
        mapped_terms = [f"{slug}flavor{k}" for k in range(8)]
        anchors = [f"{slug}anchor{k}" for k in range(2)]
        for k, term in enumerate(mapped_terms):
            synonyms[term] = f"{slug}wish{k}"

        # candidate item texts all carry the same token count so ranking within
        # a combo reflects content, not length artifacts
        liked_positions = set(rng.sample(range(items_per_combo), liked_per_combo))
        liked_ids = []
        distractor_vocabs = []
        for idx in range(items_per_combo):
            item_id = f"{slug}-i{idx:03d}"
            if idx in liked_positions:
                liked_ids.append(item_id)
                snippet = " ".join(rng.sample(mapped_terms, len(mapped_terms)))
            else:
                junk = [f"{slug}dull{idx}x{k}" for k in range(len(mapped_terms))]
                distractor_vocabs.append(junk)
                for k, term in enumerate(junk):
                    synonyms[term] = f"{slug}meh{idx}x{k}"
                snippet = " ".join(junk)
            items.append({"item_id": item_id, "name": f"{slug} venue",
                          "city": city, "categories": [cat], "snippet": snippet})

        for u in range(users_per_combo):
            user_id = f"{slug}-u{u}"
            for r in range(topic_reviews_per_user):
                text = _review_text(rng, mapped_terms, anchors[r % len(anchors)])
                reviews.append({"user_id": user_id,
                                "item_id": liked_ids[r % len(liked_ids)],
                                "stars": 5, "text": text})
            # off-topic likes reuse distractor vocabulary round-robin, so every
            # distractor's terms show up in the training pool as negatives
            for r in range(noise_reviews_per_user):
                vocab = distractor_vocabs[(u * noise_reviews_per_user + r)
                                          % len(distractor_vocabs)]
                words = list(vocab)
                rng.shuffle(words)
                reviews.append({"user_id": user_id, "item_id": f"{user_id}-fav{r}",
                                "stars": 5, "text": " ".join(words) + "."})
            below = max(4, (topic_reviews_per_user + noise_reviews_per_user) // 2)
            for r in range(below):
                reviews.append({"user_id": user_id, "item_id": f"{user_id}-meh{r}",
                                "stars": 3, "text": f"{slug} letdown visit {r}."})

        for j in range(queries_per_combo):
            qid = f"t-{slug}-{j}"
            snippets = [_review_text(rng, mapped_terms, anchors[s % len(anchors)])
                        for s in range(6)]
            text = stub_generate(snippets, derive_seed(seed, "planted-query", qid), synonyms)
            queries.append({"query_id": qid, "text": text, "city": city, "category": cat})
            for g, item_id in enumerate(liked_ids):
                grade = 2 if g < 3 else 1
                qrels_lines.append(f"{qid} 0 {item_id} {grade}")

    rng.shuffle(reviews)  # input order must not matter for eligibility

    world = PlantedWorld(
        reviews_path=out_dir / "reviews.jsonl",
        items_path=out_dir / "items.jsonl",
        queries_path=out_dir / "queries.jsonl",
        qrels_path=out_dir / "qrels.txt",
        synonyms_path=out_dir / "synonyms.json",
        synonyms=synonyms,
        combos=combos,
    )
    dump_jsonl(world.reviews_path, reviews)
    dump_jsonl(world.items_path, items)
    dump_jsonl(world.queries_path, queries)
    world.qrels_path.write_text("\n".join(qrels_lines) + "\n", encoding="utf-8")
    world.synonyms_path.write_text(canonical_json(synonyms) + "\n", encoding="utf-8")
    return world


def _review_text(rng: random.Random, mapped_terms: list[str], anchor: str) -> str:
    """One-sentence review: one anchor doubled (so salient-term extraction
    always picks it up) plus six of the mapped vocabulary terms."""
    words = [anchor, anchor] + rng.sample(mapped_terms, 6)
    rng.shuffle(words)
    return " ".join(words) + "."


def planted_config(world: PlantedWorld, workdir: str | Path, seed: int) -> dict:
    """A pipeline configuration tuned for the planted fixture's desk scale."""
    return {
        "seed": seed,
        "paths": {
            "reviews": str(world.reviews_path),
            "items": str(world.items_path),
            "test_queries": str(world.queries_path),
            "qrels": str(world.qrels_path),
            "synonyms": str(world.synonyms_path),
            "template": None,
            "workdir": str(workdir),
        },
        "eligibility": {"min_reviews_per_user": 10, "min_reviews_per_item": 1,
                        "min_avg_stars": 3.0, "above_avg_range": [10, 30]},
        "provider": {"kind": "stub", "model_name": "stub", "max_in_flight": 4,
                     "requests_per_minute": 100000, "max_retries": 2,
                     "timeout_s": 10.0, "temperature": 0.7,
                     "max_completion_tokens": 300},
        "qgen": {"n_snippets": 10, "n_users": None},
        "filter": {"mu": 2000.0, "retain_fraction": 0.6},
        "encoder": {"vocab_buckets": 4096, "dim": 32, "hidden": 64,
                    "dropout_rate": 0.1, "hash_seed": 706271},
        "train_bi": {"learning_rate": 0.02, "batch_size": 32, "epochs": 30,
                     "margin": 1.0, "n_negatives": 1, "optimizer": "adam",
                     "hard_negative_rank_range": [100, 300]},
        "train_cross": {"learning_rate": 0.01, "batch_size": 32, "epochs": 20,
                        "margin": 1.0, "n_negatives": 4, "optimizer": "adam",
                        "hard_negative_rank_range": [100, 300]},
        "retrieval": {"first_stage_k": 200, "prefilter": True, "bm25_k1": 1.2,
                      "bm25_b": 0.75, "neighbors_per_item": 10,
                      "systems": ["bm25", "bienc", "crenc", "ql-rerank", "grounded"]},
        "eval": {"ndcg_cutoffs": [5, 10], "recall_cutoffs": [100, 200],
                 "baselines": ["bm25"]},
    }
