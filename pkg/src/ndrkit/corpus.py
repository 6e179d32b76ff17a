"""Review corpus ingestion, user eligibility filtering, and snippet sampling.

Reviews arrive as line-delimited JSON ({"user_id", "item_id", "stars", "text"});
items as {"item_id", "name", "city", "categories", "snippet"?}. Unknown keys are
ignored. Sentence boundaries are computed at load time as byte-offset spans.
"""

from __future__ import annotations

import json
import logging
import random
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path

from .util import derive_seed

log = logging.getLogger(__name__)

_WS_BYTES = frozenset(b" \t\n\r\x0b\x0c")
_TERMINATORS = frozenset(b".!?")
_MIN_SENTENCE_CHARS = 3  # non-space characters; shorter fragments merge backwards


def sentence_spans(text: str) -> list[tuple[int, int]]:
    """Byte-offset sentence spans: split after . ! ? followed by whitespace or
    end of text; fragments with fewer than 3 non-space characters are merged
    into the preceding span."""
    data = text.encode("utf-8")
    n = len(data)
    raw: list[tuple[int, int]] = []
    start = None
    for i in range(n):
        b = data[i]
        if start is None:
            if b in _WS_BYTES:
                continue
            start = i
        if b in _TERMINATORS and (i + 1 == n or data[i + 1] in _WS_BYTES):
            raw.append((start, i + 1))
            start = None
    if start is not None:
        end = n
        while end > start and data[end - 1] in _WS_BYTES:
            end -= 1
        if end > start:
            raw.append((start, end))

    merged: list[tuple[int, int]] = []
    for lo, hi in raw:
        non_space = sum(1 for b in data[lo:hi] if b not in _WS_BYTES)
        if non_space < _MIN_SENTENCE_CHARS and merged:
            merged[-1] = (merged[-1][0], hi)
        else:
            merged.append((lo, hi))
    # a leading short fragment (nothing to merge backwards into) folds forward
    if len(merged) >= 2:
        lo, hi = merged[0]
        non_space = sum(1 for b in data[lo:hi] if b not in _WS_BYTES)
        if non_space < _MIN_SENTENCE_CHARS:
            merged[1] = (lo, merged[1][1])
            merged.pop(0)
    return merged


def span_text(text: str, span: tuple[int, int]) -> str:
    return text.encode("utf-8")[span[0]:span[1]].decode("utf-8")


@dataclass
class ReviewDoc:
    """One review: a user's text about an item, with precomputed sentence spans."""

    doc_id: str
    user_id: str
    item_id: str
    stars: int
    text: str
    sentence_spans: list[tuple[int, int]] = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if not self.text.strip():
            raise ValueError(f"review {self.doc_id}: empty text")
        if not 1 <= self.stars <= 5:
            raise ValueError(f"review {self.doc_id}: stars {self.stars} outside [1,5]")
        if self.sentence_spans is None:
            self.sentence_spans = sentence_spans(self.text)
        n = len(self.text.encode("utf-8"))
        prev_end = 0
        for lo, hi in self.sentence_spans:
            if not (prev_end <= lo < hi <= n):
                raise ValueError(f"review {self.doc_id}: bad sentence span ({lo},{hi})")
            prev_end = hi

    def sentences(self) -> list[str]:
        return [span_text(self.text, s) for s in self.sentence_spans]


@dataclass
class ItemRecord:
    item_id: str
    name: str
    city: str = ""
    categories: frozenset[str] = frozenset()
    snippet: str = ""

    def text(self) -> str:
        """Item text fed to encoders: name plus snippet."""
        return f"{self.name} {self.snippet}".strip()


@dataclass
class ReviewSet:
    """Reviews in file order plus a skip report for malformed input lines."""

    docs: list[ReviewDoc]
    skipped: int = 0
    skip_reasons: dict[str, int] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.docs)


@dataclass
class ItemCatalog:
    items: dict[str, ItemRecord]
    duplicates: int = 0
    skipped: int = 0

    def __len__(self) -> int:
        return len(self.items)

    def __getitem__(self, item_id: str) -> ItemRecord:
        return self.items[item_id]

    def records(self) -> list[ItemRecord]:
        return list(self.items.values())


@dataclass
class UserInteractionSet:
    """A user plus the review docs retained for them; avg_stars is the mean
    rating over the contained docs."""

    user_id: str
    docs: list[ReviewDoc]
    avg_stars: float

    def __post_init__(self):
        for d in self.docs:
            if d.user_id != self.user_id:
                raise ValueError(f"doc {d.doc_id} belongs to {d.user_id}, not {self.user_id}")
        if self.docs:
            mean = sum(d.stars for d in self.docs) / len(self.docs)
            if abs(mean - self.avg_stars) > 1e-9:
                raise ValueError(f"user {self.user_id}: avg_stars {self.avg_stars} != mean {mean}")


@dataclass
class EligibilityConfig:
    min_reviews_per_user: int = 10
    min_reviews_per_item: int = 10
    min_avg_stars: float = 3.0
    above_avg_range: tuple[int, int] = (10, 30)

    def __post_init__(self):
        lo, hi = self.above_avg_range
        if lo > hi:
            raise ValueError(f"above_avg_range lo {lo} > hi {hi}")
        if min(self.min_reviews_per_user, self.min_reviews_per_item, lo) < 0:
            raise ValueError("eligibility counts must be >= 0")


@dataclass
class DocSnippet:
    """One sentence drawn from one review, used as prompt material."""

    item_id: str
    sentence: str
    doc_id: str = ""


def _make_doc_id(user_id: str, item_id: str, occurrence: int) -> str:
    base = f"{user_id}|{item_id}"
    return base if occurrence == 0 else f"{base}#{occurrence}"


def load_reviews(path: str | Path) -> ReviewSet:
    """Read line-delimited JSON reviews; malformed lines are counted, not fatal."""
    docs: list[ReviewDoc] = []
    reasons: Counter = Counter()
    seen: Counter = Counter()
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError:
                reasons["bad_json"] += 1
                continue
            missing = [k for k in ("user_id", "item_id", "stars", "text") if k not in obj]
            if missing:
                reasons["missing_field"] += 1
                continue
            stars = obj["stars"]
            if not isinstance(stars, int) or not 1 <= stars <= 5:
                reasons["bad_stars"] += 1
                continue
            text = obj["text"]
            if not isinstance(text, str) or not text.strip():
                reasons["empty_text"] += 1
                continue
            key = (obj["user_id"], obj["item_id"])
            doc_id = _make_doc_id(obj["user_id"], obj["item_id"], seen[key])
            seen[key] += 1
            docs.append(ReviewDoc(doc_id=doc_id, user_id=obj["user_id"],
                                  item_id=obj["item_id"], stars=stars, text=text))
    skipped = sum(reasons.values())
    if skipped:
        log.info("load_reviews(%s): %d lines skipped (%s)", path, skipped, dict(reasons))
    return ReviewSet(docs=docs, skipped=skipped, skip_reasons=dict(reasons))


def load_items(path: str | Path) -> ItemCatalog:
    """Read the item catalog; duplicate item_id keeps the last record."""
    items: dict[str, ItemRecord] = {}
    duplicates = 0
    skipped = 0
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError:
                skipped += 1
                continue
            if "item_id" not in obj:
                skipped += 1
                continue
            item_id = obj["item_id"]
            if item_id in items:
                duplicates += 1
                log.warning("load_items: duplicate item_id %s, keeping last", item_id)
            items[item_id] = ItemRecord(
                item_id=item_id,
                name=obj.get("name", ""),
                city=obj.get("city", ""),
                categories=frozenset(obj.get("categories") or []),
                snippet=obj.get("snippet") or "",
            )
    return ItemCatalog(items=items, duplicates=duplicates, skipped=skipped)


def select_eligible_users(reviews: ReviewSet, cfg: EligibilityConfig) -> list[UserInteractionSet]:
    """Apply the eligibility pipeline: drop under-reviewed items, then
    under-reviewing users, then keep users whose full-history average rating
    clears the bar and whose above-average review count falls in the band.

    The emitted docs are only a user's above-average reviews (stars strictly
    greater than their average over ALL their input reviews), ordered by
    (item_id, input order).
    """
    full_by_user: dict[str, list[ReviewDoc]] = defaultdict(list)
    item_counts: Counter = Counter()
    for d in reviews.docs:
        full_by_user[d.user_id].append(d)
        item_counts[d.item_id] += 1

    remaining_by_user: dict[str, list[ReviewDoc]] = defaultdict(list)
    for d in reviews.docs:
        if item_counts[d.item_id] >= cfg.min_reviews_per_item:
            remaining_by_user[d.user_id].append(d)

    lo, hi = cfg.above_avg_range
    out: list[UserInteractionSet] = []
    for user_id in sorted(remaining_by_user):
        docs_u = remaining_by_user[user_id]
        if len(docs_u) < cfg.min_reviews_per_user:
            continue
        full = full_by_user[user_id]
        avg_full = sum(d.stars for d in full) / len(full)
        if not avg_full > cfg.min_avg_stars:
            continue
        above = [d for d in docs_u if d.stars > avg_full]
        if not above or not lo <= len(above) <= hi:
            continue
        above = sorted(above, key=lambda d: d.item_id)  # stable: input order breaks ties
        avg_docs = sum(d.stars for d in above) / len(above)
        out.append(UserInteractionSet(user_id=user_id, docs=above, avg_stars=avg_docs))
    return out


def longest_sentence(doc: ReviewDoc) -> str:
    """The longest sentence by byte length; earliest wins ties."""
    best_span = None
    best_len = -1
    for span in doc.sentence_spans:
        length = span[1] - span[0]
        if length > best_len:
            best_len = length
            best_span = span
    return span_text(doc.text, best_span)


def sample_prompt_docs(user: UserInteractionSet, n: int, seed: int) -> list[DocSnippet]:
    """Sample n distinct docs without replacement and take each doc's longest
    sentence. Deterministic for fixed (user, n, seed)."""
    if n > len(user.docs):
        raise ValueError(
            f"cannot sample {n} docs for user {user.user_id}: only {len(user.docs)} available")
    rng = random.Random(derive_seed(seed, "prompt-docs", user.user_id))
    indices = rng.sample(range(len(user.docs)), n)
    return [DocSnippet(item_id=user.docs[i].item_id,
                       sentence=longest_sentence(user.docs[i]),
                       doc_id=user.docs[i].doc_id)
            for i in indices]


# jsonl round-trip helpers used by the pipeline stages

def review_to_json(d: ReviewDoc) -> dict:
    return {"doc_id": d.doc_id, "user_id": d.user_id, "item_id": d.item_id,
            "stars": d.stars, "text": d.text}


def review_from_json(obj: dict) -> ReviewDoc:
    return ReviewDoc(doc_id=obj["doc_id"], user_id=obj["user_id"],
                     item_id=obj["item_id"], stars=obj["stars"], text=obj["text"])


def item_to_json(r: ItemRecord) -> dict:
    return {"item_id": r.item_id, "name": r.name, "city": r.city,
            "categories": sorted(r.categories), "snippet": r.snippet}


def user_to_json(u: UserInteractionSet) -> dict:
    return {"user_id": u.user_id, "avg_stars": u.avg_stars,
            "docs": [review_to_json(d) for d in u.docs]}


def user_from_json(obj: dict) -> UserInteractionSet:
    return UserInteractionSet(user_id=obj["user_id"],
                              docs=[review_from_json(d) for d in obj["docs"]],
                              avg_stars=obj["avg_stars"])
