"""Few-shot prompt assembly and synthetic narrative-query generation.

A Provider is anything with a `complete(prompt) -> ProviderResponse` method.
The HTTP provider speaks a minimal JSON wire contract; the stub provider is a
deterministic offline stand-in that turns the salient terms of the target
snippets into a first-person recommendation request, passing each term through
a configurable synonym table. Generation runs with bounded parallelism, a
token-bucket rate limiter, retries with jittered exponential backoff, and
token accounting.
"""

from __future__ import annotations

import json
import logging
import os
import random
import re
import threading
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol

from .corpus import ReviewDoc, UserInteractionSet, longest_sentence, sample_prompt_docs
from .encoder import split_terms
from .util import derive_seed, stable_u64

log = logging.getLogger(__name__)

API_KEY_ENV = "NDR_LLM_API_KEY"
GROUNDED_LIST_MARKER = "Items:"

STOPWORDS = frozenset("""
a about after all also am an and any are as at be because been before being but
by can could did do does for from get got had has have he her here hers him his
how i if in into is it its just like me more most my no nor not of off on once
only or other our out over own she so some such than that the their them then
there these they this those through to too under until up very was we were what
when where which while who why will with would you your yours
""".split())


@dataclass
class PromptTemplate:
    """Instruction plus exactly three few-shot (snippets, query) examples."""

    instruction: str
    fewshot_examples: list[tuple[list[str], str]]
    item_prefix: str = "Review:"
    query_prefix: str = "Request:"

    def __post_init__(self):
        if len(self.fewshot_examples) != 3:
            raise ValueError(f"expected exactly 3 few-shot examples, got {len(self.fewshot_examples)}")


@dataclass
class SyntheticQuery:
    query_id: str
    user_id: str
    text: str
    provider_id: str
    prompt_hash: int
    prompt_tokens: int
    completion_tokens: int

    def __post_init__(self):
        if not self.text.strip():
            raise ValueError(f"query {self.query_id}: empty text")
        if "\n\n" in self.text:
            raise ValueError(f"query {self.query_id}: text must be a single paragraph")
        if self.prompt_tokens < 0 or self.completion_tokens < 0:
            raise ValueError(f"query {self.query_id}: negative token counts")


@dataclass
class ProviderConfig:
    endpoint: str = ""
    model_name: str = "stub"
    max_in_flight: int = 4
    requests_per_minute: float = 600.0
    max_retries: int = 3
    timeout_s: float = 30.0
    temperature: float = 0.7
    max_completion_tokens: int = 300

    def __post_init__(self):
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")
        if self.requests_per_minute <= 0:
            raise ValueError("requests_per_minute must be > 0")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")


@dataclass
class ProviderResponse:
    text: str
    prompt_tokens: int
    completion_tokens: int


class ProviderError(Exception):
    """Raised by providers for retryable failures."""


class Provider(Protocol):
    provider_id: str

    def complete(self, prompt: str) -> ProviderResponse: ...


def build_prompt(template: PromptTemplate, snippets: list[str]) -> str:
    """Render instruction, the three few-shot blocks, then the target block
    ending with a trailing query prefix. Byte-identical for identical inputs."""
    if not snippets:
        raise ValueError("snippets must be non-empty")
    for s in snippets:
        if not s.strip():
            raise ValueError("empty snippet string")
    blocks = [template.instruction]
    for ex_snippets, ex_query in template.fewshot_examples:
        lines = [f"{template.item_prefix} {s}" for s in ex_snippets]
        lines.append(f"{template.query_prefix} {ex_query}")
        blocks.append("\n".join(lines))
    target = [f"{template.item_prefix} {s}" for s in snippets]
    target.append(template.query_prefix)
    blocks.append("\n".join(target))
    return "\n\n".join(blocks)


def prompt_hash64(prompt: str) -> int:
    return stable_u64("prompt", prompt)


def _count_tokens(text: str) -> int:
    return len(text.split())


# ---------------------------------------------------------------------------
# deterministic stub provider
# ---------------------------------------------------------------------------

_OPENERS = [
    "I am planning a trip soon and would love recommendations that really fit my tastes.",
    "I could use some suggestions for places that match what I usually enjoy.",
    "Looking ahead to my next outing, I want somewhere tailored to my preferences.",
]

_TERM_SENTENCES = [
    "I am hoping to find somewhere known for {}.",
    "Last time out I really enjoyed {} and want more of the same.",
    "It would be wonderful if the place offered {}.",
    "I tend to seek out {} wherever I go.",
    "My ideal spot definitely features {}.",
    "Friends know me as someone who appreciates {}.",
]

_FILLERS = [
    "Somewhere welcoming without being too crowded would suit me best.",
    "I am happy to travel a little for the right atmosphere.",
    "A relaxed pace matters more to me than anything fancy.",
    "I would rather skip anywhere that feels generic or rushed.",
    "Budget is flexible as long as the experience feels genuine.",
    "Any hidden gems that locals rely on would be perfect.",
]


def extract_salient_terms(snippet: str, k: int = 3) -> list[str]:
    """Top-k content terms of one snippet: stopwords removed, ranked by
    frequency, then length, then alphabetically."""
    terms = [t for t in split_terms(snippet) if t not in STOPWORDS and len(t) >= 3]
    counts = Counter(terms)
    ranked = sorted(counts, key=lambda t: (-counts[t], -len(t), t))
    return ranked[:k]


def stub_generate(snippets: list[str], seed: int, synonyms: dict[str, str] | None = None,
                  terms_per_snippet: int = 3) -> str:
    """Compose a deterministic 60-200 word first-person request from the
    snippets' salient terms, mapped through the synonym table."""
    if not snippets:
        raise ValueError("snippets must be non-empty")
    synonyms = synonyms or {}
    extracted: list[str] = []
    for s in snippets:
        extracted.extend(extract_salient_terms(s, terms_per_snippet))
    mapped = [synonyms.get(t, t) for t in extracted]
    topics = sorted(set(mapped))

    rng = random.Random(seed)
    sentences = [rng.choice(_OPENERS)]
    for i in range(0, len(topics), 2):
        group = topics[i:i + 2]
        tmpl = _TERM_SENTENCES[(i // 2) % len(_TERM_SENTENCES)]
        sentences.append(tmpl.format(" and ".join(group)))
        if _word_count(sentences) >= 190:
            break
    fillers = list(_FILLERS)
    rng.shuffle(fillers)
    while _word_count(sentences) < 60 and fillers:
        sentences.append(fillers.pop())
    while _word_count(sentences) < 60:
        sentences.append("Anything that fits this overall picture would make me happy.")
        if len(sentences) > 40:
            break
    text = " ".join(sentences)
    words = text.split()
    if len(words) > 200:
        text = " ".join(words[:200]).rstrip(",;") + "."
    return text


def _word_count(sentences: list[str]) -> int:
    return sum(len(s.split()) for s in sentences)


def _pseudo_item_names(query: str, n_items: int, synonyms: dict[str, str]) -> list[str]:
    terms = extract_salient_terms(query, k=max(n_items, 4))
    mapped = [synonyms.get(t, t) for t in terms] or ["local"]
    shapes = ["The {} Place", "{} Corner", "{} House", "The {} Room", "{} & Co"]
    names = []
    for i in range(n_items):
        term = mapped[i % len(mapped)]
        names.append(shapes[i % len(shapes)].format(term.title()))
    return names


@dataclass
class StubProvider:
    """Offline deterministic stand-in for an LLM endpoint.

    Parses the target block out of prompts built by build_prompt (it is
    configured with the same prefixes as the template) and runs stub_generate;
    prompts ending with the grounded list marker get a numbered pseudo-item
    list instead.
    """

    synonyms: dict[str, str] = field(default_factory=dict)
    seed: int = 0
    item_prefix: str = "Review:"
    query_prefix: str = "Request:"
    terms_per_snippet: int = 3
    provider_id: str = "stub"

    def _target_snippets(self, prompt: str) -> list[str]:
        tail = prompt.rsplit("\n\n", 1)[-1]
        snippets = [line[len(self.item_prefix):].strip()
                    for line in tail.splitlines()
                    if line.startswith(self.item_prefix)]
        return snippets or [prompt]

    def _generate(self, prompt: str) -> str:
        if prompt.rstrip().endswith(GROUNDED_LIST_MARKER):
            query = _grounded_target_query(prompt, self.query_prefix)
            names = _pseudo_item_names(query, 10, self.synonyms)
            return "\n".join(f"{i + 1}. {name}" for i, name in enumerate(names))
        snippets = self._target_snippets(prompt)
        return stub_generate(snippets, derive_seed(self.seed, "stub", prompt),
                             self.synonyms, self.terms_per_snippet)

    def complete(self, prompt: str) -> ProviderResponse:
        text = self._generate(prompt)
        return ProviderResponse(text=text, prompt_tokens=_count_tokens(prompt),
                                completion_tokens=_count_tokens(text))


@dataclass
class WeakStubProvider(StubProvider):
    """Degraded stub emulating a weaker generator: fewer terms, unreliable
    synonym mapping, truncated output."""

    terms_per_snippet: int = 1
    map_probability: float = 0.5
    max_words: int = 30
    provider_id: str = "weak-stub"

    def _generate(self, prompt: str) -> str:
        if prompt.rstrip().endswith(GROUNDED_LIST_MARKER):
            return super()._generate(prompt)
        snippets = self._target_snippets(prompt)
        rng = random.Random(derive_seed(self.seed, "weak", prompt))
        noisy = {t: (p if rng.random() < self.map_probability else t)
                 for t, p in self.synonyms.items()}
        text = stub_generate(snippets, derive_seed(self.seed, "stub", prompt),
                             noisy, self.terms_per_snippet)
        return " ".join(text.split()[:self.max_words])


def _grounded_target_query(prompt: str, query_prefix: str) -> str:
    lines = [l for l in prompt.splitlines() if l.startswith(query_prefix)]
    return lines[-1][len(query_prefix):].strip() if lines else prompt


class HttpProvider:
    """JSON-over-HTTP provider. POSTs {"model", "prompt", "temperature",
    "max_tokens"} and expects {"text", "prompt_tokens", "completion_tokens"}.
    The API key is read from the NDR_LLM_API_KEY environment variable only."""

    def __init__(self, cfg: ProviderConfig):
        import requests  # deferred: offline paths never import it

        self._requests = requests
        self.cfg = cfg
        self.provider_id = f"http:{cfg.model_name}"

    def complete(self, prompt: str) -> ProviderResponse:
        headers = {"Content-Type": "application/json"}
        api_key = os.environ.get(API_KEY_ENV, "")
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        payload = {"model": self.cfg.model_name, "prompt": prompt,
                   "temperature": self.cfg.temperature,
                   "max_tokens": self.cfg.max_completion_tokens}
        try:
            resp = self._requests.post(self.cfg.endpoint, json=payload,
                                       headers=headers, timeout=self.cfg.timeout_s)
        except Exception as exc:  # connection errors, timeouts
            raise ProviderError(str(exc)) from exc
        if resp.status_code != 200:
            raise ProviderError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            body = resp.json()
            return ProviderResponse(text=body["text"],
                                    prompt_tokens=int(body["prompt_tokens"]),
                                    completion_tokens=int(body["completion_tokens"]))
        except (ValueError, KeyError, TypeError) as exc:
            raise ProviderError(f"malformed provider response: {exc}") from exc


# ---------------------------------------------------------------------------
# rate limiting and orchestration
# ---------------------------------------------------------------------------

class RateLimiter:
    """Token bucket holding at most one request token; serializes dispatch to
    the configured requests-per-minute budget. Clock and sleep are injectable
    for testing."""

    def __init__(self, requests_per_minute: float,
                 clock: Callable[[], float] = time.monotonic,
                 sleep: Callable[[float], None] = time.sleep):
        self.rate = requests_per_minute / 60.0
        self.clock = clock
        self.sleep = sleep
        self._lock = threading.Lock()
        self._tokens = 1.0
        self._last = None

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = self.clock()
                if self._last is None:
                    self._last = now
                self._tokens = min(1.0, self._tokens + (now - self._last) * self.rate)
                self._last = now
                if self._tokens >= 1.0:
                    self._tokens -= 1.0
                    return
                wait = (1.0 - self._tokens) / self.rate
            self.sleep(wait)


@dataclass
class GenerationResult:
    queries: list[SyntheticQuery]
    failures: list[tuple[str, str]]  # (user_id, cause)
    retries: dict[str, int]
    prompt_tokens_total: int = 0
    completion_tokens_total: int = 0


def _attempt_with_retries(provider: Provider, prompt: str, cfg: ProviderConfig,
                          limiter: RateLimiter, rng: random.Random,
                          sleep: Callable[[float], None]) -> tuple[ProviderResponse, int]:
    last_error = None
    for attempt in range(cfg.max_retries + 1):
        limiter.acquire()
        try:
            return provider.complete(prompt), attempt
        except ProviderError as exc:
            last_error = exc
            if attempt < cfg.max_retries:
                backoff = (2 ** attempt) * (0.8 + 0.4 * rng.random())  # base 1 s, +-20% jitter
                sleep(backoff)
    raise ProviderError(str(last_error))


def _normalize_paragraph(text: str) -> str:
    return " ".join(text.split())


def _run_generation(jobs: list[tuple[str, str, str]], provider: Provider,
                    cfg: ProviderConfig, seed: int,
                    clock: Callable[[], float], sleep: Callable[[float], None]
                    ) -> GenerationResult:
    """jobs: (query_id, user_id, prompt). Bounded-parallel provider calls,
    results re-ordered to job order."""
    limiter = RateLimiter(cfg.requests_per_minute, clock=clock, sleep=sleep)

    def work(job):
        query_id, user_id, prompt = job
        rng = random.Random(derive_seed(seed, "retry", query_id))
        response, attempts = _attempt_with_retries(provider, prompt, cfg, limiter, rng, sleep)
        text = _normalize_paragraph(response.text)
        if not text:
            raise ProviderError("provider returned empty text")
        query = SyntheticQuery(query_id=query_id, user_id=user_id, text=text,
                               provider_id=provider.provider_id,
                               prompt_hash=prompt_hash64(prompt),
                               prompt_tokens=response.prompt_tokens,
                               completion_tokens=response.completion_tokens)
        return query, attempts

    result = GenerationResult(queries=[], failures=[], retries={})
    with ThreadPoolExecutor(max_workers=cfg.max_in_flight) as pool:
        futures = [pool.submit(work, job) for job in jobs]
        for job, fut in zip(jobs, futures):
            query_id, user_id, _ = job
            try:
                query, attempts = fut.result()
            except ProviderError as exc:
                log.warning("generation failed for user %s: %s", user_id, exc)
                result.failures.append((user_id, str(exc)))
                continue
            result.queries.append(query)
            result.retries[query.query_id] = attempts
            result.prompt_tokens_total += query.prompt_tokens
            result.completion_tokens_total += query.completion_tokens
    return result


def generate_queries(users: list[UserInteractionSet], template: PromptTemplate,
                     provider: Provider, n_snippets: int, seed: int,
                     cfg: ProviderConfig | None = None,
                     clock: Callable[[], float] = time.monotonic,
                     sleep: Callable[[float], None] = time.sleep) -> GenerationResult:
    """One synthetic narrative query per user. Users for whom the provider
    fails past the retry budget are logged and omitted; output order matches
    input user order."""
    cfg = cfg or ProviderConfig()
    jobs = []
    for user in users:
        snippets = [" ".join(s.sentence.split())
                    for s in sample_prompt_docs(user, n_snippets, seed)]
        prompt = build_prompt(template, snippets)
        jobs.append((f"synth-{user.user_id}", user.user_id, prompt))
    return _run_generation(jobs, provider, cfg, seed, clock, sleep)


def generate_item_queries(docs: list[ReviewDoc], template: PromptTemplate,
                          provider: Provider, seed: int = 0,
                          cfg: ProviderConfig | None = None,
                          clock: Callable[[], float] = time.monotonic,
                          sleep: Callable[[float], None] = time.sleep) -> GenerationResult:
    """One query per document, conditioning on that single item's text."""
    if not docs:
        raise ValueError("docs must be non-empty")
    cfg = cfg or ProviderConfig()
    jobs = []
    for doc in docs:
        prompt = build_prompt(template, [" ".join(doc.text.split())])
        jobs.append((f"synth-item-{doc.doc_id}", doc.user_id, prompt))
    return _run_generation(jobs, provider, cfg, seed, clock, sleep)


_NUMBERED_LINE = re.compile(r"^\s*\d+[.)]\s*(.+?)\s*$")


def grounded_prompt(query: str, template: PromptTemplate, n_items: int) -> str:
    """One-shot prompt asking for a numbered list of pseudo-relevant items."""
    ex_snippets, ex_query = template.fewshot_examples[0]
    example_items = "\n".join(
        f"{i + 1}. {(extract_salient_terms(s, 1) or ['local'])[0].title()} Spot"
        for i, s in enumerate(ex_snippets[:3]))
    return (f"List {n_items} real-sounding items that would satisfy the request.\n\n"
            f"{template.query_prefix} {ex_query}\n{GROUNDED_LIST_MARKER}\n{example_items}\n\n"
            f"{template.query_prefix} {query}\n{GROUNDED_LIST_MARKER}")


def grounded_llm_generate(query: str, provider: Provider, n_items: int = 10,
                          template: PromptTemplate | None = None) -> list[str]:
    """Ask the provider for pseudo-relevant item names; parse the numbered
    list out of one completion. Unparseable output yields an empty list."""
    if not query.strip():
        raise ValueError("query must be non-empty")
    template = template or default_template()
    response = provider.complete(grounded_prompt(query, template, n_items))
    names = []
    for line in response.text.splitlines():
        m = _NUMBERED_LINE.match(line)
        if m:
            names.append(m.group(1))
        if len(names) == n_items:
            break
    if not names:
        log.warning("grounded generation: no numbered list found in completion")
    return names


# ---------------------------------------------------------------------------
# template files
# ---------------------------------------------------------------------------

_SECTION_RE = re.compile(r"^\[(INSTRUCTION|EXAMPLE_[123]|PREFIXES)\]\s*$")


def load_template(path: str | Path) -> PromptTemplate:
    """Parse a template file with sections INSTRUCTION, EXAMPLE_1..3, PREFIXES."""
    sections: dict[str, list[str]] = {}
    current = None
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.startswith("#"):
            continue
        m = _SECTION_RE.match(line)
        if m:
            current = m.group(1)
            sections[current] = []
            continue
        if current is not None:
            sections[current].append(line)

    prefixes = {"item_prefix": "Review:", "query_prefix": "Request:"}
    for line in sections.get("PREFIXES", []):
        if "=" in line:
            key, value = line.split("=", 1)
            prefixes[key.strip()] = value.strip()
    item_prefix, query_prefix = prefixes["item_prefix"], prefixes["query_prefix"]

    examples = []
    for name in ("EXAMPLE_1", "EXAMPLE_2", "EXAMPLE_3"):
        if name not in sections:
            raise ValueError(f"template {path}: missing section {name}")
        snippets, query_parts = [], []
        for line in sections[name]:
            if line.startswith(item_prefix):
                snippets.append(line[len(item_prefix):].strip())
            elif line.startswith(query_prefix):
                query_parts.append(line[len(query_prefix):].strip())
            elif line.strip() and query_parts:
                query_parts.append(line.strip())
        if not snippets or not query_parts:
            raise ValueError(f"template {path}: section {name} needs snippets and a query")
        examples.append((snippets, " ".join(query_parts)))

    instruction = "\n".join(sections.get("INSTRUCTION", [])).strip()
    if not instruction:
        raise ValueError(f"template {path}: missing INSTRUCTION")
    return PromptTemplate(instruction=instruction, fewshot_examples=examples,
                          item_prefix=item_prefix, query_prefix=query_prefix)


def default_template_path() -> Path:
    return Path(__file__).parent / "data" / "template_v1.txt"


def default_template() -> PromptTemplate:
    return load_template(default_template_path())


def default_synonyms() -> dict[str, str]:
    path = Path(__file__).parent / "data" / "synonyms_default.json"
    return json.loads(path.read_text(encoding="utf-8"))
