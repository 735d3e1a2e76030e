"""End-to-end query pipeline: embed, retrieve, fetch cache entries, rerank,
select, and assemble the generation prompt.

``handle_query`` runs one query sequentially. ``run_workload`` pushes a
query stream through staged worker pools joined by bounded queues
(admission, retrieval, fetch workers, a rerank batch collector honoring
``max_batch``/``max_wait``, rerank workers, selection) and reports
throughput, per-stage latency percentiles, and aggregated work counters.
Scores are computed per pair regardless of batching, so results never
depend on worker counts, batch size, or timing; only the clock does.
"""

from __future__ import annotations

import json
import queue
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .codec import QuantScheme, decode_entry, encode_entry
from .corpus import CorpusDoc
from .errors import ConfigError
from .hashing import fnv1a64
from .index import Candidate, IvfIndex
from .reranker import (CounterReport, DocKV, LayoutConfig, RerankModel, ScoredPair,
                       doc_prefill, score_full, score_reuse, tokenize)
from .store import ShardedStore, shard_of

STAGES = ("retrieve", "fetch", "rerank", "select", "total")

_NO_RAG_TEMPLATE = (
    "<|begin_of_text|><|start_header_id|>system<|end_header_id|>\n"
    "\n"
    "Answer the question based on your own knowledge. Only give me the answer\n"
    "and do not output any other words.<|eot_id|><|start_header_id|>user<|end_header_id|>\n"
    "\n"
    "Question: {question}<|eot_id|><|start_header_id|>assistant<|end_header_id|>"
)

_RAG_PREFIX = (
    "<|begin_of_text|><|start_header_id|>system<|end_header_id|>\n"
    "\n"
    "Answer the question based on the given document. Only give me the answer\n"
    "and do not output any other words.\n"
    "The following are given documents.\n"
    "\n"
)

_RAG_SUFFIX = (
    "\n"
    "<|eot_id|><|start_header_id|>user<|end_header_id|>\n"
    "\n"
    "Question: {question}<|eot_id|><|start_header_id|>assistant<|end_header_id|>"
)


def embed_text(text: str, dim: int = 64) -> np.ndarray:
    """Feature-hash a text into a float32 vector, L2-normalized unless zero."""
    if dim < 1:
        raise ConfigError("embedding dim must be >= 1")
    vec = np.zeros(dim, dtype=np.float32)
    for word in text.split():
        h = fnv1a64(word)
        sign = np.float32(1.0) if (h >> 63) == 0 else np.float32(-1.0)
        vec[h % dim] += sign
    norm = np.float32(np.linalg.norm(vec))
    if norm != 0.0:
        vec /= norm
    return vec


def assemble_prompt(question: str, selected_docs: list[tuple[str, str, str]]) -> str:
    """Render the generation prompt for (id, title, text) docs in score order.

    With no documents the knowledge-only template is used instead.
    """
    if not selected_docs:
        return _NO_RAG_TEMPLATE.format(question=question)
    lines = "".join(f"Doc {doc_id} (Title: {title}) {text}\n"
                    for doc_id, title, text in selected_docs)
    return _RAG_PREFIX + lines + _RAG_SUFFIX.format(question=question)


@dataclass(frozen=True)
class PipelineConfig:
    retrieve_k: int = 20
    keep_m: int = 1
    nprobe: int = 4
    rerank_mode: str = "reuse"
    max_batch: int = 8
    max_wait: float = 0.010
    rerank_workers: int = 1
    fetch_workers: int = 1
    scheme: QuantScheme = QuantScheme.F32
    scoring_path: str = "fast"
    embed_dim: int = 64
    layout: LayoutConfig = field(default_factory=LayoutConfig)

    def validate(self) -> None:
        if self.retrieve_k < 1:
            raise ConfigError("retrieve_k must be >= 1")
        if not 1 <= self.keep_m <= self.retrieve_k:
            raise ConfigError("keep_m must be in [1, retrieve_k]")
        if self.nprobe < 1:
            raise ConfigError("nprobe must be >= 1")
        if self.rerank_mode not in ("full", "reuse"):
            raise ConfigError(f"unknown rerank_mode {self.rerank_mode!r}")
        if self.max_batch < 1 or self.rerank_workers < 1 or self.fetch_workers < 1:
            raise ConfigError("max_batch and worker counts must be >= 1")
        if self.max_wait < 0:
            raise ConfigError("max_wait must be >= 0")
        if self.scoring_path not in ("fast", "reference"):
            raise ConfigError(f"unknown scoring_path {self.scoring_path!r}")
        self.layout.validate()


@dataclass
class PipelineContext:
    model: RerankModel
    config: PipelineConfig
    index: IvfIndex
    store: ShardedStore
    docs: dict[str, CorpusDoc]
    doc_tokens: dict[str, np.ndarray]

    @classmethod
    def create(cls, model: RerankModel, config: PipelineConfig,
               docs: list[CorpusDoc], index: IvfIndex,
               store: ShardedStore) -> "PipelineContext":
        config.validate()
        if config.nprobe > index.nlist:
            raise ConfigError(f"nprobe {config.nprobe} exceeds nlist {index.nlist}")
        if config.layout != model.layout:
            raise ConfigError("pipeline layout must match the reranker layout")
        tokens = {d.id: tokenize(d.text, model.layout.document_len,
                                 vocab_size=model.config.vocab_size)
                  for d in docs}
        return cls(model=model, config=config, index=index, store=store,
                   docs={d.id: d for d in docs}, doc_tokens=tokens)


def build_index(docs: list[CorpusDoc], nlist: int, embed_dim: int = 64,
                seed: int = 0, iters: int = 10) -> IvfIndex:
    """Embed every doc and train/populate an IVF index over the corpus."""
    index = IvfIndex(dim=embed_dim, nlist=nlist)
    vectors = np.stack([embed_text(d.text, embed_dim) for d in docs])
    index.train(vectors, iters=iters, seed=seed)
    for doc, vec in zip(docs, vectors):
        index.add(doc.id, vec)
    return index


def populate_store(model: RerankModel, docs: list[CorpusDoc], index: IvfIndex,
                   store: ShardedStore, scheme: QuantScheme = QuantScheme.F32,
                   path: str = "fast",
                   on_entry=None) -> int:
    """Prefill, encode, and place every doc's cache entry; returns total bytes."""
    total = 0
    for doc in docs:
        tokens = tokenize(doc.text, model.layout.document_len,
                          vocab_size=model.config.vocab_size)
        kv = doc_prefill(model, tokens, chunk_id=doc.id, path=path)
        data = encode_entry(kv, scheme)
        store.put_entry(doc.id, index.centroid_of(doc.id), data)
        total += len(data)
        if on_entry is not None:
            on_entry(doc.id, len(data))
    return total


@dataclass
class RagResponse:
    query_id: str
    selected: list[ScoredPair]
    prompt: str
    timings: dict[str, float]
    counters: CounterReport
    bytes_fetched: int
    cache_misses: int
    shards_touched: int


@dataclass
class MetricsReport:
    queries: int
    wall_time_s: float
    throughput_qps: float
    stage_mean_ms: dict[str, float]
    stage_p50_ms: dict[str, float]
    stage_p95_ms: dict[str, float]
    counters: CounterReport
    bytes_fetched: int
    cache_misses: int
    shards_touched_hist: dict[int, int]

    CSV_COLUMNS = (
        ["queries", "wall_time_s", "throughput_qps"]
        + [f"{stage}_{p}_ms" for stage in STAGES for p in ("p50", "p95")]
        + ["linear_token_count", "attn_mac_pairs", "peak_activation_tokens",
           "kv_bytes_loaded", "bytes_fetched", "cache_misses",
           "shards_touched_max", "shards_touched_hist"]
    )

    def to_json_dict(self) -> dict:
        return {
            "queries": self.queries,
            "wall_time_s": self.wall_time_s,
            "throughput_qps": self.throughput_qps,
            "stage_mean_ms": self.stage_mean_ms,
            "stage_p50_ms": self.stage_p50_ms,
            "stage_p95_ms": self.stage_p95_ms,
            "counters": self.counters.as_dict(),
            "bytes_fetched": self.bytes_fetched,
            "cache_misses": self.cache_misses,
            "shards_touched_hist": {str(k): v for k, v in
                                    sorted(self.shards_touched_hist.items())},
        }

    def to_csv_row(self) -> list:
        hist = ";".join(f"{k}:{v}" for k, v in sorted(self.shards_touched_hist.items()))
        row = [self.queries, f"{self.wall_time_s:.6f}", f"{self.throughput_qps:.4f}"]
        for stage in STAGES:
            row.append(f"{self.stage_p50_ms[stage]:.4f}")
            row.append(f"{self.stage_p95_ms[stage]:.4f}")
        c = self.counters
        row += [c.linear_token_count, c.attn_mac_pairs, c.peak_activation_tokens,
                c.kv_bytes_loaded, self.bytes_fetched, self.cache_misses,
                max(self.shards_touched_hist, default=0), hist]
        return row


# ---------------------------------------------------------------------------
# stage logic shared by handle_query and the threaded pipeline


def _retrieve(ctx: PipelineContext, question: str) -> list[Candidate]:
    vec = embed_text(question, ctx.config.embed_dim)
    return ctx.index.search(vec, ctx.config.retrieve_k, ctx.config.nprobe)


@dataclass
class _PairItem:
    chunk_id: str
    doc: object  # DocKV (reuse) or token array (full)
    mode: str


def _fetch_items(ctx: PipelineContext, cands: list[Candidate]):
    """Produce per-candidate scoring inputs plus fetch accounting."""
    items: list[_PairItem] = []
    bytes_fetched = 0
    misses = 0
    shards: set[int] = set()
    for cand in cands:
        if ctx.config.rerank_mode == "reuse":
            data = ctx.store.get_entry(cand.chunk_id, cand.centroid_id)
            shards.add(shard_of(cand.centroid_id, ctx.store.num_shards))
            if data is None:
                misses += 1
                items.append(_PairItem(cand.chunk_id,
                                       ctx.doc_tokens[cand.chunk_id], "full"))
            else:
                bytes_fetched += len(data)
                items.append(_PairItem(cand.chunk_id, decode_entry(data), "reuse"))
        else:
            items.append(_PairItem(cand.chunk_id,
                                   ctx.doc_tokens[cand.chunk_id], "full"))
    return items, bytes_fetched, misses, shards


def _score_item(ctx: PipelineContext, item: _PairItem, query_tokens,
                query_id: str) -> tuple[ScoredPair, CounterReport]:
    if item.mode == "reuse":
        score, c = score_reuse(ctx.model, item.doc, query_tokens,
                               path=ctx.config.scoring_path)
    else:
        score, c = score_full(ctx.model, item.doc, query_tokens,
                              path=ctx.config.scoring_path)
    return ScoredPair(chunk_id=item.chunk_id, query_id=query_id, score=score), c


def _select(ctx: PipelineContext, scored: list[ScoredPair]) -> list[ScoredPair]:
    ranked = sorted(scored, key=lambda p: (-p.score, p.chunk_id))
    return ranked[:ctx.config.keep_m]


def _build_prompt(ctx: PipelineContext, question: str,
                  selected: list[ScoredPair]) -> str:
    docs = [(p.chunk_id, ctx.docs[p.chunk_id].title, ctx.docs[p.chunk_id].text)
            for p in selected]
    return assemble_prompt(question, docs)


def handle_query(ctx: PipelineContext, query_id: str, question: str) -> RagResponse:
    """Run one query through every stage sequentially."""
    t_start = time.perf_counter()
    cands = _retrieve(ctx, question)
    t_retr = time.perf_counter()

    items, bytes_fetched, misses, shards = _fetch_items(ctx, cands)
    t_fetch = time.perf_counter()

    query_tokens = tokenize(question, ctx.model.layout.query_len,
                            vocab_size=ctx.model.config.vocab_size)
    counters = CounterReport()
    scored = []
    for item in items:
        pair, c = _score_item(ctx, item, query_tokens, query_id)
        counters.merge(c)
        scored.append(pair)
    t_rerank = time.perf_counter()

    selected = _select(ctx, scored)
    prompt = _build_prompt(ctx, question, selected)
    t_end = time.perf_counter()

    return RagResponse(
        query_id=query_id, selected=selected, prompt=prompt,
        timings={"retrieve": t_retr - t_start, "fetch": t_fetch - t_retr,
                 "rerank": t_rerank - t_fetch, "select": t_end - t_rerank,
                 "total": t_end - t_start},
        counters=counters, bytes_fetched=bytes_fetched, cache_misses=misses,
        shards_touched=len(shards))


# ---------------------------------------------------------------------------
# staged execution


class _Job:
    __slots__ = ("query_id", "question", "t_admit", "t_retr", "t_fetch", "t_rerank",
                 "candidates", "items", "query_tokens", "bytes_fetched",
                 "cache_misses", "shards", "pending", "scored", "counters",
                 "response", "lock")

    def __init__(self, query_id: str, question: str):
        self.query_id = query_id
        self.question = question
        self.t_admit = time.perf_counter()
        self.scored: list[ScoredPair] = []
        self.counters = CounterReport()
        self.lock = threading.Lock()
        self.response: RagResponse | None = None


class _StagedRun:
    """One pass of a query list through the worker pools."""

    def __init__(self, ctx: PipelineContext):
        self.ctx = ctx
        self.q_retrieve: queue.Queue = queue.Queue(maxsize=64)
        self.q_fetch: queue.Queue = queue.Queue(maxsize=64)
        self.q_pairs: queue.Queue = queue.Queue(maxsize=256)
        self.q_batches: queue.Queue = queue.Queue(maxsize=32)
        self.done: queue.Queue = queue.Queue()
        self.errors: list[BaseException] = []
        self.error_lock = threading.Lock()
        self.threads: list[threading.Thread] = []

    def _guard(self, fn):
        def run():
            try:
                fn()
            except BaseException as e:  # propagate to the caller thread
                with self.error_lock:
                    self.errors.append(e)
        return run

    def execute(self, items: list[tuple[str, str]]) -> list[RagResponse]:
        cfg = self.ctx.config
        self._spawn(self._retrieval_worker)
        for _ in range(cfg.fetch_workers):
            self._spawn(self._fetch_worker)
        self._spawn(self._collector)
        for _ in range(cfg.rerank_workers):
            self._spawn(self._rerank_worker)

        jobs = []
        for query_id, question in items:
            job = _Job(query_id, question)
            jobs.append(job)
            self._put_checked(self.q_retrieve, job)
        self._put_checked(self.q_retrieve, None)

        responses = {}
        for _ in jobs:
            while True:
                try:
                    job = self.done.get(timeout=0.5)
                    break
                except queue.Empty:
                    self._check_errors()
            responses[job.query_id] = job.response
        for t in self.threads:
            t.join(timeout=10)
        self._check_errors()
        return [responses[qid] for qid, _ in items]

    def _check_errors(self):
        with self.error_lock:
            if self.errors:
                raise self.errors[0]

    def _put_checked(self, q: queue.Queue, item):
        while True:
            try:
                q.put(item, timeout=0.5)
                return
            except queue.Full:
                self._check_errors()

    def _spawn(self, fn):
        t = threading.Thread(target=self._guard(fn), daemon=True)
        t.start()
        self.threads.append(t)

    def _retrieval_worker(self):
        cfg = self.ctx.config
        while True:
            job = self.q_retrieve.get()
            if job is None:
                for _ in range(cfg.fetch_workers):
                    self.q_fetch.put(None)
                return
            job.candidates = _retrieve(self.ctx, job.question)
            job.query_tokens = tokenize(job.question, self.ctx.model.layout.query_len,
                                        vocab_size=self.ctx.model.config.vocab_size)
            job.t_retr = time.perf_counter()
            self.q_fetch.put(job)

    def _fetch_worker(self):
        while True:
            job = self.q_fetch.get()
            if job is None:
                self.q_pairs.put(None)
                return
            items, bytes_fetched, misses, shards = _fetch_items(self.ctx, job.candidates)
            job.items = items
            job.bytes_fetched = bytes_fetched
            job.cache_misses = misses
            job.shards = shards
            job.pending = len(items)
            job.t_fetch = time.perf_counter()
            if not items:
                self._finalize(job)
                continue
            for item in items:
                self.q_pairs.put((job, item))

    def _collector(self):
        """Group pair units into batches of <= max_batch within max_wait."""
        cfg = self.ctx.config
        sentinels_left = cfg.fetch_workers
        while True:
            unit = self.q_pairs.get()
            if unit is None:
                sentinels_left -= 1
                if sentinels_left == 0:
                    for _ in range(cfg.rerank_workers):
                        self.q_batches.put(None)
                    return
                continue
            batch = [unit]
            deadline = time.perf_counter() + cfg.max_wait
            while len(batch) < cfg.max_batch:
                remaining = deadline - time.perf_counter()
                if remaining <= 0:
                    break
                try:
                    unit = self.q_pairs.get(timeout=remaining)
                except queue.Empty:
                    break
                if unit is None:
                    sentinels_left -= 1
                    if sentinels_left == 0:
                        break
                    continue
                batch.append(unit)
            self.q_batches.put(batch)
            if sentinels_left == 0:
                for _ in range(cfg.rerank_workers):
                    self.q_batches.put(None)
                return

    def _rerank_worker(self):
        while True:
            batch = self.q_batches.get()
            if batch is None:
                return
            for job, item in batch:
                pair, counters = _score_item(self.ctx, item, job.query_tokens,
                                             job.query_id)
                with job.lock:
                    job.scored.append(pair)
                    job.counters.merge(counters)
                    job.pending -= 1
                    last = job.pending == 0
                if last:
                    job.t_rerank = time.perf_counter()
                    self._finalize(job)

    def _finalize(self, job: _Job):
        t_rerank = getattr(job, "t_rerank", job.t_fetch)
        selected = _select(self.ctx, job.scored)
        prompt = _build_prompt(self.ctx, job.question, selected)
        t_end = time.perf_counter()
        job.response = RagResponse(
            query_id=job.query_id, selected=selected, prompt=prompt,
            timings={"retrieve": job.t_retr - job.t_admit,
                     "fetch": job.t_fetch - job.t_retr,
                     "rerank": t_rerank - job.t_fetch,
                     "select": t_end - t_rerank,
                     "total": t_end - job.t_admit},
            counters=job.counters, bytes_fetched=job.bytes_fetched,
            cache_misses=job.cache_misses, shards_touched=len(job.shards))
        self.done.put(job)


def execute_staged(ctx: PipelineContext,
                   queries: list[tuple[str, str]]) -> list[RagResponse]:
    """Run (query_id, question) pairs through the worker pools; responses in
    input order."""
    if not queries:
        raise ConfigError("workload is empty")
    return _StagedRun(ctx).execute(queries)


def run_workload(ctx: PipelineContext, queries: list[tuple[str, str]],
                 warmup: int = 0) -> MetricsReport:
    """Run (query_id, question) pairs through the staged pipeline.

    The first `warmup` queries execute through the same machinery but are
    excluded from the report; the wall clock covers only the measured span.
    """
    if not queries:
        raise ConfigError("workload is empty")
    if not 0 <= warmup < len(queries):
        raise ConfigError("warmup must be smaller than the workload")

    if warmup:
        execute_staged(ctx, queries[:warmup])

    measured = queries[warmup:]
    t0 = time.perf_counter()
    responses = execute_staged(ctx, measured)
    wall = time.perf_counter() - t0
    return summarize(responses, wall)


def summarize(responses: list[RagResponse], wall_time_s: float) -> MetricsReport:
    counters = CounterReport()
    hist: dict[int, int] = {}
    bytes_fetched = 0
    misses = 0
    stage_times = {stage: [] for stage in STAGES}
    for r in responses:
        counters.merge(r.counters)
        bytes_fetched += r.bytes_fetched
        misses += r.cache_misses
        hist[r.shards_touched] = hist.get(r.shards_touched, 0) + 1
        for stage in STAGES:
            stage_times[stage].append(r.timings[stage])
    mean = {s: float(np.mean(v) * 1000) for s, v in stage_times.items()}
    p50 = {s: float(np.percentile(v, 50) * 1000) for s, v in stage_times.items()}
    p95 = {s: float(np.percentile(v, 95) * 1000) for s, v in stage_times.items()}
    return MetricsReport(
        queries=len(responses), wall_time_s=wall_time_s,
        throughput_qps=len(responses) / wall_time_s if wall_time_s > 0 else 0.0,
        stage_mean_ms=mean, stage_p50_ms=p50, stage_p95_ms=p95, counters=counters,
        bytes_fetched=bytes_fetched, cache_misses=misses, shards_touched_hist=hist)


def response_to_json(resp: RagResponse) -> str:
    return json.dumps({
        "query_id": resp.query_id,
        "selected": [{"chunk_id": p.chunk_id, "score": p.score} for p in resp.selected],
        "prompt": resp.prompt,
        "timings_ms": {k: v * 1000 for k, v in resp.timings.items()},
        "counters": resp.counters.as_dict(),
        "bytes_fetched": resp.bytes_fetched,
        "cache_misses": resp.cache_misses,
        "shards_touched": resp.shards_touched,
    }, indent=2, sort_keys=True)
