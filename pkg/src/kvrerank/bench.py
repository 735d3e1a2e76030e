"""Benchmark sweeps over document length, batch size, and rerank mode.

Each sweep point runs the same workload through the staged pipeline in both
modes and emits one row combining wall-clock measurements (noisy) with
counter-derived ratios (exact integers), so trend claims can be checked
against either view. Reports are written as CSV and JSON; the report path
also renders the headline figures as PNG files next to the delimited output.
"""

from __future__ import annotations

import csv
import json
import statistics
from dataclasses import dataclass, field, replace
from pathlib import Path

from .codec import QuantScheme
from .corpus import CorpusDoc
from .errors import ConfigError
from .index import IvfIndex
from .pipeline import (MetricsReport, PipelineConfig, PipelineContext, build_index,
                       populate_store, run_workload)
from .reranker import LayoutConfig, RerankModel
from .model import ModelConfig
from .store import ShardedStore

BENCH_CSV_COLUMNS = [
    "document_len", "query_len", "batch", "mode", "repetitions", "queries",
    "throughput_qps", "mean_latency_ms", "p50_latency_ms", "p95_latency_ms",
    "linear_token_count", "attn_mac_pairs", "peak_activation_tokens",
    "kv_bytes_loaded", "bytes_fetched", "cache_misses",
    "linear_token_ratio", "attn_mac_ratio", "peak_activation_ratio",
]


@dataclass(frozen=True)
class BenchSpec:
    document_lens: tuple[int, ...] = (64, 128, 256, 512)
    query_len: int = 48
    batch_sizes: tuple[int, ...] = (1, 8, 32)
    modes: tuple[str, ...] = ("full", "reuse")
    repetitions: int = 3
    seed: int = 0

    def validate(self) -> None:
        if not self.document_lens or not self.batch_sizes or not self.modes:
            raise ConfigError("bench sweeps must be non-empty")
        if self.repetitions < 1:
            raise ConfigError("repetitions must be >= 1")
        for mode in self.modes:
            if mode not in ("full", "reuse"):
                raise ConfigError(f"unknown mode {mode!r}")


@dataclass
class BenchRow:
    document_len: int
    query_len: int
    batch: int
    mode: str
    repetitions: int
    report: MetricsReport
    mean_latency_ms: float
    ratios: dict[str, float] = field(default_factory=dict)

    def to_csv_row(self) -> list:
        r = self.report
        return [
            self.document_len, self.query_len, self.batch, self.mode,
            self.repetitions, r.queries, f"{r.throughput_qps:.4f}",
            f"{self.mean_latency_ms:.4f}", f"{r.stage_p50_ms['total']:.4f}",
            f"{r.stage_p95_ms['total']:.4f}",
            r.counters.linear_token_count, r.counters.attn_mac_pairs,
            r.counters.peak_activation_tokens, r.counters.kv_bytes_loaded,
            r.bytes_fetched, r.cache_misses,
            _fmt_ratio(self.ratios.get("linear_token_ratio")),
            _fmt_ratio(self.ratios.get("attn_mac_ratio")),
            _fmt_ratio(self.ratios.get("peak_activation_ratio")),
        ]

    def to_json_dict(self) -> dict:
        return {
            "document_len": self.document_len, "query_len": self.query_len,
            "batch": self.batch, "mode": self.mode,
            "repetitions": self.repetitions,
            "mean_latency_ms": self.mean_latency_ms,
            "ratios": self.ratios,
            "report": self.report.to_json_dict(),
        }


def _fmt_ratio(value) -> str:
    return "" if value is None else repr(value)


def run_bench(model_config: ModelConfig, docs: list[CorpusDoc],
              queries: list[tuple[str, str]], spec: BenchSpec,
              base_config: PipelineConfig | None = None,
              warmup: int | None = None,
              num_shards: int = 2, nlist: int = 16,
              scheme: QuantScheme = QuantScheme.F32) -> list[BenchRow]:
    """Execute the sweep on in-memory stores built per document length."""
    spec.validate()
    base_config = base_config or PipelineConfig(retrieve_k=8, nprobe=4,
                                                rerank_workers=2)
    if warmup is None:
        warmup = max(1, min(8, len(queries) // 10))
    index = None
    rows: list[BenchRow] = []
    for document_len in spec.document_lens:
        layout = LayoutConfig(document_len=document_len, query_len=spec.query_len)
        model = RerankModel.build(model_config, layout)
        if index is None:
            index = build_index(docs, nlist=nlist, embed_dim=base_config.embed_dim,
                                seed=spec.seed)
        store = ShardedStore.in_memory(num_shards)
        populate_store(model, docs, index, store, scheme=scheme)
        for batch in spec.batch_sizes:
            for mode in spec.modes:
                config = replace(base_config, rerank_mode=mode, max_batch=batch,
                                 scheme=scheme, layout=layout)
                ctx = PipelineContext.create(model, config, docs, index, store)
                reps = [run_workload(ctx, queries, warmup=warmup)
                        for _ in range(spec.repetitions)]
                rows.append(_median_row(document_len, spec.query_len, batch, mode,
                                        reps))
    _attach_ratios(rows)
    return rows


def _median_row(document_len: int, query_len: int, batch: int, mode: str,
                reps: list[MetricsReport]) -> BenchRow:
    by_thr = sorted(reps, key=lambda r: r.throughput_qps)
    median = by_thr[len(by_thr) // 2]
    mean_latency = statistics.median([_mean_total_latency(r) for r in reps])
    return BenchRow(document_len=document_len, query_len=query_len, batch=batch,
                    mode=mode, repetitions=len(reps), report=median,
                    mean_latency_ms=mean_latency)


def _mean_total_latency(report: MetricsReport) -> float:
    return report.stage_mean_ms["total"]


def _attach_ratios(rows: list[BenchRow]) -> None:
    full = {(r.document_len, r.batch): r for r in rows if r.mode == "full"}
    for row in rows:
        if row.mode != "reuse":
            continue
        twin = full.get((row.document_len, row.batch))
        if twin is None:
            continue
        fc, rc = twin.report.counters, row.report.counters
        if fc.linear_token_count:
            row.ratios["linear_token_ratio"] = rc.linear_token_count / fc.linear_token_count
        if fc.attn_mac_pairs:
            row.ratios["attn_mac_ratio"] = rc.attn_mac_pairs / fc.attn_mac_pairs
        if fc.peak_activation_tokens:
            row.ratios["peak_activation_ratio"] = (rc.peak_activation_tokens
                                                   / fc.peak_activation_tokens)


def write_reports(rows: list[BenchRow], out_dir: str | Path,
                  figures: bool = True) -> dict[str, Path]:
    """Write bench.csv, bench.json, and (optionally) the PNG figures."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}

    csv_path = out_dir / "bench.csv"
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(BENCH_CSV_COLUMNS)
        for row in rows:
            writer.writerow(row.to_csv_row())
    paths["csv"] = csv_path

    json_path = out_dir / "bench.json"
    with open(json_path, "w") as f:
        json.dump([row.to_json_dict() for row in rows], f, indent=2, sort_keys=True)
    paths["json"] = json_path

    if figures:
        from .figures import plot_latency_vs_doclen, plot_throughput_vs_batch
        latency_png = out_dir / "latency_vs_doclen.png"
        throughput_png = out_dir / "throughput_vs_batch.png"
        if plot_latency_vs_doclen(rows, latency_png):
            paths["latency_png"] = latency_png
        if plot_throughput_vs_batch(rows, throughput_png):
            paths["throughput_png"] = throughput_png
    return paths
