"""Command-line entry points.

Verbs: gen-corpus, build, verify, bench, kv-server, query. Every command
accepts --seed and --config (a JSON file with optional "model", "layout",
and "pipeline" sections overriding the defaults); commands that emit
records accept --format json|csv.
"""

from __future__ import annotations

import dataclasses
import json
import signal
import sys
from pathlib import Path

import click
import numpy as np

from .bench import BenchSpec, run_bench, write_reports
from .codec import QuantScheme, decode_entry, encode_entry
from .corpus import (CorpusDoc, gen_corpus, read_corpus, read_workload, synth_workload,
                     write_corpus)
from .errors import KvRerankError
from .index import IvfIndex, normalize
from .model import ModelConfig
from .pipeline import (PipelineConfig, PipelineContext, build_index, embed_text,
                       handle_query, populate_store, response_to_json)
from .reranker import LayoutConfig, RerankModel, doc_prefill, score_full, score_reuse, tokenize
from .server import KvServer
from .store import DirectoryBackend, ShardedStore, shard_of

MANIFEST_NAME = "manifest.json"


def _load_overrides(config_path) -> dict:
    if config_path is None:
        return {}
    with open(config_path) as f:
        overrides = json.load(f)
    unknown = set(overrides) - {"model", "layout", "pipeline"}
    if unknown:
        raise click.UsageError(f"unknown config sections: {sorted(unknown)}")
    return overrides


def _apply(cls_default, section: dict, name: str):
    fields = {f.name for f in dataclasses.fields(cls_default)}
    unknown = set(section) - fields
    if unknown:
        raise click.UsageError(f"unknown {name} options: {sorted(unknown)}")
    return dataclasses.replace(cls_default, **section)


def _model_config(seed: int, overrides: dict) -> ModelConfig:
    return _apply(ModelConfig(seed=seed), overrides.get("model", {}), "model")


def _layout(document_len: int, query_len: int, overrides: dict) -> LayoutConfig:
    return _apply(LayoutConfig(document_len=document_len, query_len=query_len),
                  overrides.get("layout", {}), "layout")


def _pipeline_config(layout: LayoutConfig, overrides: dict, **kwargs) -> PipelineConfig:
    section = dict(overrides.get("pipeline", {}))
    if "scheme" in section:
        section["scheme"] = QuantScheme.from_name(section["scheme"])
    if "layout" in section:
        raise click.UsageError("set layout via the layout section, not pipeline")
    base = PipelineConfig(layout=layout, **kwargs)
    return _apply(base, section, "pipeline")


@click.group()
def main():
    """Cached-reranking retrieval pipeline tools."""


@main.command("gen-corpus")
@click.option("--count", type=int, required=True, help="Number of documents.")
@click.option("--words-per-doc", type=int, default=200, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--config", type=click.Path(exists=True), default=None,
              help="Accepted for interface uniformity; unused here.")
@click.option("--out", type=click.Path(), required=True, help="Corpus JSONL path.")
def cmd_gen_corpus(count, words_per_doc, seed, config, out):
    """Write a deterministic synthetic corpus, one JSON object per line."""
    if count < 1:
        raise click.UsageError("--count must be >= 1")
    docs = gen_corpus(count, words_per_doc=words_per_doc, seed=seed)
    try:
        write_corpus(docs, out)
    except OSError as e:
        raise click.ClickException(f"cannot write corpus: {e}")
    click.echo(f"wrote {len(docs)} docs to {out}")


@main.command("build")
@click.option("--corpus", "corpus_path", type=click.Path(exists=True), required=True)
@click.option("--out-dir", type=click.Path(), required=True)
@click.option("--nlist", type=int, default=64, show_default=True)
@click.option("--num-shards", type=int, default=4, show_default=True)
@click.option("--scheme", type=click.Choice(["f32", "int8", "int4"]), default="f32",
              show_default=True)
@click.option("--document-len", type=int, default=256, show_default=True)
@click.option("--query-len", type=int, default=48, show_default=True)
@click.option("--embed-dim", type=int, default=64, show_default=True)
@click.option("--cold-entries", type=int, default=0, show_default=True,
              help="Extra non-indexed entries to fill the store with.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--config", type=click.Path(exists=True), default=None)
def cmd_build(corpus_path, out_dir, nlist, num_shards, scheme, document_len,
              query_len, embed_dim, cold_entries, seed, config):
    """Train the index, prefill every chunk, and place entries across shards."""
    overrides = _load_overrides(config)
    scheme = QuantScheme.from_name(scheme)
    model_cfg = _model_config(seed, overrides)
    layout = _layout(document_len, query_len, overrides)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    docs = read_corpus(corpus_path)
    try:
        model = RerankModel.build(model_cfg, layout)
        index = build_index(docs, nlist=nlist, embed_dim=embed_dim, seed=seed)
    except KvRerankError as e:
        raise click.ClickException(str(e))

    store = ShardedStore.local(out / "shards", num_shards)
    encoded_total = 0
    for doc in docs:
        try:
            tokens = tokenize(doc.text, layout.document_len,
                              vocab_size=model_cfg.vocab_size)
            kv = doc_prefill(model, tokens, chunk_id=doc.id)
            data = encode_entry(kv, scheme)
            store.put_entry(doc.id, index.centroid_of(doc.id), data)
            encoded_total += len(data)
        except (KvRerankError, OSError) as e:
            raise click.ClickException(f"build failed at chunk {doc.id}: {e}")

    for doc in _cold_docs(cold_entries, seed):
        try:
            tokens = tokenize(doc.text, layout.document_len,
                              vocab_size=model_cfg.vocab_size)
            kv = doc_prefill(model, tokens, chunk_id=doc.id)
            centroid = index.assign(normalize(embed_text(doc.text, embed_dim)))
            store.put_entry(doc.id, centroid, encode_entry(kv, scheme))
        except (KvRerankError, OSError) as e:
            raise click.ClickException(f"build failed at chunk {doc.id}: {e}")

    index.save(out / "index.hriv")
    write_corpus(docs, out / "corpus.jsonl")
    manifest = {
        "format_version": 1,
        "seed": seed,
        "model": dataclasses.asdict(model_cfg),
        "layout": dataclasses.asdict(layout),
        "scheme": scheme.short_name,
        "nlist": nlist,
        "num_shards": num_shards,
        "embed_dim": embed_dim,
        "chunks": len(docs),
        "cold_entries": cold_entries,
        "encoded_bytes": encoded_total,
        "corpus": "corpus.jsonl",
        "index": "index.hriv",
        "shards_root": "shards",
    }
    with open(out / MANIFEST_NAME, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    click.echo(f"built {len(docs)} chunks ({encoded_total} encoded bytes) "
               f"into {out_dir}")


def _cold_docs(count: int, seed: int) -> list[CorpusDoc]:
    if count < 1:
        return []
    docs = gen_corpus(count, words_per_doc=200, seed=seed ^ 0xC01D)
    return [CorpusDoc(id=f"cold-{i:05d}", title=d.title, text=d.text)
            for i, d in enumerate(docs)]


class _Built:
    def __init__(self, built_dir: str, remote: str | None = None):
        self.root = Path(built_dir)
        manifest_path = self.root / MANIFEST_NAME
        if not manifest_path.is_file():
            raise click.UsageError(f"{built_dir} has no {MANIFEST_NAME}")
        with open(manifest_path) as f:
            self.manifest = json.load(f)
        self.model_cfg = ModelConfig(**self.manifest["model"])
        self.layout = LayoutConfig(**self.manifest["layout"])
        self.scheme = QuantScheme.from_name(self.manifest["scheme"])
        self.docs = read_corpus(self.root / self.manifest["corpus"])
        self.index = IvfIndex.load(self.root / self.manifest["index"])
        self.model = RerankModel.build(self.model_cfg, self.layout)
        num_shards = self.manifest["num_shards"]
        if remote:
            self.store = ShardedStore.remote(remote, num_shards)
        else:
            self.store = ShardedStore.local(self.root / self.manifest["shards_root"],
                                            num_shards, create=False)

    def context(self, pipeline_cfg: PipelineConfig) -> PipelineContext:
        return PipelineContext.create(self.model, pipeline_cfg, self.docs,
                                      self.index, self.store)


@main.command("verify")
@click.option("--built-dir", type=click.Path(exists=True), required=True)
@click.option("--trials", type=int, default=100, show_default=True,
              help="Sampled (document, query) pairs for the lossless check.")
@click.option("--remote", default=None, help="host:port of a served shard root.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--config", type=click.Path(exists=True), default=None)
def cmd_verify(built_dir, trials, remote, seed, config):
    """Re-derive and check every stored property of a built directory.

    Checks stored entry bytes against recomputation, reference-path score
    equality between the full and cache-reuse routes, codec roundtrips,
    centroid-aligned placement, and fetch locality. Exits nonzero on the
    first failure, naming the offending entry.
    """
    del config
    if trials < 1:
        raise click.UsageError("--trials must be >= 1")
    built = _Built(built_dir, remote=remote)
    failures = run_verification(built, trials=trials, seed=seed, echo=click.echo)
    if failures:
        raise click.ClickException(f"{failures} verification failure(s)")
    click.echo("verify: all checks passed")


def _sample_query(rng, doc: CorpusDoc, layout: LayoutConfig, vocab_size: int):
    words = doc.text.split()
    start = rng.next_below(max(1, len(words) - 6))
    return tokenize(" ".join(words[start:start + 6]), layout.query_len,
                    vocab_size=vocab_size)


def run_verification(built: _Built, trials: int, seed: int, echo=lambda s: None) -> int:
    from .hashing import SplitMix64

    rng = SplitMix64(seed ^ 0xF00D)
    model, layout, scheme = built.model, built.layout, built.scheme
    docs = built.docs
    index, store = built.index, built.store
    failures = 0

    # stored bytes match deterministic recomputation
    sample = min(len(docs), max(8, trials // 4))
    for i in range(sample):
        doc = docs[rng.next_below(len(docs))]
        tokens = tokenize(doc.text, layout.document_len,
                          vocab_size=model.config.vocab_size)
        expected = encode_entry(doc_prefill(model, tokens, chunk_id=doc.id), scheme)
        stored = store.get_entry(doc.id, index.centroid_of(doc.id))
        if stored is None:
            echo(f"FAIL entry-bytes: {doc.id} missing from its shard")
            failures += 1
        elif stored != expected:
            echo(f"FAIL entry-bytes: {doc.id} stored bytes differ from recomputation")
            failures += 1
    if not failures:
        echo(f"ok entry-bytes: {sample} entries byte-identical to recomputation")

    # lossless, reference path: prefill and both scoring routes on the
    # scalar-order implementation must agree bit for bit
    fail_before = failures
    for i in range(trials):
        doc = docs[rng.next_below(len(docs))]
        tokens = tokenize(doc.text, layout.document_len,
                          vocab_size=model.config.vocab_size)
        query = _sample_query(rng, doc, layout, model.config.vocab_size)
        s_full, _ = score_full(model, tokens, query, path="reference")
        kv = doc_prefill(model, tokens, chunk_id=doc.id, path="reference")
        s_reuse, _ = score_reuse(model, kv, query, path="reference")
        if s_full != s_reuse:
            echo(f"FAIL lossless-reference: {doc.id} full={s_full!r} reuse={s_reuse!r}")
            failures += 1
    if failures == fail_before:
        echo(f"ok lossless-reference: {trials} pairs, full == reuse bit-exact")

    # lossless, stored entries: the shipped path scored against what the
    # store actually serves (exact only for the f32 scheme)
    fail_before = failures
    for i in range(trials):
        doc = docs[rng.next_below(len(docs))]
        tokens = tokenize(doc.text, layout.document_len,
                          vocab_size=model.config.vocab_size)
        query = _sample_query(rng, doc, layout, model.config.vocab_size)
        stored = store.get_entry(doc.id, index.centroid_of(doc.id))
        if stored is None:
            echo(f"FAIL lossless-stored: {doc.id} missing from its shard")
            failures += 1
            continue
        s_reuse, _ = score_reuse(model, decode_entry(stored), query)
        if scheme is QuantScheme.F32:
            s_full, _ = score_full(model, tokens, query)
            if s_full != s_reuse:
                echo(f"FAIL lossless-stored: {doc.id} full={s_full!r} "
                     f"reuse={s_reuse!r}")
                failures += 1
        elif not np.isfinite(s_reuse):
            echo(f"FAIL lossless-stored: {doc.id} quantized reuse score not finite")
            failures += 1
    if failures == fail_before:
        echo(f"ok lossless-stored: {trials} pairs scored from stored entries")

    # codec roundtrip on one sampled entry per scheme
    doc = docs[rng.next_below(len(docs))]
    tokens = tokenize(doc.text, layout.document_len, vocab_size=model.config.vocab_size)
    kv = doc_prefill(model, tokens, chunk_id=doc.id)
    rt = decode_entry(encode_entry(kv, QuantScheme.F32))
    if not (np.array_equal(rt.kv.keys, kv.kv.keys)
            and np.array_equal(rt.kv.values, kv.kv.values)):
        echo(f"FAIL codec: f32 roundtrip not identity for {doc.id}")
        failures += 1
    else:
        echo("ok codec: f32 roundtrip is byte-identical")

    # placement: every indexed chunk sits in the shard its centroid maps to
    bad_placement = 0
    for chunk_id, centroid_id, _vec in index.stored_items():
        home = shard_of(centroid_id, store.num_shards)
        if not store.exists_entry(chunk_id, centroid_id):
            echo(f"FAIL placement: {chunk_id} missing from shard {home}")
            failures += 1
            bad_placement += 1
            continue
        for other in range(store.num_shards):
            if other == home:
                continue
            try:
                if store.backends[other].exists(chunk_id):
                    echo(f"FAIL placement: {chunk_id} also present in shard {other}")
                    failures += 1
                    bad_placement += 1
            except KvRerankError:
                pass
    if not bad_placement:
        echo(f"ok placement: {len(index)} entries on their home shards only")

    # locality: distinct shards touched per query never exceeds nprobe
    violations = 0
    for nprobe in (1, min(4, index.nlist)):
        for i in range(max(10, trials // 4)):
            doc = docs[rng.next_below(len(docs))]
            words = doc.text.split()
            start = rng.next_below(max(1, len(words) - 6))
            vec = embed_text(" ".join(words[start:start + 6]))
            cands = index.search(vec, 10, nprobe)
            shards = {shard_of(c.centroid_id, store.num_shards) for c in cands}
            if len(shards) > nprobe:
                echo(f"FAIL locality: nprobe={nprobe} touched {len(shards)} shards")
                failures += 1
                violations += 1
    if not violations:
        echo("ok locality: shards touched never exceeded nprobe")
    return failures


@main.command("bench")
@click.option("--built-dir", type=click.Path(exists=True), required=True)
@click.option("--workload", type=click.Path(exists=True), default=None,
              help="Workload JSONL; synthesized from the corpus when omitted.")
@click.option("--out-dir", type=click.Path(), required=True)
@click.option("--document-lens", default="64,128,256,512", show_default=True)
@click.option("--batch-sizes", default="1,8,32", show_default=True)
@click.option("--modes", default="full,reuse", show_default=True)
@click.option("--repetitions", type=int, default=3, show_default=True)
@click.option("--queries", "query_count", type=int, default=40, show_default=True,
              help="Synthesized workload size when --workload is omitted.")
@click.option("--warmup", type=int, default=None)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--config", type=click.Path(exists=True), default=None)
@click.option("--figures/--no-figures", default=True, show_default=True)
@click.option("--format", "fmt", type=click.Choice(["json", "csv"]), default="csv",
              show_default=True, help="Format echoed to stdout; files get both.")
def cmd_bench(built_dir, workload, out_dir, document_lens, batch_sizes, modes,
              repetitions, query_count, warmup, seed, config, figures, fmt):
    """Sweep document length, batch size, and mode; write reports and figures."""
    overrides = _load_overrides(config)
    built = _Built(built_dir)
    try:
        spec = BenchSpec(
            document_lens=tuple(int(x) for x in document_lens.split(",") if x),
            query_len=built.layout.query_len,
            batch_sizes=tuple(int(x) for x in batch_sizes.split(",") if x),
            modes=tuple(m.strip() for m in modes.split(",") if m.strip()),
            repetitions=repetitions, seed=seed)
        spec.validate()
    except (ValueError, KvRerankError) as e:
        raise click.UsageError(f"bad sweep spec: {e}")

    if workload:
        queries = read_workload(workload)
    else:
        queries = synth_workload(built.docs, query_count, seed=seed)
    if not queries:
        raise click.UsageError("workload is empty")

    base = _pipeline_config(built.layout, overrides, retrieve_k=8, nprobe=4,
                            rerank_workers=2)
    try:
        rows = run_bench(built.model_cfg, built.docs, queries, spec,
                         base_config=base, warmup=warmup,
                         num_shards=built.manifest["num_shards"],
                         nlist=built.manifest["nlist"], scheme=built.scheme)
    except KvRerankError as e:
        raise click.UsageError(str(e))
    paths = write_reports(rows, out_dir, figures=figures)

    if fmt == "json":
        click.echo(json.dumps([r.to_json_dict() for r in rows], indent=2,
                              sort_keys=True))
    else:
        from .bench import BENCH_CSV_COLUMNS
        click.echo(",".join(BENCH_CSV_COLUMNS))
        for row in rows:
            click.echo(",".join(str(v) for v in row.to_csv_row()))
    for name, path in paths.items():
        click.echo(f"wrote {name}: {path}")


@main.command("kv-server")
@click.option("--bind", default="127.0.0.1:7421", show_default=True)
@click.option("--root", type=click.Path(exists=True), required=True,
              help="Shard root directory (the build's shards/ folder).")
@click.option("--seed", type=int, default=0, help="Accepted for interface "
              "uniformity; no randomness here.")
@click.option("--config", type=click.Path(exists=True), default=None)
def cmd_kv_server(bind, root, seed, config):
    """Serve a shard root over the wire protocol until interrupted."""
    del seed, config
    backend = DirectoryBackend(root, create=False)
    try:
        server = KvServer(bind, backend)
    except OSError as e:
        raise click.ClickException(f"cannot bind {bind}: {e}")
    stop = {"flag": False}

    def _handler(signum, frame):
        stop["flag"] = True
        server._server.shutdown()

    signal.signal(signal.SIGINT, _handler)
    signal.signal(signal.SIGTERM, _handler)
    host, port = server.address
    click.echo(f"serving {root} on {host}:{port}")
    server.serve_forever()
    server._server.server_close()
    click.echo("shut down cleanly")


@main.command("query")
@click.option("--built-dir", type=click.Path(exists=True), required=True)
@click.option("--question", required=True)
@click.option("--query-id", default="q-0", show_default=True)
@click.option("--mode", type=click.Choice(["full", "reuse"]), default="reuse",
              show_default=True)
@click.option("--remote", default=None, help="host:port of a served shard root.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--config", type=click.Path(exists=True), default=None)
@click.option("--format", "fmt", type=click.Choice(["json", "csv"]), default="json",
              show_default=True)
def cmd_query(built_dir, question, query_id, mode, remote, seed, config, fmt):
    """Answer one query and print the response (selection plus prompt)."""
    del seed
    overrides = _load_overrides(config)
    built = _Built(built_dir, remote=remote)
    cfg = _pipeline_config(built.layout, overrides, rerank_mode=mode, retrieve_k=8,
                           nprobe=min(4, built.manifest["nlist"]))
    try:
        ctx = built.context(cfg)
        resp = handle_query(ctx, query_id, question)
    except KvRerankError as e:
        raise click.ClickException(str(e))
    if fmt == "json":
        click.echo(response_to_json(resp))
    else:
        click.echo("query_id,chunk_id,score")
        for pair in resp.selected:
            click.echo(f"{resp.query_id},{pair.chunk_id},{pair.score!r}")


if __name__ == "__main__":
    main()
