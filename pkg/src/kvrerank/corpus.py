"""Synthetic corpus and workload generation, plus the JSONL file formats.

Corpus files hold one ``{"id", "title", "text"}`` object per line; workload
files hold one ``{"id", "question"}`` object per line. Generation is a pure
function of its seed, so rebuilding with the same arguments reproduces the
same bytes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .hashing import SplitMix64

# Fixed sampling vocabulary for synthetic documents.
WORDS = (
    "array batch buffer cache cluster codec column commit config cursor daemon "
    "decode delta digest driver encode engine entry epoch error fetch field "
    "filter flush frame graph handle hash header heap index inode journal "
    "kernel latch layer ledger lexer limit lookup loop machine mapping marker "
    "matrix memory merge metric module mutex network node offset opcode packet "
    "page parser partition patch path pivot pointer pool prefix probe profile "
    "protocol proxy quantum query queue quorum record region register replica "
    "report request retry ring router schema scope segment sequence server "
    "session shard signal sketch slab slot socket sort span spool stack stage "
    "state stream stride string struct symbol syscall table tensor thread "
    "ticket timer token trace track transit tree trie tuple vector version "
    "volume walker watcher window worker zone agent anchor atlas beacon bridge "
    "canvas cipher circuit compass crystal current delta2 domain ember fabric "
    "falcon garnet glacier granite harbor horizon impulse jasper junction "
    "keystone lantern lattice meadow mesa monolith nexus obsidian onyx orbit "
    "oracle outpost palette paragon pillar prism pylon quarry quartz radius "
    "raven relay ridge rivet saddle sentinel sierra summit tundra vertex vista "
    "willow zephyr basalt cobalt copper dune ester fjord grove heath islet "
    "karst loam marsh nook oxide pine quay reef shale tarn umber vale wharf"
).split()


@dataclass(frozen=True)
class CorpusDoc:
    id: str
    title: str
    text: str


def gen_corpus(count: int, words_per_doc: int = 200, seed: int = 0) -> list[CorpusDoc]:
    """Generate `count` documents of exactly `words_per_doc` words each."""
    if count < 1:
        raise ValueError("count must be >= 1")
    if words_per_doc < 1:
        raise ValueError("words_per_doc must be >= 1")
    rng = SplitMix64(seed)
    docs = []
    for i in range(count):
        words = [WORDS[rng.next_below(len(WORDS))] for _ in range(words_per_doc)]
        title = f"{words[0]} {words[-1]}"
        docs.append(CorpusDoc(id=f"doc-{i:05d}", title=title, text=" ".join(words)))
    return docs


def synth_workload(docs: list[CorpusDoc], count: int, seed: int = 0,
                   words_per_query: int = 6) -> list[tuple[str, str]]:
    """Questions built from contiguous spans of corpus documents.

    Spans keep the workload retrievable: a query shares words with the
    document it was cut from, so hash embeddings place it near that doc.
    """
    if not docs:
        raise ValueError("docs must be non-empty")
    rng = SplitMix64(seed ^ 0xA5A5A5A5)
    queries = []
    for i in range(count):
        doc = docs[rng.next_below(len(docs))]
        words = doc.text.split()
        span = min(words_per_query, len(words))
        start = rng.next_below(max(1, len(words) - span + 1))
        queries.append((f"q-{i:05d}", " ".join(words[start:start + span])))
    return queries


def write_corpus(docs: list[CorpusDoc], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for doc in docs:
            f.write(json.dumps({"id": doc.id, "title": doc.title, "text": doc.text},
                               ensure_ascii=True, sort_keys=True) + "\n")


def read_corpus(path: str | Path) -> list[CorpusDoc]:
    docs = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                docs.append(CorpusDoc(id=obj["id"], title=obj["title"], text=obj["text"]))
            except (json.JSONDecodeError, KeyError) as e:
                raise ValueError(f"{path}:{line_no}: bad corpus record: {e}") from e
    return docs


def write_workload(queries: list[tuple[str, str]], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for qid, question in queries:
            f.write(json.dumps({"id": qid, "question": question},
                               ensure_ascii=True, sort_keys=True) + "\n")


def read_workload(path: str | Path) -> list[tuple[str, str]]:
    queries = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                queries.append((obj["id"], obj["question"]))
            except (json.JSONDecodeError, KeyError) as e:
                raise ValueError(f"{path}:{line_no}: bad workload record: {e}") from e
    return queries
