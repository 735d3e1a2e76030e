"""Retrieval pipeline with a decoder reranker that reuses document KV caches.

The scoring layer keeps a static [document | query] layout so each
document's key/value tensors are a fixed-size buffer that can be computed
once, stored in a centroid-sharded cache, and replayed under any later
query with byte-identical scores.
"""

from .codec import QuantScheme, decode_entry, dequantize_tensor, encode_entry, quantize_tensor
from .errors import (CodecError, ConfigError, DegenerateInputError, DuplicateChunkError,
                     FormatError, KvRerankError, PositionError, ShapeError, StoreError)
from .index import Candidate, IvfIndex, brute_force_search, train_kmeans
from .model import KVTensorSet, ModelConfig, Weights, forward, init_weights, reference_forward
from .pipeline import (MetricsReport, PipelineConfig, PipelineContext, RagResponse,
                       assemble_prompt, embed_text, execute_staged, handle_query,
                       run_workload)
from .reranker import (CounterReport, DocKV, LayoutConfig, RerankModel, ScoredPair,
                       doc_prefill, score_batch, score_full, score_reuse, tokenize)
from .store import (DirectoryBackend, MemoryBackend, RemoteBackend, ShardedStore,
                    StoreStats, shard_of)
from .server import KvServer, serve_remote

__version__ = "0.1.0"
