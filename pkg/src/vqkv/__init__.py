"""Attention-score approximation for KV-cache retrieval via vector-quantized keys.

Submodules:

* :mod:`vqkv.numerics` - Cholesky, triangular solves, seeded Gaussian sampling
* :mod:`vqkv.rope` - rotary and windowed rotary position embeddings
* :mod:`vqkv.codebook` - conventional and query-aware codebooks
* :mod:`vqkv.attention` - exact/selective attention and top-K selection
* :mod:`vqkv.offload` - simulated two-tier KV store with access accounting
* :mod:`vqkv.experiments` / :mod:`vqkv.cli` - analysis experiments
"""

from .attention import (
    RetrievalPolicy,
    SelectionResult,
    approx_scores,
    exact_attention,
    recall_at_k,
    select_topk,
    selective_attention,
)
from .codebook import (
    Codebook,
    CodebookKind,
    TrainConfig,
    attention_mse,
    codebook_similarity,
    estimate_h,
    load_codebook,
    quantize,
    save_codebook,
    train_conventional,
    train_query_aware,
)
from .numerics import CholeskyError, SeededRng, cholesky, matmul, sample_gaussian, solve_lower_triangular
from .offload import AccessLedger, TieredKvStore, aux_mem_ratio, decode_step, selective_attention_executor
from .rope import RopeConfig, RopeMode, apply_rotation, post_pe_states, score_matrix

__version__ = "0.1.0"
