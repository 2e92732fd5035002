"""Table retrieval with synthetic questions generated from partial tables."""

from .corpus import QueryRecord, deduplicate, ingest_corpus, schema_signature, write_corpus
from .embed import EmbedderSpec, embed_dense, embed_multi
from .evaluation import EvalReport, mtr_decompose, mtr_merge, recall_at_k, run_benchmark
from .index import IVFIndex, MultiIndex, SearchResult, brute_force_search, build_ivf, maxsim_score, search_dense, search_multi
from .qgen import AugmentedTable, GenResult, RepresentationStrategy, augment, generate, render_for_embedding
from .tables import PartialTable, Table, count_tokens, select_top_rows, to_markdown, truncate_by_tokens

__version__ = "0.1.0"
