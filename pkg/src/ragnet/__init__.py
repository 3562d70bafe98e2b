"""Retrieval-augmented question answering over government documents.

Two retrieval strategies share one corpus and index: a one-shot
token-budgeted selector with metadata filtering and sentence cropping, and
an iterative tool-calling agent with a fallback search and chunk deletion.
"""

from .agent import AgentConfig, Transcript, parse_assistant_message, run_combined, run_iterative
from .corpus import ChunkingConfig, CorpusStore, Gazetteer, TokenizerConfig, count_tokens, ingest_documents
from .errors import RagnetError
from .index import EmbedderConfig, Index, IndexConfig, build_index
from .llm import BackendConfig, ChatMessage, ScriptedBackend, judge, make_backend
from .oneshot import Budget, FilterRules, knapsack_exact, run_oneshot, select_token_constrained

__version__ = "0.1.0"

__all__ = [
    "AgentConfig", "BackendConfig", "Budget", "ChatMessage", "ChunkingConfig", "CorpusStore", "EmbedderConfig",
    "FilterRules", "Gazetteer", "Index", "IndexConfig", "RagnetError", "ScriptedBackend", "TokenizerConfig",
    "Transcript", "build_index", "count_tokens", "ingest_documents", "judge", "knapsack_exact", "make_backend",
    "parse_assistant_message", "run_combined", "run_iterative", "run_oneshot", "select_token_constrained",
]
