"""Narrative coherence graphs: chunk a story, link chunks with verified
retrospective questions, and use those links for recap ranking, retrieval,
reranking and QA context assembly."""

from narco.chunking import Node, Sentence, chunk_text, split_sentences
from narco.graph import Edge, NarrativeGraph, Question, graph_stats

__all__ = [
    "Edge",
    "NarrativeGraph",
    "Node",
    "Question",
    "Sentence",
    "chunk_text",
    "graph_stats",
    "split_sentences",
]

__version__ = "0.1.0"
