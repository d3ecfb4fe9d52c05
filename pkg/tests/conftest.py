from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from narco.chunking import Node
from narco.gateway import Gateway, ProviderConfig, ScriptedTransport
from narco.graph import RETAINED, Edge, NarrativeGraph, Question

ROOT = Path(__file__).resolve().parents[1]
FIXTURES = ROOT / "fixtures"


def scripted_gateway(handler, fixture_dir, mode="record", **kw) -> Gateway:
    cfg = ProviderConfig(endpoint="http://scripted.invalid", mode=mode, fixture_dir=str(fixture_dir),
                         requests_per_second=1e6, burst=1000, **kw)
    return Gateway(cfg, ScriptedTransport(handler), sleep=lambda s: None)


def text_node(i: int, text: str) -> Node:
    return Node.from_text(i, text)


def random_graph(rng: np.random.Generator, n_nodes: int, max_words: int = 40,
                 edge_prob: float = 0.4, max_q: int = 3) -> NarrativeGraph:
    """Nodes of random length; random forward edges with retained questions."""
    nodes = []
    for i in range(n_nodes):
        words = [f"w{i}x{k}" for k in range(int(rng.integers(1, max_words + 1)))]
        nodes.append(text_node(i, " ".join(words) + "."))
    edges = []
    for j in range(n_nodes):
        for i in range(j):
            if rng.random() >= edge_prob:
                continue
            qs = tuple(
                Question(f"What links {i} and {j} number {k}?", (i, j), k, RETAINED,
                         ((f"evidence {k}", "prior"),))
                for k in range(int(rng.integers(0, max_q + 1)))
            )
            edges.append(Edge(i, j, qs, int(rng.integers(0, 3))))
    return NarrativeGraph(tuple(nodes), tuple(edges), {})


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES


ACCEPTANCE: list[tuple[str, bool, str]] = []


def criterion(name: str, ok: bool, detail: str = "") -> None:
    """Record one acceptance line; it is echoed live and in the terminal summary."""
    line = f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail else "")
    ACCEPTANCE.append((name, ok, detail))
    print(line)
    assert ok, line


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail else ""))
