"""``narco`` command line.

Exit codes: 0 success, 1 invalid input or configuration, 2 provider or
runtime failure. Results go to ``--output`` or stdout as JSON; diagnostics
go to stderr as a one-line JSON object.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import random
import sys
from pathlib import Path
from typing import Any, Sequence

from narco import graph as graph_io
from narco.chunking import Node, chunk_text
from narco.config import RunConfig, load_config
from narco.edges import EdgeBuilder
from narco.errors import NarcoError, ValidationError
from narco.gateway import Gateway
from narco.qa import ContextBudget, MCQuestion, answer_accuracy, ask, assemble_context
from narco.recap import RecapConfig, RecapInstance, f1_at_k, rank_candidates, score_relations
from narco.rerank import FusionParams, TrainConfig, TrainingBatch, rerank_vectors, train
from narco.retrieval import (
    CachedProvider,
    FusionConfig,
    HashingEmbeddingProvider,
    HTTPEmbeddingProvider,
    MockEmbeddingProvider,
    embed,
    ndcg_at_k,
    node_question_vectors,
    retrieve,
)

log = logging.getLogger("narco")

NDCG_CUTOFFS = (1, 5, 10)


class ArgumentParser(argparse.ArgumentParser):
    """Usage errors are validation errors: exit 1, not argparse's 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise ValidationError(f"arguments: {message}")


# ----------------------------------------------------------------- helpers

def read_jsonl(path: str) -> list[dict]:
    try:
        with open(path, encoding="utf-8") as fh:
            return [json.loads(line) for line in fh if line.strip()]
    except FileNotFoundError:
        raise ValidationError(f"file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON line: {exc}") from None


def read_json(path: str) -> Any:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ValidationError(f"file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON: {exc}") from None


def emit(obj: Any, path: str | None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n"
    if path:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def make_gateway(cfg: RunConfig) -> Gateway:
    return Gateway(cfg.provider_config(), rng=random.Random(cfg.seed))


def make_provider(cfg: RunConfig):
    e = cfg.embedding
    if e.provider == "mock":
        inner = MockEmbeddingProvider(e.dim, cfg.seed)
    elif e.provider == "hashing":
        inner = HashingEmbeddingProvider(e.dim, cfg.seed)
    else:
        inner = HTTPEmbeddingProvider(e.endpoint, e.model, e.credential_env, cfg.chat.timeout,
                                      cfg.mode, e.cache_dir)
    return CachedProvider(inner)


def load_corpus(path: str, max_words: int) -> list[Node]:
    if path.endswith(".jsonl"):
        records = read_jsonl(path)
        ids = [r.get("id") for r in records]
        if ids != list(range(len(records))):
            raise ValidationError(f"{path}: snippet ids must be 0..N-1 in file order")
        return [Node.from_text(k, r["text"], max_words) for k, r in enumerate(records)]
    try:
        text = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ValidationError(f"paths.corpus: file not found: {path}") from None
    return chunk_text(text, max_words)


def load_graph(cfg: RunConfig):
    path = cfg.require("paths.graph")
    if not Path(path).exists():
        raise ValidationError(f"paths.graph: file not found: {path}")
    return graph_io.load(path)


def edge_builder(cfg: RunConfig, gateway: Gateway, checkpoints: str | None = None) -> EdgeBuilder:
    return EdgeBuilder(gateway, generation_model=cfg.chat.generation_model,
                       verification_model=cfg.chat.verification_model, cap=cfg.graph.cap,
                       parallelism=cfg.chat.parallelism, checkpoint_dir=checkpoints)


def load_queries(cfg: RunConfig) -> list[dict]:
    queries = read_jsonl(cfg.require("paths.queries"))
    for q in queries:
        if "text" not in q or "query_id" not in q:
            raise ValidationError("paths.queries: every record needs query_id and text")
    return queries


def ndcg_summary(rankings: Sequence[Sequence[int]], positives: Sequence[Sequence[int]],
                 cutoffs=NDCG_CUTOFFS) -> dict:
    out = {}
    scored = [(r, p) for r, p in zip(rankings, positives) if p]
    for k in cutoffs:
        vals = [ndcg_at_k(r, {i: 1 for i in p}, k) for r, p in scored]
        out[f"ndcg@{k}"] = sum(vals) / len(vals) if vals else None
    return out


def load_questions(cfg: RunConfig) -> list[MCQuestion]:
    try:
        return [MCQuestion.from_dict(d) for d in read_jsonl(cfg.require("paths.questions"))]
    except KeyError as exc:
        raise ValidationError(f"paths.questions: record missing field {exc}") from None


# ---------------------------------------------------------------- commands

def cmd_build_graph(cfg: RunConfig, args) -> dict:
    corpus = cfg.require("paths.corpus")
    out_path = cfg.require("paths.graph")
    nodes = load_corpus(corpus, cfg.graph.max_words)
    pairs = None
    if cfg.paths.pairs:
        pairs = [tuple(p) for p in read_json(cfg.paths.pairs)]
    builder = edge_builder(cfg, make_gateway(cfg), cfg.paths.checkpoints)
    digest = hashlib.sha256(Path(corpus).read_bytes()).hexdigest()[:16]
    graph = builder.build_graph(nodes, cfg.graph.window, pair_override=pairs,
                                extra_meta={"max_words": cfg.graph.max_words, "corpus_digest": digest})
    graph_io.save(graph, out_path)
    stats = graph_io.graph_stats(graph)
    return {"graph": out_path, "nodes": len(graph.nodes), "edges": len(graph.edges), **stats}


def cmd_stats(cfg: RunConfig, args) -> dict:
    return graph_io.graph_stats(load_graph(cfg))


def cmd_recap(cfg: RunConfig, args) -> dict:
    data = read_json(cfg.require("paths.instance"))
    try:
        target_text = data["target_text"]
        cands = data["candidates"]
        external = [c["id"] for c in cands]
        texts = [c["text"] for c in cands]
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"paths.instance: malformed recap instance ({exc})") from None
    if len(set(map(str, external))) != len(external):
        raise ValidationError("paths.instance: candidate ids must be unique")
    to_node = {str(e): k for k, e in enumerate(external)}
    nodes = [Node.from_text(k, t) for k, t in enumerate(texts)]
    target = Node.from_text(len(nodes), target_text)
    gateway = make_gateway(cfg)
    builder = edge_builder(cfg, gateway, cfg.paths.checkpoints)
    g = builder.build_graph(nodes + [target], window=None,
                            pair_override=[(k, target.id) for k in range(len(nodes))])
    instance = RecapInstance(
        target, tuple((n, g.edge(n.id, target.id)) for n in nodes),
        frozenset(to_node[str(x)] for x in data.get("gold", []) if str(x) in to_node),
    )
    rc = cfg.recap
    config = RecapConfig(rc.alpha, rc.beta, rc.lambda_boost, rc.k)
    scores = score_relations(instance, gateway, cfg.chat.scoring_model, cfg.chat.parallelism)
    baseline = {to_node[str(x)] for x in data.get("baseline", []) if str(x) in to_node}
    ranking = rank_candidates(instance, scores, baseline, config)
    ranked_ids = [r.candidate_id for r in ranking]
    rel = {s.candidate_id: s.value for s in scores}
    result = {
        "config": {"alpha": rc.alpha, "beta": rc.beta, "lambda": rc.lambda_boost, "k": rc.k},
        "ranked": [external[c] for c in ranked_ids],
        "selected": [external[c] for c in ranked_ids[: rc.k]],
        "candidates": [
            {"id": external[r.candidate_id], "score": r.score, "relation_score": rel[r.candidate_id],
             "relation_rank": r.relation_rank, "degree": instance.candidates[r.candidate_id][1].degree,
             "degree_rank": r.degree_rank, "baseline": r.baseline_selected}
            for r in ranking
        ],
    }
    if "gold" in data:
        result["metrics"] = f1_at_k(ranked_ids, instance.gold, rc.k).to_dict()
    return result


def cmd_retrieve(cfg: RunConfig, args) -> dict:
    graph = load_graph(cfg)
    provider = make_provider(cfg)
    fusion = FusionConfig(cfg.retrieval.lambda_fuse)
    results, rankings, positives = [], [], []
    for q in load_queries(cfg):
        ranked = retrieve(q["text"], graph, provider, fusion)
        rankings.append([i for i, _ in ranked])
        positives.append(q.get("positives", []))
        results.append({"query_id": q["query_id"],
                        "ranked": [[i, round(s, 12)] for i, s in ranked[: cfg.retrieval.k]]})
    return {"lambda": cfg.retrieval.lambda_fuse, "k": cfg.retrieval.k, "results": results,
            "metrics": ndcg_summary(rankings, positives)}


def _rerank_inputs(cfg: RunConfig, graph, provider):
    h_v = embed([n.text for n in graph.nodes], provider)
    qvecs = node_question_vectors(graph, provider, which="neighbors")
    return h_v, qvecs


def cmd_train_rerank(cfg: RunConfig, args) -> dict:
    graph = load_graph(cfg)
    out_path = cfg.require("paths.params")
    provider = make_provider(cfg)
    h_v, qvecs = _rerank_inputs(cfg, graph, provider)
    dataset = []
    for q in load_queries(cfg):
        pos = [int(p) for p in q.get("positives", [])]
        if not pos:
            continue
        h_q = embed([q["text"]], provider)[0]
        cands = [(h_v[n], qvecs[n]) for n in range(len(graph.nodes))]
        dataset.append(TrainingBatch(h_q, cands, frozenset(pos)))
    if not dataset:
        raise ValidationError("paths.queries: no query has positives to train on")
    rr = cfg.rerank
    tc = TrainConfig(epochs=rr.epochs, queries_per_batch=rr.queries_per_batch,
                     learning_rate=rr.learning_rate, warmup_ratio=rr.warmup_ratio, seed=cfg.seed, d=rr.d)
    result = train(dataset, tc)
    result.params.save(out_path, extra={"train_config": tc.__dict__, "log": result.log_dict(),
                                        "embedding": provider.name})
    return {"params": out_path, "queries": len(dataset), "epochs": tc.epochs,
            "first_loss": result.step_losses[0] if result.step_losses else None,
            "final_loss": result.step_losses[-1] if result.step_losses else None}


def cmd_rerank(cfg: RunConfig, args) -> dict:
    graph = load_graph(cfg)
    params = FusionParams.load(cfg.require("paths.params"))
    provider = make_provider(cfg)
    h_v, qvecs = _rerank_inputs(cfg, graph, provider)
    if h_v.shape[1] != params.d_e:
        raise ValidationError(f"paths.params: trained for dimension {params.d_e}, embeddings have {h_v.shape[1]}")
    top_n = cfg.rerank.top_n
    results, before, after, positives = [], [], [], []
    for q in load_queries(cfg):
        base = [i for i, _ in retrieve(q["text"], graph, provider, FusionConfig(0.0))]
        h_q = embed([q["text"]], provider)[0]
        reranked = rerank_vectors(h_q, [(n, h_v[n], qvecs[n]) for n in base], params, top_n)
        order = [n for n, _ in reranked]
        before.append(base)
        after.append(order)
        positives.append(q.get("positives", []))
        results.append({"query_id": q["query_id"], "baseline": base[:top_n], "reranked": order[:top_n]})
    return {"top_n": top_n, "results": results, "baseline_metrics": ndcg_summary(before, positives),
            "reranked_metrics": ndcg_summary(after, positives)}


def _contexts(cfg: RunConfig):
    graph = load_graph(cfg)
    questions = load_questions(cfg)
    provider = make_provider(cfg)
    fusion = FusionConfig(cfg.qa.lambda_fuse)
    budget = ContextBudget(cfg.qa.budget)
    return questions, [assemble_context(q, graph, provider, fusion, budget, cfg.qa.include_options)
                       for q in questions]


def cmd_qa_context(cfg: RunConfig, args) -> dict:
    questions, contexts = _contexts(cfg)
    return {"budget": cfg.qa.budget, "lambda": cfg.qa.lambda_fuse, "contexts": [
        {"stem": q.stem, "node_ids": list(c.node_ids), "word_count": c.word_count,
         "truncated": c.truncated, "context": c.text}
        for q, c in zip(questions, contexts)]}


def cmd_qa_eval(cfg: RunConfig, args) -> dict:
    questions, contexts = _contexts(cfg)
    replies = ask(questions, [c.text for c in contexts], make_gateway(cfg), cfg.chat.qa_model,
                  cfg.chat.parallelism)
    scores = answer_accuracy(list(zip(questions, replies)))
    return {**scores, "budget": cfg.qa.budget, "lambda": cfg.qa.lambda_fuse,
            "replies": [{"stem": q.stem, "gold": q.gold_label, "reply": r} for q, r in zip(questions, replies)]}


# ------------------------------------------------------------------ parser

COMMANDS = {
    "build-graph": (cmd_build_graph, "chunk a corpus and realize question edges"),
    "stats": (cmd_stats, "print degree, filter rate and question-type statistics"),
    "recap": (cmd_recap, "rank recap candidates for a target snippet"),
    "retrieve": (cmd_retrieve, "zero-shot retrieval with question fusion"),
    "train-rerank": (cmd_train_rerank, "train the attention fusion reranker"),
    "rerank": (cmd_rerank, "rerank first-stage results with trained fusion params"),
    "qa-context": (cmd_qa_context, "assemble retrieval contexts for multiple-choice questions"),
    "qa-eval": (cmd_qa_eval, "answer multiple-choice questions and report accuracy"),
}

# flag -> (dest, config attribute, type)
OVERRIDES = {
    "--corpus": ("paths.corpus", str), "--graph": ("paths.graph", str),
    "--pairs-file": ("paths.pairs", str), "--checkpoint-dir": ("paths.checkpoints", str),
    "--instance": ("paths.instance", str), "--queries": ("paths.queries", str),
    "--questions": ("paths.questions", str), "--params": ("paths.params", str),
    "--fixtures": ("paths.fixtures", str),
    "--window": ("graph.window", int), "--cap": ("graph.cap", int), "--max-words": ("graph.max_words", int),
    "--alpha": ("recap.alpha", float), "--beta": ("recap.beta", float),
    "--epochs": ("rerank.epochs", int), "--lr": ("rerank.learning_rate", float),
    "--batch": ("rerank.queries_per_batch", int), "--top-n": ("rerank.top_n", int),
    "--budget": ("qa.budget", int), "--parallelism": ("chat.parallelism", int),
    "--embedding": ("embedding.provider", str),
}

COMMAND_FLAGS = {
    "build-graph": ["--corpus", "--graph", "--pairs-file", "--checkpoint-dir", "--window", "--cap",
                    "--max-words", "--parallelism"],
    "stats": ["--graph"],
    "recap": ["--instance", "--checkpoint-dir", "--cap", "--alpha", "--beta", "--lambda", "--k",
              "--parallelism"],
    "retrieve": ["--graph", "--queries", "--lambda", "--k", "--embedding"],
    "train-rerank": ["--graph", "--queries", "--params", "--epochs", "--lr", "--batch", "--embedding"],
    "rerank": ["--graph", "--queries", "--params", "--top-n", "--embedding"],
    "qa-context": ["--graph", "--questions", "--budget", "--lambda", "--include-options", "--embedding"],
    "qa-eval": ["--graph", "--questions", "--budget", "--lambda", "--include-options", "--embedding",
                "--parallelism"],
}

# --lambda and --k mean different settings per command
LAMBDA_TARGET = {"recap": "recap.lambda_boost", "retrieve": "retrieval.lambda_fuse",
                 "qa-context": "qa.lambda_fuse", "qa-eval": "qa.lambda_fuse"}
K_TARGET = {"recap": "recap.k", "retrieve": "retrieval.k"}


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="narco", description="Narrative coherence graph toolkit.")
    parser.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=ArgumentParser)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="YAML/JSON run configuration")
        p.add_argument("--mode", choices=["live", "record", "replay_strict"])
        p.add_argument("--seed", type=int)
        p.add_argument("--output", help="write the JSON result here instead of stdout")
        for flag in COMMAND_FLAGS[name]:
            if flag == "--lambda":
                p.add_argument("--lambda", dest="lambda_", type=float)
            elif flag == "--k":
                p.add_argument("--k", type=int)
            elif flag == "--include-options":
                p.add_argument("--include-options", action="store_true", default=None)
            else:
                dest, typ = OVERRIDES[flag]
                p.add_argument(flag, dest=dest.replace(".", "__"), type=typ)
    return parser


def _set(cfg: RunConfig, dotted: str, value) -> None:
    section, name = dotted.split(".")
    setattr(getattr(cfg, section), name, value)


def apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if args.mode:
        cfg.mode = args.mode
    if args.seed is not None:
        cfg.seed = args.seed
    for dest, value in vars(args).items():
        if "__" in dest and value is not None:
            _set(cfg, dest.replace("__", "."), value)
    if getattr(args, "lambda_", None) is not None:
        _set(cfg, LAMBDA_TARGET[args.command], args.lambda_)
    if getattr(args, "k", None) is not None:
        _set(cfg, K_TARGET[args.command], args.k)
    if getattr(args, "include_options", None):
        cfg.qa.include_options = True
    return cfg.validate()


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except ValidationError as exc:
        _diagnose("validation", exc)
        return 1
    logging.basicConfig(level=args.log_level.upper(), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    handler = COMMANDS[args.command][0]
    try:
        cfg = apply_overrides(load_config(args.config), args)
        result = handler(cfg, args)
    except ValidationError as exc:
        _diagnose("validation", exc)
        return 1
    except NarcoError as exc:
        _diagnose("runtime", exc)
        return 2
    emit(result, args.output)
    return 0


def _diagnose(kind: str, exc: Exception) -> None:
    sys.stderr.write(json.dumps({"error": kind, "type": type(exc).__name__, "message": str(exc)}) + "\n")


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
