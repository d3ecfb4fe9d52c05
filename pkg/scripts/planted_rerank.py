"""Train the fusion reranker on planted synthetic data and print a learning curve.

    python scripts/planted_rerank.py --epochs 60 --lr 20 --seed 0
"""

from __future__ import annotations

import argparse
import time

from narco.rerank import FusionParams, TrainConfig, train
from narco.synthetic import baseline_order, fused_order, mean_ndcg, planted_dataset


def report(tag, params, data):
    orders = [fused_order(b, params) for b in data]
    return f"{tag:<10} " + "  ".join(f"nDCG@{k} {mean_ndcg(orders, data, k):.3f}" for k in (1, 5, 10))


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--queries", type=int, default=64)
    ap.add_argument("--candidates", type=int, default=16)
    ap.add_argument("--dim", type=int, default=32)
    ap.add_argument("--epochs", type=int, default=60)
    ap.add_argument("--lr", type=float, default=20.0)
    ap.add_argument("--batch", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    data = planted_dataset(args.queries, args.candidates, args.dim, seed=args.seed)
    held = planted_dataset(args.queries, args.candidates, args.dim, seed=args.seed + 1)
    base = [baseline_order(b) for b in held]
    print(f"{'cosine':<10} " + "  ".join(f"nDCG@{k} {mean_ndcg(base, held, k):.3f}" for k in (1, 5, 10)))
    print(report("untrained", FusionParams.init(args.dim, seed=args.seed), held))

    cfg = TrainConfig(epochs=args.epochs, queries_per_batch=args.batch, learning_rate=args.lr, seed=args.seed)
    t0 = time.perf_counter()
    result = train(data, cfg)
    print(report("trained", result.params, held) + f"   ({time.perf_counter() - t0:.1f}s)")
    step = max(1, len(result.epoch_losses) // 10)
    for e in range(0, len(result.epoch_losses), step):
        print(f"  epoch {e + 1:>3}  loss {result.epoch_losses[e]:.4f}")


if __name__ == "__main__":
    main()
