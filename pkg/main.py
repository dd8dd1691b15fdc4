"""
Main entry point for holgraph.
One command line exposing the pipeline: parse, graphify, stats, gen-corpus,
train, eval and prove.
"""

import argparse
import csv
import io
import sys
from collections import Counter
from typing import Dict, List, Optional, Sequence

import numpy as np
from pydantic import ValidationError

from config import Config
from corpus import (
    CorpusError, extract_examples, generate_toy_corpus, load_corpus, load_theorem_db,
    relative_premise_accuracy, save_proof_log, save_theorem_db, tactic_accuracy, write_text_atomic
)
from engine import EngineError, ToyTacticEngine
from gnn import GnnError
from graphrep import GraphError, represent, stats, to_text
from logger import run_logger
from model import ModelError, PremiseCache, load_model
from numerics import NumericsError
from prover import ModelPolicy, OraclePolicy, ProverError, RandomPolicy, evaluate_prover, write_report
from schemas import (
    BatchConfig, Direction, GnnConfig, HeadConfig, LossWeights, OptimizerConfig, ProverConfig,
    RepresentationConfig, RunConfig, Sharing, TrainConfig
)
from sexpr import SExprError, parse, serialize
from trainer import Trainer

REPRESENTATIONS = {"ast": Sharing.NONE, "leaf": Sharing.LEAF, "subexpr": Sharing.SUBEXPRESSION}

MODULE_ERRORS = (
    SExprError, GraphError, NumericsError, GnnError, ModelError, CorpusError,
    EngineError, ProverError, OSError
)


def add_representation_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--representation", choices=sorted(REPRESENTATIONS), default="subexpr",
                        help="Graph representation (default: subexpr)")
    parser.add_argument("--blind-variables", action="store_true", help="Rename variable names to x")
    parser.add_argument("--random-edges", action="store_true", help="Add 3 random edges per node")
    parser.add_argument("--direction", choices=[d.value for d in Direction], default="both",
                        help="Message flow along structural edges (default: both)")
    parser.add_argument("--seed", type=int, default=0, help="Random seed (default: 0)")


def add_corpus_flags(parser: argparse.ArgumentParser, required: bool = True):
    parser.add_argument("--theorem-db", required=required, help="Theorem database file")
    parser.add_argument("--proof-log", required=required, help="Proof log file")


def representation_config(args) -> RepresentationConfig:
    return RepresentationConfig(
        sharing=REPRESENTATIONS[args.representation],
        variable_blinding=args.blind_variables,
        random_edges=args.random_edges,
        direction=Direction(args.direction),
        random_seed=args.seed
    )


def run_config(args) -> RunConfig:
    """Effective configuration of a train run: defaults overridden by flags"""
    return RunConfig(
        representation=representation_config(args),
        gnn=GnnConfig(
            hops=args.hops,
            token_embedding_size=args.token_size,
            node_embedding_size=args.node_size,
            mlp_hidden_size=args.mlp_hidden_size,
            pooling_widths=tuple(args.pooling_widths),
            dropout_keep=args.gnn_dropout_keep
        ),
        head=HeadConfig(n_tactics=args.n_tactics, dropout_keep=args.dropout_keep),
        loss=LossWeights(tactic=args.tactic_weight, pairwise=args.pairwise_weight, aucroc=args.aucroc_weight),
        optimizer=OptimizerConfig(
            learning_rate=args.learning_rate,
            decay_rate=args.decay_rate,
            decay_steps=args.decay_steps,
            polyak_rate=args.polyak_rate
        ),
        batch=BatchConfig(goals=args.batch_goals, negatives_per_goal=args.negatives_per_goal),
        train=TrainConfig(steps=args.steps, eval_every=args.eval_every, seed=args.seed, precision=args.precision),
        theorem_db=args.theorem_db,
        proof_log=args.proof_log,
        checkpoint=args.checkpoint
    )


def read_terms(args) -> List:
    if args.term:
        return [parse(t) for t in args.term]
    if getattr(args, "theorem_db", None):
        return load_theorem_db(args.theorem_db).statements
    return [parse(line) for line in sys.stdin if line.strip()]


def emit(text: str, output: Optional[str]):
    if output:
        write_text_atomic(output, text)
    else:
        sys.stdout.write(text)


def cmd_parse(args) -> int:
    emit("".join(serialize(t) + "\n" for t in read_terms(args)), args.output)
    return 0


def cmd_graphify(args) -> int:
    config = representation_config(args)
    emit("".join(to_text(represent(t, config)) for t in read_terms(args)), args.output)
    return 0


def histogram(values: Sequence[int], buckets: int = 10) -> List[tuple]:
    """(low, high, count) rows over equal-width integer buckets"""
    lo, hi = min(values), max(values)
    width = max(1, int(np.ceil((hi - lo + 1) / buckets)))
    counts = Counter((v - lo) // width for v in values)
    return [(lo + b * width, lo + (b + 1) * width - 1, counts.get(b, 0))
            for b in range((hi - lo) // width + 1)]


def cmd_stats(args) -> int:
    terms = read_terms(args)
    if not terms:
        print("[ERROR] No terms given")
        return 1
    base = representation_config(args)
    per_repr: Dict[str, List] = {}
    for name, sharing in REPRESENTATIONS.items():
        config = base.model_copy(update={"sharing": sharing, "direction": Direction.BOTH})
        per_repr[name] = [stats(represent(t, config)) for t in terms]

    out = io.StringIO()
    out.write(f"{'representation':<16}{'terms':>8}{'mean nodes':>12}{'mean depth':>12}{'max nodes':>11}\n")
    for name, rows in per_repr.items():
        nodes = [s.node_count for s in rows]
        depths = [s.depth for s in rows]
        out.write(f"{name:<16}{len(rows):>8}{np.mean(nodes):>12.2f}{np.mean(depths):>12.2f}{max(nodes):>11}\n")

    chosen = per_repr[args.representation]
    csv_rows = []
    for metric in ("node_count", "depth"):
        values = [getattr(s, metric) for s in chosen]
        out.write(f"\n{metric} histogram ({args.representation})\n")
        rows = histogram(values)
        peak = max(c for _, _, c in rows)
        for low, high, count in rows:
            bar = "#" * int(round(40 * count / peak)) if peak else ""
            out.write(f"{low:>6}-{high:<6}{count:>7} {bar}\n")
            csv_rows.append((args.representation, metric, low, high, count))
    emit(out.getvalue(), args.output)

    if args.histogram_csv:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["representation", "metric", "low", "high", "count"])
        writer.writerows(csv_rows)
        write_text_atomic(args.histogram_csv, buf.getvalue())
    return 0


def cmd_gen_corpus(args) -> int:
    corpus = generate_toy_corpus(args.seed, args.n_theorems, args.n_tactics)
    save_theorem_db(corpus.db, args.theorem_db)
    save_proof_log(corpus.log, args.proof_log)
    run_logger.log_event(
        action="Generated toy corpus",
        component="cli",
        details={"records": len(corpus.db), "steps": len(corpus.log), "seed": args.seed}
    )
    return 0


def cmd_train(args) -> int:
    config = run_config(args)
    run_logger.log_event(action="Effective run config", component="cli", details=config.model_dump(mode="json"))
    corpus = load_corpus(args.theorem_db, args.proof_log, config.head.n_tactics)
    trainer = Trainer(corpus, config, args.metrics_log)
    if args.resume:
        trainer.resume(args.resume)
    summary = trainer.train(checkpoint=args.checkpoint)
    print(f"[TRAIN] steps={summary.steps} applied={summary.applied_steps} "
          f"best_score={summary.best_score} best_step={summary.best_step}")
    return 0


def cmd_eval(args) -> int:
    corpus = load_corpus(args.theorem_db, args.proof_log)
    model = load_model(args.checkpoint, corpus.db.statements)
    examples = extract_examples(corpus, [args.split])
    rng = np.random.default_rng(args.seed)
    tactic = tactic_accuracy(model, examples)
    premise = relative_premise_accuracy(model, examples, rng)
    run_logger.log_event(
        action="Evaluated proxy metrics",
        component="cli",
        details={"split": args.split, "tactic_accuracy": tactic, "relative_premise_accuracy": premise}
    )
    print(f"tactic_accuracy {tactic:.4f}")
    print(f"relative_premise_accuracy {premise:.4f}")
    return 0


def cmd_prove(args) -> int:
    config = ProverConfig(
        k1=args.k1, k2=args.k2, max_expansions=args.max_expansions,
        time_budget_s=args.time_budget, workers=args.workers
    )
    corpus = load_corpus(args.theorem_db, args.proof_log)
    theorems = corpus.db.theorems([args.split])
    engine = ToyTacticEngine(corpus.db.statements)
    run_logger.log_event(
        action="Effective prover config",
        component="cli",
        details={"policy": args.policy, "split": args.split, **config.model_dump()}
    )

    if args.policy == "oracle":
        policy = OraclePolicy(corpus.log)
    elif args.policy == "random":
        policy = RandomPolicy(engine.n_tactics, config, args.seed)
    else:
        if not args.checkpoint:
            print("[ERROR] --checkpoint is required for the model policy")
            return 1
        model = load_model(args.checkpoint, corpus.db.statements)
        cache = None
        if args.premise_cache:
            try:
                cache = PremiseCache.load(args.premise_cache, model.identity)
            except (ModelError, OSError):
                cache = None
        if cache is None:
            cache = PremiseCache.build(model, workers=config.workers)
            if args.premise_cache:
                cache.save(args.premise_cache)
        policy = ModelPolicy(model, cache, config)

    report = evaluate_prover(theorems, engine, policy, config)
    if args.report:
        write_report(report, args.report)
    s = report.summary
    print(f"closed {s.closed}/{s.theorems} ({100 * s.closed_fraction:.2f}%) "
          f"mean_proof_length {s.mean_proof_length:.2f} tactic_success_rate {s.tactic_success_rate:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="holgraph",
        description="Graph representations of HOL terms and GNN-guided proof search"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("parse", help="Echo terms in canonical S-expression form")
    p.add_argument("--term", action="append", help="Term to parse (repeatable; default: stdin)")
    p.add_argument("--output", help="Output file (default: stdout)")
    p.set_defaults(handler=cmd_parse)

    p = sub.add_parser("graphify", help="Emit the graph interchange format")
    p.add_argument("--term", action="append", help="Term to convert (repeatable; default: stdin)")
    p.add_argument("--output", help="Output file (default: stdout)")
    add_representation_flags(p)
    p.set_defaults(handler=cmd_graphify)

    p = sub.add_parser("stats", help="Node-count and depth tables and histograms")
    p.add_argument("--term", action="append", help="Term (repeatable)")
    p.add_argument("--theorem-db", help="Use every statement of a theorem database")
    p.add_argument("--output", help="Output file (default: stdout)")
    p.add_argument("--histogram-csv", help="Also write histograms as CSV")
    add_representation_flags(p)
    p.set_defaults(handler=cmd_stats)

    p = sub.add_parser("gen-corpus", help="Write a synthetic toy corpus")
    add_corpus_flags(p)
    p.add_argument("--n-theorems", type=int, default=100)
    p.add_argument("--n-tactics", type=int, default=HeadConfig().n_tactics)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(handler=cmd_gen_corpus)

    defaults = RunConfig()
    p = sub.add_parser("train", help="Train the two-tower model")
    add_corpus_flags(p)
    add_representation_flags(p)
    p.add_argument("--hops", type=int, default=defaults.gnn.hops, help="Message passing rounds")
    p.add_argument("--steps", type=int, default=defaults.train.steps)
    p.add_argument("--eval-every", type=int, default=defaults.train.eval_every)
    p.add_argument("--precision", choices=["float32", "float64"], default=Config.PRECISION)
    p.add_argument("--checkpoint", help="Best checkpoint path (.npz)")
    p.add_argument("--metrics-log", help="Metrics JSONL path")
    p.add_argument("--resume", help="Checkpoint to continue from, usually <name>.last.npz")
    p.add_argument("--token-size", type=int, default=defaults.gnn.token_embedding_size)
    p.add_argument("--node-size", type=int, default=defaults.gnn.node_embedding_size)
    p.add_argument("--mlp-hidden-size", type=int, default=defaults.gnn.mlp_hidden_size)
    p.add_argument("--pooling-widths", type=int, nargs=2, default=list(defaults.gnn.pooling_widths),
                   metavar=("W1", "W2"), help="Projection widths before max pooling")
    p.add_argument("--gnn-dropout-keep", type=float, default=defaults.gnn.dropout_keep)
    p.add_argument("--dropout-keep", type=float, default=defaults.head.dropout_keep)
    p.add_argument("--n-tactics", type=int, default=defaults.head.n_tactics)
    p.add_argument("--tactic-weight", type=float, default=defaults.loss.tactic)
    p.add_argument("--pairwise-weight", type=float, default=defaults.loss.pairwise)
    p.add_argument("--aucroc-weight", type=float, default=defaults.loss.aucroc)
    p.add_argument("--learning-rate", type=float, default=defaults.optimizer.learning_rate)
    p.add_argument("--decay-rate", type=float, default=defaults.optimizer.decay_rate)
    p.add_argument("--decay-steps", type=int, default=defaults.optimizer.decay_steps)
    p.add_argument("--polyak-rate", type=float, default=defaults.optimizer.polyak_rate)
    p.add_argument("--batch-goals", type=int, default=defaults.batch.goals)
    p.add_argument("--negatives-per-goal", type=int, default=defaults.batch.negatives_per_goal)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", help="Print the proxy metrics of a checkpoint")
    add_corpus_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=["train", "valid", "test"], default="valid")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("prove", help="Run guided proof search and write a report")
    add_corpus_flags(p)
    p.add_argument("--checkpoint")
    p.add_argument("--split", choices=["train", "valid", "test"], default="valid")
    p.add_argument("--policy", choices=["model", "random", "oracle"], default="model")
    p.add_argument("--k1", type=int, default=defaults.prover.k1)
    p.add_argument("--k2", type=int, default=defaults.prover.k2)
    p.add_argument("--max-expansions", type=int, default=defaults.prover.max_expansions)
    p.add_argument("--time-budget", type=float, default=defaults.prover.time_budget_s)
    p.add_argument("--workers", type=int, default=Config.WORKERS)
    p.add_argument("--premise-cache", help="Premise embedding cache (.npz); rebuilt if stale")
    p.add_argument("--report", help="Report JSONL path")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(handler=cmd_prove)
    return parser


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Parse arguments and dispatch; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    is_valid, error_msg = Config.validate_setup()
    if not is_valid:
        print(f"[ERROR] {error_msg}")
        return 1

    try:
        return args.handler(args)
    except ValidationError as e:
        print(f"[ERROR] Invalid option value: {e.errors()[0]['msg']}")
        return 2
    except MODULE_ERRORS as e:
        run_logger.log_event(
            action=f"{args.command} failed",
            component="cli",
            details={"argv": list(argv) if argv is not None else sys.argv[1:]},
            success=False,
            error_message=str(e)
        )
        print(f"[ERROR] {e}")
        return 1


def main():
    """Main function"""
    sys.exit(run())


if __name__ == "__main__":
    main()
