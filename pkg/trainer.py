"""
Training loop with proxy-metric checkpoint selection.

Every ``eval_every`` steps the Polyak-averaged parameters are scored on the
held-out selection theorems (tactic accuracy plus relative premise
accuracy); the best score is saved to the checkpoint path and the final
state to ``<name>.last.npz``.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from corpus import (
    Corpus, extract_examples, negative_pool, relative_premise_accuracy, selection_split, tactic_accuracy
)
from gnn import Vocabulary
from logger import MetricsLogger, run_logger
from model import GraphCache, ModelError, ModelParams, TwoTowerModel, build_batch, compute_loss
from numerics import OptimizerState, adam_step, dtype_of, load_checkpoint, save_checkpoint
from schemas import MetricRecord, RunConfig


@dataclass
class TrainSummary:
    steps: int
    applied_steps: int
    best_score: Optional[float] = None
    best_step: Optional[int] = None
    records: List[MetricRecord] = field(default_factory=list)


def last_checkpoint_path(path) -> Path:
    path = Path(path)
    return path.with_name(f"{path.stem}.last{path.suffix or '.npz'}")


class Trainer:
    """Owns the live parameters, optimizer state and sampling rng of one run"""

    def __init__(self, corpus: Corpus, config: RunConfig, metrics_log: Optional[str] = None):
        self.config = config
        self.corpus = corpus
        seed = config.train.seed

        train_theorems = [r.index for r in corpus.db.theorems(["train"])]
        kept, held_out = selection_split(train_theorems, config.train.selection_every)
        self.examples = extract_examples(corpus, ["train"], set(kept))
        self.selection = extract_examples(corpus, ["train"], set(held_out))
        if not self.examples:
            raise ModelError("No training examples in the corpus")
        self.pool = negative_pool(self.examples)

        graphs = GraphCache(config.representation)
        statements = corpus.db.statements
        vocab = Vocabulary.from_graphs(
            [graphs(s) for s in statements] + [graphs(e.goal) for e in self.examples])
        params = ModelParams.create(len(vocab), config, seed, dtype_of(config.train.precision))
        self.model = TwoTowerModel(params, vocab, config, statements, graphs)
        self.state = OptimizerState.create(params.store, config.optimizer)
        self.rng = np.random.default_rng([seed, 1])
        self.completed_steps = 0
        self.best: Optional[Tuple[float, int]] = None
        self.metrics = MetricsLogger(metrics_log) if metrics_log else None

    def eval_model(self) -> TwoTowerModel:
        """Polyak-averaged parameters; evaluation never uses dropout"""
        m = self.model
        return TwoTowerModel(m.params.bind(self.state.shadow), m.vocab, self.config, m.statements, m.graphs)

    def step(self) -> Optional[Tuple[float, dict]]:
        """One batch and one optimizer update; None if the step was rejected."""
        batch = build_batch(self.examples, self.pool, self.config.batch, self.rng)
        try:
            total, components, grads = compute_loss(batch, self.model, training=True, rng=self.rng)
        except ModelError as e:
            run_logger.log_event(
                action="Skipped training step",
                component="trainer",
                details={"step": self.state.step + 1},
                success=False,
                error_message=str(e)
            )
            return None
        if not adam_step(self.state, self.model.params.store, grads):
            return None
        return total, components

    def evaluate(self, step: int) -> Tuple[float, float]:
        """(tactic accuracy, relative premise accuracy) on the selection split"""
        examples = self.selection or self.examples
        model = self.eval_model()
        rng = np.random.default_rng([self.config.train.seed, step])
        return tactic_accuracy(model, examples), relative_premise_accuracy(model, examples, rng)

    def save(self, path, extra: Optional[dict] = None) -> str:
        meta = {
            "run_config": self.config.model_dump(mode="json"),
            "vocabulary": list(self.model.vocab.tokens),
            "completed_steps": self.completed_steps,
        }
        if self.best is not None:
            meta["best_score"], meta["best_step"] = self.best
        meta.update(extra or {})
        ckpt_id = save_checkpoint(path, self.model.params.store, self.state, meta)
        run_logger.log_event(
            action="Saved checkpoint",
            component="trainer",
            details={"path": str(path), "step": self.state.step, "checkpoint_id": ckpt_id[:12]}
        )
        return ckpt_id

    def resume(self, path) -> int:
        """
        Continue from a checkpoint written by ``train``: parameters, Adam
        moments, Polyak shadow, step counters and the best selection score.
        Batches after a resume come from an rng keyed on the resumed step.
        Returns the number of completed steps.

        Raises:
            ModelError: if the checkpoint was trained on another vocabulary
                or has a different parameter layout.
        """
        ckpt = load_checkpoint(path)
        if ckpt.meta.get("vocabulary") != list(self.model.vocab.tokens):
            raise ModelError(f"{path} was trained on another vocabulary")
        store = self.model.params.store
        if set(ckpt.params) != set(store) or any(ckpt.params[k].shape != v.shape for k, v in store.items()):
            raise ModelError(f"{path} does not match the configured model")

        dtype = dtype_of(self.config.train.precision)
        m = self.model
        params = m.params.bind({k: v.astype(dtype) for k, v in ckpt.params.items()})
        self.model = TwoTowerModel(params, m.vocab, self.config, m.statements, m.graphs)
        self.state = ckpt.optimizer_state(self.config.optimizer, dtype)
        self.completed_steps = int(ckpt.meta.get("completed_steps", ckpt.step))
        if ckpt.meta.get("best_score") is not None:
            self.best = (float(ckpt.meta["best_score"]), int(ckpt.meta["best_step"]))
        self.rng = np.random.default_rng([self.config.train.seed, 1, self.completed_steps])
        run_logger.log_event(
            action="Resumed training",
            component="trainer",
            details={"path": str(path), "completed_steps": self.completed_steps, "adam_step": self.state.step}
        )
        return self.completed_steps

    def train(self, steps: Optional[int] = None, checkpoint: Optional[str] = None) -> TrainSummary:
        """
        Run until ``steps`` loop steps are complete in total; after a
        ``resume`` numbering continues from the checkpoint.
        """
        steps = self.config.train.steps if steps is None else steps
        every = self.config.train.eval_every
        summary = TrainSummary(steps=steps, applied_steps=0)
        if self.best is not None:
            summary.best_score, summary.best_step = self.best
        losses = (float("nan"), {"tactic": float("nan"), "pairwise": float("nan"), "aucroc": float("nan")})

        for step in range(self.completed_steps + 1, steps + 1):
            result = self.step()
            self.completed_steps = step
            if result is not None:
                summary.applied_steps += 1
                losses = result
            record = MetricRecord(
                step=step,
                total_loss=losses[0],
                tactic_loss=losses[1]["tactic"],
                pairwise_loss=losses[1]["pairwise"],
                aucroc_loss=losses[1]["aucroc"],
                learning_rate=self.state.learning_rate(max(self.state.step, 1))
            )
            if step % every == 0 or step == steps:
                tactic_acc, premise_acc = self.evaluate(step)
                record.tactic_accuracy = tactic_acc
                record.relative_premise_accuracy = premise_acc
                score = tactic_acc + premise_acc
                if summary.best_score is None or score > summary.best_score:
                    summary.best_score, summary.best_step = score, step
                    self.best = (score, step)
                    record.selected = True
                    if checkpoint:
                        self.save(checkpoint, {"selection_score": score, "selected_step": step})
            if self.metrics:
                self.metrics.write(record)
            summary.records.append(record)

        if checkpoint:
            self.save(last_checkpoint_path(checkpoint))
        return summary
