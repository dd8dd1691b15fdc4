import os
import tempfile

# Keep the audit log out of the working tree and off the console.
os.environ.setdefault("HOLGRAPH_LOG_FILE", os.path.join(tempfile.mkdtemp(prefix="holgraph-"), "run_log.jsonl"))
os.environ.setdefault("HOLGRAPH_LOG_CONSOLE", "0")

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from corpus import generate_toy_corpus  # noqa: E402
from schemas import (  # noqa: E402
    BatchConfig, GnnConfig, HeadConfig, OptimizerConfig, RunConfig, TrainConfig
)
from sexpr import Atom, Node, SExpr, parse  # noqa: E402

FORALL_REFL = (
    "(a (c (fun (fun A bool) bool) !) "
    "(l (v A x) (a (a (c (fun A (fun A bool)) =) (v A x)) (v A x))))"
)


@pytest.fixture
def forall_refl() -> SExpr:
    """!x. x = x"""
    return parse(FORALL_REFL)


def random_term(rng: np.random.Generator, depth: int = 5) -> SExpr:
    """Random well-formed term: atoms from a small alphabet, arity 1 or 2."""
    if depth == 0 or rng.random() < 0.25:
        return Atom(str(rng.choice(["x", "y", "A", "bool", "c0"])))
    head = Atom(str(rng.choice(["a", "v", "c", "fun", "l"])))
    arity = int(rng.integers(1, 3))
    return Node((head,) + tuple(random_term(rng, depth - 1) for _ in range(arity)))


@pytest.fixture
def random_terms():
    rng = np.random.default_rng(7)
    return [random_term(rng) for _ in range(40)]


def tiny_config(**train) -> RunConfig:
    """A model small enough to train for a few steps inside a unit test."""
    return RunConfig(
        gnn=GnnConfig(hops=2, token_embedding_size=6, node_embedding_size=6,
                      mlp_hidden_size=8, pooling_widths=(8, 12), residual_init_scale=0.5),
        head=HeadConfig(tactic_hidden=(8, 8), combiner_hidden=(8, 4)),
        optimizer=OptimizerConfig(learning_rate=1e-3),
        batch=BatchConfig(goals=3, negatives_per_goal=2),
        train=TrainConfig(**{"steps": 4, "eval_every": 2, "seed": 3, "precision": "float64",
                             "selection_every": 5, **train})
    )


@pytest.fixture
def tiny_run_config() -> RunConfig:
    return tiny_config()


@pytest.fixture(scope="session")
def toy_corpus():
    return generate_toy_corpus(seed=11, n_theorems=40)
