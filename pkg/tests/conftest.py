import numpy as np
import pytest

from cxrlm.kg import Concept, KnowledgeGraph, init_embeddings
from cxrlm.model import LanguageModel, ModelConfig, init_params
from cxrlm.tokenizer import Vocabulary

CONTENT = ("a", "b", "c", "d", "e", "f", "g", "h", "i", "j", "k", "l")


def tiny_kg(n_concepts: int = 4, d_know: int = 4, seed: int = 0) -> KnowledgeGraph:
    """Concept i has surface form CONTENT[i] plus synonym CONTENT[i + n_concepts] when that exists."""
    concepts = []
    for i in range(n_concepts):
        syn = (CONTENT[i + n_concepts],) if i + n_concepts < len(CONTENT) else ()
        concepts.append(Concept(i, CONTENT[i], syn, is_critical=i % 2 == 0))
    return KnowledgeGraph(concepts, [(0, "related_to", 1)] if n_concepts > 1 else [], init_embeddings(n_concepts, d_know, seed), d_know)


def tiny_lm(seed: int = 0, n_content: int = 8, d_model: int = 8, n_layers: int = 2, n_heads: int = 2,
            max_seq_len: int = 12, n_concepts: int = 4, d_know: int = 4, use_kg: bool = True, scale: float = 1.0) -> LanguageModel:
    """A random model; ``scale`` multiplies W_out to sharpen or flatten its distributions."""
    vocab = Vocabulary(CONTENT[:n_content])
    kg = tiny_kg(n_concepts, d_know, seed)
    config = ModelConfig(d_model=d_model, n_layers=n_layers, n_heads=n_heads, d_ff=2 * d_model, d_know=d_know,
                         vocab_size=len(vocab), max_seq_len=max_seq_len, n_concepts=n_concepts)
    params = init_params(config, seed, kg.embeddings)
    rng = np.random.default_rng([seed, 99])
    params["b_proj_k"] = rng.normal(size=d_model) * 0.5
    params["W_out"] = params["W_out"] * scale
    return LanguageModel(params, vocab, kg, use_kg=use_kg)


@pytest.fixture
def lm():
    return tiny_lm()


@pytest.fixture
def kg():
    return tiny_kg()


# -- acceptance summary -----------------------------------------------------

ACCEPTANCE_RESULTS: dict[int, tuple[str, str, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        name, status, detail = ACCEPTANCE_RESULTS[n]
        terminalreporter.write_line(f"[{status}] criterion {n}: {name} - {detail}")
