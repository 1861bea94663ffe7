"""Response-masked negative log-likelihood, AdamW, and the training loop."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from .errors import DataError, NumericError
from .kg import ConceptIndex, ConceptMatchSet, KnowledgeGraph
from .model import (
    KNOWLEDGE_PARAMS,
    ModelConfig,
    ModelParams,
    backward_batch,
    forward_batch,
    init_params,
    log_softmax,
    softmax,
)
from .tokenizer import EOS, PAD, SPECIAL_TOKENS, SequenceTooLongError, Vocabulary, build_input

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EncodedExample:
    input_ids: tuple[int, ...]       # S = [T_img, SEP, T_instr]
    response_ids: tuple[int, ...]    # r_1..r_P, EOS
    concepts: ConceptMatchSet = ConceptMatchSet()

    @property
    def full_ids(self) -> tuple[int, ...]:
        """Tokens the model reads: S followed by the response without its final token."""
        return self.input_ids + self.response_ids[:-1]


def encode_example(image_text: str, instruction: str, response: str, vocab: Vocabulary, index: ConceptIndex | None, max_len: int | None = None) -> EncodedExample:
    img = vocab.encode_text(image_text)
    instr = vocab.encode_text(instruction)
    S = build_input(img, instr, vocab)
    if not response.strip():
        raise DataError("example has an empty response")
    resp = tuple(vocab.encode_text(response)) + (EOS,)
    if max_len is not None and len(S) + len(resp) - 1 > max_len:
        raise SequenceTooLongError(f"example needs {len(S) + len(resp) - 1} positions, max_seq_len is {max_len}")
    concepts = index.match(S) if index is not None else ConceptMatchSet()
    return EncodedExample(tuple(S), resp, concepts)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    batch_size: int = 8
    total_steps: int = 100
    seed: int = 0
    freeze_kg_embeddings: bool = False
    disable_kg: bool = False
    optimizer: str = "adamw"  # "adamw" or "sgd" (plain gradient descent)

    def __post_init__(self):
        if self.learning_rate < 0:
            raise DataError("learning_rate must be non-negative")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise DataError("beta1 and beta2 must lie in (0, 1)")
        if self.eps <= 0 or self.weight_decay < 0:
            raise DataError("eps must be positive and weight_decay non-negative")
        if self.batch_size < 1 or self.total_steps < 0:
            raise DataError("batch_size must be >= 1 and total_steps >= 0")
        if self.optimizer not in ("adamw", "sgd"):
            raise DataError(f"unknown optimizer {self.optimizer!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        extra = set(obj) - known
        if extra:
            raise DataError(f"unknown train config fields: {sorted(extra)}")
        return cls(**obj)

    def frozen_params(self) -> set[str]:
        frozen = set()
        if self.disable_kg:
            frozen.update(KNOWLEDGE_PARAMS)
        if self.freeze_kg_embeddings:
            frozen.add("concept_embeddings")
        return frozen


# -- objective --------------------------------------------------------------

@dataclass
class Batch:
    ids: np.ndarray
    lengths: np.ndarray
    targets: np.ndarray
    loss_mask: np.ndarray
    concepts: list[ConceptMatchSet]


def collate(examples: Sequence[EncodedExample]) -> Batch:
    """Right-pads with PAD; only positions predicting a response token carry loss."""
    if not examples:
        raise DataError("cannot collate an empty batch")
    seqs = [ex.full_ids for ex in examples]
    T = max(len(s) for s in seqs)
    B = len(examples)
    ids = np.full((B, T), PAD, dtype=np.int64)
    targets = np.full((B, T), PAD, dtype=np.int64)
    mask = np.zeros((B, T))
    for b, ex in enumerate(examples):
        if len(ex.response_ids) < 2:
            raise DataError("example has an empty response")
        full = ex.input_ids + ex.response_ids
        n = len(full) - 1
        ids[b, :n] = full[:-1]
        targets[b, :n] = full[1:]
        mask[b, len(ex.input_ids) - 1 : n] = 1.0
    lengths = np.array([len(s) for s in seqs])
    return Batch(ids, lengths, targets, mask, [ex.concepts for ex in examples])


def _nll(logits, batch: Batch):
    """Per-example summed negative log-likelihood over response positions."""
    lp = log_softmax(logits, axis=-1)
    picked = np.take_along_axis(lp, batch.targets[..., None], axis=-1)[..., 0]
    return -(picked * batch.loss_mask).sum(axis=1)


def batch_loss(examples: Sequence[EncodedExample], params: ModelParams, use_kg: bool = True) -> float:
    batch = collate(examples)
    logits, _ = forward_batch(batch.ids, batch.lengths, params, batch.concepts if use_kg else None)
    return float(_nll(logits, batch).mean())


def loss(example: EncodedExample, params: ModelParams, use_kg: bool = True) -> float:
    """``-sum_t log P(r_t | S, r_<t)`` for one example."""
    return batch_loss([example], params, use_kg)


def loss_and_grads(examples: Sequence[EncodedExample], params: ModelParams, use_kg: bool = True, frozen: set[str] = frozenset()):
    """Mean-over-examples loss, its gradient, and the per-example losses."""
    batch = collate(examples)
    logits, cache = forward_batch(batch.ids, batch.lengths, params, batch.concepts if use_kg else None)
    per_example = _nll(logits, batch)
    B = len(examples)
    onehot = np.zeros_like(logits)
    np.put_along_axis(onehot, batch.targets[..., None], 1.0, axis=-1)
    dlogits = (softmax(logits, axis=-1) - onehot) * batch.loss_mask[..., None] / B
    grads = backward_batch(dlogits, cache, params)
    for name in frozen:
        grads[name] = np.zeros_like(grads[name])
    return float(per_example.mean()), grads, per_example


def backward(example: EncodedExample, params: ModelParams, use_kg: bool = True, frozen: set[str] = frozenset()) -> dict[str, np.ndarray]:
    return loss_and_grads([example], params, use_kg, frozen)[1]


# -- optimizer --------------------------------------------------------------

@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros(cls, params: ModelParams) -> "OptimizerState":
        return cls({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()}, 0)


def adamw_update(theta, g, m, v, k: int, lr: float, beta1: float, beta2: float, eps: float, weight_decay: float):
    """One decoupled-weight-decay Adam update for step ``k`` (1-based). Returns (theta, m, v)."""
    m = beta1 * m + (1.0 - beta1) * g
    v = beta2 * v + (1.0 - beta2) * g * g
    m_hat = m / (1.0 - beta1**k)
    v_hat = v / (1.0 - beta2**k)
    theta = theta - lr * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * theta)
    return theta, m, v


def adamw_step(params: ModelParams, grads: dict[str, np.ndarray], state: OptimizerState, config: TrainConfig, frozen: set[str] = frozenset()):
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise NumericError(f"non-finite gradient for {name} ({bad} entries) at step {state.step + 1}")
    state.step += 1
    for name in params:
        if name in frozen:
            continue
        if config.optimizer == "sgd":
            params[name] = params[name] - config.learning_rate * grads[name]
            continue
        params[name], state.m[name], state.v[name] = adamw_update(
            params[name], grads[name], state.m[name], state.v[name], state.step,
            config.learning_rate, config.beta1, config.beta2, config.eps, config.weight_decay,
        )
    return params, state


# -- loop -------------------------------------------------------------------

@dataclass
class TrainResult:
    params: ModelParams
    losses: list[float] = field(default_factory=list)
    state: OptimizerState | None = None


def train(
    dataset: Sequence[EncodedExample],
    kg: KnowledgeGraph | None,
    model_config: ModelConfig,
    train_config: TrainConfig,
    on_step: Callable[[int, float], None] | None = None,
    init: ModelParams | None = None,
) -> TrainResult:
    """Minimizes the mean per-example response NLL over ``dataset``.

    Deterministic given ``train_config.seed``: it seeds parameter init and
    the per-epoch shuffle. ``on_step(step, loss)`` sees the pre-update batch
    loss of every step.
    """
    if len(dataset) == 0:
        raise DataError("training dataset is empty")
    if init is None:
        init = init_params(model_config, train_config.seed, kg.embeddings if kg is not None else None)
    params = init.copy()
    frozen = train_config.frozen_params()
    use_kg = not train_config.disable_kg
    state = OptimizerState.zeros(params)
    order_rng = np.random.default_rng([train_config.seed, 1])
    bs = min(train_config.batch_size, len(dataset))

    losses = []
    order: list[int] = []
    for step in range(1, train_config.total_steps + 1):
        if len(order) < bs:
            order.extend(order_rng.permutation(len(dataset)).tolist())
        idx, order = order[:bs], order[bs:]
        value, grads, _ = loss_and_grads([dataset[i] for i in idx], params, use_kg, frozen)
        if not np.isfinite(value):
            raise NumericError(f"loss became non-finite at step {step}")
        adamw_step(params, grads, state, train_config, frozen)
        losses.append(value)
        if on_step is not None:
            on_step(step, value)
    return TrainResult(params, losses, state)


# -- gradient check ---------------------------------------------------------

def numerical_gradient(f: Callable[[], float], array: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of ``f`` with respect to every entry of ``array`` (perturbed in place)."""
    grad = np.zeros_like(array)
    flat = array.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        g[i] = (fp - fm) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max abs difference scaled by the larger of the two tensors' max magnitudes."""
    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric)) / scale)


def gradient_check(examples: Sequence[EncodedExample], params: ModelParams, use_kg: bool = True, h: float = 1e-5) -> dict[str, float]:
    """Relative error between analytic and central-difference gradients, per tensor."""
    params = params.copy()
    _, grads, _ = loss_and_grads(examples, params, use_kg)
    errors = {}
    for name in params:
        num = numerical_gradient(lambda: batch_loss(examples, params, use_kg), params[name], h)
        errors[name] = relative_error(grads[name], num)
    return errors


def random_problem(config: ModelConfig, seed: int, n_examples: int = 2) -> tuple[list[EncodedExample], ModelParams]:
    """Random examples and randomly perturbed parameters for gradient checks.

    Biases, gains and the knowledge path are moved off their init values so
    every tensor has a nontrivial gradient.
    """
    rng = np.random.default_rng(seed)
    params = init_params(config, seed)
    for name in params:
        params[name] = params[name] + rng.uniform(-0.3, 0.3, size=params[name].shape)
    content = np.arange(len(SPECIAL_TOKENS), config.vocab_size)
    if content.size == 0:
        raise DataError("vocabulary has no content tokens")
    examples = []
    for _ in range(n_examples):
        total = int(rng.integers(4, config.max_seq_len + 2))   # S plus response incl. EOS
        n_in = int(rng.integers(2, total - 1))
        ids = rng.choice(content, size=total - 1).tolist()
        S = tuple(ids[:n_in])
        resp = tuple(ids[n_in:]) + (EOS,)
        k = int(rng.integers(1, config.n_concepts + 1)) if config.n_concepts else 0
        concepts = ConceptMatchSet.of(rng.choice(config.n_concepts, size=k, replace=False).tolist()) if k else ConceptMatchSet()
        examples.append(EncodedExample(S, resp, concepts))
    return examples, params
