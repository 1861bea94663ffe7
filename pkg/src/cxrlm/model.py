"""Decoder-only transformer with sequence-level knowledge augmentation.

Forward path for one sequence ``S`` of length N:

    E   = token_embedding[S] + positional_embedding[:N]
    E'  = E + (W_proj_k @ k_S + b_proj_k)          # same shift on every row
    H_l = LN(H' + FFN(H')),  H' = LN(H_{l-1} + MultiHead(H_{l-1}))   # post-norm
    logits = H_L @ W_out + b_out

``k_S`` is the mean embedding of the knowledge-graph concepts matched in the
input. All arithmetic is float64. Gradients are computed by the hand-written
reverse pass in :func:`backward_batch`.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from .errors import DataError
from .kg import ConceptIndex, ConceptMatchSet, KnowledgeGraph
from .tokenizer import PAD, SequenceTooLongError, Vocabulary

LN_EPS = 1e-5
KNOWLEDGE_PARAMS = ("W_proj_k", "b_proj_k", "concept_embeddings")
LAYER_PARAMS = ("W_Q", "W_K", "W_V", "W_O", "ln1_gain", "ln1_bias", "W_1", "b_1", "W_2", "b_2", "ln2_gain", "ln2_bias")


@dataclass(frozen=True)
class ModelConfig:
    d_model: int
    n_layers: int
    n_heads: int
    d_ff: int
    d_know: int
    vocab_size: int
    max_seq_len: int
    n_concepts: int = 0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not isinstance(v, int) or isinstance(v, bool):
                raise DataError(f"ModelConfig.{f.name} must be an integer, got {v!r}")
            if v < (0 if f.name == "n_concepts" else 1):
                raise DataError(f"ModelConfig.{f.name} must be positive, got {v}")
        if self.d_model % self.n_heads:
            raise DataError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.max_seq_len < 2:
            raise DataError("max_seq_len must be at least 2")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        extra = set(obj) - known - {"d_head"}
        if extra:
            raise DataError(f"unknown model config fields: {sorted(extra)}")
        try:
            cfg = cls(**{k: v for k, v in obj.items() if k in known})
        except TypeError as exc:
            raise DataError(f"bad model config: {exc}") from exc
        if "d_head" in obj and obj["d_head"] != cfg.d_head:
            raise DataError(f"d_head={obj['d_head']} disagrees with d_model/n_heads={cfg.d_head}")
        return cfg


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    D, F, V = config.d_model, config.d_ff, config.vocab_size
    shapes = {
        "token_embedding": (V, D),
        "positional_embedding": (config.max_seq_len, D),
    }
    for l in range(config.n_layers):
        layer = {
            "W_Q": (D, D), "W_K": (D, D), "W_V": (D, D), "W_O": (D, D),
            "ln1_gain": (D,), "ln1_bias": (D,),
            "W_1": (D, F), "b_1": (F,), "W_2": (F, D), "b_2": (D,),
            "ln2_gain": (D,), "ln2_bias": (D,),
        }
        shapes.update({f"layers.{l}.{k}": v for k, v in layer.items()})
    shapes["W_proj_k"] = (D, config.d_know)
    shapes["b_proj_k"] = (D,)
    shapes["W_out"] = (D, V)
    shapes["b_out"] = (V,)
    shapes["concept_embeddings"] = (config.n_concepts, config.d_know)
    return shapes


class ModelParams:
    """Named float64 tensors with shapes fixed by a ``ModelConfig``."""

    def __init__(self, config: ModelConfig, tensors: dict[str, np.ndarray]):
        self.config = config
        shapes = param_shapes(config)
        if set(tensors) != set(shapes):
            missing, extra = set(shapes) - set(tensors), set(tensors) - set(shapes)
            raise DataError(f"parameter set mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        self.tensors = {}
        for name, shape in shapes.items():
            arr = np.asarray(tensors[name], dtype=np.float64)
            if arr.shape != shape:
                raise DataError(f"parameter {name} has shape {arr.shape}, expected {shape}")
            self.tensors[name] = arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __setitem__(self, name: str, value: np.ndarray):
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self.tensors[name].shape:
            raise DataError(f"parameter {name} has shape {self.tensors[name].shape}, got {value.shape}")
        self.tensors[name] = value

    def __iter__(self):
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def zeros_like(self) -> "ModelParams":
        return ModelParams(self.config, {k: np.zeros_like(v) for k, v in self.tensors.items()})

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.tensors.values())

    def equals(self, other: "ModelParams") -> bool:
        return self.config == other.config and all(
            self.tensors[k].tobytes() == other.tensors[k].tobytes() for k in self.tensors
        )

    def n_parameters(self) -> int:
        return sum(v.size for v in self.tensors.values())


def init_params(config: ModelConfig, seed: int, concept_embeddings: np.ndarray | None = None) -> ModelParams:
    """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases 0, layer-norm gains 1.

    Embedding tables are lookups (fan-in 1) and draw from U(-1, 1). Concept
    embeddings are copied from ``concept_embeddings`` when given, otherwise
    drawn from U(-0.1, 0.1).
    """
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(config).items():
        short = name.rsplit(".", 1)[-1]
        if short.endswith("_gain"):
            tensors[name] = np.ones(shape)
        elif len(shape) == 1:
            tensors[name] = np.zeros(shape)
        elif short in ("token_embedding", "positional_embedding"):
            tensors[name] = rng.uniform(-1.0, 1.0, size=shape)
        elif short == "concept_embeddings":
            if concept_embeddings is not None:
                tensors[name] = np.array(concept_embeddings, dtype=np.float64)
            else:
                tensors[name] = rng.uniform(-0.1, 0.1, size=shape)
        else:
            # W_proj_k multiplies k on the right (W @ k): fan-in is its column count
            fan_in = shape[1] if short == "W_proj_k" else shape[0]
            bound = 1.0 / math.sqrt(fan_in)
            tensors[name] = rng.uniform(-bound, bound, size=shape)
    return ModelParams(config, tensors)


# -- primitives -------------------------------------------------------------

def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    z = x - m
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def _layer_norm(x, gain, bias):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * rstd
    return xhat * gain + bias, (xhat, rstd)


def _layer_norm_backward(dy, gain, cache):
    xhat, rstd = cache
    dxhat = dy * gain
    D = dy.shape[-1]
    dx = rstd / D * (D * dxhat - dxhat.sum(axis=-1, keepdims=True) - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
    red = tuple(range(dy.ndim - 1))
    return dx, (dy * xhat).sum(axis=red), dy.sum(axis=red)


def layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray) -> np.ndarray:
    return _layer_norm(x, gain, bias)[0]


def _attention_mask(lengths: np.ndarray, T: int) -> np.ndarray:
    """(B, 1, T, T) boolean: query i may attend key j iff j <= i and j is not padding."""
    causal = np.tril(np.ones((T, T), dtype=bool))
    keys = np.arange(T)[None, :] < lengths[:, None]
    return (causal[None, :, :] & keys[:, None, :])[:, None, :, :]


def _mm(x, w):
    # (..., n) @ (n, m) through one 2-D BLAS call
    return (x.reshape(-1, x.shape[-1]) @ w).reshape(*x.shape[:-1], w.shape[1])


# -- batched forward / backward --------------------------------------------

@dataclass
class BatchCache:
    ids: np.ndarray
    lengths: np.ndarray
    mask: np.ndarray
    knowledge: np.ndarray | None        # (B, d_know) aggregated vectors
    concept_sets: list | None
    layers: list
    final: np.ndarray


def knowledge_vectors(concept_sets: Sequence[ConceptMatchSet], params: ModelParams) -> np.ndarray:
    table = params["concept_embeddings"]
    out = np.zeros((len(concept_sets), params.config.d_know))
    for b, cs in enumerate(concept_sets):
        if len(cs):
            out[b] = table[list(cs.concept_ids)].mean(axis=0)
    return out


def _attention_forward(X, p, prefix, mask, n_heads):
    B, T, D = X.shape
    dh = D // n_heads
    def heads(M):
        return M.reshape(B, T, n_heads, dh).transpose(0, 2, 1, 3)
    Q = heads(_mm(X, p[prefix + "W_Q"]))
    K = heads(_mm(X, p[prefix + "W_K"]))
    V = heads(_mm(X, p[prefix + "W_V"]))
    scale = 1.0 / math.sqrt(dh)
    scores = np.where(mask, (Q @ K.transpose(0, 1, 3, 2)) * scale, -np.inf)
    A = softmax(scores, axis=-1)
    O = (A @ V).transpose(0, 2, 1, 3).reshape(B, T, D)
    out = _mm(O, p[prefix + "W_O"])
    return out, (X, Q, K, V, A, O)


def _attention_backward(dout, p, prefix, cache, n_heads):
    X, Q, K, V, A, O = cache
    B, T, D = X.shape
    dh = D // n_heads
    scale = 1.0 / math.sqrt(dh)
    grads = {prefix + "W_O": O.reshape(-1, D).T @ dout.reshape(-1, D)}
    dO = _mm(dout, p[prefix + "W_O"].T).reshape(B, T, n_heads, dh).transpose(0, 2, 1, 3)
    dA = dO @ V.transpose(0, 1, 3, 2)
    dV = A.transpose(0, 1, 3, 2) @ dO
    dS = A * (dA - (dA * A).sum(axis=-1, keepdims=True)) * scale
    dQ = dS @ K
    dK = dS.transpose(0, 1, 3, 2) @ Q
    def merge(M):
        return M.transpose(0, 2, 1, 3).reshape(B * T, D)
    Xf = X.reshape(-1, D)
    dX = np.zeros((B * T, D))
    for name, dM in (("W_Q", dQ), ("W_K", dK), ("W_V", dV)):
        dM = merge(dM)
        grads[prefix + name] = Xf.T @ dM
        dX += dM @ p[prefix + name].T
    return dX.reshape(B, T, D), grads


def _block_forward(H, p, prefix, mask, n_heads):
    attn, attn_cache = _attention_forward(H, p, prefix, mask, n_heads)
    H1, ln1 = _layer_norm(H + attn, p[prefix + "ln1_gain"], p[prefix + "ln1_bias"])
    Z = _mm(H1, p[prefix + "W_1"]) + p[prefix + "b_1"]
    R = np.maximum(Z, 0.0)
    F = _mm(R, p[prefix + "W_2"]) + p[prefix + "b_2"]
    H2, ln2 = _layer_norm(H1 + F, p[prefix + "ln2_gain"], p[prefix + "ln2_bias"])
    return H2, (attn_cache, ln1, H1, Z, R, ln2)


def _block_backward(dH2, p, prefix, cache, n_heads):
    attn_cache, ln1, H1, Z, R, ln2 = cache
    D = H1.shape[-1]
    grads = {}
    dR2, grads[prefix + "ln2_gain"], grads[prefix + "ln2_bias"] = _layer_norm_backward(dH2, p[prefix + "ln2_gain"], ln2)
    grads[prefix + "W_2"] = R.reshape(-1, R.shape[-1]).T @ dR2.reshape(-1, D)
    grads[prefix + "b_2"] = dR2.sum(axis=(0, 1))
    dZ = _mm(dR2, p[prefix + "W_2"].T) * (Z > 0)
    grads[prefix + "W_1"] = H1.reshape(-1, D).T @ dZ.reshape(-1, dZ.shape[-1])
    grads[prefix + "b_1"] = dZ.sum(axis=(0, 1))
    dH1 = dR2 + _mm(dZ, p[prefix + "W_1"].T)
    dR1, grads[prefix + "ln1_gain"], grads[prefix + "ln1_bias"] = _layer_norm_backward(dH1, p[prefix + "ln1_gain"], ln1)
    dX, attn_grads = _attention_backward(dR1, p, prefix, attn_cache, n_heads)
    grads.update(attn_grads)
    return dR1 + dX, grads


def forward_batch(ids: np.ndarray, lengths: np.ndarray, params: ModelParams, concept_sets: Sequence[ConceptMatchSet] | None = None):
    """Logits (B, T, V) for right-padded ``ids``; ``concept_sets=None`` skips knowledge augmentation."""
    cfg = params.config
    ids = np.asarray(ids, dtype=np.int64)
    lengths = np.asarray(lengths, dtype=np.int64)
    B, T = ids.shape
    if T > cfg.max_seq_len:
        raise SequenceTooLongError(f"sequence length {T} exceeds max_seq_len {cfg.max_seq_len}")
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise DataError("token id outside the vocabulary")
    H = params["token_embedding"][ids] + params["positional_embedding"][:T]
    kvec = None
    if concept_sets is not None:
        kvec = knowledge_vectors(concept_sets, params)
        shift = kvec @ params["W_proj_k"].T + params["b_proj_k"]
        H = H + shift[:, None, :]
    mask = _attention_mask(lengths, T)
    layer_caches = []
    for l in range(cfg.n_layers):
        H, c = _block_forward(H, params, f"layers.{l}.", mask, cfg.n_heads)
        layer_caches.append(c)
    logits = _mm(H, params["W_out"]) + params["b_out"]
    cache = BatchCache(ids, lengths, mask, kvec, None if concept_sets is None else list(concept_sets), layer_caches, H)
    return logits, cache


def backward_batch(dlogits: np.ndarray, cache: BatchCache, params: ModelParams) -> dict[str, np.ndarray]:
    """Gradients of ``sum(dlogits * logits)`` with respect to every parameter."""
    cfg = params.config
    D, V = cfg.d_model, cfg.vocab_size
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    grads["W_out"] = cache.final.reshape(-1, D).T @ dlogits.reshape(-1, V)
    grads["b_out"] = dlogits.sum(axis=(0, 1))
    dH = _mm(dlogits, params["W_out"].T)
    for l in reversed(range(cfg.n_layers)):
        dH, g = _block_backward(dH, params, f"layers.{l}.", cache.layers[l], cfg.n_heads)
        grads.update(g)
    B, T, _ = dH.shape
    np.add.at(grads["token_embedding"], cache.ids.reshape(-1), dH.reshape(-1, D))
    grads["positional_embedding"][:T] = dH.sum(axis=0)
    if cache.knowledge is not None:
        dshift = dH.sum(axis=1)
        grads["W_proj_k"] = dshift.T @ cache.knowledge
        grads["b_proj_k"] = dshift.sum(axis=0)
        dk = dshift @ params["W_proj_k"]
        for b, cs in enumerate(cache.concept_sets):
            if len(cs):
                np.add.at(grads["concept_embeddings"], list(cs.concept_ids), dk[b] / len(cs))
    return grads


# -- single-sequence API ----------------------------------------------------

def _as_ids(seq) -> np.ndarray:
    return np.asarray(list(seq), dtype=np.int64)


def embed(seq: Sequence[int], params: ModelParams) -> np.ndarray:
    ids = _as_ids(seq)
    if len(ids) > params.config.max_seq_len:
        raise SequenceTooLongError(f"sequence length {len(ids)} exceeds max_seq_len {params.config.max_seq_len}")
    return params["token_embedding"][ids] + params["positional_embedding"][: len(ids)]


def augment(E: np.ndarray, k_tilde: np.ndarray, params: ModelParams) -> np.ndarray:
    return E + (params["W_proj_k"] @ k_tilde + params["b_proj_k"])[None, :]


def attention(H: np.ndarray, params: ModelParams, layer: int = 0) -> np.ndarray:
    """Masked multi-head self-attention of one layer, output projection included."""
    N = H.shape[0]
    mask = _attention_mask(np.array([N]), N)
    out, _ = _attention_forward(H[None], params, f"layers.{layer}.", mask, params.config.n_heads)
    return out[0]


def block(H: np.ndarray, params: ModelParams, layer: int = 0) -> np.ndarray:
    N = H.shape[0]
    mask = _attention_mask(np.array([N]), N)
    out, _ = _block_forward(H[None], params, f"layers.{layer}.", mask, params.config.n_heads)
    return out[0]


@dataclass
class ForwardTrace:
    logits: np.ndarray          # (N, vocab_size)
    cache: BatchCache

    def probs(self) -> np.ndarray:
        return softmax(self.logits, axis=-1)

    def log_probs(self) -> np.ndarray:
        return log_softmax(self.logits, axis=-1)


def forward(seq: Sequence[int], params: ModelParams, knowledge: ConceptMatchSet | None = None) -> ForwardTrace:
    """Per-position logits; ``knowledge=None`` runs the model without augmentation."""
    ids = _as_ids(seq)
    logits, cache = forward_batch(ids[None], np.array([len(ids)]), params, None if knowledge is None else [knowledge])
    return ForwardTrace(logits[0], cache)


class LanguageModel:
    """Parameters bundled with the vocabulary and knowledge graph they were trained with."""

    def __init__(self, params: ModelParams, vocab: Vocabulary, kg: KnowledgeGraph | None, use_kg: bool = True):
        if len(vocab) != params.config.vocab_size:
            raise DataError(f"vocabulary has {len(vocab)} tokens, model expects {params.config.vocab_size}")
        if kg is not None and kg.n_concepts != params.config.n_concepts:
            raise DataError(f"knowledge graph has {kg.n_concepts} concepts, model expects {params.config.n_concepts}")
        self.params = params
        self.vocab = vocab
        self.kg = kg
        self.use_kg = use_kg and kg is not None
        self.index = ConceptIndex(kg, vocab) if kg is not None else None

    @property
    def config(self) -> ModelConfig:
        return self.params.config

    def concepts(self, ids: Sequence[int]) -> ConceptMatchSet:
        """Concepts whose surface form occurs among ``ids``."""
        return self.index.match(ids) if self.index is not None else ConceptMatchSet()

    def knowledge_for(self, ids: Sequence[int]) -> ConceptMatchSet | None:
        return self.concepts(ids) if self.use_kg else None

    def forward(self, ids: Sequence[int], context_len: int | None = None) -> ForwardTrace:
        """Concepts are matched over ``ids[:context_len]`` (the whole sequence by default)."""
        ids = list(ids)
        ctx = ids if context_len is None else ids[:context_len]
        return forward(ids, self.params, self.knowledge_for(ctx))

    def next_logits(self, ids: Sequence[int]) -> np.ndarray:
        return self.forward(ids).logits[-1]
