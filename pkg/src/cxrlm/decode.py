"""Autoregressive response generation: greedy, beam, nucleus sampling.

Every strategy recomputes the matched concept set over the full current
sequence (input plus generated prefix) before each step. Special tokens other
than EOS are never emitted.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from .errors import DataError
from .model import LanguageModel, log_softmax, softmax
from .tokenizer import EOS, SPECIAL_TOKENS, SequenceTooLongError

STRATEGIES = ("greedy", "beam", "nucleus")


@dataclass(frozen=True)
class DecodeConfig:
    strategy: str = "greedy"
    beam_width: int = 4
    top_p: float = 0.9
    temperature: float = 1.0
    max_new_tokens: int = 48
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise DataError(f"unknown decoding strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if self.beam_width < 1 or self.max_new_tokens < 1:
            raise DataError("beam_width and max_new_tokens must be positive")
        if not 0 < self.top_p <= 1:
            raise DataError("top_p must lie in (0, 1]")
        if self.temperature <= 0:
            raise DataError("temperature must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "DecodeConfig":
        extra = set(obj) - {f.name for f in fields(cls)}
        if extra:
            raise DataError(f"unknown decode config fields: {sorted(extra)}")
        return cls(**obj)


def _blocked(vocab_size: int) -> np.ndarray:
    mask = np.zeros(vocab_size, dtype=bool)
    mask[: len(SPECIAL_TOKENS)] = True
    mask[EOS] = False
    return mask


def _step_budget(lm: LanguageModel, S: Sequence[int], max_new_tokens: int) -> int:
    # generating k tokens needs forwards over lengths len(S) .. len(S)+k-1
    room = lm.config.max_seq_len - len(S) + 1
    if room < 1:
        raise SequenceTooLongError(f"input has {len(S)} tokens, max_seq_len is {lm.config.max_seq_len}")
    return min(max_new_tokens, room)


def next_logits(lm: LanguageModel, seq: Sequence[int]) -> np.ndarray:
    """Last-position logits with non-emittable specials set to -inf."""
    logits = lm.next_logits(seq).copy()
    logits[_blocked(len(logits))] = -np.inf
    return logits


def next_log_probs(lm: LanguageModel, seq: Sequence[int]) -> np.ndarray:
    """Log of the model's next-token distribution; blocked specials get -inf."""
    lp = log_softmax(lm.next_logits(seq))
    lp[_blocked(len(lp))] = -np.inf
    return lp


def greedy(lm: LanguageModel, S: Sequence[int], config: DecodeConfig = DecodeConfig()) -> list[int]:
    seq, out = list(S), []
    for _ in range(_step_budget(lm, S, config.max_new_tokens)):
        tok = int(np.argmax(next_logits(lm, seq)))  # argmax returns the lowest id on ties
        if tok == EOS:
            break
        out.append(tok)
        seq.append(tok)
    return out


@dataclass(frozen=True)
class Hypothesis:
    score: float                 # total log-probability, EOS included when finished
    tokens: tuple[int, ...]      # response ids without EOS
    finished: bool


def beam_search(lm: LanguageModel, S: Sequence[int], config: DecodeConfig = DecodeConfig()) -> Hypothesis:
    """Length-unnormalized beam search; ties broken by lexicographically smaller ids.

    Hypotheses still alive when the step budget runs out compete with the
    finished ones on their accumulated score.
    """
    S = list(S)
    width = config.beam_width
    alive: list[tuple[float, tuple[int, ...]]] = [(0.0, ())]
    finished: list[tuple[float, tuple[int, ...]]] = []
    for _ in range(_step_budget(lm, S, config.max_new_tokens)):
        candidates = []
        for score, toks in alive:
            lp = next_log_probs(lm, S + list(toks))
            for v in np.flatnonzero(np.isfinite(lp)):
                candidates.append((score + float(lp[v]), toks + (int(v),)))
        candidates.sort(key=lambda c: (-c[0], c[1]))
        alive = []
        for cand in candidates[:width]:
            (finished if cand[1][-1] == EOS else alive).append(cand)
        if not alive:
            break
    score, best = min(finished + alive, key=lambda c: (-c[0], c[1]))
    done = bool(best) and best[-1] == EOS
    return Hypothesis(score, best[:-1] if done else best, done)


def beam(lm: LanguageModel, S: Sequence[int], config: DecodeConfig = DecodeConfig()) -> list[int]:
    return list(beam_search(lm, S, config).tokens)


def nucleus_filter(probs: np.ndarray, top_p: float) -> tuple[np.ndarray, np.ndarray]:
    """Smallest probability-sorted prefix whose mass reaches ``top_p``.

    Returns (token ids, renormalized probabilities), sorted by decreasing
    probability with ties in increasing id order.
    """
    ids = np.arange(len(probs))
    order = np.lexsort((ids, -probs))
    cum = np.cumsum(probs[order])
    k = int(np.searchsorted(cum, top_p, side="left")) + 1
    k = min(k, len(order))
    kept = order[:k]
    p = probs[kept]
    return kept, p / p.sum()


def sample_nucleus(logits: np.ndarray, top_p: float, temperature: float, rng: np.random.Generator) -> int:
    probs = softmax(logits / temperature)
    kept, p = nucleus_filter(probs, top_p)
    cdf = np.cumsum(p)
    i = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    return int(kept[min(i, len(kept) - 1)])


def nucleus(lm: LanguageModel, S: Sequence[int], config: DecodeConfig = DecodeConfig()) -> list[int]:
    rng = np.random.default_rng(config.seed)
    seq, out = list(S), []
    for _ in range(_step_budget(lm, S, config.max_new_tokens)):
        tok = sample_nucleus(next_logits(lm, seq), config.top_p, config.temperature, rng)
        if tok == EOS:
            break
        out.append(tok)
        seq.append(tok)
    return out


def decode(lm: LanguageModel, S: Sequence[int], config: DecodeConfig = DecodeConfig()) -> list[int]:
    return {"greedy": greedy, "beam": beam, "nucleus": nucleus}[config.strategy](lm, S, config)


def sequence_log_prob(lm: LanguageModel, S: Sequence[int], response: Sequence[int], terminated: bool = True) -> float:
    """Total log-probability of ``response`` (plus EOS when ``terminated``) under the decoding distribution."""
    seq, total = list(S), 0.0
    for tok in list(response) + ([EOS] if terminated else []):
        total += float(next_log_probs(lm, seq)[tok])
        seq.append(tok)
    return total
