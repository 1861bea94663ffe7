"""Word-level tokenizer and model-input assembly."""

from __future__ import annotations

import os
import re
from typing import Iterable, Sequence

from .errors import DataError

PAD, SEP, BOS, EOS, UNK = 0, 1, 2, 3, 4
SPECIAL_TOKENS = ("<pad>", "<sep>", "<bos>", "<eos>", "<unk>")

PUNCTUATION = ("->", ":", "@", "/", "{", "}", "=", ",", "#")
_TOKEN_RE = re.compile(r"->|[:@/{}=,#]|(?:(?!->)[^\s:@/{}=,#])+")


class SequenceTooLongError(DataError):
    pass


class VocabFormatError(DataError):
    pass


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text)


def join_findings_tokens(tokens: Sequence[str]) -> str:
    """Rebuilds parseable findings text from its token list.

    A finding starts at every ``INT ':'`` pair; integers after ``#`` are
    relation targets and never start a line.
    """
    lines: list[list[str]] = []
    for i, tok in enumerate(tokens):
        starts = tok.isdigit() and i + 1 < len(tokens) and tokens[i + 1] == ":" and (i == 0 or tokens[i - 1] != "#")
        if starts or not lines:
            lines.append([])
        lines[-1].append(tok)
    return "".join(" ".join(line) + "\n" for line in lines)


class Vocabulary:
    def __init__(self, tokens: Iterable[str]):
        self.id_to_token: list[str] = list(SPECIAL_TOKENS)
        self.token_to_id: dict[str, int] = {t: i for i, t in enumerate(SPECIAL_TOKENS)}
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        if token not in self.token_to_id:
            self.token_to_id[token] = len(self.id_to_token)
            self.id_to_token.append(token)
        return self.token_to_id[token]

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.id_to_token == other.id_to_token

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.token_to_id.get(t, UNK) for t in tokens]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.id_to_token[i] for i in ids]

    def encode_text(self, text: str) -> list[int]:
        return self.encode(tokenize(text))

    def decode_text(self, ids: Sequence[int]) -> str:
        return " ".join(self.decode(ids))

    @property
    def special_ids(self) -> tuple[int, ...]:
        return (PAD, SEP, BOS, EOS, UNK)


def build_vocab(corpus: Iterable[str]) -> Vocabulary:
    """Specials first, then corpus tokens in first-occurrence order."""
    return Vocabulary(tok for text in corpus for tok in tokenize(text))


def build_input(img: Sequence[int], instr: Sequence[int], vocab: Vocabulary | None = None, max_len: int | None = None) -> list[int]:
    """``[t_1..t_L, SEP, u_1..u_M]``."""
    seq = [*img, SEP, *instr]
    if vocab is not None:
        bad = [i for i in seq if not 0 <= i < len(vocab)]
        if bad:
            raise DataError(f"token ids {bad[:5]} are outside the vocabulary")
    if max_len is not None and len(seq) > max_len:
        raise SequenceTooLongError(f"input has {len(seq)} tokens, max sequence length is {max_len}")
    return seq


def save_vocab(vocab: Vocabulary, path) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        for i, tok in enumerate(vocab.id_to_token):
            fh.write(f"{i}\t{tok}\n")
    os.replace(tmp, path)


def load_vocab(path) -> Vocabulary:
    tokens = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 2 or not parts[0].isdigit() or int(parts[0]) != lineno - 1 or not parts[1]:
                raise VocabFormatError(f"{path}:{lineno}: expected '<id>\\t<token>' with id {lineno - 1}")
            tokens.append(parts[1])
    if tuple(tokens[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
        raise VocabFormatError(f"{path}: special tokens must come first in order {SPECIAL_TOKENS}")
    if len(set(tokens)) != len(tokens):
        raise VocabFormatError(f"{path}: duplicate tokens")
    return Vocabulary(tokens[len(SPECIAL_TOKENS):])
