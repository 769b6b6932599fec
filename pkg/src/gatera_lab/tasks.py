"""Synthetic pretrain / fine-tune sequence tasks.

A sequence is ``prompt SEP answer``.  The base task answers with the prompt
(``copy``) or the reversed prompt (``reverse``); ``cipher`` uses copy as the
base task.  Fine-tuning data is the base task with a fixed subset of symbols
remapped in the answer through a fixed derangement, so the positions that
need adaptation (``ood_mask``) are known exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, InputError

SEP = 0
TASK_NAMES = ("copy", "reverse", "cipher")
CORPUS_HEADER = "# tokens\tloss_mask\tood_mask"


@dataclass(frozen=True)
class TaskSpec:
    name: str = "cipher"
    vocab_size: int = 32
    prompt_len: int = 8
    answer_len: int = 8
    shift_fraction: float = 0.5
    cipher_seed: int = 1234

    def __post_init__(self):
        if self.name not in TASK_NAMES:
            raise ConfigurationError(f"unknown task {self.name!r}; expected one of {TASK_NAMES}")
        if not 0.0 <= self.shift_fraction <= 1.0:
            raise ConfigurationError(f"shift_fraction must lie in [0, 1], got {self.shift_fraction}")
        if self.vocab_size < 3:
            raise ConfigurationError("vocab_size must be at least 3")
        if not 1 <= self.answer_len <= self.prompt_len:
            raise ConfigurationError("answer_len must satisfy 1 <= answer_len <= prompt_len")

    @property
    def seq_len(self) -> int:
        return self.prompt_len + 1 + self.answer_len

    @property
    def symbols(self) -> np.ndarray:
        return np.arange(1, self.vocab_size)

    def check_fits(self, max_seq_len: int) -> None:
        if self.seq_len > max_seq_len:
            raise ConfigurationError(
                f"prompt_len + answer_len + 1 = {self.seq_len} exceeds max_seq_len {max_seq_len}"
            )

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SeqExample:
    tokens: np.ndarray
    loss_mask: np.ndarray
    ood_mask: np.ndarray


def cipher_map(spec: TaskSpec) -> np.ndarray:
    """Lookup table ``new = table[old]`` over the whole vocabulary.

    ``round(shift_fraction * n_symbols)`` symbols are moved, each to a
    different symbol, so every remapped position really changes.
    """
    symbols = spec.symbols
    table = np.arange(spec.vocab_size)
    k = int(round(spec.shift_fraction * symbols.size))
    if k == 0:
        return table
    rng = np.random.default_rng(spec.cipher_seed)
    chosen = rng.permutation(symbols)[:k]
    if k == 1:
        others = symbols[symbols != chosen[0]]
        table[chosen[0]] = others[rng.integers(others.size)]
    else:
        table[chosen] = np.roll(chosen, -1)
    return table


def remapped_symbols(spec: TaskSpec) -> np.ndarray:
    table = cipher_map(spec)
    return np.nonzero(table != np.arange(spec.vocab_size))[0]


def _prompts(spec: TaskSpec, n: int, seed: int) -> np.ndarray:
    if n <= 0:
        raise ConfigurationError(f"n must be positive, got {n}")
    rng = np.random.default_rng(seed)
    return rng.integers(1, spec.vocab_size, size=(n, spec.prompt_len))


def _base_answers(spec: TaskSpec, prompts: np.ndarray) -> np.ndarray:
    ans = prompts[:, ::-1] if spec.name == "reverse" else prompts
    return ans[:, : spec.answer_len]


def _assemble(spec: TaskSpec, prompts: np.ndarray, answers: np.ndarray, ood: np.ndarray) -> list[SeqExample]:
    n = prompts.shape[0]
    sep = np.full((n, 1), SEP)
    tokens = np.concatenate([prompts, sep, answers], axis=1)
    loss_mask = np.zeros(tokens.shape, dtype=bool)
    loss_mask[:, spec.prompt_len + 1 :] = True
    ood_mask = np.zeros(tokens.shape, dtype=bool)
    ood_mask[:, spec.prompt_len + 1 :] = ood
    return [SeqExample(tokens[i].copy(), loss_mask[i].copy(), ood_mask[i].copy()) for i in range(n)]


def gen_pretrain(spec: TaskSpec, n: int, seed: int) -> list[SeqExample]:
    prompts = _prompts(spec, n, seed)
    answers = _base_answers(spec, prompts)
    return _assemble(spec, prompts, answers, np.zeros(answers.shape, dtype=bool))


def gen_finetune(spec: TaskSpec, n: int, seed: int) -> list[SeqExample]:
    """Same prompts as :func:`gen_pretrain` for equal seeds; answers pass through the cipher."""
    prompts = _prompts(spec, n, seed)
    base = _base_answers(spec, prompts)
    shifted = cipher_map(spec)[base]
    return _assemble(spec, prompts, shifted, shifted != base)


@dataclass
class Batch:
    """Model-ready arrays: position t of ``inputs`` predicts ``targets[t]``."""

    inputs: np.ndarray
    targets: np.ndarray
    loss_mask: np.ndarray
    ood_mask: np.ndarray

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def take(self, idx) -> "Batch":
        return Batch(self.inputs[idx], self.targets[idx], self.loss_mask[idx], self.ood_mask[idx])


def to_batch(examples: Sequence[SeqExample]) -> Batch:
    tokens = np.stack([e.tokens for e in examples])
    lm = np.stack([e.loss_mask for e in examples])
    ood = np.stack([e.ood_mask for e in examples])
    return Batch(tokens[:, :-1].copy(), tokens[:, 1:].copy(), lm[:, 1:].copy(), ood[:, 1:].copy())


# plain-text corpus format: header line, then "ids<TAB>loss_mask<TAB>ood_mask"
# with ids space separated and masks as strings of 0/1, one example per line


def write_corpus(examples: Iterable[SeqExample], path) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(CORPUS_HEADER + "\n")
        for e in examples:
            ids = " ".join(str(int(t)) for t in e.tokens)
            lm = "".join("1" if b else "0" for b in e.loss_mask)
            ood = "".join("1" if b else "0" for b in e.ood_mask)
            fh.write(f"{ids}\t{lm}\t{ood}\n")


def read_corpus(path) -> list[SeqExample]:
    lines = Path(path).read_text(encoding="ascii").splitlines()
    if not lines or lines[0] != CORPUS_HEADER:
        raise InputError(f"{path}: missing corpus header {CORPUS_HEADER!r}")
    out = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        try:
            ids, lm, ood = line.split("\t")
            tokens = np.array([int(x) for x in ids.split()], dtype=np.int64)
            loss_mask = np.array([c == "1" for c in lm])
            ood_mask = np.array([c == "1" for c in ood])
        except ValueError as exc:
            raise InputError(f"{path}:{lineno}: malformed record") from exc
        if not (tokens.size == loss_mask.size == ood_mask.size):
            raise InputError(f"{path}:{lineno}: column lengths disagree")
        out.append(SeqExample(tokens, loss_mask, ood_mask))
    return out
