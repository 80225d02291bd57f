"""Corpora, bag folding, causal label shifting and batch production.

Batches are drawn from sequential, non-overlapping windows of one contiguous
token stream.  Each row of a step reads ``L_data + 1`` tokens starting at the
cursor (the extra token supplies the last next-token label) and advances the
cursor by ``L_data``.  When the stream runs out the cursor wraps to zero and
the epoch counter increments.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .errors import ContractError, DataError

try:
    from numba import njit
except ImportError:  # pure-numpy fallback below
    njit = None

IGNORE_INDEX = -100

TOKEN_FILE_MAGIC = b"TSTTOK\x00\x00"
TOKEN_FILE_VERSION = 1
# magic, version, bytes per id, vocab size, token count
_HEADER = struct.Struct("<8sIIQQ")


@dataclass
class Corpus:
    tokens: np.ndarray
    vocab_size: int
    source: str = "memory"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.tokens = np.ascontiguousarray(self.tokens, dtype=np.int64)
        if self.vocab_size < 2:
            raise DataError(f"vocab_size must be >= 2, got {self.vocab_size}")
        if self.tokens.size and (self.tokens.min() < 0 or self.tokens.max() >= self.vocab_size):
            raise DataError(f"{self.source}: token id outside [0, {self.vocab_size})")

    def __len__(self) -> int:
        return int(self.tokens.size)

    def split(self, heldout_fraction: float) -> tuple["Corpus", "Corpus"]:
        """Cut off the tail of the stream as a held-out corpus."""
        if not 0.0 < heldout_fraction < 1.0:
            raise ContractError("heldout_fraction must lie in (0, 1)")
        cut = int(round(len(self) * (1.0 - heldout_fraction)))
        return (Corpus(self.tokens[:cut], self.vocab_size, self.source + "[train]", dict(self.meta)),
                Corpus(self.tokens[cut:], self.vocab_size, self.source + "[heldout]", dict(self.meta)))


# ---------------------------------------------------------------------------
# sources


def markov_transitions(order: int, vocab: int, seed: int, concentration: float = 0.1,
                       doubly_stochastic: bool = False, structure: str = "lagged") -> np.ndarray:
    """Transition table ``[vocab**order, vocab]`` of a random order-k chain.

    Row ``c`` is the next-token distribution given the context whose base-V
    digits (oldest first) spell ``c``.

    With ``structure="lagged"`` each row mixes, over lags ``i = 1..order``,
    a Dirichlet row keyed by the token ``i`` steps back, using mixture
    weights proportional to ``2**-i``; dependence therefore weakens with
    distance and short contexts are informative on their own.  With
    ``structure="dirichlet"`` every full-context row is an independent draw.
    ``doubly_stochastic`` (order 1 only) yields a random mixture of
    permutation matrices, whose stationary law is uniform.
    """
    if order < 1:
        raise ContractError(f"order must be >= 1, got {order}")
    if vocab < 2:
        raise ContractError(f"vocab must be >= 2, got {vocab}")
    rng = np.random.default_rng(seed)
    if doubly_stochastic:
        if order != 1:
            raise ContractError("doubly_stochastic chains are only defined for order 1")
        weights = rng.dirichlet(np.ones(vocab))
        table = np.zeros((vocab, vocab))
        for w in weights:
            table[np.arange(vocab), rng.permutation(vocab)] += w
        return table
    if structure == "dirichlet":
        return rng.dirichlet(np.full(vocab, concentration), size=vocab ** order)
    if structure != "lagged":
        raise ContractError(f"unknown chain structure {structure!r}")
    lags = rng.dirichlet(np.full(vocab, concentration), size=(order, vocab))
    mix = 2.0 ** -np.arange(1, order + 1)
    mix /= mix.sum()
    ctx = np.arange(vocab ** order)
    table = np.zeros((vocab ** order, vocab))
    for i in range(order):
        back = (ctx // vocab ** i) % vocab  # the token i+1 steps back
        table += mix[i] * lags[i][back]
    return table


def synth_markov_corpus(order: int, vocab: int, length: int, seed: int, concentration: float = 0.1,
                        doubly_stochastic: bool = False, structure: str = "lagged") -> Corpus:
    """Sample ``length`` tokens from a fixed random order-``order`` Markov chain.

    The chain and the sample are both derived from ``seed``.
    """
    if length < order:
        raise DataError(f"length {length} is shorter than the chain order {order}")
    table = markov_transitions(order, vocab, seed, concentration, doubly_stochastic, structure)
    cdf = np.cumsum(table, axis=1)
    cdf[:, -1] = 1.0
    rng = np.random.default_rng([seed, 1])
    out = np.empty(length, dtype=np.int64)
    out[:order] = rng.integers(0, vocab, size=order)
    u = rng.random(length)
    _sample_chain(cdf, u, out, order, vocab)
    meta = {"kind": "markov", "order": order, "seed": seed, "concentration": concentration,
            "doubly_stochastic": doubly_stochastic, "structure": structure}
    return Corpus(out, vocab, f"markov(order={order},V={vocab},seed={seed})", meta)


def _sample_chain_py(cdf, u, out, order, vocab):
    radix = vocab ** (order - 1)
    ctx = 0
    for t in range(order):
        ctx = ctx * vocab + int(out[t])
    for t in range(order, len(out)):
        tok = min(int(np.searchsorted(cdf[ctx], u[t], side="right")), vocab - 1)
        out[t] = tok
        ctx = (ctx % radix) * vocab + tok


_sample_chain = njit(cache=True)(_sample_chain_py) if njit is not None else _sample_chain_py


def write_token_file(path, corpus: Corpus, id_bytes: Optional[int] = None) -> None:
    """Write a little-endian token file with a self-describing header."""
    if id_bytes is None:
        id_bytes = 2 if corpus.vocab_size <= 1 << 16 else 4
    if id_bytes not in (2, 4):
        raise ContractError("id_bytes must be 2 or 4")
    dt = "<u2" if id_bytes == 2 else "<u4"
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(TOKEN_FILE_MAGIC, TOKEN_FILE_VERSION, id_bytes, corpus.vocab_size, len(corpus)))
        fh.write(corpus.tokens.astype(dt).tobytes())


def _read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror or exc}") from None


def read_token_file(path) -> Corpus:
    raw = _read_bytes(path)
    if len(raw) < _HEADER.size:
        raise DataError(f"{path}: truncated header")
    magic, version, id_bytes, vocab, count = _HEADER.unpack_from(raw)
    if magic != TOKEN_FILE_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    if version != TOKEN_FILE_VERSION:
        raise DataError(f"{path}: unsupported version {version}")
    if id_bytes not in (2, 4):
        raise DataError(f"{path}: unsupported id width {id_bytes}")
    body = raw[_HEADER.size:]
    if len(body) != count * id_bytes:
        raise DataError(f"{path}: header says {count} ids, body holds {len(body) // id_bytes}")
    tokens = np.frombuffer(body, dtype="<u2" if id_bytes == 2 else "<u4").astype(np.int64)
    return Corpus(tokens, int(vocab), str(path))


def read_text_file(path) -> Corpus:
    """Byte-level tokenization: every byte is a token, V = 256."""
    data = _read_bytes(path)
    return Corpus(np.frombuffer(data, dtype=np.uint8).astype(np.int64), 256, str(path), {"kind": "bytes"})


def load_corpus(cfg: dict) -> Corpus:
    """Build a corpus from a ``data`` config section."""
    kind = cfg.get("source", "markov")
    if kind == "markov":
        return synth_markov_corpus(cfg["order"], cfg["vocab"], cfg["length"], cfg["seed"],
                                   cfg.get("concentration", 0.1), structure=cfg.get("structure", "lagged"))
    if kind == "tokens":
        return read_token_file(cfg["path"])
    if kind == "text":
        return read_text_file(cfg["path"])
    raise DataError(f"unknown corpus source {kind!r}")


# ---------------------------------------------------------------------------
# folding


def fold_inputs(tokens: np.ndarray, s: int) -> np.ndarray:
    """Reshape ``[B, L_data]`` ids into ``[B, L_data // s, s]`` bags."""
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise ContractError(f"fold_inputs expects [B, L] ids, got shape {tokens.shape}")
    b, n = tokens.shape
    if s < 1 or n % s:
        raise ContractError(f"sequence length {n} is not divisible by bag size {s}")
    return tokens.reshape(b, n // s, s)


def shift_labels(labels: np.ndarray, s: int) -> np.ndarray:
    """Turn next-token labels into causal label bags.

    Pads ``s - 1`` ignore values on the right, drops the first ``s - 1``
    entries and folds, so bag ``j`` holds the data tokens at offsets
    ``j*s + s .. j*s + 2s - 1`` of the input window.
    """
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ContractError(f"shift_labels expects [B, L] labels, got shape {labels.shape}")
    b, n = labels.shape
    if s < 1 or n % s:
        raise ContractError(f"sequence length {n} is not divisible by bag size {s}")
    off = s - 1
    padded = np.concatenate([labels, np.full((b, off), IGNORE_INDEX, dtype=labels.dtype)], axis=1)
    return padded[:, off:].reshape(b, n // s, s)


def next_token_bags(tokens: np.ndarray, s: int) -> np.ndarray:
    """Per-position bags of the next ``s`` tokens for flat inputs.

    Used by the output-only ablation: position ``t`` targets tokens
    ``t+1 .. t+s`` of the window (``tokens`` holds ``L + 1`` ids per row).
    Entries past the window end are ignored.
    """
    b, n1 = tokens.shape
    n = n1 - 1
    out = np.full((b, n, s), IGNORE_INDEX, dtype=np.int64)
    for i in range(s):
        take = n - i
        out[:, :take, i] = tokens[:, 1 + i: 1 + i + take]
    return out


# ---------------------------------------------------------------------------
# batches


@dataclass
class BaggedBatch:
    inputs: np.ndarray
    labels: np.ndarray
    s: int
    data_tokens: int

    @property
    def latent_length(self) -> int:
        return self.inputs.shape[1]


@dataclass
class Cursor:
    position: int = 0
    epoch: int = 0
    tokens_seen: int = 0

    def as_dict(self) -> dict:
        return {"position": self.position, "epoch": self.epoch, "tokens_seen": self.tokens_seen}


def take_windows(corpus: Corpus, cursor: Cursor, rows: int, length: int) -> np.ndarray:
    """Read ``rows`` windows of ``length + 1`` tokens, advancing ``cursor``.

    Windows that would overrun the stream are dropped and the cursor wraps.
    """
    need = length + 1
    if len(corpus) < need:
        raise DataError(f"corpus of {len(corpus)} tokens cannot fill a window of {need}")
    out = np.empty((rows, need), dtype=np.int64)
    for r in range(rows):
        if cursor.position + need > len(corpus):
            cursor.position = 0
            cursor.epoch += 1
        out[r] = corpus.tokens[cursor.position: cursor.position + need]
        cursor.position += length
        cursor.tokens_seen += length
    return out


def make_batch(corpus: Corpus, cursor: Cursor, batch_rows: int, base_length: int, s: int = 1,
               phase: str = "superposition", ablation: str = "full") -> BaggedBatch:
    """Produce one batch for ``phase`` and advance ``cursor``.

    In the superposition phase each row covers ``s * base_length`` data
    tokens so the latent length stays ``base_length`` (equal per-step cost).
    The recovery phase, and any phase with ``s == 1``, yields plain
    ``[B, L]`` next-token batches.
    """
    if phase not in ("superposition", "recovery"):
        raise ContractError(f"unknown phase {phase!r}")
    if s < 1:
        raise ContractError(f"bag size must be >= 1, got {s}")
    if phase == "recovery" or s == 1 or ablation == "none":
        win = take_windows(corpus, cursor, batch_rows, base_length)
        return BaggedBatch(win[:, :-1], win[:, 1:], 1, batch_rows * base_length)
    if ablation == "output_only":
        win = take_windows(corpus, cursor, batch_rows, base_length)
        return BaggedBatch(win[:, :-1], next_token_bags(win, s), s, batch_rows * base_length)
    length = base_length * s
    win = take_windows(corpus, cursor, batch_rows, length)
    inputs = fold_inputs(win[:, :-1], s)
    bags = shift_labels(win[:, 1:], s)
    if ablation == "input_only":
        # single next-token target per latent position: first token of the next bag
        return BaggedBatch(inputs, bags[:, :, 0], s, batch_rows * length)
    if ablation != "full":
        raise ContractError(f"unknown ablation {ablation!r}")
    return BaggedBatch(inputs, bags, s, batch_rows * length)


def make_batches(corpus: Corpus, batch_rows: int, base_length: int, s: int, phase: str,
                 steps: Optional[int] = None, cursor: Optional[Cursor] = None,
                 ablation: str = "full") -> Iterator[BaggedBatch]:
    """Yield batches forever (or ``steps`` of them) from ``cursor``."""
    cursor = cursor if cursor is not None else Cursor()
    n = 0
    while steps is None or n < steps:
        yield make_batch(corpus, cursor, batch_rows, base_length, s, phase, ablation)
        n += 1
