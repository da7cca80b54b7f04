"""Corpus ingestion, chunking and the synthetic Markov source."""

from dataclasses import dataclass, field

import numpy as np

from .bridge import DataError

SYNTHETIC_MARKOV = "synthetic:markov"


@dataclass
class CorpusSpec:
    """Where tokens come from and how they are chunked.

    ``source`` is a file path or ``synthetic:markov``. ``vocab`` is an
    ordered symbol string; empty means infer (sorted unique symbols).
    """

    source: str = SYNTHETIC_MARKOV
    vocab: str = ""
    mode: str = "char"
    chunk_len: int = 64
    valid_fraction: float = 0.1
    seed: int = 0
    synthetic_tokens: int = 200_000
    markov_row: list = field(default_factory=lambda: [0.65, 0.2, 0.1, 0.05])

    def validate(self):
        if self.mode not in ("char", "byte"):
            raise DataError(f"mode must be char or byte, got {self.mode!r}")
        if self.chunk_len < 1:
            raise DataError("chunk_len must be positive")
        if not 0.0 <= self.valid_fraction < 1.0:
            raise DataError("valid_fraction must lie in [0, 1)")


class MarkovOracle:
    """Order-1 Markov chain with known transition matrix."""

    def __init__(self, P):
        P = np.asarray(P, dtype=np.float64)
        if P.ndim != 2 or P.shape[0] != P.shape[1]:
            raise DataError(f"transition matrix must be square, got {P.shape}")
        if np.any(P < 0) or np.max(np.abs(P.sum(1) - 1.0)) > 1e-12:
            raise DataError("transition matrix rows must be probability vectors")
        self.P = P
        self.stationary = self._stationary(P)

    @classmethod
    def circulant(cls, row):
        """P[i, (i + k) % V] = row[k]; doubly stochastic, uniform stationary law."""
        row = np.asarray(row, dtype=np.float64)
        row = row / row.sum()
        V = row.size
        return cls(np.stack([np.roll(row, i) for i in range(V)]))

    @staticmethod
    def _stationary(P):
        V = P.shape[0]
        # pi (P - I) = 0 with sum(pi) = 1, solved in least squares
        A = np.vstack([(P - np.eye(V)).T, np.ones((1, V))])
        b = np.zeros(V + 1)
        b[-1] = 1.0
        pi = np.linalg.lstsq(A, b, rcond=None)[0]
        pi = np.clip(pi, 0.0, None)
        return pi / pi.sum()

    @property
    def V(self):
        return self.P.shape[0]

    @property
    def entropy_rate(self):
        """Bits per symbol."""
        with np.errstate(divide="ignore", invalid="ignore"):
            plog = np.where(self.P > 0, self.P * np.log2(self.P), 0.0)
        return float(-np.sum(self.stationary * plog.sum(1)))

    @property
    def stationary_entropy(self):
        p = self.stationary[self.stationary > 0]
        return float(-np.sum(p * np.log2(p)))

    def chunk_entropy(self, T):
        """Exact per-symbol entropy of a length-T chunk started in equilibrium."""
        return (self.stationary_entropy + (T - 1) * self.entropy_rate) / T

    def sample(self, n, rng):
        cum = np.cumsum(self.P, axis=1)
        out = np.empty(n, dtype=np.int64)
        out[0] = rng.choice(self.V, p=self.stationary)
        r = rng.random(n)
        for t in range(1, n):
            out[t] = min(int(np.searchsorted(cum[out[t - 1]], r[t], side="right")), self.V - 1)
        return out


def markov_oracle(spec):
    return MarkovOracle.circulant(spec.markov_row)


def read_symbols(spec):
    """Return (symbol list, raw text/bytes) for a file source."""
    with open(spec.source, "rb") as f:
        raw = f.read()
    if spec.mode == "byte":
        return [bytes([b]) for b in raw], raw
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as e:
        raise DataError(f"{spec.source}: invalid UTF-8 at byte offset {e.start}") from e
    return list(text), raw


def infer_vocab(symbols):
    return sorted(set(symbols))


def _vocab_symbols(spec):
    if spec.mode == "byte":
        return [bytes([ord(c)]) for c in spec.vocab]
    return list(spec.vocab)


def encode_symbols(symbols, vocab, mode="char"):
    """Map symbols to ids; unknown symbols raise DataError with a byte offset."""
    index = {s: i for i, s in enumerate(vocab)}
    ids = np.empty(len(symbols), dtype=np.int64)
    offset = 0
    for i, s in enumerate(symbols):
        k = index.get(s)
        if k is None:
            raise DataError(f"unknown symbol {s!r} at byte offset {offset}")
        ids[i] = k
        offset += len(s) if mode == "byte" else len(s.encode("utf-8"))
    return ids


def chunk(ids, T):
    """Non-overlapping length-T chunks; a trailing remainder is dropped."""
    n = len(ids) // T
    return np.asarray(ids[:n * T], dtype=np.int64).reshape(n, T)


@dataclass
class Corpus:
    vocab: list
    train: np.ndarray
    valid: np.ndarray
    oracle: MarkovOracle = None

    @property
    def V(self):
        return len(self.vocab)

    def render(self, ids):
        """Token ids -> text (byte vocabularies are decoded leniently)."""
        syms = [self.vocab[int(i)] for i in np.ravel(ids)]
        if syms and isinstance(syms[0], bytes):
            return b"".join(syms).decode("utf-8", errors="replace")
        return "".join(syms)


def ingest(spec):
    """Load, tokenize, chunk and split a corpus deterministically."""
    spec.validate()
    oracle = None
    if spec.source == SYNTHETIC_MARKOV:
        oracle = markov_oracle(spec)
        vocab = list(spec.vocab) if spec.vocab else [chr(ord("a") + i) for i in range(oracle.V)]
        if len(vocab) != oracle.V:
            raise DataError(f"vocab has {len(vocab)} symbols but the Markov source has {oracle.V}")
        ids = oracle.sample(spec.synthetic_tokens, np.random.default_rng(spec.seed))
    else:
        symbols, _ = read_symbols(spec)
        vocab = _vocab_symbols(spec) if spec.vocab else infer_vocab(symbols)
        ids = encode_symbols(symbols, vocab, spec.mode)
    chunks = chunk(ids, spec.chunk_len)
    n_valid = int(round(len(chunks) * spec.valid_fraction))
    n_train = len(chunks) - n_valid
    return Corpus(vocab, chunks[:n_train], chunks[n_train:], oracle)


def batches(chunks, batch_size, rng):
    """Shuffled minibatches covering one epoch (last partial batch kept)."""
    order = rng.permutation(len(chunks))
    for i in range(0, len(order), batch_size):
        yield chunks[order[i:i + batch_size]]


def batch_stream(chunks, batch_size, seed):
    """Endless deterministic batch stream, reshuffled each epoch."""
    if len(chunks) == 0:
        raise DataError("no training chunks")
    epoch = 0
    while True:
        yield from batches(chunks, batch_size, np.random.default_rng([seed, epoch]))
        epoch += 1
