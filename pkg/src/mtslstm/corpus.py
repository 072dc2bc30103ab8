"""Word-level corpora: vocabulary, stateful batching, Markov control corpus, frequency bins."""

from __future__ import annotations

import bisect
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

EOS = "<eos>"
UNK = "<unk>"

BIN_NAMES = ("above 10K", "1K-10K", "100-1K", "below 100")
BIN_EDGES = (10000, 1000, 100)

TRAIN_LEN, SHORT_LEN, P_LONG = 70, 35, 0.95
EVAL_LEN = 70


def tokenize(text: str) -> list[str]:
    """Whitespace tokens with an end-of-sentence marker per line."""
    tokens: list[str] = []
    for line in text.splitlines():
        tokens.extend(line.split())
        tokens.append(EOS)
    return tokens


@dataclass
class Vocab:
    itos: list[str]
    counts: np.ndarray
    stoi: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate tokens in vocabulary")
        self.counts = np.asarray(self.counts, dtype=np.int64)

    @classmethod
    def build(cls, tokens: list[str]) -> "Vocab":
        """Vocabulary in first-appearance order, plus <eos>/<unk> if absent."""
        itos: list[str] = []
        seen: dict[str, int] = {}
        for t in tokens:
            if t not in seen:
                seen[t] = len(itos)
                itos.append(t)
        for special in (EOS, UNK):
            if special not in seen:
                seen[special] = len(itos)
                itos.append(special)
        counts = np.zeros(len(itos), dtype=np.int64)
        np.add.at(counts, [seen[t] for t in tokens], 1)
        return cls(itos, counts)

    def __len__(self):
        return len(self.itos)

    @property
    def unk_id(self) -> int:
        return self.stoi[UNK]

    @property
    def eos_id(self) -> int:
        return self.stoi[EOS]

    def encode(self, tokens) -> np.ndarray:
        unk = self.unk_id
        return np.array([self.stoi.get(t, unk) for t in tokens], dtype=np.int64)

    def decode(self, ids) -> list[str]:
        return [self.itos[i] for i in ids]

    def to_json(self) -> list[dict]:
        return [{"token": t, "id": i, "count": int(c)} for i, (t, c) in enumerate(zip(self.itos, self.counts))]

    @classmethod
    def from_json(cls, rows: list[dict]) -> "Vocab":
        rows = sorted(rows, key=lambda r: r["id"])
        if [r["id"] for r in rows] != list(range(len(rows))):
            raise ValueError("vocabulary ids must be 0..V-1")
        return cls([r["token"] for r in rows], [r["count"] for r in rows])


@dataclass
class CorpusBundle:
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray
    vocab: Vocab
    provenance: str = "natural"

    def __post_init__(self):
        V = len(self.vocab)
        for name in ("train", "valid", "test"):
            arr = np.asarray(getattr(self, name), dtype=np.int64)
            if arr.size and (arr.min() < 0 or arr.max() >= V):
                raise ValueError(f"{name} contains ids outside the vocabulary")
            arr.setflags(write=False)
            setattr(self, name, arr)

    @property
    def sizes(self) -> dict:
        return {"train": int(self.train.size), "valid": int(self.valid.size), "test": int(self.test.size)}

    def save(self, directory) -> None:
        """Write ``{split}.bin`` (little-endian u32), ``vocab.json`` and ``meta.json``."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for name in ("train", "valid", "test"):
            getattr(self, name).astype("<u4").tofile(d / f"{name}.bin")
        (d / "vocab.json").write_text(json.dumps(self.vocab.to_json()))
        (d / "meta.json").write_text(json.dumps({"provenance": self.provenance, "sizes": self.sizes}, sort_keys=True))

    @classmethod
    def load(cls, directory) -> "CorpusBundle":
        d = Path(directory)
        for fname in ("vocab.json", "train.bin", "valid.bin", "test.bin"):
            if not (d / fname).exists():
                raise FileNotFoundError(d / fname)
        vocab = Vocab.from_json(json.loads((d / "vocab.json").read_text()))
        meta_path = d / "meta.json"
        meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
        splits = {n: np.fromfile(d / f"{n}.bin", dtype="<u4").astype(np.int64) for n in ("train", "valid", "test")}
        return cls(vocab=vocab, provenance=meta.get("provenance", "natural"), **splits)


def load_corpus(train_text: str, valid_text: str, test_text: str) -> CorpusBundle:
    """Build a corpus from raw pre-tokenized text; the vocabulary comes from train only."""
    train_tokens = tokenize(train_text)
    if not train_tokens or all(t == EOS for t in train_tokens):
        raise ValueError("empty training text")
    vocab = Vocab.build(train_tokens)
    return CorpusBundle(
        train=vocab.encode(train_tokens),
        valid=vocab.encode(tokenize(valid_text)),
        test=vocab.encode(tokenize(test_text)),
        vocab=vocab,
    )


def load_corpus_files(train_path, valid_path, test_path) -> CorpusBundle:
    texts = [Path(p).read_text(encoding="utf-8") for p in (train_path, valid_path, test_path)]
    return load_corpus(*texts)


# --------------------------------------------------------------------------
# batching
# --------------------------------------------------------------------------

@dataclass
class BatchPlan:
    """Windows over ``batch_size`` parallel streams of ``stream_len`` tokens.

    Each window ``(offset, length)`` predicts stream positions
    offset+1 .. offset+length from inputs offset .. offset+length-1.
    """

    batch_size: int
    stream_len: int
    windows: list[tuple[int, int]]
    seed: int | None = None

    def batches(self, tokens):
        """Yield (inputs, targets) arrays shaped (length, batch)."""
        streams = batchify(tokens, self.batch_size)
        for off, n in self.windows:
            yield streams[off:off + n], streams[off + 1:off + n + 1]


def batchify(tokens, batch_size: int) -> np.ndarray:
    """Lay tokens out as (stream_len, batch): column b is the b-th contiguous chunk."""
    tokens = np.asarray(tokens)
    L = tokens.size // batch_size
    return tokens[:L * batch_size].reshape(batch_size, L).T


def make_batch_plan(n_tokens: int, batch_size: int, mode: str = "train", seed=None, rng=None,
                    train_len: int = TRAIN_LEN, short_len: int = SHORT_LEN, p_long: float = P_LONG,
                    eval_len: int = EVAL_LEN) -> BatchPlan:
    """Tile the prediction positions of every stream with windows.

    Training windows are ``train_len`` long with probability ``p_long`` and
    ``short_len`` otherwise (draw u < p_long selects the long window); eval
    windows are all ``eval_len``. The last window may be shorter.
    ``rng`` may be any object with a ``random()`` method.
    """
    if batch_size < 1 or n_tokens <= batch_size:
        raise ValueError(f"batch size {batch_size} too large for {n_tokens} tokens")
    L = n_tokens // batch_size
    n_pred = L - 1
    windows = []
    off = 0
    if mode == "train":
        rng = np.random.default_rng(seed) if rng is None else rng
        while off < n_pred:
            n = train_len if rng.random() < p_long else short_len
            n = min(n, n_pred - off)
            windows.append((off, n))
            off += n
    elif mode == "eval":
        while off < n_pred:
            n = min(eval_len, n_pred - off)
            windows.append((off, n))
            off += n
        seed = None
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return BatchPlan(batch_size, L, windows, seed)


# --------------------------------------------------------------------------
# Markov control corpus
# --------------------------------------------------------------------------

class BigramSampler:
    """Sample token streams from the empirical bigram chain of a token array."""

    def __init__(self, tokens, vocab_size: int):
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.size < 2:
            raise ValueError("need at least two tokens for bigram statistics")
        V = vocab_size
        pair = tokens[:-1] * V + tokens[1:]
        keys, counts = np.unique(pair, return_counts=True)
        prev, nxt = keys // V, keys % V
        self.vocab_size = V
        self.next_ids = nxt.tolist()
        self.cum = np.cumsum(counts).tolist()
        starts = np.searchsorted(prev, np.arange(V + 1))
        self.starts = starts.tolist()
        self.row_total = [0] * V
        for w in range(V):
            s, e = starts[w], starts[w + 1]
            if e > s:
                self.row_total[w] = self.cum[e - 1] - (self.cum[s - 1] if s > 0 else 0)
        uni = np.bincount(tokens, minlength=V)
        self.uni_cum = np.cumsum(uni).tolist()
        self.bigram_counts = dict(zip(keys.tolist(), counts.tolist()))

    def _unigram(self, u: float) -> int:
        total = self.uni_cum[-1]
        return bisect.bisect_right(self.uni_cum, u * total)

    def sample(self, length: int, rng) -> np.ndarray:
        if length <= 0:
            raise ValueError("length must be positive")
        u = rng.random(length)
        out = np.empty(length, dtype=np.int64)
        cur = self._unigram(u[0])
        out[0] = cur
        starts, cum, nxt, rows = self.starts, self.cum, self.next_ids, self.row_total
        for t in range(1, length):
            s, e = starts[cur], starts[cur + 1]
            if e == s:
                cur = self._unigram(u[t])  # dead end: restart from the unigram distribution
            else:
                base = cum[s - 1] if s > 0 else 0
                j = bisect.bisect_right(cum, base + u[t] * rows[cur], s, e)
                cur = nxt[min(j, e - 1)]
            out[t] = cur
        return out


def generate_markov_corpus(source: CorpusBundle, length: int | None = None, seed=None) -> CorpusBundle:
    """Bigram-chain resampling of ``source``.

    The new training split has ``length`` tokens (default: the source training
    size); valid and test are regenerated at the source sizes. Statistics come
    from the source training split only.
    """
    if length is not None and length <= 0:
        raise ValueError("length must be positive")
    V = len(source.vocab)
    sampler = BigramSampler(source.train, V)
    rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3)]
    train = sampler.sample(length or source.train.size, rngs[0])
    valid = sampler.sample(max(source.valid.size, 2), rngs[1])
    test = sampler.sample(max(source.test.size, 2), rngs[2])
    counts = np.bincount(train, minlength=V)
    vocab = Vocab(list(source.vocab.itos), counts)
    return CorpusBundle(train, valid, test, vocab, provenance="markov-bigram")


# --------------------------------------------------------------------------
# frequency bins
# --------------------------------------------------------------------------

def frequency_bin(count: int) -> int:
    """Bin id for a training count; boundary counts fall in the rarer bin."""
    for b, edge in enumerate(BIN_EDGES):
        if count > edge:
            return b
    return len(BIN_EDGES)


def frequency_bins(vocab_or_counts) -> np.ndarray:
    counts = vocab_or_counts.counts if isinstance(vocab_or_counts, Vocab) else np.asarray(vocab_or_counts)
    bins = np.full(counts.shape, len(BIN_EDGES), dtype=np.int64)
    for b in range(len(BIN_EDGES) - 1, -1, -1):
        bins[counts > BIN_EDGES[b]] = b
    return bins
