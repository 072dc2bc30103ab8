"""Dyck-2 probabilistic grammar: sampling, next-closer targets, pair distances.

Grammar: S -> (S) | [S] | SS | eps with probabilities p1, p2, q, 1 - p1 - p2 - q.
A uniform draw u picks the rule: u < p1 -> (S); u < p1 + p2 -> [S];
u < p1 + p2 + q -> SS; otherwise eps.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

OPENERS = "(["
CLOSERS = ")]"
ALPHABET = "()[]"
MATCH = {")": "(", "]": "["}
_S = None  # nonterminal marker on the work stack


@dataclass(frozen=True)
class DyckGrammarParams:
    p1: float = 0.25
    p2: float = 0.25
    q: float = 0.25
    max_len: int = 200

    def __post_init__(self):
        for name in ("p1", "p2", "q"):
            v = getattr(self, name)
            if not 0 < v < 1:
                raise ValueError(f"{name} must lie in (0, 1), got {v}")
        if self.p1 + self.p2 + self.q >= 1:
            raise ValueError("p1 + p2 + q must be < 1")
        if self.max_len < 2:
            raise ValueError("max_len must be >= 2")


@dataclass
class DyckSequence:
    symbols: str
    targets: np.ndarray = field(init=False)
    distances: list[int] = field(init=False)

    def __post_init__(self):
        self.targets = dyck_targets(self.symbols)
        self.distances = pair_distances(self.symbols)

    @property
    def max_distance(self) -> int:
        return max(self.distances) if self.distances else 0

    def __len__(self):
        return len(self.symbols)

    def one_hot(self) -> np.ndarray:
        return encode(self.symbols)


class GenerationError(RuntimeError):
    pass


def _expand(params: DyckGrammarParams, rng, depth_cap: int):
    """One leftmost derivation; returns the string or None if it overflowed."""
    a = params.p1
    b = a + params.p2
    c = b + params.q
    out: list[str] = []
    stack: list = [_S]
    pending = 0  # terminals waiting on the stack
    while stack:
        item = stack.pop()
        if item is not _S:
            out.append(item)
            pending -= 1
            continue
        u = rng.random()
        if u < a:
            out.append("(")
            stack.append(")")
            stack.append(_S)
            pending += 1
        elif u < b:
            out.append("[")
            stack.append("]")
            stack.append(_S)
            pending += 1
        elif u < c:
            stack.append(_S)
            stack.append(_S)
        if len(out) + pending > params.max_len or len(stack) > depth_cap:
            return None
    return "".join(out)


def generate_dyck(params: DyckGrammarParams | None = None, rng=None, max_attempts: int = 100_000,
                  depth_cap: int = 10_000) -> DyckSequence:
    """Sample one non-empty sequence of at most ``params.max_len`` symbols.

    ``rng`` needs only a ``random()`` method. Overlong or empty derivations are
    discarded and redrawn.
    """
    params = params or DyckGrammarParams()
    rng = np.random.default_rng(rng) if rng is None or isinstance(rng, (int, np.integer)) else rng
    for _ in range(max_attempts):
        s = _expand(params, rng, depth_cap)
        if s:
            return DyckSequence(s)
    raise GenerationError(f"no valid sequence within {max_attempts} attempts")


def dyck_targets(symbols: str) -> np.ndarray:
    """Per-step (valid ')' , valid ']') after consuming each symbol.

    The only legal closer is the partner of the opener on top of the stack; an
    empty stack gives (0, 0).
    """
    stack: list[str] = []
    out = np.zeros((len(symbols), 2), dtype=np.float64)
    for t, ch in enumerate(symbols):
        if ch in OPENERS:
            stack.append(ch)
        elif ch in CLOSERS:
            if not stack or stack[-1] != MATCH[ch]:
                raise ValueError(f"invalid prefix at position {t}: {symbols[:t + 1]!r}")
            stack.pop()
        else:
            raise ValueError(f"unknown symbol {ch!r}")
        if stack:
            out[t, OPENERS.index(stack[-1])] = 1.0
    return out


def pair_distances(symbols: str) -> list[int]:
    """index(close) - index(open) for every matched pair, ordered by the opener."""
    stack: list[tuple[str, int]] = []
    dist = {}
    for t, ch in enumerate(symbols):
        if ch in OPENERS:
            stack.append((ch, t))
        elif ch in CLOSERS:
            if not stack or stack[-1][0] != MATCH[ch]:
                raise ValueError(f"unbalanced at position {t}")
            _, o = stack.pop()
            dist[o] = t - o
        else:
            raise ValueError(f"unknown symbol {ch!r}")
    if stack:
        raise ValueError("unbalanced: unclosed brackets")
    return [dist[o] for o in sorted(dist)]


def is_balanced(symbols: str) -> bool:
    try:
        pair_distances(symbols)
    except ValueError:
        return False
    return True


def encode(symbols: str) -> np.ndarray:
    """One-hot rows over the alphabet ``()[]``."""
    idx = np.array([ALPHABET.index(ch) for ch in symbols], dtype=np.int64)
    out = np.zeros((len(symbols), 4))
    out[np.arange(len(symbols)), idx] = 1.0
    return out


def sequence_rng(seed: int, split: int, index: int) -> np.random.Generator:
    """Independent stream for sequence ``index`` of split ``split``."""
    return np.random.default_rng([int(seed), int(split), int(index)])


def generate_split(params: DyckGrammarParams, n: int, seed: int, split: int) -> list[DyckSequence]:
    return [generate_dyck(params, sequence_rng(seed, split, k)) for k in range(n)]


def build_dyck_dataset(params: DyckGrammarParams | None = None, n_train: int = 10_000, n_valid: int = 2_000,
                       n_test: int = 5_000, seed: int = 0) -> dict[str, list[DyckSequence]]:
    params = params or DyckGrammarParams()
    for n in (n_train, n_valid, n_test):
        if n < 1:
            raise ValueError("split sizes must be >= 1")
    return {
        "train": generate_split(params, n_train, seed, 0),
        "valid": generate_split(params, n_valid, seed, 1),
        "test": generate_split(params, n_test, seed, 2),
    }


def distance_histogram(sequences) -> dict[int, int]:
    hist: dict[int, int] = {}
    for seq in sequences:
        for d in seq.distances:
            hist[d] = hist.get(d, 0) + 1
    return dict(sorted(hist.items()))


def power_law_fit(hist: dict[int, int], lo: int = 2, hi: int = 100):
    """Least-squares line through (log distance, log count) over nonzero bins in [lo, hi].

    Returns (slope, intercept, r_squared).
    """
    pts = [(d, c) for d, c in hist.items() if lo <= d <= hi and c > 0]
    if len(pts) < 3:
        raise ValueError("not enough populated distance bins to fit")
    x = np.log([d for d, _ in pts])
    y = np.log([c for _, c in pts])
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    r2 = 1.0 - float(resid @ resid) / float(((y - y.mean()) ** 2).sum())
    return float(slope), float(intercept), r2


def save_jsonl(sequences, path) -> None:
    lines = [json.dumps({"symbols": s.symbols, "max_distance": s.max_distance}) for s in sequences]
    Path(path).write_text("\n".join(lines) + "\n")


def load_jsonl(path) -> list[DyckSequence]:
    out = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            out.append(DyckSequence(json.loads(line)["symbols"]))
        except (ValueError, KeyError) as exc:
            raise ValueError(f"{path}:{n}: {exc}") from exc
    return out
