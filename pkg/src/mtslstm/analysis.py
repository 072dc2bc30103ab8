"""Measurements on trained models.

Perplexity overall and per word-frequency bin, block-bootstrap confidence
intervals for paired model comparisons, gate traces and estimated timescales,
KS-based distribution fitting, unit-group ablation, word-ablation decay curves
and Dyck accuracy bucketed by a sequence's longest dependency.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .corpus import BIN_NAMES, batchify, frequency_bins, make_batch_plan
from .mathkernel import sigmoid
from .timescale import InverseGammaParams, estimate_timescales, inv_gamma_cdf

ALL = "All tokens"


# --------------------------------------------------------------------------
# perplexity
# --------------------------------------------------------------------------

@dataclass
class EvalReport:
    """Per-token losses of one evaluation pass, in corpus order."""

    positions: np.ndarray
    token_ids: np.ndarray
    nll: np.ndarray
    bins: np.ndarray

    def perplexity(self, bin: int | None = None) -> float:
        sel = self.nll if bin is None else self.nll[self.bins == bin]
        if sel.size == 0:
            return math.nan
        return math.exp(float(sel.mean()))

    def table_row(self) -> dict:
        row = {name: self.perplexity(b) for b, name in enumerate(BIN_NAMES)}
        row[ALL] = self.perplexity()
        return row


def evaluate_lm(model, tokens, vocab=None, batch_size: int = 1, window: int = 70, bins=None) -> EvalReport:
    """Stateful evaluation: zero state at stream start, carried across windows.

    ``bins`` (per vocabulary id) defaults to the frequency bins of ``vocab``;
    without either every token lands in bin 0.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    V = model.vocab_size
    if vocab is not None and len(vocab) != V:
        raise ValueError(f"vocabulary size {len(vocab)} does not match model ({V})")
    if bins is None:
        bins = frequency_bins(vocab) if vocab is not None else np.zeros(V, dtype=np.int64)
    plan = make_batch_plan(tokens.size, batch_size, "eval", eval_len=window)
    L = plan.stream_len
    state = None
    nll_parts, pos_parts = [], []
    for off, n in plan.windows:
        streams = batchify(tokens, batch_size)
        nll, state = model.forward(streams[off:off + n], streams[off + 1:off + n + 1], state)
        nll_parts.append(nll)
        pos = (off + 1 + np.arange(n))[:, None] + L * np.arange(batch_size)[None, :]
        pos_parts.append(pos)
    nll = np.concatenate(nll_parts).T.reshape(-1)
    pos = np.concatenate(pos_parts).T.reshape(-1)
    order = np.argsort(pos, kind="stable")
    pos, nll = pos[order], nll[order]
    ids = tokens[pos]
    return EvalReport(pos, ids, nll, np.asarray(bins)[ids])


# --------------------------------------------------------------------------
# block bootstrap
# --------------------------------------------------------------------------

@dataclass
class BootstrapResult:
    point: float
    mean: float
    lo: float
    hi: float
    n_blocks: int

    @property
    def significant(self) -> bool:
        return not (self.lo <= 0.0 <= self.hi)


def bootstrap_diff_ci(losses_a, losses_b, block_len: int = 100, n: int = 10_000, seed=0, mask=None,
                      level: float = 0.95) -> BootstrapResult:
    """Percentile CI of perplexity(a) - perplexity(b) under block resampling.

    Both aligned loss streams are cut into contiguous ``block_len`` blocks
    (a trailing partial block is dropped); blocks are drawn with replacement
    and each draw's statistic is exp(mean nll_a) - exp(mean nll_b) over the
    drawn tokens (optionally restricted by ``mask``, e.g. one frequency bin).
    """
    a = np.asarray(losses_a, dtype=np.float64)
    b = np.asarray(losses_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("loss streams must be aligned and equal length")
    nb = a.size // block_len
    if nb < 1:
        raise ValueError(f"streams shorter than one block ({block_len})")
    m = np.ones(a.size) if mask is None else np.asarray(mask, dtype=np.float64)
    cut = nb * block_len
    sa = (a[:cut] * m[:cut]).reshape(nb, block_len).sum(axis=1)
    sb = (b[:cut] * m[:cut]).reshape(nb, block_len).sum(axis=1)
    cnt = m[:cut].reshape(nb, block_len).sum(axis=1)
    if cnt.sum() == 0:
        raise ValueError("mask selects no tokens")
    point = math.exp(sa.sum() / cnt.sum()) - math.exp(sb.sum() / cnt.sum())
    rng = np.random.default_rng(seed)
    stats = np.empty(n)
    chunk = max(1, 2_000_000 // nb)
    for s in range(0, n, chunk):
        k = min(chunk, n - s)
        idx = rng.integers(0, nb, size=(k, nb))
        c = cnt[idx].sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            stats[s:s + k] = np.exp(sa[idx].sum(axis=1) / c) - np.exp(sb[idx].sum(axis=1) / c)
    stats = stats[np.isfinite(stats)]
    tail = 100.0 * (1.0 - level) / 2.0
    lo, hi = np.percentile(stats, [tail, 100.0 - tail])
    return BootstrapResult(point, float(stats.mean()), float(lo), float(hi), nb)


# --------------------------------------------------------------------------
# gate traces and timescale estimates
# --------------------------------------------------------------------------

@dataclass
class GateTraceSet:
    """Forget-gate values of every unit of one layer: ``values`` is (units, N, K)."""

    layer: int
    values: np.ndarray

    def estimated_timescales(self) -> np.ndarray:
        return estimate_timescales(self.values)

    def mean_gate(self) -> np.ndarray:
        return self.values.reshape(self.values.shape[0], -1).mean(axis=1)

    def heatmap(self, sequence: int = 0, group: int = 10) -> np.ndarray:
        """Units sorted by mean gate (ascending) and averaged in consecutive groups of ``group``.

        Returns (units // group, K) for one sequence.
        """
        order = np.argsort(self.mean_gate(), kind="stable")
        seq = self.values[order, sequence, :]
        G = seq.shape[0] // group
        return seq[:G * group].reshape(G, group, -1).mean(axis=1)


def collect_gate_traces(model, tokens, layer: int, K: int = 70, max_sequences: int | None = None) -> GateTraceSet:
    """Record forget gates during a stateful single-stream pass cut into length-K sequences.

    A trailing window shorter than K is not recorded.
    """
    layers = model.layers
    if not 0 <= layer < len(layers):
        raise IndexError(f"layer {layer} out of range (model has {len(layers)})")
    tokens = np.asarray(tokens, dtype=np.int64)
    plan = make_batch_plan(tokens.size, 1, "eval", eval_len=K)
    state = None
    traces = []
    for inputs, targets in plan.batches(tokens):
        _, state = model.forward(inputs, targets, state)
        if inputs.shape[0] == K:
            traces.append(layers[layer].gate_trace("f")[:, 0, :])  # (K, H)
        if max_sequences is not None and len(traces) >= max_sequences:
            break
    if not traces:
        raise ValueError(f"need at least {K + 1} tokens to record one sequence")
    values = np.stack(traces).transpose(2, 0, 1)  # (H, N, K)
    return GateTraceSet(layer, values)


def rankdata(x) -> np.ndarray:
    """Ranks 1..n with ties sharing their average rank."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(x.size)
    xs = x[order]
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(a, b) -> float:
    ra, rb = rankdata(a), rankdata(b)
    ra -= ra.mean()
    rb -= rb.mean()
    denom = math.sqrt(float(ra @ ra) * float(rb @ rb))
    return float(ra @ rb) / denom if denom > 0 else math.nan


# --------------------------------------------------------------------------
# KS fitting
# --------------------------------------------------------------------------

def ks_statistic(samples, cdf) -> float:
    """max_i max(|i/n - F(x_i)|, |(i-1)/n - F(x_i)|) over the sorted samples."""
    x = np.sort(np.asarray(samples, dtype=np.float64))
    n = x.size
    if n == 0:
        raise ValueError("no samples")
    F = np.asarray(cdf(x), dtype=np.float64)
    i = np.arange(1, n + 1)
    return float(max(np.max(np.abs(i / n - F)), np.max(np.abs((i - 1) / n - F))))


_erf = np.vectorize(math.erf, otypes=[np.float64])


def normal_cdf(x, mu: float, sigma: float):
    return 0.5 * (1.0 + _erf((np.asarray(x, dtype=np.float64) - mu) / (sigma * math.sqrt(2.0))))


DEFAULT_ALPHA_GRID = tuple(round(0.1 * k, 1) for k in range(1, 31))
DEFAULT_MU_GRID = tuple(round(0.1 * k, 1) for k in range(1, 31))


@dataclass
class KsFitResult:
    family: str
    grid: np.ndarray
    D: np.ndarray
    best_param: float = field(init=False)
    best_D: float = field(init=False)

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float64)
        self.D = np.asarray(self.D, dtype=np.float64)
        k = int(np.argmin(self.D))
        self.best_param = float(self.grid[k])
        self.best_D = float(self.D[k])


def fit_timescale_distribution(samples, alpha_grid=DEFAULT_ALPHA_GRID, mu_grid=DEFAULT_MU_GRID,
                               sigma: float = 0.1, beta: float = 1.0) -> dict:
    """KS statistic over a parameter grid for each candidate family.

    Families: ``inverse-gamma`` (shape varies, scale ``beta``) and
    ``narrow-gaussian`` (mean varies, fixed ``sigma``). Returns
    ``{family: KsFitResult, "best": family with the lowest D}``.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.size == 0:
        raise ValueError("no samples")
    if len(alpha_grid) == 0 or len(mu_grid) == 0:
        raise ValueError("empty parameter grid")
    out = {}
    if (x > 0).all():
        D = [ks_statistic(x, lambda v, a=a: inv_gamma_cdf(v, InverseGammaParams(a, beta))) for a in alpha_grid]
        out["inverse-gamma"] = KsFitResult("inverse-gamma", alpha_grid, D)
    D = [ks_statistic(x, lambda v, m=m: normal_cdf(v, m, sigma)) for m in mu_grid]
    out["narrow-gaussian"] = KsFitResult("narrow-gaussian", mu_grid, D)
    out["best"] = min((r for r in out.values()), key=lambda r: r.best_D).family
    return out


# --------------------------------------------------------------------------
# unit ablation
# --------------------------------------------------------------------------

@dataclass
class AblationGroup:
    group: int
    units: np.ndarray
    mean_T: float
    ratios: dict  # bin name -> ablated / intact perplexity


def ablate_units(model, tokens, layer: int, units, vocab=None, bins=None, batch_size: int = 1,
                 ablate_cell: bool = False) -> EvalReport:
    """Evaluate with the outputs of ``units`` in ``layer`` held at zero."""
    model.set_ablation(layer, list(units), ablate_cell=ablate_cell)
    try:
        return evaluate_lm(model, tokens, vocab, batch_size=batch_size, bins=bins)
    finally:
        model.set_ablation(None)


def _ratios(ablated: EvalReport, intact: EvalReport) -> dict:
    ra, ri = ablated.table_row(), intact.table_row()
    return {k: (ra[k] / ri[k] if ri[k] == ri[k] else math.nan) for k in ri}


def ablate_and_route(model, tokens, layer: int, group_size: int = 50, timescales=None, vocab=None, bins=None,
                     batch_size: int = 1, ablate_cell: bool = False, intact: EvalReport | None = None):
    """Ablate consecutive groups of units sorted by timescale (longest first).

    ``timescales`` defaults to the layer's assigned timescales. The layer is
    split into ``width // group_size`` groups; each group is ablated in turn
    and the per-bin perplexity ratio against the intact model is reported.
    """
    width = model.layers[layer].hidden_size
    if group_size > width or group_size < 1:
        raise ValueError(f"group size {group_size} invalid for layer width {width}")
    if timescales is None:
        spec = model.specs.get(layer)
        if spec is None:
            raise ValueError("layer has no assigned timescales; pass timescales explicitly")
        timescales = spec.timescales
    timescales = np.asarray(timescales, dtype=np.float64)
    order = np.argsort(-timescales, kind="stable")
    if intact is None:
        model.set_ablation(None)
        intact = evaluate_lm(model, tokens, vocab, batch_size=batch_size, bins=bins)
    groups = []
    for g in range(width // group_size):
        units = order[g * group_size:(g + 1) * group_size]
        rep = ablate_units(model, tokens, layer, units, vocab, bins, batch_size, ablate_cell)
        groups.append(AblationGroup(g, units, float(timescales[units].mean()), _ratios(rep, intact)))
    return groups


# --------------------------------------------------------------------------
# word ablation
# --------------------------------------------------------------------------

def _cell_states(model, ids, embedded=None):
    ids = np.asarray(ids, dtype=np.int64)[:, None]
    model.forward(ids, np.zeros_like(ids), None, inputs_embedded=embedded)
    return [layer.cell_trace()[:, 0, :] for layer in model.layers]


def word_ablation_decay(model, sentences, ablate_pos: int, policy: str = "unk", unk_id: int | None = None,
                        group_layer: int | None = None, group_size: int = 100, timescales=None) -> dict:
    """Normalized cell-state difference after replacing one word.

    For each sentence the intact and ablated runs are compared per layer:
    curve(tau) = ||c[t0 + tau] - c'[t0 + tau]||_2 divided by its value at
    tau = 0, then averaged over sentences (per tau, over the sentences long
    enough to reach it). ``policy`` is ``"unk"`` (swap in ``unk_id``) or
    ``"zero"`` (zero input embedding). With ``group_layer`` set, the units of
    that layer are also sorted by timescale into ``group_size`` groups with
    one curve each (norm restricted to the group).

    Returns ``{"layers": [curve per layer], "groups": [(mean_T, curve), ...]}``.
    """
    if policy not in ("unk", "zero"):
        raise ValueError(f"unknown ablation policy {policy!r}")
    if policy == "unk" and unk_id is None:
        raise ValueError("unk policy needs unk_id")
    n_layers = len(model.layers)
    group_units = []
    if group_layer is not None:
        ts = timescales if timescales is not None else model.specs[group_layer].timescales
        ts = np.asarray(ts, dtype=np.float64)
        order = np.argsort(ts, kind="stable")
        for g in range(len(order) // group_size):
            u = order[g * group_size:(g + 1) * group_size]
            group_units.append((float(ts[u].mean()), u))
    sums = [dict() for _ in range(n_layers)]
    gsums = [dict() for _ in group_units]
    model.set_ablation(None)
    for sent in sentences:
        sent = np.asarray(sent, dtype=np.int64)
        if sent.size <= ablate_pos:
            raise ValueError(f"sentence of length {sent.size} too short for ablate_pos {ablate_pos}")
        intact = _cell_states(model, sent)
        if policy == "unk":
            if sent[ablate_pos] == unk_id:
                raise ValueError("degenerate ablation: word is already the replacement token")
            alt = sent.copy()
            alt[ablate_pos] = unk_id
            ablated = _cell_states(model, alt)
        else:
            emb = model.embedding[sent][:, None, :].copy()
            emb[ablate_pos] = 0.0
            ablated = _cell_states(model, sent, embedded=emb)
        for k in range(n_layers):
            diff = np.linalg.norm(intact[k][ablate_pos:] - ablated[k][ablate_pos:], axis=1)
            _accumulate(sums[k], diff)
        for g, (_, u) in enumerate(group_units):
            diff = np.linalg.norm(intact[group_layer][ablate_pos:, u] - ablated[group_layer][ablate_pos:, u], axis=1)
            _accumulate(gsums[g], diff)
    layers = [_finish(s) for s in sums]
    groups = [(mt, _finish(s)) for (mt, _), s in zip(group_units, gsums)]
    return {"layers": layers, "groups": groups}


def _accumulate(acc: dict, diff: np.ndarray) -> None:
    if diff[0] == 0:
        return  # no difference at the ablated step for this unit set
    curve = diff / diff[0]
    for tau, v in enumerate(curve):
        s, n = acc.get(tau, (0.0, 0))
        acc[tau] = (s + v, n + 1)


def _finish(acc: dict) -> np.ndarray:
    if not acc:
        return np.empty(0)
    return np.array([acc[t][0] / acc[t][1] for t in range(len(acc))])


# --------------------------------------------------------------------------
# Dyck accuracy
# --------------------------------------------------------------------------

@dataclass
class BucketAccuracy:
    lo: float
    hi: float
    n: int
    accuracy: float


def sequence_correct(model, sequences, threshold: float = 0.5, batch_size: int = 100) -> np.ndarray:
    """Whole-sequence correctness: every step's two thresholded outputs match the target."""
    if hasattr(model, "forward") and hasattr(model, "layer"):
        from .train import pad_batch
        out = []
        for s in range(0, len(sequences), batch_size):
            chunk = sequences[s:s + batch_size]
            xs, ys, mask = pad_batch(chunk)
            pred = sigmoid(model.forward(xs)) > threshold
            good = (pred == (ys > 0.5)).all(axis=-1) | (mask == 0)
            out.extend(good.all(axis=0).tolist())
        return np.array(out, dtype=bool)
    res = []
    for seq in sequences:
        p = np.asarray(model.predict_proba(seq.symbols)) > threshold
        res.append(bool((p == (seq.targets > 0.5)).all()))
    return np.array(res, dtype=bool)


def dyck_accuracy_by_timescale(model, sequences, bucket_edges=(0, 25, 50, 75, 100, 125, 150, 200),
                               threshold: float = 0.5):
    """Fraction of fully-correct sequences per max-pair-distance bucket [lo, hi).

    The last bucket is closed on the right. Empty buckets are omitted. Returns
    (buckets, overall accuracy).
    """
    correct = sequence_correct(model, sequences, threshold)
    md = np.array([s.max_distance for s in sequences])
    edges = list(bucket_edges)
    out = []
    for k, (lo, hi) in enumerate(zip(edges[:-1], edges[1:])):
        last = k == len(edges) - 2
        sel = (md >= lo) & ((md <= hi) if last else (md < hi))
        if sel.any():
            out.append(BucketAccuracy(lo, hi, int(sel.sum()), float(correct[sel].mean())))
    return out, float(correct.mean()) if correct.size else math.nan
