"""Optimizers and training loops.

Language models use plain SGD that switches to iterate averaging once the
validation loss stops improving (non-monotone trigger). Dyck models use Adam on
a per-step sigmoid MSE. Every optimizer skips frozen buffers entirely, so fixed
timescale biases are never written.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .corpus import CorpusBundle, make_batch_plan
from .dyck import DyckSequence
from .model import save_checkpoint

log = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "train_loss", "valid_loss", "lr", "asgd_triggered")


class TrainingDiverged(RuntimeError):
    pass


def _check_finite(grads) -> None:
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient in {name}")


def clip_grads(grads: dict, clip_norm: float | None, skip=()) -> float:
    """Scale ``grads`` in place so their global L2 norm is at most ``clip_norm``; returns the pre-clip norm."""
    skip = set(skip)
    norm = math.sqrt(sum(float(np.sum(g * g)) for k, g in grads.items() if k not in skip))
    if clip_norm is not None and clip_norm > 0 and norm > clip_norm:
        scale = clip_norm / (norm + 1e-12)
        for k, g in grads.items():
            if k not in skip:
                g *= scale
    return norm


def sgd_step(params: dict, grads: dict, lr: float, weight_decay: float = 0.0, clip_norm: float | None = None,
             frozen=()) -> None:
    """Global-norm clip, then w <- w - lr * (g + wd * w) for every non-frozen buffer (in place)."""
    frozen = set(frozen)
    live = {k: g for k, g in grads.items() if k not in frozen}
    _check_finite(live)
    clip_grads(live, clip_norm)
    for k, g in live.items():
        w = params[k]
        if weight_decay:
            w -= lr * (g + weight_decay * w)
        else:
            w -= lr * g


def nt_asgd_trigger(history, n: int = 5) -> bool:
    """Non-monotone trigger on a validation-loss history whose last entry is the current loss.

    Fires when more than ``n`` earlier evaluations exist and the current loss
    is worse than the best of all but the most recent ``n`` of them.
    """
    if len(history) == 0:
        raise ValueError("empty history")
    prior, current = list(history[:-1]), history[-1]
    return len(prior) > n and current > min(prior[:-n])


@dataclass
class SgdAsgdConfig:
    lr: float = 20.0
    weight_decay: float = 1.2e-6
    clip_norm: float = 0.25
    epochs: int = 1000
    nonmono: int = 5
    batch_size: int = 20
    eval_batch_size: int = 10
    train_len: int = 70
    short_len: int = 35
    p_long: float = 0.95
    eval_len: int = 70

    def __post_init__(self):
        if self.nonmono < 1:
            raise ValueError("nonmono interval must be >= 1")


class AveragedSGD:
    """SGD with optional iterate averaging.

    Before :meth:`start_averaging` it is plain SGD. Afterwards every step also
    folds the post-step parameters into a running arithmetic mean.
    """

    def __init__(self, params: dict, frozen=(), lr=20.0, weight_decay=0.0, clip_norm=None):
        self.params = params
        self.frozen = set(frozen)
        self.lr = lr
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.step_count = 0
        self.avg_start: int | None = None
        self.n_avg = 0
        self.avg: dict | None = None

    @property
    def triggered(self) -> bool:
        return self.avg_start is not None

    def start_averaging(self) -> None:
        if self.avg is None:
            self.avg_start = self.step_count
            self.avg = {k: np.zeros_like(v) for k, v in self.params.items() if k not in self.frozen}
            self.n_avg = 0

    def step(self, grads: dict) -> None:
        sgd_step(self.params, grads, self.lr, self.weight_decay, self.clip_norm, self.frozen)
        self.step_count += 1
        if self.avg is not None:
            self.n_avg += 1
            for k, a in self.avg.items():
                a += (self.params[k] - a) / self.n_avg

    def averaged_params(self) -> dict:
        """Current parameters with averaged values substituted where available."""
        out = {k: v.copy() for k, v in self.params.items()}
        if self.avg is not None and self.n_avg > 0:
            for k, a in self.avg.items():
                out[k] = a.copy()
        return out

    def state_dict(self) -> dict:
        scalars = {"kind": "asgd", "lr": self.lr, "weight_decay": self.weight_decay, "clip_norm": self.clip_norm,
                   "step_count": self.step_count, "avg_start": self.avg_start, "n_avg": self.n_avg}
        buffers = {f"avg/{k}": v for k, v in (self.avg or {}).items()}
        return {"scalars": scalars, "buffers": buffers}

    def load_state_dict(self, state: dict) -> None:
        s = state["scalars"]
        self.lr, self.weight_decay, self.clip_norm = s["lr"], s["weight_decay"], s["clip_norm"]
        self.step_count, self.avg_start, self.n_avg = s["step_count"], s["avg_start"], s["n_avg"]
        avg = {k[len("avg/"):]: v.copy() for k, v in state["buffers"].items() if k.startswith("avg/")}
        self.avg = avg if self.avg_start is not None else None


@dataclass
class AdamConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 2000
    batch_size: int = 1
    clip_norm: float | None = None


class Adam:
    """Bias-corrected Adam; frozen buffers get no moment buffers and are never touched."""

    def __init__(self, params: dict, frozen=(), lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8, clip_norm=None):
        self.params = params
        self.frozen = set(frozen)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.clip_norm = clip_norm
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items() if k not in self.frozen}
        self.v = {k: np.zeros_like(v) for k, v in params.items() if k not in self.frozen}

    @classmethod
    def from_config(cls, params, frozen, config: AdamConfig):
        return cls(params, frozen, config.lr, config.beta1, config.beta2, config.eps, config.clip_norm)

    def step(self, grads: dict) -> None:
        live = {k: grads[k] for k in self.m}
        _check_finite(live)
        clip_grads(live, self.clip_norm)
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, g in live.items():
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            self.params[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> dict:
        scalars = {"kind": "adam", "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps, "t": self.t}
        buffers = {f"m/{k}": v for k, v in self.m.items()}
        buffers.update({f"v/{k}": v for k, v in self.v.items()})
        return {"scalars": scalars, "buffers": buffers}

    def load_state_dict(self, state: dict) -> None:
        s = state["scalars"]
        self.lr, self.beta1, self.beta2, self.eps, self.t = s["lr"], s["beta1"], s["beta2"], s["eps"], s["t"]
        for k in self.m:
            self.m[k][...] = state["buffers"][f"m/{k}"]
            self.v[k][...] = state["buffers"][f"v/{k}"]


def adam_step(optimizer: Adam, grads: dict) -> None:
    optimizer.step(grads)


# --------------------------------------------------------------------------
# language model training
# --------------------------------------------------------------------------

def evaluate_loss(model, tokens, batch_size: int = 10, window: int = 70) -> float:
    """Mean per-token NLL of a stateful pass over ``tokens``."""
    plan = make_batch_plan(len(tokens), batch_size, "eval", eval_len=window)
    state = None
    total, count = 0.0, 0
    for inputs, targets in plan.batches(tokens):
        nll, state = model.forward(inputs, targets, state)
        total += float(nll.sum())
        count += nll.size
    return total / count


@dataclass
class TrainResult:
    model: object
    history: list
    best_valid: float
    optimizer: object


def _write_csv(path, fields, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in fields})


def train_lm(model, corpus: CorpusBundle, config: SgdAsgdConfig | None = None, seed: int = 0,
             log_path=None, timing_path=None, checkpoint_path=None) -> TrainResult:
    """Stateful truncated-BPTT training with the non-monotone averaging trigger.

    Hidden state carries across consecutive windows of a stream and is reset at
    each epoch start. After each epoch the validation loss (of the averaged
    weights, once averaging has begun) is logged; the best-validation weights
    are kept and loaded into ``model`` on return.
    """
    config = config or SgdAsgdConfig()
    if len(corpus.vocab) != model.vocab_size:
        raise ValueError(f"corpus vocabulary {len(corpus.vocab)} != model vocabulary {model.vocab_size}")
    params = model.parameters()
    opt = AveragedSGD(params, model.frozen, config.lr, config.weight_decay, config.clip_norm)
    history, timing, valid_hist = [], [], []
    best_valid, best_params = math.inf, None
    t_start = time.perf_counter()
    for epoch in range(1, config.epochs + 1):
        plan = make_batch_plan(len(corpus.train), config.batch_size, "train", seed=[seed, epoch],
                               train_len=config.train_len, short_len=config.short_len, p_long=config.p_long)
        state = None
        tot, cnt = 0.0, 0
        for inputs, targets in plan.batches(corpus.train):
            loss, grads, state = model.loss_and_grad(inputs, targets, state)
            opt.step(grads)
            tot += loss * inputs.size
            cnt += inputs.size
        eval_params = opt.averaged_params() if opt.triggered else None
        if eval_params is not None:
            live = {k: v.copy() for k, v in params.items()}
            model.load_parameters(eval_params)
        valid = evaluate_loss(model, corpus.valid, config.eval_batch_size, config.eval_len)
        if not math.isfinite(valid):
            raise TrainingDiverged(f"validation loss {valid} at epoch {epoch}")
        if valid < best_valid:
            best_valid = valid
            best_params = {k: v.copy() for k, v in model.parameters().items()}
            if checkpoint_path is not None:
                save_checkpoint(model, checkpoint_path, optimizer_state=opt.state_dict(),
                                meta={"epoch": epoch, "valid_loss": valid, "seed": seed})
        if eval_params is not None:
            model.load_parameters(live)
        valid_hist.append(valid)
        if not opt.triggered and nt_asgd_trigger(valid_hist, config.nonmono):
            opt.start_averaging()
            log.info("epoch %d: switching to averaged SGD", epoch)
        row = {"epoch": epoch, "train_loss": tot / cnt, "valid_loss": valid, "lr": opt.lr,
               "asgd_triggered": int(opt.triggered)}
        history.append(row)
        timing.append({"epoch": epoch, "wallclock_s": round(time.perf_counter() - t_start, 3)})
        log.info("epoch %d train %.4f valid %.4f", epoch, row["train_loss"], valid)
    if best_params is not None:
        model.load_parameters(best_params)
    if log_path is not None:
        _write_csv(log_path, LOG_FIELDS, history)
    if timing_path is not None:
        _write_csv(timing_path, ("epoch", "wallclock_s"), timing)
    return TrainResult(model, history, best_valid, opt)


# --------------------------------------------------------------------------
# Dyck training
# --------------------------------------------------------------------------

def pad_batch(seqs: list[DyckSequence]):
    """One-hot inputs (T, B, 4), targets (T, B, 2) and mask (T, B), zero-padded at the end."""
    T = max(len(s) for s in seqs)
    B = len(seqs)
    xs = np.zeros((T, B, 4))
    ys = np.zeros((T, B, 2))
    mask = np.zeros((T, B))
    for b, s in enumerate(seqs):
        n = len(s)
        xs[:n, b] = s.one_hot()
        ys[:n, b] = s.targets
        mask[:n, b] = 1.0
    return xs, ys, mask


def _dyck_batches(n: int, batch_size: int, lengths, rng):
    order = rng.permutation(n)
    if batch_size == 1:
        return [[int(i)] for i in order]
    # length-sort within pools of 20 batches to cut padding, then shuffle the batches
    pool = batch_size * 20
    batches = []
    for s in range(0, n, pool):
        chunk = sorted(order[s:s + pool].tolist(), key=lambda i: lengths[i])
        batches.extend(chunk[j:j + batch_size] for j in range(0, len(chunk), batch_size))
    return [batches[i] for i in rng.permutation(len(batches))]


def train_dyck(model, sequences: list[DyckSequence], config: AdamConfig | None = None, seed: int = 0,
               log_path=None, checkpoint_path=None) -> TrainResult:
    """Adam on per-step sigmoid MSE with full-sequence BPTT."""
    config = config or AdamConfig()
    if not sequences:
        raise ValueError("empty Dyck dataset")
    opt = Adam.from_config(model.parameters(), model.frozen, config)
    rng = np.random.default_rng(seed)
    lengths = [len(s) for s in sequences]
    history = []
    for epoch in range(1, config.epochs + 1):
        tot, cnt = 0.0, 0
        for idx in _dyck_batches(len(sequences), config.batch_size, lengths, rng):
            xs, ys, mask = pad_batch([sequences[i] for i in idx])
            loss, grads = model.loss_and_grad(xs, ys, mask)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
            opt.step(grads)
            tot += loss * len(idx)
            cnt += len(idx)
        history.append({"epoch": epoch, "train_loss": tot / cnt})
    if log_path is not None:
        _write_csv(log_path, ("epoch", "train_loss"), history)
    if checkpoint_path is not None:
        save_checkpoint(model, checkpoint_path, optimizer_state=opt.state_dict(),
                        rng_state=rng.bit_generator.state, meta={"epochs": config.epochs, "seed": seed})
    return TrainResult(model, history, math.nan, opt)


def config_dict(cfg) -> dict:
    return asdict(cfg)
