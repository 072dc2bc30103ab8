"""Dense LSTM math with hand-derived backward passes.

Everything is float64 and batch-first: activations have shape ``(batch, features)``
and sequences ``(steps, batch, features)``. There is no general autodiff; each
layer type carries its own analytic gradient.
"""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

GATES = ("i", "f", "c", "o")


def sigmoid(z):
    """Logistic function as 0.5 * (1 + tanh(z / 2)); never overflows for any finite z."""
    return 0.5 + 0.5 * np.tanh(0.5 * np.asarray(z, dtype=np.float64))


def log_softmax(logits):
    """log softmax along the last axis: z - (m + log sum exp(z - m)), m = max(z)."""
    m = np.max(logits, axis=-1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


class GradientStore(dict):
    """Gradient buffers keyed like the parameter dict they mirror."""

    @classmethod
    def like(cls, params: dict) -> "GradientStore":
        return cls({k: np.zeros_like(v) for k, v in params.items()})

    def zero(self) -> None:
        for g in self.values():
            g.fill(0.0)

    def add(self, other: dict, prefix: str = "") -> None:
        for k, g in other.items():
            key = prefix + k
            if key in self:
                self[key] += g
            else:
                self[key] = np.array(g, dtype=np.float64, copy=True)

    def global_norm(self, skip: Iterable[str] = ()) -> float:
        skip = set(skip)
        return float(np.sqrt(sum(float(np.sum(g * g)) for k, g in self.items() if k not in skip)))


class LstmLayer:
    """One LSTM layer with per-step caches for backpropagation through time.

    Weights are stored as two fused matrices, ``W_x`` of shape (input, 4H) and
    ``W_h`` of shape (H, 4H), with column blocks ordered i, f, c, o. Biases are
    kept as separate vectors so the input and forget biases can be frozen.
    """

    def __init__(self, input_size: int, hidden_size: int, rng=None, init_range: float | None = None):
        if input_size < 1 or hidden_size < 1:
            raise ValueError("input_size and hidden_size must be positive")
        self.input_size = int(input_size)
        self.hidden_size = int(hidden_size)
        H = self.hidden_size
        r = 1.0 / H if init_range is None else float(init_range)
        rng = np.random.default_rng(rng)
        self.params = {
            "W_x": rng.uniform(-r, r, size=(self.input_size, 4 * H)),
            "W_h": rng.uniform(-r, r, size=(H, 4 * H)),
            "b_i": rng.uniform(-r, r, size=H),
            "b_f": rng.uniform(-r, r, size=H),
            "b_c": rng.uniform(-r, r, size=H),
            "b_o": rng.uniform(-r, r, size=H),
        }
        self.bias_frozen = False
        # 0/1 vector over units; zeroed units emit h = 0 (and c = 0 if ablate_cell)
        self.output_mask: np.ndarray | None = None
        self.ablate_cell = False
        self.reset_cache()

    # -- parameter helpers -------------------------------------------------
    def gate_weights(self, gate: str):
        """Return (W_<gate>x, W_<gate>h) views for gate in 'ifco'."""
        k = GATES.index(gate)
        H = self.hidden_size
        return self.params["W_x"][:, k * H:(k + 1) * H], self.params["W_h"][:, k * H:(k + 1) * H]

    @property
    def frozen_names(self) -> tuple[str, ...]:
        return ("b_i", "b_f") if self.bias_frozen else ()

    def freeze_biases(self, b_f) -> None:
        """Fix the forget bias to ``b_f`` and the input bias to ``-b_f``."""
        b_f = np.asarray(b_f, dtype=np.float64)
        if b_f.shape != (self.hidden_size,):
            raise ValueError(f"expected {self.hidden_size} forget biases, got shape {b_f.shape}")
        self.params["b_f"] = b_f.copy()
        self.params["b_i"] = -b_f
        self.bias_frozen = True

    def _bias(self):
        p = self.params
        return np.concatenate([p["b_i"], p["b_f"], p["b_c"], p["b_o"]])

    # -- forward -------------------------------------------------------------
    def reset_cache(self) -> None:
        self.cache: list[dict] = []

    def step(self, x_t, h_prev, c_prev):
        """Advance one timestep, append the step cache and return (h_t, c_t)."""
        x_t = np.asarray(x_t, dtype=np.float64)
        if x_t.ndim != 2 or x_t.shape[1] != self.input_size:
            raise ValueError(f"x_t must be (batch, {self.input_size}), got {x_t.shape}")
        self._check_state(x_t.shape[0], h_prev, c_prev)
        if not (np.isfinite(x_t).all() and np.isfinite(h_prev).all() and np.isfinite(c_prev).all()):
            raise FloatingPointError("non-finite input to lstm step")
        return self._step(x_t, x_t @ self.params["W_x"] + self._bias(), h_prev, c_prev)

    def _check_state(self, B, h_prev, c_prev):
        if h_prev.shape != (B, self.hidden_size) or c_prev.shape != (B, self.hidden_size):
            raise ValueError("state shape does not match (batch, hidden_size)")

    def _step(self, x_t, zx, h_prev, c_prev):
        H = self.hidden_size
        z = zx + h_prev @ self.params["W_h"]
        i = sigmoid(z[:, :H])
        f = sigmoid(z[:, H:2 * H])
        g = np.tanh(z[:, 2 * H:3 * H])
        o = sigmoid(z[:, 3 * H:])
        c = f * c_prev + i * g
        if self.output_mask is not None and self.ablate_cell:
            c = c * self.output_mask
        tc = np.tanh(c)
        h = o * tc
        if self.output_mask is not None:
            h = h * self.output_mask
        if not np.isfinite(tc[0, 0] + c.sum()):
            raise FloatingPointError("non-finite cell state")
        self.cache.append(dict(x=x_t, h_prev=h_prev, c_prev=c_prev, i=i, f=f, g=g, o=o, c=c, tc=tc))
        return h, c

    def forward(self, xs, h0=None, c0=None):
        """Run a whole sequence ``xs`` of shape (steps, batch, input).

        The input projection of every step is computed in one matmul up front.
        """
        xs = np.asarray(xs, dtype=np.float64)
        if xs.ndim != 3 or xs.shape[2] != self.input_size:
            raise ValueError(f"xs must be (steps, batch, {self.input_size}), got {xs.shape}")
        if not np.isfinite(xs).all():
            raise FloatingPointError("non-finite input to lstm layer")
        T, B = xs.shape[0], xs.shape[1]
        h = np.zeros((B, self.hidden_size)) if h0 is None else h0
        c = np.zeros((B, self.hidden_size)) if c0 is None else c0
        self._check_state(B, h, c)
        zx = xs @ self.params["W_x"] + self._bias()
        hs = np.empty((T, B, self.hidden_size))
        for t in range(T):
            h, c = self._step(xs[t], zx[t], h, c)
            hs[t] = h
        return hs, (h, c)

    # -- backward --------------------------------------------------------------
    def backward(self, dhs, dh_last=None, dc_last=None):
        """Backpropagate through every cached step.

        ``dhs`` is the upstream gradient w.r.t. each step's output h, shape
        (steps, batch, H). Returns (grads, dxs, dh0, dc0). Frozen biases still
        get their gradient computed; the optimizer is responsible for skipping them.

        Only the recurrent term is propagated step by step; weight and input
        gradients are formed afterwards from the stacked pre-activation grads.
        """
        n = len(self.cache)
        dhs = np.asarray(dhs, dtype=np.float64)
        if n == 0:
            raise RuntimeError("backward called without forward caches")
        if dhs.shape[0] != n:
            raise ValueError(f"got upstream gradients for {dhs.shape[0]} steps, cache has {n}")
        H = self.hidden_size
        B = dhs.shape[1]
        W_x, W_h = self.params["W_x"], self.params["W_h"]
        W_hT = np.ascontiguousarray(W_h.T)
        dh_next = np.zeros((B, H)) if dh_last is None else np.array(dh_last, dtype=np.float64)
        dc_next = np.zeros((B, H)) if dc_last is None else np.array(dc_last, dtype=np.float64)
        mask = self.output_mask
        DZ = np.empty((n, B, 4 * H))
        for t in range(n - 1, -1, -1):
            s = self.cache[t]
            dh = dhs[t] + dh_next
            if mask is not None:
                dh = dh * mask
            tc = s["tc"]
            i, f, g, o = s["i"], s["f"], s["g"], s["o"]
            dc = dc_next + dh * o * (1.0 - tc * tc)
            if mask is not None and self.ablate_cell:
                dc = dc * mask
            dz = DZ[t]
            dz[:, :H] = dc * g * i * (1.0 - i)
            dz[:, H:2 * H] = dc * s["c_prev"] * f * (1.0 - f)
            dz[:, 2 * H:3 * H] = dc * i * (1.0 - g * g)
            dz[:, 3 * H:] = dh * tc * o * (1.0 - o)
            dh_next = dz @ W_hT
            dc_next = dc * f
        X = np.stack([s["x"] for s in self.cache]).reshape(n * B, -1)
        Hp = np.stack([s["h_prev"] for s in self.cache]).reshape(n * B, H)
        DZf = DZ.reshape(n * B, 4 * H)
        db = DZf.sum(axis=0)
        grads = {
            "W_x": X.T @ DZf,
            "W_h": Hp.T @ DZf,
            "b_i": db[:H].copy(),
            "b_f": db[H:2 * H].copy(),
            "b_c": db[2 * H:3 * H].copy(),
            "b_o": db[3 * H:].copy(),
        }
        dxs = DZ @ W_x.T
        return GradientStore(grads), dxs, dh_next, dc_next

    def gate_trace(self, gate: str = "f") -> np.ndarray:
        """Cached gate values as (steps, batch, H)."""
        if not self.cache:
            return np.empty((0, 0, self.hidden_size))
        return np.stack([s[gate] for s in self.cache])

    def cell_trace(self) -> np.ndarray:
        if not self.cache:
            return np.empty((0, 0, self.hidden_size))
        return np.stack([s["c"] for s in self.cache])


def lstm_step(layer: LstmLayer, x_t, h_prev, c_prev):
    """Functional alias for :meth:`LstmLayer.step`."""
    return layer.step(x_t, h_prev, c_prev)


def lstm_backward(layer: LstmLayer, dhs, dh_last=None, dc_last=None):
    return layer.backward(dhs, dh_last, dc_last)


def cross_entropy_tied_softmax(hidden, embedding, targets):
    """Per-token cross entropy with the decoder weight tied to ``embedding``.

    logits = hidden @ embedding.T, loss_t = -log softmax(logits_t)[target_t].

    Returns ``(losses, d_hidden, d_embedding_fn)`` where the gradients are for
    the *sum* of the returned losses: ``d_hidden`` has the shape of ``hidden``
    and ``d_embedding`` the shape of ``embedding``. Callers add
    ``d_embedding`` to the same gradient buffer used by the input lookup so the
    single shared matrix accumulates both contributions.
    """
    hidden = np.asarray(hidden, dtype=np.float64)
    targets = np.asarray(targets)
    V, E = embedding.shape
    if hidden.shape[-1] != E:
        raise ValueError(f"hidden width {hidden.shape[-1]} != embedding width {E}")
    if targets.size and (targets.min() < 0 or targets.max() >= V):
        raise IndexError("target id out of vocabulary")
    flat_h = hidden.reshape(-1, E)
    flat_t = targets.reshape(-1)
    logp = log_softmax(flat_h @ embedding.T)
    rows = np.arange(flat_t.size)
    losses = -logp[rows, flat_t]
    dlogits = np.exp(logp)
    dlogits[rows, flat_t] -= 1.0
    d_hidden = (dlogits @ embedding).reshape(hidden.shape)
    d_embedding = dlogits.T @ flat_h
    return losses.reshape(targets.shape), d_hidden, d_embedding


def sigmoid_mse(outputs, targets, mask=None):
    """Mean over (unmasked) elements of (sigmoid(o) - y)^2 and its gradient w.r.t. o."""
    outputs = np.asarray(outputs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if outputs.shape != targets.shape:
        raise ValueError(f"shape mismatch: {outputs.shape} vs {targets.shape}")
    p = sigmoid(outputs)
    diff = p - targets
    if mask is None:
        count = diff.size
        w = 1.0
    else:
        w = np.broadcast_to(np.asarray(mask, dtype=np.float64)[..., None], diff.shape)
        count = float(w.sum())
    count = max(count, 1)
    loss = float(np.sum(w * diff * diff) / count)
    grad = w * 2.0 * diff * p * (1.0 - p) / count
    return loss, grad


def grad_check(
    loss_fn: Callable[[], float],
    params: dict,
    grads: dict,
    eps: float = 1e-5,
    frozen: Iterable[str] = (),
    max_coords: int = 64,
    rng=0,
    floor: float = 1e-8,
):
    """Compare analytic gradients with central finite differences.

    ``loss_fn`` re-evaluates the scalar loss from the *current* contents of
    ``params`` (buffers are perturbed in place and restored). Buffers with more
    than ``max_coords`` entries are sampled. Relative error per coordinate is
    |a - n| / max(|a|, |n|, floor).

    Returns a dict: name -> {"max_rel_err", "n_checked", "updatable"}, plus the
    key ``"max_rel_err"`` for the overall worst case.
    """
    frozen = set(frozen)
    rng = np.random.default_rng(rng)
    report = {}
    worst = 0.0
    for name, buf in params.items():
        flat = buf.reshape(-1)
        g = np.asarray(grads[name]).reshape(-1)
        if flat.size > max_coords:
            idx = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        else:
            idx = np.arange(flat.size)
        errs = []
        for j in idx:
            orig = flat[j]
            flat[j] = orig + eps
            lp = loss_fn()
            flat[j] = orig - eps
            lm = loss_fn()
            flat[j] = orig
            num = (lp - lm) / (2 * eps)
            errs.append(abs(g[j] - num) / max(abs(g[j]), abs(num), floor))
        err = float(max(errs)) if errs else 0.0
        report[name] = {"max_rel_err": err, "n_checked": int(len(idx)), "updatable": name not in frozen}
        worst = max(worst, err)
    report["max_rel_err"] = worst
    return report
