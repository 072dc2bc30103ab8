"""Stacked-LSTM language model, single-layer Dyck model, and the checkpoint container."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .mathkernel import GradientStore, LstmLayer, cross_entropy_tied_softmax, sigmoid, sigmoid_mse
from .timescale import TimescaleSpec, assign_timescales

MAGIC = b"MTSLSTM\x00"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


# --------------------------------------------------------------------------
# language model
# --------------------------------------------------------------------------

@dataclass
class LmConfig:
    """Architecture of the word-level model.

    ``timescales`` holds one entry per layer: ``None`` for trainable biases or
    a source accepted by :func:`assign_timescales` for frozen ones.
    """

    vocab_size: int
    emb_size: int = 400
    hidden_sizes: tuple = (1150, 1150, 400)
    timescales: list = field(default_factory=lambda: [None, None, None])
    tie_weights: bool = True
    emb_init: float = 0.1
    timescale_seed: int = 0

    def __post_init__(self):
        self.hidden_sizes = tuple(int(h) for h in self.hidden_sizes)
        if len(self.timescales) != len(self.hidden_sizes):
            raise ValueError("need one timescale entry per layer")
        if not self.hidden_sizes:
            raise ValueError("at least one layer required")
        if self.tie_weights and self.hidden_sizes[-1] != self.emb_size:
            raise ValueError(f"tied weights need last layer width {self.hidden_sizes[-1]} == emb_size {self.emb_size}")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")

    @classmethod
    def baseline(cls, vocab_size, emb_size=400, hidden_sizes=(1150, 1150, 400), **kw):
        return cls(vocab_size, emb_size, hidden_sizes, [None] * len(hidden_sizes), **kw)

    @classmethod
    def multi_timescale(cls, vocab_size, emb_size=400, hidden_sizes=(1150, 1150, 400), alpha=0.56,
                        short=(3.0, 4.0), mode="quantile", **kw):
        """Short fixed timescales in layer 1, Inverse Gamma in layer 2, the rest trainable."""
        ts = [None] * len(hidden_sizes)
        ig = {"kind": "inverse-gamma", "alpha": alpha, "beta": 1.0, "mode": mode}
        if len(hidden_sizes) >= 3:
            ts[0] = {"kind": "fixed", "values": list(short)}
            ts[1] = ig
        else:
            ts[0] = ig
        return cls(vocab_size, emb_size, hidden_sizes, ts, **kw)

    def to_json(self) -> dict:
        d = asdict(self)
        d["hidden_sizes"] = list(self.hidden_sizes)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "LmConfig":
        return cls(**d)


class LanguageModel:
    """Embedding -> stacked LSTM -> tied softmax decoder."""

    kind = "lm"

    def __init__(self, config: LmConfig, embedding: np.ndarray, layers: list[LstmLayer],
                 specs: dict[int, TimescaleSpec] | None = None, decoder: np.ndarray | None = None):
        self.config = config
        self.embedding = embedding
        self.layers = layers
        self.specs = dict(specs or {})
        self.decoder = embedding if config.tie_weights else decoder
        self._fwd = None

    @property
    def vocab_size(self):
        return self.config.vocab_size

    def parameters(self) -> dict:
        out = {"embedding": self.embedding}
        if not self.config.tie_weights:
            out["decoder"] = self.decoder
        for k, layer in enumerate(self.layers):
            for name, arr in layer.params.items():
                out[f"layers.{k}.{name}"] = arr
        return out

    def load_parameters(self, params: dict) -> None:
        """Copy values into the live buffers (keeps aliasing intact)."""
        for name, arr in self.parameters().items():
            arr[...] = params[name]

    @property
    def frozen(self) -> set[str]:
        return {f"layers.{k}.{n}" for k, layer in enumerate(self.layers) for n in layer.frozen_names}

    def zero_state(self, batch_size: int):
        return [(np.zeros((batch_size, l.hidden_size)), np.zeros((batch_size, l.hidden_size))) for l in self.layers]

    def set_ablation(self, layer: int | None = None, units=None, ablate_cell: bool = False) -> None:
        """Zero the outputs of ``units`` in ``layer`` (``None`` clears every mask)."""
        for l in self.layers:
            l.output_mask = None
            l.ablate_cell = False
        if layer is None or units is None:
            return
        if not 0 <= layer < len(self.layers):
            raise IndexError(f"layer {layer} out of range")
        lyr = self.layers[layer]
        mask = np.ones(lyr.hidden_size)
        mask[np.asarray(list(units), dtype=np.int64)] = 0.0
        lyr.output_mask = mask
        lyr.ablate_cell = ablate_cell

    def forward(self, inputs, targets, state=None, inputs_embedded=None):
        """Per-token NLL for one window; returns (nll (T, B), new_state).

        ``inputs``/``targets`` are (T, B) id arrays. Layer caches are rebuilt so
        :meth:`backward` can follow. The returned state holds plain arrays, so
        the next window starts a fresh gradient history.
        """
        inputs = np.asarray(inputs)
        targets = np.asarray(targets)
        if inputs.ndim != 2 or inputs.shape != targets.shape:
            raise ValueError("inputs and targets must be matching (T, B) arrays")
        V = self.vocab_size
        if inputs.size and (inputs.min() < 0 or inputs.max() >= V):
            raise IndexError("input id out of range")
        T, B = inputs.shape
        if state is None:
            state = self.zero_state(B)
        if len(state) != len(self.layers) or any(h.shape != (B, l.hidden_size) for (h, _), l in zip(state, self.layers)):
            raise ValueError("state shape does not match model/batch")
        x = self.embedding[inputs] if inputs_embedded is None else inputs_embedded
        new_state = []
        for layer, (h0, c0) in zip(self.layers, state):
            layer.reset_cache()
            x, (h, c) = layer.forward(x, h0, c0)
            new_state.append((h, c))
        nll, d_top, d_dec = cross_entropy_tied_softmax(x, self.decoder, targets)
        self._fwd = dict(inputs=inputs, d_top=d_top, d_dec=d_dec, n=nll.size)
        return nll, new_state

    def backward(self) -> GradientStore:
        """Gradients of the mean NLL of the last :meth:`forward` call."""
        if self._fwd is None:
            raise RuntimeError("backward called before forward")
        fw = self._fwd
        scale = 1.0 / fw["n"]
        grads = GradientStore()
        d_emb = np.zeros_like(self.embedding)
        d_dec = fw["d_dec"] * scale
        if self.config.tie_weights:
            d_emb += d_dec
        else:
            grads["decoder"] = d_dec
        dx = fw["d_top"] * scale
        for k in range(len(self.layers) - 1, -1, -1):
            g, dx, _, _ = self.layers[k].backward(dx)
            grads.add(g, prefix=f"layers.{k}.")
        np.add.at(d_emb, fw["inputs"].reshape(-1), dx.reshape(-1, dx.shape[-1]))
        grads["embedding"] = d_emb
        return grads

    def loss_and_grad(self, inputs, targets, state=None):
        nll, new_state = self.forward(inputs, targets, state)
        return float(nll.mean()), self.backward(), new_state

    def clone(self) -> "LanguageModel":
        layers = []
        for l in self.layers:
            c = LstmLayer.__new__(LstmLayer)
            c.__dict__.update(l.__dict__)
            c.params = {k: v.copy() for k, v in l.params.items()}
            c.output_mask = None if l.output_mask is None else l.output_mask.copy()
            c.reset_cache()
            layers.append(c)
        emb = self.embedding.copy()
        dec = None if self.config.tie_weights else self.decoder.copy()
        return LanguageModel(self.config, emb, layers, self.specs, dec)


def build_lm(config: LmConfig, seed=0) -> LanguageModel:
    """Uniform init: embedding in [-emb_init, emb_init], LSTM tensors in [-1/H, 1/H].

    Layers with a timescale source get their forget/input biases replaced by
    the frozen values b_f = forget_bias(T), b_i = -b_f.
    """
    rng = np.random.default_rng(seed)
    V, E = config.vocab_size, config.emb_size
    embedding = rng.uniform(-config.emb_init, config.emb_init, size=(V, E))
    decoder = None if config.tie_weights else rng.uniform(-config.emb_init, config.emb_init, size=(V, config.hidden_sizes[-1]))
    layers, specs = [], {}
    n_in = E
    for k, (H, source) in enumerate(zip(config.hidden_sizes, config.timescales)):
        layer = LstmLayer(n_in, H, rng=rng, init_range=1.0 / H)
        if source is not None:
            spec = assign_timescales(H, source, seed=config.timescale_seed + k)
            layer.freeze_biases(spec.b_f)
            specs[k] = spec
        layers.append(layer)
        n_in = H
    return LanguageModel(config, embedding, layers, specs, decoder)


# --------------------------------------------------------------------------
# Dyck model
# --------------------------------------------------------------------------

@dataclass
class DyckConfig:
    hidden_size: int = 256
    timescale: dict | None = None  # None -> trainable biases
    init_range: float | None = None  # default 1/sqrt(H)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "DyckConfig":
        return cls(**d)


class DyckModel:
    """One LSTM layer over one-hot brackets and a linear head to two sigmoid outputs."""

    kind = "dyck"

    def __init__(self, config: DyckConfig, layer: LstmLayer, W_out, b_out, spec: TimescaleSpec | None = None):
        self.config = config
        self.layer = layer
        self.W_out = W_out
        self.b_out = b_out
        self.spec = spec
        self._fwd = None

    @property
    def specs(self):
        return {} if self.spec is None else {0: self.spec}

    @property
    def layers(self):
        return [self.layer]

    def parameters(self) -> dict:
        out = {f"lstm.{k}": v for k, v in self.layer.params.items()}
        out["W_out"] = self.W_out
        out["b_out"] = self.b_out
        return out

    def load_parameters(self, params: dict) -> None:
        for name, arr in self.parameters().items():
            arr[...] = params[name]

    @property
    def frozen(self) -> set[str]:
        return {f"lstm.{n}" for n in self.layer.frozen_names}

    def forward(self, xs):
        """Logits (T, B, 2) for one-hot inputs (T, B, 4)."""
        xs = np.asarray(xs, dtype=np.float64)
        self.layer.reset_cache()
        hs, _ = self.layer.forward(xs)
        self._hs = hs
        return hs @ self.W_out + self.b_out

    def loss_and_grad(self, xs, ys, mask=None):
        logits = self.forward(xs)
        loss, d_logits = sigmoid_mse(logits, ys, mask)
        hs = self._hs
        grads = GradientStore()
        grads["W_out"] = np.einsum("tbh,tbk->hk", hs, d_logits)
        grads["b_out"] = d_logits.sum(axis=(0, 1))
        g, _, _, _ = self.layer.backward(d_logits @ self.W_out.T)
        grads.add(g, prefix="lstm.")
        return loss, grads

    def predict_proba(self, symbols: str) -> np.ndarray:
        from .dyck import encode
        return sigmoid(self.forward(encode(symbols)[:, None, :]))[:, 0, :]

    def clone(self) -> "DyckModel":
        layer = LstmLayer.__new__(LstmLayer)
        layer.__dict__.update(self.layer.__dict__)
        layer.params = {k: v.copy() for k, v in self.layer.params.items()}
        layer.reset_cache()
        return DyckModel(self.config, layer, self.W_out.copy(), self.b_out.copy(), self.spec)


def build_dyck_model(hidden_size: int = 256, timescale: str | dict | None = None, alpha: float = 1.5,
                     seed=0, init_range: float | None = None) -> DyckModel:
    """Baseline (``timescale=None``) or multi-timescale model.

    ``timescale="inverse-gamma"`` freezes biases at Inverse Gamma(alpha, 1)
    quantiles; a dict is passed straight to :func:`assign_timescales`.
    """
    if hidden_size < 2:
        raise ValueError("hidden_size must be >= 2")
    if timescale == "inverse-gamma":
        if not alpha > 0:
            raise ValueError("alpha must be > 0")
        timescale = {"kind": "inverse-gamma", "alpha": float(alpha), "beta": 1.0, "mode": "quantile"}
    elif timescale in ("baseline", "trainable"):
        timescale = None
    config = DyckConfig(hidden_size, timescale, init_range)
    return _dyck_from_config(config, seed)


def _dyck_from_config(config: DyckConfig, seed) -> DyckModel:
    rng = np.random.default_rng(seed)
    H = config.hidden_size
    r = config.init_range if config.init_range is not None else 1.0 / np.sqrt(H)
    layer = LstmLayer(4, H, rng=rng, init_range=r)
    W_out = rng.uniform(-r, r, size=(H, 2))
    b_out = rng.uniform(-r, r, size=2)
    spec = None
    if config.timescale is not None:
        spec = assign_timescales(H, config.timescale, seed=seed)
        layer.freeze_biases(spec.b_f)
    return DyckModel(config, layer, W_out, b_out, spec)


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(model, path, optimizer_state: dict | None = None, rng_state: dict | None = None,
                    meta: dict | None = None) -> None:
    """Write ``MAGIC | u32 version | u64 header length | JSON header | f64 buffers``.

    ``optimizer_state`` is ``{"scalars": {...}, "buffers": {name: array}}``.
    All multi-byte values are little-endian; the header carries a SHA-256 of
    the buffer payload.
    """
    buffers = {f"param/{k}": v for k, v in model.parameters().items()}
    opt_scalars = None
    if optimizer_state is not None:
        opt_scalars = optimizer_state.get("scalars", {})
        for k, v in optimizer_state.get("buffers", {}).items():
            buffers[f"opt/{k}"] = v
    entries, chunks, offset = [], [], 0
    for name in sorted(buffers):
        arr = np.ascontiguousarray(buffers[name], dtype="<f8")
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "format": "mtslstm-checkpoint",
        "version": FORMAT_VERSION,
        "kind": model.kind,
        "config": model.config.to_json(),
        "timescales": {str(k): s.to_json() for k, s in sorted(model.specs.items())},
        "frozen": sorted(model.frozen),
        "buffers": entries,
        "checksum": hashlib.sha256(payload).hexdigest(),
        "optimizer": opt_scalars,
        "rng_state": rng_state,
        "meta": meta or {},
    }
    hbytes = _canonical(header)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(hbytes)))
        fh.write(hbytes)
        fh.write(payload)


@dataclass
class Checkpoint:
    model: object
    optimizer_state: dict | None
    rng_state: dict | None
    meta: dict


def read_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if len(data) < 20:
        raise CheckpointError(f"{path}: truncated header")
    version, hlen = struct.unpack("<IQ", data[8:20])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    try:
        header = json.loads(data[20:20 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    payload = data[20 + hlen:]
    if hashlib.sha256(payload).hexdigest() != header["checksum"]:
        raise CheckpointError(f"{path}: checksum mismatch (truncated or corrupted payload)")
    arrays = {}
    for e in header["buffers"]:
        raw = payload[e["offset"]:e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(e["shape"])
    specs = {int(k): TimescaleSpec.from_json(v) for k, v in header["timescales"].items()}
    if header["kind"] == "lm":
        config = LmConfig.from_json(header["config"])
        model = build_lm(config, seed=0)
        model.specs = specs
    elif header["kind"] == "dyck":
        config = DyckConfig.from_json(header["config"])
        model = _dyck_from_config(config, seed=0)
        model.spec = specs.get(0)
    else:
        raise CheckpointError(f"{path}: unknown model kind {header['kind']!r}")
    frozen = set(header["frozen"])
    for layer, prefix in zip(model.layers, _layer_prefixes(model)):
        layer.bias_frozen = f"{prefix}b_f" in frozen
    model.load_parameters({k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")})
    opt = None
    if header.get("optimizer") is not None:
        opt = {"scalars": header["optimizer"],
               "buffers": {k[len("opt/"):]: v for k, v in arrays.items() if k.startswith("opt/")}}
    return Checkpoint(model, opt, header.get("rng_state"), header.get("meta", {}))


def _layer_prefixes(model):
    if model.kind == "lm":
        return [f"layers.{k}." for k in range(len(model.layers))]
    return ["lstm."]


def load_checkpoint(path):
    return read_checkpoint(path).model
