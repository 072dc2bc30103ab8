"""Unit timescales, forget-gate biases and the Inverse Gamma timescale law.

A unit whose forget gate sits at f forgets with time constant T = -1/log f.
Drawing T from an Inverse Gamma distribution with shape d and scale 1 makes the
expected exponential retention E[exp(-s/T)] equal to (s + 1)^(-d), i.e. a
power law in the lag s. This module provides both directions of the
bias <-> timescale map, the distribution itself (pdf, cdf, quantile, sampler),
deterministic assignment of per-unit timescales, and numerical evaluation of the
mixture.
"""

from __future__ import annotations

import heapq
import math
import sys
from dataclasses import dataclass, field

import numpy as np

_EPS_F = 1e-12
_TINY = 1e-300


# --------------------------------------------------------------------------
# bias <-> timescale
# --------------------------------------------------------------------------

def _softplus(x):
    # log(1 + e^x) = max(x, 0) + log1p(e^-|x|)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def forgetting_time(b_f):
    """Timescale T = 1 / log(1 + exp(-b_f)) of a unit with forget bias ``b_f``.

    For very large biases the result saturates at the largest finite float
    rather than overflowing to infinity.
    """
    b = np.asarray(b_f, dtype=np.float64)
    if not np.isfinite(b).all():
        raise ValueError("forget bias must be finite")
    with np.errstate(over="ignore", divide="ignore"):
        rate = _softplus(-b)
        # for b > ~745 exp(-b) underflows; log1p(e^-b) ~ e^-b so T ~ e^b
        T = np.where(rate > 0, 1.0 / np.where(rate > 0, rate, 1.0), np.inf)
    T = np.minimum(T, sys.float_info.max)
    return T.item() if T.ndim == 0 else T


def forget_bias(T):
    """Forget bias that realizes timescale ``T``: b_f = -log(exp(1/T) - 1).

    Written as -x - log(-expm1(-x)) with x = 1/T so it neither overflows for
    tiny T nor loses precision for huge T.
    """
    T = np.asarray(T, dtype=np.float64)
    if not (T > 0).all():
        raise ValueError("timescales must be > 0")
    x = 1.0 / T
    b = -x - np.log(-np.expm1(-x))
    return b.item() if b.ndim == 0 else b


def input_bias(T):
    """Input bias paired with a frozen forget bias (b_i = -b_f)."""
    return -np.asarray(forget_bias(T))


@dataclass
class GateTrace:
    """Forget-gate values of one unit over N sequences of K steps."""

    unit: int
    values: np.ndarray  # (N, K)

    def __post_init__(self):
        self.values = np.atleast_2d(np.asarray(self.values, dtype=np.float64))


def estimate_timescale(trace, eps: float = _EPS_F) -> float:
    """T_est = -1 / log(mean forget gate), mean taken over every value in the trace."""
    values = trace.values if isinstance(trace, GateTrace) else np.asarray(trace, dtype=np.float64)
    if values.size == 0:
        raise ValueError("empty gate trace")
    fbar = float(np.clip(values.mean(), eps, 1.0 - eps))
    return -1.0 / math.log(fbar)


def estimate_timescales(f_values, eps: float = _EPS_F) -> np.ndarray:
    """Vectorized :func:`estimate_timescale` for traces shaped (units, ...)."""
    f = np.asarray(f_values, dtype=np.float64)
    if f.size == 0:
        raise ValueError("empty gate trace")
    fbar = np.clip(f.reshape(f.shape[0], -1).mean(axis=1), eps, 1.0 - eps)
    return -1.0 / np.log(fbar)


# --------------------------------------------------------------------------
# regularized incomplete gamma
# --------------------------------------------------------------------------

def _gamma_series(a, z, itmax=2000, tol=1e-16):
    """Lower regularized P(a, z) by the power series; valid for z < a + 1."""
    term = 1.0 / a
    total = term.copy()
    ap = a.copy()
    active = np.ones(a.shape, dtype=bool)
    for _ in range(itmax):
        ap = ap + 1.0
        term = np.where(active, term * z / ap, 0.0)
        total = total + term
        active &= np.abs(term) > np.abs(total) * tol
        if not active.any():
            break
    with np.errstate(under="ignore"):
        log_pref = -z + a * np.log(z) - _lgamma(a)
        return total * np.exp(log_pref)


def _gamma_cf(a, z, itmax=2000, tol=1e-16):
    """Upper regularized Q(a, z) by modified Lentz continued fraction; z >= a + 1."""
    b = z + 1.0 - a
    c = np.full(a.shape, 1.0 / _TINY)
    d = 1.0 / b
    h = d.copy()
    active = np.ones(a.shape, dtype=bool)
    for n in range(1, itmax + 1):
        an = -n * (n - a)
        b = b + 2.0
        d = an * d + b
        d = np.where(np.abs(d) < _TINY, _TINY, d)
        c = b + an / c
        c = np.where(np.abs(c) < _TINY, _TINY, c)
        d = 1.0 / d
        delta = d * c
        h = np.where(active, h * delta, h)
        active &= np.abs(delta - 1.0) > tol
        if not active.any():
            break
    with np.errstate(under="ignore"):
        log_pref = -z + a * np.log(z) - _lgamma(a)
        return np.exp(log_pref) * h


_lgamma = np.vectorize(math.lgamma, otypes=[np.float64])


def gammaincc(a, z):
    """Upper regularized incomplete gamma Q(a, z) = Gamma(a, z) / Gamma(a).

    Series for z < a + 1 (Q = 1 - P), continued fraction otherwise.
    """
    a, z = np.broadcast_arrays(np.asarray(a, dtype=np.float64), np.asarray(z, dtype=np.float64))
    out = np.empty(a.shape)
    flat_a, flat_z, flat_o = a.reshape(-1), z.reshape(-1), out.reshape(-1)
    zero = flat_z <= 0
    flat_o[zero] = 1.0
    ser = (~zero) & (flat_z < flat_a + 1.0)
    cf = (~zero) & ~ser
    if ser.any():
        flat_o[ser] = 1.0 - _gamma_series(flat_a[ser], flat_z[ser])
    if cf.any():
        flat_o[cf] = _gamma_cf(flat_a[cf], flat_z[cf])
    out = np.clip(out, 0.0, 1.0)
    return out.item() if out.ndim == 0 else out


def gammainc(a, z):
    """Lower regularized incomplete gamma P(a, z)."""
    a, z = np.broadcast_arrays(np.asarray(a, dtype=np.float64), np.asarray(z, dtype=np.float64))
    out = np.empty(a.shape)
    flat_a, flat_z, flat_o = a.reshape(-1), z.reshape(-1), out.reshape(-1)
    zero = flat_z <= 0
    flat_o[zero] = 0.0
    ser = (~zero) & (flat_z < flat_a + 1.0)
    cf = (~zero) & ~ser
    if ser.any():
        flat_o[ser] = _gamma_series(flat_a[ser], flat_z[ser])
    if cf.any():
        flat_o[cf] = 1.0 - _gamma_cf(flat_a[cf], flat_z[cf])
    out = np.clip(out, 0.0, 1.0)
    return out.item() if out.ndim == 0 else out


# --------------------------------------------------------------------------
# Inverse Gamma distribution
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class InverseGammaParams:
    alpha: float
    beta: float = 1.0

    def __post_init__(self):
        if not (self.alpha > 0 and math.isfinite(self.alpha)):
            raise ValueError(f"alpha must be > 0, got {self.alpha}")
        if not (self.beta > 0 and math.isfinite(self.beta)):
            raise ValueError(f"beta must be > 0, got {self.beta}")


def _params(params=None, alpha=None, beta=1.0) -> InverseGammaParams:
    if isinstance(params, InverseGammaParams):
        return params
    if params is not None:
        alpha = params
    return InverseGammaParams(float(alpha), float(beta))


def _check_positive(x, what="T"):
    x = np.asarray(x, dtype=np.float64)
    if not (x > 0).all():
        raise ValueError(f"{what} must be > 0")
    return x


def inv_gamma_pdf(T, params=None, *, alpha=None, beta=1.0):
    """P(T; a, b) = b^a / Gamma(a) * T^-(a+1) * exp(-b/T)."""
    p = _params(params, alpha, beta)
    T = _check_positive(T)
    a, b = p.alpha, p.beta
    with np.errstate(under="ignore"):
        logd = a * math.log(b) - math.lgamma(a) - (a + 1.0) * np.log(T) - b / T
        d = np.exp(logd)
    return d.item() if d.ndim == 0 else d


def inv_gamma_cdf(x, params=None, *, alpha=None, beta=1.0):
    """CDF(x) = Q(a, b/x)."""
    p = _params(params, alpha, beta)
    x = _check_positive(x, "x")
    return gammaincc(p.alpha, p.beta / x)


def inv_gamma_quantile(prob, params=None, *, alpha=None, beta=1.0, tol=1e-13, maxiter=200):
    """Solve CDF(x) = prob by safeguarded Newton on y = log x inside a bisection bracket."""
    p = _params(params, alpha, beta)
    probs = np.asarray(prob, dtype=np.float64)
    if not ((probs > 0) & (probs < 1)).all():
        raise ValueError("probability must lie in (0, 1)")
    out = np.array([_quantile_scalar(float(q), p, tol, maxiter) for q in probs.reshape(-1)])
    out = out.reshape(probs.shape)
    return out.item() if out.ndim == 0 else out


def _quantile_scalar(q, p, tol, maxiter):
    cdf = lambda y: gammaincc(p.alpha, p.beta * math.exp(-y)) - q
    # bracket in log-space around the mode-ish point log(b / a)
    y0 = math.log(p.beta / p.alpha)
    lo, hi = y0 - 1.0, y0 + 1.0
    while cdf(lo) > 0:
        lo -= 2.0 * (hi - lo)
    while cdf(hi) < 0:
        hi += 2.0 * (hi - lo)
        if hi > 700:
            hi = 700.0
            break
    y = 0.5 * (lo + hi)
    for _ in range(maxiter):
        r = cdf(y)
        if abs(r) <= tol:
            break
        if r > 0:
            hi = y
        else:
            lo = y
        x = math.exp(y)
        slope = inv_gamma_pdf(x, p) * x  # dCDF/dy
        y_new = y - r / slope if slope > 0 else 0.5 * (lo + hi)
        if not (lo < y_new < hi):
            y_new = 0.5 * (lo + hi)
        if abs(y_new - y) <= 1e-15 * max(1.0, abs(y)):
            y = y_new
            break
        y = y_new
    return math.exp(y)


def sample_gamma(shape: float, n: int, rng) -> np.ndarray:
    """Gamma(shape, 1) draws by Marsaglia-Tsang squeeze/rejection.

    For shape < 1 draw at shape + 1 and multiply by U^(1/shape).
    """
    if shape <= 0:
        raise ValueError("shape must be > 0")
    rng = np.random.default_rng(rng)
    boost = shape < 1.0
    a = shape + 1.0 if boost else shape
    d = a - 1.0 / 3.0
    c = 1.0 / math.sqrt(9.0 * d)
    out = np.empty(n)
    filled = 0
    while filled < n:
        m = max(16, int((n - filled) * 1.1))
        x = rng.standard_normal(m)
        u = rng.random(m)
        v = (1.0 + c * x) ** 3
        ok = v > 0
        with np.errstate(invalid="ignore", divide="ignore"):
            logv = np.log(np.where(ok, v, 1.0))
            accept = ok & ((u < 1.0 - 0.0331 * x ** 4) | (np.log(u) < 0.5 * x * x + d * (1.0 - v + logv)))
        draws = (d * v)[accept]
        take = min(draws.size, n - filled)
        out[filled:filled + take] = draws[:take]
        filled += take
    if boost:
        out *= rng.random(n) ** (1.0 / shape)
    return out


def sample_inv_gamma(params, n: int, seed=None) -> np.ndarray:
    """``n`` Inverse Gamma draws: beta / Gamma(alpha, 1)."""
    p = _params(params)
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    return p.beta / sample_gamma(p.alpha, n, rng)


# --------------------------------------------------------------------------
# per-unit timescale assignment
# --------------------------------------------------------------------------

@dataclass
class TimescaleSpec:
    """Per-unit target timescales and the frozen biases that realize them."""

    timescales: np.ndarray
    source: dict = field(default_factory=dict)
    b_f: np.ndarray = field(init=False)
    b_i: np.ndarray = field(init=False)

    def __post_init__(self):
        self.timescales = np.asarray(self.timescales, dtype=np.float64)
        if self.timescales.ndim != 1 or self.timescales.size == 0:
            raise ValueError("timescales must be a non-empty 1-d array")
        if not (self.timescales > 0).all():
            raise ValueError("timescales must be > 0")
        self.b_f = np.asarray(forget_bias(self.timescales), dtype=np.float64).reshape(-1)
        self.b_i = -self.b_f

    def __len__(self):
        return self.timescales.size

    def to_json(self) -> dict:
        return {"source": self.source, "timescales": self.timescales.tolist()}

    @classmethod
    def from_json(cls, doc: dict) -> "TimescaleSpec":
        return cls(np.asarray(doc["timescales"], dtype=np.float64), dict(doc.get("source", {})))


def assign_timescales(n_units: int, source, seed=None) -> TimescaleSpec:
    """Build a :class:`TimescaleSpec` for ``n_units`` units.

    ``source`` is either a list of timescales or a dict:

    * ``{"kind": "fixed", "values": [...]}`` - copied when the list has one
      entry per unit, otherwise split into equal contiguous blocks
      (``[3, 4]`` over 1150 units gives 575 threes then 575 fours).
    * ``{"kind": "inverse-gamma", "alpha": a, "beta": 1, "mode": "quantile"}``
      - T_i = quantile((i + 0.5) / n), ascending. ``mode="sample"`` draws
      seeded random values instead.
    """
    if n_units < 1:
        raise ValueError("n_units must be >= 1")
    if isinstance(source, (list, tuple, np.ndarray)):
        source = {"kind": "fixed", "values": list(map(float, source))}
    kind = source.get("kind")
    if kind == "fixed":
        values = np.asarray(source.get("values", []), dtype=np.float64)
        if values.size == 0:
            raise ValueError("empty fixed timescale list")
        if values.size == n_units:
            T = values.copy()
        elif values.size < n_units:
            T = np.concatenate([np.full(len(blk), v) for v, blk in zip(values, np.array_split(np.arange(n_units), values.size))])
        else:
            raise ValueError(f"{values.size} timescales for {n_units} units")
        doc = {"kind": "fixed", "values": values.tolist()}
    elif kind == "inverse-gamma":
        p = InverseGammaParams(float(source["alpha"]), float(source.get("beta", 1.0)))
        mode = source.get("mode", "quantile")
        if mode == "quantile":
            probs = (np.arange(n_units) + 0.5) / n_units
            T = np.atleast_1d(inv_gamma_quantile(probs, p))
        elif mode == "sample":
            T = sample_inv_gamma(p, n_units, seed)
        else:
            raise ValueError(f"unknown assignment mode {mode!r}")
        doc = {"kind": "inverse-gamma", "alpha": p.alpha, "beta": p.beta, "mode": mode}
        if mode == "sample":
            doc["seed"] = seed
    else:
        raise ValueError(f"unknown timescale source {source!r}")
    return TimescaleSpec(T, doc)


# --------------------------------------------------------------------------
# quadrature and the exponential mixture
# --------------------------------------------------------------------------

_XGK = np.array([
    0.991455371120812639206854697526329, 0.949107912342758524526189684047851,
    0.864864423359769072789712788640926, 0.741531185599394439863864773280788,
    0.586087235467691130294144845693013, 0.405845151377397166906606412076961,
    0.207784955007898467600689403773245, 0.0,
])
_WGK = np.array([
    0.022935322010529224963732008058970, 0.063092092629978553290700663189204,
    0.104790010322250183839876322541518, 0.140653259715525918745189590510238,
    0.169004726639267902826583426598550, 0.190350578064785409913256402421014,
    0.204432940075298892414161999234649, 0.209482141084727828012999174891714,
])
_WG = np.array([
    0.129484966168869693270611432679082, 0.279705391489276667901467771423780,
    0.381830050505118944950369775488975, 0.417959183673469387755102040816327,
])
_NODES = np.concatenate([-_XGK[:-1], _XGK[::-1]])
_WK15 = np.concatenate([_WGK[:-1], _WGK[::-1]])
_WG7 = np.zeros(15)
_WG7[[1, 3, 5, 7, 9, 11, 13]] = np.concatenate([_WG[:-1], _WG[::-1]])


def _gk15(f, a, b):
    half = 0.5 * (b - a)
    mid = 0.5 * (a + b)
    fx = f(mid + half * _NODES)
    k = half * float(_WK15 @ fx)
    g = half * float(_WG7 @ fx)
    return k, abs(k - g)


def quad(f, a: float, b: float, epsabs: float = 1e-13, epsrel: float = 1e-12, limit: int = 2000):
    """Globally adaptive Gauss-Kronrod (7/15) integration of a vectorized ``f``.

    Infinite limits are handled by t/(1-t) (half line) or t/(1-t^2) (whole line)
    substitutions. Returns (value, error_estimate).
    """
    if math.isinf(a) or math.isinf(b):
        if a == -math.inf and b == math.inf:
            g = lambda t: f(t / (1 - t * t)) * (1 + t * t) / (1 - t * t) ** 2
            return quad(g, -1.0, 1.0, epsabs, epsrel, limit)
        if b == math.inf:
            g = lambda t: f(a + t / (1 - t)) / (1 - t) ** 2
            return quad(g, 0.0, 1.0, epsabs, epsrel, limit)
        g = lambda t: f(b - (1 - t) / t) / t ** 2
        return quad(g, 0.0, 1.0, epsabs, epsrel, limit)
    v, e = _gk15(f, a, b)
    heap = [(-e, a, b, v)]
    total, err = v, e
    for _ in range(limit):
        if err <= max(epsabs, epsrel * abs(total)):
            break
        neg_e, lo, hi, val = heapq.heappop(heap)
        mid = 0.5 * (lo + hi)
        v1, e1 = _gk15(f, lo, mid)
        v2, e2 = _gk15(f, mid, hi)
        total += v1 + v2 - val
        err += e1 + e2 + neg_e
        heapq.heappush(heap, (-e1, lo, mid, v1))
        heapq.heappush(heap, (-e2, mid, hi, v2))
    # re-sum to shed accumulated rounding from the running updates
    total = math.fsum(item[3] for item in heap)
    err = sum(-item[0] for item in heap)
    return total, err


def mixture_decay(s: float, d: float, method: str = "quadrature", n: int = 1_000_000, seed=None) -> float:
    """Expected retention E[exp(-s/T)] for T ~ InverseGamma(d, 1).

    The quadrature route integrates over the rate u = 1/T ~ Gamma(d, 1); with
    w = u^d the integrand exp(-(1 + s) w^(1/d)) / Gamma(d + 1) is bounded on
    [0, inf). ``method="monte-carlo"`` averages over ``n`` seeded draws.
    """
    if not (d > 0 and math.isfinite(d)):
        raise ValueError("exponent d must be > 0")
    if s < 0:
        raise ValueError("lag s must be >= 0")
    if method == "quadrature":
        inv_d = 1.0 / d
        k = 1.0 + s

        def integrand(w):
            with np.errstate(under="ignore", over="ignore"):
                return np.exp(-k * np.power(w, inv_d))

        val, _ = quad(integrand, 0.0, math.inf, epsabs=1e-15, epsrel=1e-12)
        return val / math.gamma(d + 1.0)
    if method in ("monte-carlo", "mc"):
        T = sample_inv_gamma(InverseGammaParams(d, 1.0), n, seed)
        return float(np.mean(np.exp(-s / T)))
    raise ValueError(f"unknown method {method!r}")
