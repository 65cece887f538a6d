"""Sub-event distributions.

Categorical-with-logits for instrument and pitch, and a discretized
mixture of logistics (DMoL) for the continuous modalities. Bin
probabilities are CDF differences at resolution r; the lowest and highest
bins absorb the open tails beyond the domain. Log-probability functions
are written against the autodiff op set so they serve both training and
scoring; samplers are plain numpy and take an explicit rng.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

LOG_SCALE_MIN = math.log(1e-4)
# numerical guard only: mixtures flatter than this are indistinguishable
# from uniform over any musical domain
LOG_SCALE_MAX = math.log(1e6)


class EmptySupportError(ValueError):
    """Raised when masking/truncation removes all probability mass."""


@dataclass
class CategoricalParams:
    """Unnormalized log-probabilities, one per class."""

    logits: object  # ndarray or autodiff Tensor, shape (..., n_classes)

    @property
    def n_classes(self) -> int:
        return np.shape(ad.val(self.logits))[-1]


@dataclass
class DMoLParams:
    """K-component discretized mixture of logistics on [lo, hi] at resolution r."""

    weight_logits: object  # (..., K)
    locations: object      # (..., K)
    log_scales: object     # (..., K), clamped to [LOG_SCALE_MIN, LOG_SCALE_MAX]
    r: float
    lo: float
    hi: float

    def __post_init__(self):
        if self.r <= 0:
            raise ValueError("resolution r must be positive")
        if not self.lo < self.hi:
            raise ValueError("domain requires lo < hi")


@dataclass
class SamplingControls:
    """Knobs applied to a distribution before sampling.

    weight_temperature scales mixture-weight logits (which rhythmic
    interval), scale_temperature scales the chosen component's scale
    (fine timing). A temperature of 0 means the greedy limit.
    """

    weight_temperature: float = 1.0
    scale_temperature: float = 1.0
    truncation: tuple[float, float] | None = None
    whitelist: frozenset[int] | None = None
    blacklist: frozenset[int] = field(default_factory=frozenset)
    class_temperature: float = 1.0

    def __post_init__(self):
        if self.weight_temperature < 0 or self.scale_temperature < 0:
            raise ValueError("temperatures must be >= 0")
        if self.class_temperature < 0:
            raise ValueError("class_temperature must be >= 0")
        if self.truncation is not None:
            lo, hi = self.truncation
            if lo > hi:
                raise ValueError(f"truncation [{lo}, {hi}] has min > max")
        if self.whitelist is not None and len(self.whitelist) == 0:
            raise ValueError("whitelist present but empty")


NEUTRAL = SamplingControls()


# -- categorical -------------------------------------------------------------


def categorical_log_probs(params: CategoricalParams):
    """Full log-softmax vector."""
    z = params.logits
    return z - ad.logsumexp(z, axis=-1, keepdims=True)


def categorical_log_prob(params: CategoricalParams, index):
    """log softmax(logits)[index]; index may be an int or an int array."""
    lp = categorical_log_probs(params)
    n = params.n_classes
    if np.ndim(index) == 0:
        i = int(index)
        if not 0 <= i < n:
            raise IndexError(f"class {i} out of range [0, {n})")
        return lp[..., i]
    idx = np.asarray(index)
    if idx.min() < 0 or idx.max() >= n:
        raise IndexError("class index out of range")
    return ad.take_along(lp, idx)


def _masked_logits(logits: np.ndarray, controls: SamplingControls) -> np.ndarray:
    masked = np.array(logits, dtype=np.float64, copy=True)
    n = masked.shape[-1]
    if controls.whitelist is not None:
        keep = np.zeros(n, dtype=bool)
        keep[[i for i in controls.whitelist if 0 <= i < n]] = True
        masked[..., ~keep] = -np.inf
    if controls.blacklist:
        drop = [i for i in controls.blacklist if 0 <= i < n]
        masked[..., drop] = -np.inf
    return masked


def categorical_sample(params: CategoricalParams, controls: SamplingControls,
                       rng: np.random.Generator) -> int:
    """Sample a class after masking and temperature; 0 temperature is argmax."""
    logits = np.asarray(ad.val(params.logits), dtype=np.float64)
    masked = _masked_logits(logits, controls)
    if not np.any(np.isfinite(masked)):
        raise EmptySupportError("all classes masked out")
    if controls.class_temperature == 0:
        return int(np.argmax(masked))
    z = masked / controls.class_temperature
    g = rng.gumbel(size=z.shape)
    z = np.where(np.isfinite(z), z + g, -np.inf)
    return int(np.argmax(z))


# -- discretized mixture of logistics ----------------------------------------


def _log_cdf_diff(za, zb):
    """log(σ(zb) - σ(za)) for za < zb, stable in both tails.

    Works on the side where σ is small: when the interval sits in the
    right tail, flip via σ(z) = 1 - σ(-z) first.
    """
    flip = ad.val(za) + ad.val(zb) > 0
    a = ad.where(flip, -zb, za)
    b = ad.where(flip, -za, zb)
    la = ad.log_sigmoid(a)
    lb = ad.log_sigmoid(b)
    # d < 0 always; keep it away from -0.0 so log1mexp stays finite
    d = ad.clip(la - lb, hi=-1e-14)
    return lb + ad.log1mexp(d)


def dmol_bin_log_prob(params: DMoLParams, x):
    """Log-probability of the resolution-r bin containing x.

    x may be a scalar or an array broadcastable against the leading shape
    of the parameters. Values within r/2 of a domain edge get the full
    open tail on that side.
    """
    xv = np.asarray(ad.val(x), dtype=np.float64)
    if np.any(xv < params.lo) or np.any(xv > params.hi):
        raise ValueError(f"value outside domain [{params.lo}, {params.hi}]")
    r2 = params.r / 2.0
    xe = xv[..., None] if np.ndim(xv) else xv
    s_inv = ad.exp(-ad.clip(params.log_scales, LOG_SCALE_MIN, LOG_SCALE_MAX))
    za = (xe - r2 - params.locations) * s_inv
    zb = (xe + r2 - params.locations) * s_inv

    shape = np.shape(ad.val(zb))
    low = np.broadcast_to(xe - r2 < params.lo, shape)    # open tail below
    high = np.broadcast_to(xe + r2 > params.hi, shape)   # open tail above
    per_comp = ad.where(
        low, ad.log_sigmoid(zb),
        ad.where(high, ad.log_sigmoid(-za), _log_cdf_diff(za, zb)))

    logw = params.weight_logits - ad.logsumexp(params.weight_logits, axis=-1, keepdims=True)
    return ad.logsumexp(logw + per_comp, axis=-1)


def dmol_cdf(params: DMoLParams, x):
    """Mixture CDF Σ_k π_k σ((x - μ_k)/s_k) evaluated with plain numpy."""
    scalar = np.ndim(ad.val(x)) == 0
    xv = np.asarray(ad.val(x), dtype=np.float64)[..., None]
    w = np.asarray(ad.val(params.weight_logits), dtype=np.float64)
    pi = np.exp(w - _np_logsumexp(w, keepdims=True))
    loc = np.asarray(ad.val(params.locations), dtype=np.float64)
    s = np.exp(np.clip(np.asarray(ad.val(params.log_scales), dtype=np.float64),
                       LOG_SCALE_MIN, LOG_SCALE_MAX))
    out = np.sum(pi * ad._sigmoid_np((xv - loc) / s), axis=-1)
    return float(out) if scalar else out


def _np_logsumexp(z, axis=-1, keepdims=False):
    m = np.max(z, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = m + np.log(np.sum(np.exp(z - m), axis=axis, keepdims=True))
    return out if keepdims else np.squeeze(out, axis=axis)


def _np_log_sigmoid(z):
    return -np.logaddexp(0.0, -z)


def _np_log_cdf_diff(za, zb):
    flip = za + zb > 0
    a = np.where(flip, -zb, za)
    b = np.where(flip, -za, zb)
    la, lb = _np_log_sigmoid(a), _np_log_sigmoid(b)
    d = np.minimum(la - lb, -1e-14)
    return lb + np.where(d > -0.6931471805599453,
                         np.log(-np.expm1(d)), np.log1p(-np.exp(d)))


def _interval_log_mass(loc, s, lo_open, hi_open, a, b):
    """Per-component log mass of u in (F(a) or 0, F(b) or 1)."""
    za = (a - loc) / s
    zb = (b - loc) / s
    if lo_open and hi_open:
        return np.zeros_like(loc)
    if lo_open:
        return _np_log_sigmoid(zb)
    if hi_open:
        return _np_log_sigmoid(-za)
    return _np_log_cdf_diff(za, zb)


def dmol_sample(params: DMoLParams, controls: SamplingControls,
                rng: np.random.Generator) -> float:
    """Draw a continuous value from the (optionally truncated, tempered) mixture.

    Component choice uses weight-tempered logits reweighted by each
    component's mass inside the truncation interval; the draw itself is a
    truncated inverse-CDF of the chosen logistic with the scale
    temperature applied. Samples outside the domain fold onto its edges,
    matching the open-tail bins. The result always lies in
    truncation ∩ domain.
    """
    w = np.asarray(ad.val(params.weight_logits), dtype=np.float64).reshape(-1)
    loc = np.asarray(ad.val(params.locations), dtype=np.float64).reshape(-1)
    s = np.exp(np.clip(np.asarray(ad.val(params.log_scales), dtype=np.float64),
                       LOG_SCALE_MIN, LOG_SCALE_MAX)).reshape(-1)

    a, b = controls.truncation if controls.truncation is not None else (-np.inf, np.inf)
    ae, be = max(a, params.lo), min(b, params.hi)
    if ae > be:
        raise EmptySupportError(
            f"truncation [{a}, {b}] does not intersect domain [{params.lo}, {params.hi}]")
    if ae == be:
        return float(ae)

    lo_open = a <= params.lo   # everything below folds to the domain edge
    hi_open = b >= params.hi

    log_mass = _interval_log_mass(loc, s, lo_open, hi_open, a, b)
    if controls.weight_temperature == 0:
        k = int(np.argmax(w + log_mass))
    else:
        sel = w / controls.weight_temperature + log_mass
        k = int(np.argmax(sel + rng.gumbel(size=sel.shape)))

    mu, sk = loc[k], s[k] * controls.scale_temperature
    if sk == 0:
        return float(np.clip(mu, ae, be))

    # u = (1-t)·F(a) + t·F(b), with both u and 1-u kept in log space
    za = (a - mu) / sk
    zb = (b - mu) / sk
    t = rng.uniform()
    log_t = np.log(t) if t > 0 else -np.inf
    log_1t = np.log1p(-t)
    lfa = -np.inf if lo_open else _np_log_sigmoid(za)   # log F(a)
    lfb = 0.0 if hi_open else _np_log_sigmoid(zb)       # log F(b)
    lsa = 0.0 if lo_open else _np_log_sigmoid(-za)      # log (1 - F(a))
    lsb = -np.inf if hi_open else _np_log_sigmoid(-zb)  # log (1 - F(b))
    log_u = np.logaddexp(lfa + log_1t, lfb + log_t)
    log_1mu = np.logaddexp(lsa + log_1t, lsb + log_t)
    x = mu + sk * (log_u - log_1mu)
    return float(np.clip(x, ae, be))
