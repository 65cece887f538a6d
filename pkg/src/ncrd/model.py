"""The event model: embeddings, GRU backbone, per-modality heads.

Forward passes only; gradients live in the training module. Every
function takes a flat name->array mapping so it runs identically on
autodiff Tensors (training) and raw ndarrays (the low-latency path).

Conditioning on already-known sub-events of the same event is done by
summing their embeddings onto the projected hidden state before the
per-modality head MLP.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict, field

import numpy as np

from . import autodiff as ad
from .distributions import (CategoricalParams, DMoLParams,
                            LOG_SCALE_MIN, LOG_SCALE_MAX)
from .events import N_INSTRUMENTS, N_PITCHES

MODALITIES = ("instrument", "pitch", "time", "velocity")


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 256
    hidden_dim: int = 512
    gru_layers: int = 1
    mlp_hidden: int = 256
    mlp_layers: int = 2
    mixture_k: int = 16
    dropout_p: float = 0.1
    n_sinusoids: int = 64
    # wavelengths (seconds) are log-spaced; frequencies (1/velocity-unit) linear
    time_wavelengths: tuple = (0.01, 100.0)
    velocity_frequency_range: tuple = (1.0 / 256.0, 0.5)
    time_domain: tuple = (0.0, 10.0)
    time_resolution: float = 0.010
    velocity_domain: tuple = (0.0, 127.0)
    velocity_resolution: float = 1.0

    def __post_init__(self):
        for name in ("embed_dim", "hidden_dim", "gru_layers", "mlp_hidden",
                     "mlp_layers", "mixture_k", "n_sinusoids"):
            if getattr(self, name) < (0 if name == "mlp_layers" else 1):
                raise ValueError(f"{name} must be positive")
        if not 0 <= self.dropout_p < 1:
            raise ValueError("dropout_p must be in [0, 1)")

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        d = json.loads(text)
        for k in ("time_wavelengths", "velocity_frequency_range",
                  "time_domain", "velocity_domain"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)

    def head_dim(self, modality: str) -> int:
        return {"instrument": N_INSTRUMENTS, "pitch": N_PITCHES,
                "time": 3 * self.mixture_k,
                "velocity": 3 * self.mixture_k}[modality]

    def domain(self, modality: str) -> tuple[float, float]:
        return {"time": self.time_domain, "velocity": self.velocity_domain}[modality]

    def resolution(self, modality: str) -> float:
        return {"time": self.time_resolution, "velocity": self.velocity_resolution}[modality]


def _frequencies(cfg: ModelConfig, modality: str) -> np.ndarray:
    if modality == "time":
        lo, hi = cfg.time_wavelengths
        wl = np.exp(np.linspace(math.log(lo), math.log(hi), cfg.n_sinusoids))
        return 1.0 / wl
    lo, hi = cfg.velocity_frequency_range
    return np.linspace(lo, hi, cfg.n_sinusoids)


def _mlp_names(prefix: str, layers: int):
    for j in range(layers):
        yield from (f"{prefix}.l{j}.ln_g", f"{prefix}.l{j}.ln_b",
                    f"{prefix}.l{j}.w", f"{prefix}.l{j}.b")
    yield from (f"{prefix}.out.w", f"{prefix}.out.b")


class ModelParameters:
    """All learnable weights plus fixed sinusoid frequency buffers."""

    def __init__(self, config: ModelConfig, tensors: dict[str, ad.Tensor]):
        self.config = config
        self.tensors = tensors
        self.buffers = {f"freq.{m}": _frequencies(config, m)
                        for m in ("time", "velocity")}
        self._raw = None

    @classmethod
    def init(cls, config: ModelConfig, rng: np.random.Generator) -> "ModelParameters":
        cfg = config
        E, H, S, K = cfg.embed_dim, cfg.hidden_dim, cfg.n_sinusoids, cfg.mixture_k
        t: dict[str, np.ndarray] = {}
        t["emb.instrument"] = rng.normal(0, E ** -0.5, (N_INSTRUMENTS, E))
        t["emb.pitch"] = rng.normal(0, E ** -0.5, (N_PITCHES, E))
        for m in ("time", "velocity"):
            t[f"emb.{m}.w"] = rng.normal(0, S ** -0.5, (S, E))
            t[f"emb.{m}.b"] = np.zeros(E)
        for layer in range(cfg.gru_layers):
            k = H ** -0.5
            d_in = E if layer == 0 else H
            t[f"gru.l{layer}.w_ih"] = rng.uniform(-k, k, (d_in, 3 * H))
            t[f"gru.l{layer}.w_hh"] = rng.uniform(-k, k, (H, 3 * H))
            t[f"gru.l{layer}.b_ih"] = rng.uniform(-k, k, 3 * H)
            t[f"gru.l{layer}.b_hh"] = rng.uniform(-k, k, 3 * H)
        t["initial_state"] = rng.normal(0, H ** -0.5, (cfg.gru_layers, H))

        def mlp(prefix, d_in, d_out, out_scale=1.0):
            d = d_in
            for j in range(cfg.mlp_layers):
                t[f"{prefix}.l{j}.ln_g"] = np.ones(d)
                t[f"{prefix}.l{j}.ln_b"] = np.zeros(d)
                k = d ** -0.5
                t[f"{prefix}.l{j}.w"] = rng.uniform(-k, k, (d, 2 * cfg.mlp_hidden))
                t[f"{prefix}.l{j}.b"] = rng.uniform(-k, k, 2 * cfg.mlp_hidden)
                d = cfg.mlp_hidden
            k = d ** -0.5
            t[f"{prefix}.out.w"] = rng.uniform(-k, k, (d, d_out)) * out_scale
            t[f"{prefix}.out.b"] = np.zeros(d_out)

        mlp("fh", H, E)
        mlp("head.instrument", E, N_INSTRUMENTS, out_scale=1e-2)
        mlp("head.pitch", E, N_PITCHES, out_scale=1e-2)
        for m in ("time", "velocity"):
            mlp(f"head.{m}", E, 3 * K, out_scale=1e-2)
            lo, hi = cfg.domain(m)
            b = t[f"head.{m}.out.b"]
            b[K:2 * K] = lo + (np.arange(K) + 0.5) * (hi - lo) / K  # spread locations
            b[2 * K:] = math.log((hi - lo) / (2 * K))               # cover the domain
        t["eos.w"] = rng.normal(0, H ** -0.5, (H, 1)) * 1e-2
        t["eos.b"] = np.zeros(1)
        return cls(cfg, {k: ad.Tensor(v, name=k) for k, v in t.items()})

    def view(self, train: bool):
        """name->array mapping for the forward functions."""
        if train:
            return {**self.tensors, **self.buffers}
        if self._raw is None:
            self._raw = {k: v.data for k, v in self.tensors.items()} | self.buffers
        return self._raw

    def invalidate(self):
        self._raw = None

    def names(self):
        return list(self.tensors)


# -- forward ops -------------------------------------------------------------


def embed_categorical(table, ids):
    """Row lookup; ids are zero-based."""
    if np.ndim(ids) == 0:
        return table[int(ids)]
    return ad.take_rows(table, np.asarray(ids))


def sinusoid_features(x, freqs: np.ndarray) -> np.ndarray:
    """sin(2π f x) feature vector; x is data, never differentiated."""
    xv = np.asarray(ad.val(x), dtype=np.float64)
    return np.sin(2.0 * math.pi * xv[..., None] * freqs)


def embed_continuous(p, modality: str, x):
    """Sinusoid features followed by a learned linear projection."""
    feats = sinusoid_features(x, p[f"freq.{modality}"])
    w, b = p[f"emb.{modality}.w"], p[f"emb.{modality}.b"]
    if feats.ndim == 1:
        return (feats[None, :] @ w + b)[0]
    return feats @ w + b


def event_embedding(p, inst_idx, pitch, dt, vel):
    """Sum of the four sub-event embeddings (fixed summation order)."""
    return (embed_categorical(p["emb.instrument"], inst_idx)
            + embed_categorical(p["emb.pitch"], pitch)
            + embed_continuous(p, "time", dt)
            + embed_continuous(p, "velocity", vel))


def gru_cell(x, h, w_ih, w_hh, b_ih, b_hh, hidden: int):
    """Standard GRU recurrence: h' = (1-z)·n + z·h."""
    gx = x @ w_ih + b_ih
    gh = h @ w_hh + b_hh
    H = hidden
    r = ad.sigmoid(gx[..., :H] + gh[..., :H])
    z = ad.sigmoid(gx[..., H:2 * H] + gh[..., H:2 * H])
    n = ad.tanh(gx[..., 2 * H:] + r * gh[..., 2 * H:])
    return (1.0 - z) * n + z * h


def gru_step(p, cfg: ModelConfig, state: list, x):
    """Advance every GRU layer one step.

    state is a list of per-layer arrays shaped (batch, hidden); x is the
    (batch, embed) input. Returns (new_state, top_layer_output).
    """
    new_state = []
    inp = x
    for layer in range(cfg.gru_layers):
        h = gru_cell(inp, state[layer],
                     p[f"gru.l{layer}.w_ih"], p[f"gru.l{layer}.w_hh"],
                     p[f"gru.l{layer}.b_ih"], p[f"gru.l{layer}.b_hh"],
                     cfg.hidden_dim)
        new_state.append(h)
        inp = h
    return new_state, new_state[-1]


def initial_state(p, cfg: ModelConfig, batch: int):
    """Learned initial state broadcast to the batch."""
    init = p["initial_state"]
    return [init[layer:layer + 1] * np.ones((batch, 1))
            for layer in range(cfg.gru_layers)]


def layer_norm(x, g, b, eps: float = 1e-5):
    mu = ad.mean(x, axis=-1, keepdims=True)
    d = x - mu
    var = ad.mean(d * d, axis=-1, keepdims=True)
    return d * ((var + eps) ** -0.5) * g + b


def glu(x):
    half = np.shape(ad.val(x))[-1] // 2
    return x[..., :half] * ad.sigmoid(x[..., half:])


def mlp_forward(p, prefix: str, x, cfg: ModelConfig,
                train_mode: bool = False, rng=None):
    """Stack of [layer norm -> affine to 2x width -> GLU -> dropout] + linear."""
    out = x
    for j in range(cfg.mlp_layers):
        out = layer_norm(out, p[f"{prefix}.l{j}.ln_g"], p[f"{prefix}.l{j}.ln_b"])
        out = glu(out @ p[f"{prefix}.l{j}.w"] + p[f"{prefix}.l{j}.b"])
        if train_mode and cfg.dropout_p > 0:
            keep = rng.random(np.shape(ad.val(out))) >= cfg.dropout_p
            out = out * (keep / (1.0 - cfg.dropout_p))
    return out @ p[f"{prefix}.out.w"] + p[f"{prefix}.out.b"]


def hidden_projection(p, cfg: ModelConfig, h, train_mode=False, rng=None):
    """f_h: hidden state -> embedding space, shared by all heads."""
    return mlp_forward(p, "fh", h, cfg, train_mode, rng)


def condition(fh_out, cond: dict):
    """Add conditioning embeddings (fixed modality order) onto f_h(h)."""
    z = fh_out
    for m in MODALITIES:
        if m in cond:
            z = z + cond[m]
    return z


def head_forward(p, cfg: ModelConfig, modality: str, z,
                 train_mode=False, rng=None):
    """Per-modality MLP from conditioned state to distribution parameters."""
    raw = mlp_forward(p, f"head.{modality}", z, cfg, train_mode, rng)
    if modality in ("instrument", "pitch"):
        return CategoricalParams(logits=raw)
    K = cfg.mixture_k
    lo, hi = cfg.domain(modality)
    return DMoLParams(
        weight_logits=raw[..., :K],
        locations=raw[..., K:2 * K],
        log_scales=ad.clip(raw[..., 2 * K:], LOG_SCALE_MIN, LOG_SCALE_MAX),
        r=cfg.resolution(modality), lo=lo, hi=hi)


def predict_head(p, cfg: ModelConfig, h, modality: str, cond: dict,
                 train_mode=False, rng=None):
    """Distribution parameters for one sub-event given h and conditioning.

    cond maps modality name -> embedding vector; it must not contain the
    target modality.
    """
    if modality in cond:
        raise ValueError(f"{modality} cannot condition on itself")
    fh = hidden_projection(p, cfg, h, train_mode, rng)
    return head_forward(p, cfg, modality, condition(fh, cond), train_mode, rng)


def eos_logit(p, h):
    """Scalar end-of-stream logit from the top hidden state."""
    return (h @ p["eos.w"])[..., 0] + p["eos.b"][0]
