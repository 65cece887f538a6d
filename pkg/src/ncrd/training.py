"""Training: conditioning masks, windowed NLL, AdamW, the train loop,
and evaluation tables (conditioning subsets, factorization orders)."""

from __future__ import annotations

import csv
import itertools
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .checkpoint import OptimizerState, save_checkpoint
from .distributions import dmol_bin_log_prob, categorical_log_prob
from .events import EventStream, MAX_TIME_DELTA
from .model import (MODALITIES, ModelConfig, ModelParameters,
                    embed_continuous, eos_logit, gru_step, head_forward,
                    hidden_projection, initial_state)

log = logging.getLogger(__name__)


class GradientError(RuntimeError):
    """Raised when a backward pass produces non-finite gradients."""


@dataclass
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    batch_size: int = 32
    window_length: int = 32
    window_growth: int = 1      # window grows by this much each epoch
    epochs: int = 10
    steps_per_epoch: int = 100
    val_fraction: float = 0.05
    eos_weight: float = 1.0
    seed: int = 0


@dataclass
class TokenSeq:
    """One event stream flattened to parallel arrays."""
    inst: np.ndarray      # int64, instrument ids (1-based)
    pitch: np.ndarray     # int64, 0..127
    dt: np.ndarray        # float64, seconds
    vel: np.ndarray       # float64, 0..127
    terminated: bool = False

    def __len__(self):
        return len(self.inst)


def tokens_from_stream(stream: EventStream) -> TokenSeq:
    ev = stream.events
    return TokenSeq(
        inst=np.array([e.instrument for e in ev], dtype=np.int64),
        pitch=np.array([e.pitch for e in ev], dtype=np.int64),
        dt=np.array([e.time_delta for e in ev], dtype=np.float64),
        vel=np.array([e.velocity for e in ev], dtype=np.float64),
        terminated=stream.terminated)


def sample_masks(rng: np.random.Generator, batch: int, steps: int) -> np.ndarray:
    """Random conditioning matrices, one per batch item per step.

    m[b, t, i, j] == 1 means the prediction of modality i at step t sees
    sub-event j of the same event. The diagonal is always zero.
    """
    m = (rng.random((batch, steps, 4, 4)) < 0.5).astype(np.float64)
    idx = np.arange(4)
    m[..., idx, idx] = 0.0
    return m


def full_mask(batch: int, steps: int, rows: dict | None = None) -> np.ndarray:
    """Constant mask; rows maps target index -> iterable of source indices."""
    m = np.zeros((batch, steps, 4, 4))
    for i, srcs in (rows or {}).items():
        for j in srcs:
            if i == j:
                raise ValueError("diagonal conditioning is not allowed")
            m[..., i, j] = 1.0
    return m


def make_batch(seqs: list[TokenSeq], length: int, batch: int,
               rng: np.random.Generator) -> dict:
    """Sample windows uniformly over valid start offsets across the corpus."""
    weights = np.array([max(1, len(s) - length + 1) for s in seqs], dtype=np.float64)
    cum = np.cumsum(weights)
    out = {k: np.zeros((batch, length), dtype=np.float64)
           for k in ("dt", "vel", "valid", "eos")}
    out["inst"] = np.zeros((batch, length), dtype=np.int64)
    out["pitch"] = np.zeros((batch, length), dtype=np.int64)
    out["inst"][:] = 1  # pad id; masked out by valid
    for b in range(batch):
        s = seqs[int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))]
        n = len(s)
        start = int(rng.integers(0, max(1, n - length + 1)))
        take = min(length, n - start)
        sl = slice(start, start + take)
        out["inst"][b, :take] = s.inst[sl]
        out["pitch"][b, :take] = s.pitch[sl]
        out["dt"][b, :take] = np.clip(s.dt[sl], 0.0, MAX_TIME_DELTA)
        out["vel"][b, :take] = s.vel[sl]
        out["valid"][b, :take] = 1.0
        if s.terminated and start + take == n:
            out["eos"][b, take - 1] = 1.0
    return out


def batch_from_seq(seq: TokenSeq) -> dict:
    """The whole sequence as a single window (for evaluation)."""
    n = len(seq)
    return {
        "inst": seq.inst[None, :].copy(),
        "pitch": seq.pitch[None, :].copy(),
        "dt": np.clip(seq.dt, 0.0, MAX_TIME_DELTA)[None, :],
        "vel": seq.vel[None, :].copy(),
        "valid": np.ones((1, n)),
        "eos": (np.arange(n) == n - 1).astype(np.float64)[None, :]
               if seq.terminated else np.zeros((1, n)),
    }


def window_nll(p, cfg: ModelConfig, batch: dict, masks: np.ndarray,
               train_mode: bool = False, rng: np.random.Generator | None = None,
               eos_weight: float = 1.0):
    """Mean per-event loss over a batch of windows.

    Returns (loss, logs) where loss is a scalar (Tensor when p holds
    Tensors) and logs holds per-modality float NLL means.
    """
    B, T = batch["valid"].shape
    inst_idx = np.maximum(batch["inst"] - 1, 0)  # ids are 1-based
    state = initial_state(p, cfg, B)
    n_valid = float(batch["valid"].sum())
    if n_valid == 0:
        raise ValueError("batch has no valid events")

    sums = {m: 0.0 for m in MODALITIES}
    eos_sum = 0.0
    for t in range(T):
        emb = {
            "instrument": ad.take_rows(p["emb.instrument"], inst_idx[:, t]),
            "pitch": ad.take_rows(p["emb.pitch"], batch["pitch"][:, t]),
            "time": embed_continuous(p, "time", batch["dt"][:, t]),
            "velocity": embed_continuous(p, "velocity", batch["vel"][:, t]),
        }
        valid = batch["valid"][:, t]
        fh = hidden_projection(p, cfg, state[-1], train_mode, rng)
        for i, modality in enumerate(MODALITIES):
            z = fh
            for j, src in enumerate(MODALITIES):
                col = masks[:, t, i, j]
                if col.any():
                    z = z + col[:, None] * emb[src]
            dist = head_forward(p, cfg, modality, z, train_mode, rng)
            if modality == "instrument":
                lp = categorical_log_prob(dist, inst_idx[:, t])
            elif modality == "pitch":
                lp = categorical_log_prob(dist, batch["pitch"][:, t])
            elif modality == "time":
                lp = dmol_bin_log_prob(dist, batch["dt"][:, t])
            else:
                lp = dmol_bin_log_prob(dist, batch["vel"][:, t])
            sums[modality] = sums[modality] + ad.sum_(lp * (-valid))

        x = emb["instrument"] + emb["pitch"] + emb["time"] + emb["velocity"]
        state, top = gru_step(p, cfg, state, x)
        logit = eos_logit(p, top)
        # BCE with logits: softplus(x) - x*y, masked to valid steps
        eos_sum = eos_sum + ad.sum_((ad.softplus(logit)
                                     - logit * batch["eos"][:, t]) * valid)

    total = sums["instrument"] + sums["pitch"] + sums["time"] + sums["velocity"]
    loss = (total + eos_weight * eos_sum) * (1.0 / n_valid)
    logs = {m: float(ad.val(sums[m])) / n_valid for m in MODALITIES}
    logs["eos"] = float(ad.val(eos_sum)) / n_valid
    logs["total"] = float(ad.val(total)) / n_valid
    return loss, logs


def zero_grads(params: ModelParameters):
    for t in params.tensors.values():
        t.grad = None


def check_gradients(params: ModelParameters):
    bad = [k for k, t in params.tensors.items()
           if t.grad is not None and not np.isfinite(t.grad).all()]
    if bad:
        raise GradientError(f"non-finite gradient in: {', '.join(sorted(bad))}")


def clip_gradients(params: ModelParameters, max_norm: float) -> float:
    """Global L2 clip; returns the pre-clip norm."""
    sq = 0.0
    for t in params.tensors.values():
        if t.grad is not None:
            sq += float((t.grad * t.grad).sum())
    norm = math.sqrt(sq)
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        for t in params.tensors.values():
            if t.grad is not None:
                t.grad *= scale
    return norm


def adamw_init(params: ModelParameters) -> OptimizerState:
    return OptimizerState(
        m={k: np.zeros_like(t.data) for k, t in params.tensors.items()},
        v={k: np.zeros_like(t.data) for k, t in params.tensors.items()},
        step=0)


def adamw_step(params: ModelParameters, state: OptimizerState, cfg: TrainConfig):
    """One decoupled-weight-decay Adam update."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    for name, p in params.tensors.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        m_hat = m / bc1
        v_hat = v / bc2
        p.data -= cfg.lr * cfg.weight_decay * p.data
        p.data -= cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
    params.invalidate()


def split_corpus(seqs: list[TokenSeq], val_fraction: float,
                 rng: np.random.Generator):
    """Deterministic train/validation split by sequence."""
    order = rng.permutation(len(seqs))
    n_val = int(round(len(seqs) * val_fraction))
    if len(seqs) > 1:
        n_val = min(max(n_val, 1), len(seqs) - 1)
    else:
        n_val = 0
    val = [seqs[i] for i in order[:n_val]]
    train = [seqs[i] for i in order[n_val:]]
    return train, val


def validation_nll(params: ModelParameters, cfg: ModelConfig,
                   seqs: list[TokenSeq], eos_weight: float = 1.0) -> float:
    """Unconditioned mean event NLL over whole sequences."""
    if not seqs:
        return float("nan")
    p = params.view(train=False)
    tot, n = 0.0, 0
    for s in seqs:
        if len(s) == 0:
            continue
        batch = batch_from_seq(s)
        masks = full_mask(1, len(s))
        _, logs = window_nll(p, cfg, batch, masks, eos_weight=eos_weight)
        tot += logs["total"] * len(s)
        n += len(s)
    return tot / max(n, 1)


def train(params: ModelParameters, seqs: list[TokenSeq], tcfg: TrainConfig,
          out_dir: str | None = None, callback=None) -> list[dict]:
    """Run the training loop; returns the per-epoch history."""
    rng = np.random.default_rng(tcfg.seed)
    train_seqs, val_seqs = split_corpus(seqs, tcfg.val_fraction, rng)
    if not train_seqs:
        raise ValueError("no training sequences")
    opt = adamw_init(params)
    cfg = params.config
    history = []
    csv_path = os.path.join(out_dir, "loss_history.csv") if out_dir else None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    for epoch in range(tcfg.epochs):
        length = tcfg.window_length + tcfg.window_growth * epoch
        ep_logs = []
        for _ in range(tcfg.steps_per_epoch):
            batch = make_batch(train_seqs, length, tcfg.batch_size, rng)
            masks = sample_masks(rng, tcfg.batch_size, length)
            zero_grads(params)
            loss, logs = window_nll(params.view(train=True), cfg, batch, masks,
                                    train_mode=True, rng=rng,
                                    eos_weight=tcfg.eos_weight)
            if not np.isfinite(ad.val(loss)):
                raise GradientError(f"non-finite loss at step {opt.step + 1}")
            loss.backward()
            check_gradients(params)
            logs["grad_norm"] = clip_gradients(params, tcfg.clip_norm)
            adamw_step(params, opt, tcfg)
            ep_logs.append(logs)
        row = {"epoch": epoch, "step": opt.step, "window": length}
        for k in ("total", "instrument", "pitch", "time", "velocity",
                  "eos", "grad_norm"):
            row[k] = float(np.mean([lg[k] for lg in ep_logs]))
        row["val"] = validation_nll(params, cfg, val_seqs, tcfg.eos_weight)
        history.append(row)
        log.info("epoch %d: train %.4f val %.4f (window %d)",
                 epoch, row["total"], row["val"], length)
        if out_dir:
            save_checkpoint(os.path.join(out_dir, f"ckpt_{epoch:04d}.nckp"),
                            params, opt, extra={"epoch": epoch})
            new = not os.path.exists(csv_path)
            with open(csv_path, "a", newline="") as f:
                w = csv.DictWriter(f, fieldnames=list(row))
                if new:
                    w.writeheader()
                w.writerow(row)
        if callback is not None:
            callback(epoch, row)
    return history


# -- evaluation tables -------------------------------------------------------


def subset_table(params: ModelParameters, seqs: list[TokenSeq]) -> dict:
    """Mean NLL of each modality under each conditioning subset.

    Keys are (target, cond) with cond a sorted tuple of modality names;
    8 subsets of the other three modalities per target.
    """
    p = params.view(train=False)
    cfg = params.config
    out = {}
    for pattern in range(8):
        rows = {}
        keys = {}
        for i in range(4):
            others = [j for j in range(4) if j != i]
            srcs = [others[b] for b in range(3) if pattern >> b & 1]
            rows[i] = srcs
            keys[i] = tuple(sorted(MODALITIES[j] for j in srcs))
        sums = {i: 0.0 for i in range(4)}
        n = 0
        for s in seqs:
            if len(s) == 0:
                continue
            batch = batch_from_seq(s)
            _, logs = window_nll(p, cfg, batch, full_mask(1, len(s), rows))
            for i in range(4):
                sums[i] += logs[MODALITIES[i]] * len(s)
            n += len(s)
        for i in range(4):
            out[(MODALITIES[i], keys[i])] = sums[i] / max(n, 1)
    return out


def chain_nll(params: ModelParameters, seq: TokenSeq, order) -> tuple[float, int]:
    """Total NLL of a sequence under one within-event factorization order.

    order is a permutation of modality indices; each modality conditions
    on all earlier ones. Returns (total nats, event count).
    """
    p = params.view(train=False)
    cfg = params.config
    rows = {order[k]: [order[j] for j in range(k)] for k in range(len(order))}
    batch = batch_from_seq(seq)
    _, logs = window_nll(p, cfg, batch, full_mask(1, len(seq), rows))
    return logs["total"] * len(seq), len(seq)


def permutation_table(params: ModelParameters, seqs: list[TokenSeq],
                      n_boot: int = 200, seed: int = 0) -> dict:
    """Mean NLL per event for all 24 factorization orders, with a
    sequence-level bootstrap confidence interval."""
    rng = np.random.default_rng(seed)
    out = {}
    usable = [s for s in seqs if len(s) > 0]
    for order in itertools.permutations(range(4)):
        tot = np.zeros(len(usable))
        cnt = np.zeros(len(usable))
        for k, s in enumerate(usable):
            tot[k], cnt[k] = chain_nll(params, s, order)
        mean = tot.sum() / cnt.sum()
        if len(usable) > 1:
            idx = rng.integers(0, len(usable), size=(n_boot, len(usable)))
            boots = tot[idx].sum(axis=1) / np.maximum(cnt[idx].sum(axis=1), 1)
            lo, hi = np.percentile(boots, [2.5, 97.5])
        else:
            lo = hi = mean
        name = tuple(MODALITIES[i] for i in order)
        out[name] = (mean, float(lo), float(hi))
    return out
