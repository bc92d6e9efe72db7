"""Masked training over all score completions: random contexts, reweighted loss, Adam.

Each step samples a batch of crops, draws one observed-cell subset per example, and
minimizes the per-example mean cross-entropy of the hidden cells. Dividing each
example's summed cross-entropy by the number of hidden cells keeps the loss magnitude
independent of how much context was revealed.
"""

from __future__ import annotations

import json
import time

from dataclasses import dataclass

import numpy as np

from . import model as M
from . import ndtensor as nd
from .pianoroll import ContextMask, apply_mask_batch, random_crop


class TrainingDiverged(RuntimeError):
    def __init__(self, step):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step


@dataclass
class TrainConfig:
    crop_length: int = 32
    batch_size: int = 8
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    total_steps: int = 1000
    checkpoint_every: int = 500
    seed: int = 0
    dtype: str = "float64"
    # Stop once the trailing-window mean loss drops below this; None trains to the end.
    target_loss: float | None = None
    loss_window: int = 100
    # Validation NLL at checkpoint cadence; 0 orderings disables it.
    valid_orderings: int = 0
    valid_pieces: int = 2

    def __post_init__(self):
        for name in ("crop_length", "batch_size", "beta1", "beta2",
                     "epsilon", "total_steps", "checkpoint_every"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.learning_rate < 0:  # zero is a legal no-op update
            raise ValueError("learning_rate must be nonnegative")


@dataclass
class AdamState:
    """First/second moment accumulators mirroring the parameter tensors."""

    m: dict
    v: dict
    step: int = 0

    @classmethod
    def for_parameters(cls, params):
        m = {name: np.zeros_like(t.data) for name, t in params.named_tensors()}
        v = {name: np.zeros_like(t.data) for name, t in params.named_tensors()}
        return cls(m=m, v=v)


def adam_update(params, grads, state, config):
    """One Adam step in place; the canonical bias-corrected update."""
    state.step += 1
    t = state.step
    b1, b2, eps, lr = config.beta1, config.beta2, config.epsilon, config.learning_rate
    for name, tensor in params.named_tensors():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m[name]
        v = state.v[name]
        m[...] = b1 * m + (1 - b1) * g
        v[...] = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        tensor.data[...] = tensor.data - lr * mhat / (np.sqrt(vhat) + eps)


def sample_context(shape, rng):
    """Observed-cell mask with |C| ~ U(1, D) and a uniform subset of that size.

    A draw of the full set is rejected and redrawn, so at least one cell is always
    left to predict.
    """
    i, t = shape
    d = i * t
    if d < 2:
        raise ValueError("need at least 2 cells to leave something to predict")
    k = int(rng.integers(1, d + 1))
    while k == d:
        k = int(rng.integers(1, d + 1))
    flat = rng.permutation(d)[:k]
    mask = np.zeros(d, dtype=bool)
    mask[flat] = True
    return ContextMask(mask.reshape(shape))


def batch_loss(params, rolls, masks, mode="train"):
    """Tape-connected scalar loss over a batch: mean over examples of the per-hidden-cell
    cross-entropy. rolls is (B, I, T, P), masks (B, I, T) boolean context indicators."""
    rolls = np.asarray(rolls)
    masks = np.asarray(masks, dtype=bool)
    b = rolls.shape[0]
    hidden = ~masks
    counts = hidden.sum(axis=(1, 2))
    if np.any(counts == 0):
        raise ValueError("every example must have at least one hidden cell")
    weights = hidden / counts[:, None, None] / b
    masked = apply_mask_batch(rolls, masks, dtype=params.dtype)
    logits = M.forward_logits(params, masked, mode=mode)
    targets = rolls.astype(params.dtype)
    return nd.masked_nll(logits, targets, weights.astype(params.dtype))


def loss(params, roll, mask, mode="train"):
    """Per-example scaled loss and parameter gradients for one roll and context."""
    node = batch_loss(params, roll.data[None], mask.array[None], mode=mode)
    nd.backward(node)
    grads = {name: t.grad for name, t in params.named_tensors() if t.grad is not None}
    return float(node.data), grads


def loss_value(params, rolls, masks, mode="infer"):
    """Per-example scaled losses (B,) without gradients, off the tape."""
    rolls = np.asarray(rolls)
    masks = np.asarray(masks, dtype=bool)
    probs = M.conditionals_batch(params, rolls, masks, mode=mode)
    logp = np.log((probs * rolls).sum(axis=-1))
    hidden = ~masks
    return -(logp * hidden).sum(axis=(1, 2)) / hidden.sum(axis=(1, 2))


def estimate_joint_nll(params, roll, num_samples, rng, mode="infer"):
    """Unbiased Monte-Carlo estimate of the ordering-averaged joint negative
    log-likelihood of one roll.

    Draws context sizes uniformly over {0, ..., D-1} and rescales each sample's
    hidden-cell cross-entropy sum by D / |hidden|, which makes the estimator's
    expectation equal the average over all variable orderings of the chain-rule NLL.
    """
    i, t, _ = roll.data.shape
    d = i * t
    rolls = np.broadcast_to(roll.data, (num_samples,) + roll.data.shape)
    masks = np.zeros((num_samples, i, t), dtype=bool)
    for s in range(num_samples):
        size = int(rng.integers(0, d))
        flat = rng.permutation(d)[:size]
        masks[s].reshape(-1)[flat] = True
    scaled = loss_value(params, rolls, masks, mode=mode)
    return float(np.mean(d * scaled)), float(np.std(d * scaled) / np.sqrt(num_samples))


@dataclass
class TrainResult:
    params: M.ModelParameters
    log: list
    stopped_at: int


def train(dataset, model_config, train_config, outdir=None):
    """Run the training loop; returns final parameters and the per-step log.

    When outdir is given, writes train_log.jsonl (appended per step) and
    checkpoint.ckpt at the checkpoint cadence plus a final one. Aborts with
    TrainingDiverged if the loss goes non-finite.
    """
    cfg = train_config
    dtype = np.dtype(cfg.dtype).type
    seeds = np.random.SeedSequence(cfg.seed).spawn(4)
    rng_init, rng_piece, rng_crop, rng_context = (np.random.default_rng(s) for s in seeds)

    params = M.init_parameters(model_config, rng_init, dtype=dtype)
    adam = AdamState.for_parameters(params)

    pieces = [p for p in dataset.splits["train"] if p.length >= cfg.crop_length]
    if not pieces:
        raise ValueError("no training piece is at least crop_length steps long")

    log_path = None
    log_fh = None
    if outdir is not None:
        import os
        os.makedirs(outdir, exist_ok=True)
        log_path = os.path.join(outdir, "train_log.jsonl")
        log_fh = open(log_path, "w")

    log = []
    window = []
    start = time.perf_counter()
    stopped_at = cfg.total_steps
    try:
        for step in range(1, cfg.total_steps + 1):
            idx = rng_piece.integers(0, len(pieces), size=cfg.batch_size)
            batch = np.empty((cfg.batch_size, model_config.instruments,
                              cfg.crop_length, model_config.pitches), dtype=np.uint8)
            masks = np.empty((cfg.batch_size, model_config.instruments,
                              cfg.crop_length), dtype=bool)
            for b, k in enumerate(idx):
                crop, _ = random_crop(pieces[k], cfg.crop_length, rng_crop)
                batch[b] = crop.data
                masks[b] = sample_context((model_config.instruments, cfg.crop_length),
                                          rng_context).array

            node = batch_loss(params, batch, masks, mode="train")
            value = float(node.data)
            if not np.isfinite(value):
                raise TrainingDiverged(step)
            nd.backward(node)
            grads = {name: t.grad for name, t in params.named_tensors()}
            adam_update(params, grads, adam, cfg)

            entry = {"step": step, "loss": value,
                     "wallclock": time.perf_counter() - start}
            log.append(entry)
            if log_fh is not None:
                log_fh.write(json.dumps(entry, sort_keys=True) + "\n")
                log_fh.flush()

            window.append(value)
            if len(window) > cfg.loss_window:
                window.pop(0)

            at_checkpoint = step % cfg.checkpoint_every == 0
            if at_checkpoint and outdir is not None:
                M.save_checkpoint(params, f"{outdir}/checkpoint.ckpt")
            if at_checkpoint and cfg.valid_orderings > 0 and "valid" in dataset.splits:
                nll = _validation_nll(params, dataset, cfg)
                ventry = {"step": step, "valid_nll": nll}
                log.append(ventry)
                if log_fh is not None:
                    log_fh.write(json.dumps(ventry, sort_keys=True) + "\n")
                    log_fh.flush()

            if (cfg.target_loss is not None and len(window) == cfg.loss_window
                    and float(np.mean(window)) < cfg.target_loss):
                stopped_at = step
                break
    finally:
        if log_fh is not None:
            log_fh.close()

    if outdir is not None:
        M.save_checkpoint(params, f"{outdir}/checkpoint.ckpt")
    return TrainResult(params=params, log=log, stopped_at=stopped_at)


def _validation_nll(params, dataset, cfg):
    from .evaluation import EvalConfig, corpus_nll

    pieces = dataset.splits["valid"][:cfg.valid_pieces]
    report = corpus_nll(params, pieces,
                        EvalConfig(num_orderings=cfg.valid_orderings, mode="random",
                                   seed=cfg.seed))
    return report.mean
