"""Framewise negative log-likelihood with ordering ensembles.

A piece is scored frame by frame: within a frame the model conditions on its own
sampled guesses for the voices already visited, and once a frame is finished the
guesses are replaced by ground truth before moving on. Repeating this over several
frame/voice orderings and averaging the per-frame likelihoods (not the log-likelihoods)
treats the orderings as a mixture, which rewards ensembles whose members complement
each other.
"""

from __future__ import annotations

import json

from dataclasses import dataclass

import numpy as np

from . import model as M

# Probabilities are floored here before the log so a zero-probability ground-truth
# pitch yields a large finite penalty instead of destroying downstream averages.
PROB_FLOOR = 1e-300


@dataclass(frozen=True)
class EvalConfig:
    num_orderings: int = 5
    mode: str = "random"
    seed: int = 0

    def __post_init__(self):
        if self.num_orderings < 1:
            raise ValueError("need at least one ordering")
        if self.mode not in ("random", "chronological"):
            raise ValueError(f"mode must be 'random' or 'chronological', got {self.mode!r}")


@dataclass
class PieceEval:
    """Framewise NLL of one piece plus the raw per-ordering log-likelihood terms."""

    nll: float
    terms: np.ndarray  # (M, I, T) log-probabilities of the ground truth


@dataclass
class EvalReport:
    mean: float
    sem: float | None
    per_piece: list
    config: EvalConfig

    def to_json(self):
        return json.dumps({
            "mean": self.mean,
            "sem": self.sem,
            "per_piece": self.per_piece,
            "config": {
                "num_orderings": self.config.num_orderings,
                "mode": self.config.mode,
                "seed": self.config.seed,
            },
        }, sort_keys=True, indent=2)


def log_mean_exp(values, axis):
    """Numerically stable log of the mean of exponentials along an axis."""
    values = np.asarray(values, dtype=np.float64)
    vmax = values.max(axis=axis, keepdims=True)
    vmax = np.where(np.isfinite(vmax), vmax, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.mean(np.exp(values - vmax), axis=axis))
    return out + np.squeeze(vmax, axis=axis)


def _draw_orderings(shape_it, config, rng):
    """Pre-drawn frame orders, voice orders and guess uniforms for one piece."""
    i, t = shape_it
    m = config.num_orderings
    if config.mode == "chronological":
        frame_orders = np.tile(np.arange(t), (m, 1))
    else:
        frame_orders = np.stack([rng.permutation(t) for _ in range(m)])
    voice_orders = np.stack([[rng.permutation(i) for _ in range(t)] for _ in range(m)])
    uniforms = rng.random((m, t, i))
    return frame_orders, voice_orders, uniforms


def _terms_for_rows(predict_at, rolls, frame_orders, voice_orders, uniforms):
    """Ground-truth log-probabilities for a batch of independent evaluation rows.

    rolls: (R, I, T, P) with each row scored under its own pre-drawn ordering.
    predict_at(xhat, ctx, t_idx) returns (R, I, P) conditionals at one column per row.
    Returns terms (R, I, T).
    """
    rows, i, t, p = rolls.shape
    terms = np.zeros((rows, i, t))
    ctx = np.zeros((rows, i, t), dtype=bool)
    xhat = rolls.copy()
    ar = np.arange(rows)
    for l in range(t):
        t_l = frame_orders[:, l]
        for k in range(i):
            i_k = voice_orders[:, l, k]
            probs = predict_at(xhat, ctx, t_l)
            pi = probs[ar, i_k]
            true_prob = (pi * rolls[ar, i_k, t_l]).sum(axis=1)
            terms[ar, i_k, t_l] = np.log(np.maximum(true_prob, PROB_FLOOR))
            cdf = np.cumsum(pi, axis=1)
            guess = np.minimum((uniforms[:, l, k, None] > cdf).sum(axis=1), p - 1)
            xhat[ar, i_k, t_l] = 0
            xhat[ar, i_k, t_l, guess] = 1
            ctx[ar, i_k, t_l] = True
        # Frame finished: guesses give way to ground truth for later frames.
        xhat[ctx] = rolls[ctx]
    return terms


def _nll_from_terms(terms_mit):
    """Algorithm output for one piece: terms (M, I, T) -> scalar framewise NLL."""
    per_frame = terms_mit.sum(axis=1)  # (M, T)
    mixed = log_mean_exp(per_frame, axis=0)  # (T,)
    return float(-mixed.mean())


def _column_predictor(params):
    plan = params.plan()

    def predict_at(xhat, ctx, t_idx):
        return M.conditionals_at(params, xhat, ctx, t_idx, plan=plan)
    return predict_at


def _wrap_full_grid_predictor(predict):
    """Adapt an injected full-grid predictor to the column interface."""
    def predict_at(xhat, ctx, t_idx):
        probs = predict(xhat, ctx)
        return probs[np.arange(probs.shape[0]), :, t_idx]
    return predict_at


def framewise_nll(params, roll, config, predict=None):
    """Score one piece; see module docstring for the procedure."""
    return _evaluate_pieces(params, [roll], config, predict)[0]


def _evaluate_pieces(params, rolls, config, predict=None):
    """PieceEval for each roll; pieces of equal length share batched forward passes.

    Each piece consumes its own random stream derived from the config seed, so
    results do not depend on how pieces are grouped into batches.
    """
    predict_at = (_wrap_full_grid_predictor(predict) if predict is not None
                  else _column_predictor(params))
    m = config.num_orderings
    seeds = np.random.SeedSequence(config.seed).spawn(len(rolls))
    drawn = []
    for roll, seed in zip(rolls, seeds):
        rng = np.random.default_rng(seed)
        shape = (roll.data.shape[0], roll.data.shape[1])
        drawn.append(_draw_orderings(shape, config, rng))

    results = [None] * len(rolls)
    by_length = {}
    for idx, roll in enumerate(rolls):
        by_length.setdefault(roll.data.shape[1], []).append(idx)

    for _, indices in sorted(by_length.items()):
        stacked = np.concatenate([np.repeat(rolls[i].data[None], m, axis=0)
                                  for i in indices])
        frame_orders = np.concatenate([drawn[i][0] for i in indices])
        voice_orders = np.concatenate([drawn[i][1] for i in indices])
        uniforms = np.concatenate([drawn[i][2] for i in indices])
        terms = _terms_for_rows(predict_at, stacked, frame_orders, voice_orders,
                                uniforms)
        for slot, idx in enumerate(indices):
            piece_terms = terms[slot * m:(slot + 1) * m]
            results[idx] = PieceEval(nll=_nll_from_terms(piece_terms), terms=piece_terms)
    return results


def corpus_nll(params, pieces, config, predict=None):
    """Mean and standard error of the framewise NLL across pieces."""
    if not pieces:
        raise ValueError("no pieces to evaluate")
    evals = _evaluate_pieces(params, list(pieces), config, predict)
    values = np.array([e.nll for e in evals])
    sem = float(values.std(ddof=1) / np.sqrt(len(values))) if len(values) > 1 else None
    return EvalReport(mean=float(values.mean()), sem=sem,
                      per_piece=[float(v) for v in values], config=config)


def sample_nll(params, samples, config, predict=None):
    """NLL under the model of generated rolls; same scoring path as corpus_nll."""
    return corpus_nll(params, samples, config, predict)
