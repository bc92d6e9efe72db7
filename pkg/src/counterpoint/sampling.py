"""Generation procedures over trained conditionals.

Three samplers share the same conditioning machinery:

* ancestral: pick an unfilled cell uniformly at random, sample its pitch from the
  model given everything filled so far, repeat. One forward pass per cell.
* independent blocked Gibbs: repeatedly hide a random subset of cells and redraw them
  all at once from the conditionals given the survivors. The masking probability is
  annealed from near-total rewriting down to single-site touch-ups, which amortizes
  the error of treating the hidden cells as independent. One forward pass per step.
* ancestral blocked Gibbs: per step, keep each cell with probability rho and regrow
  the rest ancestrally. Expensive (a forward pass per regrown cell) but interpolates
  between pure ancestral sampling (rho = 0) and keeping everything (rho = 1).

Cells pinned by a `fixed` mask are never rewritten, which is all score inpainting
needs: harmonization pins voices, bridging pins both ends, upsampling pins a frame
grid. All samplers run many chains in lockstep when given a batch; each chain owns
its own mask draws.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import model as M
from .pianoroll import ContextMask, Pianoroll


@dataclass(frozen=True)
class AnnealSchedule:
    """Masking-probability decay for independent blocked Gibbs."""

    alpha_min: float = 0.05
    alpha_max: float = 0.9
    eta: float = 0.75
    num_steps: int = 128

    def __post_init__(self):
        if not 0.0 <= self.alpha_min <= self.alpha_max <= 1.0:
            raise ValueError("need 0 <= alpha_min <= alpha_max <= 1")
        if not 0.0 < self.eta <= 1.0:
            raise ValueError("eta must lie in (0, 1]")
        if self.num_steps < 1:
            raise ValueError("need at least one step")


def default_schedule(instruments, steps):
    """Rule-of-thumb chain length: one step per cell."""
    return AnnealSchedule(num_steps=instruments * steps)


def anneal_alpha(n, schedule):
    """Masking probability at step n: linear decay clamped at alpha_min."""
    s = schedule
    return max(s.alpha_min,
               s.alpha_max - n * (s.alpha_max - s.alpha_min) / (s.eta * s.num_steps))


@dataclass
class TraceStep:
    step: int
    alpha: float
    mask: np.ndarray          # cells rewritten this step
    roll: np.ndarray          # state after the step


@dataclass
class SamplerRun:
    roll: Pianoroll
    trace: list | None
    model_evaluations: int


def write_trace(run, path):
    """Sampler trace as JSON lines: {step, alpha, masked_cell_count}."""
    import json
    with open(path, "w") as fh:
        for entry in run.trace or []:
            fh.write(json.dumps({
                "step": entry.step,
                "alpha": entry.alpha,
                "masked_cell_count": int(entry.mask.sum()),
            }, sort_keys=True) + "\n")


def _sample_cells(probs, u):
    """Inverse-CDF draw along the last axis for every leading index."""
    cdf = np.cumsum(probs, axis=-1)
    idx = (u[..., None] > cdf).sum(axis=-1)
    return np.minimum(idx, probs.shape[-1] - 1)


def _fixed_array(fixed, shape):
    if fixed is None:
        return np.zeros(shape, dtype=bool)
    arr = fixed.array if isinstance(fixed, ContextMask) else np.asarray(fixed, dtype=bool)
    if arr.shape != shape:
        raise ValueError(f"fixed mask shape {arr.shape} does not match roll {shape}")
    return arr


def ancestral_fill_batch(params, rolls, context, rng):
    """Fill every cell outside `context`, one random cell per chain per forward pass.

    rolls (B, I, T, P) is modified in place; context (B, I, T) marks cells to keep.
    Returns the number of forward passes, which is the largest per-chain fill count.
    Each pass evaluates conditionals only around each chain's chosen column.
    """
    b, i, t, p = rolls.shape
    ctx = context.copy()
    forwards = 0
    rows = np.arange(b)
    plan = params.plan()
    while True:
        remaining = ~ctx.reshape(b, -1)
        counts = remaining.sum(axis=1)
        if not counts.any():
            break
        # Uniformly pick the k-th unfilled cell in each chain that still has one.
        k = np.floor(rng.random(b) * np.maximum(counts, 1)).astype(int)
        cum = np.cumsum(remaining, axis=1)
        flat_choice = (cum == (k + 1)[:, None]).argmax(axis=1)
        ii = flat_choice // t
        tt = flat_choice % t

        probs = M.conditionals_at(params, rolls, ctx, tt, plan=plan)  # (B, I, P)
        forwards += 1
        u = rng.random(b)

        active = counts > 0
        pi = probs[rows, ii]
        pitch = _sample_cells(pi, u)
        ar, ai, at, ap = rows[active], ii[active], tt[active], pitch[active]
        rolls[ar, ai, at] = 0
        rolls[ar, ai, at, ap] = 1
        ctx[ar, ai, at] = True
    return forwards


def ancestral_sample(params, roll, fixed, rng):
    """Complete a roll by randomized-order ancestral sampling; fixed cells survive."""
    shape = roll.data.shape[:2]
    ctx = _fixed_array(fixed, shape)
    rolls = roll.data[None].copy()
    ancestral_fill_batch(params, rolls, ctx[None].copy(), rng)
    return Pianoroll(rolls[0], pitch_offset=roll.pitch_offset, resolution=roll.resolution)


def bootstrap_batch(params, rolls, fixed, rng):
    """One forward pass seeds every non-fixed cell independently from the conditionals
    given the fixed context (the empty context when nothing is fixed)."""
    b, i, t, p = rolls.shape
    probs = M.conditionals_batch(params, rolls, fixed)
    pitch = _sample_cells(probs, rng.random((b, i, t)))
    onehot = np.zeros_like(rolls)
    np.put_along_axis(onehot, pitch[..., None], 1, axis=-1)
    keep = fixed[..., None]
    rolls[...] = np.where(keep, rolls, onehot)
    return 1


def gibbs_independent_batch(params, rolls, fixed, schedule, rng, trace=None):
    """Annealed independent blocked Gibbs on a batch of chains, in place.

    Exactly schedule.num_steps forward passes. Fixed cells are never masked.
    """
    b, i, t, p = rolls.shape
    for n in range(schedule.num_steps):
        alpha = anneal_alpha(n, schedule)
        resample = (rng.random((b, i, t)) < alpha) & ~fixed
        ctx = ~resample
        probs = M.conditionals_batch(params, rolls, ctx)
        pitch = _sample_cells(probs, rng.random((b, i, t)))
        onehot = np.zeros_like(rolls)
        np.put_along_axis(onehot, pitch[..., None], 1, axis=-1)
        rolls[...] = np.where(resample[..., None], onehot, rolls)
        if trace is not None:
            trace.append(TraceStep(step=n, alpha=alpha, mask=resample[0].copy(),
                                   roll=rolls[0].copy()))
    return schedule.num_steps


def gibbs_independent(params, roll, fixed, schedule, rng, trace=False):
    """Single-chain independent blocked Gibbs over a fully populated roll."""
    shape = roll.data.shape[:2]
    fixed_arr = _fixed_array(fixed, shape)
    rolls = roll.data[None].copy()
    steps = [] if trace else None
    evals = gibbs_independent_batch(params, rolls, fixed_arr[None], schedule, rng,
                                    trace=steps)
    out = Pianoroll(rolls[0], pitch_offset=roll.pitch_offset, resolution=roll.resolution)
    return SamplerRun(roll=out, trace=steps, model_evaluations=evals)


def gibbs_ancestral_batch(params, rolls, fixed, rho, num_steps, rng, trace=None):
    """Blocked Gibbs with Bernoulli(rho) context kept per step and ancestral regrowth."""
    if not 0.0 <= rho <= 1.0:
        raise ValueError("rho must lie in [0, 1]")
    if num_steps < 1:
        raise ValueError("need at least one step")
    b, i, t, p = rolls.shape
    evals = 0
    for n in range(num_steps):
        keep = (rng.random((b, i, t)) < rho) & ~fixed
        ctx = fixed | keep
        evals += ancestral_fill_batch(params, rolls, ctx, rng)
        if trace is not None:
            trace.append(TraceStep(step=n, alpha=1.0 - rho, mask=~ctx[0],
                                   roll=rolls[0].copy()))
    return evals


def gibbs_ancestral(params, roll, fixed, rho, num_steps, rng, trace=False):
    """Single-chain ancestral blocked Gibbs; rho = 0 with one step is plain ancestral
    sampling, rho = 1 returns the input untouched."""
    shape = roll.data.shape[:2]
    fixed_arr = _fixed_array(fixed, shape)
    rolls = roll.data[None].copy()
    steps = [] if trace else None
    evals = gibbs_ancestral_batch(params, rolls, fixed_arr[None], rho, num_steps, rng,
                                  trace=steps)
    out = Pianoroll(rolls[0], pitch_offset=roll.pitch_offset, resolution=roll.resolution)
    return SamplerRun(roll=out, trace=steps, model_evaluations=evals)


STRATEGIES = ("nade", "gibbs-independent", "gibbs-ancestral")


def inpaint(params, roll, fixed, strategy, rng, schedule=None, rho=0.0, num_steps=None,
            trace=False):
    """Complete the non-fixed region of a roll with the chosen sampler.

    Gibbs strategies first seed the non-fixed cells independently from the
    conditionals given the fixed context, then run their chain.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; choose from {STRATEGIES}")
    shape = roll.data.shape[:2]
    fixed_arr = _fixed_array(fixed, shape)

    if strategy == "nade":
        ctx = fixed_arr[None].copy()
        rolls = roll.data[None].copy()
        evals = ancestral_fill_batch(params, rolls, ctx, rng)
        out = Pianoroll(rolls[0], pitch_offset=roll.pitch_offset,
                        resolution=roll.resolution)
        return SamplerRun(roll=out, trace=None, model_evaluations=evals)

    if schedule is None:
        schedule = default_schedule(*shape)
    if num_steps is None:
        num_steps = schedule.num_steps

    rolls = roll.data[None].copy()
    evals = bootstrap_batch(params, rolls, fixed_arr[None], rng)
    steps = [] if trace else None
    if strategy == "gibbs-independent":
        evals += gibbs_independent_batch(params, rolls, fixed_arr[None], schedule, rng,
                                         trace=steps)
    else:
        evals += gibbs_ancestral_batch(params, rolls, fixed_arr[None], rho, num_steps,
                                       rng, trace=steps)
    out = Pianoroll(rolls[0], pitch_offset=roll.pitch_offset, resolution=roll.resolution)
    return SamplerRun(roll=out, trace=steps, model_evaluations=evals)


def constant_pitch_roll(instruments, steps, pitches, pitch_offset=36, resolution=4):
    """Valid placeholder roll for unconditioned sampling; content outside the fixed
    context never reaches the model."""
    data = np.zeros((instruments, steps, pitches), dtype=np.uint8)
    data[:, :, 0] = 1
    return Pianoroll(data, pitch_offset=pitch_offset, resolution=resolution)
