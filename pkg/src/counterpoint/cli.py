"""Command-line entry point: train, sample, inpaint, evaluate, selftest.

Every flag has a documented default; a JSON config file can supply defaults, with
explicit flags taking precedence. Exit codes: 0 success, 1 argument/validation
problems, 2 runtime failures.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import evaluation as E
from . import model as M
from . import sampling as S
from . import training as T
from .pianoroll import (ContextMask, Pianoroll, RESOLUTION_STEPS, VOICE_NAMES,
                        load_dataset)
from .midiio import to_midi


class UsageError(Exception):
    """Bad arguments or inputs; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    parser = _Parser(prog="counterpoint",
                     description="Four-voice counterpoint model: masked training, "
                                 "Gibbs sampling, framewise likelihood evaluation.")
    parser.add_argument("--config", help="JSON file of flag defaults "
                                         "(explicit flags win)")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_model_flags(p):
        p.add_argument("--num-layers", type=int, default=16,
                       help="convolution layers (default 16; full scale 64)")
        p.add_argument("--num-channels", type=int, default=64,
                       help="hidden channels (default 64; full scale 128)")
        p.add_argument("--kernel-size", type=int, default=3,
                       help="square kernel span, odd (default 3)")

    p = sub.add_parser("train", help="train a model and write checkpoints")
    p.add_argument("--dataset", required=True)
    p.add_argument("--outdir", required=True)
    p.add_argument("--resolution", choices=sorted(RESOLUTION_STEPS), default="sixteenth")
    add_model_flags(p)
    p.add_argument("--crop-length", type=int, default=32,
                   help="training crop in steps (default 32; full scale 128)")
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--learning-rate", type=float, default=1e-3)
    p.add_argument("--beta1", type=float, default=0.9)
    p.add_argument("--beta2", type=float, default=0.999)
    p.add_argument("--adam-epsilon", type=float, default=1e-8)
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--checkpoint-every", type=int, default=250)
    p.add_argument("--dtype", choices=("float32", "float64"), default="float64")
    p.add_argument("--target-loss", type=float, default=None,
                   help="stop early when the trailing mean loss drops below this")
    p.add_argument("--valid-orderings", type=int, default=2,
                   help="orderings for validation NLL at checkpoints (0 disables)")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("sample", help="generate scores from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--outdir", required=True)
    p.add_argument("--sampler", choices=S.STRATEGIES, default="gibbs-independent")
    p.add_argument("--length", type=int, default=32, help="timesteps to generate")
    p.add_argument("--count", type=int, default=1, help="number of samples")
    p.add_argument("--steps", type=int, default=None,
                   help="Gibbs steps (default: voices * length)")
    p.add_argument("--alpha-max", type=float, default=0.9)
    p.add_argument("--alpha-min", type=float, default=0.05)
    p.add_argument("--eta", type=float, default=0.75)
    p.add_argument("--rho", type=float, default=0.0,
                   help="context inclusion probability for gibbs-ancestral")
    p.add_argument("--resolution", choices=sorted(RESOLUTION_STEPS), default="sixteenth")
    p.add_argument("--tempo", type=float, default=120.0)
    p.add_argument("--trace", action="store_true", help="write per-step trace JSONL")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("inpaint", help="complete a partial score")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="piece JSON: {resolution, frames}")
    p.add_argument("--outdir", required=True)
    p.add_argument("--fix", required=True,
                   help="cells to keep, e.g. 'voice:soprano' or 'frames:0-7,frames:24-31' "
                        "or 'every:4'; comma-separated parts are unioned")
    p.add_argument("--sampler", choices=S.STRATEGIES, default="gibbs-independent")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--alpha-max", type=float, default=0.9)
    p.add_argument("--alpha-min", type=float, default=0.05)
    p.add_argument("--eta", type=float, default=0.75)
    p.add_argument("--rho", type=float, default=0.0)
    p.add_argument("--tempo", type=float, default=120.0)
    p.add_argument("--trace", action="store_true")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("evaluate", help="framewise NLL of a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--resolution", choices=sorted(RESOLUTION_STEPS), default="sixteenth")
    p.add_argument("--split", default="test")
    p.add_argument("--orderings", type=int, default=5)
    p.add_argument("--mode", choices=("random", "chronological", "both"),
                   default="random")
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("selftest", help="run the built-in oracle checks")
    p.add_argument("--quick", action="store_true", help="smaller sample sizes")

    return parser


def parse_args(argv):
    parser = build_parser()
    probe = _Parser(add_help=False)
    probe.add_argument("--config")
    known, _ = probe.parse_known_args(argv)
    if known.config:
        try:
            with open(known.config) as fh:
                defaults = json.load(fh)
        except (OSError, json.JSONDecodeError) as e:
            raise UsageError(f"cannot read config file: {e}")
        parser.set_defaults(**{k.replace("-", "_"): v for k, v in defaults.items()})
    return parser.parse_args(argv)


def _load_piece(path):
    with open(path) as fh:
        raw = json.load(fh)
    if not isinstance(raw, dict) or "frames" not in raw:
        raise UsageError("piece JSON must contain 'resolution' and 'frames'")
    res = RESOLUTION_STEPS.get(raw.get("resolution"))
    if res is None:
        raise UsageError(f"unknown resolution {raw.get('resolution')!r}")
    return Pianoroll.from_frames(raw["frames"], resolution=res)


def _write_piece(roll, path):
    name = {v: k for k, v in RESOLUTION_STEPS.items()}[roll.resolution]
    with open(path, "w") as fh:
        json.dump({"resolution": name, "frames": roll.to_frames()}, fh,
                  separators=(",", ":"), sort_keys=True)


def parse_fix_spec(spec, shape):
    """Mask mini-language: union of voice:<name>, frames:<a>-<b>, every:<k> parts."""
    voices, steps = shape
    mask = np.zeros(shape, dtype=bool)
    for part in spec.split(","):
        part = part.strip()
        if not part:
            continue
        kind, _, value = part.partition(":")
        if kind == "voice":
            if value not in VOICE_NAMES:
                raise UsageError(f"unknown voice {value!r}; choose from {VOICE_NAMES}")
            mask[VOICE_NAMES.index(value), :] = True
        elif kind == "frames":
            a, _, b = value.partition("-")
            try:
                lo, hi = int(a), int(b)
            except ValueError:
                raise UsageError(f"bad frame range {value!r}; expected a-b")
            if not (0 <= lo <= hi < steps):
                raise UsageError(f"frame range {value!r} outside 0..{steps - 1}")
            mask[:, lo:hi + 1] = True
        elif kind == "every":
            try:
                k = int(value)
            except ValueError:
                raise UsageError(f"bad stride {value!r}")
            if k < 1:
                raise UsageError("every:<k> needs k >= 1")
            mask[:, ::k] = True
        else:
            raise UsageError(f"unknown mask part {part!r}")
    return ContextMask(mask)


def _schedule(args, shape):
    steps = args.steps if args.steps is not None else shape[0] * shape[1]
    if steps < 1:
        raise UsageError("need at least one sampling step")
    try:
        return S.AnnealSchedule(alpha_min=args.alpha_min, alpha_max=args.alpha_max,
                                eta=args.eta, num_steps=steps)
    except ValueError as e:
        raise UsageError(str(e))


def _run_sampler(params, roll, fixed, args, rng):
    shape = roll.data.shape[:2]
    schedule = _schedule(args, shape)
    if not 0.0 <= args.rho <= 1.0:
        raise UsageError("rho must lie in [0, 1]")
    return S.inpaint(params, roll, fixed, args.sampler, rng, schedule=schedule,
                     rho=args.rho, num_steps=schedule.num_steps, trace=args.trace)


def cmd_train(args):
    dataset = load_dataset(args.dataset, resolution=args.resolution)
    model_config = M.ModelConfig(num_layers=args.num_layers,
                                 num_channels=args.num_channels,
                                 kernel_size=(args.kernel_size, args.kernel_size))
    train_config = T.TrainConfig(
        crop_length=args.crop_length, batch_size=args.batch_size,
        learning_rate=args.learning_rate, beta1=args.beta1, beta2=args.beta2,
        epsilon=args.adam_epsilon, total_steps=args.steps,
        checkpoint_every=args.checkpoint_every, seed=args.seed, dtype=args.dtype,
        target_loss=args.target_loss, valid_orderings=args.valid_orderings)
    result = T.train(dataset, model_config, train_config, outdir=args.outdir)
    losses = [e["loss"] for e in result.log if "loss" in e]
    print(f"trained {result.stopped_at} steps; final loss "
          f"{np.mean(losses[-min(50, len(losses)):]):.4f} nats/cell; "
          f"checkpoint in {args.outdir}")
    return 0


def cmd_sample(args):
    params = M.load_checkpoint(args.checkpoint)
    config = params.config
    if args.length < 1:
        raise UsageError("length must be at least 1")
    os.makedirs(args.outdir, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    resolution = RESOLUTION_STEPS[args.resolution]
    blank = S.constant_pitch_roll(config.instruments, args.length, config.pitches,
                                  resolution=resolution)
    fixed = ContextMask.empty((config.instruments, args.length))
    for k in range(args.count):
        run = _run_sampler(params, blank, fixed, args, rng)
        base = os.path.join(args.outdir, f"sample_{k:02d}")
        _write_piece(run.roll, base + ".json")
        to_midi(run.roll, base + ".mid", tempo_qpm=args.tempo)
        if args.trace and run.trace is not None:
            S.write_trace(run, base + "_trace.jsonl")
        print(f"wrote {base}.json / .mid ({run.model_evaluations} model evaluations)")
    return 0


def cmd_inpaint(args):
    params = M.load_checkpoint(args.checkpoint)
    roll = _load_piece(args.input)
    if roll.instruments != params.config.instruments:
        raise UsageError(f"piece has {roll.instruments} voices, model expects "
                         f"{params.config.instruments}")
    fixed = parse_fix_spec(args.fix, roll.data.shape[:2])
    os.makedirs(args.outdir, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    run = _run_sampler(params, roll, fixed, args, rng)
    base = os.path.join(args.outdir, "inpainted")
    _write_piece(run.roll, base + ".json")
    to_midi(run.roll, base + ".mid", tempo_qpm=args.tempo)
    if args.trace and run.trace is not None:
        S.write_trace(run, base + "_trace.jsonl")
    print(f"wrote {base}.json / .mid ({run.model_evaluations} model evaluations)")
    return 0


def cmd_evaluate(args):
    params = M.load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.dataset, resolution=args.resolution)
    if args.split not in dataset.splits:
        raise UsageError(f"dataset has no split {args.split!r}")
    pieces = dataset.splits[args.split]
    modes = ("random", "chronological") if args.mode == "both" else (args.mode,)
    reports = {}
    for mode in modes:
        cfg = E.EvalConfig(num_orderings=args.orderings, mode=mode, seed=args.seed)
        reports[mode] = json.loads(E.corpus_nll(params, pieces, cfg).to_json())
        print(f"{mode}: {reports[mode]['mean']:.4f} nats/frame "
              f"(sem {reports[mode]['sem']})")
    payload = reports[args.mode] if args.mode != "both" else reports
    with open(args.out, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
    print(f"wrote {args.out}")
    return 0


def cmd_selftest(args):
    from .selftest import run_selftest
    return 0 if run_selftest(quick=args.quick) else 2


def main(argv=None):
    try:
        args = parse_args(sys.argv[1:] if argv is None else argv)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    handlers = {
        "train": cmd_train,
        "sample": cmd_sample,
        "inpaint": cmd_inpaint,
        "evaluate": cmd_evaluate,
        "selftest": cmd_selftest,
    }
    try:
        return handlers[args.command](args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (OSError, ValueError, T.TrainingDiverged) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
