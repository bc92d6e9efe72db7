"""Score representation: binary voice/time/pitch tensors, dataset ingest, crops, masking.

A score is a stack of per-voice pianorolls: data[i, t, p] = 1 means voice i sounds
pitch index p at step t, and every (voice, step) holds exactly one pitch. Pitch index 0
is MIDI pitch `pitch_offset` (36 by default, giving 53 pitch classes up to MIDI 88).
"""

from __future__ import annotations

import json

from dataclasses import dataclass

import numpy as np

MIN_PITCH = 36
MAX_PITCH = 88
NUM_PITCHES = MAX_PITCH - MIN_PITCH + 1

# Steps per quarter note for each named quantization level.
RESOLUTION_STEPS = {"quarter": 1, "eighth": 2, "sixteenth": 4}

VOICE_NAMES = ("soprano", "alto", "tenor", "bass")


class DatasetError(ValueError):
    """Raised when an ingest file violates the canonical dataset format."""


@dataclass(frozen=True)
class Pianoroll:
    """Immutable binary tensor of shape (instruments, timesteps, pitches)."""

    data: np.ndarray
    pitch_offset: int = MIN_PITCH
    resolution: int = 4

    def __post_init__(self):
        d = np.asarray(self.data)
        if d.ndim != 3:
            raise ValueError(f"pianoroll data must have 3 axes, got shape {d.shape}")
        if not np.isin(d, (0, 1)).all():
            raise ValueError("pianoroll entries must be 0 or 1")
        if not (d.sum(axis=2) == 1).all():
            raise ValueError("each voice must sound exactly one pitch per step")
        if self.resolution not in (1, 2, 4):
            raise ValueError(f"resolution must be 1, 2 or 4 steps per quarter, "
                             f"got {self.resolution}")
        d = d.astype(np.uint8)
        d.setflags(write=False)
        object.__setattr__(self, "data", d)

    @property
    def instruments(self):
        return self.data.shape[0]

    @property
    def length(self):
        return self.data.shape[1]

    @property
    def pitches(self):
        return self.data.shape[2]

    @classmethod
    def from_frames(cls, frames, pitch_offset=MIN_PITCH, num_pitches=NUM_PITCHES,
                    resolution=4):
        """Build from a list of frames, each a list of MIDI pitches ordered top voice first."""
        frames = list(frames)
        if not frames:
            raise ValueError("piece has no frames")
        voices = len(frames[0])
        data = np.zeros((voices, len(frames), num_pitches), dtype=np.uint8)
        for t, frame in enumerate(frames):
            if len(frame) != voices:
                raise ValueError(f"frame {t} has {len(frame)} pitches, expected {voices}")
            for i, pitch in enumerate(frame):
                idx = int(pitch) - pitch_offset
                if not 0 <= idx < num_pitches:
                    raise ValueError(f"pitch out of range: {pitch} at frame {t}")
                data[i, t, idx] = 1
        return cls(data, pitch_offset=pitch_offset, resolution=resolution)

    def to_frames(self):
        """Inverse of from_frames: per-step MIDI pitch lists, top voice first."""
        idx = self.data.argmax(axis=2) + self.pitch_offset
        return [[int(idx[i, t]) for i in range(self.instruments)]
                for t in range(self.length)]


@dataclass(frozen=True)
class ContextMask:
    """Set of (instrument, time) cells whose values are observed, as a boolean grid."""

    array: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.array)
        if a.ndim != 2 or a.dtype != np.bool_:
            a = a.astype(bool)
            if a.ndim != 2:
                raise ValueError(f"mask must be 2-d, got shape {a.shape}")
        a = a.copy()
        a.setflags(write=False)
        object.__setattr__(self, "array", a)

    @classmethod
    def empty(cls, shape):
        return cls(np.zeros(shape, dtype=bool))

    @classmethod
    def full(cls, shape):
        return cls(np.ones(shape, dtype=bool))

    @classmethod
    def from_cells(cls, cells, shape):
        a = np.zeros(shape, dtype=bool)
        for i, t in cells:
            if not (0 <= i < shape[0] and 0 <= t < shape[1]):
                raise ValueError(f"cell ({i}, {t}) out of bounds for shape {shape}")
            a[i, t] = True
        return cls(a)

    @property
    def shape(self):
        return self.array.shape

    @property
    def count(self):
        """|C|, the number of observed cells."""
        return int(self.array.sum())

    @property
    def complement_count(self):
        return self.array.size - self.count

    def cells(self):
        return {(int(i), int(t)) for i, t in zip(*np.nonzero(self.array))}

    def union(self, other):
        return ContextMask(self.array | other.array)

    def invert(self):
        return ContextMask(~self.array)


@dataclass(frozen=True)
class Dataset:
    """Named splits of validated pianorolls sharing voice count and pitch range."""

    splits: dict
    resolution: int

    def __post_init__(self):
        pieces = [p for split in self.splits.values() for p in split]
        if not pieces:
            raise DatasetError("dataset has no pieces")
        first = pieces[0]
        for p in pieces:
            if p.instruments != first.instruments or p.pitch_offset != first.pitch_offset:
                raise DatasetError("all pieces must share voice count and pitch offset")
        for name, split in self.splits.items():
            if not split:
                raise DatasetError(f"split '{name}' is empty")

    @property
    def instruments(self):
        return next(iter(self.splits.values()))[0].instruments


def load_dataset(path, resolution="sixteenth"):
    """Read the canonical JSON dataset, dilating coarser material to `resolution`.

    The file stores pieces as frame lists at some source resolution; requesting a finer
    resolution repeats each frame by the step ratio. Requesting something coarser than
    the source is refused rather than downsampled.
    """
    if resolution not in RESOLUTION_STEPS:
        raise DatasetError(f"unknown resolution {resolution!r}")
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as e:
        raise DatasetError(f"malformed JSON in {path}: {e}") from e

    if not isinstance(raw, dict) or "splits" not in raw or "resolution" not in raw:
        raise DatasetError("dataset JSON must have 'resolution' and 'splits' keys")
    source_res = raw["resolution"]
    if source_res not in RESOLUTION_STEPS:
        raise DatasetError(f"unknown source resolution {source_res!r}")
    steps_src = RESOLUTION_STEPS[source_res]
    steps_out = RESOLUTION_STEPS[resolution]
    if steps_out % steps_src != 0:
        raise DatasetError(f"cannot represent {source_res} material at {resolution} "
                           f"resolution")
    repeat = steps_out // steps_src

    splits = {}
    for name, pieces in raw["splits"].items():
        rolls = []
        for k, frames in enumerate(pieces):
            if not frames:
                raise DatasetError(f"{name}[{k}]: piece has no frames")
            for t, frame in enumerate(frames):
                if len(frame) != 4:
                    raise DatasetError(f"{name}[{k}] frame {t}: expected exactly 4 "
                                       f"pitches, got {len(frame)}")
                for pitch in frame:
                    if not MIN_PITCH <= pitch <= MAX_PITCH:
                        raise DatasetError(f"{name}[{k}] frame {t}: pitch out of range: "
                                           f"{pitch}")
            dilated = [frame for frame in frames for _ in range(repeat)]
            rolls.append(Pianoroll.from_frames(dilated, resolution=steps_out))
        splits[name] = rolls
    return Dataset(splits=splits, resolution=steps_out)


def serialize_dataset(dataset, path):
    """Write the canonical JSON form; load_dataset at the same resolution restores it."""
    name = {v: k for k, v in RESOLUTION_STEPS.items()}[dataset.resolution]
    payload = {
        "resolution": name,
        "splits": {
            split: [roll.to_frames() for roll in rolls]
            for split, rolls in dataset.splits.items()
        },
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, separators=(",", ":"), sort_keys=True)


def random_crop(roll, length, rng):
    """Contiguous time slice of exactly `length` steps, start uniform over valid offsets.

    Pieces shorter than the crop come back unchanged with the short flag set; the
    caller decides whether to skip them.
    """
    if length < 1:
        raise ValueError("crop length must be at least 1")
    if roll.length <= length:
        return roll, roll.length < length
    start = int(rng.integers(0, roll.length - length + 1))
    return Pianoroll(roll.data[:, start:start + length, :],
                     pitch_offset=roll.pitch_offset,
                     resolution=roll.resolution), False


def apply_mask(roll, mask):
    """Masked model input of shape (2I, T, P): context-gated data plus the mask itself.

    Channels 0..I-1 carry the score zeroed outside the observed cells; channels
    I..2I-1 broadcast the cell indicator across pitch.
    """
    data = roll.data if isinstance(roll, Pianoroll) else np.asarray(roll)
    m = mask.array if isinstance(mask, ContextMask) else np.asarray(mask, dtype=bool)
    if m.shape != data.shape[:2]:
        raise ValueError(f"mask shape {m.shape} does not match roll {data.shape[:2]}")
    i, t, p = data.shape
    out = np.zeros((2 * i, t, p), dtype=np.float64)
    out[:i] = data * m[:, :, None]
    out[i:] = np.broadcast_to(m[:, :, None], (i, t, p))
    return out


def apply_mask_batch(rolls, masks, dtype=np.float64, channels_last=False):
    """Vectorized apply_mask over a batch: (B, I, T, P) and (B, I, T) to (B, 2I, T, P),
    or (B, T, P, 2I) when channels_last is set."""
    rolls = np.asarray(rolls)
    masks = np.asarray(masks, dtype=bool)
    b, i, t, p = rolls.shape
    if channels_last:
        out = np.zeros((b, t, p, 2 * i), dtype=dtype)
        m = masks.transpose(0, 2, 1)[:, :, None, :]
        out[..., :i] = rolls.transpose(0, 2, 3, 1) * m
        out[..., i:] = np.broadcast_to(m, (b, t, p, i))
        return out
    out = np.zeros((b, 2 * i, t, p), dtype=dtype)
    out[:, :i] = rolls * masks[:, :, :, None]
    out[:, i:] = np.broadcast_to(masks[:, :, :, None], (b, i, t, p))
    return out
